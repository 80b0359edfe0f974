"""Point-cloud upsampling toolkit: patch data, network, losses and metrics."""

__version__ = "0.1.0"
