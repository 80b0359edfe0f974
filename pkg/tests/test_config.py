import pytest

from pukit.config import NetworkSpec, TrainConfig, dump_config, load_config, parse_config
from pukit.errors import ConfigError
from pukit.loss import LossConfig


def test_defaults():
    cfg = parse_config("")
    assert cfg == TrainConfig()
    net = cfg.network.build()
    assert net.input_count == 1024 and net.upsample_rate == 4
    assert cfg.loss.k == 5 and cfg.loss.h == 0.03 and cfg.loss.alpha == 0.01 and cfg.loss.beta == 1e-5


def test_parse_values():
    cfg = parse_config(
        "[network]\ninput_count = 64\nwidth_divisor = 8\nradii = 0.1, 0.2, 0.3, 0.4\n"
        "[loss]\nrecon = chamfer\nalpha = 0\n"
        "[train]\nepochs = 3\naugment = no\nlearning_rate = 5e-4\n"
    )
    assert cfg.network == NetworkSpec(input_count=64, width_divisor=8, radii=(0.1, 0.2, 0.3, 0.4))
    assert cfg.loss.recon == "chamfer" and cfg.loss.alpha == 0.0
    assert cfg.epochs == 3 and cfg.augment is False and cfg.learning_rate == 5e-4


@pytest.mark.parametrize("text", [
    "[network]\nbogus = 1\n",
    "[extra]\nx = 1\n",
    "[train]\nepochs = many\n",
    "[train]\nepochs = -1\n",
    "[loss]\nrecon = l2\n",
    "[network]\nradii = 0.1, 0.2\n",
    "not an ini file",
])
def test_rejects(text):
    with pytest.raises(ConfigError):
        parse_config(text)


def test_dump_roundtrip(tmp_path):
    cfg = TrainConfig(epochs=7, batch_size=3, augment=False, dtype="float64",
                      network=NetworkSpec(input_count=128, width_divisor=4),
                      loss=LossConfig(recon="emd_auction", alpha=0.02))
    path = tmp_path / "c.ini"
    path.write_text(dump_config(cfg))
    assert load_config(path) == cfg
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg


def test_missing_file(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "nope.ini")
