"""A small reverse-mode engine for per-point networks.

Layers cache what their backward pass needs during ``forward``; ``backward``
consumes that cache, accumulates parameter gradients and returns the
gradient with respect to the layer input.  The network module chains these
calls in reverse order for its fixed topology.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import CheckpointMismatch, NoForwardRecorded, ShapeMismatch

DEBUG = False


def set_debug(flag: bool) -> None:
    """Enable finiteness checks after every layer forward."""
    global DEBUG
    DEBUG = bool(flag)


class SharedLinear:
    """Per-point affine map ``y = x W^T + b`` with optional ReLU.

    Weights are ``(out_ch, in_ch)`` and initialised uniformly in
    ``+-sqrt(6 / (in_ch + out_ch))``; biases start at zero.
    """

    def __init__(self, name, in_ch, out_ch, rng=None, dtype=np.float32, relu=True):
        self.name = name
        self.in_ch = int(in_ch)
        self.out_ch = int(out_ch)
        self.relu = relu
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(rng)
        bound = np.sqrt(6.0 / (self.in_ch + self.out_ch))
        self.weight = rng.uniform(-bound, bound, (self.out_ch, self.in_ch)).astype(self.dtype)
        self.bias = np.zeros(self.out_ch, dtype=self.dtype)
        self.grad_weight = np.zeros_like(self.weight)
        self.grad_bias = np.zeros_like(self.bias)
        self._cache = None
        self.last_mask = None

    def __repr__(self):
        return f"SharedLinear({self.name!r}, {self.in_ch}->{self.out_ch}, relu={self.relu})"

    def forward(self, x, relu=None):
        relu = self.relu if relu is None else relu
        x = np.asarray(x, dtype=self.dtype)
        if x.ndim != 2 or x.shape[1] != self.in_ch:
            raise ShapeMismatch(
                f"{self.name}: expected (*, {self.in_ch}) input, got {x.shape}"
            )
        y = x @ self.weight.T + self.bias
        mask = None
        if relu:
            mask = y > 0
            y = y * mask
        if DEBUG and not np.all(np.isfinite(y)):
            raise FloatingPointError(f"{self.name}: non-finite activations")
        self._cache = (x, mask)
        self.last_mask = mask
        return y

    def backward(self, grad):
        if self._cache is None:
            raise NoForwardRecorded(f"{self.name}: backward called without a recorded forward")
        x, mask = self._cache
        self._cache = None
        grad = np.asarray(grad, dtype=self.dtype)
        if grad.shape != (len(x), self.out_ch):
            raise ShapeMismatch(
                f"{self.name}: gradient shape {grad.shape} does not match output "
                f"{(len(x), self.out_ch)}"
            )
        if mask is not None:
            grad = grad * mask
        self.grad_weight += grad.T @ x
        self.grad_bias += grad.sum(axis=0, dtype=np.float64).astype(self.dtype)
        return grad @ self.weight

    def zero_grad(self):
        self.grad_weight[...] = 0
        self.grad_bias[...] = 0

    def parameters(self):
        return [(self.weight, self.grad_weight), (self.bias, self.grad_bias)]


def weight_sq_norm(layers) -> float:
    """``sum ||W||^2`` over weight matrices (biases excluded)."""
    return float(sum(np.sum(np.square(l.weight, dtype=np.float64)) for l in layers))


def add_weight_decay_grad(layers, beta: float) -> None:
    """Add the gradient of ``beta * ||W||^2`` to every weight gradient."""
    if beta:
        for l in layers:
            l.grad_weight += (2.0 * beta) * l.weight


@dataclass
class Adam:
    """Adam with bias correction; weight decay enters as ``2 * beta * W``."""

    layers: list
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    moments: dict = field(default_factory=dict)

    def __post_init__(self):
        for l in self.layers:
            if l.name not in self.moments:
                self.moments[l.name] = [
                    np.zeros_like(l.weight), np.zeros_like(l.weight),
                    np.zeros_like(l.bias), np.zeros_like(l.bias),
                ]

    def step(self, weight_decay: float = 0.0) -> None:
        add_weight_decay_grad(self.layers, weight_decay)
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for l in self.layers:
            mw, vw, mb, vb = self.moments[l.name]
            for p, g, m, v in ((l.weight, l.grad_weight, mw, vw), (l.bias, l.grad_bias, mb, vb)):
                m *= self.beta1
                m += (1.0 - self.beta1) * g
                v *= self.beta2
                v += (1.0 - self.beta2) * (g * g)
                p -= (self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)).astype(p.dtype)
            l.zero_grad()


# ----------------------------------------------------------------- grad check


@dataclass
class GradCheckResult:
    max_rel_error: float
    n_checked: int
    n_excluded: int
    worst: tuple | None = None


def relu_signature(layers) -> bytes:
    h = hashlib.sha1()
    for l in layers:
        if l.last_mask is not None:
            h.update(np.packbits(l.last_mask).tobytes())
    return h.digest()


def gradient_check(objective, layers, epsilon=1e-4, signature=None,
                   max_per_tensor=None, rng=None) -> GradCheckResult:
    """Compare analytic gradients against central differences.

    ``objective(backward)`` evaluates the loss (and, when ``backward`` is true,
    fills the layers' gradient buffers).  Parameters whose perturbation flips
    a discrete decision (a ReLU crossing zero or anything reported by
    ``signature()``) are kinks of the loss; they are excluded and counted.
    The error per parameter is ``|a - n| / max(1, |a|, |n|)``.
    """
    rng = np.random.default_rng(rng)

    def sig():
        s = relu_signature(layers)
        return s + (signature() if signature is not None else b"")

    for l in layers:
        l.zero_grad()
    objective(True)
    analytic = {id(p): g.copy() for l in layers for p, g in l.parameters()}
    objective(False)
    base = sig()

    worst, worst_at = 0.0, None
    checked = excluded = 0
    for l in layers:
        for pname, (p, _) in zip(("weight", "bias"), l.parameters()):
            flat = p.reshape(-1)
            idx = np.arange(flat.size)
            if max_per_tensor is not None and flat.size > max_per_tensor:
                idx = np.sort(rng.choice(flat.size, max_per_tensor, replace=False))
            a_all = analytic[id(p)].reshape(-1)
            for i in idx:
                old = flat[i]
                flat[i] = old + epsilon
                fp = objective(False)
                sp = sig()
                flat[i] = old - epsilon
                fm = objective(False)
                sm = sig()
                flat[i] = old
                if sp != base or sm != base:
                    excluded += 1
                    continue
                num = (fp - fm) / (2 * epsilon)
                a = float(a_all[i])
                err = abs(a - num) / max(1.0, abs(a), abs(num))
                checked += 1
                if err > worst:
                    worst, worst_at = err, (l.name, pname, int(i), a, num)
    return GradCheckResult(worst, checked, excluded, worst_at)


# ----------------------------------------------------------------- checkpoints

MAGIC = b"PUNW"
ADAM_MAGIC = b"ADAM"
VERSION = 1


@dataclass
class Checkpoint:
    layers: list  # (name, weight, bias)
    adam: dict | None = None


def save_checkpoint(path, layers, adam: Adam | None = None) -> None:
    """Write the PUNW binary format (little-endian, float32 payloads)."""
    out = bytearray(MAGIC)
    out += struct.pack("<I", VERSION)
    for l in layers:
        name = l.name.encode("utf-8")
        out += struct.pack("<I", len(name)) + name
        out += struct.pack("<II", l.in_ch, l.out_ch)
        out += np.ascontiguousarray(l.weight, dtype="<f4").tobytes()
        out += np.ascontiguousarray(l.bias, dtype="<f4").tobytes()
    if adam is not None:
        out += ADAM_MAGIC
        out += struct.pack("<I", adam.t)
        out += struct.pack("<dddd", adam.lr, adam.beta1, adam.beta2, adam.eps)
        for l in layers:
            for arr in adam.moments[l.name]:
                out += np.ascontiguousarray(arr, dtype="<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(bytes(out))


def read_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != MAGIC:
        raise CheckpointMismatch(f"{path}: not a PUNW checkpoint")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != VERSION:
        raise CheckpointMismatch(f"{path}: unsupported checkpoint version {version}")
    pos = 8
    layers = []
    try:
        while pos < len(data) and data[pos : pos + 4] != ADAM_MAGIC:
            (nlen,) = struct.unpack_from("<I", data, pos)
            pos += 4
            name = data[pos : pos + nlen].decode("utf-8")
            pos += nlen
            in_ch, out_ch = struct.unpack_from("<II", data, pos)
            pos += 8
            w = np.frombuffer(data, "<f4", in_ch * out_ch, pos).reshape(out_ch, in_ch)
            pos += 4 * in_ch * out_ch
            b = np.frombuffer(data, "<f4", out_ch, pos)
            pos += 4 * out_ch
            layers.append((name, w.copy(), b.copy()))
        adam = None
        if data[pos : pos + 4] == ADAM_MAGIC:
            pos += 4
            (t,) = struct.unpack_from("<I", data, pos)
            lr, b1, b2, eps = struct.unpack_from("<dddd", data, pos + 4)
            pos += 36
            moments = {}
            for name, w, b in layers:
                arrs = []
                for shape in (w.shape, w.shape, b.shape, b.shape):
                    n = int(np.prod(shape))
                    arrs.append(np.frombuffer(data, "<f4", n, pos).reshape(shape).copy())
                    pos += 4 * n
                moments[name] = arrs
            adam = {"t": t, "lr": lr, "beta1": b1, "beta2": b2, "eps": eps, "moments": moments}
    except (struct.error, ValueError) as exc:
        raise CheckpointMismatch(f"{path}: truncated or corrupt checkpoint ({exc})") from None
    return Checkpoint(layers, adam)


def load_into(layers, ckpt: Checkpoint) -> None:
    """Copy checkpoint tensors into ``layers`` (names and shapes must match)."""
    stored = {name: (w, b) for name, w, b in ckpt.layers}
    names = [l.name for l in layers]
    if sorted(stored) != sorted(names):
        missing = sorted(set(names) - set(stored))
        extra = sorted(set(stored) - set(names))
        raise CheckpointMismatch(f"layer sets differ (missing {missing}, unexpected {extra})")
    for l in layers:
        w, b = stored[l.name]
        if w.shape != l.weight.shape:
            raise CheckpointMismatch(
                f"{l.name}: checkpoint shape {w.shape} != model shape {l.weight.shape}"
            )
        l.weight[...] = w
        l.bias[...] = b
