"""The upsampling network: hierarchical embedding, feature expansion, regression.

Everything that depends only on input coordinates (FPS centres, ball-query
groups, interpolation weights) is computed once into a :class:`GeometryPlan`.
The learnable part of the forward pass is then a fixed chain of shared linear
layers, gathers and max-pools that :meth:`PUNet.backward` walks in reverse.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy import sparse

from .errors import ConfigError, NoForwardRecorded, ShapeMismatch, TooFewPoints, TooFewSources
from .geom.neighbors import (
    ball_query_batch,
    farthest_point_sample,
    farthest_point_sample_batch,
    knn_batch,
)
from .nn import SharedLinear

INTERP_EPS = 1e-8


@dataclass(frozen=True)
class LevelConfig:
    region_count: int
    ball_radius: float
    mlp_widths: tuple
    group_size: int = 32

    def __post_init__(self):
        object.__setattr__(self, "mlp_widths", tuple(int(w) for w in self.mlp_widths))
        if not self.mlp_widths:
            raise ConfigError("level mlp_widths must be nonempty")
        if self.ball_radius <= 0:
            raise ConfigError("ball_radius must be positive")
        if self.region_count < 1 or self.group_size < 1:
            raise ConfigError("region_count and group_size must be >= 1")


DEFAULT_RADII = (0.05, 0.1, 0.2, 0.3)
DEFAULT_WIDTHS = ((32, 32, 64), (64, 64, 128), (128, 128, 256), (256, 256, 512))


def default_levels(n, radii=DEFAULT_RADII, widths=DEFAULT_WIDTHS, group_size=32):
    """Level ``l`` keeps ``n / 2**l`` regions (at least one)."""
    return tuple(
        LevelConfig(max(1, n // 2**i), r, w, group_size)
        for i, (r, w) in enumerate(zip(radii, widths))
    )


@dataclass(frozen=True)
class NetworkConfig:
    input_count: int = 1024
    upsample_rate: int = 4
    levels: tuple = None
    reduced_dim: int = 64
    embedded_dim: int | None = None
    expand_dims: tuple = (256, 128)
    recon_widths: tuple = (64, 3)

    def __post_init__(self):
        if self.levels is None:
            object.__setattr__(self, "levels", default_levels(self.input_count))
        object.__setattr__(self, "levels", tuple(self.levels))
        object.__setattr__(self, "expand_dims", tuple(int(x) for x in self.expand_dims))
        object.__setattr__(self, "recon_widths", tuple(int(x) for x in self.recon_widths))
        expected = len(self.levels) * self.reduced_dim + 3
        if self.embedded_dim is None:
            object.__setattr__(self, "embedded_dim", expected)
        if self.embedded_dim != expected:
            raise ConfigError(
                f"embedded_dim {self.embedded_dim} != levels*reduced_dim+3 = {expected}"
            )
        if self.upsample_rate < 2:
            raise ConfigError("upsample_rate must be at least 2")
        if not self.levels:
            raise ConfigError("at least one level is required")
        prev = self.input_count
        for lvl in self.levels:
            if lvl.region_count > prev:
                raise ConfigError(
                    f"level region_count {lvl.region_count} exceeds previous count {prev}"
                )
            prev = lvl.region_count
        if len(self.expand_dims) != 2:
            raise ConfigError("expand_dims needs exactly two widths")
        if not self.recon_widths or self.recon_widths[-1] != 3:
            raise ConfigError("the last reconstruction width must be 3")

    @classmethod
    def full(cls, input_count=1024, upsample_rate=4):
        return cls(input_count=input_count, upsample_rate=upsample_rate)

    @classmethod
    def scaled(cls, divisor, input_count=1024, upsample_rate=4, radii=DEFAULT_RADII,
               group_size=32):
        """Full-size topology with every hidden width divided by ``divisor``."""
        def div(w):
            return max(1, w // divisor)

        widths = tuple(tuple(div(w) for w in ws) for ws in DEFAULT_WIDTHS)
        return cls(
            input_count=input_count,
            upsample_rate=upsample_rate,
            levels=default_levels(input_count, radii, widths, group_size),
            reduced_dim=div(64),
            expand_dims=(div(256), div(128)),
            recon_widths=(div(64), 3),
        )

    @property
    def output_count(self):
        return self.upsample_rate * self.input_count

    def with_input_count(self, n):
        return replace(
            self,
            input_count=n,
            levels=tuple(
                replace(l, region_count=max(1, n // 2**i)) for i, l in enumerate(self.levels)
            ),
        )


# ----------------------------------------------------------------- geometry plan


def interpolation_weights(src_points, tgt_points, k=3):
    """Inverse-distance weights of the ``k`` nearest sources, normalised to sum 1."""
    src_points = np.asarray(src_points, dtype=np.float64)
    if len(src_points) < k:
        raise TooFewSources(f"need at least {k} source points, got {len(src_points)}")
    idx, d = knn_batch(src_points, tgt_points, k)
    w = 1.0 / np.maximum(d, INTERP_EPS)
    return idx, w / w.sum(axis=1, keepdims=True)


def interpolate_features(src_points, src_feats, tgt_points, k=3):
    """Inverse-distance interpolation of per-point features onto new points."""
    src_feats = np.asarray(src_feats)
    if len(src_feats) != len(src_points):
        raise ShapeMismatch("src_feats rows must match src_points")
    idx, w = interpolation_weights(src_points, tgt_points, k)
    return (src_feats[idx] * w[..., None]).sum(axis=1)


@dataclass
class LevelPlan:
    centers: np.ndarray  # (B, K) indices into the level input points
    groups: np.ndarray  # (B, K, G) indices into the level input points
    sub_points: np.ndarray  # (B, K, 3)
    rel: np.ndarray  # (B, K, G, 3) neighbour xyz minus centre xyz
    gather: sparse.csr_matrix | None = None  # (B*K*G, B*n_in)
    restore: sparse.csr_matrix | None = None  # (B*N, B*K); None = identity


@dataclass
class GeometryPlan:
    points: np.ndarray
    levels: list = field(default_factory=list)


def _flat_gather(groups, n_in):
    b = groups.shape[0]
    cols = (groups + (np.arange(b) * n_in)[:, None, None]).ravel()
    rows = np.arange(cols.size)
    return sparse.csr_matrix(
        (np.ones(cols.size), (rows, cols)), shape=(cols.size, b * n_in)
    )


def plan_level(cur, lvl: LevelConfig, start):
    """FPS centres and ball-query groups for one level over ``(B, n, 3)`` points.

    Returns the :class:`LevelPlan` and the FPS start for the next level.
    """
    b, n_in, _ = cur.shape
    k = lvl.region_count
    if k > n_in:
        raise TooFewPoints(f"level needs {k} points, got {n_in}")
    rows = np.arange(b)[:, None]
    if k == n_in:
        # FPS over every point selects all of them; keep input order
        centers = np.broadcast_to(np.arange(n_in), (b, n_in)).copy()
    else:
        centers = farthest_point_sample_batch(cur, k, start)
        start = np.zeros(b, dtype=np.int64)
    sub = cur[rows, centers]
    groups = np.stack(
        [ball_query_batch(cur[i], sub[i], lvl.ball_radius, lvl.group_size) for i in range(b)]
    )
    rel = cur[rows[:, :, None], groups] - sub[:, :, None, :]
    return LevelPlan(centers, groups, sub, rel, gather=_flat_gather(groups, n_in)), start


def build_plan(points, config: NetworkConfig, fps_start=0) -> GeometryPlan:
    """Precompute every coordinate-only decision of the forward pass."""
    points = np.asarray(points, dtype=np.float64)
    if points.ndim == 2:
        points = points[None]
    b, n, _ = points.shape
    plan = GeometryPlan(points=points)
    cur = points
    ident = np.broadcast_to(np.arange(n), (b, n))
    orig = ident
    start = np.broadcast_to(np.asarray(fps_start, dtype=np.int64), (b,)).copy()
    for lvl in config.levels:
        lp, start = plan_level(cur, lvl, start)
        k = lvl.region_count
        orig = np.take_along_axis(orig, lp.centers, axis=1)
        if not (k == n and np.array_equal(orig, ident)):
            kk = min(3, k)
            r_rows, r_cols, r_vals = [], [], []
            for i in range(b):
                idx, w = interpolation_weights(lp.sub_points[i], points[i], kk)
                r_rows.append(np.repeat(np.arange(n) + i * n, kk))
                r_cols.append((idx + i * k).ravel())
                r_vals.append(w.ravel())
            lp.restore = sparse.csr_matrix(
                (np.concatenate(r_vals), (np.concatenate(r_rows), np.concatenate(r_cols))),
                shape=(b * n, b * k),
            )
        plan.levels.append(lp)
        cur = lp.sub_points
    return plan


# ----------------------------------------------------------------- building blocks


def _mlp_forward(layers, x, last_relu=True):
    for j, layer in enumerate(layers):
        x = layer.forward(x, relu=last_relu or j < len(layers) - 1)
    return x


def _mlp_backward(layers, g):
    for layer in reversed(layers):
        g = layer.backward(g)
    return g


def _sa_forward(lp: LevelPlan, feats, mlp, dtype):
    """Grouped shared MLP + channelwise max; returns ``(out, argmax)``."""
    b, k, g, _ = lp.rel.shape
    x = lp.rel.reshape(-1, 3).astype(dtype)
    if feats is not None:
        gathered = lp.gather @ feats.reshape(-1, feats.shape[-1])
        x = np.concatenate([x, gathered.astype(dtype)], axis=1)
    h = _mlp_forward(mlp, x).reshape(b, k, g, -1)
    arg = h.argmax(axis=2)
    out = np.take_along_axis(h, arg[:, :, None, :], axis=2)[:, :, 0, :]
    return out, arg


def _sa_backward(lp: LevelPlan, grad_out, arg, mlp, n_in_feats):
    b, k, g, _ = lp.rel.shape
    c = grad_out.shape[-1]
    gh = np.zeros((b, k, g, c), dtype=grad_out.dtype)
    np.put_along_axis(gh, arg[:, :, None, :], grad_out[:, :, None, :], axis=2)
    gx = _mlp_backward(mlp, gh.reshape(-1, c))
    if n_in_feats is None:
        return None
    gf = lp.gather.T @ gx[:, 3:].astype(np.float64)
    return gf.reshape(b, -1, n_in_feats)


def set_abstraction(points, feats, level: LevelConfig, mlp, start=0):
    """One hierarchy level on a single cloud: ``(sub_points (K,3), sub_feats (K,l_d))``."""
    points = np.asarray(points, dtype=np.float64)
    if feats is not None:
        feats = np.asarray(feats)
        if feats.shape[0] != len(points) or mlp[0].in_ch != 3 + feats.shape[1]:
            raise ShapeMismatch("feature rows/channels do not match the level MLP")
    lp, _ = plan_level(points[None], level, np.array([start]))
    out, _ = _sa_forward(lp, None if feats is None else feats[None], mlp, mlp[0].dtype)
    return lp.sub_points[0], out[0]


def expand(f, branches, return_intermediate=False):
    """Feature expansion: row ``i*N + j`` of the result is branch ``i`` on row ``j``.

    The branch outputs are first laid side by side as an ``N x r*C2`` matrix,
    which is then reshaped to ``r*N x C2``; ``return_intermediate`` also
    returns that matrix.
    """
    f = np.asarray(f)
    n = len(f)
    wide = np.concatenate([_mlp_forward(list(br), f) for br in branches], axis=1)
    c2 = wide.shape[1] // len(branches)
    out = wide.reshape(n, len(branches), c2).transpose(1, 0, 2).reshape(-1, c2)
    return (out, wide) if return_intermediate else out


def reconstruct(f_prime, layers):
    """Per-row regression to xyz; ReLU on every layer but the last."""
    return _mlp_forward(list(layers), np.asarray(f_prime), last_relu=False)


# ----------------------------------------------------------------- the model


class PUNet:
    """The full network.  ``layers`` enumerates every parameterised layer."""

    def __init__(self, config: NetworkConfig, seed=0, dtype=np.float32):
        self.config = config
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)
        self.sa = []
        in_ch = 3
        for li, lvl in enumerate(config.levels):
            mlp, c = [], in_ch
            for j, w in enumerate(lvl.mlp_widths):
                mlp.append(SharedLinear(f"sa{li + 1}.mlp{j + 1}", c, w, rng, dtype))
                c = w
            self.sa.append(mlp)
            in_ch = 3 + c
        self.reduce = [
            SharedLinear(f"fa{li + 1}.reduce", lvl.mlp_widths[-1], config.reduced_dim, rng, dtype)
            for li, lvl in enumerate(config.levels)
        ]
        c1, c2 = config.expand_dims
        self.branches = [
            (
                SharedLinear(f"fe{i + 1}.conv1", config.embedded_dim, c1, rng, dtype),
                SharedLinear(f"fe{i + 1}.conv2", c1, c2, rng, dtype),
            )
            for i in range(config.upsample_rate)
        ]
        self.recon = []
        c = c2
        for j, w in enumerate(config.recon_widths):
            last = j == len(config.recon_widths) - 1
            self.recon.append(SharedLinear(f"fr.fc{j + 1}", c, w, rng, dtype, relu=not last))
            c = w
        self._cache = None

    @property
    def layers(self):
        out = [l for mlp in self.sa for l in mlp]
        out += self.reduce
        out += [l for br in self.branches for l in br]
        out += self.recon
        return out

    def n_parameters(self):
        return sum(l.weight.size + l.bias.size for l in self.layers)

    def zero_grad(self):
        for l in self.layers:
            l.zero_grad()

    def plan(self, points, fps_start=0) -> GeometryPlan:
        return build_plan(points, self.config, fps_start)

    def _check_input(self, points):
        points = np.asarray(points, dtype=np.float64)
        single = points.ndim == 2
        if single:
            points = points[None]
        if points.ndim != 3 or points.shape[2] != 3:
            raise ShapeMismatch(f"expected (B, N, 3) points, got {points.shape}")
        if points.shape[1] != self.config.input_count:
            raise ShapeMismatch(
                f"network expects {self.config.input_count} points, got {points.shape[1]}"
            )
        return points, single

    def embed(self, points, plan=None):
        """``(B, N, C~)`` embedded features (records the graph for backward)."""
        points, single = self._check_input(points)
        plan = plan if plan is not None else self.plan(points)
        b, n, _ = points.shape
        feats, args, level_out = None, [], []
        for lp, mlp in zip(plan.levels, self.sa):
            feats, arg = _sa_forward(lp, feats, mlp, self.dtype)
            args.append(arg)
            level_out.append(feats)
        blocks = []
        for lp, red, fl in zip(plan.levels, self.reduce, level_out):
            flat = fl.reshape(-1, fl.shape[-1])
            if lp.restore is not None:
                flat = (lp.restore @ flat).astype(self.dtype)
            blocks.append(red.forward(flat).reshape(b, n, -1))
        blocks.append(points.astype(self.dtype))
        f = np.concatenate(blocks, axis=2)
        self._cache = {"plan": plan, "args": args, "level_out": level_out, "b": b, "n": n}
        return f[0] if single else f

    def forward(self, points, plan=None):
        """Upsample ``(B, N, 3)`` (or ``(N, 3)``) to ``r*N`` points per cloud."""
        points, single = self._check_input(points)
        f = self.embed(points, plan)
        b, n, c = f.shape
        flat = f.reshape(-1, c)
        outs = [_mlp_forward(list(br), flat).reshape(b, 1, n, -1) for br in self.branches]
        fp = np.concatenate(outs, axis=1).reshape(b, self.config.upsample_rate * n, -1)
        xyz = reconstruct(fp.reshape(-1, fp.shape[-1]), self.recon)
        xyz = xyz.reshape(b, -1, 3)
        self._cache["forward"] = True
        return xyz[0] if single else xyz

    __call__ = forward

    def backward(self, grad_points):
        """Accumulate parameter gradients for ``d loss / d output``."""
        if self._cache is None or not self._cache.get("forward"):
            raise NoForwardRecorded("backward called without a recorded forward")
        cache, self._cache = self._cache, None
        b, n = cache["b"], cache["n"]
        r = self.config.upsample_rate
        g = np.asarray(grad_points, dtype=self.dtype).reshape(b * r * n, 3)
        g = _mlp_backward(self.recon, g).reshape(b, r, n, -1)
        gf = None
        for i, br in enumerate(self.branches):
            gi = _mlp_backward(list(br), np.ascontiguousarray(g[:, i]).reshape(b * n, -1))
            gf = gi if gf is None else gf + gi
        c = self.config.reduced_dim
        plan, args, level_out = cache["plan"], cache["args"], cache["level_out"]
        g_level = []
        for li, (lp, red) in enumerate(zip(plan.levels, self.reduce)):
            gr = red.backward(gf[:, li * c : (li + 1) * c])
            if lp.restore is not None:
                gr = lp.restore.T @ gr.astype(np.float64)
            g_level.append(gr.reshape(level_out[li].shape).astype(self.dtype))
        carry = None
        for li in range(len(plan.levels) - 1, -1, -1):
            gout = g_level[li] if carry is None else g_level[li] + carry
            n_prev = level_out[li - 1].shape[-1] if li > 0 else None
            carry = _sa_backward(plan.levels[li], gout, args[li], self.sa[li], n_prev)
            if carry is not None:
                carry = carry.astype(self.dtype)


def fit_input_count(points, n, rng=None):
    """Bring a cloud to exactly ``n`` points.

    Larger clouds are reduced by farthest point sampling from index 0; smaller
    ones are padded with duplicates of uniformly drawn points.  Returns the
    fitted cloud and the source index of every row.
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    m = len(points)
    if m == 0:
        raise TooFewPoints("cannot fit an empty cloud")
    if m == n:
        idx = np.arange(n)
    elif m > n:
        idx = np.asarray(farthest_point_sample(points, n))
    else:
        rng = np.random.default_rng(rng)
        idx = np.concatenate([np.arange(m), rng.integers(0, m, n - m)])
    return points[idx], idx
