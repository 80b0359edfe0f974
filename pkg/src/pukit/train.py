"""Training loop, whole-object inference and the network gradient check."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from . import __version__
from .config import TrainConfig
from .data import PatchDataset, augment, resample_input
from .errors import ConfigError, NotDivisible, TrainingDiverged
from .geom.neighbors import farthest_point_sample
from .geom.patch import normalize_points
from .loss import LossConfig, joint_loss
from .nn import Adam, add_weight_decay_grad, gradient_check, save_checkpoint, weight_sq_norm
from .punet import NetworkConfig, PUNet, fit_input_count

log = logging.getLogger(__name__)

LOSS_COLUMNS = ("epoch", "total", "rec", "rep_weighted", "decay")


@dataclass
class EpochLoss:
    epoch: int
    total: float
    rec: float
    rep_weighted: float
    decay: float


@dataclass
class TrainResult:
    model: PUNet
    optimizer: Adam
    history: list = field(default_factory=list)
    checkpoints: list = field(default_factory=list)
    wall_time: float = 0.0


def _epoch_seed(seed, epoch):
    return int(np.random.SeedSequence([seed, epoch]).generate_state(1)[0])


def _finite_params(model):
    return all(np.all(np.isfinite(l.weight)) and np.all(np.isfinite(l.bias)) for l in model.layers)


def train(dataset: PatchDataset, cfg: TrainConfig, out_dir=None, model: PUNet | None = None,
          on_epoch=None) -> TrainResult:
    """Minibatch Adam on the joint loss with fresh input subsets every epoch.

    The batch objective is the mean over samples of ``L_rec + alpha * L_rep``
    plus ``beta * ||W||^2`` once.  With ``out_dir`` the function writes
    intermediate checkpoints per ``cfg.checkpoint_every`` and always a final
    ``model.punw``; non-finite losses raise before anything is written.
    """
    net_cfg = cfg.network.build()
    r = net_cfg.upsample_rate
    if dataset.n_hat % r:
        raise NotDivisible(f"dataset n_hat {dataset.n_hat} is not divisible by rate {r}")
    if dataset.n_hat // r != net_cfg.input_count:
        raise ConfigError(
            f"dataset gives {dataset.n_hat // r} input points but the network expects "
            f"{net_cfg.input_count}"
        )
    if cfg.batch_size > len(dataset):
        raise ConfigError(f"batch_size {cfg.batch_size} exceeds patch count {len(dataset)}")
    model = model or PUNet(net_cfg, seed=cfg.seed, dtype=np.dtype(cfg.dtype))
    opt = Adam(model.layers, lr=cfg.learning_rate)
    out_dir = Path(out_dir) if out_dir is not None else None
    result = TrainResult(model, opt)
    t0 = time.perf_counter()
    n = len(dataset)
    for epoch in range(cfg.epochs):
        es = _epoch_seed(cfg.seed, epoch)
        order = np.random.default_rng([cfg.seed, epoch, 1]).permutation(n)
        sums = np.zeros(4)
        n_batches = 0
        for bi, start in enumerate(range(0, n, cfg.batch_size)):
            ids = order[start : start + cfg.batch_size]
            samples = []
            for pid in ids:
                s = resample_input(dataset.patches[pid], r, es, int(pid))
                if cfg.augment:
                    s = augment(s, np.random.default_rng([cfg.seed, epoch, 2, int(pid)]),
                                (cfg.scale_min, cfg.scale_max), cfg.shift)
                samples.append(s)
            x = np.stack([s.input for s in samples])
            pred = model.forward(x).astype(np.float64)
            if not np.isfinite(pred).all():
                raise TrainingDiverged(
                    f"non-finite network output at epoch {epoch} batch {bi}", batch_id=(epoch, bi)
                )
            grads = np.empty_like(pred)
            rec = rep = 0.0
            for j, s in enumerate(samples):
                jl = joint_loss(pred[j], s.target, (), cfg.loss)
                rec += jl.rec
                rep += jl.weighted_rep
                grads[j] = jl.grad
            b = len(samples)
            decay = cfg.loss.beta * weight_sq_norm(model.layers)
            total = (rec + rep) / b + decay
            if not np.isfinite(total):
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch} batch {bi}", batch_id=(epoch, bi)
                )
            model.backward(grads / b)
            opt.step(weight_decay=cfg.loss.beta)
            if not _finite_params(model):
                raise TrainingDiverged(
                    f"non-finite parameters after epoch {epoch} batch {bi}", batch_id=(epoch, bi)
                )
            sums += (total, rec / b, rep / b, decay)
            n_batches += 1
        row = EpochLoss(epoch, *(sums / n_batches))
        result.history.append(row)
        log.info("epoch %d  L=%.6g  rec=%.6g  a*rep=%.6g  b*|W|^2=%.6g",
                 epoch, row.total, row.rec, row.rep_weighted, row.decay)
        if on_epoch is not None:
            on_epoch(row)
        if out_dir is not None and cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0:
            out_dir.mkdir(parents=True, exist_ok=True)
            path = out_dir / f"epoch_{epoch + 1:04d}.punw"
            save_checkpoint(path, model.layers, opt)
            result.checkpoints.append(path)
    result.wall_time = time.perf_counter() - t0
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        path = out_dir / "model.punw"
        save_checkpoint(path, model.layers, opt)
        result.checkpoints.append(path)
    return result


def write_losses_csv(path, history) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LOSS_COLUMNS)
        for row in history:
            w.writerow([row.epoch] + [repr(float(getattr(row, c))) for c in LOSS_COLUMNS[1:]])


def write_manifest(path, cfg: TrainConfig, result: TrainResult, dataset_path=None,
                   include_wall_time=True) -> dict:
    manifest = {
        "version": __version__,
        "config": cfg.to_dict(),
        "dataset": str(dataset_path) if dataset_path is not None else None,
        "epochs_completed": len(result.history),
        "losses": [
            {c: (row.epoch if c == "epoch" else float(getattr(row, c))) for c in LOSS_COLUMNS}
            for row in result.history
        ],
        "checkpoints": [p.name for p in result.checkpoints],
    }
    if include_wall_time:
        manifest["wall_time_s"] = result.wall_time
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest


# ----------------------------------------------------------------- inference


def cover_patches(points, n):
    """Index sets of ``n``-point kNN patches that together cover every point.

    Seeds are chosen farthest-first among the points not yet covered,
    starting from index 0.
    """
    points = np.asarray(points, dtype=np.float64)
    m = len(points)
    tree = cKDTree(points)
    covered = np.zeros(m, dtype=bool)
    dist = np.full(m, np.inf)
    seed = 0
    groups = []
    while True:
        _, idx = tree.query(points[seed], k=n)
        idx = np.atleast_1d(idx)
        groups.append(idx)
        covered[idx] = True
        if covered.all():
            break
        dist = np.minimum(dist, np.linalg.norm(points - points[seed], axis=1))
        cand = np.where(covered, -1.0, dist)
        seed = int(np.argmax(cand))
    return groups


def upsample_once(model: PUNet, points, rng=0, batch=8):
    """Upsample a whole cloud by the model's rate.

    The cloud is covered by overlapping patches of the network's input size;
    each is normalised, upsampled, mapped back, and the union is reduced by
    farthest point sampling to exactly ``rate * len(points)``.
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    n = model.config.input_count
    r = model.config.upsample_rate
    m = len(points)
    if m <= n:
        fitted, _ = fit_input_count(points, n, rng)
        inputs = [fitted]
    else:
        inputs = [points[g] for g in cover_patches(points, n)]
    outs = []
    for s in range(0, len(inputs), batch):
        chunk = inputs[s : s + batch]
        normed = [normalize_points(c) for c in chunk]
        pred = model.forward(np.stack([x for x, _, _ in normed])).astype(np.float64)
        model._cache = None
        for p, (_, center, scale) in zip(pred, normed):
            outs.append(p * scale + center)
    union = np.concatenate(outs)
    return union[farthest_point_sample(union, r * m)]


def upsample(model: PUNet, points, iterations=1, seed=0):
    pts = np.asarray(points, dtype=np.float64)
    for it in range(iterations):
        pts = upsample_once(model, pts, rng=np.random.default_rng([seed, it]))
    return pts


# ----------------------------------------------------------------- gradient check


def toy_config(input_count=16, upsample_rate=2) -> NetworkConfig:
    return NetworkConfig.scaled(8, input_count=input_count, upsample_rate=upsample_rate)


def network_gradient_check(seed=0, loss_cfg: LossConfig | None = None, config=None,
                           epsilon=1e-4, max_per_tensor=None, bias_jitter=0.05):
    """Finite-difference check of the joint loss through a float64 network.

    Biases are moved off zero so that ReLU pre-activations do not sit exactly
    on the kink.  Perturbations that change a max-pool winner, the EMD
    matching or a repulsion neighbourhood are excluded as non-differentiable.
    """
    loss_cfg = loss_cfg or LossConfig()
    config = config or toy_config()
    rng = np.random.default_rng([seed, 99])
    net = PUNet(config, seed=seed, dtype=np.float64)
    for l in net.layers:
        l.bias[...] = rng.uniform(-bias_jitter, bias_jitter, l.bias.shape)
    n = config.input_count
    target = rng.standard_normal((config.output_count, 3))
    target /= np.linalg.norm(target, axis=1).max()
    x = target[rng.choice(len(target), n, replace=False)]
    plan = net.plan(x)
    state = {}

    def objective(backward):
        pred = net.forward(x, plan)
        args = net._cache["args"]
        jl = joint_loss(pred, target, net.layers, loss_cfg)
        h = hashlib.sha1()
        for a in args:
            h.update(np.ascontiguousarray(a).tobytes())
        if jl.matching is not None:
            h.update(jl.matching.assignment.tobytes())
        if jl.neighbors is not None:
            h.update(jl.neighbors.tobytes())
        state["sig"] = h.digest()
        if backward:
            net.backward(jl.grad)
            add_weight_decay_grad(net.layers, loss_cfg.beta)
        else:
            net._cache = None
        return jl.total

    return gradient_check(objective, net.layers, epsilon, lambda: state["sig"],
                          max_per_tensor, rng)
