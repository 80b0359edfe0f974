"""Point-set losses: EMD (exact and auction), Chamfer, repulsion, joint objective."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.spatial import cKDTree
from scipy.spatial.distance import cdist

from .errors import ConfigError, EmptyCloud, NonConvergence, SizeMismatch, TooFewPoints
from .geom.neighbors import knn_self
from .nn import weight_sq_norm

GRAD_CLAMP = 1e-12
RECON_KINDS = ("emd_exact", "emd_auction", "chamfer")


@dataclass(frozen=True)
class LossConfig:
    recon: str = "emd_exact"
    k: int = 5
    h: float = 0.03
    alpha: float = 0.01
    beta: float = 1e-5
    auction_eps_final: float = 1e-4
    auction_eps_factor: float = 5.0

    def __post_init__(self):
        if self.recon not in RECON_KINDS:
            raise ConfigError(f"recon must be one of {RECON_KINDS}, got {self.recon!r}")
        if self.k < 1:
            raise ConfigError("k must be >= 1")
        if self.h <= 0:
            raise ConfigError("h must be positive")
        if self.alpha < 0 or self.beta < 0:
            raise ConfigError("alpha and beta must be nonnegative")
        if self.auction_eps_final <= 0 or self.auction_eps_factor <= 1:
            raise ConfigError("auction epsilon schedule must be positive and shrinking")


@dataclass
class Matching:
    """``assignment[i]`` is the ground-truth index matched to prediction ``i``."""

    assignment: np.ndarray
    total_cost: float


def _pair(pred, gt):
    pred = np.asarray(pred, dtype=np.float64).reshape(-1, 3)
    gt = np.asarray(gt, dtype=np.float64).reshape(-1, 3)
    if len(pred) != len(gt):
        raise SizeMismatch(f"point counts differ: {len(pred)} vs {len(gt)}")
    return pred, gt


def matching_cost(pred, gt, assignment) -> float:
    return float(np.linalg.norm(pred - gt[assignment], axis=1).sum())


def emd_exact(pred, gt) -> Matching:
    """Minimum-cost perfect matching under Euclidean distance.

    Solved as a dense linear assignment problem (shortest augmenting path
    Hungarian variant, cubic time).
    """
    pred, gt = _pair(pred, gt)
    if len(pred) == 0:
        return Matching(np.zeros(0, dtype=np.int64), 0.0)
    cost = cdist(pred, gt)
    rows, cols = linear_sum_assignment(cost)
    assignment = np.empty(len(pred), dtype=np.int64)
    assignment[rows] = cols
    return Matching(assignment, float(cost[rows, cols].sum()))


def _complete(owner_of_person, n):
    """Fill unassigned persons with the free objects, in index order."""
    a = owner_of_person.copy()
    free = np.setdiff1d(np.arange(n), a[a >= 0])
    a[a < 0] = free
    return a


def emd_auction(pred, gt, eps_final=1e-4, eps_factor=5.0, max_iter=1_000_000) -> Matching:
    """Approximate EMD by forward auction with epsilon scaling.

    Every unassigned prediction bids for its most valuable ground-truth point
    (value = -distance - price) by the gap to its second-best option plus
    ``eps``; each object goes to its highest bidder.  Prices carry over while
    ``eps`` shrinks by ``eps_factor`` down to ``eps_final``.  The final
    assignment satisfies eps-complementary slackness, so its cost exceeds the
    optimum by at most ``n * eps_final``.
    """
    pred, gt = _pair(pred, gt)
    n = len(pred)
    if n <= 1:
        return Matching(np.zeros(n, dtype=np.int64), matching_cost(pred, gt, np.zeros(n, int)))
    benefit = -cdist(pred, gt)
    prices = np.zeros(n)
    eps = max(float(-benefit.min()) / 4.0, eps_final)
    iters = 0
    person_obj = np.full(n, -1, dtype=np.int64)
    while True:
        person_obj[:] = -1
        obj_person = np.full(n, -1, dtype=np.int64)
        while True:
            free = np.flatnonzero(person_obj < 0)
            if len(free) == 0:
                break
            iters += 1
            if iters > max_iter:
                a = _complete(person_obj, n)
                raise NonConvergence(
                    f"auction hit the iteration cap ({max_iter})",
                    Matching(a, matching_cost(pred, gt, a)),
                )
            values = benefit[free] - prices
            top2 = np.argpartition(-values, 1, axis=1)[:, :2]
            v = np.take_along_axis(values, top2, axis=1)
            first = np.where(v[:, 0] >= v[:, 1], 0, 1)
            best = top2[np.arange(len(free)), first]
            v1 = v[np.arange(len(free)), first]
            v2 = v[np.arange(len(free)), 1 - first]
            bids = prices[best] + (v1 - v2) + eps
            # highest bid per object wins; equal bids go to the lower person index
            order = np.lexsort((free, -bids, best))
            objs = best[order]
            win = np.ones(len(order), dtype=bool)
            win[1:] = objs[1:] != objs[:-1]
            won_obj = objs[win]
            winners = free[order[win]]
            prev = obj_person[won_obj]
            person_obj[prev[prev >= 0]] = -1
            obj_person[won_obj] = winners
            person_obj[winners] = won_obj
            prices[won_obj] = bids[order[win]]
        if eps <= eps_final:
            break
        eps = max(eps / eps_factor, eps_final)
    return Matching(person_obj.copy(), matching_cost(pred, gt, person_obj))


def recon_loss_grad(matching: Matching, pred, gt):
    """Value and gradient of the matched distance sum, holding the matching fixed."""
    pred, gt = _pair(pred, gt)
    diff = pred - gt[matching.assignment]
    dist = np.linalg.norm(diff, axis=1)
    grad = diff / np.maximum(dist, GRAD_CLAMP)[:, None]
    return float(dist.sum()), grad


def chamfer(pred, gt):
    """Mean nearest-neighbour distance in both directions, and its gradient wrt ``pred``."""
    pred = np.asarray(pred, dtype=np.float64).reshape(-1, 3)
    gt = np.asarray(gt, dtype=np.float64).reshape(-1, 3)
    if len(pred) == 0 or len(gt) == 0:
        raise EmptyCloud("chamfer distance needs two nonempty clouds")
    d_pg, i_pg = cKDTree(gt).query(pred, k=1)
    d_gp, i_gp = cKDTree(pred).query(gt, k=1)
    value = float(d_pg.mean() + d_gp.mean())
    grad = (pred - gt[i_pg]) / np.maximum(d_pg, GRAD_CLAMP)[:, None] / len(pred)
    back = (pred[i_gp] - gt) / np.maximum(d_gp, GRAD_CLAMP)[:, None] / len(gt)
    np.add.at(grad, i_gp, back)
    return value, grad


def repulsion_loss_grad(points, k=5, h=0.03, neighbors=None):
    """Sum over points of ``-r * exp(-r^2 / h^2)`` across their k nearest neighbours.

    The neighbour sets are held fixed when differentiating.  ``neighbors`` may
    pass precomputed ``(n, k)`` indices.
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    n = len(points)
    if n < k + 1:
        raise TooFewPoints(f"repulsion with k={k} needs at least {k + 1} points, got {n}")
    idx = knn_self(points, k).indices if neighbors is None else np.asarray(neighbors)
    vec = points[:, None, :] - points[idx]
    r = np.linalg.norm(vec, axis=2)
    w = np.exp(-((r / h) ** 2))
    value = float(np.sum(-r * w))
    # d/dr of -r w(r) = w (2 r^2 / h^2 - 1)
    coef = w * (2.0 * (r / h) ** 2 - 1.0) / np.maximum(r, GRAD_CLAMP)
    contrib = coef[..., None] * vec
    grad = contrib.sum(axis=1)
    np.add.at(grad, idx.ravel(), -contrib.reshape(-1, 3))
    return value, grad


def reconstruction(pred, gt, cfg: LossConfig):
    """``(value, grad, matching_or_None)`` for the configured reconstruction term."""
    if cfg.recon == "chamfer":
        value, grad = chamfer(pred, gt)
        return value, grad, None
    if cfg.recon == "emd_exact":
        m = emd_exact(pred, gt)
    else:
        try:
            m = emd_auction(pred, gt, cfg.auction_eps_final, cfg.auction_eps_factor)
        except NonConvergence as exc:
            m = exc.matching
    value, grad = recon_loss_grad(m, pred, gt)
    return value, grad, m


@dataclass
class JointLoss:
    total: float
    rec: float
    rep: float
    decay: float
    grad: np.ndarray
    alpha: float
    beta: float
    matching: Matching | None = None
    neighbors: np.ndarray | None = None  # repulsion k-NN indices

    @property
    def weighted_rep(self):
        return self.alpha * self.rep


def joint_loss(pred, gt, layers, cfg: LossConfig) -> JointLoss:
    """``L_rec + alpha * L_rep + beta * ||W||^2`` with the gradient wrt ``pred``.

    The weight-decay gradient ``2 * beta * W`` is left to the optimiser
    (``JointLoss.beta`` carries the multiplier).
    """
    pred, gt = _pair(pred, gt)
    rec, g_rec, m = reconstruction(pred, gt, cfg)
    rep, g_rep, nbrs = 0.0, 0.0, None
    if cfg.alpha:
        if len(pred) < cfg.k + 1:
            raise TooFewPoints(f"repulsion with k={cfg.k} needs at least {cfg.k + 1} points")
        nbrs = knn_self(pred, cfg.k).indices
        rep, g_rep = repulsion_loss_grad(pred, cfg.k, cfg.h, nbrs)
    decay = cfg.beta * weight_sq_norm(layers) if cfg.beta else 0.0
    total = rec + cfg.alpha * rep + decay
    return JointLoss(
        total, rec, rep, decay, g_rec + cfg.alpha * g_rep, cfg.alpha, cfg.beta, m, nbrs
    )
