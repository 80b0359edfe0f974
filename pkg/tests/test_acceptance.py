"""Acceptance criteria, one test each.  Every test records a PASS/FAIL line."""

import subprocess
import sys
import time

import numpy as np
import pytest

import oracles
from pukit.config import NetworkSpec, TrainConfig
from pukit.data import resample_input, sphere_patches
from pukit.geom import (
    Mesh,
    ball_query,
    closest_points_on_mesh,
    farthest_point_sample,
    icosphere,
    knn,
    patch_submesh,
    save_mesh_off,
    save_points,
    sample_surface,
)
from pukit.loss import LossConfig, chamfer, emd_auction, emd_exact, repulsion_loss_grad
from pukit.metric import nuc
from pukit.punet import NetworkConfig, PUNet, expand, reconstruct
from pukit.train import network_gradient_check, train

# fixed tolerances
EMD_EXACT_TOL = 1e-9
EMD_EXACT_BUDGET_S = 5.0
AUCTION_REL_GAP = 0.05
AUCTION_BUDGET_S = 30.0
REPULSION_VALUE = -0.0220728
REPULSION_TOL = 1e-7
GRADCHECK_TOL = 1e-3
GRADCHECK_BUDGET_S = 120.0
ORACLE_TOL = 1e-9
LEARN_RATIO = 0.25
LEARN_DEVIATION = 0.02
LEARN_BUDGET_S = 600.0
ABLATION_NUC_SLACK = 0.005


def unit_ball(rng, n):
    p = rng.normal(size=(n, 3))
    return p / np.linalg.norm(p, axis=1, keepdims=True) * rng.random((n, 1)) ** (1 / 3)


def test_c01_emd_exact(criterion):
    rng = np.random.default_rng(1)
    worst, spent = 0.0, 0.0
    for _ in range(200):
        n = int(rng.integers(1, 8))
        a, b = unit_ball(rng, n), unit_ball(rng, n)
        t = time.perf_counter()
        got = emd_exact(a, b).total_cost
        spent += time.perf_counter() - t
        worst = max(worst, abs(got - oracles.emd_bruteforce_fast(a, b)))
    criterion(1, "EMD exact vs permutation enumeration",
              worst <= EMD_EXACT_TOL and spent < EMD_EXACT_BUDGET_S,
              f"max |diff| {worst:.2e} <= {EMD_EXACT_TOL:g}, solver time {spent:.2f}s < {EMD_EXACT_BUDGET_S:g}s")


def test_c02_emd_auction(criterion):
    rng = np.random.default_rng(2)
    worst, spent = 0.0, 0.0
    for _ in range(50):
        a, b = unit_ball(rng, 128), unit_ball(rng, 128)
        exact = emd_exact(a, b).total_cost
        t = time.perf_counter()
        got = emd_auction(a, b).total_cost
        spent += time.perf_counter() - t
        worst = max(worst, abs(got - exact) / exact)
    criterion(2, "EMD auction within 5% of exact at n=128",
              worst <= AUCTION_REL_GAP and spent < AUCTION_BUDGET_S,
              f"max rel gap {worst:.2e} <= {AUCTION_REL_GAP}, time {spent:.2f}s < {AUCTION_BUDGET_S:g}s")


def test_c03_repulsion_hand_value(criterion):
    v, _ = repulsion_loss_grad([[0, 0, 0], [0.03, 0, 0]], k=1, h=0.03)
    criterion(3, "repulsion hand value", abs(v - REPULSION_VALUE) <= REPULSION_TOL,
              f"value {v:.9f} vs {REPULSION_VALUE} +- {REPULSION_TOL:g}")


def test_c04_gradient_fidelity(criterion):
    t = time.perf_counter()
    results = [network_gradient_check(seed, LossConfig(alpha=0.01, beta=1e-5)) for seed in range(5)]
    spent = time.perf_counter() - t
    worst = max(r.max_rel_error for r in results)
    checked = sum(r.n_checked for r in results)
    excluded = sum(r.n_excluded for r in results)
    criterion(4, "joint-loss gradient vs central differences (toy net, 5 seeds)",
              worst < GRADCHECK_TOL and spent < GRADCHECK_BUDGET_S and checked > 0,
              f"max rel err {worst:.2e} < {GRADCHECK_TOL:g}; {checked} checked, "
              f"{excluded} at kinks; {spent:.1f}s < {GRADCHECK_BUDGET_S:g}s")


def _random_mesh(rng, n_vertices):
    v = rng.normal(size=(n_vertices, 3))
    t = rng.integers(0, n_vertices, size=(n_vertices, 3))
    keep = (t[:, 0] != t[:, 1]) & (t[:, 1] != t[:, 2]) & (t[:, 0] != t[:, 2])
    return Mesh(v, t[keep])


def test_c05_geometry_oracles(criterion):
    rng = np.random.default_rng(5)
    worst = {k: 0.0 for k in ("fps", "knn", "ball_query", "chamfer", "repulsion", "closest")}
    exact = {k: True for k in worst}
    for _ in range(100):
        n = int(rng.integers(8, 513))
        cloud = rng.random((n, 3))
        q = rng.random(3)
        m = int(rng.integers(1, min(n, 64) + 1))
        start = int(rng.integers(n))
        exact["fps"] &= np.array_equal(farthest_point_sample(cloud, m, start), oracles.fps_np(cloud, m, start))
        k = int(rng.integers(1, min(n, 32) + 1))
        got, ref = knn(cloud, q, k), oracles.knn_np(cloud, q, k)
        exact["knn"] &= np.array_equal(got.indices, ref[0])
        worst["knn"] = max(worst["knn"], np.abs(got.distances - ref[1]).max())
        radius = float(rng.uniform(0.05, 0.5))
        got, ref = ball_query(cloud, q, radius, 16), oracles.ball_query(cloud, q, radius, 16)
        exact["ball_query"] &= np.array_equal(got.indices, ref[0])
        worst["ball_query"] = max(worst["ball_query"], np.abs(got.distances - ref[1]).max())
        other = rng.random((int(rng.integers(1, 513)), 3))
        worst["chamfer"] = max(worst["chamfer"], abs(chamfer(cloud, other)[0] - oracles.chamfer_np(cloud, other)))
        pts = cloud * 0.1
        worst["repulsion"] = max(worst["repulsion"], abs(repulsion_loss_grad(pts, 5, 0.03)[0]
                                                         - oracles.repulsion_np(pts, 5, 0.03)))
        mesh = _random_mesh(rng, int(rng.integers(4, 65)))
        queries = rng.normal(scale=1.5, size=(16, 3))
        _, d, _ = closest_points_on_mesh(mesh, queries)
        for qi, di in zip(queries, d):
            worst["closest"] = max(worst["closest"], abs(di - oracles.closest_on_mesh_np(mesh.vertices, mesh.triangles, qi)[1]))
    ok = all(exact.values()) and all(v <= ORACLE_TOL for v in worst.values())
    detail = ", ".join(f"{k} {'' if exact[k] else 'index mismatch, '}max diff {worst[k]:.1e}" for k in worst)
    criterion(5, "geometry kernels vs brute force (100 instances)", ok, detail)


def test_c06_shape_contract(criterion):
    cfg = NetworkConfig.full()
    net = PUNet(cfg, seed=0)
    pts = unit_ball(np.random.default_rng(6), 1024)
    f = net.embed(pts)
    out, wide = expand(f, net.branches, return_intermediate=True)
    xyz = reconstruct(out, net.recon)
    full = net.forward(pts)
    widths = [l.mlp_widths for l in cfg.levels]
    ok = (f.shape == (1024, 259) and wide.shape == (1024, 512) and xyz.shape == (4096, 3)
          and full.shape == (4096, 3)
          and widths == [(32, 32, 64), (64, 64, 128), (128, 128, 256), (256, 256, 512)])
    criterion(6, "full-size configuration shapes", ok,
              f"embed {f.shape}, expansion {wide.shape}, output {full.shape}")


def test_c07_nuc_properties(criterion):
    def equal(cloud, mesh, p, D, seed):
        return np.full(D, round(len(cloud) * p))

    zero = nuc([(np.zeros((1000, 3)), icosphere(0))], 0.01, 9000, count_fn=equal).nuc
    mesh = icosphere(4)
    fib = oracles.fibonacci_sphere(4096)
    clustered = fib.copy()
    clustered[:, 2] = np.abs(clustered[:, 2])
    margins = []
    for seed in range(5):
        for p in (0.004, 0.01):
            a = nuc([(fib, mesh)], p, seed=seed).nuc
            b = nuc([(clustered, mesh)], p, seed=seed).nuc
            margins.append(b - a)
    criterion(7, "NUC zero-variance and lattice < clustered",
              zero == 0 and min(margins) > 0,
              f"equal-count nuc {zero}; min(clustered - lattice) {min(margins):.4f} over 10 cases")


# ----------------------------------------------------------------- desk-scale training


def desk_config(seed, recon="emd_exact", alpha=0.01):
    return TrainConfig(
        epochs=200, batch_size=1, seed=seed, augment=False,
        network=NetworkSpec(input_count=256, upsample_rate=4, width_divisor=8),
        loss=LossConfig(recon=recon, alpha=alpha),
    )


def desk_run(seed, recon="emd_exact", alpha=0.01):
    ds, mesh = sphere_patches(8, 1024, seed=seed)
    t = time.perf_counter()
    result = train(ds, desk_config(seed, recon, alpha))
    wall = time.perf_counter() - t
    x = np.stack([resample_input(p, 4, 10**6, i).input for i, p in enumerate(ds.patches)])
    pred = result.model.forward(x).astype(np.float64)
    devs, objects = [], []
    for p, out in zip(ds.patches, pred):
        world = p.denormalize(out)
        devs.append(np.abs(np.linalg.norm(world, axis=1) - 1.0) / p.norm_scale)
        objects.append((world, patch_submesh(mesh, p.seed_index, p.geodesic_radius)))
    rec = np.array([r.rec for r in result.history])
    return {
        "ratio": rec[-10:].mean() / rec[:10].mean(),
        "deviation": float(np.concatenate(devs).mean()),
        "nuc": nuc(objects, 0.004, seed=seed).nuc,
        "wall": wall,
    }


@pytest.fixture(scope="session")
def desk_runs():
    cache = {}

    def get(seed, recon="emd_exact", alpha=0.01):
        key = (seed, recon, alpha)
        if key not in cache:
            cache[key] = desk_run(*key)
        return cache[key]

    return get


@pytest.mark.slow
def test_c08_desk_scale_learning(criterion, desk_runs):
    r = desk_runs(0)
    ok = r["ratio"] < LEARN_RATIO and r["deviation"] < LEARN_DEVIATION and r["wall"] <= LEARN_BUDGET_S
    criterion(8, "desk-scale overfit", ok,
              f"L_rec last10/first10 {r['ratio']:.3f} < {LEARN_RATIO}; deviation "
              f"{r['deviation']:.4f} < {LEARN_DEVIATION}; train time {r['wall']:.0f}s <= {LEARN_BUDGET_S:g}s")


@pytest.mark.slow
def test_c09_ablation_trend(criterion, desk_runs):
    seeds = range(3)
    with_rep = np.median([desk_runs(s)["nuc"] for s in seeds])
    without = np.median([desk_runs(s, alpha=0.0)["nuc"] for s in seeds])
    emd_dev = np.median([desk_runs(s)["deviation"] for s in seeds])
    cd_dev = np.median([desk_runs(s, recon="chamfer")["deviation"] for s in seeds])
    ok = with_rep <= without + ABLATION_NUC_SLACK and emd_dev <= cd_dev
    criterion(9, "ablation trend (median of 3 seeds)", ok,
              f"NUC@0.4% alpha=0.01 {with_rep:.4f} vs alpha=0 {without:.4f} (+{ABLATION_NUC_SLACK}); "
              f"deviation EMD {emd_dev:.4f} vs CD {cd_dev:.4f}")


# ----------------------------------------------------------------- CLI determinism


def _cli(*args, cwd):
    proc = subprocess.run([sys.executable, "-m", "pukit", *map(str, args)], cwd=cwd,
                          capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    return proc


def test_c10_cli_determinism(criterion, tmp_path):
    sphere = icosphere(3)
    files = {
        "extract": ["data.pupd", "data.pupd.json"],
        "train": [f"train/{f}" for f in ("model.punw", "epoch_0001.punw", "epoch_0002.punw",
                                         "losses.csv", "manifest.json")],
        "upsample": ["up/ball.xyz"],
        "eval": ["eval/nuc.csv", "eval/deviation.csv"],
    }
    for run in ("a", "b"):
        root = tmp_path / run
        (root / "meshes").mkdir(parents=True)
        (root / "up").mkdir()
        save_mesh_off(root / "meshes" / "ball.off", sphere)
        save_points(root / "ball.xyz", sample_surface(sphere, 150, "montecarlo", seed=3))
        (root / "toy.ini").write_text(
            "[network]\ninput_count = 64\nupsample_rate = 4\nwidth_divisor = 8\n\n"
            "[train]\nepochs = 2\nbatch_size = 2\ncheckpoint_every = 1\n"
        )
        _cli("extract", "meshes", "data.pupd", "--patches", 4, "--nhat", 256, "--seed", 7, cwd=root)
        _cli("train", "data.pupd", "--config", "toy.ini", "--out", "train", "--deterministic",
             "--seed", 7, cwd=root)
        _cli("upsample", "train/model.punw", "ball.xyz", "up/ball.xyz", "--iterations", 1,
             "--seed", 7, cwd=root)
        _cli("eval", "--pred", "up", "--gt", "meshes", "--p", 0.004, 0.01, "--disks", 300,
             "--out", "eval", "--seed", 7, cwd=root)
    same = {cmd: all((tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes() for f in fs)
            for cmd, fs in files.items()}
    up = np.loadtxt(tmp_path / "a" / "up" / "ball.xyz")
    criterion(10, "byte-identical CLI outputs across two seeded runs",
              all(same.values()) and up.shape == (600, 3),
              ", ".join(f"{k} {'identical' if v else 'DIFFERENT'}" for k, v in same.items())
              + f"; upsampled {up.shape[0]} points")
