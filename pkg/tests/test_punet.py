import numpy as np
import pytest

from pukit.errors import ConfigError, NoForwardRecorded, ShapeMismatch, TooFewSources
from pukit.nn import SharedLinear
from pukit.punet import (
    LevelConfig,
    NetworkConfig,
    PUNet,
    build_plan,
    expand,
    fit_input_count,
    interpolate_features,
    reconstruct,
    set_abstraction,
)
from pukit.train import toy_config


def unit_ball(n, seed):
    rng = np.random.default_rng(seed)
    p = rng.normal(size=(n, 3))
    return p / np.linalg.norm(p, axis=1, keepdims=True) * rng.random((n, 1)) ** (1 / 3)


@pytest.fixture(scope="module")
def full_net():
    return PUNet(NetworkConfig.full(), seed=0)


def test_full_level_shapes(full_net):
    pts = unit_ball(1024, 0)
    feats = None
    expected = [(1024, 64), (512, 128), (256, 256), (128, 512)]
    for lvl, mlp, shape in zip(full_net.config.levels, full_net.sa, expected):
        pts, feats = set_abstraction(pts, feats, lvl, mlp)
        assert feats.shape == shape


def test_full_size_shapes(full_net):
    cfg = full_net.config
    assert cfg.embedded_dim == 259 and cfg.expand_dims == (256, 128)
    pts = unit_ball(1024, 1)
    f = full_net.embed(pts)
    assert f.shape == (1024, 259)
    out, wide = expand(f, full_net.branches, return_intermediate=True)
    assert wide.shape == (1024, 512) and out.shape == (4096, 128)
    assert reconstruct(out, full_net.recon).shape == (4096, 3)
    assert full_net.forward(pts).shape == (4096, 3)


def test_forward_composes_blocks():
    net = PUNet(toy_config(32, 3), seed=2, dtype=np.float64)
    pts = unit_ball(32, 2)
    f = net.embed(pts)
    ref = reconstruct(expand(f, net.branches), net.recon)
    np.testing.assert_allclose(net.forward(pts), ref, atol=1e-12)


def test_config_validation():
    with pytest.raises(ConfigError):
        NetworkConfig(embedded_dim=300)
    with pytest.raises(ConfigError):
        NetworkConfig(upsample_rate=1)
    with pytest.raises(ConfigError):
        NetworkConfig(recon_widths=(64, 4))
    with pytest.raises(ConfigError):
        LevelConfig(10, 0.0, (8,))
    with pytest.raises(ConfigError):
        NetworkConfig(input_count=8, levels=[LevelConfig(16, 0.1, (4,))] * 4, reduced_dim=4)


def test_degenerate_group_is_mlp_of_zero():
    mlp = [SharedLinear("a", 5, 4, rng=0, dtype=np.float64),
           SharedLinear("b", 4, 3, rng=1, dtype=np.float64)]
    pts = np.array([[0, 0, 0], [5, 5, 5], [-5, 5, 5]], dtype=float)
    feats = np.array([[0.3, -0.7], [1.0, 2.0], [0.5, 0.5]])
    _, out = set_abstraction(pts, feats, LevelConfig(3, 0.1, (4, 3), group_size=4), mlp)
    x = np.r_[0, 0, 0, feats[0]][None]
    ref = mlp[1].forward(mlp[0].forward(x))
    np.testing.assert_allclose(out[0], ref[0], atol=1e-12)


def test_interpolation_examples():
    src = np.array([[0, 0, 0], [1, 0, 0], [10, 0, 0]], dtype=float)
    feats = np.array([[0.0], [1.0], [10.0]])
    v = interpolate_features(src, feats, [[0.5, 0, 0]])[0, 0]
    w = np.array([2, 2, 1 / 9.5])
    assert v == pytest.approx((w * [0, 1, 10]).sum() / w.sum(), rel=1e-12)
    assert v == pytest.approx(0.7436, abs=1e-4)
    # coincident target recovers the source row
    f3 = np.random.default_rng(0).normal(size=(3, 4))
    np.testing.assert_allclose(interpolate_features(src, f3, src[1:2])[0], f3[1], rtol=1e-6)
    # equidistant target: plain mean
    tri = np.array([[1, 0, 0], [-0.5, np.sqrt(3) / 2, 0], [-0.5, -np.sqrt(3) / 2, 0]])
    np.testing.assert_allclose(interpolate_features(tri, f3, [[0, 0, 0]])[0], f3.mean(0))
    with pytest.raises(TooFewSources):
        interpolate_features(src[:2], feats[:2], [[0, 0, 0]])


def test_expand_degenerate_cases():
    rng = np.random.default_rng(0)
    f = rng.normal(size=(5, 7))
    br = (SharedLinear("c1", 7, 6, rng=1, dtype=np.float64),
          SharedLinear("c2", 6, 4, rng=2, dtype=np.float64))
    single = expand(f, [br])
    np.testing.assert_allclose(single, br[1].forward(br[0].forward(f)))
    twin = expand(f, [br, br])
    np.testing.assert_array_equal(twin[:5], twin[5:])


def test_reconstruct_bias_and_sign():
    l1 = SharedLinear("a", 4, 2, rng=0, dtype=np.float64)
    l2 = SharedLinear("b", 2, 3, rng=0, dtype=np.float64)
    l2.weight[...] = 0
    l2.bias[...] = [0.1, -0.2, 0.3]
    out = reconstruct(np.ones((6, 4)), [l1, l2])
    np.testing.assert_array_equal(out, np.tile([0.1, -0.2, 0.3], (6, 1)))
    l2.bias[...] = -1
    assert np.all(reconstruct(np.ones((2, 4)), [l1, l2]) == -1)


def test_toy_forward_finite():
    net = PUNet(toy_config(), seed=0)
    for s in range(20):
        out = net.forward(unit_ball(16, s))
        assert out.shape == (32, 3) and np.all(np.isfinite(out))


def test_identical_points_give_identical_rows():
    net = PUNet(toy_config(), seed=0)
    f = net.embed(np.tile([[0.1, 0.2, 0.3]], (16, 1)))
    assert np.all(f == f[0])


def test_permutation_equivariance():
    net = PUNet(toy_config(32, 2), seed=3, dtype=np.float64)
    pts = unit_ball(32, 4)
    perm = np.random.default_rng(5).permutation(32)
    a = net.embed(pts, build_plan(pts, net.config, fps_start=0))
    inv = np.argsort(perm)
    b = net.embed(pts[perm], build_plan(pts[perm], net.config, fps_start=inv[0]))
    np.testing.assert_allclose(b, a[perm], atol=1e-12)


def test_scaling_scales_level_one_offsets():
    pts = unit_ball(32, 6)
    # huge radius so that the groups cannot depend on the scale
    cfg_big = NetworkConfig.scaled(8, 32, 2, radii=(50, 50, 50, 50))
    a = build_plan(pts, cfg_big).levels[0]
    b = build_plan(0.5 * pts, cfg_big).levels[0]
    assert np.array_equal(a.groups, b.groups)
    np.testing.assert_allclose(b.rel, 0.5 * a.rel, atol=1e-15)


def test_shared_branches_collapse_points():
    net = PUNet(toy_config(16, 3), seed=1)
    for br in net.branches[1:]:
        for dst, src in zip(br, net.branches[0]):
            dst.weight[...] = src.weight
            dst.bias[...] = src.bias
    out = net.forward(unit_ball(16, 1))
    assert len(np.unique(out, axis=0)) <= 16


def test_input_count_enforced():
    net = PUNet(toy_config(), seed=0)
    with pytest.raises(ShapeMismatch):
        net.forward(unit_ball(15, 0))
    with pytest.raises(NoForwardRecorded):
        PUNet(toy_config(), seed=0).backward(np.zeros((32, 3)))


def test_fit_input_count():
    pts = unit_ball(10, 0)
    up, idx = fit_input_count(pts, 16, rng=1)
    assert up.shape == (16, 3) and set(idx[:10]) == set(range(10))
    down, idx = fit_input_count(pts, 4)
    assert len(set(idx)) == 4
    same, idx = fit_input_count(pts, 10)
    assert np.array_equal(idx, np.arange(10))


def test_batched_forward_matches_single():
    net = PUNet(toy_config(), seed=0, dtype=np.float64)
    a, b = unit_ball(16, 1), unit_ball(16, 2)
    both = net.forward(np.stack([a, b]))
    np.testing.assert_allclose(both[1], net.forward(b), atol=1e-12)


def test_backward_matches_finite_difference_on_inputs_fixed():
    net = PUNet(toy_config(), seed=4, dtype=np.float64)
    rng = np.random.default_rng(0)
    for l in net.layers:
        l.bias[...] = rng.uniform(-0.05, 0.05, l.bias.shape)
    x = unit_ball(16, 3)
    plan = net.plan(x)
    g = rng.normal(size=(32, 3))
    net.zero_grad()
    net.forward(x, plan)
    net.backward(g)
    layer = net.recon[0]
    i = np.unravel_index(np.argmax(np.abs(layer.grad_weight)), layer.weight.shape)
    eps = 1e-6
    old = layer.weight[i]
    layer.weight[i] = old + eps
    fp = (net.forward(x, plan) * g).sum()
    layer.weight[i] = old - eps
    fm = (net.forward(x, plan) * g).sum()
    layer.weight[i] = old
    assert layer.grad_weight[i] == pytest.approx((fp - fm) / (2 * eps), rel=1e-6)
