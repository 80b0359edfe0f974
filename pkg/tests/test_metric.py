import numpy as np
import pytest
from scipy.spatial.transform import Rotation

import oracles
from pukit.errors import EmptyCloud, EmptyMesh
from pukit.geom import Mesh, icosphere, sample_surface
from pukit.metric import deviation, disk_counts, disk_radius, nuc, nuc_from_counts


@pytest.fixture(scope="module")
def small_sphere():
    return icosphere(3)


def test_equal_counts_zero_nuc():
    n, p, D = 1000, 0.01, 50

    def counts(cloud, mesh, p, D, seed):
        return np.full(D, int(round(len(cloud) * p)))

    rep = nuc([(np.zeros((n, 3)), icosphere(0))], p, D, count_fn=counts)
    assert rep.nuc == 0 and rep.avg == 1


def test_nuc_from_counts_pools_objects():
    avg, value = nuc_from_counts([[1, 3], [2, 2]], [100, 200], 0.01)
    ratios = np.array([1, 3, 1, 1])
    assert avg == pytest.approx(ratios.mean())
    assert value == pytest.approx(ratios.std())


def test_disk_radius():
    assert disk_radius(0.01, np.pi) == pytest.approx(0.1)


def test_nuc_preconditions(small_sphere):
    with pytest.raises(EmptyCloud):
        nuc([(np.zeros((0, 3)), small_sphere)], 0.01, 10)
    with pytest.raises(EmptyMesh):
        nuc([(np.zeros((4, 3)), Mesh(np.zeros((0, 3)), np.zeros((0, 3), int)))], 0.01, 10)
    with pytest.raises(ValueError):
        nuc([(np.zeros((4, 3)), small_sphere)], 1.5, 10)


def test_disk_counts_flat_square_bounds():
    # The graph route is never shorter than the straight line, and on a grid of
    # right triangles with cell diagonal e it is at most sqrt(2)|s - p| + (2 + 2 sqrt(2)) e.
    m = 81
    xs = np.linspace(0, 1, m)
    v = np.array([[x, y, 0] for y in xs for x in xs])
    t = []
    for j in range(m - 1):
        for i in range(m - 1):
            a = j * m + i
            t += [[a, a + 1, a + m + 1], [a, a + m + 1, a + m]]
    mesh = Mesh(v, np.array(t))
    e = np.sqrt(2) / (m - 1)
    pts = sample_surface(mesh, 2000, "montecarlo", seed=1)
    p, D = 0.1, 40
    counts = disk_counts(pts, mesh, p, D, np.random.default_rng(5))
    seeds = sample_surface(mesh, D, "montecarlo", np.random.default_rng(5))
    rd = disk_radius(p, 1.0)
    d = np.linalg.norm(seeds[:, None] - pts[None], axis=2)
    assert np.all(counts <= (d <= rd).sum(1))
    assert np.all(counts >= (d <= (rd - (2 + 2 * np.sqrt(2)) * e) / np.sqrt(2)).sum(1))


@pytest.mark.parametrize("seed", range(2))
def test_lattice_beats_clustered(small_sphere, seed):
    fib = oracles.fibonacci_sphere(2048)
    clustered = fib.copy()
    clustered[:, 2] = np.abs(clustered[:, 2])
    for p in (0.004, 0.01):
        a = nuc([(fib, small_sphere)], p, 1000, seed=seed).nuc
        b = nuc([(clustered, small_sphere)], p, 1000, seed=seed).nuc
        assert a < b


def test_nuc_invariances(small_sphere):
    pts = sample_surface(small_sphere, 1500, "montecarlo", seed=3)
    base = nuc([(pts, small_sphere)], 0.01, 300, seed=4)
    perm = np.random.default_rng(0).permutation(len(pts))
    assert nuc([(pts[perm], small_sphere)], 0.01, 300, seed=4).nuc == pytest.approx(base.nuc, abs=1e-9)
    rot = Rotation.from_euler("xyz", [0.2, 0.9, -1.4]).as_matrix()
    t = np.array([3.0, -1.0, 0.5])
    moved = nuc([(pts @ rot.T + t, small_sphere.transformed(rot, t))], 0.01, 300, seed=4)
    assert moved.nuc == pytest.approx(base.nuc, abs=1e-9)
    scaled = nuc([(2.5 * pts, small_sphere.transformed(scale=2.5))], 0.01, 300, seed=4)
    assert scaled.nuc == pytest.approx(base.nuc, abs=1e-9)
    doubled = nuc([(np.vstack([pts, pts]), small_sphere)], 0.01, 300, seed=4)
    assert doubled.nuc == pytest.approx(base.nuc, abs=1e-9)


def test_nuc_deterministic(small_sphere):
    pts = sample_surface(small_sphere, 500, "montecarlo", seed=3)
    a = nuc([(pts, small_sphere)], 0.006, 200, seed=1)
    b = nuc([(pts, small_sphere)], 0.006, 200, seed=1)
    assert a.nuc == b.nuc
    assert all(np.array_equal(x, y) for x, y in zip(a.per_object_counts, b.per_object_counts))
    assert all(c.dtype.kind == "i" and c.min() >= 0 for c in a.per_object_counts)


def test_deviation_on_surface(small_sphere):
    pts = sample_surface(small_sphere, 400, "montecarlo", seed=0)
    d = deviation(pts, small_sphere)
    assert d.mean < 1e-9 and d.std < 1e-9


def test_deviation_offset_sphere():
    mesh = icosphere(5)
    pts = oracles.fibonacci_sphere(500) * 1.01
    d = deviation(pts, mesh, keep_per_point=True)
    # a face lies inside the unit sphere by at most 1 - sqrt(1 - R^2), R <= edge / sqrt(3)
    edge = np.linalg.norm(np.diff(mesh.corners, axis=1), axis=2).max()
    sag = 1 - np.sqrt(1 - edge**2 / 3)
    assert 0.01 - 1e-12 <= d.mean <= 0.01 + sag
    assert d.per_point.shape == (500,)


def test_deviation_motion_and_scale(small_sphere):
    pts = oracles.fibonacci_sphere(300) * 1.05
    base = deviation(pts, small_sphere)
    rot = Rotation.from_euler("xyz", [1.0, 0.1, 0.3]).as_matrix()
    moved = deviation(pts @ rot.T + 1, small_sphere.transformed(rot, [1, 1, 1]))
    assert moved.mean == pytest.approx(base.mean, abs=1e-9)
    assert moved.std == pytest.approx(base.std, abs=1e-9)
    scaled = deviation(3 * pts, small_sphere.transformed(scale=3))
    assert scaled.mean == pytest.approx(3 * base.mean, rel=1e-9)


def test_deviation_errors(small_sphere):
    with pytest.raises(EmptyCloud):
        deviation(np.zeros((0, 3)), small_sphere)
