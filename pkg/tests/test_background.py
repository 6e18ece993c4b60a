import itertools

import numpy as np
import pytest

from vesselforge import background as bg, kernels
from vesselforge.config import GEOMETRIES, BackgroundSpec
from vesselforge.rng import make_rng


# ------------------------------------------------------------------ spheres


def test_no_spheres():
    labels, centers, radii = bg.place_spheres((16, 16, 16), 0, (2.0, 4.0), make_rng(0))
    assert not labels.any() and len(centers) == 0


def test_two_spheres_separated():
    for s in range(20):
        _, c, r = bg.place_spheres((32, 32, 32), 2, (3.0, 6.0), make_rng(s))
        if len(r) == 2:
            assert np.linalg.norm(c[0] - c[1]) >= r[0] + r[1]


def test_many_spheres_voxel_disjoint():
    labels, centers, radii = bg.place_spheres((64, 64, 64), 50, (3.0, 6.0), make_rng(3))
    grid = np.indices(labels.shape).reshape(3, -1).T
    cover = np.zeros(grid.shape[0], dtype=np.int32)
    for c, r in zip(centers, radii):
        ball = np.sum((grid - c) ** 2, axis=1) < r * r
        cover += ball
    assert cover.max() <= 1
    assert len(radii) > 0
    for i, j in itertools.combinations(range(len(radii)), 2):
        assert np.linalg.norm(centers[i] - centers[j]) >= radii[i] + radii[j]
    assert np.array_equal(labels.reshape(-1) > 0, cover > 0)


def test_short_placement_warns(caplog):
    with caplog.at_level("WARNING"):
        _, _, r = bg.place_spheres((8, 8, 8), 20, (3.0, 3.5), make_rng(0))
    assert len(r) < 20 and "placed" in caplog.text


# ------------------------------------------------------------------ voronoi


def _nearest_oracle(shape, seeds):
    out = np.empty(shape, dtype=np.int64)
    for p in itertools.product(*[range(n) for n in shape]):
        d = [sum((p[a] - s[a]) ** 2 for a in range(3)) for s in seeds]
        out[p] = min(range(len(seeds)), key=lambda i: (d[i], i))
    return out


def test_voronoi_two_corners(backend):
    seeds = np.array([[0.0, 0.0, 0.0], [15.0, 15.0, 15.0]])
    labels, _ = bg.voronoi_partition((16, 16, 16), 2, None, seeds=seeds)
    assert np.array_equal(labels, _nearest_oracle((16, 16, 16), seeds))
    s = np.indices((16, 16, 16)).sum(axis=0)
    # bisecting plane z + y + x = 22.5; nothing lies on it, so the split is clean
    assert np.array_equal(labels == 1, s > 22.5)


def test_voronoi_exhaustive(backend):
    seeds = make_rng(7).uniform(0, 7, size=(5, 3))
    labels, _ = bg.voronoi_partition((8, 8, 8), 5, None, seeds=seeds)
    assert np.array_equal(labels, _nearest_oracle((8, 8, 8), seeds))


def test_voronoi_tie_goes_to_lowest_index(backend):
    seeds = np.array([[0.0, 0.0, 2.0], [0.0, 0.0, 0.0], [0.0, 0.0, 2.0]])
    labels, _ = bg.voronoi_partition((1, 1, 3), 3, None, seeds=seeds)
    assert labels.ravel().tolist() == [1, 0, 0]


def test_voronoi_one_seed_per_voxel():
    seeds = np.indices((4, 4, 4)).reshape(3, -1).T.astype(float)
    labels, _ = bg.voronoi_partition((4, 4, 4), 64, None, seeds=seeds)
    assert np.array_equal(labels.ravel(), np.arange(64))


def test_voronoi_needs_two_seeds():
    with pytest.raises(ValueError):
        bg.voronoi_partition((8, 8, 8), 1, make_rng(0))


# ------------------------------------------------------------------ perlin


def test_perlin_deterministic_and_in_range():
    a = bg.perlin_volume((16, 16, 16), 3, 1 / 8, 0.5, make_rng(4))
    b = bg.perlin_volume((16, 16, 16), 3, 1 / 8, 0.5, make_rng(4))
    assert np.array_equal(a, b)
    assert a.min() >= 0 and a.max() <= 1 and a.min() == 0 and a.max() == 1


def test_gradient_noise_vanishes_on_lattice(backend):
    perm = bg.permutation_table(make_rng(1))
    pts = np.indices((6, 6, 6)).reshape(3, -1).astype(float) - 2.0
    assert np.all(kernels.gradient_noise(pts[0], pts[1], pts[2], perm) == 0.0)
    off = pts + 0.37
    assert np.any(kernels.gradient_noise(off[0], off[1], off[2], perm) != 0.0)


def test_perlin_lipschitz():
    v = bg.perlin_volume((24, 24, 24), 4, 1 / 8, 0.5, make_rng(2))
    steps = [np.abs(np.diff(v, axis=a)).max() for a in range(3)]
    # 4 octaves up to 1 cycle/voxel; a generous empirical bound
    assert max(steps) < 0.75


def test_noise_backends_agree(rng):
    from vesselforge import _accel

    if not _accel.HAS_NUMBA:
        pytest.skip("numba not installed")
    perms = np.stack([bg.permutation_table(make_rng(s)) for s in range(3)])
    pts = rng.uniform(-50, 50, size=(3, 2000))
    args = (perms, np.array([0.1, 0.2, 0.4]), np.array([1.0, 0.5, 0.25]), rng.uniform(0, 256, (3, 3)))
    a = kernels.fractal_noise_nb(*pts, *args)
    b = kernels.fractal_noise_np(*pts, *args)
    assert np.array_equal(a, b)


# ------------------------------------------------------------------ compose


def test_plain_none_background():
    spec = BackgroundSpec(geometry_weights={"none": 1.0}, plain_prob=1.0, plain_intensity=0.37)
    out, _, info = bg.compose_background(spec, (12, 12, 12), make_rng(0))
    assert info["geometry"] == "none"
    assert np.all(out == np.float32(0.37))


def test_voronoi_plain_piecewise_constant():
    spec = BackgroundSpec(geometry_weights={"voronoi": 1.0}, plain_prob=1.0, n_voronoi_seeds=(4, 8))
    out, regions, info = bg.compose_background(spec, (20, 20, 20), make_rng(5))
    for k in np.unique(regions):
        vals = out[regions == k]
        assert np.unique(vals).size == 1
        assert vals[0] == np.float32(info["texture_params"][k]["intensity"])


def test_spheres_perlin_regions_carry_own_texture():
    spec = BackgroundSpec(geometry_weights={"spheres": 1.0}, plain_prob=0.0, n_spheres=(3, 6), sphere_radius=(4.0, 7.0))
    out, regions, info = bg.compose_background(spec, (32, 32, 32), make_rng(8))
    assert info["n_regions"] > 1
    for k in np.unique(regions):
        lo, hi = info["texture_params"][k]["window"]
        vals = out[regions == k]
        # each region is rescaled into its own window, reaching both ends
        assert vals.min() == pytest.approx(lo, abs=1e-6)
        assert vals.max() == pytest.approx(hi, abs=1e-6)
    inside, outside = out[regions > 0], out[regions == 0]
    assert abs(inside.mean() - outside.mean()) > 1e-3 or abs(inside.std() - outside.std()) > 1e-3


def test_textured_regions_backends_agree():
    from vesselforge import _accel

    if not _accel.HAS_NUMBA:
        pytest.skip("numba not installed")
    spec = BackgroundSpec(plain_prob=0.3)
    outs = []
    for name in ("numba", "numpy"):
        prev = _accel.backend()
        _accel.set_backend(name)
        try:
            outs.append(bg.compose_background(spec, (20, 20, 20), make_rng(12), geometry="voronoi")[0])
        finally:
            _accel.set_backend(prev)
    assert np.array_equal(outs[0], outs[1])


@pytest.mark.parametrize("per_region", [True, False])
def test_background_in_unit_interval(per_region):
    spec = BackgroundSpec(per_region=per_region, n_spheres=(2, 4), sphere_radius=(2.0, 5.0), perlin_base_freq=(1 / 16, 1 / 4))
    for s in range(12):
        out, _, _ = bg.compose_background(spec, (16, 16, 16), make_rng(s, 3))
        assert out.dtype == np.float32 and out.min() >= 0 and out.max() <= 1


def test_background_deterministic():
    spec = BackgroundSpec(n_spheres=(2, 4), sphere_radius=(2.0, 5.0))
    a = bg.compose_background(spec, (16, 16, 16), make_rng(6, 6))[0]
    b = bg.compose_background(spec, (16, 16, 16), make_rng(6, 6))[0]
    assert np.array_equal(a, b)


def test_geometry_frequencies():
    spec = BackgroundSpec(geometry_weights={"spheres": 0.5, "voronoi": 0.3, "none": 0.2})
    g = make_rng(10)
    draws = [bg.sample_geometry(spec, g) for _ in range(10_000)]
    for name in GEOMETRIES:
        assert abs(draws.count(name) / 10_000 - spec.geometry_weights[name]) <= 0.015


def test_invalid_background_spec():
    with pytest.raises(ValueError):
        BackgroundSpec(sphere_radius=(0.0, 3.0)).validate()
    with pytest.raises(ValueError):
        BackgroundSpec(plain_intensity=1.5).validate()
    with pytest.raises(ValueError):
        BackgroundSpec(n_voronoi_seeds=(1, 4)).validate()
