import dataclasses

import numpy as np
import pytest

from vesselforge import compose, config as cfg, foreground as fg, volume as vol
from vesselforge.config import CHAIN_STAGES, IntensityChainSpec, MergeSpec
from vesselforge.rng import Rng, make_rng


# ------------------------------------------------------------------ separation rule


def test_intensity_outside_band():
    bg = np.full((4, 4, 4), 0.5, np.float32)
    g = make_rng(1)
    for _ in range(2000):
        i_m, mu = compose.sample_foreground_intensity(bg, 0.1, g)
        assert mu == pytest.approx(0.5)
        assert abs(i_m - mu) >= 0.1 and 0 <= i_m <= 1


def test_intensity_dark_background():
    bg = np.zeros((4, 4, 4), np.float32)
    g = make_rng(2)
    vals = [compose.sample_foreground_intensity(bg, 0.1, g)[0] for _ in range(2000)]
    assert min(vals) >= 0.1 and max(vals) <= 1.0


def test_intensity_uniform_over_allowed_segments():
    bg = np.full((4, 4, 4), 0.5, np.float32)
    g = make_rng(3)
    vals = np.sort([compose.sample_foreground_intensity(bg, 0.1, g)[0] for _ in range(10_000)])
    # analytic CDF of the uniform law on [0, 0.4] u [0.6, 1]
    cdf = np.where(vals <= 0.4, vals / 0.8, 0.5 + (vals - 0.6) / 0.8)
    emp = np.arange(1, len(vals) + 1) / len(vals)
    assert np.max(np.abs(emp - cdf)) <= 0.02
    assert abs(np.mean(vals < 0.5) - 0.5) <= 0.02


def test_merge_spec_validation():
    with pytest.raises(ValueError):
        MergeSpec(delta=0.5).validate()
    with pytest.raises(ValueError):
        MergeSpec(delta=0.0).validate()


# ------------------------------------------------------------------ merge


@pytest.mark.parametrize("mode", ["add", "subtract", "replace"])
def test_empty_foreground_keeps_background(mode, rng):
    bg = rng.random((8, 8, 8)).astype(np.float32)
    empty = np.zeros_like(bg)
    out, _ = compose.merge(empty, empty > 0, bg, MergeSpec(), make_rng(0), mode=mode)
    assert np.array_equal(out, bg)


def test_replace_merge_example():
    label = np.zeros((8, 8, 8), bool)
    label[2:6, 3, 3:7] = True
    bg = np.full(label.shape, 0.5, np.float32)
    out, info = compose.merge(label.astype(np.float32), label, bg, MergeSpec(), make_rng(0), mode="replace", intensity=0.9)
    assert np.all(out[label] == np.float32(0.9)) and np.all(out[~label] == np.float32(0.5))
    assert info["mode"] == "replace"


def test_add_merge_clamps():
    label = np.zeros((8, 8, 8), bool)
    label[4, 2:6, 4] = True
    bg = np.full(label.shape, 0.8, np.float32)
    out, _ = compose.merge(label.astype(np.float32), label, bg, MergeSpec(), make_rng(0), mode="add", intensity=0.9)
    assert np.all(out[label] == 1.0)
    assert np.array_equal(out, np.minimum(bg + 0.9 * label, 1.0).astype(np.float32))


def test_subtract_merge_clamps():
    label = np.zeros((8, 8, 8), bool)
    label[4, 2:6, 4] = True
    bg = np.full(label.shape, 0.3, np.float32)
    out, _ = compose.merge(label.astype(np.float32), label, bg, MergeSpec(), make_rng(0), mode="subtract", intensity=0.9)
    assert np.all(out[label] == 0.0) and np.all(out[~label] == np.float32(0.3))


def test_merge_shape_mismatch():
    with pytest.raises(ValueError):
        compose.merge(np.zeros((4, 4, 4)), np.zeros((4, 4, 4), bool), np.zeros((4, 4, 5)), MergeSpec(), make_rng(0))


# ------------------------------------------------------------------ chain


def _zero_chain():
    return IntensityChainSpec(probs={s: 0.0 for s in CHAIN_STAGES})


def test_chain_all_off_identity(rng):
    img = rng.random((12, 12, 12)).astype(np.float32)
    out, applied = compose.apply_intensity_chain(img, _zero_chain(), make_rng(0))
    assert applied == [] and np.array_equal(out, img)


def test_gibbs_full_pass_identity(rng):
    img = rng.random((10, 12, 14)).astype(np.float32)
    assert np.max(np.abs(compose.gibbs_lowpass(img, 1.0) - img)) <= 1e-5


def test_gibbs_matches_full_fft(rng):
    img = rng.random((10, 12, 14)).astype(np.float32)
    cutoff = 0.5
    spec = np.fft.fftn(img)
    f = np.meshgrid(*[2 * np.fft.fftfreq(n) for n in img.shape], indexing="ij")
    keep = np.sqrt((f[0] ** 2 + f[1] ** 2 + f[2] ** 2) / 3) <= cutoff
    ref = np.real(np.fft.ifftn(spec * keep))
    assert np.max(np.abs(compose.gibbs_lowpass(img, cutoff) - ref)) <= 1e-5


def test_rician_zero_sigma_identity(rng):
    img = rng.random((8, 8, 8)).astype(np.float32)
    assert np.array_equal(compose.rician_noise(img, 0.0, 0.0, make_rng(0)), img)


def test_histogram_identity_knots(rng):
    img = rng.random((8, 8, 8)).astype(np.float32)
    xp = np.linspace(0, 1, 6)
    assert np.allclose(compose.histogram_remap(img, xp, xp), img, atol=1e-6)


def test_histogram_knots_monotone():
    g = make_rng(4)
    for n in range(2, 11):
        xp, fp = compose.random_histogram_knots(n, 1.0, g)
        assert fp[0] == 0 and fp[-1] == 1 and np.all(np.diff(fp) >= 0)


def test_kspace_spikes_real_and_local(rng):
    img = rng.random((8, 8, 8)).astype(np.float32)
    out = compose.kspace_spikes(img, np.array([[1, 2, 3]]), np.array([10.0]))
    diff = np.fft.fftn(out) - np.fft.fftn(img)
    changed = np.argwhere(np.abs(diff) > 1e-3)
    assert {tuple(c) for c in changed} == {(1, 2, 3), (7, 6, 5)}


def test_gamma_and_sharpen_contracts(rng):
    img = rng.random((8, 8, 8)).astype(np.float32)
    assert np.allclose(compose.gamma_contrast(img, 1.0), img, atol=1e-6)
    g = compose.gamma_contrast(img, 2.0)
    assert np.array_equal(np.argsort(g.ravel(), kind="stable"), np.argsort(img.ravel(), kind="stable"))
    const = np.full((6, 6, 6), 0.3, np.float32)
    assert np.allclose(compose.gaussian_sharpen(const, 2.0, 1.0), const, atol=1e-6)


def test_renormalise_rules():
    a = np.array([-0.01, 0.5, 1.02], np.float32).reshape(1, 1, 3)
    assert np.array_equal(compose.renormalise(a), np.clip(a, 0, 1))
    b = np.array([-0.5, 0.5, 1.5], np.float32).reshape(1, 1, 3)
    assert np.allclose(compose.renormalise(b).ravel(), [0.0, 0.5, 1.0])


def test_chain_force_and_order(rng):
    img = rng.random((10, 10, 10)).astype(np.float32)
    out, applied = compose.apply_intensity_chain(img, _zero_chain(), make_rng(1), force={s: True for s in CHAIN_STAGES})
    assert applied == list(CHAIN_STAGES)
    assert out.min() >= 0 and out.max() <= 1


def test_chain_stage_frequencies():
    spec = IntensityChainSpec()
    counts = dict.fromkeys(CHAIN_STAGES, 0)
    img = np.full((2, 2, 2), 0.5, np.float32)
    n = 4000
    for i in range(n):
        _, applied = compose.apply_intensity_chain(img, spec, make_rng(99, i))
        for s in applied:
            counts[s] += 1
    for s in CHAIN_STAGES:
        assert abs(counts[s] / n - spec.probs[s]) <= 0.03


# ------------------------------------------------------------------ pairs


@pytest.fixture(scope="module")
def small_config():
    return cfg.default_config(32, seed=5)


def test_pair_deterministic(small_config):
    a = compose.generate_drand_pair(small_config, 3)
    b = compose.generate_drand_pair(small_config, 3)
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1]) and a[3] == b[3]


def test_pair_contract(small_config):
    image, label, cls, meta = compose.generate_drand_pair(small_config, 0)
    assert image.shape == label.shape == (32, 32, 32)
    assert image.dtype == np.float32 and label.dtype == bool and cls == 0
    assert image.min() >= 0 and image.max() <= 1
    assert abs(meta["i_m"] - meta["i_b_mu"]) >= meta["delta"]
    assert meta["config_hash"] == small_config.hash() and meta["seed"] == 5 and meta["stream"] == 0


def test_pairs_differ_across_indices(small_config):
    digests = set()
    for i in range(100):
        image, label, _, _ = compose.generate_drand_pair(small_config, i)
        digests.add(image.tobytes() + label.tobytes())
    assert len(digests) == 100


def test_collapsed_pair_oracle():
    config = cfg.default_config(32, seed=3)
    config.spatial = dataclasses.replace(
        config.spatial,
        random_center=False,
        flip=False,
        rotate=False,
        dilation_radius=(0, 0),
        zoom=(1.0, 1.0),
        elastic_magnitude=(0.0, 0.0),
        smooth_sigma=(0.0, 0.0),
    )
    config.artifact = dataclasses.replace(config.artifact, weights={"identity": 1.0})
    config.background = dataclasses.replace(config.background, geometry_weights={"none": 1.0}, plain_prob=1.0, plain_intensity=0.25)
    config.merge = MergeSpec(mode_weights={"replace": 1.0})
    config.chain = _zero_chain()
    index = 7
    image, label, _, meta = compose.generate_drand_pair(config, index)

    r = Rng(3, index)
    tree = fg.generate_vessel_patch(config.tree, r.generator(compose.STAGE_TREE))
    expected_label = fg.apply_spatial_mask_transforms(tree, config.spatial, r.generator(compose.STAGE_SPATIAL))
    assert np.array_equal(expected_label, vol.center_crop(tree, (32, 32, 32)))
    assert np.array_equal(label, expected_label)
    assert meta["merge_mode"] == "replace" and meta["artifact"] == "identity"
    assert np.all(image[~label] == np.float32(0.25))
    assert np.unique(image[label]).size == 1
    assert image[label][0] == np.float32(meta["i_m"])
    assert abs(meta["i_m"] - 0.25) >= config.merge.delta


def test_overrides_pin_draws(small_config):
    _, _, _, meta = compose.generate_drand_pair(small_config, 1, {"artifact": "hull", "geometry": "voronoi", "merge_mode": "subtract"})
    assert (meta["artifact"], meta["geometry"], meta["merge_mode"]) == ("hull", "voronoi", "subtract")
