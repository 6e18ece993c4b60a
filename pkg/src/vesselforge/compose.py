"""Merging foregrounds into backgrounds, the intensity-corruption chain, and full drand pairs."""

import numpy as np
from scipy import fft as sfft

from vesselforge import background as bg_mod, foreground as fg_mod, kernels, volume as vol
from vesselforge.config import CHAIN_STAGES, MERGE_MODES, DrandConfig, IntensityChainSpec, MergeSpec
from vesselforge.rng import Rng

# counter blocks of a sample's stream
STAGE_TREE, STAGE_SPATIAL, STAGE_ARTIFACT, STAGE_BACKGROUND, STAGE_MERGE, STAGE_CHAIN = range(6)


class SeparationError(AssertionError):
    pass


# ---------------------------------------------------------------- merging


def sample_foreground_intensity(bg, delta, rng):
    """Draw a foreground intensity uniformly from ``[0, 1]`` minus ``[mu - delta, mu + delta]``.

    ``mu`` is the mean background intensity. Returns ``(intensity, mu)``.
    """
    mu = float(np.mean(bg, dtype=np.float64))
    lo_len = max(mu - delta, 0.0)
    hi_start = min(mu + delta, 1.0)
    hi_len = max(1.0 - hi_start, 0.0)
    total = lo_len + hi_len
    if total <= 0.0:
        raise ValueError(f"excluded interval [{mu - delta}, {mu + delta}] covers [0, 1]")
    u = float(rng.uniform(0.0, total))
    value = u if u < lo_len else hi_start + (u - lo_len)
    # guard the closed exclusion rule against rounding at the segment edges
    while abs(value - mu) < delta:
        value = np.nextafter(value, -np.inf if value < mu else np.inf)
    return float(min(max(value, 0.0), 1.0)), mu


def sample_merge_mode(spec: MergeSpec, rng):
    w = np.array([spec.mode_weights.get(m, 0.0) for m in MERGE_MODES], dtype=np.float64)
    return MERGE_MODES[int(rng.choice(len(MERGE_MODES), p=w / w.sum()))]


def merge(fg, label, bg, spec: MergeSpec, rng, mode=None, intensity=None):
    """Blend the artifact-transformed foreground ``fg`` into ``bg``.

    ``fg`` is rescaled so its peak equals the foreground intensity
    (drawn by the separation rule unless ``intensity`` is given). ``add`` and
    ``subtract`` clamp to [0, 1]. ``replace`` overwrites ``bg`` wherever ``fg > 0``.
    Returns ``(image, info)``.
    """
    fg = np.asarray(fg, dtype=np.float32)
    bg = np.asarray(bg, dtype=np.float32)
    if fg.shape != bg.shape or np.shape(label) != bg.shape:
        raise ValueError(f"shape mismatch: fg {fg.shape}, label {np.shape(label)}, bg {bg.shape}")
    drawn_mode = sample_merge_mode(spec, rng)
    mode = mode or drawn_mode
    i_m, mu = sample_foreground_intensity(bg, spec.delta, rng)
    if intensity is not None:
        i_m = float(intensity)
    peak = float(fg.max()) if fg.size else 0.0
    scaled = fg * np.float32(i_m / peak) if peak > 0 else np.zeros_like(fg)
    if mode == "add":
        out = np.clip(bg + scaled, 0.0, 1.0)
    elif mode == "subtract":
        out = np.clip(bg - scaled, 0.0, 1.0)
    elif mode == "replace":
        out = np.where(fg > 0, scaled, bg)
    else:
        raise ValueError(f"unknown merge mode {mode!r}")
    info = {"mode": mode, "i_m": i_m, "i_b_mu": mu, "delta": float(spec.delta)}
    return out.astype(np.float32), info


# ---------------------------------------------------------------- intensity chain


def _normalise(img):
    lo, hi = float(img.min()), float(img.max())
    span = hi - lo
    if span <= 0:
        return np.zeros_like(img), lo, span
    return (img - lo) / span, lo, span


def kspace_spikes(img, bins, factors):
    """Scale isolated Fourier bins (and their conjugate mirrors) and return the real part."""
    # real input: scaling a bin together with its mirror keeps the spectrum Hermitian,
    # so the half spectrum of a real transform carries the whole edit
    shape = np.array(img.shape)
    half = img.shape[2] // 2
    spec = sfft.rfftn(np.asarray(img, dtype=np.float64))
    for b, f in zip(bins, factors):
        b = tuple(int(i) for i in b)
        mirror = tuple(int(i) for i in (-np.asarray(b)) % shape)
        for c in (b, mirror) if mirror != b else (b,):
            if c[2] <= half:
                spec[c] *= f
    return sfft.irfftn(spec, s=img.shape).astype(np.float32)


def gibbs_lowpass(img, cutoff):
    """Zero k-space outside a sphere of normalised radius ``cutoff`` (1 keeps the corners)."""
    if cutoff >= 1.0:
        return img.astype(np.float32, copy=True)
    # the mask is symmetric under k -> -k, so the half spectrum of a real transform suffices
    freqs = [2.0 * np.fft.fftfreq(n) for n in img.shape[:2]] + [2.0 * np.fft.rfftfreq(img.shape[2])]
    r2 = freqs[0][:, None, None] ** 2 + freqs[1][None, :, None] ** 2 + freqs[2][None, None, :] ** 2
    keep = np.sqrt(r2 / 3.0) <= cutoff
    spec = sfft.rfftn(img.astype(np.float32, copy=False))
    return sfft.irfftn(spec * keep, s=img.shape).astype(np.float32)


def rician_noise(img, sigma_real, sigma_imag, rng):
    n1 = rng.standard_normal(size=img.shape, dtype=np.float32) * np.float32(sigma_real)
    n2 = rng.standard_normal(size=img.shape, dtype=np.float32) * np.float32(sigma_imag)
    return np.sqrt((img + n1) ** 2 + n2**2).astype(np.float32)


def gamma_contrast(img, gamma):
    norm, lo, span = _normalise(img)
    if span <= 0:
        return img.copy()
    return (np.power(norm, gamma) * span + lo).astype(np.float32)


def histogram_remap(img, xp, fp):
    """Monotone piecewise-linear remap of normalised intensities through knots ``(xp, fp)``."""
    img = np.asarray(img, dtype=np.float32)
    lo, hi = float(img.min()), float(img.max())
    if hi - lo <= 0:
        return img.copy()
    return kernels.histogram_remap(img, lo, hi - lo, xp, fp)


def random_histogram_knots(n_points, strength, rng):
    """Knots on [0, 1] with interior ordinates jittered between their neighbours."""
    xp = np.linspace(0.0, 1.0, n_points)
    fp = xp.copy()
    for i in range(1, n_points - 1):
        lo, hi = xp[i - 1], xp[i + 1]
        target = rng.uniform(lo, hi)
        fp[i] = xp[i] + strength * (target - xp[i])
    return xp, np.maximum.accumulate(fp)


def gaussian_sharpen(img, alpha, sigma):
    return (img + alpha * (img - vol.gaussian_smooth(img, sigma))).astype(np.float32)


def renormalise(img, margin=0.05):
    """Min-max to [0, 1] only if the range leaves ``[-margin, 1 + margin]``, otherwise clamp."""
    lo, hi = float(img.min()), float(img.max())
    if (lo < -margin or hi > 1.0 + margin) and hi > lo:
        return ((img - lo) / (hi - lo)).astype(np.float32)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def apply_intensity_chain(img, spec: IntensityChainSpec, rng, force=None):
    """Apply the nine stages in their fixed order, each with its own probability.

    ``force`` maps stage names to True/False and overrides the coin flip.
    Returns ``(image, applied_stage_names)``.
    """
    spec.validate()
    img = np.asarray(img, dtype=np.float32).copy()
    force = force or {}
    applied = []
    for stage in CHAIN_STAGES:
        hit = bool(rng.random() < spec.probs[stage])
        hit = force.get(stage, hit)
        if not hit:
            continue
        applied.append(stage)
        if stage == "bias_field":
            a = rng.uniform(*spec.bias_amplitude)
            img = img * fg_mod.polynomial_field(img.shape, spec.bias_degree, a, rng)
        elif stage == "gauss_noise":
            s = rng.uniform(*spec.noise_sigma)
            img = img + rng.standard_normal(size=img.shape, dtype=np.float32) * np.float32(s)
        elif stage == "kspace_spikes":
            k = int(rng.integers(spec.spike_count[0], spec.spike_count[1] + 1))
            bins = np.stack([rng.integers(0, n, size=k) for n in img.shape], axis=1)
            factors = rng.uniform(*spec.spike_factor, size=k)
            img = kspace_spikes(img, bins, factors)
        elif stage == "contrast":
            g = float(np.exp(rng.uniform(np.log(spec.gamma[0]), np.log(spec.gamma[1]))))
            img = gamma_contrast(img, g)
        elif stage == "gauss_smooth":
            if rng.random() < spec.smooth_shared_prob:
                sigma = rng.uniform(*spec.smooth_sigma)
            else:
                sigma = tuple(rng.uniform(*spec.smooth_sigma, size=3))
            img = vol.gaussian_smooth(img, sigma)
        elif stage == "rician_noise":
            s = rng.uniform(*spec.rician_sigma)
            img = rician_noise(img, s, s, rng)
        elif stage == "gibbs_noise":
            img = gibbs_lowpass(img, rng.uniform(*spec.gibbs_cutoff))
        elif stage == "gauss_sharpen":
            img = gaussian_sharpen(img, rng.uniform(*spec.sharpen_alpha), rng.uniform(*spec.sharpen_sigma))
        elif stage == "histogram":
            n = int(rng.integers(spec.histogram_points[0], spec.histogram_points[1] + 1))
            xp, fp = random_histogram_knots(n, 1.0, rng)
            img = histogram_remap(img, xp, fp)
    return renormalise(img), applied


# ---------------------------------------------------------------- full pairs


def _source_patch(config: DrandConfig, rng):
    if config.patch_dir:
        from vesselforge import nifti

        files = fg_mod.load_patch_directory(config.patch_dir)
        data, _ = nifti.read_volume(files[int(rng.integers(len(files)))])
        return np.asarray(data).astype(bool)
    return fg_mod.generate_vessel_patch(config.tree, rng)


def generate_label(config: DrandConfig, index):
    """Only the synthetic label of sample ``index`` (tree + spatial transforms)."""
    r = Rng(int(config.seed), int(index))
    patch = _source_patch(config, r.generator(STAGE_TREE))
    return fg_mod.apply_spatial_mask_transforms(patch, config.spatial, r.generator(STAGE_SPATIAL))


def generate_drand_pair(config: DrandConfig, index, overrides=None):
    """Full pipeline for sample ``index``: ``(image, label, class_id, metadata)``.

    Each stage draws from its own counter block of the ``(seed, index)``
    stream. ``overrides`` may pin ``artifact``, ``geometry`` or ``merge_mode``.
    """
    config.validate()
    overrides = overrides or {}
    r = Rng(int(config.seed), int(index))
    label = generate_label(config, index)

    g = r.generator(STAGE_ARTIFACT)
    kind = fg_mod.sample_artifact_kind(config.artifact, g)
    kind = overrides.get("artifact", kind)
    fg, art_info = fg_mod.apply_artifact_transform(label, kind, g, config.artifact)

    back, _, bg_info = bg_mod.compose_background(
        config.background, config.shape, r.generator(STAGE_BACKGROUND), overrides.get("geometry")
    )
    merged, merge_info = merge(
        fg, label, back, config.merge, r.generator(STAGE_MERGE), mode=overrides.get("merge_mode")
    )
    if abs(merge_info["i_m"] - merge_info["i_b_mu"]) < config.merge.delta:
        raise SeparationError(f"foreground intensity violates separation: {merge_info}")

    image, applied = apply_intensity_chain(merged, config.chain, r.generator(STAGE_CHAIN))
    meta = {
        "seed": int(config.seed),
        "stream": int(index),
        "config_hash": config.hash(),
        "class": 0,
        "artifact": kind,
        "artifact_info": art_info,
        "geometry": bg_info["geometry"],
        "textures": bg_info["textures"],
        "merge_mode": merge_info["mode"],
        "i_m": merge_info["i_m"],
        "i_b_mu": merge_info["i_b_mu"],
        "delta": merge_info["delta"],
        "chain": applied,
    }
    return image, label, 0, meta
