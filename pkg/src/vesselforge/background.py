"""Background volumes: sphere or Voronoi geometries textured with Perlin noise or flat intensities."""

import logging

import numpy as np

from vesselforge import kernels
from vesselforge.config import GEOMETRIES, BackgroundSpec

log = logging.getLogger(__name__)


# ---------------------------------------------------------------- perlin


def permutation_table(rng):
    p = rng.permutation(256).astype(np.int64)
    return np.concatenate([p, p])


def fractal_noise(points, perms, base_freq, persistence, offsets=None):
    """Raw (unscaled) fractal sum of gradient noise at ``points`` (n, 3).

    Octave ``o`` samples at ``points * base_freq * 2**o + offsets[o]`` with
    amplitude ``persistence**o``, using its own permutation table ``perms[o]``.
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    n_oct = len(perms)
    freqs = base_freq * 2.0 ** np.arange(n_oct)
    amps = persistence ** np.arange(n_oct, dtype=np.float64)
    offsets = np.zeros((n_oct, 3)) if offsets is None else np.asarray(offsets, dtype=np.float64)
    return kernels.fractal_noise(points[:, 0], points[:, 1], points[:, 2], np.stack(perms), freqs, amps, offsets)


def _rescale01(values):
    lo, hi = values.min(), values.max()
    if hi - lo <= 1e-12:
        return np.full(values.shape, 0.5, dtype=np.float32)
    return ((values - lo) / (hi - lo)).astype(np.float32)


def _draw_noise_params(octaves, rng):
    perms = [permutation_table(rng) for _ in range(octaves)]
    offsets = rng.uniform(0.0, 256.0, size=(octaves, 3))
    return perms, offsets


def perlin_points(points, octaves, base_freq, persistence, rng):
    perms, offsets = _draw_noise_params(octaves, rng)
    return _rescale01(fractal_noise(points, perms, base_freq, persistence, offsets))


def perlin_volume(shape, octaves, base_freq, persistence, rng):
    """Fractal gradient noise on the voxel grid, min-max rescaled to [0, 1]."""
    if octaves < 1:
        raise ValueError("octaves must be >= 1")
    if base_freq <= 0:
        raise ValueError("base frequency must be positive")
    pts = np.indices(shape, dtype=np.float64).reshape(3, -1).T
    return perlin_points(pts, octaves, base_freq, persistence, rng).reshape(shape)


# ---------------------------------------------------------------- geometries


def place_spheres(shape, n, radius_range, rng, max_trials_per_sphere=100):
    """Rejection-sample up to ``n`` pairwise non-overlapping spheres.

    Returns ``(labels, centers, radii)``. ``labels`` is int32, with 0 for background
    and k for sphere k. Overlap means ``|c_i - c_j| < r_i + r_j``. At most
    ``100 * n`` trials are made, so fewer spheres may come back.
    """
    if n < 0:
        raise ValueError("n must be non-negative")
    shape = tuple(int(s) for s in shape)
    labels = np.zeros(shape, dtype=np.int32)
    centers, radii = [], []
    trials = 0
    while len(centers) < n and trials < max_trials_per_sphere * n:
        trials += 1
        r = float(rng.uniform(*radius_range))
        c = rng.uniform(0.0, np.asarray(shape, dtype=np.float64) - 1.0)
        if centers:
            dist = np.linalg.norm(np.asarray(centers) - c, axis=1)
            if np.any(dist < np.asarray(radii) + r):
                continue
        centers.append(c)
        radii.append(r)
    if len(centers) < n:
        log.warning("placed %d of %d spheres", len(centers), n)
    centers = np.asarray(centers, dtype=np.float64).reshape(-1, 3)
    radii = np.asarray(radii, dtype=np.float64)
    kernels.paint_balls(labels, centers, radii, np.arange(1, len(radii) + 1, dtype=np.int32))
    return labels, centers, radii


def voronoi_partition(shape, n_seeds, rng, seeds=None):
    """Label each voxel with the index of its nearest seed (0-based, ties to the lowest index)."""
    if seeds is None:
        if n_seeds < 2:
            raise ValueError("voronoi partition needs at least 2 seeds")
        seeds = rng.uniform(0.0, np.asarray(shape, dtype=np.float64) - 1.0, size=(int(n_seeds), 3))
    seeds = np.asarray(seeds, dtype=np.float64)
    return kernels.voronoi_labels(shape, seeds), seeds


# ---------------------------------------------------------------- compose


def _draw_texture(spec, rng):
    octaves = int(rng.integers(spec.perlin_octaves[0], spec.perlin_octaves[1] + 1))
    lo, hi = np.log(spec.perlin_base_freq[0]), np.log(spec.perlin_base_freq[1])
    freq = float(np.exp(rng.uniform(lo, hi)))
    window = np.sort(rng.uniform(0.0, 1.0, size=2))
    plain = bool(rng.random() < spec.plain_prob)
    intensity = float(rng.uniform(0.0, 1.0)) if spec.plain_intensity is None else float(spec.plain_intensity)
    if plain:
        return {"kind": "plain", "intensity": intensity}
    return {"kind": "perlin", "octaves": octaves, "freq": freq, "window": [float(window[0]), float(window[1])]}


def sample_geometry(spec: BackgroundSpec, rng):
    w = np.array([spec.geometry_weights.get(g, 0.0) for g in GEOMETRIES], dtype=np.float64)
    return GEOMETRIES[int(rng.choice(len(GEOMETRIES), p=w / w.sum()))]


def compose_background(spec: BackgroundSpec, shape, rng, geometry=None):
    """Background volume in [0, 1] and a record of the geometry/texture draws.

    ``geometry`` overrides the weighted draw. With ``per_region`` every region
    (base, each sphere, each Voronoi cell) gets its own texture. Without it,
    one Perlin field is shared and regions differ only by intensity window.
    """
    spec.validate()
    shape = tuple(int(s) for s in shape)
    drawn = sample_geometry(spec, rng)
    geometry = geometry or drawn
    if geometry == "spheres":
        n = int(rng.integers(spec.n_spheres[0], spec.n_spheres[1] + 1))
        regions, _, _ = place_spheres(shape, n, spec.sphere_radius, rng)
        n_regions = int(regions.max()) + 1
    elif geometry == "voronoi":
        n = int(rng.integers(spec.n_voronoi_seeds[0], spec.n_voronoi_seeds[1] + 1))
        regions, _ = voronoi_partition(shape, n, rng)
        n_regions = n
    elif geometry == "none":
        regions = np.zeros(shape, dtype=np.int32)
        n_regions = 1
    else:
        raise ValueError(f"unknown geometry {geometry!r}")

    shared = None
    if not spec.per_region:
        octaves = int(rng.integers(spec.perlin_octaves[0], spec.perlin_octaves[1] + 1))
        freq = float(np.exp(rng.uniform(np.log(spec.perlin_base_freq[0]), np.log(spec.perlin_base_freq[1]))))
        shared = perlin_volume(shape, octaves, freq, spec.perlin_persistence, rng)

    sizes = np.bincount(regions.ravel(), minlength=n_regions)
    max_oct = int(spec.perlin_octaves[1])
    plain = np.ones(n_regions, dtype=bool)
    levels, lows, highs = np.zeros(n_regions), np.zeros(n_regions), np.zeros(n_regions)
    perms = np.zeros((n_regions, max_oct, 512), dtype=np.int64)
    freqs, amps = np.zeros((n_regions, max_oct)), np.zeros((n_regions, max_oct))
    offsets = np.zeros((n_regions, max_oct, 3))
    n_oct = np.zeros(n_regions, dtype=np.int64)
    textures = []
    for k in range(n_regions):
        tex = _draw_texture(spec, rng)
        textures.append(tex)
        if tex["kind"] == "plain":
            levels[k] = tex["intensity"]
            continue
        plain[k] = False
        lows[k], highs[k] = tex["window"]
        if shared is None and sizes[k] > 0:
            o = tex["octaves"]
            p, off = _draw_noise_params(o, rng)
            perms[k, :o] = p
            offsets[k, :o] = off
            freqs[k, :o] = tex["freq"] * 2.0 ** np.arange(o)
            amps[k, :o] = spec.perlin_persistence ** np.arange(o, dtype=np.float64)
            n_oct[k] = o

    if shared is None:
        out = kernels.textured_regions(regions, plain, levels, lows, highs, perms, freqs, amps, offsets, n_oct)
    else:
        scaled = lows[regions].astype(np.float32) + (highs - lows)[regions].astype(np.float32) * shared
        out = np.clip(np.where(plain[regions], levels[regions].astype(np.float32), scaled), 0.0, 1.0)
        out = out.astype(np.float32)
    info = {
        "geometry": geometry,
        "n_regions": n_regions,
        "textures": [t["kind"] for t in textures],
        "texture_params": textures,
    }
    return out, regions, info
