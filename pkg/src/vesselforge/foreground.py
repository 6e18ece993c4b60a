"""Foreground generation: vessel masks and their artifact-corrupted intensity maps."""

import math
from collections import deque
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from vesselforge import kernels, morphology as morph, volume as vol
from vesselforge.config import ARTIFACT_KINDS, ArtifactSpec, SpatialMaskTransformSpec, VesselTreeParams

MAX_RETRIES = 10


class ForegroundError(RuntimeError):
    def __init__(self, code, message):
        super().__init__(f"{code}: {message}")
        self.code = code


# ---------------------------------------------------------------- vessel trees


def _unit(v):
    return v / np.linalg.norm(v)


def _random_unit(rng):
    while True:
        v = rng.normal(size=3)
        n = np.linalg.norm(v)
        if n > 1e-9:
            return v / n


def _deflect(direction, angle_deg, ortho):
    """Rotate ``direction`` by ``angle_deg`` towards the part of ``ortho`` perpendicular to it."""
    ortho = ortho - ortho.dot(direction) * direction
    norm = np.linalg.norm(ortho)
    if norm < 1e-9:
        ortho = np.cross(direction, [1.0, 0.0, 0.0])
        if np.linalg.norm(ortho) < 1e-9:
            ortho = np.cross(direction, [0.0, 1.0, 0.0])
        norm = np.linalg.norm(ortho)
    ortho = ortho / norm
    a = np.deg2rad(angle_deg)
    return _unit(np.cos(a) * direction + np.sin(a) * ortho)


def _walk_branch(pos, d, r, kicks, coins, child_u, angles, orthos, params, bounds, budget):
    """Advance one branch with pre-drawn randoms; returns (points, radii, children)."""
    pts, radii, spawn, spawn_dir, spawn_r = kernels.walk_branch(
        float(pos[0]), float(pos[1]), float(pos[2]),
        float(d[0]), float(d[1]), float(d[2]),
        float(r),
        np.ascontiguousarray(kicks, dtype=np.float64),
        np.ascontiguousarray(coins, dtype=np.float64),
        np.ascontiguousarray(child_u, dtype=np.float64),
        np.asarray(bounds, dtype=np.float64) - 0.5,
        float(params.tortuosity), float(params.step_length), float(params.taper), float(params.min_radius),
        float(params.branch_prob), int(budget),
    )
    children = [
        (pts[i].copy(), _deflect(spawn_dir[k], angles[s], orthos[s]), float(spawn_r[k]))
        for k, (i, s) in enumerate(spawn)
    ]
    return [tuple(p) for p in pts], radii.tolist(), children


def grow_tree(params: VesselTreeParams, rng, bounds=None):
    """Branching random walk. Returns centreline points ``(n, 3)`` and radii ``(n,)``.

    Each branch draws all of its step randomness in one block, so the walk
    itself is scalar arithmetic.
    """
    bounds = np.asarray(bounds if bounds is not None else params.bounds, dtype=np.float64)
    if params.start is not None:
        start = np.asarray(params.start, dtype=np.float64)
    else:
        start = rng.uniform(0.0, bounds - 1.0)
    direction = _unit(np.asarray(params.direction, dtype=np.float64)) if params.direction is not None else _random_unit(rng)
    radius = rng.uniform(*params.radius)

    points, radii = [tuple(start)], [radius]
    queue = deque([(start, direction, radius)])
    n_branches = 0
    while queue and n_branches < params.max_branches:
        pos, d, r = queue.popleft()
        n_branches += 1
        n_steps = int(rng.integers(params.steps[0], params.steps[1] + 1))
        kicks = rng.normal(size=(n_steps, 3))
        coins = rng.random(n_steps)
        child_u = rng.uniform(*params.child_radius, size=n_steps)
        angles = rng.uniform(*params.branch_angle, size=n_steps)
        orthos = rng.normal(size=(n_steps, 3))
        budget = max(params.max_branches - n_branches - len(queue), 0)
        pts, rs, children = _walk_branch(pos, d, r, kicks, coins, child_u, angles, orthos, params, bounds, budget)
        points.extend(pts)
        radii.extend(rs)
        queue.extend(children)
    return np.array(points, dtype=np.float64).reshape(-1, 3), np.array(radii, dtype=np.float64)


def rasterize_tree(mask, points, radii):
    """Stamp balls of the local radius on voxel-rounded centreline points into ``mask`` (uint8)."""
    centers = np.floor(np.asarray(points) + 0.5)
    kernels.paint_balls(mask, centers, radii, np.ones(len(radii), dtype=mask.dtype))
    return mask


def generate_vessel_patch(params: VesselTreeParams, rng):
    """Union of tapered tubes along branching random walks, as a boolean mask.

    Trees are added until at least ``n_trees`` exist and the foreground fraction
    reaches ``min_fraction``. A draw that overshoots ``max_fraction``, or stays
    empty, is redrawn up to ten times.
    """
    params.validate()
    shape = tuple(int(b) for b in params.bounds)
    total = float(np.prod(shape))
    for _ in range(MAX_RETRIES):
        mask = np.zeros(shape, dtype=np.uint8)
        n_trees = int(rng.integers(params.n_trees[0], params.n_trees[1] + 1))
        grown = 0
        count = 0
        while grown < n_trees or (count / total < params.min_fraction and grown < n_trees + params.max_extra_trees):
            points, radii = grow_tree(params, rng, shape)
            rasterize_tree(mask, points, radii)
            count = int(np.count_nonzero(mask))
            grown += 1
        frac = count / total
        if count > 0 and params.min_fraction <= frac <= params.max_fraction:
            return mask.astype(bool)
    raise ForegroundError("degenerate-foreground", f"no admissible vessel patch after {MAX_RETRIES} attempts")


def load_patch_directory(path):
    """Sorted list of mask files (``.nii`` / ``.nii.gz``) in an external patch directory."""
    files = sorted(p for p in Path(path).iterdir() if p.name.endswith((".nii", ".nii.gz")))
    if not files:
        raise FileNotFoundError(f"no NIfTI masks in {path}")
    return files


# ---------------------------------------------------------------- spatial transforms


@dataclass
class SpatialDraws:
    center: tuple
    flip_axes: tuple
    rot_axis: int
    rot_count: int
    dilation: int
    zoom: float
    control: Optional[np.ndarray]  # smoothed control-grid noise, unscaled
    magnitude: float
    smooth_sigma: float
    control_shape: tuple = ()

    @property
    def displacement(self):
        if self.control is None:
            return None
        return vol.upsample_control(self.control, self.control_shape) * self.magnitude


def draw_spatial(spec: SpatialMaskTransformSpec, source_shape, rng) -> SpatialDraws:
    """Draw every random parameter of the spatial chain.

    The number of draws does not depend on the ranges, so collapsing one range
    leaves all the other draws unchanged.
    """
    target = tuple(int(t) for t in spec.crop)
    lo = np.array([t // 2 for t in target])
    hi = np.array([n - t + t // 2 for n, t in zip(source_shape, target)])
    random_center = rng.integers(lo, hi + 1)
    center = tuple(int(c) for c in random_center) if spec.random_center else tuple(n // 2 for n in source_shape)
    flips = rng.random(3) < 0.5
    rot_axis = int(rng.integers(3))
    rot_count = int(rng.integers(4))
    dilation = int(rng.integers(spec.dilation_radius[0], spec.dilation_radius[1] + 1))
    zoom = float(rng.uniform(*spec.zoom))
    sigma = float(rng.uniform(*spec.elastic_sigma))
    magnitude = float(rng.uniform(*spec.elastic_magnitude))
    noise = vol.elastic_noise(target, spec.elastic_spacing, rng)
    control = None
    if magnitude > 0:
        control = vol.smooth_control_noise(noise, spec.elastic_spacing, sigma)
    smooth = float(rng.uniform(*spec.smooth_sigma))
    return SpatialDraws(
        center=center,
        flip_axes=tuple(int(a) for a in np.flatnonzero(flips)) if spec.flip else (),
        rot_axis=rot_axis,
        rot_count=rot_count if spec.rotate else 0,
        dilation=dilation,
        zoom=zoom,
        control=control,
        magnitude=magnitude,
        smooth_sigma=smooth,
        control_shape=target,
    )


def transform_with_draws(m, spec: SpatialMaskTransformSpec, draws: SpatialDraws):
    """crop, flip/rotate, dilate, zoom, elastic, then smooth+threshold."""
    out = vol.crop(m, draws.center, spec.crop)
    out = vol.flip_rotate(out, draws.flip_axes, draws.rot_axis, draws.rot_count)
    out = morph.dilate(out, draws.dilation)
    out = vol.zoom(out, draws.zoom, "nearest")
    if draws.control is not None:
        out = vol.warp_control(out, draws.control, draws.magnitude)
    if draws.smooth_sigma > 0:
        out = vol.threshold(vol.gaussian_smooth(out, draws.smooth_sigma), spec.smooth_threshold)
    return out.astype(bool, copy=False)


def apply_spatial_mask_transforms(m, spec: SpatialMaskTransformSpec, rng):
    """Turn a vessel patch into a label (element of the synthetic mask set)."""
    spec.validate()
    m = np.asarray(m, dtype=bool)
    if any(n < t for n, t in zip(m.shape, spec.crop)):
        raise vol.VolumeError("crop-too-large", f"patch {m.shape} smaller than crop {tuple(spec.crop)}")
    for _ in range(MAX_RETRIES):
        out = transform_with_draws(m, spec, draw_spatial(spec, m.shape, rng))
        if out.any():
            return out
    raise ForegroundError("degenerate-foreground", "spatial transforms kept producing empty masks")


# ---------------------------------------------------------------- artifacts


def polynomial_field(shape, degree, amplitude, rng):
    """Smooth multiplicative field in ``[1 - amplitude, 1 + amplitude]``.

    A random polynomial of total degree ``degree`` in normalised coordinates,
    rescaled so its largest magnitude is 1.
    """
    powers = [(i, j, k) for i in range(degree + 1) for j in range(degree + 1 - i) for k in range(degree + 1 - i - j)]
    coeffs = rng.uniform(-1.0, 1.0, size=len(powers))
    tensor = np.zeros((degree + 1,) * 3)
    for c, (i, j, k) in zip(coeffs, powers):
        if i or j or k:
            tensor[i, j, k] = c
    # separable evaluation: contract one axis basis at a time
    bases = [np.linspace(-1.0, 1.0, n)[None, :] ** np.arange(degree + 1)[:, None] for n in shape]
    field = np.tensordot(tensor, bases[0], axes=([0], [0]))  # (j, k, z)
    field = np.tensordot(field, bases[1], axes=([0], [0]))  # (k, z, y)
    field = np.tensordot(field, bases[2], axes=([0], [0]))  # (z, y, x)
    peak = np.abs(field).max()
    if peak > 0:
        field /= peak
    return (1.0 + amplitude * field).astype(np.float32)


def sample_artifact_kind(spec: ArtifactSpec, rng):
    kinds = [k for k in ARTIFACT_KINDS]
    w = np.array([spec.weights.get(k, 0.0) for k in kinds], dtype=np.float64)
    return kinds[int(rng.choice(len(kinds), p=w / w.sum()))]


def _shift_zero_fill(v, offset):
    out = np.zeros_like(v)
    src, dst = [], []
    for o, n in zip(offset, v.shape):
        o = int(o)
        if o >= 0:
            src.append(slice(0, n - o))
            dst.append(slice(o, n))
        else:
            src.append(slice(-o, n))
            dst.append(slice(0, n + o))
    out[tuple(dst)] = v[tuple(src)]
    return out


def _dropout(label, max_fraction, radius_range, rng):
    """Zero random balls of foreground until a drawn fraction in [0, max_fraction] is reached."""
    out = label.astype(np.float32)
    total = int(label.sum())
    if total == 0 or max_fraction <= 0:
        return out, 0.0
    target = rng.uniform(0.0, max_fraction)
    coords = np.argwhere(label)
    erased = np.zeros(label.shape, dtype=bool)
    removed = 0
    for _ in range(64):
        c = coords[int(rng.integers(len(coords)))]
        r = float(rng.uniform(*radius_range))
        lo = np.maximum(np.ceil(c - r).astype(int), 0)
        hi = np.minimum(np.floor(c + r).astype(int) + 1, label.shape)
        box = tuple(slice(a, b) for a, b in zip(lo, hi))
        zz, yy, xx = np.ogrid[box]
        ball = (zz - c[0]) ** 2 + (yy - c[1]) ** 2 + (xx - c[2]) ** 2 < r * r
        fresh = ball & label[box] & ~erased[box]
        n = int(fresh.sum())
        if (removed + n) / total > target:
            continue
        erased[box] |= fresh
        removed += n
    out[erased] = 0.0
    return out, removed / total


def apply_artifact_transform(label, kind, rng, spec: Optional[ArtifactSpec] = None):
    """Image-side foreground intensity map for ``label`` under one artifact kind.

    Returns ``(fg, info)``. ``fg`` is float32 and zero off the foreground (off the
    shifted foreground for ``shift``). The label itself is never modified.
    """
    spec = spec or ArtifactSpec()
    label = np.asarray(label, dtype=bool)
    base = label.astype(np.float32)
    info = {"kind": kind}
    if kind == "identity":
        fg = base
    elif kind == "bias_field":
        a = float(rng.uniform(*spec.bias_amplitude))
        fg = base * polynomial_field(label.shape, spec.bias_degree, a, rng)
        info["amplitude"] = a
    elif kind == "gauss_noise":
        s = float(rng.uniform(*spec.noise_sigma))
        noise = rng.normal(0.0, s, size=label.shape).astype(np.float32)
        fg = np.where(label, np.maximum(base + noise, 0.0), 0.0).astype(np.float32)
        info["sigma"] = s
    elif kind == "gauss_smooth":
        s = float(rng.uniform(*spec.smooth_sigma))
        fg = vol.gaussian_smooth(base, s)
        info["sigma"] = s
    elif kind == "dropout":
        fg, frac = _dropout(label, spec.dropout_max_fraction, spec.dropout_radius, rng)
        info["fraction"] = frac
    elif kind == "shift":
        offset = rng.integers(-spec.shift_max, spec.shift_max + 1, size=3)
        fg = _shift_zero_fill(base, offset)
        info["offset"] = [int(o) for o in offset]
    elif kind == "hull":
        fg = morph.hull(label).astype(np.float32)
    else:
        raise ValueError(f"unknown artifact kind {kind!r}")
    return fg.astype(np.float32, copy=False), info
