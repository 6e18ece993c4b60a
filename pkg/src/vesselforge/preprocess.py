"""Dataset conditioning: percentile clipping, resampling, label smoothing and repair, patching."""

import logging
import math
from dataclasses import dataclass

import numpy as np

from vesselforge import kernels, morphology as morph, volume as vol

log = logging.getLogger(__name__)


@dataclass
class ClipSpec:
    low: float = 0.0
    high: float = 98.0

    def validate(self):
        if not (0.0 <= self.low < self.high <= 100.0):
            raise ValueError(f"need 0 <= low < high <= 100, got ({self.low}, {self.high})")


@dataclass
class LabelImproveParams:
    intensity_delta: float = 0.1
    threshold: float = 0.9
    filter_size: int = 11
    min_size: int = 64
    connectivity: int = 26

    def validate(self):
        if self.filter_size < 1 or self.filter_size % 2 == 0:
            raise ValueError("filter_size must be a positive odd integer")


def percentile_nearest_rank(values, q):
    """Nearest-rank percentile: the ``ceil(q/100 * n)``-th smallest value (the minimum for q = 0)."""
    flat = np.sort(np.asarray(values).ravel())
    n = flat.size
    rank = max(int(math.ceil(q / 100.0 * n)), 1)
    return flat[min(rank, n) - 1]


def clip_rescale(v, spec: ClipSpec):
    """Clamp to the ``[low, high]`` percentiles, then min-max rescale to [0, 1]."""
    spec.validate()
    v = np.asarray(v, dtype=np.float32)
    lo = float(percentile_nearest_rank(v, spec.low))
    hi = float(percentile_nearest_rank(v, spec.high))
    if hi <= lo:
        log.warning("clip_rescale: constant input between percentiles (%s, %s); returning zeros", spec.low, spec.high)
        return np.zeros_like(v)
    return ((np.clip(v, lo, hi) - lo) / (hi - lo)).astype(np.float32)


def resample_spacing(v, spacing, target_spacing, interp="trilinear"):
    """Resample to ``target_spacing``; returns ``(volume, target_spacing)``.

    The new extent per axis is ``round(n * spacing / target)``. Output voxel
    centres sit at ``(i + 0.5) * ratio - 0.5`` in source index space. Masks use
    nearest and stay boolean.
    """
    if spacing is None:
        raise ValueError("missing spacing metadata")
    src = np.asarray(spacing, dtype=np.float64)
    dst = np.broadcast_to(np.asarray(target_spacing, dtype=np.float64), (3,))
    if np.any(dst <= 0) or np.any(src <= 0):
        raise ValueError("spacings must be positive")
    v = np.asarray(v)
    if np.allclose(src, dst, rtol=0, atol=0):
        return v.copy(), tuple(dst)
    out_shape = [max(int(round(n * s / t)), 1) for n, s, t in zip(v.shape, src, dst)]
    coords = [(np.arange(m) + 0.5) * (t / s) - 0.5 for m, s, t in zip(out_shape, src, dst)]
    if vol.is_mask(v) or interp == "nearest":
        idx = [kernels.reflect_indices(np.floor(c + 0.5).astype(np.int64), n) for c, n in zip(coords, v.shape)]
        return v[np.ix_(*idx)].copy(), tuple(dst)
    out = v.astype(np.float32)
    for axis, c in enumerate(coords):
        out = vol._lerp_axis(out, c, axis)
    return np.ascontiguousarray(out, dtype=np.float32), tuple(dst)


def smooth_labels(m, sigma, tau=0.5):
    m = np.asarray(m).astype(bool)
    if np.all(np.asarray(sigma) == 0):
        return m.copy()
    return vol.threshold(vol.gaussian_smooth(m.astype(np.float32), sigma), tau)


def improve_labels_hr(img, params: LabelImproveParams = None):
    """Label repair for bright, thin vessels.

    mask = (img - median(img)) > delta, OR img > threshold, then a 3x3x3
    closing and removal of components smaller than ``min_size``.
    """
    params = params or LabelImproveParams()
    params.validate()
    img = np.asarray(img, dtype=np.float32)
    mask = kernels.median_excess(img, params.filter_size, params.intensity_delta)
    mask |= img > np.float32(params.threshold)
    mask = morph.morphological_close(mask)
    return morph.remove_small_objects(mask, params.min_size, params.connectivity)


def patch_count(shape, target, stride):
    padded = [max(n, t) for n, t in zip(shape, target)]
    return int(np.prod([math.ceil((p - t) / s + 1) for p, t, s in zip(padded, target, stride)]))


def patch_starts(n, t, s):
    """Window starts along one axis; the last one is pulled back to end flush with the volume."""
    n = max(n, t)
    k = math.ceil((n - t) / s + 1)
    return [min(i * s, n - t) for i in range(k)]


def extract_patches(v, label=None, target=(128, 128, 128), stride=None, reflective_pad=True):
    """Tile ``v`` (and optionally its label) into ``target``-shaped patches.

    Short axes are padded at the high end (symmetric reflection, or zeros).
    Returns a list of ``(start, image_patch, label_patch)``.
    """
    target = tuple(int(t) for t in target)
    stride = target if stride is None else tuple(int(s) for s in np.broadcast_to(stride, (3,)))
    if any(s < 1 for s in stride):
        raise ValueError("stride must be >= 1")
    v = vol.pad_to(np.asarray(v), target, reflective_pad)
    if label is not None:
        label = vol.pad_to(np.asarray(label), target, reflective_pad)
    starts = [patch_starts(n, t, s) for n, t, s in zip(v.shape, target, stride)]
    out = []
    for z in starts[0]:
        for y in starts[1]:
            for x in starts[2]:
                sl = (slice(z, z + target[0]), slice(y, y + target[1]), slice(x, x + target[2]))
                out.append(((z, y, x), v[sl].copy(), None if label is None else label[sl].copy()))
    return out
