"""Geometric and filtering primitives on dense (z, y, x) grids.

Images are float32 arrays and masks are bool arrays. Every op returns a new
array and never mutates its input. Boundaries are half-sample symmetric
("reflect") everywhere.
"""

import numpy as np
from scipy import ndimage as ndi

from vesselforge import kernels

AXES = {"z": 0, "y": 1, "x": 2}
# rotation about an axis acts in the plane of the other two, right-handed
_ROT_PLANES = {0: (1, 2), 1: (2, 0), 2: (0, 1)}


class VolumeError(ValueError):
    def __init__(self, code, message):
        super().__init__(f"{code}: {message}")
        self.code = code


def is_mask(v):
    return np.asarray(v).dtype == np.bool_


def _triple(value, name):
    arr = np.broadcast_to(np.asarray(value, dtype=np.float64), (3,)).copy()
    if arr.shape != (3,):
        raise ValueError(f"{name} must be a scalar or a 3-tuple")
    return arr


def _axis_index(axis):
    if isinstance(axis, str):
        return AXES[axis]
    return int(axis)


def crop(v, center, target):
    """Copy the ``target``-shaped window around ``center``.

    The window start is ``center - target // 2`` clamped so the window stays
    inside the volume.
    """
    v = np.asarray(v)
    target = tuple(int(t) for t in target)
    if any(t > n for t, n in zip(target, v.shape)):
        raise VolumeError("crop-too-large", f"target {target} exceeds volume {v.shape}")
    starts = [
        min(max(int(c) - t // 2, 0), n - t) for c, t, n in zip(center, target, v.shape)
    ]
    sl = tuple(slice(s, s + t) for s, t in zip(starts, target))
    return v[sl].copy()


def center_crop(v, target):
    return crop(v, [n // 2 for n in np.shape(v)], target)


def flip_rotate(v, flip_axes=(), rot_axis="z", rot_count=0):
    """Flip along ``flip_axes`` then rotate ``rot_count`` quarter turns about ``rot_axis``."""
    if rot_count not in (0, 1, 2, 3):
        raise ValueError("rot90 count must be in {0, 1, 2, 3}")
    out = np.asarray(v)
    axes = sorted({_axis_index(a) for a in flip_axes})
    if axes:
        out = np.flip(out, axis=tuple(axes))
    if rot_count:
        out = np.rot90(out, k=rot_count, axes=_ROT_PLANES[_axis_index(rot_axis)])
    return np.ascontiguousarray(out).copy()


def _lerp_axis(v, coords, axis):
    n = v.shape[axis]
    fl = np.floor(coords)
    t = (coords - fl).astype(v.dtype)
    i0 = kernels.reflect_indices(fl.astype(np.int64), n)
    i1 = kernels.reflect_indices(fl.astype(np.int64) + 1, n)
    lo = np.take(v, i0, axis=axis)
    hi = np.take(v, i1, axis=axis)
    shape = [1, 1, 1]
    shape[axis] = -1
    return lo + t.reshape(shape) * (hi - lo)


def zoom(v, factor, interp="trilinear"):
    """Scale about the volume centre, keeping the shape (zoomed in place).

    Output voxel ``p`` samples the source at ``c + (p - c) / factor`` with
    ``c = (n - 1) / 2``. Masks always use nearest and stay boolean.
    """
    v = np.asarray(v)
    factor = _triple(factor, "factor")
    if np.any(factor <= 0):
        raise ValueError("zoom factor must be positive")
    if np.all(factor == 1.0):
        return v.copy()
    mask = is_mask(v)
    src = []
    for n, f in zip(v.shape, factor):
        c = (n - 1) / 2.0
        src.append(c + (np.arange(n, dtype=np.float64) - c) / f)
    if mask or interp == "nearest":
        idx = [
            kernels.reflect_indices(np.floor(s + 0.5).astype(np.int64), n)
            for s, n in zip(src, v.shape)
        ]
        return v[np.ix_(*idx)].copy()
    if interp != "trilinear":
        raise ValueError(f"unknown interpolation {interp!r}")
    out = v.astype(np.float32, copy=False)
    for axis in range(3):
        out = _lerp_axis(out, src[axis], axis)
    return np.ascontiguousarray(out, dtype=np.float32)


def gaussian_kernel1d(sigma, truncate=4.0):
    """Sampled, normalised Gaussian with radius ``floor(truncate * sigma)``."""
    radius = int(truncate * float(sigma))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def gaussian_smooth(v, sigma, truncate=4.0):
    """Separable Gaussian blur. ``sigma`` may be per axis; 0 leaves an axis alone.

    The kernel support is ``floor(truncate * sigma)`` voxels, so the halo around
    a structure never exceeds ``truncate * sigma``.
    """
    sigma = _triple(sigma, "sigma")
    if np.any(sigma < 0):
        raise ValueError("sigma must be non-negative")
    out = np.asarray(v, dtype=np.float32)
    if not np.any(sigma > 0):
        return out.copy()
    for axis, s in enumerate(sigma):
        if s > 0:
            out = kernels.symmetric_correlate(out, gaussian_kernel1d(s, truncate), axis)
    return out


def threshold(v, tau):
    return np.asarray(v) > tau


def median_filter(v, size):
    size = int(size)
    if size < 1 or size % 2 == 0:
        raise ValueError(f"median filter size must be a positive odd integer, got {size}")
    if size == 1:
        return np.array(v, dtype=np.float32, copy=True)
    return kernels.median_filter(np.asarray(v, dtype=np.float32), size)


def _resize_linear(field, shape):
    # align grid corners: coarse node i sits at voxel i * (n - 1) / (m - 1)
    out = field
    for axis, n in enumerate(shape):
        m = field.shape[axis]
        coords = np.zeros(n) if m == 1 else np.arange(n) * ((m - 1) / max(n - 1, 1))
        out = _lerp_axis(out, coords, axis)
    return out


def elastic_noise(shape, control_spacing, rng):
    """Uniform [-1, 1] control-grid noise, shape ``(3, *coarse)``."""
    spacing = max(int(control_spacing), 1)
    coarse = tuple(int(np.ceil((n - 1) / spacing)) + 1 for n in shape)
    return rng.uniform(-1.0, 1.0, size=(3,) + coarse)


def smooth_control_noise(noise, control_spacing, sigma):
    """Gaussian-smooth each component of the control-grid noise (``sigma`` in voxels)."""
    spacing = max(int(control_spacing), 1)
    if sigma <= 0:
        return np.asarray(noise, dtype=np.float64).copy()
    k = gaussian_kernel1d(sigma / spacing)
    out = []
    for comp in noise:
        for axis in range(3):
            comp = ndi.correlate1d(comp, k, axis=axis, mode="reflect")
        out.append(comp)
    return np.stack(out)


def upsample_control(control, shape):
    """Corner-aligned linear upsampling of a ``(3, *coarse)`` field to ``(3, *shape)``."""
    return np.stack([c if c.shape == tuple(shape) else _resize_linear(c, shape) for c in control])


def displacement_from_noise(noise, shape, control_spacing, sigma, magnitude):
    control = smooth_control_noise(noise, control_spacing, sigma)
    return upsample_control(control, shape) * float(magnitude)


def elastic_displacement(shape, control_spacing, sigma, magnitude, rng):
    """Displacement field of shape ``(3, *shape)`` in voxels.

    Uniform [-1, 1] noise is drawn on a control grid with the given spacing,
    smoothed there with ``sigma`` (expressed in voxels), upsampled linearly and
    multiplied by ``magnitude``. With spacing 1 this is the usual
    smooth-random-field elastic transform. The field is linear in ``magnitude``.
    """
    noise = elastic_noise(shape, control_spacing, rng)
    return displacement_from_noise(noise, shape, control_spacing, sigma, magnitude)


def apply_displacement(v, disp, interp=None):
    """Warp ``v`` so that output voxel ``p`` reads the source at ``p + disp[:, p]``."""
    v = np.asarray(v)
    mask = is_mask(v)
    grid = np.indices(v.shape, dtype=np.float64)
    coords = grid + disp
    if mask or interp == "nearest":
        out = kernels.warp(v.view(np.uint8) if mask else v, coords, order=0)
        return out.astype(bool) if mask else out
    return kernels.warp(v.astype(np.float32, copy=False), coords, order=1)


def warp_control(v, control, magnitude, interp=None):
    """Same as ``apply_displacement(v, upsample_control(control, v.shape) * magnitude)``.

    The numba path interpolates the control field on the fly instead of
    materialising the full-resolution displacement.
    """
    v = np.asarray(v)
    control = np.ascontiguousarray(control, dtype=np.float64)
    if not kernels._accel.USE_NUMBA:
        return apply_displacement(v, upsample_control(control, v.shape) * float(magnitude), interp)
    mask = is_mask(v)
    order = 0 if (mask or interp == "nearest") else 1
    src = np.ascontiguousarray(v.view(np.uint8) if mask else (v if order == 0 else v.astype(np.float32)))
    out = kernels.warp_control_nb(src, control, float(magnitude), order)
    return out.astype(bool) if mask else out


def elastic_deform(v, control_spacing, sigma, magnitude, rng, interp=None):
    if magnitude < 0:
        raise ValueError("magnitude must be non-negative")
    noise = elastic_noise(np.shape(v), control_spacing, rng)
    if magnitude == 0:
        return np.array(v, copy=True)
    return warp_control(v, smooth_control_noise(noise, control_spacing, sigma), magnitude, interp)


def affine_warp(v, matrix, interp=None):
    """Resample about the centre: output ``p`` reads ``c + matrix @ (p - c)``."""
    v = np.asarray(v)
    matrix = np.asarray(matrix, dtype=np.float64)
    if np.array_equal(matrix, np.eye(3)):
        return v.copy()
    c = (np.asarray(v.shape, dtype=np.float64) - 1) / 2.0
    grid = np.indices(v.shape, dtype=np.float64).reshape(3, -1) - c[:, None]
    coords = (matrix @ grid + c[:, None]).reshape((3,) + v.shape)
    mask = is_mask(v)
    if mask or interp == "nearest":
        out = kernels.warp(v.view(np.uint8) if mask else v, coords, order=0)
        return out.astype(bool) if mask else out
    return kernels.warp(v.astype(np.float32, copy=False), coords, order=1)


def pad_to(v, target, reflect=True):
    """Pad at the high end of each short axis up to ``target`` (symmetric reflection or zeros)."""
    v = np.asarray(v)
    widths = [(0, max(int(t) - n, 0)) for t, n in zip(target, v.shape)]
    if not any(w for _, w in widths):
        return v.copy()
    if reflect:
        # repeated symmetric padding when the pad exceeds the extent
        out = v
        while any(out.shape[i] < target[i] for i in range(3)):
            step = [(0, min(max(int(target[i]) - out.shape[i], 0), out.shape[i])) for i in range(3)]
            out = np.pad(out, step, mode="symmetric")
        return out
    return np.pad(v, widths, mode="constant")
