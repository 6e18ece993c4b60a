"""Hot voxel loops, each with a numba implementation and a numpy/scipy twin.

The public functions dispatch on :data:`vesselforge._accel.USE_NUMBA` at call
time. The ``*_nb`` and ``*_np`` variants are exported so the two paths can be
compared directly (see ``benchmarks/bench_kernels.py``).
"""

import math

import numpy as np
from scipy import ndimage as ndi

from vesselforge import _accel
from vesselforge._accel import njit

# 12 cube-edge gradients of improved Perlin noise, (z, y, x) order.
GRADIENTS = np.array(
    [
        [0, 1, 1], [0, -1, 1], [0, 1, -1], [0, -1, -1],
        [1, 0, 1], [-1, 0, 1], [1, 0, -1], [-1, 0, -1],
        [1, 1, 0], [-1, 1, 0], [1, -1, 0], [-1, -1, 0],
    ],
    dtype=np.float64,
)


def reflect_indices(idx, n):
    """Map integer indices onto ``[0, n)`` with half-sample symmetric reflection.

    Matches ``scipy.ndimage`` ``mode="reflect"`` and ``numpy.pad(mode="symmetric")``.
    """
    idx = np.asarray(idx, dtype=np.int64)
    if n == 1:
        return np.zeros_like(idx)
    m = np.mod(idx, 2 * n)
    return np.where(m < n, m, 2 * n - 1 - m)


@njit
def _reflect1(i, n):
    if 0 <= i < n:
        return i
    if n == 1:
        return 0
    m = i % (2 * n)
    if m < 0:
        m += 2 * n
    if m < n:
        return m
    return 2 * n - 1 - m


# ---------------------------------------------------------------- gradient noise


@njit
def _fade(t):
    return t * t * t * (t * (t * 6.0 - 15.0) + 10.0)


@njit
def _grad_tables(perm):
    # gradient components per table slot; lookups instead of branches on the hash
    tab = np.empty((3, perm.shape[0]), dtype=np.float64)
    for i in range(perm.shape[0]):
        h = perm[i] % 12
        tab[0, i] = GRADIENTS[h, 0]
        tab[1, i] = GRADIENTS[h, 1]
        tab[2, i] = GRADIENTS[h, 2]
    return tab


@njit(inline="always")
def _noise_point(z, y, x, perm, gz, gy, gx):
    fz = np.floor(z)
    fy = np.floor(y)
    fx = np.floor(x)
    iz = int(fz) & 255
    iy = int(fy) & 255
    ix = int(fx) & 255
    dz = z - fz
    dy = y - fy
    dx = x - fx
    wz = _fade(dz)
    wy = _fade(dy)
    wx = _fade(dx)
    a0 = perm[iz] + iy
    a1 = perm[iz + 1] + iy
    b00 = perm[a0] + ix
    b01 = perm[a0 + 1] + ix
    b10 = perm[a1] + ix
    b11 = perm[a1 + 1] + ix
    dz1 = dz - 1.0
    dy1 = dy - 1.0
    dx1 = dx - 1.0
    h = b00
    g0 = gz[h] * dz + gy[h] * dy + gx[h] * dx
    h = b00 + 1
    g1 = gz[h] * dz + gy[h] * dy + gx[h] * dx1
    v00 = g0 + wx * (g1 - g0)
    h = b01
    g0 = gz[h] * dz + gy[h] * dy1 + gx[h] * dx
    h = b01 + 1
    g1 = gz[h] * dz + gy[h] * dy1 + gx[h] * dx1
    v01 = g0 + wx * (g1 - g0)
    h = b10
    g0 = gz[h] * dz1 + gy[h] * dy + gx[h] * dx
    h = b10 + 1
    g1 = gz[h] * dz1 + gy[h] * dy + gx[h] * dx1
    v10 = g0 + wx * (g1 - g0)
    h = b11
    g0 = gz[h] * dz1 + gy[h] * dy1 + gx[h] * dx
    h = b11 + 1
    g1 = gz[h] * dz1 + gy[h] * dy1 + gx[h] * dx1
    v11 = g0 + wx * (g1 - g0)
    p0 = v00 + wy * (v01 - v00)
    p1 = v10 + wy * (v11 - v10)
    return p0 + wz * (p1 - p0)


@njit
def gradient_noise_nb(z, y, x, perm):
    n = z.shape[0]
    out = np.empty(n, dtype=np.float64)
    tab = _grad_tables(perm)
    gz, gy, gx = tab[0], tab[1], tab[2]
    for p in range(n):
        out[p] = _noise_point(z[p], y[p], x[p], perm, gz, gy, gx)
    return out


def _fade_np(t):
    return t * t * t * (t * (t * 6.0 - 15.0) + 10.0)


def gradient_noise_np(z, y, x, perm):
    fz, fy, fx = np.floor(z), np.floor(y), np.floor(x)
    iz = fz.astype(np.int64) & 255
    iy = fy.astype(np.int64) & 255
    ix = fx.astype(np.int64) & 255
    dz, dy, dx = z - fz, y - fy, x - fx
    wz, wy, wx = _fade_np(dz), _fade_np(dy), _fade_np(dx)
    levels_z = []
    for cz in range(2):
        levels_y = []
        for cy in range(2):
            base = perm[perm[iz + cz] + iy + cy]
            h0 = perm[base + ix] % 12
            h1 = perm[base + ix + 1] % 12
            oz = dz - cz
            oy = dy - cy
            g0 = GRADIENTS[h0, 0] * oz + GRADIENTS[h0, 1] * oy + GRADIENTS[h0, 2] * dx
            g1 = GRADIENTS[h1, 0] * oz + GRADIENTS[h1, 1] * oy + GRADIENTS[h1, 2] * (dx - 1.0)
            levels_y.append(g0 + wx * (g1 - g0))
        levels_z.append(levels_y[0] + wy * (levels_y[1] - levels_y[0]))
    return levels_z[0] + wz * (levels_z[1] - levels_z[0])


def gradient_noise(z, y, x, perm):
    """Single-octave gradient noise at points ``(z, y, x)``; ``perm`` is a doubled 512-entry table."""
    z = np.ascontiguousarray(z, dtype=np.float64).ravel()
    y = np.ascontiguousarray(y, dtype=np.float64).ravel()
    x = np.ascontiguousarray(x, dtype=np.float64).ravel()
    perm = np.ascontiguousarray(perm, dtype=np.int64)
    if _accel.USE_NUMBA:
        return gradient_noise_nb(z, y, x, perm)
    return gradient_noise_np(z, y, x, perm)


@njit
def fractal_noise_nb(z, y, x, perms, freqs, amps, offsets):
    n = z.shape[0]
    out = np.zeros(n, dtype=np.float64)
    for o in range(perms.shape[0]):
        tab = _grad_tables(perms[o])
        gz, gy, gx = tab[0], tab[1], tab[2]
        for p in range(n):
            out[p] += amps[o] * _noise_point(
                z[p] * freqs[o] + offsets[o, 0],
                y[p] * freqs[o] + offsets[o, 1],
                x[p] * freqs[o] + offsets[o, 2],
                perms[o],
                gz,
                gy,
                gx,
            )
    return out


def fractal_noise_np(z, y, x, perms, freqs, amps, offsets):
    out = np.zeros(z.shape[0], dtype=np.float64)
    for o in range(perms.shape[0]):
        q = [c * freqs[o] + offsets[o, a] for a, c in enumerate((z, y, x))]
        out += amps[o] * gradient_noise_np(q[0], q[1], q[2], perms[o])
    return out


def fractal_noise(z, y, x, perms, freqs, amps, offsets):
    """Sum over octaves ``o`` of ``amps[o] * noise(p * freqs[o] + offsets[o])`` with table ``perms[o]``."""
    z = np.ascontiguousarray(z, dtype=np.float64).ravel()
    y = np.ascontiguousarray(y, dtype=np.float64).ravel()
    x = np.ascontiguousarray(x, dtype=np.float64).ravel()
    perms = np.ascontiguousarray(perms, dtype=np.int64).reshape(-1, 512)
    freqs = np.ascontiguousarray(freqs, dtype=np.float64)
    amps = np.ascontiguousarray(amps, dtype=np.float64)
    offsets = np.ascontiguousarray(offsets, dtype=np.float64).reshape(-1, 3)
    if _accel.USE_NUMBA:
        return fractal_noise_nb(z, y, x, perms, freqs, amps, offsets)
    return fractal_noise_np(z, y, x, perms, freqs, amps, offsets)


@njit
def _octave_rows(raw, labels, rows, r, perm, gz, gy, gx, f, amp, off):
    # adds amp * noise(p * f + off) to every voxel of region r; within a row the z/y half
    # of each corner dot product only changes with the x cell, so it is kept between voxels
    d, h, w = labels.shape
    cx = np.empty(w, dtype=np.int64)
    dxs = np.empty(w, dtype=np.float64)
    wxs = np.empty(w, dtype=np.float64)
    for x in range(w):
        q = x * f + off[2]
        fq = np.floor(q)
        cx[x] = int(fq)
        dxs[x] = q - fq
        wxs[x] = _fade(q - fq)
    for z in range(d):
        qz = z * f + off[0]
        fz = np.floor(qz)
        iz = int(fz) & 255
        dz = qz - fz
        wz = _fade(dz)
        dz1 = dz - 1.0
        for y in range(h):
            if not rows[z, y]:
                continue
            qy = y * f + off[1]
            fy = np.floor(qy)
            iy = int(fy) & 255
            dy = qy - fy
            wy = _fade(dy)
            dy1 = dy - 1.0
            a0 = perm[iz] + iy
            a1 = perm[iz + 1] + iy
            last = cx[0] - 1
            p0 = p1 = p2 = p3 = p4 = p5 = p6 = p7 = 0.0
            x0 = x1 = x2 = x3 = x4 = x5 = x6 = x7 = 0.0
            for x in range(w):
                if labels[z, y, x] != r:
                    continue
                if cx[x] != last:
                    last = cx[x]
                    ix = last & 255
                    b00 = perm[a0] + ix
                    b01 = perm[a0 + 1] + ix
                    b10 = perm[a1] + ix
                    b11 = perm[a1 + 1] + ix
                    p0 = gz[b00] * dz + gy[b00] * dy
                    x0 = gx[b00]
                    p1 = gz[b00 + 1] * dz + gy[b00 + 1] * dy
                    x1 = gx[b00 + 1]
                    p2 = gz[b01] * dz + gy[b01] * dy1
                    x2 = gx[b01]
                    p3 = gz[b01 + 1] * dz + gy[b01 + 1] * dy1
                    x3 = gx[b01 + 1]
                    p4 = gz[b10] * dz1 + gy[b10] * dy
                    x4 = gx[b10]
                    p5 = gz[b10 + 1] * dz1 + gy[b10 + 1] * dy
                    x5 = gx[b10 + 1]
                    p6 = gz[b11] * dz1 + gy[b11] * dy1
                    x6 = gx[b11]
                    p7 = gz[b11 + 1] * dz1 + gy[b11 + 1] * dy1
                    x7 = gx[b11 + 1]
                dx = dxs[x]
                dx1 = dx - 1.0
                wx = wxs[x]
                g0 = p0 + x0 * dx
                g1 = p1 + x1 * dx1
                v00 = g0 + wx * (g1 - g0)
                g0 = p2 + x2 * dx
                g1 = p3 + x3 * dx1
                v01 = g0 + wx * (g1 - g0)
                g0 = p4 + x4 * dx
                g1 = p5 + x5 * dx1
                v10 = g0 + wx * (g1 - g0)
                g0 = p6 + x6 * dx
                g1 = p7 + x7 * dx1
                v11 = g0 + wx * (g1 - g0)
                c0 = v00 + wy * (v01 - v00)
                c1 = v10 + wy * (v11 - v10)
                raw[z, y, x] += amp * (c0 + wz * (c1 - c0))


@njit
def textured_regions_nb(labels, plain, levels, lows, highs, perms, freqs, amps, offsets, n_oct):
    d, h, w = labels.shape
    n_regions = plain.shape[0]
    raw = np.zeros((d, h, w), dtype=np.float64)
    # rows[r, z, y]: region r has a voxel in row (z, y)
    rows = np.zeros((n_regions, d, h), dtype=np.bool_)
    for z in range(d):
        for y in range(h):
            for x in range(w):
                rows[labels[z, y, x], z, y] = True
    for r in range(n_regions):
        if plain[r]:
            continue
        for o in range(n_oct[r]):
            tab = _grad_tables(perms[r, o])
            _octave_rows(raw, labels, rows[r], r, perms[r, o], tab[0], tab[1], tab[2], freqs[r, o], amps[r, o], offsets[r, o])
    mn = np.full(n_regions, np.inf)
    mx = np.full(n_regions, -np.inf)
    for z in range(d):
        for y in range(h):
            for x in range(w):
                r = labels[z, y, x]
                if plain[r]:
                    continue
                v = raw[z, y, x]
                if v < mn[r]:
                    mn[r] = v
                if v > mx[r]:
                    mx[r] = v
    out = np.empty((d, h, w), dtype=np.float32)
    for z in range(d):
        for y in range(h):
            for x in range(w):
                r = labels[z, y, x]
                if plain[r]:
                    v = np.float32(levels[r])
                else:
                    span = mx[r] - mn[r]
                    if span <= 1e-12:
                        t = np.float32(0.5)
                    else:
                        t = np.float32((raw[z, y, x] - mn[r]) / span)
                    v = np.float32(lows[r]) + np.float32(highs[r] - lows[r]) * t
                out[z, y, x] = min(max(v, np.float32(0.0)), np.float32(1.0))
    return out


def textured_regions_np(labels, plain, levels, lows, highs, perms, freqs, amps, offsets, n_oct):
    out = np.zeros(labels.shape, dtype=np.float32)
    flat = labels.ravel()
    order = np.argsort(flat, kind="stable")
    bounds = np.searchsorted(flat[order], np.arange(len(plain) + 1))
    for r in range(len(plain)):
        idx = order[bounds[r] : bounds[r + 1]]
        if idx.size == 0:
            continue
        region = np.unravel_index(idx, labels.shape)
        if plain[r]:
            out[region] = levels[r]
            continue
        k = n_oct[r]
        pts = [c.astype(np.float64) for c in region]
        raw = fractal_noise_np(pts[0], pts[1], pts[2], perms[r, :k], freqs[r, :k], amps[r, :k], offsets[r, :k])
        lo, hi = raw.min(), raw.max()
        if hi - lo <= 1e-12:
            t = np.full(raw.shape, 0.5, dtype=np.float32)
        else:
            t = ((raw - lo) / (hi - lo)).astype(np.float32)
        out[region] = np.float32(lows[r]) + np.float32(highs[r] - lows[r]) * t
    return np.clip(out, 0.0, 1.0)


def textured_regions(labels, plain, levels, lows, highs, perms, freqs, amps, offsets, n_oct):
    """Paint every region of ``labels`` with a flat level or a windowed fractal noise.

    Region ``r`` is flat at ``levels[r]`` when ``plain[r]``. Otherwise its raw
    noise (``n_oct[r]`` octaves, tables ``perms[r]``) is min-max rescaled over
    the region's own voxels and mapped into ``[lows[r], highs[r]]``.
    """
    args = (
        np.ascontiguousarray(labels, dtype=np.int32),
        np.ascontiguousarray(plain, dtype=np.bool_),
        np.ascontiguousarray(levels, dtype=np.float64),
        np.ascontiguousarray(lows, dtype=np.float64),
        np.ascontiguousarray(highs, dtype=np.float64),
        np.ascontiguousarray(perms, dtype=np.int64),
        np.ascontiguousarray(freqs, dtype=np.float64),
        np.ascontiguousarray(amps, dtype=np.float64),
        np.ascontiguousarray(offsets, dtype=np.float64),
        np.ascontiguousarray(n_oct, dtype=np.int64),
    )
    if _accel.USE_NUMBA:
        return textured_regions_nb(*args)
    return textured_regions_np(*args)


# ---------------------------------------------------------------- ball painting


@njit
def paint_balls_nb(labels, centers, radii, values):
    d, h, w = labels.shape
    for b in range(centers.shape[0]):
        cz = centers[b, 0]
        cy = centers[b, 1]
        cx = centers[b, 2]
        r = radii[b]
        r2 = r * r
        z0 = max(int(np.ceil(cz - r)), 0)
        z1 = min(int(np.floor(cz + r)), d - 1)
        y0 = max(int(np.ceil(cy - r)), 0)
        y1 = min(int(np.floor(cy + r)), h - 1)
        x0 = max(int(np.ceil(cx - r)), 0)
        x1 = min(int(np.floor(cx + r)), w - 1)
        val = values[b]
        for z in range(z0, z1 + 1):
            ddz = (z - cz) * (z - cz)
            for y in range(y0, y1 + 1):
                ddy = ddz + (y - cy) * (y - cy)
                if ddy >= r2:
                    continue
                for x in range(x0, x1 + 1):
                    if ddy + (x - cx) * (x - cx) < r2:
                        labels[z, y, x] = val
    return labels


def paint_balls_np(labels, centers, radii, values):
    d, h, w = labels.shape
    for (cz, cy, cx), r, val in zip(centers, radii, values):
        z0, z1 = max(int(np.ceil(cz - r)), 0), min(int(np.floor(cz + r)), d - 1)
        y0, y1 = max(int(np.ceil(cy - r)), 0), min(int(np.floor(cy + r)), h - 1)
        x0, x1 = max(int(np.ceil(cx - r)), 0), min(int(np.floor(cx + r)), w - 1)
        if z1 < z0 or y1 < y0 or x1 < x0:
            continue
        zz = (np.arange(z0, z1 + 1) - cz) ** 2
        yy = (np.arange(y0, y1 + 1) - cy) ** 2
        xx = (np.arange(x0, x1 + 1) - cx) ** 2
        inside = ((zz[:, None] + yy[None, :])[:, :, None] + xx[None, None, :]) < r * r
        labels[z0 : z1 + 1, y0 : y1 + 1, x0 : x1 + 1][inside] = val
    return labels


def paint_balls(labels, centers, radii, values):
    """Write ``values[b]`` into every voxel strictly closer than ``radii[b]`` to ``centers[b]``.

    Balls are painted in order, so later balls overwrite earlier ones. Modifies
    ``labels`` in place and returns it.
    """
    centers = np.ascontiguousarray(centers, dtype=np.float64).reshape(-1, 3)
    radii = np.ascontiguousarray(radii, dtype=np.float64).ravel()
    values = np.ascontiguousarray(values, dtype=labels.dtype).ravel()
    if _accel.USE_NUMBA:
        return paint_balls_nb(labels, centers, radii, values)
    return paint_balls_np(labels, centers, radii, values)


# ---------------------------------------------------------------- voronoi


@njit
def voronoi_labels_nb(d, h, w, seeds):
    out = np.empty((d, h, w), dtype=np.int32)
    n = seeds.shape[0]
    for z in range(d):
        for y in range(h):
            for x in range(w):
                best = 0
                best_d = np.inf
                for s in range(n):
                    dz = z - seeds[s, 0]
                    dy = y - seeds[s, 1]
                    dx = x - seeds[s, 2]
                    dist = dz * dz + dy * dy + dx * dx
                    if dist < best_d:
                        best_d = dist
                        best = s
                out[z, y, x] = best
    return out


def voronoi_labels_np(d, h, w, seeds, chunk=1 << 15):
    grid = np.indices((d, h, w), dtype=np.float64).reshape(3, -1).T
    out = np.empty(grid.shape[0], dtype=np.int32)
    for start in range(0, grid.shape[0], chunk):
        pts = grid[start : start + chunk]
        diff = pts[:, None, :] - seeds[None, :, :]
        dist = diff[..., 0] * diff[..., 0] + diff[..., 1] * diff[..., 1] + diff[..., 2] * diff[..., 2]
        out[start : start + chunk] = np.argmin(dist, axis=1)
    return out.reshape(d, h, w)


def voronoi_labels(shape, seeds):
    """Index of the nearest seed per voxel (squared Euclidean, ties go to the lowest index)."""
    d, h, w = (int(s) for s in shape)
    seeds = np.ascontiguousarray(seeds, dtype=np.float64).reshape(-1, 3)
    if _accel.USE_NUMBA:
        return voronoi_labels_nb(d, h, w, seeds)
    return voronoi_labels_np(d, h, w, seeds)


# ---------------------------------------------------------------- warping


@njit(inline="always")
def _trilinear(vol, z, y, x):
    d, h, w = vol.shape
    fz = np.floor(z)
    fy = np.floor(y)
    fx = np.floor(x)
    tz = z - fz
    ty = y - fy
    tx = x - fx
    z0 = _reflect1(int(fz), d)
    z1 = _reflect1(int(fz) + 1, d)
    y0 = _reflect1(int(fy), h)
    y1 = _reflect1(int(fy) + 1, h)
    x0 = _reflect1(int(fx), w)
    x1 = _reflect1(int(fx) + 1, w)
    a = vol[z0, y0, x0] + tx * (vol[z0, y0, x1] - vol[z0, y0, x0])
    b = vol[z0, y1, x0] + tx * (vol[z0, y1, x1] - vol[z0, y1, x0])
    c = vol[z1, y0, x0] + tx * (vol[z1, y0, x1] - vol[z1, y0, x0])
    e = vol[z1, y1, x0] + tx * (vol[z1, y1, x1] - vol[z1, y1, x0])
    p = a + ty * (b - a)
    q = c + ty * (e - c)
    return p + tz * (q - p)


@njit
def warp_linear_nb(vol, cz, cy, cx):
    out = np.empty(cz.shape, dtype=vol.dtype)
    oz, oy, ox = cz.shape
    for i in range(oz):
        for j in range(oy):
            for k in range(ox):
                out[i, j, k] = _trilinear(vol, cz[i, j, k], cy[i, j, k], cx[i, j, k])
    return out


def warp_linear_np(vol, cz, cy, cx):
    d, h, w = vol.shape
    fz, fy, fx = np.floor(cz), np.floor(cy), np.floor(cx)
    tz = (cz - fz).astype(vol.dtype)
    ty = (cy - fy).astype(vol.dtype)
    tx = (cx - fx).astype(vol.dtype)
    iz, iy, ix = fz.astype(np.int64), fy.astype(np.int64), fx.astype(np.int64)
    z0, z1 = reflect_indices(iz, d), reflect_indices(iz + 1, d)
    y0, y1 = reflect_indices(iy, h), reflect_indices(iy + 1, h)
    x0, x1 = reflect_indices(ix, w), reflect_indices(ix + 1, w)

    def lerp_x(zz, yy):
        lo = vol[zz, yy, x0]
        return lo + tx * (vol[zz, yy, x1] - lo)

    a, b = lerp_x(z0, y0), lerp_x(z0, y1)
    c, e = lerp_x(z1, y0), lerp_x(z1, y1)
    p = a + ty * (b - a)
    q = c + ty * (e - c)
    return (p + tz * (q - p)).astype(vol.dtype)


@njit
def warp_nearest_nb(vol, cz, cy, cx):
    d, h, w = vol.shape
    out = np.empty(cz.shape, dtype=vol.dtype)
    oz, oy, ox = cz.shape
    for i in range(oz):
        for j in range(oy):
            for k in range(ox):
                z = _reflect1(int(np.floor(cz[i, j, k] + 0.5)), d)
                y = _reflect1(int(np.floor(cy[i, j, k] + 0.5)), h)
                x = _reflect1(int(np.floor(cx[i, j, k] + 0.5)), w)
                out[i, j, k] = vol[z, y, x]
    return out


def warp_nearest_np(vol, cz, cy, cx):
    d, h, w = vol.shape
    iz = reflect_indices(np.floor(cz + 0.5).astype(np.int64), d)
    iy = reflect_indices(np.floor(cy + 0.5).astype(np.int64), h)
    ix = reflect_indices(np.floor(cx + 0.5).astype(np.int64), w)
    return vol[iz, iy, ix]


def warp(vol, coords, order):
    """Sample ``vol`` at fractional ``coords`` (shape ``(3, *out_shape)``), reflect boundary.

    ``order=0`` rounds half up to the nearest voxel; ``order=1`` is trilinear,
    written as nested lerps so constant inputs come back bit-exact.
    """
    cz, cy, cx = (np.ascontiguousarray(c, dtype=np.float64) for c in coords)
    if order == 0:
        fn = warp_nearest_nb if _accel.USE_NUMBA else warp_nearest_np
    elif order == 1:
        fn = warp_linear_nb if _accel.USE_NUMBA else warp_linear_np
    else:
        raise ValueError(f"unsupported interpolation order {order}")
    return fn(np.ascontiguousarray(vol), cz, cy, cx)


@njit
def _corner_lerp_table(n, m):
    # corner-aligned linear upsampling from m nodes to n samples
    i0 = np.empty(n, dtype=np.int64)
    i1 = np.empty(n, dtype=np.int64)
    t = np.empty(n, dtype=np.float64)
    step = (m - 1) / max(n - 1, 1)
    for a in range(n):
        c = 0.0 if m == 1 else a * step
        f = np.floor(c)
        i0[a] = _reflect1(int(f), m)
        i1[a] = _reflect1(int(f) + 1, m)
        t[a] = c - f
    return i0, i1, t


@njit
def warp_control_nb(vol, control, magnitude, order):
    d, h, w = vol.shape
    mz, my, mx = control.shape[1], control.shape[2], control.shape[3]
    z0, z1, tz = _corner_lerp_table(d, mz)
    y0, y1, ty = _corner_lerp_table(h, my)
    x0, x1, tx = _corner_lerp_table(w, mx)
    # upsample z then y on the coarse x nodes; x is interpolated per voxel
    partial = np.empty((3, d, h, mx), dtype=np.float64)
    tmp = np.empty((d, my, mx), dtype=np.float64)
    for comp in range(3):
        for a in range(d):
            for j in range(my):
                for k in range(mx):
                    lo = control[comp, z0[a], j, k]
                    tmp[a, j, k] = lo + tz[a] * (control[comp, z1[a], j, k] - lo)
        for a in range(d):
            for b in range(h):
                for k in range(mx):
                    lo = tmp[a, y0[b], k]
                    partial[comp, a, b, k] = lo + ty[b] * (tmp[a, y1[b], k] - lo)
    out = np.empty((d, h, w), dtype=vol.dtype)
    for a in range(d):
        for b in range(h):
            for c in range(w):
                lo = partial[0, a, b, x0[c]]
                vz = (lo + tx[c] * (partial[0, a, b, x1[c]] - lo)) * magnitude
                lo = partial[1, a, b, x0[c]]
                vy = (lo + tx[c] * (partial[1, a, b, x1[c]] - lo)) * magnitude
                lo = partial[2, a, b, x0[c]]
                vx = (lo + tx[c] * (partial[2, a, b, x1[c]] - lo)) * magnitude
                pz = a + vz
                py = b + vy
                px = c + vx
                if order == 0:
                    out[a, b, c] = vol[
                        _reflect1(int(np.floor(pz + 0.5)), d),
                        _reflect1(int(np.floor(py + 0.5)), h),
                        _reflect1(int(np.floor(px + 0.5)), w),
                    ]
                else:
                    out[a, b, c] = _trilinear(vol, pz, py, px)
    return out


# ---------------------------------------------------------------- median filter


@njit
def _select_kth(buf, n, k):
    lo = 0
    hi = n - 1
    while lo < hi:
        pivot = buf[(lo + hi) // 2]
        i = lo
        j = hi
        while i <= j:
            while buf[i] < pivot:
                i += 1
            while buf[j] > pivot:
                j -= 1
            if i <= j:
                tmp = buf[i]
                buf[i] = buf[j]
                buf[j] = tmp
                i += 1
                j -= 1
        if k <= j:
            hi = j
        elif k >= i:
            lo = i
        else:
            break
    return buf[k]


@njit
def median_filter_nb(vol, size):
    d, h, w = vol.shape
    r = size // 2
    rz = np.empty(d + 2 * r, dtype=np.int64)
    ry = np.empty(h + 2 * r, dtype=np.int64)
    rx = np.empty(w + 2 * r, dtype=np.int64)
    for i in range(d + 2 * r):
        rz[i] = _reflect1(i - r, d)
    for i in range(h + 2 * r):
        ry[i] = _reflect1(i - r, h)
    for i in range(w + 2 * r):
        rx[i] = _reflect1(i - r, w)
    n = size * size * size
    k = n // 2
    buf = np.empty(n, dtype=vol.dtype)
    out = np.empty_like(vol)
    for z in range(d):
        for y in range(h):
            for x in range(w):
                c = 0
                for a in range(size):
                    za = rz[z + a]
                    for b in range(size):
                        yb = ry[y + b]
                        for e in range(size):
                            buf[c] = vol[za, yb, rx[x + e]]
                            c += 1
                out[z, y, x] = _select_kth(buf, n, k)
    return out


def median_filter_np(vol, size):
    return ndi.median_filter(vol, size=size, mode="reflect")


def median_filter(vol, size):
    """Cubic ``size``\\ :sup:`3` median with reflect boundary; ``size`` must be odd."""
    vol = np.ascontiguousarray(vol)
    if _accel.USE_NUMBA:
        return median_filter_nb(vol, int(size))
    return median_filter_np(vol, int(size))


@njit
def median_excess_nb(vol, size, delta):
    """``(vol - median_filter(vol, size)) > delta`` without forming the median.

    ``fl(a - v)`` is non-increasing in ``v``, so the values passing the test form
    a prefix of the sorted window; the median (rank ``n // 2``) passes exactly
    when more than ``n // 2`` window values do.
    """
    d, h, w = vol.shape
    r = size // 2
    rz = np.empty(d + 2 * r, dtype=np.int64)
    ry = np.empty(h + 2 * r, dtype=np.int64)
    rx = np.empty(w + 2 * r, dtype=np.int64)
    for i in range(d + 2 * r):
        rz[i] = _reflect1(i - r, d)
    for i in range(h + 2 * r):
        ry[i] = _reflect1(i - r, h)
    for i in range(w + 2 * r):
        rx[i] = _reflect1(i - r, w)
    k = (size * size * size) // 2
    out = np.zeros(vol.shape, dtype=np.bool_)
    row = np.empty(w + 2 * r, dtype=vol.dtype)
    for z in range(d):
        for y in range(h):
            for x in range(w):
                a = vol[z, y, x]
                c = 0
                for p in range(size):
                    zp = rz[z + p]
                    for q in range(size):
                        yq = ry[y + q]
                        for e in range(size):
                            c += (a - vol[zp, yq, rx[x + e]]) > delta
                out[z, y, x] = c > k
    return out


def median_excess_np(vol, size, delta):
    return (vol - median_filter_np(vol, size)) > delta


def median_excess(vol, size, delta):
    """Boolean ``vol - median(vol) > delta`` (float32 arithmetic, reflect boundary)."""
    vol = np.ascontiguousarray(vol, dtype=np.float32)
    delta = np.float32(delta)
    if _accel.USE_NUMBA:
        return median_excess_nb(vol, int(size), delta)
    return median_excess_np(vol, int(size), delta)


# ---------------------------------------------------------------- separable smoothing


@njit
def symmetric_correlate_nb(v, k, axis):
    # same accumulation order as scipy's symmetric-kernel path (centre tap, then outer pairs inwards),
    # in float64 with a float32 result, so the two agree bit for bit
    d0, d1, d2 = v.shape
    r = k.shape[0] // 2
    out = np.empty((d0, d1, d2), dtype=np.float32)
    if axis == 2:
        buf = np.empty(d2 + 2 * r, dtype=np.float64)
        for a in range(d0):
            for b in range(d1):
                for i in range(-r, d2 + r):
                    buf[i + r] = v[a, b, _reflect1(i, d2)]
                for i in range(d2):
                    acc = buf[i + r] * k[r]
                    for j in range(r, 0, -1):
                        acc += (buf[i + r - j] + buf[i + r + j]) * k[r - j]
                    out[a, b, i] = acc
    elif axis == 1:
        acc = np.empty(d2, dtype=np.float64)
        for a in range(d0):
            for i in range(d1):
                for c in range(d2):
                    acc[c] = np.float64(v[a, i, c]) * k[r]
                for j in range(r, 0, -1):
                    lo = _reflect1(i - j, d1)
                    hi = _reflect1(i + j, d1)
                    for c in range(d2):
                        acc[c] += (np.float64(v[a, lo, c]) + np.float64(v[a, hi, c])) * k[r - j]
                for c in range(d2):
                    out[a, i, c] = acc[c]
    else:
        acc2 = np.empty((d1, d2), dtype=np.float64)
        for i in range(d0):
            for b in range(d1):
                for c in range(d2):
                    acc2[b, c] = np.float64(v[i, b, c]) * k[r]
            for j in range(r, 0, -1):
                lo = _reflect1(i - j, d0)
                hi = _reflect1(i + j, d0)
                for b in range(d1):
                    for c in range(d2):
                        acc2[b, c] += (np.float64(v[lo, b, c]) + np.float64(v[hi, b, c])) * k[r - j]
            for b in range(d1):
                for c in range(d2):
                    out[i, b, c] = acc2[b, c]
    return out


def symmetric_correlate_np(v, k, axis):
    return ndi.correlate1d(v, k, axis=axis, mode="reflect")


def symmetric_correlate(v, k, axis):
    """Correlate a float32 volume with an odd symmetric kernel along ``axis`` (reflect boundary)."""
    v = np.ascontiguousarray(v, dtype=np.float32)
    k = np.ascontiguousarray(k, dtype=np.float64)
    if _accel.USE_NUMBA and v.ndim == 3 and k.size % 2 == 1 and np.array_equal(k, k[::-1]):
        return symmetric_correlate_nb(v, k, int(axis))
    return symmetric_correlate_np(v, k, axis)


# ---------------------------------------------------------------- histogram remap


@njit
def histogram_remap_nb(img, lo, span, xp, fp):
    # min-max normalise in float32, then piecewise-linear interpolation in float64 with
    # the same knot search and arithmetic as numpy.interp
    n = xp.shape[0]
    slopes = np.empty(max(n - 1, 1), dtype=np.float64)
    for j in range(n - 1):
        # a repeated knot is a zero-width interval that no x can land inside
        dxp = xp[j + 1] - xp[j]
        slopes[j] = (fp[j + 1] - fp[j]) / dxp if dxp != 0 else 0.0
    lo32 = np.float32(lo)
    span32 = np.float32(span)
    flat = img.ravel()
    out = np.empty(flat.shape[0], dtype=np.float32)
    for i in range(flat.shape[0]):
        x = np.float64((flat[i] - lo32) / span32)
        if np.isnan(x):
            v = x
        elif x < xp[0]:
            v = fp[0]
        elif x > xp[n - 1]:
            v = fp[n - 1]
        else:
            j = 0
            while j + 1 < n and xp[j + 1] <= x:
                j += 1
            if j == n - 1 or xp[j] == x:
                v = fp[j]
            else:
                v = slopes[j] * (x - xp[j]) + fp[j]
        out[i] = v * span + lo
    return out.reshape(img.shape)


def histogram_remap_np(img, lo, span, xp, fp):
    norm = (img - np.float32(lo)) / np.float32(span)
    return (np.interp(norm, xp, fp) * span + lo).astype(np.float32)


def histogram_remap(img, lo, span, xp, fp):
    """``interp((img - lo) / span, xp, fp) * span + lo`` for a float32 volume with ``span > 0``."""
    img = np.ascontiguousarray(img, dtype=np.float32)
    xp = np.ascontiguousarray(xp, dtype=np.float64)
    fp = np.ascontiguousarray(fp, dtype=np.float64)
    if _accel.USE_NUMBA:
        return histogram_remap_nb(img, float(lo), float(span), xp, fp)
    return histogram_remap_np(img, float(lo), float(span), xp, fp)


# ---------------------------------------------------------------- branch walk


@njit
def walk_branch_nb(px, py, pz, dx, dy, dz, r, kicks, coins, child_u, upper, tort, step, taper, rmin, branch_prob, budget):
    n = coins.shape[0]
    pts = np.empty((n, 3), dtype=np.float64)
    radii = np.empty(n, dtype=np.float64)
    spawn = np.empty((n, 2), dtype=np.int64)  # (point index, step index)
    spawn_dir = np.empty((n, 3), dtype=np.float64)
    spawn_r = np.empty(n, dtype=np.float64)
    k = 0
    m = 0
    for s in range(n):
        if tort > 0:
            dx += tort * kicks[s, 0]
            dy += tort * kicks[s, 1]
            dz += tort * kicks[s, 2]
            nn = math.sqrt(dx * dx + dy * dy + dz * dz)
            dx, dy, dz = dx / nn, dy / nn, dz / nn
        px += step * dx
        py += step * dy
        pz += step * dz
        if px < -0.5 or py < -0.5 or pz < -0.5 or px > upper[0] or py > upper[1] or pz > upper[2]:
            break
        r = max(rmin, r * taper)
        pts[k, 0] = px
        pts[k, 1] = py
        pts[k, 2] = pz
        radii[k] = r
        if coins[s] < branch_prob and m < budget:
            spawn[m, 0] = k
            spawn[m, 1] = s
            spawn_dir[m, 0] = dx
            spawn_dir[m, 1] = dy
            spawn_dir[m, 2] = dz
            spawn_r[m] = max(rmin, r * child_u[s])
            m += 1
        k += 1
    return pts[:k], radii[:k], spawn[:m], spawn_dir[:m], spawn_r[:m]


# the walk is scalar code, so the fallback is the same function run by the interpreter
walk_branch_np = getattr(walk_branch_nb, "py_func", walk_branch_nb)


def walk_branch(*args):
    """Scalar random walk of one branch; see ``foreground.grow_tree``."""
    if _accel.USE_NUMBA:
        return walk_branch_nb(*args)
    return walk_branch_np(*args)
