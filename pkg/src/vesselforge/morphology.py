"""Binary morphology on boolean (z, y, x) masks."""

import numpy as np
from scipy import ndimage as ndi
from skimage.morphology import skeletonize as _skeletonize_lee


def _as_mask(m):
    return np.asarray(m).astype(bool, copy=False)


def dilate(m, radius):
    """Dilation by a cube of side ``2 * radius + 1``."""
    m = _as_mask(m)
    radius = int(radius)
    if radius < 0:
        raise ValueError("radius must be non-negative")
    if radius == 0 or not m.any():
        return m.copy()
    return ndi.maximum_filter(m, size=2 * radius + 1, mode="constant", cval=False)


def erode(m, radius, border_value=False):
    """Erosion by a cube of side ``2 * radius + 1``; outside voxels read as ``border_value``."""
    m = _as_mask(m)
    radius = int(radius)
    if radius == 0:
        return m.copy()
    return ndi.minimum_filter(m, size=2 * radius + 1, mode="constant", cval=bool(border_value))


def morphological_close(m):
    """Closing with the 3x3x3 cube, computed as if the grid were unbounded.

    One voxel of zero padding keeps border voxels from being eroded away, so
    the result always contains the input.
    """
    m = _as_mask(m)
    if not m.any():
        return m.copy()
    padded = np.pad(m, 1)
    closed = erode(dilate(padded, 1), 1, border_value=True)
    return closed[1:-1, 1:-1, 1:-1].copy()


def structure(connectivity):
    if connectivity == 6:
        return ndi.generate_binary_structure(3, 1)
    if connectivity == 26:
        return ndi.generate_binary_structure(3, 3)
    raise ValueError(f"connectivity must be 6 or 26, got {connectivity}")


def connected_components(m, connectivity=26):
    """Label components 1..K. Returns ``(labels, sizes)``, where ``sizes[k - 1]`` is the size of label k."""
    labels, k = ndi.label(_as_mask(m), structure=structure(connectivity))
    sizes = np.bincount(labels.ravel(), minlength=k + 1)[1:]
    return labels.astype(np.int32), sizes


def remove_small_objects(m, min_size, connectivity=26):
    m = _as_mask(m)
    if min_size <= 1 or not m.any():
        return m.copy()
    labels, sizes = connected_components(m, connectivity)
    keep = np.concatenate([[False], sizes >= min_size])
    return keep[labels]


def skeletonize(m):
    """Topology-preserving 3D thinning to one-voxel-wide centrelines.

    Uses Lee, Kashyap and Chu's 3D medial-axis thinning, which keeps the
    26-connected component count and the endpoints of thin branches.
    """
    m = _as_mask(m)
    if not m.any():
        return m.copy()
    # thinning treats the border as background; pad so border voxels are handled like interior ones
    padded = np.pad(m, 1)
    skel = _skeletonize_lee(padded)[1:-1, 1:-1, 1:-1].astype(bool)
    # the thinning can erase a small blob outright; keep its deepest voxel so no component is lost
    labels, n = ndi.label(m, structure=np.ones((3, 3, 3)))
    kept = np.zeros(n + 1, dtype=bool)
    kept[labels[skel]] = True
    lost = np.flatnonzero(~kept[1:]) + 1
    if lost.size:
        depth = ndi.distance_transform_edt(padded)[1:-1, 1:-1, 1:-1]
        for pos in ndi.maximum_position(depth, labels, lost):
            skel[pos] = True
    return skel


def hull(m):
    """Boundary shell: foreground voxels with at least one 26-neighbour in the background.

    Voxels outside the grid count as foreground, so vessels that leave the
    volume stay open-ended.
    """
    m = _as_mask(m)
    return m & ~erode(m, 1, border_value=True)
