"""SI / IS curvature operators over the nine planar 3x3x3 structuring elements.

Voxels outside the volume never take part in a plane's sup or inf, so the
operators neither erode nor dilate artificially at the faces.
"""

from __future__ import annotations

import itertools

import numpy as np

# Normals (z, y, x) of the nine planes through the cube centre: the three
# axis planes first, then the six diagonal planes in lexicographic order.
PLANE_NORMALS = (
    (1, 0, 0),
    (0, 1, 0),
    (0, 0, 1),
    (0, 1, -1),
    (0, 1, 1),
    (1, -1, 0),
    (1, 0, -1),
    (1, 0, 1),
    (1, 1, 0),
)


def structuring_elements() -> np.ndarray:
    """The canonical (9, 3, 3, 3) boolean stack of plane masks."""
    elements = np.zeros((len(PLANE_NORMALS), 3, 3, 3), dtype=bool)
    for i, normal in enumerate(PLANE_NORMALS):
        for d in itertools.product((-1, 0, 1), repeat=3):
            if np.dot(normal, d) == 0:
                elements[i, d[0] + 1, d[1] + 1, d[2] + 1] = True
    return elements


def element_offsets() -> list[list[tuple[int, int, int]]]:
    """Per element, its active (dz, dy, dx) offsets in increasing linear order."""
    return [
        [tuple(int(c) - 1 for c in idx) for idx in zip(*np.nonzero(el))]
        for el in structuring_elements()
    ]


def mask_pool(window, element) -> float:
    """Max of ``window`` over the voxels selected by ``element``.

    Out-of-volume voxels should be marked NaN (or -inf); they are ignored.
    """
    w = np.asarray(window, dtype=np.float64)
    vals = w[np.asarray(element, dtype=bool)]
    vals = vals[~np.isnan(vals)]
    if vals.size == 0:
        return -np.inf
    return float(vals.max())


def _check(v):
    v = np.asarray(v)
    if v.ndim != 3 or min(v.shape) < 3:
        raise ValueError(f"morphological operators need a 3D volume of at least 3x3x3, got {v.shape}")
    if not np.issubdtype(v.dtype, np.floating):
        v = v.astype(np.float64)
    return v


def _sup_inf(v: np.ndarray, plane_reduce, across_reduce, pad_value) -> np.ndarray:
    k, m, n = v.shape
    padded = np.pad(v, 1, mode="constant", constant_values=pad_value)
    out = None
    for offsets in element_offsets():
        acc = None
        for dz, dy, dx in offsets:
            shifted = padded[1 + dz:1 + dz + k, 1 + dy:1 + dy + m, 1 + dx:1 + dx + n]
            acc = shifted.copy() if acc is None else plane_reduce(acc, shifted)
        out = acc if out is None else across_reduce(out, acc)
    return out


def si(vol) -> np.ndarray:
    """sup over elements of the inf over each plane."""
    v = _check(vol)
    return _sup_inf(v, np.minimum, np.maximum, np.inf)


def is_op(vol) -> np.ndarray:
    """inf over elements of the sup over each plane."""
    v = _check(vol)
    return _sup_inf(v, np.maximum, np.minimum, -np.inf)


def curvature_smooth(vol, mu: int) -> np.ndarray:
    """Apply SI(IS(.)) ``mu`` times."""
    if mu < 0:
        raise ValueError("mu must be nonnegative")
    v = _check(vol)
    for _ in range(mu):
        v = si(is_op(v))
    return v
