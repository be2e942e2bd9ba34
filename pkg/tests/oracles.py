"""Slow, obviously-correct reference implementations used as test oracles.

Nothing here shares code with the package beyond the plane definitions,
which are re-derived from scratch.
"""

import itertools

import numpy as np


def plane_offsets():
    """The nine planes through the cube centre, enumerated independently.

    A plane through the origin of the 3x3x3 cube containing nine lattice
    points is spanned by two of the 13 direction classes; collect every
    distinct 9-point set.
    """
    cube = list(itertools.product((-1, 0, 1), repeat=3))
    planes = set()
    for n in itertools.product((-1, 0, 1), repeat=3):
        if n == (0, 0, 0):
            continue
        pts = frozenset(p for p in cube if sum(a * b for a, b in zip(n, p)) == 0)
        if len(pts) == 9:
            planes.add(pts)
    return [sorted(p) for p in planes]


def _inside(shape, idx):
    return all(0 <= i < s for i, s in zip(idx, shape))


def si_loop(v):
    out = np.empty_like(v, dtype=np.float64)
    planes = plane_offsets()
    for x in np.ndindex(v.shape):
        best = -np.inf
        for plane in planes:
            low = np.inf
            for d in plane:
                y = tuple(a + b for a, b in zip(x, d))
                if _inside(v.shape, y):
                    low = min(low, v[y])
            best = max(best, low)
        out[x] = best
    return out


def is_loop(v):
    out = np.empty_like(v, dtype=np.float64)
    planes = plane_offsets()
    for x in np.ndindex(v.shape):
        best = np.inf
        for plane in planes:
            high = -np.inf
            for d in plane:
                y = tuple(a + b for a, b in zip(x, d))
                if _inside(v.shape, y):
                    high = max(high, v[y])
            best = min(best, high)
        out[x] = best
    return out


def curvature_loop(v, mu):
    for _ in range(mu):
        v = si_loop(is_loop(v))
    return v


def confusion_loop(pred, gt):
    tp = fp = tn = fn = 0
    for p, g in zip(np.ravel(pred), np.ravel(gt)):
        if p and g:
            tp += 1
        elif p:
            fp += 1
        elif g:
            fn += 1
        else:
            tn += 1
    return tp, fp, tn, fn


def jaccard_at(s, gt, t):
    tp, fp, _, fn = confusion_loop(np.ravel(s) > t, np.ravel(gt) > 0.5)
    return tp / (tp + fp + fn)


def ap_loop(s, gt, thresholds):
    """Precision-recall pairs by enumeration, then a step-function area.

    Thresholds are visited from high to low; recall is non-decreasing
    along that path.
    """
    s, gt = np.ravel(s), np.ravel(gt) > 0.5
    pos = int(gt.sum())
    area, prev_recall = 0.0, 0.0
    for t in sorted(thresholds, reverse=True):
        tp = fp = 0
        for score, g in zip(s, gt):
            if score > t:
                if g:
                    tp += 1
                else:
                    fp += 1
        precision = tp / (tp + fp) if tp + fp else 1.0
        recall = tp / pos
        area += (recall - prev_recall) * precision
        prev_recall = recall
    return area


def coverage_loop(shape, window, stride):
    """Count window placements per voxel by explicit enumeration.

    Pads each axis by reflection so that windows at the stride tile it,
    places windows at 0, s, 2s, ... plus one touching the far end, and
    counts hits on the original voxels.
    """
    axes = []
    for size, w, st in zip(shape, window, stride):
        total = w - size if size < w else -(-(size - w) // st) * st + w - size
        lo = total // 2
        extent = size + total
        starts = list(range(0, extent - w + 1, st))
        if starts[-1] != extent - w:
            starts.append(extent - w)
        axes.append((lo, starts, w, extent))
    padded = np.zeros([a[3] for a in axes], dtype=np.int64)
    for z0 in axes[0][1]:
        for y0 in axes[1][1]:
            for x0 in axes[2][1]:
                for z in range(z0, z0 + axes[0][2]):
                    for y in range(y0, y0 + axes[1][2]):
                        padded[z, y, x0:x0 + axes[2][2]] += 1
    return padded[tuple(slice(a[0], a[0] + size) for a, size in zip(axes, shape))]


def fd_gradient(f, x, eps=1e-5):
    """Central finite differences of a scalar numpy function."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        orig = x[i]
        x[i] = orig + eps
        up = f(x)
        x[i] = orig - eps
        down = f(x)
        x[i] = orig
        g[i] = (up - down) / (2 * eps)
    return g
