"""Boundary extraction and exact Euclidean distance transforms.

Each kernel has a numba implementation and a pure-numpy twin with identical
results; ``boundary`` and ``edt_sq`` dispatch on :mod:`._accel`.
"""

from __future__ import annotations

import numpy as np

from ._accel import USE_NUMBA, njit

INF = np.inf
_BIG = 1e20


# ---------------------------------------------------------------- numpy path


def boundary_numpy(mask: np.ndarray) -> np.ndarray:
    """Foreground pixels with at least one background 4-neighbour; the image
    border counts as background."""
    m = np.asarray(mask, dtype=bool)
    p = np.pad(m, 1, constant_values=False)
    interior = p[:-2, 1:-1] & p[2:, 1:-1] & p[1:-1, :-2] & p[1:-1, 2:]
    return m & ~interior


def _column_distance_numpy(feat: np.ndarray) -> np.ndarray:
    # distance along axis 0 to the nearest feature pixel in the same column
    h, w = feat.shape
    rows = np.arange(h, dtype=np.float64)[:, None]
    above = np.where(feat, rows, -INF)
    above = np.maximum.accumulate(above, axis=0)
    below = np.where(feat, rows, INF)
    below = np.minimum.accumulate(below[::-1], axis=0)[::-1]
    return np.minimum(rows - above, below - rows)


def edt_sq_numpy(feat: np.ndarray, chunk: int = 64) -> np.ndarray:
    """Squared distance from every pixel to the nearest True pixel of ``feat``
    (``inf`` everywhere when ``feat`` is empty)."""
    feat = np.asarray(feat, dtype=bool)
    h, w = feat.shape
    g2 = _column_distance_numpy(feat) ** 2
    cols = np.arange(w, dtype=np.float64)
    dx2 = (cols[:, None] - cols[None, :]) ** 2  # (x, x')
    out = np.empty((h, w), dtype=np.float64)
    for r0 in range(0, h, chunk):
        blk = g2[r0 : r0 + chunk]  # (r, x')
        out[r0 : r0 + chunk] = np.min(blk[:, None, :] + dx2[None, :, :], axis=2)
    return out


# ---------------------------------------------------------------- numba path


@njit
def boundary_numba(mask):
    h, w = mask.shape
    out = np.zeros((h, w), dtype=np.bool_)
    for y in range(h):
        for x in range(w):
            if not mask[y, x]:
                continue
            if y == 0 or x == 0 or y == h - 1 or x == w - 1:
                out[y, x] = True
            elif not (mask[y - 1, x] and mask[y + 1, x] and mask[y, x - 1] and mask[y, x + 1]):
                out[y, x] = True
    return out


@njit
def _lower_envelope(f, d, v, z):
    # Felzenszwalb-Huttenlocher 1-D squared distance transform of sampled f
    n = f.shape[0]
    k = 0
    v[0] = 0
    z[0] = -_BIG
    z[1] = _BIG
    for q in range(1, n):
        s = ((f[q] + q * q) - (f[v[k]] + v[k] * v[k])) / (2.0 * q - 2.0 * v[k])
        while s <= z[k]:
            k -= 1
            s = ((f[q] + q * q) - (f[v[k]] + v[k] * v[k])) / (2.0 * q - 2.0 * v[k])
        k += 1
        v[k] = q
        z[k] = s
        z[k + 1] = _BIG
    k = 0
    for q in range(n):
        while z[k + 1] < q:
            k += 1
        d[q] = (q - v[k]) * (q - v[k]) + f[v[k]]


@njit
def edt_sq_numba(feat):
    h, w = feat.shape
    g = np.empty((h, w), dtype=np.float64)
    for x in range(w):
        last = -1
        for y in range(h):
            if feat[y, x]:
                last = y
            g[y, x] = (y - last) if last >= 0 else _BIG
        last = -1
        for y in range(h - 1, -1, -1):
            if feat[y, x]:
                last = y
            if last >= 0 and last - y < g[y, x]:
                g[y, x] = last - y
    out = np.empty((h, w), dtype=np.float64)
    f = np.empty(w, dtype=np.float64)
    d = np.empty(w, dtype=np.float64)
    v = np.empty(w, dtype=np.int64)
    z = np.empty(w + 1, dtype=np.float64)
    for y in range(h):
        for x in range(w):
            gx = g[y, x]
            f[x] = gx * gx if gx < _BIG else _BIG
        _lower_envelope(f, d, v, z)
        for x in range(w):
            out[y, x] = d[x] if d[x] < 1e19 else np.inf
    return out


# ---------------------------------------------------------------- dispatch


def boundary(mask: np.ndarray) -> np.ndarray:
    if USE_NUMBA:
        return boundary_numba(np.ascontiguousarray(mask, dtype=np.bool_))
    return boundary_numpy(mask)


def edt_sq(feat: np.ndarray) -> np.ndarray:
    if USE_NUMBA:
        return edt_sq_numba(np.ascontiguousarray(feat, dtype=np.bool_))
    return edt_sq_numpy(feat)


def backend() -> str:
    return "numba" if USE_NUMBA else "numpy"
