"""Per-class overlap and surface-distance metrics on 2-D label maps.

Distances are in pixels unless a ``spacing`` factor is given. Undefined
values are ``nan``: DSC/Jaccard when the class is absent from both maps,
HD95/ASD when it is absent from either.
"""

from __future__ import annotations

import numpy as np

from . import kernels


class ShapeMismatchError(ValueError):
    pass


def _masks(pred, gt, class_id):
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ShapeMismatchError(f"prediction shape {pred.shape} != ground truth shape {gt.shape}")
    return pred == class_id, gt == class_id


def dsc(pred, gt, class_id: int) -> float:
    p, g = _masks(pred, gt, class_id)
    denom = int(p.sum()) + int(g.sum())
    if denom == 0:
        return float("nan")
    return 2.0 * int((p & g).sum()) / denom


def jaccard(pred, gt, class_id: int) -> float:
    p, g = _masks(pred, gt, class_id)
    union = int((p | g).sum())
    if union == 0:
        return float("nan")
    return int((p & g).sum()) / union


def directed_surface_distances(src: np.ndarray, dst: np.ndarray, spacing: float = 1.0):
    """Distance from each boundary pixel of ``src`` to the boundary of ``dst``."""
    b_src = kernels.boundary(src)
    b_dst = kernels.boundary(dst)
    d2 = kernels.edt_sq(b_dst)
    return np.sqrt(d2[b_src]) * spacing


def surface_distances(pred, gt, class_id: int, spacing: float = 1.0):
    """Both directed distance sets, or ``None`` if either mask is empty."""
    p, g = _masks(pred, gt, class_id)
    if not p.any() or not g.any():
        return None
    return directed_surface_distances(p, g, spacing), directed_surface_distances(g, p, spacing)


def hd95_from_distances(d_pg: np.ndarray, d_gp: np.ndarray, mode: str = "pooled") -> float:
    if mode == "pooled":
        return float(np.percentile(np.concatenate([d_pg, d_gp]), 95))
    if mode == "max":
        return float(max(np.percentile(d_pg, 95), np.percentile(d_gp, 95)))
    raise ValueError(f"unknown hd95 mode {mode!r} (pooled or max)")


def asd_from_distances(d_pg: np.ndarray, d_gp: np.ndarray) -> float:
    return float(np.concatenate([d_pg, d_gp]).mean())


def hd95(pred, gt, class_id: int, spacing: float = 1.0, mode: str = "pooled") -> float:
    dists = surface_distances(pred, gt, class_id, spacing)
    if dists is None:
        return float("nan")
    return hd95_from_distances(*dists, mode=mode)


def asd(pred, gt, class_id: int, spacing: float = 1.0) -> float:
    dists = surface_distances(pred, gt, class_id, spacing)
    if dists is None:
        return float("nan")
    return asd_from_distances(*dists)


# ---------------------------------------------------------------- oracle


def _boundary_points(mask: np.ndarray) -> list[tuple[int, int]]:
    # pixel-by-pixel 4-neighbour test, independent of the vectorized kernels
    h, w = mask.shape
    pts = []
    for y in range(h):
        for x in range(w):
            if not mask[y, x]:
                continue
            for ny, nx in ((y - 1, x), (y + 1, x), (y, x - 1), (y, x + 1)):
                if not (0 <= ny < h and 0 <= nx < w) or not mask[ny, nx]:
                    pts.append((y, x))
                    break
    return pts


def _percentile_linear(values: list[float], q: float) -> float:
    v = sorted(values)
    pos = (len(v) - 1) * q / 100.0
    lo = int(pos)
    hi = min(lo + 1, len(v) - 1)
    return v[lo] + (v[hi] - v[lo]) * (pos - lo)


def brute_force_directed(src: np.ndarray, dst: np.ndarray, spacing: float = 1.0) -> np.ndarray:
    """All-pairs O(n*m) boundary distances; the reference for the EDT path."""
    ps = np.array(_boundary_points(np.asarray(src, dtype=bool)), dtype=np.float64).reshape(-1, 2)
    qs = np.array(_boundary_points(np.asarray(dst, dtype=bool)), dtype=np.float64).reshape(-1, 2)
    diff = ps[:, None, :] - qs[None, :, :]
    return np.sqrt((diff**2).sum(-1)).min(axis=1) * spacing


def brute_force_metrics(pred, gt, class_id: int, mode: str = "pooled") -> dict[str, float]:
    """DSC, Jaccard, HD95 and ASD by direct set counting and all-pairs search."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    inter = union = n_p = n_g = 0
    for a, b in zip(pred.ravel().tolist(), gt.ravel().tolist()):
        ia, ib = a == class_id, b == class_id
        inter += ia and ib
        union += ia or ib
        n_p += ia
        n_g += ib
    out = {
        "dsc": 2.0 * inter / (n_p + n_g) if n_p + n_g else float("nan"),
        "jaccard": inter / union if union else float("nan"),
    }
    if n_p == 0 or n_g == 0:
        out["hd95"] = out["asd"] = float("nan")
    else:
        p, g = pred == class_id, gt == class_id
        d_pg, d_gp = brute_force_directed(p, g), brute_force_directed(g, p)
        pooled = d_pg.tolist() + d_gp.tolist()
        if mode == "pooled":
            out["hd95"] = _percentile_linear(pooled, 95)
        else:
            out["hd95"] = max(_percentile_linear(d_pg.tolist(), 95), _percentile_linear(d_gp.tolist(), 95))
        out["asd"] = sum(pooled) / len(pooled)
    return out
