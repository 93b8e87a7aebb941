"""Dataset-level evaluation and report serialization."""

from __future__ import annotations

import csv
import io
import json
import math
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from ..taxonomy import ClassTaxonomy
from . import core

METRICS = ("dsc", "jaccard", "hd95", "asd")
NAN_POLICY = (
    "classes whose metric is undefined (NaN) on every sample are excluded from the aggregate; "
    "boundary-metric aggregates can be optimistic when a model misses classes entirely"
)


@dataclass
class MetricsReport:
    per_class: dict[int, dict[str, float]]
    aggregate: dict[str, float]
    nan_classes: set[int]
    nan_by_metric: dict[str, list[int]] = field(default_factory=dict)
    class_names: dict[int, str] = field(default_factory=dict)
    n_samples: int = 0
    nan_policy: str = NAN_POLICY

    def to_dict(self) -> dict:
        def clean(v):
            return None if isinstance(v, float) and math.isnan(v) else v

        return {
            "per_class": {
                self.class_names.get(c, str(c)): {k: clean(v) for k, v in m.items()}
                for c, m in sorted(self.per_class.items())
            },
            "aggregate": {k: clean(v) for k, v in self.aggregate.items()},
            "nan_classes": sorted(self.nan_classes),
            "nan_by_metric": self.nan_by_metric,
            "n_samples": self.n_samples,
            "nan_policy": self.nan_policy,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def _nanmean(values: Sequence[float]) -> float:
    vals = [v for v in values if not math.isnan(v)]
    return float(np.mean(vals)) if vals else float("nan")


def _sample_metrics(pred, gt, cid, spacing, hd95_mode):
    dists = core.surface_distances(pred, gt, cid, spacing)
    out = {"dsc": core.dsc(pred, gt, cid), "jaccard": core.jaccard(pred, gt, cid)}
    if dists is None:
        out["hd95"] = out["asd"] = float("nan")
    else:
        out["hd95"] = core.hd95_from_distances(*dists, mode=hd95_mode)
        out["asd"] = core.asd_from_distances(*dists)
    return out


def _volume_metrics(preds, gts, cid, spacing, hd95_mode):
    # overlap from pooled counts, distances from pooled per-slice distance sets
    inter = n_p = n_g = union = 0
    d_pg, d_gp = [], []
    for pred, gt in zip(preds, gts):
        p, g = np.asarray(pred) == cid, np.asarray(gt) == cid
        inter += int((p & g).sum())
        union += int((p | g).sum())
        n_p += int(p.sum())
        n_g += int(g.sum())
        if p.any() and g.any():
            d_pg.append(core.directed_surface_distances(p, g, spacing))
            d_gp.append(core.directed_surface_distances(g, p, spacing))
    out = {
        "dsc": 2.0 * inter / (n_p + n_g) if n_p + n_g else float("nan"),
        "jaccard": inter / union if union else float("nan"),
    }
    if d_pg:
        a, b = np.concatenate(d_pg), np.concatenate(d_gp)
        out["hd95"] = core.hd95_from_distances(a, b, mode=hd95_mode)
        out["asd"] = core.asd_from_distances(a, b)
    else:
        out["hd95"] = out["asd"] = float("nan")
    return out


def evaluate(
    preds: Sequence[np.ndarray],
    gts: Sequence[np.ndarray],
    taxonomy: ClassTaxonomy,
    *,
    volume_ids: Sequence[str] | None = None,
    per_volume: bool = False,
    spacing: float = 1.0,
    hd95_mode: str = "pooled",
) -> MetricsReport:
    """Per-class metrics averaged over the non-NaN samples, aggregated over
    the non-NaN foreground classes."""
    if len(preds) != len(gts):
        raise ValueError(f"{len(preds)} predictions but {len(gts)} ground-truth maps")
    for k, (p, g) in enumerate(zip(preds, gts)):
        if np.shape(p) != np.shape(g):
            raise core.ShapeMismatchError(f"sample {k}: {np.shape(p)} vs {np.shape(g)}")
    class_ids = [e.id for e in taxonomy.entries[1:]]

    if per_volume:
        if volume_ids is None or len(volume_ids) != len(preds):
            raise ValueError("per-volume evaluation needs one volume id per sample")
        groups: dict[str, list[int]] = defaultdict(list)
        for k, v in enumerate(volume_ids):
            groups[v].append(k)
        units = [
            (lambda cid, idx=idx: _volume_metrics(
                [preds[i] for i in idx], [gts[i] for i in idx], cid, spacing, hd95_mode))
            for idx in groups.values()
        ]
    else:
        units = [
            (lambda cid, p=p, g=g: _sample_metrics(p, g, cid, spacing, hd95_mode))
            for p, g in zip(preds, gts)
        ]

    per_class: dict[int, dict[str, float]] = {}
    for cid in class_ids:
        samples = [u(cid) for u in units]
        per_class[cid] = {m: _nanmean([s[m] for s in samples]) for m in METRICS}

    nan_by_metric = {
        m: sorted(c for c in class_ids if math.isnan(per_class[c][m])) for m in METRICS
    }
    aggregate = {m: _nanmean([per_class[c][m] for c in class_ids]) for m in METRICS}
    nan_classes = set().union(*map(set, nan_by_metric.values()))
    return MetricsReport(
        per_class=per_class,
        aggregate=aggregate,
        nan_classes=nan_classes,
        nan_by_metric=nan_by_metric,
        class_names={e.id: e.name for e in taxonomy.entries},
        n_samples=len(preds),
    )


def reports_to_csv(rows: Sequence[tuple[str, MetricsReport]], taxonomy: ClassTaxonomy) -> str:
    """Result-table layout: one row per (run, metric), one column per class
    plus ``Avg.``. DSC and Jaccard are percentages, distances stay as-is."""
    cols = taxonomy.table_order()
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["Method", "Metric"] + [e.name for e in cols] + ["Avg."])
    for name, rep in rows:
        for m in METRICS:
            scale = 100.0 if m in ("dsc", "jaccard") else 1.0
            vals = [rep.per_class[e.id][m] for e in cols] + [rep.aggregate[m]]
            w.writerow(
                [name, m.upper() if m != "jaccard" else "Jaccard"]
                + ["NaN" if math.isnan(v) else f"{v * scale:.2f}" for v in vals]
            )
    return buf.getvalue()
