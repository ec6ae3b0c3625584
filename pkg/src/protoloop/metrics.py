"""Segmentation quality metrics: Dice, Jaccard, 95th-percentile Hausdorff, ASD.

Distances are Euclidean between voxel centers, in voxel units.  Degenerate
cases (empty masks, empty surfaces) are flagged rather than silently zeroed;
empty-surface distances use the volume diagonal as a sentinel.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .volume import LabelVolume

__all__ = [
    "ClassMetrics",
    "MetricReport",
    "overlap_metrics",
    "surface_voxels",
    "distance_metrics",
    "evaluate_pair",
    "foreground_dice",
    "pseudo_label_quality",
    "summarize_reports",
    "format_table",
]


@dataclass(frozen=True)
class ClassMetrics:
    dice: float
    jaccard: float
    hd95: float
    asd: float
    pred_empty: bool
    ref_empty: bool

    @property
    def overlap_degenerate(self) -> bool:
        """Both masks empty: overlap scores are 1.0 by convention."""
        return self.pred_empty and self.ref_empty

    @property
    def distance_degenerate(self) -> bool:
        """At least one empty surface: distances are the sentinel diagonal."""
        return self.pred_empty or self.ref_empty


@dataclass(frozen=True)
class MetricReport:
    """Per-class metrics (classes >= 1) plus the foreground-union aggregate."""

    per_class: dict[int, ClassMetrics]
    foreground: ClassMetrics


def _binary_overlap(pred: np.ndarray, ref: np.ndarray) -> tuple[float, float]:
    np_, nr = int(pred.sum()), int(ref.sum())
    inter = int(np.logical_and(pred, ref).sum())
    if np_ == 0 and nr == 0:
        return 1.0, 1.0
    dice = 2.0 * inter / (np_ + nr)
    union = np_ + nr - inter
    jaccard = inter / union if union else 1.0
    return dice, jaccard


def overlap_metrics(pred: LabelVolume, ref: LabelVolume, cls: int) -> tuple[float, float]:
    """(dice, jaccard) of one class; both-empty masks score 1.0 by convention."""
    _check_pair(pred, ref, cls)
    return _binary_overlap(pred.data == cls, ref.data == cls)


def surface_voxels(mask: np.ndarray) -> np.ndarray:
    """Indices (n, 3) of foreground voxels with a 6-connected background neighbor.

    The volume border counts as background, so any foreground voxel touching
    the border is surface.
    """
    mask = np.asarray(mask, dtype=bool)
    if mask.ndim != 3:
        raise ValueError(f"expected a 3-D mask, got shape {mask.shape}")
    padded = np.pad(mask, 1, mode="constant", constant_values=False)
    interior = np.ones_like(mask)
    for axis in range(3):
        for shift in (-1, 1):
            interior &= np.roll(padded, shift, axis=axis)[1:-1, 1:-1, 1:-1]
    return np.argwhere(mask & ~interior)


def _directed_distances(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """Distance from each src surface voxel to its nearest dst surface voxel."""
    tree = cKDTree(dst)
    dist, _ = tree.query(src, k=1)
    return np.asarray(dist, dtype=np.float64)


def _nearest_rank(values: np.ndarray, q: float) -> float:
    """Nearest-rank quantile: sorted value at 0-based index ceil(q*n) - 1."""
    values = np.sort(np.asarray(values, dtype=np.float64))
    rank = max(math.ceil(q * values.size) - 1, 0)
    return float(values[rank])


def distance_metrics(
    pred: LabelVolume, ref: LabelVolume, cls: int
) -> tuple[float, float, bool]:
    """(hd95, asd, degenerate) for one class, in voxel units.

    hd95 is the max of the two directed 95th-percentile (nearest-rank) surface
    distances; asd is the mean over the union of both directed distance sets.
    If either surface is empty both values are the volume-diagonal sentinel
    and the degenerate flag is set.
    """
    _check_pair(pred, ref, cls)
    sp = surface_voxels(pred.data == cls)
    sr = surface_voxels(ref.data == cls)
    if sp.size == 0 or sr.size == 0:
        sentinel = pred.shape.diagonal
        return sentinel, sentinel, True
    d_pr = _directed_distances(sp, sr)
    d_rp = _directed_distances(sr, sp)
    hd95 = max(_nearest_rank(d_pr, 0.95), _nearest_rank(d_rp, 0.95))
    asd = float((d_pr.sum() + d_rp.sum()) / (d_pr.size + d_rp.size))
    return hd95, asd, False


def _check_pair(pred: LabelVolume, ref: LabelVolume, cls: int | None = None) -> None:
    if pred.shape != ref.shape:
        raise ValueError(
            f"shape mismatch: pred {pred.shape.as_tuple()} vs ref {ref.shape.as_tuple()}"
        )
    if pred.num_classes != ref.num_classes:
        raise ValueError(
            f"class-count mismatch: pred {pred.num_classes} vs ref {ref.num_classes}"
        )
    if cls is not None and not 0 <= cls < pred.num_classes:
        raise ValueError(f"class {cls} outside [0, {pred.num_classes})")


def _metrics_for_masks(
    pred_mask: np.ndarray, ref_mask: np.ndarray, diagonal: float
) -> ClassMetrics:
    dice, jaccard = _binary_overlap(pred_mask, ref_mask)
    sp = surface_voxels(pred_mask)
    sr = surface_voxels(ref_mask)
    if sp.size == 0 or sr.size == 0:
        hd95 = asd = diagonal
    else:
        d_pr = _directed_distances(sp, sr)
        d_rp = _directed_distances(sr, sp)
        hd95 = max(_nearest_rank(d_pr, 0.95), _nearest_rank(d_rp, 0.95))
        asd = float((d_pr.sum() + d_rp.sum()) / (d_pr.size + d_rp.size))
    return ClassMetrics(
        dice=dice,
        jaccard=jaccard,
        hd95=hd95,
        asd=asd,
        pred_empty=not pred_mask.any(),
        ref_empty=not ref_mask.any(),
    )


def evaluate_pair(pred: LabelVolume, ref: LabelVolume) -> MetricReport:
    """All metrics for one prediction/reference pair."""
    _check_pair(pred, ref)
    diagonal = pred.shape.diagonal
    per_class = {
        c: _metrics_for_masks(pred.data == c, ref.data == c, diagonal)
        for c in range(1, pred.num_classes)
    }
    foreground = _metrics_for_masks(pred.data > 0, ref.data > 0, diagonal)
    return MetricReport(per_class=per_class, foreground=foreground)


def foreground_dice(pred: LabelVolume, ref: LabelVolume) -> float:
    """Dice of the foreground union (any class >= 1)."""
    _check_pair(pred, ref)
    dice, _ = _binary_overlap(pred.data > 0, ref.data > 0)
    return dice


def pseudo_label_quality(
    pseudo: dict[str, LabelVolume], truth: dict[str, LabelVolume]
) -> float:
    """Mean foreground Dice of a pseudo-label set against ground truth."""
    if pseudo.keys() != truth.keys():
        raise ValueError(
            f"id mismatch: pseudo {sorted(pseudo)} vs truth {sorted(truth)}"
        )
    if not pseudo:
        raise ValueError("empty pseudo-label set")
    return float(np.mean([foreground_dice(pseudo[i], truth[i]) for i in sorted(pseudo)]))


# ---------------------------------------------------------------------------
# case aggregation

_COLUMNS = ("dice", "jaccard", "hd95", "asd")


def summarize_reports(reports: list[MetricReport]) -> dict:
    """Mean and population std of every metric over cases, JSON-ready.

    Dice/Jaccard are reported in percent, distances in voxel units.
    """
    if not reports:
        raise ValueError("no cases to summarize")
    classes = sorted(reports[0].per_class)
    rows: dict[str, list[ClassMetrics]] = {
        f"class_{c}": [r.per_class[c] for r in reports] for c in classes
    }
    rows["foreground"] = [r.foreground for r in reports]
    out: dict = {"cases": len(reports), "rows": {}}
    for name, cms in rows.items():
        row: dict = {}
        for col in _COLUMNS:
            vals = np.array([getattr(cm, col) for cm in cms], dtype=np.float64)
            if col in ("dice", "jaccard"):
                vals = vals * 100.0
            row[col] = {"mean": float(vals.mean()), "std": float(vals.std())}
        row["overlap_degenerate"] = sum(cm.overlap_degenerate for cm in cms)
        row["distance_degenerate"] = sum(cm.distance_degenerate for cm in cms)
        out["rows"][name] = row
    return out


def format_table(summary: dict) -> str:
    """Aligned-column text table of a :func:`summarize_reports` summary."""
    headers = ("Dice[%]", "Jaccard[%]", "95HD[voxel]", "ASD[voxel]")
    names = list(summary["rows"])
    cells = {
        name: [
            "{mean:.2f} ± {std:.2f}".format(**summary["rows"][name][col])
            for col in _COLUMNS
        ]
        for name in names
    }
    name_w = max(len(n) for n in names + ["region"])
    widths = [
        max(len(headers[i]), max(len(cells[n][i]) for n in names)) for i in range(4)
    ]
    lines = [
        "  ".join(
            ["region".ljust(name_w)] + [headers[i].rjust(widths[i]) for i in range(4)]
        )
    ]
    for name in names:
        lines.append(
            "  ".join(
                [name.ljust(name_w)] + [cells[name][i].rjust(widths[i]) for i in range(4)]
            )
        )
    flagged = sum(
        summary["rows"][n]["overlap_degenerate"] + summary["rows"][n]["distance_degenerate"]
        for n in names
    )
    lines.append(f"cases: {summary['cases']}, degenerate flags: {flagged}")
    return "\n".join(lines)
