"""Segmentation metrics with explicit degenerate-case conventions.

Four per-class metrics: DSC (overlap), NSD at a 1 mm threshold and HSD
(both boundary-distance based), and NAVE (relative volume error). A
(prediction, reference) pair for one class is routed by presence:

* class in both          -> four Scored records
* class only in ref      -> false negative: fixed penalty values
                            DSC 0.0, NSD 0.0, HSD 260.0 mm, NAVE 20.0
* class only in pred     -> false positive: records are skip markers and
                            excluded from means
* class in neither       -> true negative: likewise excluded

Boundaries are class voxels 6-adjacent to a non-class voxel (the outside
of the grid counts as non-class); distances are Euclidean in mm between
boundary-voxel centers, without sub-voxel surface meshing.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
from scipy import ndimage

from .dataset import LabelMask

METRIC_DSC = "DSC"
METRIC_NSD = "NSD"
METRIC_HSD = "HSD"
METRIC_NAVE = "NAVE"
METRICS = (METRIC_DSC, METRIC_NSD, METRIC_HSD, METRIC_NAVE)

# Sort direction when ranking models: higher-is-better vs lower-is-better.
METRIC_DIRECTIONS = {
    METRIC_DSC: "desc",
    METRIC_NSD: "desc",
    METRIC_HSD: "asc",
    METRIC_NAVE: "asc",
}

NSD_TAU_MM = 1.0

# Fixed penalties for missed classes: worst-case overlap, a surface
# distance bounding the organ's vertical extent, and a volume error well
# past anything a scored prediction produces.
FN_DEFAULTS = {
    METRIC_DSC: 0.0,
    METRIC_NSD: 0.0,
    METRIC_HSD: 260.0,
    METRIC_NAVE: 20.0,
}

_STRUCT_6 = ndimage.generate_binary_structure(3, 1)


class RecordStatus(str, enum.Enum):
    SCORED = "Scored"
    FN_DEFAULTED = "FNDefaulted"
    FP_SKIPPED = "FPSkipped"
    TN_SKIPPED = "TNSkipped"


# Statuses whose values enter the per-site mean.
INCLUDED_STATUSES = (RecordStatus.SCORED, RecordStatus.FN_DEFAULTED)


@dataclass(frozen=True)
class MetricRecord:
    sample_id: str
    class_id: int
    metric: str
    value: float  # NaN for skip markers
    status: RecordStatus

    @property
    def included(self) -> bool:
        return self.status in INCLUDED_STATUSES


@dataclass(frozen=True)
class MetricSummary:
    site_id: str
    means: dict[str, float]
    n_test: int
    n_classes: int
    included_count: int


def _class_masks(pred: LabelMask, ref: LabelMask, class_id: int) -> tuple[np.ndarray, np.ndarray]:
    if pred.labels.shape != ref.labels.shape:
        raise ValueError(f"mask dims differ: {pred.labels.shape} vs {ref.labels.shape}")
    return pred.labels == class_id, ref.labels == class_id


def _boundary(mask: np.ndarray) -> np.ndarray:
    # Voxels of the set with at least one 6-neighbor outside it; outside the
    # grid counts as outside the set (border_value=0 in the erosion).
    return mask & ~ndimage.binary_erosion(mask, structure=_STRUCT_6, border_value=0)


def _distances_to(boundary: np.ndarray, spacing: Sequence[float]) -> np.ndarray:
    # Distance from every voxel center to the nearest boundary-voxel center.
    return ndimage.distance_transform_edt(~boundary, sampling=spacing)


def dsc(pred: LabelMask, ref: LabelMask, class_id: int) -> float:
    """Dice similarity 2|P&R| / (|P|+|R|) of one class."""
    p, r = _class_masks(pred, ref, class_id)
    np_, nr = int(p.sum()), int(r.sum())
    if np_ + nr == 0:
        raise ValueError("DSC undefined: class absent from both masks")
    return 2.0 * int((p & r).sum()) / (np_ + nr)


def nsd(pred: LabelMask, ref: LabelMask, class_id: int,
        spacing: Sequence[float], tau: float = NSD_TAU_MM) -> float:
    """Normalized surface dice: fraction of boundary voxels of either mask
    lying within ``tau`` mm of the other mask's boundary."""
    p, r = _class_masks(pred, ref, class_id)
    bp, br = _boundary(p), _boundary(r)
    n_bp, n_br = int(bp.sum()), int(br.sum())
    if n_bp + n_br == 0:
        raise ValueError("NSD undefined: both boundaries empty")
    close = 0
    if n_br:
        d_to_pred = (_distances_to(bp, spacing)[br] if n_bp
                     else np.full(n_br, np.inf))
        close += int((d_to_pred <= tau).sum())
    if n_bp:
        d_to_ref = (_distances_to(br, spacing)[bp] if n_br
                    else np.full(n_bp, np.inf))
        close += int((d_to_ref <= tau).sum())
    return close / (n_bp + n_br)


def hsd(pred: LabelMask, ref: LabelMask, class_id: int,
        spacing: Sequence[float]) -> float:
    """Symmetric Hausdorff distance (100th percentile) between boundaries, mm."""
    p, r = _class_masks(pred, ref, class_id)
    bp, br = _boundary(p), _boundary(r)
    if not bp.any() or not br.any():
        raise ValueError("HSD undefined: a boundary is empty")
    d_ref_to_pred = _distances_to(bp, spacing)[br].max()
    d_pred_to_ref = _distances_to(br, spacing)[bp].max()
    return float(max(d_ref_to_pred, d_pred_to_ref))


def hsd95(pred: LabelMask, ref: LabelMask, class_id: int,
          spacing: Sequence[float]) -> float:
    """95th-percentile variant of hsd (not the default anywhere)."""
    p, r = _class_masks(pred, ref, class_id)
    bp, br = _boundary(p), _boundary(r)
    if not bp.any() or not br.any():
        raise ValueError("HSD undefined: a boundary is empty")
    d1 = np.percentile(_distances_to(bp, spacing)[br], 95)
    d2 = np.percentile(_distances_to(br, spacing)[bp], 95)
    return float(max(d1, d2))


def nave(pred: LabelMask, ref: LabelMask, class_id: int,
         spacing: Sequence[float] | None = None) -> float:
    """Relative absolute volume error |V_pred - V_ref| / V_ref.

    The voxel volume cancels, so this is computed from voxel counts;
    ``spacing`` is accepted for interface symmetry.
    """
    p, r = _class_masks(pred, ref, class_id)
    np_, nr = int(p.sum()), int(r.sum())
    if nr == 0:
        raise ValueError("NAVE undefined: class absent from reference")
    return abs(np_ - nr) / nr


def score_pair(pred: LabelMask, ref: LabelMask, class_id: int,
               spacing: Sequence[float]) -> list[MetricRecord]:
    """Score one (prediction, reference, class) pair into four records."""
    p, r = _class_masks(pred, ref, class_id)
    in_pred, in_ref = bool(p.any()), bool(r.any())
    sid = ref.id

    if in_ref and in_pred:
        values = {
            METRIC_DSC: dsc(pred, ref, class_id),
            METRIC_NSD: nsd(pred, ref, class_id, spacing),
            METRIC_HSD: hsd(pred, ref, class_id, spacing),
            METRIC_NAVE: nave(pred, ref, class_id),
        }
        status = RecordStatus.SCORED
    elif in_ref:
        values = dict(FN_DEFAULTS)
        status = RecordStatus.FN_DEFAULTED
    elif in_pred:
        values = {m: float("nan") for m in METRICS}
        status = RecordStatus.FP_SKIPPED
    else:
        values = {m: float("nan") for m in METRICS}
        status = RecordStatus.TN_SKIPPED

    return [MetricRecord(sample_id=sid, class_id=class_id, metric=m,
                         value=values[m], status=status) for m in METRICS]


def write_metrics_csv(path, records_by_model_site: dict[tuple[str, str], list[MetricRecord]],
                      experiment_digest: str | None = None) -> None:
    """Write scoring records as CSV: model,site,sample,class,metric,value,status.

    Skip-marker records keep an empty value field. The model column is what
    lets the ranking stage recover which rows belong to which variant.
    """
    lines = []
    if experiment_digest is not None:
        lines.append(f"# experiment={experiment_digest}")
    lines.append("model,site,sample,class,metric,value,status")
    for (model, site) in sorted(records_by_model_site):
        for rec in records_by_model_site[(model, site)]:
            value = repr(rec.value) if math.isfinite(rec.value) else ""
            lines.append(f"{model},{site},{rec.sample_id},{rec.class_id},"
                         f"{rec.metric},{value},{rec.status.value}")
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")


def read_metrics_csv(path) -> tuple[dict[tuple[str, str], list[MetricRecord]], str | None]:
    """Inverse of :func:`write_metrics_csv`; returns (records, digest)."""
    digest = None
    records: dict[tuple[str, str], list[MetricRecord]] = {}
    with open(path) as f:
        for line in f:
            line = line.rstrip("\n")
            if not line:
                continue
            if line.startswith("# experiment="):
                digest = line.split("=", 1)[1]
                continue
            if line.startswith("model,"):
                continue
            model, site, sample, class_id, metric, value, status = line.split(",")
            rec = MetricRecord(
                sample_id=sample, class_id=int(class_id), metric=metric,
                value=float(value) if value else float("nan"),
                status=RecordStatus(status))
            records.setdefault((model, site), []).append(rec)
    return records, digest


def summarize(records: Iterable[MetricRecord], site_id: str) -> MetricSummary:
    """Per-metric mean over Scored + FNDefaulted records of one site/model."""
    records = list(records)
    included = [rec for rec in records if rec.included]
    if not included:
        raise ValueError(f"site {site_id}: no scorable records")
    means = {}
    for metric in METRICS:
        vals = [rec.value for rec in included if rec.metric == metric]
        if vals:
            means[metric] = math.fsum(vals) / len(vals)
    return MetricSummary(
        site_id=site_id,
        means=means,
        n_test=len({rec.sample_id for rec in records}),
        n_classes=len({rec.class_id for rec in records}),
        included_count=len(included),
    )
