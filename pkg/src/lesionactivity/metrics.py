"""Lesion-wise evaluation: connected components, LTPR/LFPR, per-lesion dice,
rater fusion, decision-threshold selection, and summary statistics.

A lesion is a maximal 26-connected component of a binary mask. A
ground-truth lesion counts as detected iff it shares at least one voxel
with any predicted component; a predicted component is a false positive iff
it overlaps no ground-truth lesion. Degenerate conventions: with zero
predicted lesions LFPR is 0, and a case with zero ground-truth lesions has
undefined LTPR (excluded from LTPR aggregation).
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .volumes import CONNECTIVITY_26, Volume, filter_small_lesions


@dataclass(frozen=True)
class LesionSet:
    """Connected-component decomposition of a binary mask.

    `labels` assigns each voxel its component id (1..n_components, 0 for
    background). Component ids follow scan order of first appearance.
    """

    labels: np.ndarray
    n_components: int
    spacing: tuple[float, float, float]

    @property
    def shape(self):
        return self.labels.shape

    @property
    def voxel_counts(self) -> np.ndarray:
        """Voxel count per component, index 0 = component id 1."""
        return np.bincount(self.labels.ravel(), minlength=self.n_components + 1)[1:]

    @property
    def components(self) -> list[tuple[int, np.ndarray]]:
        """List of (component id, voxel coordinates as an (n, 3) array)."""
        out = []
        for cid in range(1, self.n_components + 1):
            out.append((cid, np.argwhere(self.labels == cid)))
        return out

    def volumes_ml(self) -> np.ndarray:
        voxel_ml = float(np.prod(self.spacing)) / 1000.0
        return self.voxel_counts * voxel_ml


def connected_components(mask: Volume) -> LesionSet:
    """Decompose a binary label volume into 26-connected components."""
    if mask.kind != "label":
        raise ValueError(f"connected_components expects a label volume, got kind={mask.kind!r}")
    labels, n = ndimage.label(mask.data, structure=CONNECTIVITY_26)
    return LesionSet(labels.astype(np.int32), int(n), mask.spacing)


@dataclass(frozen=True)
class CaseMetrics:
    """Lesion-wise rates for one case.

    `ltpr` is None when the case has no ground-truth lesions (undefined
    ratio). `lesion_dices` holds one dice score per detected ground-truth
    lesion, computed against the union of predicted components that touch it.
    """

    ltpr: float | None
    lfpr: float
    lesion_dices: tuple[float, ...]
    n_gt: int
    n_pred: int
    n_tp: int
    n_fp: int
    case_id: str | None = None

    @property
    def counts(self) -> tuple[int, int, int, int]:
        return (self.n_gt, self.n_pred, self.n_tp, self.n_fp)

    def to_dict(self) -> dict:
        return {
            "case_id": self.case_id,
            "ltpr": self.ltpr,
            "lfpr": self.lfpr,
            "lesion_dices": list(self.lesion_dices),
            "n_gt": self.n_gt,
            "n_pred": self.n_pred,
            "n_tp": self.n_tp,
            "n_fp": self.n_fp,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CaseMetrics":
        return cls(
            ltpr=d["ltpr"], lfpr=d["lfpr"], lesion_dices=tuple(d["lesion_dices"]),
            n_gt=d["n_gt"], n_pred=d["n_pred"], n_tp=d["n_tp"], n_fp=d["n_fp"],
            case_id=d.get("case_id"),
        )


def lesion_rates(pred: LesionSet, gt: LesionSet, case_id: str | None = None) -> CaseMetrics:
    """LTPR, LFPR, and per-lesion dice scores for one prediction/truth pair."""
    if pred.shape != gt.shape:
        raise ValueError(f"prediction and ground truth shapes differ: {pred.shape} vs {gt.shape}")
    n_gt, n_pred = gt.n_components, pred.n_components

    pred_fg = pred.labels > 0
    gt_fg = gt.labels > 0
    # component-id pairs that share at least one voxel
    both = pred_fg & gt_fg
    gt_hit = np.zeros(n_gt + 1, dtype=bool)
    pred_hit = np.zeros(n_pred + 1, dtype=bool)
    gt_hit[np.unique(gt.labels[both])] = True
    pred_hit[np.unique(pred.labels[both])] = True

    n_tp = int(gt_hit[1:].sum())
    n_fp = int(n_pred - pred_hit[1:].sum())
    ltpr = n_tp / n_gt if n_gt > 0 else None
    lfpr = n_fp / n_pred if n_pred > 0 else 0.0

    gt_counts = gt.voxel_counts
    pred_counts = pred.voxel_counts
    dices = []
    for gid in range(1, n_gt + 1):
        if not gt_hit[gid]:
            continue
        in_lesion = gt.labels == gid
        partner_ids = np.unique(pred.labels[in_lesion & pred_fg])
        inter = int((in_lesion & pred_fg).sum())
        union_size = int(pred_counts[partner_ids - 1].sum())
        dices.append(2.0 * inter / (gt_counts[gid - 1] + union_size))
    return CaseMetrics(
        ltpr=ltpr, lfpr=lfpr, lesion_dices=tuple(dices),
        n_gt=n_gt, n_pred=n_pred, n_tp=n_tp, n_fp=n_fp, case_id=case_id,
    )


def case_metrics(pred_mask: Volume, gt_mask: Volume, case_id: str | None = None) -> CaseMetrics:
    """Convenience wrapper: connected components of both masks, then rates."""
    return lesion_rates(connected_components(pred_mask), connected_components(gt_mask), case_id)


def majority_vote(masks) -> Volume:
    """Voxel-wise majority fusion: positive iff strictly more than half agree."""
    masks = list(masks)
    if not masks:
        raise ValueError("majority_vote needs at least one mask")
    ref = masks[0]
    for m in masks[1:]:
        if m.shape != ref.shape:
            raise ValueError(f"mask shapes differ: {m.shape} vs {ref.shape}")
    votes = np.zeros(ref.shape, dtype=np.int32)
    for m in masks:
        votes += m.data
    fused = (2 * votes > len(masks)).astype(np.uint8)
    return ref.with_data(fused, kind="label")


def interrater_pairs(rater_masks, case_id: str | None = None) -> list[CaseMetrics]:
    """Metrics for every ordered rater pair (one rater as prediction, one as truth)."""
    masks = list(rater_masks)
    if len(masks) < 2:
        raise ValueError("interrater comparison needs at least two rater masks")
    sets = [connected_components(m) for m in masks]
    out = []
    for i in range(len(sets)):
        for j in range(len(sets)):
            if i != j:
                out.append(lesion_rates(sets[i], sets[j], case_id=case_id))
    return out


DEFAULT_THRESHOLD_GRID = tuple(np.round(np.arange(0.01, 1.0, 0.01), 2))


def threshold_objective(prob_maps, gt_sets, t: float, *, small_lesion_filter=True,
                        min_volume_ml=0.01) -> float:
    """Mean LTPR + 1 - mean LFPR at decision threshold t.

    Cases without ground-truth lesions are excluded from the LTPR mean.
    """
    ltprs, lfprs = [], []
    for prob, gt_set in zip(prob_maps, gt_sets):
        mask = prob.with_data((prob.data >= t).astype(np.uint8), kind="label")
        if small_lesion_filter:
            mask = filter_small_lesions(mask, min_volume_ml)
        m = lesion_rates(connected_components(mask), gt_set)
        if m.ltpr is not None:
            ltprs.append(m.ltpr)
        lfprs.append(m.lfpr)
    mean_ltpr = float(np.mean(ltprs)) if ltprs else 0.0
    return mean_ltpr + 1.0 - float(np.mean(lfprs))


def select_threshold(prob_maps, gt_masks, thresholds=None, *, small_lesion_filter=True,
                     min_volume_ml=0.01) -> float:
    """Decision threshold maximizing mean(LTPR) + 1 - mean(LFPR) over cases.

    Thresholded masks are small-lesion filtered before the rates are
    computed (mirroring ground-truth preprocessing). Ties break toward the
    larger threshold. Deterministic: no randomness is involved.
    """
    prob_maps = list(prob_maps)
    gt_masks = list(gt_masks)
    if not prob_maps or len(prob_maps) != len(gt_masks):
        raise ValueError("select_threshold needs equally many probability maps and ground-truth masks")
    grid = DEFAULT_THRESHOLD_GRID if thresholds is None else tuple(thresholds)
    if not grid or any(not (0.0 < t < 1.0) for t in grid):
        raise ValueError("thresholds must be a nonempty grid inside (0, 1)")
    gt_sets = [connected_components(g) for g in gt_masks]
    best_t, best_score = None, -np.inf
    for t in sorted(grid):
        score = threshold_objective(
            prob_maps, gt_sets, t,
            small_lesion_filter=small_lesion_filter, min_volume_ml=min_volume_ml,
        )
        if score >= best_score:
            best_t, best_score = t, score
    return float(best_t)


@dataclass(frozen=True)
class MetricSummary:
    mean: float
    p25: float
    p75: float

    def to_dict(self):
        return {"mean": self.mean, "p25": self.p25, "p75": self.p75}


def _summarize(values) -> MetricSummary:
    vals = np.asarray([v for v in values if v is not None], dtype=np.float64)
    if vals.size == 0:
        return MetricSummary(float("nan"), float("nan"), float("nan"))
    p25, p75 = np.percentile(vals, [25.0, 75.0])
    return MetricSummary(float(vals.mean()), float(p25), float(p75))


def aggregate(per_case) -> dict[str, MetricSummary]:
    """Mean and 25th/75th percentiles per metric across cases.

    Per-lesion dice scores are pooled over all cases; LTPR is aggregated
    over cases where it is defined; LFPR over all cases. Percentiles use
    linear interpolation between order statistics.
    """
    per_case = list(per_case)
    if not per_case:
        raise ValueError("aggregate needs at least one case")
    dices = [d for m in per_case for d in m.lesion_dices]
    return {
        "dice": _summarize(dices),
        "ltpr": _summarize([m.ltpr for m in per_case]),
        "lfpr": _summarize([m.lfpr for m in per_case]),
    }


@dataclass
class EvalReport:
    """Per-case metrics plus recomputable aggregates for one model."""

    model: str
    per_case: list[CaseMetrics]
    aggregate: dict[str, MetricSummary] = field(default_factory=dict)
    threshold: float | None = None
    config_hash: str | None = None
    comparisons: list = field(default_factory=list)

    def __post_init__(self):
        if not self.aggregate:
            self.aggregate = aggregate(self.per_case)

    def to_dict(self) -> dict:
        return {
            "model": self.model,
            "threshold": self.threshold,
            "config_hash": self.config_hash,
            "aggregate": {k: v.to_dict() for k, v in self.aggregate.items()},
            "per_case": [m.to_dict() for m in self.per_case],
            "comparisons": [c if isinstance(c, dict) else c.to_dict() for c in self.comparisons],
        }

    def write_json(self, path) -> None:
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=1, sort_keys=True)

    @classmethod
    def from_json(cls, path) -> "EvalReport":
        with open(path) as f:
            d = json.load(f)
        report = cls(
            model=d["model"],
            per_case=[CaseMetrics.from_dict(m) for m in d["per_case"]],
            threshold=d.get("threshold"),
            config_hash=d.get("config_hash"),
            comparisons=d.get("comparisons", []),
        )
        return report

    def csv_rows(self) -> list[dict]:
        """One row per case plus one aggregate row (schema fixed for reports)."""
        rows = []
        for m in self.per_case:
            dice = _summarize(m.lesion_dices)
            rows.append({
                "model": self.model,
                "case_id": m.case_id if m.case_id is not None else "",
                "dice_mean": dice.mean, "dice_p25": dice.p25, "dice_p75": dice.p75,
                "ltpr_mean": m.ltpr, "ltpr_p25": m.ltpr, "ltpr_p75": m.ltpr,
                "lfpr_mean": m.lfpr, "lfpr_p25": m.lfpr, "lfpr_p75": m.lfpr,
                "n_tp": m.n_tp, "n_fp": m.n_fp,
            })
        agg = self.aggregate
        rows.append({
            "model": self.model,
            "case_id": "aggregate",
            "dice_mean": agg["dice"].mean, "dice_p25": agg["dice"].p25, "dice_p75": agg["dice"].p75,
            "ltpr_mean": agg["ltpr"].mean, "ltpr_p25": agg["ltpr"].p25, "ltpr_p75": agg["ltpr"].p75,
            "lfpr_mean": agg["lfpr"].mean, "lfpr_p25": agg["lfpr"].p25, "lfpr_p75": agg["lfpr"].p75,
            "n_tp": sum(m.n_tp for m in self.per_case),
            "n_fp": sum(m.n_fp for m in self.per_case),
        })
        return rows


REPORT_CSV_COLUMNS = [
    "model", "case_id",
    "dice_mean", "dice_p25", "dice_p75",
    "ltpr_mean", "ltpr_p25", "ltpr_p75",
    "lfpr_mean", "lfpr_p25", "lfpr_p75",
    "n_tp", "n_fp",
]
