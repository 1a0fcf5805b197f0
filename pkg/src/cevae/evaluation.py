"""Detection and localization metrics plus multi-run aggregation.

Slice-level detection quality is ROC-AUC over per-slice scores. Pixel-level
quality is ROC-AUC over pooled pixels and a Dice score whose binarization
threshold is chosen by patient-stratified k-fold cross-validation: each fold
picks the threshold maximizing its own mean patient-wise Dice, which is then
applied to the remaining folds.
"""

from __future__ import annotations

import json
import statistics
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

METRIC_NAMES = ("slice_roc_auc", "pixel_roc_auc", "dice_mean")


class UndefinedMetricError(ValueError):
    """The metric is undefined for this input (e.g. one-class ROC)."""


@dataclass(frozen=True)
class RunMetrics:
    slice_roc_auc: float
    pixel_roc_auc: float
    dice_mean: float

    def __post_init__(self):
        for name in METRIC_NAMES:
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name}={v} outside [0, 1]")


@dataclass
class EvalReport:
    """Headline metrics (medians), the per-run values, and min/max spread."""

    slice_roc_auc: float
    pixel_roc_auc: float
    dice_mean: float
    per_run: list[RunMetrics]
    aggregate: dict[str, dict[str, float]] = field(default_factory=dict)

    def __post_init__(self):
        if not self.per_run:
            raise ValueError("report needs at least one run")
        expected = _aggregate_stats(self.per_run)
        if not self.aggregate:
            self.aggregate = expected
        elif self.aggregate != expected:
            raise ValueError("aggregate inconsistent with per_run")
        for name in METRIC_NAMES:
            if getattr(self, name) != self.aggregate[name]["median"]:
                raise ValueError(f"headline {name} must equal the per-run median")

    @classmethod
    def from_runs(cls, runs: list[RunMetrics]) -> "EvalReport":
        stats = _aggregate_stats(runs)
        return cls(
            slice_roc_auc=stats["slice_roc_auc"]["median"],
            pixel_roc_auc=stats["pixel_roc_auc"]["median"],
            dice_mean=stats["dice_mean"]["median"],
            per_run=list(runs),
        )


def _lower_median(values: list[float]) -> float:
    return statistics.median_low(values)


def _aggregate_stats(runs: list[RunMetrics]) -> dict[str, dict[str, float]]:
    out = {}
    for name in METRIC_NAMES:
        vals = [getattr(r, name) for r in runs]
        out[name] = {
            "median": _lower_median(vals),
            "min": min(vals),
            "max": max(vals),
        }
    return out


def aggregate_runs(reports: list["EvalReport | RunMetrics"]) -> EvalReport:
    """Pool runs from several reports; medians use the lower-median convention."""
    if not reports:
        raise ValueError("need at least one report")
    runs: list[RunMetrics] = []
    for rep in reports:
        if isinstance(rep, RunMetrics):
            runs.append(rep)
        else:
            runs.extend(rep.per_run)
    return EvalReport.from_runs(runs)


def slice_labels(samples) -> np.ndarray:
    """1 where a slice carries a nonempty annotation, else 0."""
    return np.array([1 if s.is_anomalous else 0 for s in samples], dtype=np.int64)


def roc_auc(scores, labels) -> float:
    """Area under the ROC curve via the rank-sum statistic (midrank ties).

    Equals P(score_pos > score_neg) + 0.5 * P(tie) over all pos/neg pairs.
    """
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel()
    if scores.shape != labels.shape:
        raise ValueError("scores and labels must have equal length")
    if not np.isin(labels, (0, 1)).all():
        raise ValueError("labels must be binary 0/1")
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("ROC-AUC needs both classes present")
    ranks = rankdata(scores, method="average")
    pos_rank_sum = float(ranks[labels == 1].sum())
    return (pos_rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def dice(pred_mask, gt_mask) -> float:
    """2|P∩G| / (|P| + |G|); defined as 1.0 when both masks are empty."""
    pred = np.asarray(pred_mask).astype(bool)
    gt = np.asarray(gt_mask).astype(bool)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    denom = int(pred.sum()) + int(gt.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int((pred & gt).sum()) / denom


class _PatientPixels:
    """Per-patient pooled pixels in a form that answers threshold queries fast.

    For a strict threshold t, |P| and |P∩G| are suffix counts in the sorted
    score arrays, so one searchsorted per query replaces a full scan.
    """

    def __init__(self, scores: np.ndarray, gt: np.ndarray):
        self.sorted_scores = np.sort(scores.ravel())
        gt = gt.ravel().astype(bool)
        self.sorted_pos_scores = np.sort(scores.ravel()[gt])
        self.n_gt = int(gt.sum())

    def dice_at(self, thr: float) -> float:
        n_pred = self.sorted_scores.size - int(
            np.searchsorted(self.sorted_scores, thr, side="right")
        )
        inter = self.sorted_pos_scores.size - int(
            np.searchsorted(self.sorted_pos_scores, thr, side="right")
        )
        denom = n_pred + self.n_gt
        if denom == 0:
            return 1.0
        return 2.0 * inter / denom


def dice_cv(
    score_maps,
    gt_masks,
    patient_ids,
    k: int = 5,
    rng: np.random.Generator | None = None,
    n_thresholds: int = 201,
) -> float:
    """Mean cross-validated patient-wise Dice.

    Patients (never slices) are split into k folds. Each fold sweeps
    thresholds over ``n_thresholds`` evenly spaced quantiles of its own
    pooled scores, keeps the threshold with the best mean patient-wise Dice
    on itself, and is scored by applying that threshold to the other folds.
    Binarization is strict (score > threshold).
    """
    if rng is None:
        rng = np.random.default_rng(0)
    if len(score_maps) != len(gt_masks) or len(score_maps) != len(patient_ids):
        raise ValueError("score_maps, gt_masks and patient_ids must align")

    by_patient: dict[str, list[int]] = {}
    for i, pid in enumerate(patient_ids):
        by_patient.setdefault(pid, []).append(i)
    patients = list(by_patient)
    if len(patients) < k:
        raise ValueError(f"need at least k={k} patients, got {len(patients)}")

    pooled = {}
    for pid, idxs in by_patient.items():
        scores = np.concatenate(
            [np.asarray(score_maps[i], dtype=np.float64).ravel() for i in idxs]
        )
        gt = np.concatenate([np.asarray(gt_masks[i]).ravel() for i in idxs])
        pooled[pid] = _PatientPixels(scores, gt)

    order = [patients[i] for i in rng.permutation(len(patients))]
    folds = [list(chunk) for chunk in np.array_split(np.array(order, dtype=object), k)]

    fold_dices = []
    for f, fold in enumerate(folds):
        fold_scores = np.concatenate([pooled[pid].sorted_scores for pid in fold])
        thresholds = np.quantile(fold_scores, np.linspace(0.0, 1.0, n_thresholds))
        best_thr, best_val = None, -1.0
        for thr in thresholds:
            val = float(np.mean([pooled[pid].dice_at(thr) for pid in fold]))
            if val > best_val:
                best_thr, best_val = float(thr), val
        others = [pid for g, fold_g in enumerate(folds) if g != f for pid in fold_g]
        fold_dices.append(
            float(np.mean([pooled[pid].dice_at(best_thr) for pid in others]))
        )
    return float(np.mean(fold_dices))


def pixel_roc_auc(score_maps, gt_masks, pooling: str = "global") -> float:
    """ROC-AUC over pixels: pooled across all slices, or averaged per slice."""
    if pooling not in ("global", "per_slice"):
        raise ValueError(f"pooling must be 'global' or 'per_slice', got {pooling!r}")
    if pooling == "global":
        scores = np.concatenate(
            [np.asarray(m, dtype=np.float64).ravel() for m in score_maps]
        )
        labels = np.concatenate(
            [(np.asarray(g) != 0).astype(np.int64).ravel() for g in gt_masks]
        )
        return roc_auc(scores, labels)
    aucs = []
    for m, g in zip(score_maps, gt_masks):
        labels = (np.asarray(g) != 0).astype(np.int64).ravel()
        if labels.min() == labels.max():
            continue
        aucs.append(roc_auc(np.asarray(m).ravel(), labels))
    if not aucs:
        raise UndefinedMetricError("no slice has both pixel classes")
    return float(np.mean(aucs))


def evaluate_run(
    samples,
    slice_scores,
    pixel_maps,
    k: int = 5,
    seed: int = 0,
    pooling: str = "global",
) -> RunMetrics:
    """Compute all metrics for one scored test set.

    ``samples`` carry labels and patient ids; slices without an annotation
    count as all-normal pixels.
    """
    if not (len(samples) == len(slice_scores) == len(pixel_maps)):
        raise ValueError("samples, slice_scores and pixel_maps must align")
    labels = slice_labels(samples)
    values = [s.value for s in slice_scores]
    maps = [np.asarray(m.scores if hasattr(m, "scores") else m) for m in pixel_maps]
    masks = [
        s.mask if s.mask is not None else np.zeros_like(maps[i], dtype=np.uint8)
        for i, s in enumerate(samples)
    ]
    pids = [s.patient_id for s in samples]
    return RunMetrics(
        slice_roc_auc=roc_auc(values, labels),
        pixel_roc_auc=pixel_roc_auc(maps, masks, pooling=pooling),
        dice_mean=dice_cv(maps, masks, pids, k=k, rng=np.random.default_rng(seed)),
    )


def report_to_json(report: EvalReport) -> str:
    doc = {
        "slice_roc_auc": report.slice_roc_auc,
        "pixel_roc_auc": report.pixel_roc_auc,
        "dice_mean": report.dice_mean,
        "per_run": [
            {name: getattr(r, name) for name in METRIC_NAMES} for r in report.per_run
        ],
        "aggregate": report.aggregate,
    }
    return json.dumps(doc, indent=2, sort_keys=True)


def report_from_json(text: str) -> EvalReport:
    doc = json.loads(text)
    runs = [RunMetrics(**r) for r in doc["per_run"]]
    return EvalReport(
        slice_roc_auc=doc["slice_roc_auc"],
        pixel_roc_auc=doc["pixel_roc_auc"],
        dice_mean=doc["dice_mean"],
        per_run=runs,
        aggregate=doc["aggregate"],
    )


def render_report_table(report: EvalReport) -> str:
    """Plain-text median/min/max table."""
    lines = [
        f"{'metric':<16} {'median':>8} {'min':>8} {'max':>8}",
        "-" * 42,
    ]
    for name in METRIC_NAMES:
        agg = report.aggregate[name]
        lines.append(
            f"{name:<16} {agg['median']:>8.4f} {agg['min']:>8.4f} {agg['max']:>8.4f}"
        )
    lines.append(f"runs: {len(report.per_run)}")
    return "\n".join(lines)
