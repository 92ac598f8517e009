"""Segmentation, detection, and localization metrics.

Conventions (the undefined ratios):
  * a subject whose ground truth AND prediction are both empty scores 1.0 on
    every voxel metric (including surface Dice);
  * any other undefined ratio (e.g. precision with zero predicted voxels
    against a nonempty ground truth) scores 0.0;
  * detection precision/recall follow the same rule at lesion level.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
from scipy import ndimage

from .fusion import LesionInstance, extract_lesions

DETECTION_CUTOFFS = tuple(round(0.1 * k, 1) for k in range(1, 10))
LOW_BUCKETS = (0.1, 0.2, 0.3, 0.4, 0.5)
HIGH_BUCKETS = (0.5, 0.6, 0.7)


@dataclass
class SubjectScores:
    subject_id: str
    dice: float
    iou: float
    recall: float
    precision: float
    surface_dice: float


@dataclass
class DetectionCurve:
    cutoffs: list
    precision: list
    recall: list
    f1: list
    ap: float
    ar: float
    af1: float
    n_gt: int
    n_pred: int


@dataclass
class EvalReport:
    global_dice: float
    subjects: list                      # SubjectScores
    means: dict
    stds: dict
    detection: DetectionCurve
    localization_mean_mm: float | None
    localization_std_mm: float | None
    localization_n: int
    buckets: dict
    pooled_counts: dict                 # tp/fp/fn so global_dice is recomputable
    meta: dict = field(default_factory=dict)

    def to_json(self, path=None) -> str:
        doc = asdict(self)
        text = json.dumps(doc, indent=2)
        if path is not None:
            Path(path).write_text(text)
        return text

    @classmethod
    def from_json(cls, path):
        doc = json.loads(Path(path).read_text())
        doc["subjects"] = [SubjectScores(**s) for s in doc["subjects"]]
        doc["detection"] = DetectionCurve(**doc["detection"])
        return cls(**doc)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["subject_id", "dice", "iou", "recall", "precision",
                             "surface_dice"])
            for s in self.subjects:
                writer.writerow([s.subject_id, s.dice, s.iou, s.recall, s.precision,
                                 s.surface_dice])


def _counts(pred, gt):
    pred = np.asarray(pred) > 0
    gt = np.asarray(gt) > 0
    tp = int(np.logical_and(pred, gt).sum())
    fp = int(pred.sum()) - tp
    fn = int(gt.sum()) - tp
    return tp, fp, fn


def _ratio(num, den, both_empty):
    if den == 0:
        return 1.0 if both_empty else 0.0
    return num / den


def global_dice(pairs) -> float:
    """Dice over voxel counts pooled across all (pred, gt) pairs."""
    tp = fp = fn = 0
    for pred, gt in pairs:
        t, p, n = _counts(pred, gt)
        tp, fp, fn = tp + t, fp + p, fn + n
    return _ratio(2 * tp, 2 * tp + fp + fn, both_empty=(tp + fp + fn == 0))


def subject_scores(pred, gt, spacing=(1.0, 1.0, 1.0), tolerance_mm: float = 1.5,
                   subject_id: str = "") -> SubjectScores:
    tp, fp, fn = _counts(pred, gt)
    both_empty = tp + fp + fn == 0
    return SubjectScores(
        subject_id=subject_id,
        dice=_ratio(2 * tp, 2 * tp + fp + fn, both_empty),
        iou=_ratio(tp, tp + fp + fn, both_empty),
        recall=_ratio(tp, tp + fn, both_empty),
        precision=_ratio(tp, tp + fp, both_empty),
        surface_dice=surface_dice(pred, gt, tolerance_mm, spacing),
    )


def boundary_voxels(mask: np.ndarray) -> np.ndarray:
    """Foreground voxels with a background 6-neighbor (outside counts as background)."""
    mask = np.asarray(mask) > 0
    padded = np.pad(mask, 1)
    interior = np.ones_like(mask)
    for axis in range(3):
        lo = np.take(padded, range(0, mask.shape[axis]), axis=axis)
        hi = np.take(padded, range(2, mask.shape[axis] + 2), axis=axis)
        sl = [slice(1, -1)] * 3
        sl[axis] = slice(None)
        interior &= lo[tuple(sl)] & hi[tuple(sl)]
    return mask & ~interior


def _within_tolerance(src_boundary, dst_boundary, tol_sq, spacing):
    """How many boundary voxels of src lie within tolerance of dst's boundary."""
    n_src = int(src_boundary.sum())
    if n_src == 0:
        return 0
    if not dst_boundary.any():
        return 0
    _, idx = ndimage.distance_transform_edt(
        ~dst_boundary, sampling=spacing, return_indices=True
    )
    src_pts = np.argwhere(src_boundary)
    nearest = idx[:, src_pts[:, 0], src_pts[:, 1], src_pts[:, 2]].T
    delta = (src_pts - nearest) * np.asarray(spacing, dtype=np.float64)
    d_sq = (delta**2).sum(axis=1)
    return int((d_sq <= tol_sq).sum())


def surface_dice(pred, gt, tolerance_mm: float = 1.5, spacing=(1.0, 1.0, 1.0)) -> float:
    """Fraction of boundary elements within tolerance of the other boundary.

    Boundary elements are foreground voxels facing background under
    6-connectivity; distances are Euclidean on the spacing grid and compared
    as squared values so the brute-force pairwise oracle agrees exactly.
    """
    bp = boundary_voxels(pred)
    bg = boundary_voxels(gt)
    n_p, n_g = int(bp.sum()), int(bg.sum())
    if n_p == 0 and n_g == 0:
        return 1.0
    tol_sq = float(tolerance_mm) ** 2
    hit_p = _within_tolerance(bp, bg, tol_sq, spacing)
    hit_g = _within_tolerance(bg, bp, tol_sq, spacing)
    return (hit_p + hit_g) / (n_p + n_g)


def _pairwise_dice(a: LesionInstance, b: LesionInstance) -> float:
    lo = np.maximum(a.bbox_min, b.bbox_min)
    hi = np.minimum(a.bbox_max, b.bbox_max)
    if np.any(lo > hi):
        return 0.0
    sa = {tuple(v) for v in a.voxels}
    inter = sum(1 for v in b.voxels if tuple(v) in sa)
    return 2 * inter / (a.n_voxels + b.n_voxels)


def match_lesions(pred_lesions, gt_lesions):
    """Greedy one-to-one matching by descending pairwise Dice.

    Returns a list of (pred_idx, gt_idx, dice) for matched pairs with
    dice > 0, deterministically tie-broken by index order.
    """
    scored = []
    for i, p in enumerate(pred_lesions):
        for j, g in enumerate(gt_lesions):
            d = _pairwise_dice(p, g)
            if d > 0:
                scored.append((d, i, j))
    scored.sort(key=lambda t: (-t[0], t[1], t[2]))
    used_p, used_g, matches = set(), set(), []
    for d, i, j in scored:
        if i in used_p or j in used_g:
            continue
        used_p.add(i)
        used_g.add(j)
        matches.append((i, j, d))
    return matches


def detection_curve(pred_lesions, gt_lesions, cutoffs=DETECTION_CUTOFFS) -> DetectionCurve:
    """Precision/recall/F1 per Dice cutoff; a match is a TP where dice >= cutoff."""
    matches = match_lesions(pred_lesions, gt_lesions)
    n_pred, n_gt = len(pred_lesions), len(gt_lesions)
    both_empty = n_pred == 0 and n_gt == 0
    precision, recall, f1 = [], [], []
    for t in cutoffs:
        tp = sum(1 for _, _, d in matches if d >= t)
        p = _ratio(tp, n_pred, both_empty)
        r = _ratio(tp, n_gt, both_empty)
        precision.append(p)
        recall.append(r)
        f1.append(_ratio(2 * p * r, p + r, both_empty) if (p + r) > 0 or both_empty else 0.0)
    return DetectionCurve(
        cutoffs=list(cutoffs),
        precision=precision,
        recall=recall,
        f1=f1,
        ap=float(np.mean(precision)),
        ar=float(np.mean(recall)),
        af1=float(np.mean(f1)),
        n_gt=n_gt,
        n_pred=n_pred,
    )


def localization_error(pred_lesions, gt_lesions, reporting_cutoff: float = 0.5):
    """Centroid distances (mm) of pairs detected at the reporting cutoff.

    Returns (mean, std, n); mean and std are None when nothing matched.
    """
    matches = match_lesions(pred_lesions, gt_lesions)
    dists = [
        float(np.linalg.norm(pred_lesions[i].centroid_mm - gt_lesions[j].centroid_mm))
        for i, j, d in matches
        if d >= reporting_cutoff
    ]
    if not dists:
        return None, None, 0
    return float(np.mean(dists)), float(np.std(dists)), len(dists)


def threshold_buckets(dices, low=LOW_BUCKETS, high=HIGH_BUCKETS) -> dict:
    """Subject counts strictly below each low cutoff and at-or-above each high one."""
    dices = np.asarray(list(dices), dtype=float)
    return {
        "below": {f"{t:.1f}": int((dices < t).sum()) for t in low},
        "at_or_above": {f"{t:.1f}": int((dices >= t).sum()) for t in high},
    }


def evaluate_cases(entries, tolerance_mm: float = 1.5, connectivity: int = 26,
                   reporting_cutoff: float = 0.5, meta=None) -> EvalReport:
    """Full protocol over (subject_id, pred_mask, gt_mask, spacing) entries.

    Detection pools lesions across subjects (each subject matched
    independently, counts summed); voxel metrics report per subject plus the
    pooled global Dice.
    """
    subjects = []
    tp = fp = fn = 0
    all_matches, n_pred_total, n_gt_total = [], 0, 0
    loc_dists = []
    for subject_id, pred, gt, spacing in entries:
        subjects.append(subject_scores(pred, gt, spacing, tolerance_mm, subject_id))
        t, p, n = _counts(pred, gt)
        tp, fp, fn = tp + t, fp + p, fn + n
        pl = extract_lesions(pred, connectivity, spacing)
        gl = extract_lesions(gt, connectivity, spacing)
        n_pred_total += len(pl)
        n_gt_total += len(gl)
        matches = match_lesions(pl, gl)
        all_matches.extend(d for _, _, d in matches)
        loc_dists.extend(
            float(np.linalg.norm(pl[i].centroid_mm - gl[j].centroid_mm))
            for i, j, d in matches
            if d >= reporting_cutoff
        )

    both_empty = n_pred_total == 0 and n_gt_total == 0
    precision, recall, f1 = [], [], []
    for t in DETECTION_CUTOFFS:
        k = sum(1 for d in all_matches if d >= t)
        p = _ratio(k, n_pred_total, both_empty)
        r = _ratio(k, n_gt_total, both_empty)
        precision.append(p)
        recall.append(r)
        f1.append(_ratio(2 * p * r, p + r, both_empty) if (p + r) > 0 or both_empty else 0.0)
    detection = DetectionCurve(
        cutoffs=list(DETECTION_CUTOFFS), precision=precision, recall=recall, f1=f1,
        ap=float(np.mean(precision)), ar=float(np.mean(recall)), af1=float(np.mean(f1)),
        n_gt=n_gt_total, n_pred=n_pred_total,
    )

    fields = ("dice", "iou", "recall", "precision", "surface_dice")
    means = {f: float(np.mean([getattr(s, f) for s in subjects])) for f in fields}
    stds = {f: float(np.std([getattr(s, f) for s in subjects])) for f in fields}
    loc_mean = float(np.mean(loc_dists)) if loc_dists else None
    loc_std = float(np.std(loc_dists)) if loc_dists else None
    return EvalReport(
        global_dice=_ratio(2 * tp, 2 * tp + fp + fn, both_empty=(tp + fp + fn == 0)),
        subjects=subjects,
        means=means,
        stds=stds,
        detection=detection,
        localization_mean_mm=loc_mean,
        localization_std_mm=loc_std,
        localization_n=len(loc_dists),
        buckets=threshold_buckets([s.dice for s in subjects]),
        pooled_counts={"tp": tp, "fp": fp, "fn": fn},
        meta=dict(meta or {}),
    )
