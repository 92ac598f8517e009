"""Report serialization and the evaluation figures."""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .metrics import EvalReport  # noqa: E402


def fig_box_subject(report: EvalReport, path):
    dices = [s.dice for s in report.subjects]
    fig, ax = plt.subplots(figsize=(4, 4))
    ax.boxplot([dices], tick_labels=["pipeline"], showmeans=True)
    ax.plot([1] * len(dices), dices, "o", color="crimson", alpha=0.6, markersize=4)
    ax.set_ylabel("Dice by subject")
    ax.set_ylim(-0.02, 1.02)
    ax.grid(axis="y", alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)


def fig_threshold_buckets(report: EvalReport, path):
    below = report.buckets["below"]
    above = report.buckets["at_or_above"]
    fig, axes = plt.subplots(1, 2, figsize=(8, 3.5))
    axes[0].bar(list(above), list(above.values()), color="seagreen")
    axes[0].set_title("subjects with Dice >= t (higher is better)")
    axes[1].bar(list(below), list(below.values()), color="indianred")
    axes[1].set_title("subjects with Dice < t (lower is better)")
    for ax in axes:
        ax.set_xlabel("Dice threshold t")
        ax.set_ylabel("subjects")
        ax.grid(axis="y", alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)


def fig_detection_curve(report: EvalReport, path):
    det = report.detection
    fig, ax = plt.subplots(figsize=(5, 4))
    ax.plot(det.cutoffs, det.f1, "o-", label=f"F1 (AF1={det.af1:.3f})")
    ax.plot(det.cutoffs, det.precision, "s--", label=f"precision (AP={det.ap:.3f})")
    ax.plot(det.cutoffs, det.recall, "^--", label=f"recall (AR={det.ar:.3f})")
    ax.set_xlabel("Dice cutoff")
    ax.set_ylabel("score by lesion")
    ax.set_ylim(-0.02, 1.02)
    ax.legend()
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)


def write_report(report: EvalReport, out_dir, stem: str = "report"):
    """Emit JSON, per-subject CSV, and the three figures; returns the paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {
        "json": out_dir / f"{stem}.json",
        "csv": out_dir / f"{stem}_subjects.csv",
        "box": out_dir / f"{stem}_box_subject.png",
        "buckets": out_dir / f"{stem}_threshold_buckets.png",
        "detection": out_dir / f"{stem}_detection_curve.png",
    }
    report.to_json(paths["json"])
    report.to_csv(paths["csv"])
    fig_box_subject(report, paths["box"])
    fig_threshold_buckets(report, paths["buckets"])
    fig_detection_curve(report, paths["detection"])
    return paths


def compare_reports(a: EvalReport, b: EvalReport, path=None):
    """Per-subject Dice deltas (a minus b) for subjects present in both."""
    b_by_id = {s.subject_id: s for s in b.subjects}
    rows = [
        {"subject_id": s.subject_id, "dice_a": s.dice, "dice_b": b_by_id[s.subject_id].dice,
         "delta": s.dice - b_by_id[s.subject_id].dice}
        for s in a.subjects
        if s.subject_id in b_by_id
    ]
    if path is not None:
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=["subject_id", "dice_a", "dice_b", "delta"])
            writer.writeheader()
            writer.writerows(rows)
    return rows


def summary_text(report: EvalReport) -> str:
    det = report.detection
    lines = [
        f"global Dice     : {report.global_dice:.4f}",
        f"by-subject Dice : {report.means['dice']:.4f} (std {report.stds['dice']:.4f})",
        f"IoU / recall / precision : {report.means['iou']:.4f} / "
        f"{report.means['recall']:.4f} / {report.means['precision']:.4f}",
        f"surface Dice    : {report.means['surface_dice']:.4f}",
        f"detection AP/AR/AF1 : {det.ap:.4f} / {det.ar:.4f} / {det.af1:.4f} "
        f"({det.n_pred} predicted vs {det.n_gt} true lesions)",
    ]
    if report.localization_n:
        lines.append(
            f"localization    : {report.localization_mean_mm:.2f} mm "
            f"(std {report.localization_std_mm:.2f}, n={report.localization_n})"
        )
    else:
        lines.append("localization    : no matched lesions at the reporting cutoff")
    return "\n".join(lines)
