"""Command-line orchestration: phantom, train, infer, evaluate, report.

Exit codes: 0 ok, 2 configuration error, 3 missing dependency, 4 numerical
failure. Every artifact directory receives a sidecar meta JSON recording the
config hash and seed that produced it.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import nifti, phantom, report as report_mod, train as train_mod
from .config import PipelineConfig
from .errors import ConfigError, DependencyError, NumericalError
from .metrics import EvalReport, evaluate_cases
from .pipeline import BUNDLE_FILES, NetworkBundle, prepare_case, run_pipeline
from .volume import load_case

log = logging.getLogger("lesionseg")

STAGES = ("1", "2-arterial", "2-delay", "2-venous", "2-threephase", "3-fusion", "3-refiner")

_STAGE_FILES = {
    "1": BUNDLE_FILES["stage1"],
    "2-arterial": BUNDLE_FILES["arterial"],
    "2-delay": BUNDLE_FILES["delay"],
    "2-venous": BUNDLE_FILES["venous"],
    "2-threephase": BUNDLE_FILES["threephase"],
    "3-fusion": BUNDLE_FILES["fusion"],
    "3-refiner": BUNDLE_FILES["refiner"],
}


def _write_meta(path, cfg: PipelineConfig, extra=None):
    doc = {"config_hash": cfg.content_hash(), "seed": cfg.seed}
    doc.update(extra or {})
    Path(path).write_text(json.dumps(doc, indent=2))


def _load_config(args) -> PipelineConfig:
    cfg = PipelineConfig.from_json(args.config) if args.config else PipelineConfig()
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    return cfg


def _prepared_cases(manifest_path, cfg: PipelineConfig):
    entries = nifti.load_manifest(manifest_path)
    return [
        prepare_case(load_case(e), cfg.target_spacing, cfg.clip_lo, cfg.clip_hi)
        for e in entries
    ]


def cmd_phantom(args) -> int:
    spec = phantom.PhantomSpec(
        shape=(args.size,) * 3,
        lesion_count_range=tuple(args.lesion_count),
        lesion_diameter_range_mm=tuple(args.lesion_diameters),
    )
    train_m, test_m = phantom.generate_dataset(spec, args.train, args.test, args.seed,
                                               args.out)
    print(f"wrote {args.train} train / {args.test} test cases under {args.out}")
    print(f"manifests: {train_m} {test_m}")
    return 0


def _require(bundle_dir: Path, stage: str, names):
    missing = [n for n in names if not (bundle_dir / _STAGE_FILES[n]).exists()]
    if missing:
        raise DependencyError(
            f"stage {stage} needs checkpoints for stage(s) {missing} in {bundle_dir}; "
            f"train those first"
        )


def cmd_train(args) -> int:
    cfg = _load_config(args)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    bundle_dir = Path(args.bundle_dir) if args.bundle_dir else out_dir
    cases = _prepared_cases(args.data, cfg)
    stage = args.stage

    if stage == "1":
        model, history = train_mod.train_stage1(
            cases, cfg.flagger_config(), cfg.train_config(stage1=True)
        )
        kind = "flagger"
    elif stage.startswith("2-"):
        _require(bundle_dir, stage, ["1"])
        flagger, _, _ = train_mod.load_checkpoint(bundle_dir / _STAGE_FILES["1"], cfg.device)
        variant = stage[2:]
        model, history = train_mod.train_stage2(
            cases, variant, flagger, cfg.seg_config(variant), cfg.train_config()
        )
        kind = "segmenter"
    elif stage == "3-fusion":
        _require(bundle_dir, stage, ["1", "2-arterial", "2-delay", "2-venous",
                                     "2-threephase"])
        flagger, _, _ = train_mod.load_checkpoint(bundle_dir / _STAGE_FILES["1"], cfg.device)
        segs = {
            v: train_mod.load_checkpoint(bundle_dir / _STAGE_FILES[f"2-{v}"], cfg.device)[0]
            for v in train_mod.VARIANTS
        }
        model, history = train_mod.train_fusion(
            cases, flagger, segs, cfg.fusion_config(), cfg.train_config(),
            window=cfg.window, overlap=cfg.overlap,
        )
        kind = "fusion"
    elif stage == "3-refiner":
        model, history = train_mod.train_refiner(
            cases, cfg.refiner_config(), cfg.train_config(),
            margin=cfg.margin, connectivity=cfg.connectivity,
        )
        kind = "refiner"
    else:
        raise ConfigError(f"unknown stage {stage!r}; choose from {STAGES}")

    ckpt = out_dir / _STAGE_FILES[stage]
    meta = {"config_hash": cfg.content_hash(), "seed": cfg.seed, "stage": stage}
    train_mod.save_checkpoint(ckpt, model, kind, meta)
    train_mod.save_history(out_dir / f"{ckpt.stem}_history.json", history)
    _write_meta(out_dir / f"{ckpt.stem}.meta.json", cfg, {"stage": stage,
                                                          "final_loss": history[-1]["loss"]})
    print(f"stage {stage}: {len(history)} steps, final loss {history[-1]['loss']:.4f}")
    print(f"checkpoint: {ckpt}")
    return 0


def cmd_infer(args) -> int:
    cfg = _load_config(args)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    bundle = NetworkBundle.load(args.bundle, cfg.device)
    entries = nifti.load_manifest(args.manifest)
    for entry in entries:
        case = prepare_case(load_case(entry), cfg.target_spacing, cfg.clip_lo, cfg.clip_hi)
        outputs = run_pipeline(
            case, bundle, window=cfg.window, overlap=cfg.overlap, w_min=cfg.w_min,
            threshold=cfg.threshold, margin=cfg.margin, connectivity=cfg.connectivity,
            stop_after=args.stop_after, device=cfg.device,
        )
        sid = entry["subject_id"]
        nifti.save_volume(out_dir / f"{sid}_mask.nii.gz", outputs.final_mask, case.spacing)
        if args.keep_intermediates:
            nifti.save_volume(out_dir / f"{sid}_heatmap.nii.gz", outputs.heatmap,
                              case.spacing)
            for variant, prob in outputs.stage2_probs.items():
                nifti.save_volume(out_dir / f"{sid}_stage2_{variant}.nii.gz", prob,
                                  case.spacing)
            if outputs.fusion_prob is not None:
                nifti.save_volume(out_dir / f"{sid}_fusion.nii.gz", outputs.fusion_prob,
                                  case.spacing)
            if outputs.refined_prob is not None:
                nifti.save_volume(out_dir / f"{sid}_refined.nii.gz", outputs.refined_prob,
                                  case.spacing)
        print(f"{sid}: mask written")
    _write_meta(out_dir / "infer.meta.json", cfg,
                {"bundle": str(args.bundle), "stop_after": args.stop_after})
    return 0


def _evaluate_dir(pred_dir: Path, manifest, cfg: PipelineConfig):
    entries = nifti.load_manifest(manifest)
    pairs, skipped = [], []
    for entry in entries:
        sid = entry["subject_id"]
        pred_path = pred_dir / f"{sid}_mask.nii.gz"
        if not pred_path.exists():
            skipped.append(sid)
            continue
        case = prepare_case(load_case(entry), cfg.target_spacing, cfg.clip_lo, cfg.clip_hi)
        pred, _ = nifti.load_volume(pred_path)
        if pred.shape != case.mask.shape:
            skipped.append(sid)
            continue
        pairs.append((sid, pred, case.mask, case.spacing))
    if skipped:
        log.warning("excluded subjects (missing or mismatched predictions): %s", skipped)
    return pairs, skipped


def cmd_evaluate(args) -> int:
    cfg = _load_config(args)
    out_dir = Path(args.out)
    pairs, skipped = _evaluate_dir(Path(args.pred), args.gt, cfg)
    if not pairs:
        raise DependencyError(f"no evaluable subjects found in {args.pred}")
    rep = evaluate_cases(pairs, tolerance_mm=args.tolerance, connectivity=cfg.connectivity,
                         meta={"pred_dir": str(args.pred), "excluded": skipped,
                               "config_hash": cfg.content_hash(), "seed": cfg.seed})
    paths = report_mod.write_report(rep, out_dir)
    print(report_mod.summary_text(rep))
    if args.compare:
        pairs_b, _ = _evaluate_dir(Path(args.compare), args.gt, cfg)
        rep_b = evaluate_cases(pairs_b, tolerance_mm=args.tolerance,
                               connectivity=cfg.connectivity)
        rows = report_mod.compare_reports(rep, rep_b, out_dir / "comparison.csv")
        mean_delta = float(np.mean([r["delta"] for r in rows])) if rows else 0.0
        print(f"comparison vs {args.compare}: mean per-subject Dice delta {mean_delta:+.4f}")
    print(f"report: {paths['json']}")
    return 0


def cmd_report(args) -> int:
    rep = EvalReport.from_json(args.report)
    out_dir = Path(args.out)
    report_mod.write_report(rep, out_dir)
    print(report_mod.summary_text(rep))
    if args.compare:
        rep_b = EvalReport.from_json(args.compare)
        report_mod.compare_reports(rep, rep_b, out_dir / "comparison.csv")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lesionseg",
                                     description="multi-phase lesion segmentation pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom", help="generate a synthetic multi-phase dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--train", type=int, default=8)
    p.add_argument("--test", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--lesion-count", type=int, nargs=2, default=(1, 3))
    p.add_argument("--lesion-diameters", type=float, nargs=2, default=(8.0, 20.0))
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("train", help="train one stage")
    p.add_argument("--stage", required=True, choices=STAGES)
    p.add_argument("--data", required=True, help="training manifest JSON")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--bundle-dir", default=None,
                   help="where prerequisite checkpoints live (default: --out-dir)")
    p.add_argument("--config", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="run the full pipeline on a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--bundle", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--stop-after", choices=["stage2"], default=None)
    p.add_argument("--keep-intermediates", action="store_true")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("evaluate", help="score predictions against a manifest")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--compare", default=None, help="second prediction dir for deltas")
    p.add_argument("--tolerance", type=float, default=1.5)
    p.add_argument("--config", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("report", help="re-emit figures and summary from a report JSON")
    p.add_argument("--report", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--compare", default=None)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except DependencyError as exc:
        print(f"dependency error: {exc}", file=sys.stderr)
        return 3
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
