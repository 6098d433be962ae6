"""Command-line entry points.

Subcommands: synth, landmarks, predict, loocv, report.  Exit codes:
0 success, 2 configuration error, 3 data error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import asdict
from pathlib import Path

from .config import PipelineConfig, load_config
from .errors import ConfigError, DataError, InvalidInputError, NumericalError
from .pipeline import (compute_landmarks, emit_report, load_report,
                       predict_subject, run_loocv)
from .synth import CohortSpec, generate_cohort, write_cohort

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERICAL = 4


def _load_cohort_spec(path) -> CohortSpec:
    try:
        data = json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read cohort spec {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"cohort spec {path} is not valid JSON: {exc}") from exc
    for key in ("dims", "spacing", "roi_center", "roi_semi_axes"):
        if key in data:
            data[key] = tuple(data[key])
    try:
        return CohortSpec(**data)
    except (TypeError, InvalidInputError) as exc:
        raise ConfigError(f"bad cohort spec: {exc}") from exc


def _pipeline_config(args) -> PipelineConfig:
    cfg = load_config(args.config)
    overrides = {}
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if getattr(args, "threads", None) is not None:
        overrides["threads"] = args.threads
    if getattr(args, "out", None) is not None:
        overrides["out_dir"] = str(args.out)
    if getattr(args, "strategy", None) is not None:
        overrides["strategy"] = args.strategy
    if overrides:
        data = cfg.to_dict()
        data.update(overrides)
        cfg = PipelineConfig.from_dict(data)
    return cfg


def _cmd_synth(args) -> int:
    spec = _load_cohort_spec(args.config)
    if args.seed is not None:
        spec.seed = args.seed
    cohort = generate_cohort(spec)
    manifest = write_cohort(cohort, args.out)
    print(f"wrote {cohort.n} subjects to {manifest}")
    return EXIT_OK


def _cmd_landmarks(args) -> int:
    cfg = _pipeline_config(args)
    result = compute_landmarks(cfg)
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "landmarks.json"
    path.write_text(json.dumps(result, sort_keys=True, indent=2) + "\n")
    for roi, entry in result.items():
        print(f"{roi}: {len(entry['landmarks'])} landmarks "
              f"(threshold {entry['threshold']:.4f})")
    print(f"wrote {path}")
    return EXIT_OK


def _cmd_predict(args) -> int:
    cfg = _pipeline_config(args)
    result = predict_subject(cfg, args.subject)
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / f"prediction_sub{args.subject:03d}.json"
    path.write_text(json.dumps(result, sort_keys=True, indent=2) + "\n")
    for roi, arms in result["rois"].items():
        for arm, metrics in arms.items():
            if metrics["mae"] is not None:
                print(f"{roi}/{arm}: MAE {metrics['mae']:.5f} "
                      f"Pearson {metrics['pearson']:.4f}")
    print(f"wrote {path}")
    return EXIT_OK


def _cmd_loocv(args) -> int:
    cfg = _pipeline_config(args)
    report = run_loocv(cfg)
    paths = emit_report(report, cfg.out_dir)
    for roi, entry in report.rois.items():
        for arm, metrics in entry["arms"].items():
            print(f"{roi}/{arm}: accuracy {metrics['accuracy']:.4f}")
    print(f"wrote {paths['report']}")
    return EXIT_OK


def _cmd_report(args) -> int:
    report = load_report(args.report)
    paths = emit_report(report, args.out)
    print(f"wrote {paths['metrics']}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="patchtraj",
        description="Predict follow-up patch evolution from baseline volumes "
                    "and classify subjects from the predicted trajectories.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_synth = sub.add_parser("synth", help="generate a synthetic cohort")
    p_synth.add_argument("--config", required=True, help="cohort spec JSON")
    p_synth.add_argument("--out", required=True, help="output dataset directory")
    p_synth.add_argument("--seed", type=int, default=None)
    p_synth.set_defaults(func=_cmd_synth)

    def _run_args(p, needs_subject=False):
        p.add_argument("--config", required=True, help="pipeline config JSON")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--threads", type=int, default=None)
        p.add_argument("--out", default=None, help="override output directory")
        p.add_argument("--strategy", choices=["sas", "mkml", "baseline", "all"],
                       default=None)
        if needs_subject:
            p.add_argument("--subject", type=int, required=True)

    p_lm = sub.add_parser("landmarks", help="write the landmark list per ROI")
    _run_args(p_lm)
    p_lm.set_defaults(func=_cmd_landmarks)

    p_pred = sub.add_parser("predict", help="predict one held-out subject's follow-up")
    _run_args(p_pred, needs_subject=True)
    p_pred.set_defaults(func=_cmd_predict)

    p_loocv = sub.add_parser("loocv", help="run the full leave-one-out evaluation")
    _run_args(p_loocv)
    p_loocv.set_defaults(func=_cmd_loocv)

    p_rep = sub.add_parser("report", help="re-emit CSV outputs from a saved report")
    p_rep.add_argument("--report", required=True, help="saved report.json")
    p_rep.add_argument("--out", required=True, help="output directory")
    p_rep.set_defaults(func=_cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericalError, InvalidInputError) as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
