"""Command line: ``asd generate|train|score|evaluate|report``.

Exit codes: 0 success, 2 validation failure, 3 numeric failure, 4 I/O error.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import pipeline
from .autoencoder import ModelError, TrainingDiverged
from .dataset import DatasetError, validate_split
from .evaluation import EvaluationError
from .scoring import ScoringError
from .synthgen import DEFAULT_MACHINES, generate_corpus, load_machine_specs, seven_machine_specs

EXIT_OK, EXIT_VALIDATION, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4
PROFILE_CHOICES = ("dev", "add", "eval", "ci", "development", "additional_training", "evaluation")

log = logging.getLogger("asd")


def _config(args) -> pipeline.RunConfig:
    overrides = {
        "root": args.root, "out": args.out, "mode": getattr(args, "mode", None),
        "p": getattr(args, "p", None), "profile": getattr(args, "profile", None),
        "seeds": ",".join(map(str, args.seed)) if getattr(args, "seed", None) else None,
    }
    if args.config:
        return pipeline.RunConfig.load(args.config, **overrides)
    return pipeline.RunConfig.loads("", **overrides)


def cmd_generate(args) -> int:
    if args.spec:
        specs = load_machine_specs(args.spec)
    elif args.machines == "seven":
        specs = seven_machine_specs()
    else:
        specs = DEFAULT_MACHINES
    root = args.root or "data"
    catalog, truth = generate_corpus(specs, root, args.profile or "dev", overwrite=args.overwrite)
    problems = validate_split(catalog, args.profile or "dev")
    for v in problems:
        log.error("%s", v)
    print(f"wrote {sum(1 for _ in catalog.entries())} clips for {len(catalog.machines)} machines under {root}")
    return EXIT_VALIDATION if problems else EXIT_OK


def cmd_train(args) -> int:
    cfg = _config(args)
    written = pipeline.run_train(cfg, pipeline.JsonLog(Path(cfg.out) / "log.jsonl"))
    for path in written:
        print(path)
    return EXIT_OK


def cmd_score(args) -> int:
    cfg = _config(args)
    for path in pipeline.run_score(cfg, pipeline.JsonLog(Path(cfg.out) / "log.jsonl")):
        print(path)
    return EXIT_OK


def cmd_evaluate(args) -> int:
    cfg = _config(args)
    reports = pipeline.run_evaluate(cfg, pipeline.JsonLog(Path(cfg.out) / "log.jsonl"))
    for seed, report in zip(cfg.seeds, reports):
        print(f"seed {seed}: official score {report.official_score:.4f}")
    return EXIT_OK


def cmd_report(args) -> int:
    if args.reports:
        paths = args.reports
        title, prefix = "", args.out and Path(args.out) / "summary"
    else:
        cfg = _config(args)
        paths = pipeline.trial_reports(cfg)
        title = f"Results with {cfg.mode} mode"
        prefix = Path(cfg.out) / f"summary_{cfg.mode}"
    print(pipeline.run_report(paths, prefix, title), end="")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="asd", description="First-shot anomalous sound detection baseline")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, run=True):
        p.add_argument("--config", help="flat key = value run configuration")
        p.add_argument("--root", help="dataset root")
        p.add_argument("--out", help="run output directory")
        if run:
            p.add_argument("--mode", choices=("simple", "mahalanobis"))
            p.add_argument("--seed", type=int, action="append", help="trial seed (repeatable)")
            p.add_argument("--p", type=float, help="pAUC false-positive-rate bound")
            p.add_argument("--profile", choices=PROFILE_CHOICES)

    g = sub.add_parser("generate", help="write a synthetic corpus")
    g.add_argument("--root", help="corpus destination")
    g.add_argument("--profile", choices=PROFILE_CHOICES, default="dev")
    g.add_argument("--spec", help="machine spec file ([machine] sections of key = value)")
    g.add_argument("--machines", choices=("default", "seven"), default="default")
    g.add_argument("--overwrite", action="store_true")
    g.set_defaults(func=cmd_generate)

    for name, func, text in (("train", cmd_train, "train one model per machine/section"),
                             ("score", cmd_score, "write anomaly-score and decision CSVs"),
                             ("evaluate", cmd_evaluate, "AUC / pAUC / official score per trial")):
        p = sub.add_parser(name, help=text)
        common(p)
        p.set_defaults(func=func)

    r = sub.add_parser("report", help="mean ± std table over trials")
    common(r)
    r.add_argument("reports", nargs="*", help="trial report.csv files (default: the config's seeds)")
    r.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except TrainingDiverged as exc:
        log.error("numeric failure: %s", exc)
        return EXIT_NUMERIC
    except (DatasetError, EvaluationError, ScoringError, ModelError) as exc:
        log.error("%s", exc)
        return EXIT_VALIDATION
    except OSError as exc:
        log.error("I/O error: %s", exc)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
