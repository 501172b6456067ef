"""Command-line entry point: ``privspeech <subcommand> [options]``.

Every subcommand accepts ``--config FILE`` (JSON) plus repeated
``--set section.key=value`` overrides. Failures print a single line
``error:<category>: <message>`` to stderr and exit nonzero.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import accountant, config as config_mod, pipeline
from .config import ConfigError, RunConfig
from .datamodel import InsufficientDataError
from .distill import MissingTeacherProbability, OneShotViolation, QueryModeError
from .dpsgd import ClippingViolation, NonFiniteUpdateError
from .features import FrontEndError
from .model import ShapeError

# (exception types, category, exit code); first match wins
ERROR_CATEGORIES = (
    ((OneShotViolation,), "one-shot", 4),
    ((pipeline.ReleaseError,), "release", 5),
    ((ConfigError,), "config", 2),
    ((InsufficientDataError, FrontEndError, MissingTeacherProbability, QueryModeError, ShapeError), "data", 6),
    ((NonFiniteUpdateError, ClippingViolation), "numeric", 7),
    ((FileNotFoundError, OSError), "io", 3),
    ((ValueError,), "invalid", 8),
)


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON run configuration (defaults apply to missing keys)")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config value, e.g. privacy.sigma=3")
    p.add_argument("--out", help="output directory (config out_dir)")
    p.add_argument("--seed", type=int, help="run seed")
    p.add_argument("--sigma", type=float, help="noise multiplier; 0 trains without DP")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="privspeech", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate or ingest data and write the split")
    _common(p)

    p = sub.add_parser("train-teacher", help="train the DP teacher on data/priv")
    _common(p)
    p.add_argument("--check-clipping", action="store_true", help="assert every clipped norm is <= C")

    p = sub.add_parser("epsilon", help="privacy budget for (q, sigma, steps, delta)")
    _common(p)
    p.add_argument("--q", type=float, help="sampling rate (default: from config)")
    p.add_argument("--steps", type=int, help="number of steps (default: from config)")
    p.add_argument("--delta", type=float, help="target delta (default: from config)")

    p = sub.add_parser("label-aux", help="one-shot teacher labeling of data/aux")
    _common(p)

    p = sub.add_parser("train-student", help="distill the audio-only student")
    _common(p)

    p = sub.add_parser("evaluate", help="evaluate a checkpoint on a manifest")
    _common(p)
    p.add_argument("--checkpoint", help="default: the student (released) or teacher checkpoint")
    p.add_argument("--manifest", help="default: data/test/manifest.csv")
    p.add_argument("--role", choices=pipeline.ROLES, default="released")
    p.add_argument("--name", help="also write reports/<name>.json")

    p = sub.add_parser("sweep", help="grid over sigma x AW x DSAF x |D_aux| x seeds")
    _common(p)
    p.add_argument("--grid", required=True, help='JSON file or inline JSON, e.g. {"sigma": [1, 3], "seeds": [0, 1]}')
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--keep", action="store_true", help="keep per-cell data directories")
    return parser


def load_config(args) -> RunConfig:
    overrides = list(args.overrides)
    if args.out is not None:
        overrides.append(f"out_dir={json.dumps(args.out)}")
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    if args.sigma is not None:
        overrides.append(f"privacy.sigma={args.sigma}")
    return config_mod.load(args.config, overrides)


def _print_epsilon(eps: float, alpha: float | None, sigma: float) -> None:
    if sigma == 0:
        print(f"epsilon={accountant.NO_DP}")
    else:
        print(f"epsilon={eps:.4f} best_alpha={alpha:g}")


def run(args) -> int:
    cfg = load_config(args)
    lay = pipeline.Layout(cfg.out_dir)

    if args.command == "gen-data":
        counts = pipeline.gen_data(cfg)
        for part, c in counts.items():
            print(f"{part} n={sum(c)} class_counts={','.join(map(str, c))}")

    elif args.command == "train-teacher":
        ledger = pipeline.train_teacher(cfg, check_clipping=args.check_clipping)
        print(f"checkpoint={lay.teacher}")
        _print_epsilon(ledger["epsilon"] if ledger["dp"] else 0.0, ledger["best_alpha"], cfg.privacy.sigma)

    elif args.command == "epsilon":
        q = cfg.q if args.q is None else args.q
        steps = cfg.steps if args.steps is None else args.steps
        delta = cfg.privacy.delta if args.delta is None else args.delta
        sigma = cfg.privacy.sigma
        if sigma == 0:
            _print_epsilon(0.0, None, 0.0)
        else:
            eps, alpha = pipeline.epsilon(q, sigma, steps, delta)
            print(f"q={q:g} sigma={sigma:g} steps={steps} delta={delta:g}")
            _print_epsilon(eps, alpha, sigma)

    elif args.command == "label-aux":
        probs = pipeline.label_aux(cfg)
        print(f"probs={lay.probs} n={len(probs.ids)} mode={probs.mode} teacher={probs.teacher_hash}")

    elif args.command == "train-student":
        pipeline.train_student(cfg)
        print(f"checkpoint={lay.student}")

    elif args.command == "evaluate":
        default_ckpt = lay.student if args.role == "released" else lay.teacher
        ckpt = Path(args.checkpoint) if args.checkpoint else default_ckpt
        manifest = Path(args.manifest) if args.manifest else lay.manifest("test")
        report = pipeline.evaluate(cfg, ckpt, manifest, args.role, args.name)
        print(report.to_json())

    elif args.command == "sweep":
        text = args.grid
        grid = json.loads(Path(text).read_text() if Path(text).is_file() else text)
        rows = pipeline.sweep(cfg, grid, jobs=args.jobs, keep=args.keep)
        print(f"rows={len(rows)} csv={lay.reports / 'sweep.csv'}")
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return run(args)
    except Exception as exc:  # report one line, never a traceback
        for types, category, code in ERROR_CATEGORIES:
            if isinstance(exc, types):
                break
        else:
            category, code = "internal", 1
        message = " ".join(str(exc).split()) or type(exc).__name__
        print(f"error:{category}: {message}", file=sys.stderr)
        return code


if __name__ == "__main__":
    sys.exit(main())
