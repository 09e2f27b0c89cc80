"""``dfa3d`` command line: bench, equiv, gradcheck, ambiguity, lift-demo.

Exit codes: 0 pass, 1 check failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numba

from . import harness
from .lifting import ConfigError

log = logging.getLogger("dfa3d")


def _load_json(path: str | None) -> dict:
    if path is None:
        return {}
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path} is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError(f"{path} must contain a JSON object")
    return doc


def _emit(report: dict, out: str | None, filename: str) -> None:
    text = json.dumps(report, indent=2)
    if out is None:
        print(text)
        return
    path = Path(out)
    if path.suffix != ".json":
        path.mkdir(parents=True, exist_ok=True)
        path = path / filename
    else:
        path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)
    print(text)


def cmd_bench(args) -> int:
    doc = _load_json(args.config)
    if args.dtype:
        doc["dtype"] = args.dtype
    if args.seed is not None:
        doc["seed"] = args.seed
    cfg = harness.BenchConfig.from_dict(doc)
    report = harness.run_bench(cfg, repeats=args.repeats)
    report["multiply_counts"] = [harness.multiply_counts(c) for c in (8, 64, 256)]
    _emit(report, args.out, "bench.json")
    return 0


def cmd_equiv(args) -> int:
    cfg = harness.EquivConfig.from_dict(_load_json(args.config))
    report = harness.run_equiv(cfg, args.trials, args.seed or 0)
    _emit(report, args.out, "equiv.json")
    if "warning" in report:
        log.warning(report["warning"])
    if not report["passed"]:
        seeds = ", ".join(f"seed={f['seed']} trial={f['trial']}" for f in report["failures"])
        print(f"equivalence failed: {seeds}", file=sys.stderr)
        return 1
    return 0


def cmd_gradcheck(args) -> int:
    cfg = harness.GradcheckConfig.from_dict(_load_json(args.config))
    report = harness.run_gradcheck(cfg, args.seed or 0)
    _emit(report, args.out, "gradcheck.json")
    if not report["passed"]:
        w = report["worst"]
        print(
            f"gradcheck failed: {w['tensor']} instance {w['instance']} index {w['index']} "
            f"relative error {w['relative_error']:.3e}",
            file=sys.stderr,
        )
        return 1
    return 0


def cmd_ambiguity(args) -> int:
    doc = _load_json(args.config)
    cfg = harness.AmbiguityConfig.from_dict(doc) if doc else harness.default_ambiguity_config()
    if args.seed is not None:
        cfg.seed = args.seed
    report, matrices = harness.run_ambiguity(cfg)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        for name, m in matrices.items():
            harness.write_matrix_csv(out / f"similarity_{name}.csv", m)
    _emit(report, args.out, "ambiguity.json")
    return 0


def cmd_lift_demo(args) -> int:
    scene_doc = _load_json(args.config) or harness.default_ambiguity_config().scene | {
        "num_views": 2,
        "num_random_objects": 3,
        "objects": [],
    }
    demo = harness.DemoLiftConfig.from_dict(_load_json(args.lift_config))
    out = Path(args.out) if args.out else None
    report, _ = harness.run_lift_demo(scene_doc, demo, args.seed or 0, out)
    report["threads"] = numba.get_num_threads()
    _emit(report, str(out) if out else None, "diagnostics.json")
    return 0


def _common(suppress: bool) -> argparse.ArgumentParser:
    """Shared flags; subcommand copies suppress defaults so flags given before the subcommand survive."""

    def d(value):
        return argparse.SUPPRESS if suppress else value

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=d(None), help="JSON configuration file")
    common.add_argument("--seed", type=int, default=d(None))
    common.add_argument("--out", default=d(None), help="output file (.json) or directory")
    common.add_argument("--repeats", type=int, default=d(5), help="timed repetitions (median reported)")
    common.add_argument("--dtype", choices=["f32", "f64"], default=d(None))
    common.add_argument("--threads", type=int, default=d(1), help="worker threads for the kernels")
    return common


def build_parser() -> argparse.ArgumentParser:
    common = _common(suppress=True)
    parser = argparse.ArgumentParser(prog="dfa3d", description=__doc__, parents=[_common(suppress=False)])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("bench", parents=[common], help="vanilla vs efficient resource comparison").set_defaults(func=cmd_bench)
    p = sub.add_parser("equiv", parents=[common], help="efficient vs expanded-map oracle")
    p.add_argument("--trials", type=int, default=200)
    p.set_defaults(func=cmd_equiv)
    sub.add_parser("gradcheck", parents=[common], help="analytic vs finite-difference gradients").set_defaults(
        func=cmd_gradcheck
    )
    sub.add_parser("ambiguity", parents=[common], help="colinear-anchor depth ambiguity demo").set_defaults(
        func=cmd_ambiguity
    )
    p = sub.add_parser("lift-demo", parents=[common], help="end-to-end multi-layer lifting")
    p.add_argument("--lift-config", help="JSON lift configuration")
    p.set_defaults(func=cmd_lift_demo)
    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if args.threads < 1:
        print("--threads must be >= 1", file=sys.stderr)
        return 2
    try:
        numba.set_num_threads(min(args.threads, numba.config.NUMBA_NUM_THREADS))
    except ValueError as exc:
        print(str(exc), file=sys.stderr)
        return 2
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
