"""Command-line entry point.

Subcommands: phantom, gen, register, evaluate, bench, swap-test, report.
Exit codes: 0 success, 1 usage error, 2 runtime failure.  --quiet silences
informational output; machine artifacts (CSV/JSON/volumes) are unaffected.
Worker threads follow --threads, falling back to the VOLREG_THREADS
environment variable.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from . import kernels


def _parse_dims(text: str):
    parts = [p for p in text.replace(",", " ").split() if p]
    if len(parts) == 1:
        parts = parts * 3
    if len(parts) != 3:
        raise argparse.ArgumentTypeError("dims must be N or NX,NY,NZ")
    return tuple(int(p) for p in parts)


def _parse_triple(text: str):
    parts = [p for p in text.replace(",", " ").split() if p]
    if len(parts) == 1:
        parts = parts * 3
    if len(parts) != 3:
        raise argparse.ArgumentTypeError("expected S or SX,SY,SZ")
    return tuple(float(p) for p in parts)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="volreg",
        description="3D deformable registration toolkit and benchmark harness")
    parser.add_argument("--seed", type=int, default=0,
                        help="global seed for seeded subcommands")
    parser.add_argument("--threads", type=int, default=None,
                        help="worker thread cap (default: VOLREG_THREADS or all cores)")
    parser.add_argument("--quiet", action="store_true",
                        help="suppress informational output")
    # the same flags are accepted after the subcommand; SUPPRESS keeps a
    # flag given before the subcommand from being reset by the default
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS)
    common.add_argument("--threads", type=int, default=argparse.SUPPRESS)
    common.add_argument("--quiet", action="store_true", default=argparse.SUPPRESS)
    sub = parser.add_subparsers(dest="command", metavar="command")

    def add_parser(name, **kwargs):
        return sub.add_parser(name, parents=[common], **kwargs)

    p = add_parser("phantom", help="generate a deterministic test volume")
    p.add_argument("--dims", type=_parse_dims, default=(64, 64, 64))
    p.add_argument("--spacing", type=_parse_triple, default=(1.0, 1.0, 1.0))
    p.add_argument("-o", "--out", required=True)

    p = add_parser("gen", help="build and materialize a deformation dataset")
    p.add_argument("--sources", nargs="+", required=True,
                   help="source volume files (.nii)")
    p.add_argument("--per-brain", type=int, default=100)
    p.add_argument("--sites", type=int, default=150)
    p.add_argument("--amplitude", type=float, default=None,
                   help="impulse amplitude in voxels (default 6%% of min axis)")
    p.add_argument("-o", "--out", required=True)

    p = add_parser("register", help="register moving onto fixed")
    p.add_argument("fixed")
    p.add_argument("moving")
    p.add_argument("--engine", default=None,
                   help="affine | ffd | dense-diffeomorphic | dense-voxelmorph-energy")
    p.add_argument("--config", default=None, help="RegistrationConfig JSON file")
    p.add_argument("-o", "--out", required=True, help="output directory")

    p = add_parser("evaluate", help="similarity metrics for a volume pair")
    p.add_argument("a")
    p.add_argument("b")
    p.add_argument("--bins", type=int, default=64)
    p.add_argument("--csv", default=None, help="also append a CSV row here")

    p = add_parser("bench", help="run an experiment plan")
    p.add_argument("--plan", required=True)

    p = add_parser("swap-test", help="re-run a plan with another reference")
    p.add_argument("--plan", required=True)
    p.add_argument("--reference", required=True, help="alternate reference id")
    p.add_argument("-o", "--out", default=None,
                   help="output directory (default: <plan output>/swap)")

    p = add_parser("report", help="re-render Markdown/overlays from a CSV")
    p.add_argument("--csv", required=True)
    p.add_argument("-o", "--out", required=True)
    return parser


def _say(args, message: str) -> None:
    if not args.quiet:
        print(message)


def _apply_threads(args) -> None:
    value = args.threads
    if value is None:
        env = os.environ.get("VOLREG_THREADS", "").strip()
        if env:
            value = int(env)
    if value is not None and kernels.active_backend() == "numba":
        import numba

        numba.set_num_threads(max(1, value))


def _cmd_phantom(args) -> int:
    from .nifti import save_volume
    from .volume import Volume3, make_phantom

    vol = make_phantom(args.dims, args.seed)
    vol = Volume3(vol.data, args.spacing, vol.origin)
    save_volume(vol, args.out)
    _say(args, f"wrote phantom {args.dims} seed={args.seed} -> {args.out}")
    return 0


def _cmd_gen(args) -> int:
    from .nifti import load_volume
    from .syngen import build_manifest, materialize

    sources = {}
    for path in args.sources:
        sources[Path(path).stem] = load_volume(path)
    manifest = build_manifest(list(sources), per_brain=args.per_brain,
                              seed=args.seed, n_sites=args.sites,
                              amplitude=args.amplitude)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest.save(out / "manifest.json")
    summary = materialize(manifest, sources, out)
    _say(args, f"{len(manifest.entries)} entries: wrote {summary.written}, "
               f"skipped {summary.skipped}, mismatched {len(summary.mismatched)}")
    return 0


def _cmd_register(args) -> int:
    from .nifti import load_volume
    from .optimize import RegistrationConfig, register
    from .warp import save_field

    if args.config is not None:
        cfg = RegistrationConfig.from_json_file(args.config)
        if args.engine is not None and args.engine != cfg.engine:
            doc = cfg.to_json_dict()
            doc["engine"] = args.engine
            doc["objective"] = None
            doc["optimizer"] = None
            doc["step"] = None
            cfg = RegistrationConfig.from_json_dict(
                {k: v for k, v in doc.items() if v is not None})
    else:
        cfg = RegistrationConfig(engine=args.engine or "ffd", seed=args.seed)
    fixed = load_volume(args.fixed)
    moving = load_volume(args.moving)
    result = register(fixed, moving, cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_field(result.field, out / "field.fld")
    metrics = {
        "schema": "volreg-metrics/1",
        "engine": cfg.engine,
        "objective": cfg.objective,
        "before": vars(result.before),
        "after": vars(result.after),
        "duration_seconds": result.duration,
        "iterations": result.iterations_run,
        "converged": result.converged,
        "fell_back_to_identity": result.fell_back_to_identity,
    }
    (out / "metrics.json").write_text(json.dumps(metrics, indent=1),
                                      encoding="utf-8")
    _say(args, f"{cfg.engine}: cc {result.before.cc:.4f} -> {result.after.cc:.4f} "
               f"in {result.duration:.1f}s ({result.iterations_run} iterations)")
    return 0


def _cmd_evaluate(args) -> int:
    from .nifti import load_volume
    from .similarity import SimilarityReport, similarity_report

    a = load_volume(args.a)
    b = load_volume(args.b)
    rep = similarity_report(a, b, bins=args.bins)
    print(f"cc={rep.cc:.4f} mi={rep.mi:.4f} nmi={rep.nmi:.4f} msd={rep.msd:.6g}")
    if args.csv:
        path = Path(args.csv)
        new = not path.exists()
        with open(path, "a", encoding="utf-8") as fh:
            if new:
                fh.write(SimilarityReport.CSV_HEADER + "\n")
            fh.write(rep.csv_row("evaluate", 0, Path(args.b).stem) + "\n")
    return 0


def _cmd_bench(args) -> int:
    from .bench import ExperimentPlan, emit_report, run_experiment

    plan = ExperimentPlan.from_json_file(args.plan)
    report = run_experiment(plan)
    written = emit_report(report, plan.output_dir, save_artifacts=True)
    _say(args, f"{len(report.rows)} rows, {len(report.failures)} failures "
               f"-> {written['csv']}")
    return 0


def _cmd_swap_test(args) -> int:
    from .bench import ExperimentPlan, emit_swap_report, reference_swap_test

    plan = ExperimentPlan.from_json_file(args.plan)
    swap = reference_swap_test(plan, args.reference)
    out = args.out or str(Path(plan.output_dir) / "swap")
    written = emit_swap_report(swap, out)
    _say(args, f"{len(swap.deltas)} paired rows -> {written['deltas']}")
    return 0


def _cmd_report(args) -> int:
    from .bench import render_report_dir

    written = render_report_dir(args.csv, args.out)
    _say(args, f"re-rendered {written['markdown']} "
               f"({len(written['overlays'])} overlays)")
    return 0


_COMMANDS = {
    "phantom": _cmd_phantom,
    "gen": _cmd_gen,
    "register": _cmd_register,
    "evaluate": _cmd_evaluate,
    "bench": _cmd_bench,
    "swap-test": _cmd_swap_test,
    "report": _cmd_report,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code in (0, None) else 1
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 1
    try:
        _apply_threads(args)
        return _COMMANDS[args.command](args)
    except Exception as exc:  # noqa: BLE001 - single-line cause is the contract
        print(f"volreg {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


def entrypoint() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
