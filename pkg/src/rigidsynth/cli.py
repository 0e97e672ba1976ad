"""Command-line entry point: warp, solve, annotate, synth, eval.

Exit codes: 0 success, 1 runtime failure, 2 usage or validation error.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Optional, Sequence

from rigidsynth.annotate import annotate_sequence
from rigidsynth.camgeo import InvalidInputError, Intrinsics, Pose6DoF
from rigidsynth.config import ConfigError, RunConfig, load_bundle
from rigidsynth.evaluate import evaluate_paths
from rigidsynth.io import read_depth, read_image, read_json, write_depth, write_image, write_json
from rigidsynth.solver import SolverError, solve
from rigidsynth.synth import SceneConfig, render_scene, write_bundle, write_suite
from rigidsynth.warp import forward_project, inverse_warp

log = logging.getLogger("rigidsynth")

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_USAGE = 2


def worker_count() -> int:
    raw = os.environ.get("RIGIDSYNTH_THREADS")
    if raw is None or raw == "":
        return os.cpu_count() or 1
    try:
        n = int(raw)
    except ValueError:
        raise InvalidInputError(f"RIGIDSYNTH_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise InvalidInputError(f"RIGIDSYNTH_THREADS must be a positive integer, got {raw!r}")
    return n


def _load_config(path: Optional[str]) -> RunConfig:
    return RunConfig() if path is None else RunConfig.load(path)


# ---------------------------------------------------------------------------
# commands


def cmd_warp(args) -> int:
    K = Intrinsics.from_json(read_json(args.intrinsics))
    pose = Pose6DoF.from_json(read_json(args.pose))
    image = read_image(args.image)
    depth = read_depth(args.depth).astype("float64")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.mode == "inverse":
        r = inverse_warp(image, depth, pose, K)
    else:
        r = forward_project(image, depth, pose, K, alpha=args.alpha)
        write_depth(out / "depth.f32", r.carried_depth)
    write_image(out / "warped.png", r.image)
    write_image(out / "valid.png", r.validity.astype("float64"))
    return EXIT_OK


def _solve_one(manifest: str, cfg: RunConfig, out: str) -> None:
    pair = load_bundle(manifest, cfg.n_max)
    est = solve(pair, cfg.solver_options())
    write_json(out, est.to_json())


def _solve_job(job) -> Optional[str]:
    manifest, cfg_json, out = job
    try:
        _solve_one(manifest, RunConfig.parse(cfg_json), out)
    except (InvalidInputError, SolverError) as exc:
        return f"{manifest}: {exc}"
    return None


def cmd_solve(args) -> int:
    cfg = _load_config(args.config)
    bundle = Path(args.bundle)
    if bundle.is_file():
        _solve_one(str(bundle), cfg, args.out)
        return EXIT_OK
    if not bundle.is_dir():
        raise InvalidInputError(f"{bundle}: no such bundle manifest or suite directory")
    scenes = sorted(p for p in bundle.iterdir() if (p / "manifest.json").is_file())
    out = Path(args.out)
    jobs = []
    for s in scenes:
        (out / s.name).mkdir(parents=True, exist_ok=True)
        jobs.append((str(s / "manifest.json"), cfg.model_dump(), str(out / s.name / "estimate.json")))
    n = min(worker_count(), max(1, len(jobs)))
    if n == 1:
        errors = [_solve_job(j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=n) as ex:
            errors = list(ex.map(_solve_job, jobs))
    errors = [e for e in errors if e]
    for e in errors:
        print(f"error: {e}", file=sys.stderr)
    return EXIT_RUNTIME if errors else EXIT_OK


def cmd_annotate(args) -> int:
    if not 0.0 < args.tau <= 1.0:
        raise InvalidInputError(f"--tau must lie in (0, 1], got {args.tau}")
    annotate_sequence(args.masks, args.flow, args.tau, args.n_max, out_dir=args.out)
    return EXIT_OK


def cmd_synth(args) -> int:
    if args.suite:
        write_suite(args.seed, args.out)
        return EXIT_OK
    if args.config is None:
        raise InvalidInputError("synth needs --config or --suite")
    cfg = SceneConfig.from_json(read_json(args.config))
    write_bundle(render_scene(cfg), args.out)
    return EXIT_OK


def cmd_eval(args) -> int:
    write_json(args.out, evaluate_paths(args.pred, args.gt))
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rigidsynth", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log solver progress")
    sub = p.add_subparsers(dest="command", required=True)

    w = sub.add_parser("warp", help="inverse or forward warp one image")
    w.add_argument("mode", choices=("inverse", "forward"))
    w.add_argument("--image", required=True, help="reference image PNG")
    w.add_argument("--depth", required=True, help="DPF1 depth: target depth (inverse) or reference depth (forward)")
    w.add_argument("--pose", required=True, help="pose JSON: target->reference (inverse) or reference->target (forward)")
    w.add_argument("--intrinsics", required=True, help="intrinsics JSON")
    w.add_argument("--alpha", type=int, default=2, help="splat upsampling factor (forward mode)")
    w.add_argument("--out", required=True, help="output directory")
    w.set_defaults(func=cmd_warp)

    s = sub.add_parser("solve", help="estimate ego and object motion for a bundle or a suite directory")
    s.add_argument("--bundle", required=True, help="bundle manifest JSON, or a directory of bundle directories")
    s.add_argument("--config", help="run config JSON (defaults when omitted)")
    s.add_argument("--out", required=True, help="estimate JSON (or output directory for a suite)")
    s.set_defaults(func=cmd_solve)

    a = sub.add_parser("annotate", help="track instances through a mask sequence")
    a.add_argument("--masks", required=True, help="directory of <index>.png label masks")
    a.add_argument("--flow", required=True, help="directory of fwd_<t>.flo / bwd_<t>.flo files")
    a.add_argument("--tau", type=float, default=0.5, help="IoU threshold in (0, 1]")
    a.add_argument("--n-max", type=int, default=3, help="instances kept per pair downstream (metadata)")
    a.add_argument("--out", required=True, help="output directory")
    a.set_defaults(func=cmd_annotate)

    y = sub.add_parser("synth", help="render a scene config or the standard suite")
    g = y.add_mutually_exclusive_group(required=True)
    g.add_argument("--config", help="scene config JSON")
    g.add_argument("--suite", action="store_true", help="render the 20-scene standard suite")
    y.add_argument("--seed", type=int, default=0, help="suite seed")
    y.add_argument("--out", required=True, help="output directory")
    y.set_defaults(func=cmd_synth)

    e = sub.add_parser("eval", help="pose errors of estimates against ground truth")
    e.add_argument("--pred", required=True, help="estimate JSON or directory of <scene>/estimate.json")
    e.add_argument("--gt", required=True, help="meta.json or directory of bundle directories")
    e.add_argument("--out", required=True, help="report JSON")
    e.set_defaults(func=cmd_eval)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        worker_count()
        return args.func(args)
    except (ConfigError, InvalidInputError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SolverError as exc:
        stage = f" [{exc.stage}]" if getattr(exc, "stage", "") else ""
        print(f"error{stage}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
