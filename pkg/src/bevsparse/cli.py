"""Command-line benchmark runner.

Exit codes: 0 success, 2 configuration or validation error, 3 I/O error,
4 empirical counts exceeded an analytic bound. Setting SPP_DETERMINISTIC=1
forces the single-thread policy regardless of --threads.
"""

from __future__ import annotations

import argparse
import os
import sys

from .backbone import (
    VARIANT_DENSE,
    VARIANT_SPARSE,
    VARIANT_SPARSE1,
    VARIANT_SPARSE12,
    VARIANT_WIDE,
)
from .bench import (
    BenchConfig,
    SceneFiles,
    SyntheticScenes,
    emit_report,
    run_benchmark,
    scene_params_for_density,
)
from .pillars import PillarGridConfig

__all__ = ["CLI_VARIANTS", "build_parser", "main"]

# "dense" is the user-facing name for the dense baseline backbone.
CLI_VARIANTS: dict[str, str] = {
    "dense": VARIANT_DENSE,
    "sparse": VARIANT_SPARSE,
    "sparse1-dense23": VARIANT_SPARSE1,
    "sparse12-dense3": VARIANT_SPARSE12,
    "sparse-wideconv": VARIANT_WIDE,
}


def _parse_grid(text: str) -> tuple[int, int]:
    try:
        h_str, w_str = text.lower().split("x")
        h, w = int(h_str), int(w_str)
    except ValueError as exc:
        raise ValueError(f"--grid expects HxW, got {text!r}") from exc
    return h, w


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="bevsparse",
        description="Benchmark the pillar pseudoimage pipeline on CPU.",
    )
    p.add_argument("--variant", choices=sorted(CLI_VARIANTS), default="sparse")
    p.add_argument("--grid", default="768x512", help="grid as HxW (rows x columns)")
    p.add_argument("--pillar-size", type=float, default=0.05, help="cell size in meters")
    p.add_argument("--channels", type=int, default=64, help="backbone base width C")
    p.add_argument(
        "--scenes",
        default="synthetic:3",
        help="'synthetic:N' generated scenes or 'dir:PATH' of point cloud files",
    )
    p.add_argument("--format", choices=("kitti-bin", "csv"), default="kitti-bin")
    p.add_argument("--density-hint", type=float, default=0.0075,
                   help="target median site density for synthetic scenes")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--reps", type=int, default=10)
    p.add_argument("--warmup", type=int, default=2)
    p.add_argument("--threads", choices=("1", "max"), default="1")
    p.add_argument("--out-json", default=None)
    p.add_argument("--out-csv", default=None)
    p.add_argument("--weights", default=None,
                   help="weights file; loaded if present, else generated and saved here")
    return p


def _build_config(args: argparse.Namespace) -> BenchConfig:
    h, w = _parse_grid(args.grid)
    s = args.pillar_size
    grid = PillarGridConfig(
        pillar_size_x=s,
        pillar_size_y=s,
        x_min=-w * s / 2.0,
        x_max=w * s / 2.0,
        y_min=-h * s / 2.0,
        y_max=h * s / 2.0,
        z_min=-3.0,
        z_max=1.0,
        out_channels=args.channels,
    )
    if args.scenes.startswith("synthetic:"):
        count = int(args.scenes.split(":", 1)[1])
        scenes = SyntheticScenes(count, scene_params_for_density(args.density_hint, grid))
    elif args.scenes.startswith("dir:"):
        scenes = SceneFiles(args.scenes.split(":", 1)[1], args.format)
    else:
        raise ValueError(f"--scenes expects 'synthetic:N' or 'dir:PATH', got {args.scenes!r}")
    policy = (
        "single"
        if os.environ.get("SPP_DETERMINISTIC") == "1" or args.threads == "1"
        else "unrestricted"
    )
    return BenchConfig(
        grid=grid,
        variant=CLI_VARIANTS[args.variant],
        scenes=scenes,
        seed=args.seed,
        repetitions=args.reps,
        warmup=args.warmup,
        thread_policy=policy,
        weights_path=args.weights,
    )


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = _build_config(args)
        result = run_benchmark(cfg)
        if args.out_json:
            emit_report(result, "json", args.out_json)
        if args.out_csv:
            emit_report(result, "csv", args.out_csv)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 3

    print(
        f"variant={result.variant} grid={result.height}x{result.width} "
        f"channels={result.channels} scenes={len(result.scene_records)} "
        f"reps={result.repetitions} warmup={result.warmup} threads={result.thread_policy}"
    )
    print(f"median site density: {result.median_site_density:.6f}")
    for stage in ("feature_net", "backbone", "head", "total"):
        t = result.stage_timings[stage]
        print(f"{stage}: {t.mean_ms:.3f} +/- {t.std_ms:.3f} ms")
    if result.analytic_total is not None:
        line = f"analytic total: {result.analytic_total:.6g}"
        if result.empirical_total is not None:
            line += f"; empirical total: {result.empirical_total:.6g}"
        if result.min_margin is not None:
            line += f"; min margin: {result.min_margin:.6g}"
        print(line)
    violated = [r.index for r in result.scene_records if r.reconcile_ok is False]
    if violated:
        print(f"bound violation in scenes {violated}", file=sys.stderr)
        return 4
    return 0


if __name__ == "__main__":
    sys.exit(main())
