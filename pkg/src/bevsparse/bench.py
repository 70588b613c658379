"""CPU benchmark harness: synthetic scenes, weight generation, stage timing.

A benchmark run times three pipeline stages per repetition and scene:
feature_net (pillarize + vectorize, plus the dense scatter for dense-input
variants), backbone, and head. Warmup repetitions run first and are
discarded. An untimed instrumented pass per scene records densities,
empirical PairCounts, and the reconciliation against the analytic bounds.
Everything except wall-clock timings is deterministic for a fixed config.
"""

from __future__ import annotations

import math
import os
import time
from contextlib import nullcontext
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from .backbone import (
    VARIANT_DENSE,
    VARIANT_SPARSE,
    VARIANT_SPARSE1,
    VARIANT_SPARSE12,
    VARIANT_TWIN,
    VARIANT_WIDE,
    VARIANTS,
    MID_COUNTS,
    UP_KERNEL_SIZES,
    BackboneWeights,
    BlockWeights,
    head_stub,
    run_dense_backbone,
    run_sparse_backbone,
    run_sparse_dense_twin,
)
from .costmodel import (
    OpCountReport,
    analytic_baseline,
    analytic_sparse_bound,
    order_stats,
    reconcile,
)
from .kernels import (
    KIND_STANDARD,
    KIND_SUBMANIFOLD,
    KIND_TRANSPOSE,
    BatchNormParams,
    ConvLayerWeights,
)
from .pillars import (
    FEATURE_DIM,
    PillarGridConfig,
    PointCloud,
    VectorizerWeights,
    pillarize,
    read_point_cloud_file,
    scatter,
    vectorize,
)
from .pseudoimage import density
from .serialization import WeightsBundle, load_weights, save_weights

__all__ = [
    "SyntheticSceneParams",
    "SyntheticScenes",
    "SceneFiles",
    "BenchConfig",
    "StageTiming",
    "SceneRecord",
    "BenchmarkResult",
    "CSV_COLUMNS",
    "generate_weights",
    "gen_synthetic_scene",
    "scene_params_for_density",
    "expected_sites_per_cluster",
    "run_benchmark",
    "result_to_json_dict",
    "emit_report",
]

STAGES = ("feature_net", "backbone", "head", "total")

CSV_COLUMNS = (
    "schema_version",
    "variant",
    "height",
    "width",
    "channels",
    "scene_count",
    "repetitions",
    "warmup",
    "thread_policy",
    "median_site_density",
    "feature_net_mean_ms",
    "feature_net_std_ms",
    "backbone_mean_ms",
    "backbone_std_ms",
    "head_mean_ms",
    "head_std_ms",
    "total_mean_ms",
    "total_std_ms",
    "analytic_total_ops",
    "empirical_total_ops",
    "min_reconcile_margin",
)

SCHEMA_VERSION = 1

_BN_EPS = float(np.float32(1e-5))


def _kaiming(rng: np.random.Generator, kh: int, kw: int, cin: int, cout: int) -> np.ndarray:
    std = math.sqrt(2.0 / (kh * kw * cin))
    return rng.normal(0.0, std, size=(kh, kw, cin, cout)).astype(np.float32)


def _identity_bn(channels: int) -> BatchNormParams:
    return BatchNormParams(
        gamma=np.ones(channels, dtype=np.float32),
        beta=np.zeros(channels, dtype=np.float32),
        mean=np.zeros(channels, dtype=np.float32),
        var=np.ones(channels, dtype=np.float32),
        eps=_BN_EPS,
    )


def generate_weights(
    base_channels: int, seed: int = 0, head_channels: int = 8
) -> WeightsBundle:
    """Kaiming-normal kernels (std = sqrt(2 / fan_in)) in a fixed draw order,
    identity batch norms. Byte-identical output for a fixed seed."""
    rng = np.random.default_rng(seed)
    c = base_channels
    vec = VectorizerWeights(
        linear=rng.normal(0.0, math.sqrt(2.0 / FEATURE_DIM), size=(FEATURE_DIM, c)).astype(
            np.float32
        ),
        bn=_identity_bn(c),
    )
    ins = (c, c, 2 * c)
    outs = (c, 2 * c, 4 * c)
    blocks = []
    for k in range(3):
        down3x3 = ConvLayerWeights(_kaiming(rng, 3, 3, ins[k], outs[k]), 2, KIND_STANDARD)
        down2x2 = ConvLayerWeights(_kaiming(rng, 2, 2, ins[k], outs[k]), 2, KIND_STANDARD)
        mids = tuple(
            ConvLayerWeights(_kaiming(rng, 3, 3, outs[k], outs[k]), 1, KIND_SUBMANIFOLD)
            for _ in range(MID_COUNTS[k])
        )
        wide = ConvLayerWeights(_kaiming(rng, 9, 9, outs[k], outs[k]), 1, KIND_SUBMANIFOLD)
        ku = UP_KERNEL_SIZES[k]
        up = ConvLayerWeights(_kaiming(rng, ku, ku, outs[k], 2 * c), ku, KIND_TRANSPOSE)
        blocks.append(
            BlockWeights(
                down3x3=down3x3,
                down2x2=down2x2,
                down_bn=_identity_bn(outs[k]),
                mid_convs=mids,
                mid_bns=tuple(_identity_bn(outs[k]) for _ in range(MID_COUNTS[k])),
                up_conv=up,
                up_bn=_identity_bn(2 * c),
                wide_first=wide,
            )
        )
    head = ConvLayerWeights(_kaiming(rng, 1, 1, 6 * c, head_channels), 1, KIND_STANDARD)
    return WeightsBundle(vectorizer=vec, backbone=BackboneWeights(c, tuple(blocks)), head=head)


@dataclass(frozen=True)
class SyntheticSceneParams:
    """Gaussian point clusters: centers uniform over the grid range, point
    offsets N(0, cluster_radius) in x/y, z uniform in [z_low, z_high).
    density_hint records the site density the parameters were calibrated
    for."""

    cluster_count: int
    points_per_cluster: int
    cluster_radius: float
    density_hint: float
    z_low: float
    z_high: float

    def __post_init__(self) -> None:
        if self.cluster_count < 0:
            raise ValueError("cluster_count must be >= 0")
        if self.points_per_cluster < 1:
            raise ValueError("points_per_cluster must be >= 1")
        if not (math.isfinite(self.cluster_radius) and self.cluster_radius > 0):
            raise ValueError("cluster_radius must be positive")
        if not 0.0 < self.density_hint <= 1.0:
            raise ValueError(f"density_hint must be in (0, 1], got {self.density_hint}")
        if not self.z_low < self.z_high:
            raise ValueError("need z_low < z_high")


def gen_synthetic_scene(
    params: SyntheticSceneParams, grid: PillarGridConfig, seed: int
) -> PointCloud:
    """Deterministic clustered cloud; reflectance uniform in [0, 1)."""
    rng = np.random.default_rng(seed)
    n, m = params.cluster_count, params.points_per_cluster
    if n == 0:
        return PointCloud(np.zeros((0, 4), dtype=np.float32))
    cx = rng.uniform(grid.x_min, grid.x_max, size=n)
    cy = rng.uniform(grid.y_min, grid.y_max, size=n)
    x = cx[:, None] + rng.normal(0.0, params.cluster_radius, size=(n, m))
    y = cy[:, None] + rng.normal(0.0, params.cluster_radius, size=(n, m))
    z = rng.uniform(params.z_low, params.z_high, size=(n, m))
    r = rng.uniform(0.0, 1.0, size=(n, m))
    pts = np.stack([x.ravel(), y.ravel(), z.ravel(), r.ravel()], axis=1)
    return PointCloud(pts.astype(np.float32))


def expected_sites_per_cluster(
    points_per_cluster: int, cluster_radius: float, grid: PillarGridConfig
) -> float:
    """Analytic expectation of occupied cells for one Gaussian cluster whose
    center sits at a cell center: sum over cells of 1 - (1 - p_cell)^m."""

    def axis_probs(size: float) -> np.ndarray:
        reach = int(math.ceil(5.0 * cluster_radius / size)) + 1
        edges = (np.arange(-reach, reach + 1) - 0.5) * size
        cdf = np.asarray([0.5 * (1.0 + math.erf(e / (cluster_radius * math.sqrt(2.0)))) for e in edges])
        return np.diff(cdf)

    p = np.outer(axis_probs(grid.pillar_size_y), axis_probs(grid.pillar_size_x))
    return float(np.sum(1.0 - (1.0 - p) ** points_per_cluster))


def scene_params_for_density(
    target_site_density: float,
    grid: PillarGridConfig,
    points_per_cluster: int = 150,
    cluster_radius: float | None = None,
) -> SyntheticSceneParams:
    """Pick a cluster count whose expected occupancy hits the target density."""
    if not 0.0 < target_site_density <= 1.0:
        raise ValueError(f"target_site_density must be in (0, 1], got {target_site_density}")
    radius = (
        8.0 * max(grid.pillar_size_x, grid.pillar_size_y)
        if cluster_radius is None
        else cluster_radius
    )
    per_cluster = expected_sites_per_cluster(points_per_cluster, radius, grid)
    want = target_site_density * grid.grid_height * grid.grid_width
    return SyntheticSceneParams(
        cluster_count=max(1, round(want / per_cluster)),
        points_per_cluster=points_per_cluster,
        cluster_radius=radius,
        density_hint=target_site_density,
        z_low=grid.z_min,
        z_high=grid.z_max,
    )


@dataclass(frozen=True)
class SyntheticScenes:
    count: int
    params: SyntheticSceneParams

    def __post_init__(self) -> None:
        if self.count < 1:
            raise ValueError("need at least one scene")


@dataclass(frozen=True)
class SceneFiles:
    path: str
    fmt: str = "kitti-bin"


@dataclass(frozen=True)
class BenchConfig:
    """One benchmark run. Channel width comes from grid.out_channels."""

    grid: PillarGridConfig
    variant: str
    scenes: SyntheticScenes | SceneFiles
    seed: int = 0
    repetitions: int = 10
    warmup: int = 2
    thread_policy: str = "single"
    weights_path: str | None = None
    head_channels: int = 8

    def __post_init__(self) -> None:
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; options: {list(VARIANTS)}")
        if self.repetitions < 1:
            raise ValueError("repetitions must be >= 1")
        if self.warmup < 0:
            raise ValueError("warmup must be >= 0")
        if self.thread_policy not in ("single", "unrestricted"):
            raise ValueError(
                f"thread_policy must be 'single' or 'unrestricted', got {self.thread_policy!r}"
            )
        if self.head_channels < 1:
            raise ValueError("head_channels must be >= 1")


@dataclass(frozen=True)
class StageTiming:
    stage: str
    mean_ms: float
    std_ms: float
    samples_ms: tuple[float, ...]


@dataclass(frozen=True)
class SceneRecord:
    """Untimed per-scene instrumentation."""

    index: int
    num_points: int
    num_pillars: int
    site_density: float
    value_density: float
    analytic_total: float | None
    empirical_total: float | None
    empirical_rows: dict[str, float] | None
    reconcile_ok: bool | None
    min_margin: float | None


@dataclass(frozen=True)
class BenchmarkResult:
    variant: str
    height: int
    width: int
    channels: int
    seed: int
    repetitions: int
    warmup: int
    thread_policy: str
    scene_records: tuple[SceneRecord, ...]
    stage_timings: dict[str, StageTiming]
    median_site_density: float
    analytic_total: float | None
    empirical_total: float | None
    min_margin: float | None


_EXT_BY_FMT = {"kitti-bin": ".bin", "csv": ".csv"}


def _load_scenes(cfg: BenchConfig) -> list[PointCloud]:
    src = cfg.scenes
    if isinstance(src, SyntheticScenes):
        return [gen_synthetic_scene(src.params, cfg.grid, cfg.seed + i) for i in range(src.count)]
    if src.fmt not in _EXT_BY_FMT:
        raise ValueError(f"unknown scene format {src.fmt!r}")
    ext = _EXT_BY_FMT[src.fmt]
    names = sorted(n for n in os.listdir(src.path) if n.endswith(ext))
    if not names:
        raise ValueError(f"no {ext} scenes in {src.path}")
    return [read_point_cloud_file(os.path.join(src.path, n), src.fmt) for n in names]


def _resolve_weights(cfg: BenchConfig) -> WeightsBundle:
    c = cfg.grid.out_channels
    if cfg.weights_path and os.path.exists(cfg.weights_path):
        bundle = load_weights(cfg.weights_path)
        if bundle.backbone.base_channels != c:
            raise ValueError(
                f"weights are {bundle.backbone.base_channels}-channel, config wants {c}"
            )
        return bundle
    bundle = generate_weights(c, cfg.seed, cfg.head_channels)
    if cfg.weights_path:
        save_weights(bundle, cfg.weights_path)
    return bundle


def _timed_ms(fn: Callable[[], object]) -> tuple[object, float]:
    t0 = time.perf_counter_ns()
    out = fn()
    return out, (time.perf_counter_ns() - t0) / 1e6


def _run_stages(
    cloud: PointCloud, cfg: BenchConfig, wb: WeightsBundle
) -> tuple[float, float, float]:
    grid = cfg.grid

    def feature_net():
        sp = vectorize(pillarize(cloud, grid, cfg.seed), wb.vectorizer, grid)
        return scatter(sp) if cfg.variant in (VARIANT_DENSE, VARIANT_TWIN) else sp

    feat, t_feature = _timed_ms(feature_net)
    if cfg.variant == VARIANT_DENSE:
        out, t_backbone = _timed_ms(lambda: run_dense_backbone(feat, wb.backbone))
    elif cfg.variant == VARIANT_TWIN:
        out, t_backbone = _timed_ms(lambda: run_sparse_dense_twin(feat, wb.backbone))
    else:
        res, t_backbone = _timed_ms(lambda: run_sparse_backbone(feat, wb.backbone, cfg.variant))
        out = res.output
    _, t_head = _timed_ms(lambda: head_stub(out, wb.head))
    return t_feature, t_backbone, t_head


def _instrument_scene(
    index: int, cloud: PointCloud, cfg: BenchConfig, wb: WeightsBundle
) -> SceneRecord:
    grid = cfg.grid
    sp = vectorize(pillarize(cloud, grid, cfg.seed), wb.vectorizer, grid)
    rep = density(sp)
    h, w, c = grid.grid_height, grid.grid_width, grid.out_channels
    analytic: float | None
    empirical = rows = ok = margin = None
    if cfg.variant in (VARIANT_DENSE, VARIANT_TWIN):
        analytic = analytic_baseline(h, w, c).total
    else:
        res = run_sparse_backbone(sp, wb.backbone, cfg.variant)
        empirical = float(sum(pc.weighted for pc in res.pair_counts))
        if cfg.variant == VARIANT_WIDE:
            # 9x9 kernels have no analytic row; record raw work only
            analytic = None
        else:
            bound = analytic_sparse_bound(h, w, c, rep.site_density)
            rec = reconcile(res.pair_counts, bound)
            analytic = bound.total
            rows = {r.row: r.empirical for r in rec.rows}
            ok = rec.ok
            margin = rec.min_margin
    return SceneRecord(
        index=index,
        num_points=cloud.num_points,
        num_pillars=sp.num_sites,
        site_density=rep.site_density,
        value_density=rep.value_density,
        analytic_total=analytic,
        empirical_total=empirical,
        empirical_rows=rows,
        reconcile_ok=ok,
        min_margin=margin,
    )


def run_benchmark(cfg: BenchConfig) -> BenchmarkResult:
    """Times every (scene, repetition) pair per stage and instruments each
    scene once untimed. Timing samples pool over scenes."""
    scenes = _load_scenes(cfg)
    wb = _resolve_weights(cfg)
    limiter = threadpool_limits(limits=1) if cfg.thread_policy == "single" else nullcontext()

    samples: dict[str, list[float]] = {s: [] for s in STAGES}
    records: list[SceneRecord] = []
    with limiter:
        for i, cloud in enumerate(scenes):
            records.append(_instrument_scene(i, cloud, cfg, wb))
            for rep in range(cfg.warmup + cfg.repetitions):
                t_f, t_b, t_h = _run_stages(cloud, cfg, wb)
                if rep < cfg.warmup:
                    continue
                samples["feature_net"].append(t_f)
                samples["backbone"].append(t_b)
                samples["head"].append(t_h)
                samples["total"].append(t_f + t_b + t_h)

    timings = {
        s: StageTiming(
            stage=s,
            mean_ms=float(np.mean(vals)),
            std_ms=float(np.std(vals)),
            samples_ms=tuple(vals),
        )
        for s, vals in samples.items()
    }
    stats = order_stats([r.site_density for r in records])
    h, w, c = cfg.grid.grid_height, cfg.grid.grid_width, cfg.grid.out_channels
    if cfg.variant in (VARIANT_DENSE, VARIANT_TWIN):
        analytic_total: float | None = analytic_baseline(h, w, c).total
    elif cfg.variant == VARIANT_WIDE:
        analytic_total = None
    else:
        analytic_total = analytic_sparse_bound(h, w, c, stats.median).total
    empirical_values = [r.empirical_total for r in records if r.empirical_total is not None]
    margins = [r.min_margin for r in records if r.min_margin is not None]
    return BenchmarkResult(
        variant=cfg.variant,
        height=h,
        width=w,
        channels=c,
        seed=cfg.seed,
        repetitions=cfg.repetitions,
        warmup=cfg.warmup,
        thread_policy=cfg.thread_policy,
        scene_records=tuple(records),
        stage_timings=timings,
        median_site_density=stats.median,
        analytic_total=analytic_total,
        empirical_total=float(np.mean(empirical_values)) if empirical_values else None,
        min_margin=min(margins) if margins else None,
    )


def result_to_json_dict(result: BenchmarkResult) -> dict:
    return {
        "schema_version": SCHEMA_VERSION,
        "variant": result.variant,
        "height": result.height,
        "width": result.width,
        "channels": result.channels,
        "seed": result.seed,
        "repetitions": result.repetitions,
        "warmup": result.warmup,
        "thread_policy": result.thread_policy,
        "median_site_density": result.median_site_density,
        "analytic_total": result.analytic_total,
        "empirical_total": result.empirical_total,
        "min_margin": result.min_margin,
        "stages": {
            name: {
                "mean_ms": t.mean_ms,
                "std_ms": t.std_ms,
                "samples_ms": list(t.samples_ms),
            }
            for name, t in sorted(result.stage_timings.items())
        },
        "scenes": [
            {
                "index": r.index,
                "num_points": r.num_points,
                "num_pillars": r.num_pillars,
                "site_density": r.site_density,
                "value_density": r.value_density,
                "analytic_total": r.analytic_total,
                "empirical_total": r.empirical_total,
                "empirical_rows": r.empirical_rows,
                "reconcile_ok": r.reconcile_ok,
                "min_margin": r.min_margin,
            }
            for r in result.scene_records
        ],
    }


def _csv_cell(value: object, timing: bool = False) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return f"{value:.6f}" if timing else repr(value)
    return str(value)


def _csv_row(result: BenchmarkResult) -> str:
    t = result.stage_timings
    cells = [
        _csv_cell(SCHEMA_VERSION),
        _csv_cell(result.variant),
        _csv_cell(result.height),
        _csv_cell(result.width),
        _csv_cell(result.channels),
        _csv_cell(len(result.scene_records)),
        _csv_cell(result.repetitions),
        _csv_cell(result.warmup),
        _csv_cell(result.thread_policy),
        _csv_cell(result.median_site_density),
        _csv_cell(t["feature_net"].mean_ms, timing=True),
        _csv_cell(t["feature_net"].std_ms, timing=True),
        _csv_cell(t["backbone"].mean_ms, timing=True),
        _csv_cell(t["backbone"].std_ms, timing=True),
        _csv_cell(t["head"].mean_ms, timing=True),
        _csv_cell(t["head"].std_ms, timing=True),
        _csv_cell(t["total"].mean_ms, timing=True),
        _csv_cell(t["total"].std_ms, timing=True),
        _csv_cell(result.analytic_total),
        _csv_cell(result.empirical_total),
        _csv_cell(result.min_margin),
    ]
    return ",".join(cells)


def emit_report(
    results: BenchmarkResult | Sequence[BenchmarkResult], fmt: str, path: str
) -> str:
    """Writes benchmark results to path as "csv" (one row per result, header
    always present) or "json"; returns the emitted text."""
    import json

    if isinstance(results, BenchmarkResult):
        results = [results]
    if fmt == "csv":
        lines = [",".join(CSV_COLUMNS)]
        lines += [_csv_row(r) for r in results]
        text = "\n".join(lines) + "\n"
    elif fmt == "json":
        payload = {
            "schema_version": SCHEMA_VERSION,
            "results": [result_to_json_dict(r) for r in results],
        }
        text = json.dumps(payload, sort_keys=True, indent=2) + "\n"
    else:
        raise ValueError(f"unknown report format {fmt!r}")
    with open(path, "w", encoding="utf-8") as f:
        f.write(text)
    return text
