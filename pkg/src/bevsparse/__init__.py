"""Sparse BEV pillar pipeline: pillarization, COO pseudoimages, sparse and
dense convolutional backbones, an analytic convolution-count model, and a CPU
benchmark harness."""

from .backbone import (
    MID_COUNTS,
    UP_KERNEL_SIZES,
    VARIANT_DENSE,
    VARIANT_SPARSE,
    VARIANT_SPARSE1,
    VARIANT_SPARSE12,
    VARIANT_TWIN,
    VARIANT_WIDE,
    VARIANTS,
    BackboneWeights,
    BlockWeights,
    SparseBackboneResult,
    dense_trunk_footprints,
    head_stub,
    run_dense_backbone,
    run_sparse_backbone,
    run_sparse_dense_twin,
)
from .bench import (
    BenchConfig,
    BenchmarkResult,
    SceneFiles,
    SceneRecord,
    StageTiming,
    SyntheticSceneParams,
    SyntheticScenes,
    emit_report,
    gen_synthetic_scene,
    generate_weights,
    result_to_json_dict,
    run_benchmark,
    scene_params_for_density,
)
from .cli import main as cli_main
from .costmodel import (
    DensityStats,
    OpCountReport,
    ReconciliationReport,
    analytic_baseline,
    analytic_sparse_bound,
    density_stats,
    order_stats,
    reconcile,
)
from .kernels import (
    KIND_STANDARD,
    KIND_SUBMANIFOLD,
    KIND_TRANSPOSE,
    BatchNormParams,
    ConvLayerWeights,
    PairCount,
    output_grid_shape,
    batchnorm_dense,
    batchnorm_sparse,
    conv2d_dense,
    conv2d_sparse,
    conv2d_subm,
    conv2d_transpose_dense,
    conv2d_transpose_sparse,
    relu,
)
from .pillars import (
    PillarGridConfig,
    PillarSet,
    PointCloud,
    VectorizerWeights,
    pillarize,
    read_point_cloud,
    read_point_cloud_file,
    scatter,
    vectorize,
)
from .pseudoimage import (
    DensePseudoimage,
    DensityReport,
    SparsePseudoimage,
    canonicalize,
    density,
    from_dense,
    to_dense,
)
from .serialization import (
    WeightsBundle,
    load_weights,
    read_dense_tensor,
    read_sparse_tensor,
    save_weights,
    write_dense_tensor,
    write_sparse_tensor,
)

__version__ = "0.1.0"
