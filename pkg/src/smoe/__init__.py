"""Steered mixture-of-experts image regression.

Images are modeled as a softmax-gated mixture of steered 2-D Gaussian
kernels, each contributing a scalar expert intensity. The package provides
the model math (evaluation, loss, analytic gradients), a deterministic
edge-aligned initializer, a regularized tile-based trainer with pruning,
PGM image I/O with PSNR/SSIM metrics, and a CLI (`smoe`).
"""

from .edge_init import (
    EdgeMask,
    EdgeSegment,
    InitConfig,
    canny_edges,
    center_pixel_mse,
    dbscan,
    edge_init_pipeline,
    extract_segments,
    grid_init,
    importance_scores,
    init_experts,
    place_kernels,
    reduce_segments,
)
from .errors import (
    CenterOutOfBounds,
    CoverageGap,
    DimensionMismatch,
    EmptyEdgeMask,
    ImageTooSmall,
    InvalidThresholds,
    ModelEmpty,
    NonFiniteLoss,
    ParseError,
    SmoeError,
    TileTooSmall,
)
from .imaging import MetricReport, compare, load_image, mse, psnr, save_image, ssim
from .model import (
    Gradients,
    Image,
    Kernel,
    SmoeModel,
    evaluate,
    gating_weights,
    kernel_value,
    load_model,
    loss_gradients,
    mse_loss,
    predict,
    reconstruct,
    save_model,
)
from .optimizer import (
    PhaseReport,
    PipelineReport,
    TileSpec,
    TrainConfig,
    TrainReport,
    fit_pipeline,
    merge_models,
    prune,
    split_tiles,
    train,
    write_report_csv,
)

__version__ = "0.1.0"
