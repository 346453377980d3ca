"""Regularized training, pruning, and the tile split/train/merge pipeline.

Training is full-batch Adam on all kernel parameters of the objective
MSE + reg_weight * (sum of amplitudes)^2. Amplitudes clamp at zero after
every step and kernels whose amplitude falls below the pruning threshold
are removed immediately, moment state included. Per-tile work is
independent; the merge is a barrier, after which the grouped model is
fine-tuned without regularization.
"""

from __future__ import annotations

import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from .edge_init import InitConfig, edge_init_pipeline, grid_init
from .errors import (
    CoverageGap,
    DimensionMismatch,
    EmptyEdgeMask,
    NonFiniteLoss,
    TileTooSmall,
)
from .model import (
    Image,
    SmoeModel,
    _CHUNK,
    _grid_blocks,
    _loss_and_gradients_arrays,
    _model_from_arrays,
    _packed,
    _workspace,
)

logger = logging.getLogger(__name__)

_MIN_TILE = 8


@dataclass
class TrainConfig:
    """Optimizer hyperparameters.

    prune_threshold = 0 disables pruning (used by the fine-tune stage);
    convergence_tol <= 0 disables early stopping.
    """

    learning_rate: float = 5e-3
    max_iters: int = 2000
    reg_weight: float = 1e-4
    prune_threshold: float = 1e-3
    convergence_tol: float = 1e-7
    convergence_window: int = 50
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.max_iters < 1:
            raise ValueError("max_iters must be at least 1")
        if self.reg_weight < 0 or self.prune_threshold < 0:
            raise ValueError("reg_weight and prune_threshold must be nonnegative")
        if not (0 < self.adam_beta1 < 1 and 0 < self.adam_beta2 < 1):
            raise ValueError("adam betas must lie in (0, 1)")
        if self.adam_eps <= 0 or self.convergence_window < 1:
            raise ValueError("adam_eps must be positive, window at least 1")


@dataclass(eq=False)
class TrainReport:
    iterations_run: int
    final_loss: float
    pruned_count: int
    wall_time: float
    loss_trace: np.ndarray


@dataclass(frozen=True)
class TileSpec:
    """Axis-aligned tile in the global pixel frame."""

    origin: tuple[int, int]
    width: int
    height: int


@dataclass(eq=False)
class PhaseReport:
    """One row of the pipeline report: a tile training phase or the
    merged fine-tune phase (tile_id None)."""

    phase: str
    tile_id: int | None
    iterations: int
    final_loss: float
    pruned: int
    seconds: float
    kernel_count: int
    trace: np.ndarray | None = None


@dataclass(eq=False)
class PipelineReport:
    rows: list[PhaseReport]
    total_seconds: float


def train(model: SmoeModel, target: Image, cfg: TrainConfig) -> tuple[SmoeModel, TrainReport]:
    """Full-batch moment-based descent with amplitude clamping and pruning.

    Stops at max_iters or when the relative loss improvement over the
    convergence window drops below convergence_tol. Never returns an empty
    model: if pruning would remove everything, the highest-amplitude kernel
    survives. A non-finite objective raises NonFiniteLoss.
    """
    if model.width != target.width or model.height != target.height:
        raise DimensionMismatch(
            f"model is {model.width}x{model.height}, "
            f"target is {target.width}x{target.height}"
        )
    t0 = time.perf_counter()
    mu, tri, m, alpha = _packed(model)
    params = {"mu": mu.copy(), "tri": tri.copy(), "m": m.copy(), "alpha": alpha.copy()}
    moment1 = {key: np.zeros_like(val) for key, val in params.items()}
    moment2 = {key: np.zeros_like(val) for key, val in params.items()}

    blocks = _grid_blocks(target.width, target.height, target.pixels)
    n_pixels = target.pixels.size
    b1, b2, eps = cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps
    work = _workspace(len(m), min(_CHUNK, n_pixels))

    trace: list[float] = []
    pruned_total = 0
    step = 0
    for _ in range(cfg.max_iters):
        loss, (g_m, g_mu, g_tri, g_alpha) = _loss_and_gradients_arrays(
            params["mu"], params["tri"], params["m"], params["alpha"],
            blocks, n_pixels, cfg.reg_weight, work,
        )
        if not math.isfinite(loss):
            raise NonFiniteLoss(f"objective became {loss} at iteration {len(trace)}")
        trace.append(loss)

        if cfg.convergence_tol > 0 and len(trace) > cfg.convergence_window:
            old = trace[-1 - cfg.convergence_window]
            if old <= 0.0 or (old - loss) / old < cfg.convergence_tol:
                break

        step += 1
        grads = {"mu": g_mu, "tri": g_tri, "m": g_m, "alpha": g_alpha}
        c1 = 1.0 - b1 ** step
        c2 = 1.0 - b2 ** step
        for key, g in grads.items():
            m1 = moment1[key]
            m2 = moment2[key]
            m1 *= b1
            m1 += (1.0 - b1) * g
            m2 *= b2
            m2 += (1.0 - b2) * (g * g)
            params[key] -= cfg.learning_rate * (m1 / c1) / (np.sqrt(m2 / c2) + eps)

        np.maximum(params["alpha"], 0.0, out=params["alpha"])

        if cfg.prune_threshold > 0:
            keep = params["alpha"] >= cfg.prune_threshold
            if not keep.any():
                keep[int(np.argmax(params["alpha"]))] = True
            dropped = int(len(keep) - keep.sum())
            if dropped:
                pruned_total += dropped
                for store in (params, moment1, moment2):
                    for key in store:
                        store[key] = store[key][keep]

    wall = time.perf_counter() - t0
    out = _model_from_arrays(
        params["mu"], params["tri"], params["m"], params["alpha"],
        model.width, model.height,
    )
    report = TrainReport(
        iterations_run=len(trace),
        final_loss=trace[-1],
        pruned_count=pruned_total,
        wall_time=wall,
        loss_trace=np.array(trace),
    )
    return out, report


def prune(model: SmoeModel, tau: float) -> tuple[SmoeModel, int]:
    """Remove kernels with amplitude below tau, preserving order.

    At least one kernel always survives: if every amplitude is below the
    threshold, the highest-amplitude kernel (first on ties) is kept.
    """
    if tau <= 0:
        raise ValueError("tau must be positive")
    kept = [k for k in model.kernels if k.alpha >= tau]
    if not kept:
        alphas = [k.alpha for k in model.kernels]
        kept = [model.kernels[int(np.argmax(alphas))]]
    removed = len(model.kernels) - len(kept)
    return SmoeModel(kernels=kept, width=model.width, height=model.height), removed


def split_tiles(image: Image, tile_size: int) -> list[tuple[TileSpec, Image]]:
    """Row-major tiling; edge tiles truncate so the tiles cover exactly."""
    if tile_size < _MIN_TILE:
        raise TileTooSmall(f"tile_size must be >= {_MIN_TILE}, got {tile_size}")
    tiles = []
    for y0 in range(0, image.height, tile_size):
        for x0 in range(0, image.width, tile_size):
            w = min(tile_size, image.width - x0)
            h = min(tile_size, image.height - y0)
            spec = TileSpec(origin=(x0, y0), width=w, height=h)
            tiles.append((spec, Image(image.pixels[y0 : y0 + h, x0 : x0 + w].copy())))
    return tiles


def merge_models(
    tiles: list[tuple[TileSpec, SmoeModel]], width: int, height: int
) -> SmoeModel:
    """Group per-tile models into one by translating kernel centers.

    Kernel order is tile order, then within-tile order; everything except
    the centers is untouched. The tiles must cover the frame exactly.
    """
    cover = np.zeros((height, width), dtype=np.int16)
    for spec, _ in tiles:
        x0, y0 = spec.origin
        cover[y0 : y0 + spec.height, x0 : x0 + spec.width] += 1
    if not (cover == 1).all():
        raise CoverageGap("tiles do not cover the frame exactly once")

    kernels = []
    for spec, tile_model in tiles:
        shift = np.array(spec.origin, dtype=np.float64)
        for k in tile_model.kernels:
            kernels.append(
                type(k)(mu=k.mu + shift, cholA=k.cholA, expert=k.expert, alpha=k.alpha)
            )
    return SmoeModel(kernels=kernels, width=width, height=height)


def _fallback_axis(max_pts: int) -> int:
    # Grid fallback sized to the edge budget of 2*max_pts kernels.
    return max(1, int(round(math.sqrt(2.0 * max_pts))))


def fit_pipeline(
    image: Image,
    init_cfg: InitConfig,
    train_cfg: TrainConfig,
    tile_size: int,
    init_mode: str = "edge",
    grid_axis: int | None = None,
    threads: int = 1,
    collect_traces: bool = False,
) -> tuple[SmoeModel, PipelineReport]:
    """Split, initialize and train each tile, merge, then fine-tune.

    Edge initialization falls back to a grid on tiles with no usable edges.
    The fine-tune stage trains the merged model with regularization and
    pruning disabled. Tiles run concurrently when threads > 1; results are
    assembled in tile order either way.
    """
    if init_mode not in ("edge", "grid"):
        raise ValueError(f"init_mode must be 'edge' or 'grid', got {init_mode!r}")
    t0 = time.perf_counter()
    tiles = split_tiles(image, tile_size)

    def run_tile(item):
        tile_id, (spec, tile_img) = item
        start = time.perf_counter()
        if init_mode == "grid":
            tile_model = grid_init(tile_img, grid_axis or _fallback_axis(init_cfg.max_pts))
        else:
            try:
                tile_model = edge_init_pipeline(tile_img, init_cfg)
            except EmptyEdgeMask:
                axis = grid_axis or _fallback_axis(init_cfg.max_pts)
                logger.info("tile %d has no edges; grid fallback %dx%d", tile_id, axis, axis)
                tile_model = grid_init(tile_img, axis)
        tile_model, rep = train(tile_model, tile_img, train_cfg)
        row = PhaseReport(
            phase="tile",
            tile_id=tile_id,
            iterations=rep.iterations_run,
            final_loss=rep.final_loss,
            pruned=rep.pruned_count,
            seconds=time.perf_counter() - start,
            kernel_count=len(tile_model.kernels),
            trace=rep.loss_trace if collect_traces else None,
        )
        return spec, tile_model, row

    items = list(enumerate(tiles))
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(run_tile, items))
    else:
        results = [run_tile(item) for item in items]

    merged = merge_models([(spec, mod) for spec, mod, _ in results], image.width, image.height)
    rows = [row for _, _, row in results]

    ft_cfg = replace(train_cfg, reg_weight=0.0, prune_threshold=0.0)
    ft_start = time.perf_counter()
    final_model, ft_rep = train(merged, image, ft_cfg)
    rows.append(
        PhaseReport(
            phase="finetune",
            tile_id=None,
            iterations=ft_rep.iterations_run,
            final_loss=ft_rep.final_loss,
            pruned=ft_rep.pruned_count,
            seconds=time.perf_counter() - ft_start,
            kernel_count=len(final_model.kernels),
            trace=ft_rep.loss_trace if collect_traces else None,
        )
    )
    return final_model, PipelineReport(rows=rows, total_seconds=time.perf_counter() - t0)


REPORT_HEADER = "phase,tile_id,iterations,final_loss,pruned,seconds"


def write_report_csv(report: PipelineReport, path, traces: bool = False):
    """Write the pipeline report; one row per phase, stable header.

    With traces=True, each phase that carries a per-iteration loss trace gets
    a sibling file `<path>.trace-<phase>[-<tile_id>].csv`.
    """
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(REPORT_HEADER + "\n")
        for row in report.rows:
            tid = "" if row.tile_id is None else str(row.tile_id)
            fh.write(
                f"{row.phase},{tid},{row.iterations},"
                f"{row.final_loss:.10g},{row.pruned},{row.seconds:.6f}\n"
            )
    if traces:
        for row in report.rows:
            if row.trace is None:
                continue
            suffix = row.phase if row.tile_id is None else f"{row.phase}-{row.tile_id}"
            with open(f"{path}.trace-{suffix}.csv", "w", encoding="utf-8", newline="\n") as fh:
                fh.write("iteration,loss\n")
                for i, value in enumerate(row.trace):
                    fh.write(f"{i},{value:.10g}\n")
