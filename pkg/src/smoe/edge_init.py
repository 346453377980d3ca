"""Deterministic, gradient-free model initialization from image structure.

The pipeline walks: Canny edge mask -> directional line segments -> importance
scored reduction under a kernel budget -> orthogonal kernel-pair placement ->
closed-form expert sampling with a short refinement loop. Every stage is
deterministic: no randomness anywhere, density clustering visits points in
index order, and the four directional scans concatenate in a fixed order.
"""

from __future__ import annotations

import logging
import math
from collections import deque
from dataclasses import dataclass

import numpy as np
import scipy.ndimage as ndi
from scipy.spatial import cKDTree

from .errors import CenterOutOfBounds, EmptyEdgeMask, InvalidThresholds
from .imaging import save_image
from .model import Image, Kernel, SmoeModel, gating_weights, predict

logger = logging.getLogger(__name__)

# Canonical segment angles in degrees and their scan directions (dx, dy),
# x rightward and y downward. Order is also the tie-break and concatenation
# order everywhere.
CANONICAL_ANGLES = (0, 90, 45, -45)

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
# Unit normals orthogonal to each segment direction.
_NORMALS = {
    0: (0.0, 1.0),
    90: (1.0, 0.0),
    45: (-_INV_SQRT2, _INV_SQRT2),
    -45: (_INV_SQRT2, _INV_SQRT2),
}


@dataclass(eq=False)
class EdgeMask:
    """Binary edge raster matching the source image dimensions."""

    bits: np.ndarray

    def __post_init__(self):
        self.bits = np.asarray(self.bits, dtype=bool)
        if self.bits.ndim != 2:
            raise ValueError("edge mask must be 2-D")

    @property
    def height(self) -> int:
        return self.bits.shape[0]

    @property
    def width(self) -> int:
        return self.bits.shape[1]


@dataclass(frozen=True)
class EdgeSegment:
    """Oriented maximal run of edge pixels.

    center -- midpoint of first and last run pixel, continuous (x, y)
    theta  -- canonical angle in degrees: 0, 90, 45 or -45
    length -- pixel count of the run, always >= 2
    """

    center: tuple[float, float]
    theta: int
    length: int


@dataclass
class InitConfig:
    """Hyperparameters of the edge-aligned initialization pipeline."""

    canny_sigma: float = 1.4
    canny_low: float = 0.1
    canny_high: float = 0.2
    lam: float = 0.1          # similar/dissimilar mix in the importance score
    max_pts: int = 256        # segment budget; final model has <= 2*max_pts kernels
    delta_mu: float = 4.0     # separation of each placed kernel pair, px
    eta: float = 0.1          # expert refinement step size
    expert_iters: int = 100
    expert_tol: float = 1e-6

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError("lam must lie in [0, 1]")
        if not 0.0 < self.canny_low < self.canny_high:
            raise ValueError("need 0 < canny_low < canny_high")
        if self.delta_mu <= 0 or self.eta <= 0 or self.canny_sigma <= 0:
            raise ValueError("canny_sigma, delta_mu and eta must be positive")
        if self.max_pts < 1:
            raise ValueError("max_pts must be a positive integer")


# ---------------------------------------------------------------------------
# Canny edge mask
# ---------------------------------------------------------------------------


def canny_edges(image: Image, sigma: float = 1.4, low: float = 0.1, high: float = 0.2) -> EdgeMask:
    """Binary edge mask: Gaussian smoothing, Sobel gradients, four-direction
    non-maximum suppression, and double-threshold hysteresis.

    Thresholds are relative to the maximum gradient magnitude of the image.
    Non-maximum ties break toward the lexicographically earlier pixel of the
    comparison pair so plateau edges stay one pixel wide deterministically.
    """
    if not 0.0 < low < high:
        raise InvalidThresholds(f"need 0 < low < high, got low={low} high={high}")

    smoothed = ndi.gaussian_filter(image.pixels, sigma=sigma, mode="reflect", truncate=4.0)
    gx = ndi.sobel(smoothed, axis=1, mode="reflect")
    gy = ndi.sobel(smoothed, axis=0, mode="reflect")
    mag = np.hypot(gx, gy)
    peak = float(mag.max())
    shape = mag.shape
    if peak == 0.0:
        return EdgeMask(np.zeros(shape, dtype=bool))

    # Gradient direction folded to [0, pi) and quantized to four sectors:
    # 0 = horizontal gradient, 1 = diagonal (+x, +y), 2 = vertical,
    # 3 = anti-diagonal (+x, -y).
    ang = np.mod(np.arctan2(gy, gx), np.pi)
    sector = np.zeros(shape, dtype=np.int8)
    sector[(ang >= np.pi / 8) & (ang < 3 * np.pi / 8)] = 1
    sector[(ang >= 3 * np.pi / 8) & (ang < 5 * np.pi / 8)] = 2
    sector[(ang >= 5 * np.pi / 8) & (ang < 7 * np.pi / 8)] = 3

    padded = np.zeros((shape[0] + 2, shape[1] + 2))
    padded[1:-1, 1:-1] = mag

    def shifted(dy: int, dx: int) -> np.ndarray:
        return padded[1 + dy : 1 + dy + shape[0], 1 + dx : 1 + dx + shape[1]]

    # (before, after) neighbor offsets along the gradient for each sector.
    lookups = {
        0: ((0, -1), (0, 1)),
        1: ((-1, -1), (1, 1)),
        2: ((-1, 0), (1, 0)),
        3: ((1, -1), (-1, 1)),
    }
    nms = np.zeros(shape, dtype=bool)
    for sec, (before, after) in lookups.items():
        sel = sector == sec
        nms |= sel & (mag > shifted(*before)) & (mag >= shifted(*after))

    weak = nms & (mag >= low * peak)
    strong = nms & (mag >= high * peak)
    if not strong.any():
        return EdgeMask(np.zeros(shape, dtype=bool))
    labels, count = ndi.label(weak, structure=np.ones((3, 3), dtype=bool))
    keep = np.zeros(count + 1, dtype=bool)
    keep[np.unique(labels[strong])] = True
    keep[0] = False
    return EdgeMask(keep[labels])


def save_mask_pgm(mask: EdgeMask, path):
    """Debug export: edge pixels map to 255, background to 0."""
    save_image(Image(mask.bits.astype(np.float64)), path)


# ---------------------------------------------------------------------------
# line segment extraction
# ---------------------------------------------------------------------------


def _runs_1d(line: np.ndarray):
    """Inclusive (start, end) index pairs of maximal True runs."""
    b = line.astype(np.int8)
    if not b.any():
        return []
    d = np.diff(b)
    starts = np.flatnonzero(d == 1) + 1
    ends = np.flatnonzero(d == -1)
    if b[0]:
        starts = np.concatenate(([0], starts))
    if b[-1]:
        ends = np.concatenate((ends, [len(b) - 1]))
    return list(zip(starts.tolist(), ends.tolist()))


def _segment(x0: float, y0: float, x1: float, y1: float, theta: int, length: int) -> EdgeSegment:
    return EdgeSegment(
        center=((x0 + x1) / 2.0, (y0 + y1) / 2.0),
        theta=theta,
        length=length,
    )


def extract_segments(mask: EdgeMask) -> list[EdgeSegment]:
    """All maximal runs of edge pixels along the four canonical directions.

    Each direction scans independently, so one pixel may contribute to up to
    four segments. Runs shorter than two pixels are dropped. Output order is
    fixed: 0, 90, 45, -45 degrees, lines in ascending order within each.
    """
    bits = mask.bits
    h, w = bits.shape
    segments: list[EdgeSegment] = []

    for y in range(h):  # 0 degrees: runs along +x
        for i0, i1 in _runs_1d(bits[y]):
            if i1 - i0 + 1 >= 2:
                segments.append(_segment(i0, y, i1, y, 0, i1 - i0 + 1))

    for x in range(w):  # 90 degrees: runs along +y
        for i0, i1 in _runs_1d(bits[:, x]):
            if i1 - i0 + 1 >= 2:
                segments.append(_segment(x, i0, x, i1, 90, i1 - i0 + 1))

    for k in range(-(h - 1), w):  # 45 degrees: runs along (+x, +y)
        diag = np.diagonal(bits, offset=k)
        x0, y0 = (k, 0) if k >= 0 else (0, -k)
        for i0, i1 in _runs_1d(diag):
            if i1 - i0 + 1 >= 2:
                segments.append(
                    _segment(x0 + i0, y0 + i0, x0 + i1, y0 + i1, 45, i1 - i0 + 1)
                )

    flipped = bits[::-1]
    for k in range(-(h - 1), w):  # -45 degrees: runs along (+x, -y)
        diag = np.diagonal(flipped, offset=k)
        x0, y0 = (k, h - 1) if k >= 0 else (0, h - 1 + k)
        for i0, i1 in _runs_1d(diag):
            if i1 - i0 + 1 >= 2:
                segments.append(
                    _segment(x0 + i0, y0 - i0, x0 + i1, y0 - i1, -45, i1 - i0 + 1)
                )

    return segments


def write_segments_csv(segments: list[EdgeSegment], scores, path):
    """Debug export: one row per segment with its importance score."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("center_x,center_y,theta_deg,length,score\n")
        for seg, score in zip(segments, scores):
            fh.write(
                f"{seg.center[0]:.17g},{seg.center[1]:.17g},"
                f"{seg.theta},{seg.length},{score:.17g}\n"
            )


# ---------------------------------------------------------------------------
# importance scores and reduction
# ---------------------------------------------------------------------------


def importance_scores(segments: list[EdgeSegment], lam: float, diag: float) -> np.ndarray:
    """Isolation score per segment.

    Mixes the mean distance to the two nearest same-angle neighbors with the
    mean distance to the two nearest different-angle neighbors. A singleton
    neighborhood contributes its only distance; an empty one substitutes the
    image diagonal `diag`, the maximally isolated value.
    """
    n = len(segments)
    if n == 0:
        return np.zeros(0)
    pts = np.array([s.center for s in segments], dtype=np.float64)
    thetas = np.array([s.theta for s in segments])

    def mean_top2(group_pts: np.ndarray, queries: np.ndarray, exclude_self: bool) -> np.ndarray:
        avail = len(group_pts) - (1 if exclude_self else 0)
        if avail <= 0:
            return np.full(len(queries), diag)
        tree = cKDTree(group_pts)
        k = min(len(group_pts), 3 if exclude_self else 2)
        dists = np.asarray(tree.query(queries, k=k)[0]).reshape(len(queries), k)
        if exclude_self:
            dists = dists[:, 1:]  # drop one zero: self (or a coincident twin)
        if avail == 1:
            return dists[:, 0]
        return dists[:, :2].mean(axis=1)

    d_sim = np.empty(n)
    d_dis = np.empty(n)
    for theta in CANONICAL_ANGLES:
        sel = thetas == theta
        if not sel.any():
            continue
        d_sim[sel] = mean_top2(pts[sel], pts[sel], exclude_self=True)
        d_dis[sel] = mean_top2(pts[~sel], pts[sel], exclude_self=False)
    return (1.0 - lam) * d_sim + lam * d_dis


def dbscan(points, eps: float, min_pts: int) -> np.ndarray:
    """Density clustering on Euclidean distance.

    Returns one label per point: -1 for noise, otherwise cluster ids assigned
    in discovery order. Neighborhoods are closed balls of radius eps and
    include the point itself. Points are visited in index order and frontier
    queues are kept sorted, so the labeling is deterministic.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    n = len(pts)
    labels = np.full(n, -1, dtype=int)
    if n == 0:
        return labels
    tree = cKDTree(pts)
    neighborhoods = [sorted(nb) for nb in tree.query_ball_point(pts, eps)]
    visited = np.zeros(n, dtype=bool)
    cluster = 0
    for i in range(n):
        if visited[i]:
            continue
        visited[i] = True
        if len(neighborhoods[i]) < min_pts:
            continue
        labels[i] = cluster
        queue = deque(neighborhoods[i])
        while queue:
            j = queue.popleft()
            if labels[j] == -1:
                labels[j] = cluster
            if visited[j]:
                continue
            visited[j] = True
            if len(neighborhoods[j]) >= min_pts:
                queue.extend(neighborhoods[j])
        cluster += 1
    return labels


def _representative(members: list[EdgeSegment]) -> EdgeSegment:
    cx = sum(s.center[0] for s in members) / len(members)
    cy = sum(s.center[1] for s in members) / len(members)
    counts = {t: 0 for t in CANONICAL_ANGLES}
    for s in members:
        counts[s.theta] += 1
    theta = max(CANONICAL_ANGLES, key=lambda t: (counts[t], -CANONICAL_ANGLES.index(t)))
    mean_len = sum(s.length for s in members) / len(members)
    return EdgeSegment(
        center=(cx, cy),
        theta=theta,
        length=max(2, int(math.floor(mean_len + 0.5))),
    )


def reduce_segments(
    segments: list[EdgeSegment], max_pts: int, lam: float, diag: float
) -> list[EdgeSegment]:
    """Shrink a candidate set to at most max_pts segments.

    The ceil(0.2 * max_pts) highest-scoring segments are protected and pass
    through verbatim. The rest are density-clustered with a radius that grows
    geometrically (0.5 px, x1.5 per round, capped at `diag`) until protected +
    cluster representatives + unclustered leftovers fit the budget. Starting
    below one pixel matters: the directional scans emit near-coincident
    duplicates of the same contour point, and the first rounds merge those
    before wider radii start chaining whole contours together. Each cluster
    collapses to one representative: mean center, modal angle (ties break in
    canonical angle order), rounded mean length. If even the capped radius
    cannot fit the budget, the max_pts highest-scoring segments are returned
    instead and the condition is logged.
    """
    if max_pts < 1:
        raise ValueError("max_pts must be positive")
    n = len(segments)
    if n <= max_pts:
        return list(segments)

    scores = importance_scores(segments, lam, diag)
    order = np.argsort(-scores, kind="stable")
    k_top = math.ceil(0.2 * max_pts)
    protected_idx = np.sort(order[:k_top])
    candidate_idx = np.sort(order[k_top:])
    cand_pts = np.array([segments[i].center for i in candidate_idx])

    eps = min(0.5, diag)
    while True:
        labels = dbscan(cand_pts, eps, min_pts=2)
        n_clusters = int(labels.max()) + 1
        noise = labels < 0
        out_size = k_top + n_clusters + int(noise.sum())
        if out_size <= max_pts:
            out = [segments[i] for i in protected_idx]
            for c in range(n_clusters):
                members = [segments[candidate_idx[j]] for j in np.flatnonzero(labels == c)]
                out.append(_representative(members))
            out.extend(segments[candidate_idx[j]] for j in np.flatnonzero(noise))
            return out
        if eps >= diag:
            logger.warning(
                "segment budget %d unreachable at radius %.1f; keeping the "
                "%d highest-scoring segments",
                max_pts, diag, max_pts,
            )
            return [segments[i] for i in np.sort(order[:max_pts])]
        eps = min(eps * 1.5, diag)


# ---------------------------------------------------------------------------
# kernel placement and expert initialization
# ---------------------------------------------------------------------------


def place_kernels(
    segments: list[EdgeSegment], delta_mu: float, width: int, height: int
) -> list[Kernel]:
    """Two kernels per segment, offset +-delta_mu/2 along the segment normal.

    Both start isotropic with steering 1/(2*delta_mu^2) * I, unit amplitude,
    and expert 0 (to be filled in by expert initialization). Centers landing
    outside the pixel range clamp to it.
    """
    if delta_mu <= 0:
        raise ValueError("delta_mu must be positive")
    scale = math.sqrt(1.0 / (2.0 * delta_mu * delta_mu))
    chol = np.array([[scale, 0.0], [0.0, scale]])
    half = delta_mu / 2.0
    kernels = []
    for seg in segments:
        nx, ny = _NORMALS[seg.theta]
        for sign in (-1.0, 1.0):
            cx = min(max(seg.center[0] + sign * half * nx, 0.0), width - 1.0)
            cy = min(max(seg.center[1] + sign * half * ny, 0.0), height - 1.0)
            kernels.append(Kernel(mu=np.array([cx, cy]), cholA=chol, expert=0.0, alpha=1.0))
    return kernels


def _rounded_centers(model: SmoeModel, image: Image):
    """Nearest-pixel indices of the kernel centers, half-up rounding.

    Centers must lie inside the continuous image domain; the rounded index
    clamps into the valid pixel range so domain-boundary centers stay legal.
    """
    xs = np.empty(len(model.kernels), dtype=int)
    ys = np.empty(len(model.kernels), dtype=int)
    for i, k in enumerate(model.kernels):
        cx, cy = k.mu
        if not (-0.5 <= cx < image.width and -0.5 <= cy < image.height):
            raise CenterOutOfBounds(
                f"kernel {i} center ({cx}, {cy}) outside {image.width}x{image.height}"
            )
        xs[i] = min(int(math.floor(cx + 0.5)), image.width - 1)
        ys[i] = min(int(math.floor(cy + 0.5)), image.height - 1)
    return xs, ys


def center_pixel_mse(model: SmoeModel, image: Image) -> float:
    """MSE between the mixture and the image at the rounded kernel centers."""
    xs, ys = _rounded_centers(model, image)
    targets = image.pixels[ys, xs]
    values = predict(model, np.stack([xs, ys], axis=1).astype(np.float64))
    r = values - targets
    return float(r @ r) / len(r)


def init_experts(
    model: SmoeModel,
    image: Image,
    eta: float = 0.1,
    max_iters: int = 100,
    tol: float = 1e-6,
) -> SmoeModel:
    """Closed-form expert estimation with iterative refinement.

    Experts start as the image sampled at each kernel's rounded center.
    Each round re-evaluates the mixture at the center pixels only and nudges
    every expert by eta times its own center residual toward the target.
    Updates project onto [-0.5, 1.5]: the center-pixel fit is an
    ill-conditioned solve when kernels overlap strongly, and without a bound
    it drives experts to huge values that fit the centers but wreck the
    surface in between; the widened band still leaves the overshoot room
    that sharpens kernel pairs across an edge. The loop stops at max_iters
    or once the center-pixel MSE improves by less than tol; a step that
    worsened the MSE is rolled back, so the final MSE never exceeds the
    iteration-0 value. Amplitudes are untouched.
    """
    if eta <= 0:
        raise ValueError("eta must be positive")
    xs, ys = _rounded_centers(model, image)
    targets = image.pixels[ys, xs]
    points = np.stack([xs, ys], axis=1).astype(np.float64)

    # Geometry is frozen during refinement, so the gate matrix is constant.
    weights = gating_weights(model, points)
    m = targets.copy()
    lhat = weights @ m
    prev = float(np.mean((lhat - targets) ** 2))
    for _ in range(max_iters):
        m_next = np.clip(m + eta * (targets - lhat), -0.5, 1.5)
        l_next = weights @ m_next
        cur = float(np.mean((l_next - targets) ** 2))
        if prev - cur < tol:
            if cur <= prev:
                m = m_next
            break
        m, lhat, prev = m_next, l_next, cur

    kernels = [
        Kernel(mu=k.mu, cholA=k.cholA, expert=m[i], alpha=k.alpha)
        for i, k in enumerate(model.kernels)
    ]
    return SmoeModel(kernels=kernels, width=model.width, height=model.height)


# ---------------------------------------------------------------------------
# pipelines
# ---------------------------------------------------------------------------


def edge_init_pipeline(image: Image, cfg: InitConfig) -> SmoeModel:
    """Full deterministic initialization: mask, segments, reduction,
    placement, expert estimation. Raises EmptyEdgeMask when the image yields
    no segments (e.g. constant images); callers may fall back to grid_init.
    """
    mask = canny_edges(image, cfg.canny_sigma, cfg.canny_low, cfg.canny_high)
    segments = extract_segments(mask)
    if not segments:
        raise EmptyEdgeMask("no line segments found; image may be featureless")
    diag = math.hypot(image.width, image.height)
    segments = reduce_segments(segments, cfg.max_pts, cfg.lam, diag)
    kernels = place_kernels(segments, cfg.delta_mu, image.width, image.height)
    model = SmoeModel(kernels=kernels, width=image.width, height=image.height)
    return init_experts(model, image, cfg.eta, cfg.expert_iters, cfg.expert_tol)


def grid_init(image: Image, kernels_per_axis: int, delta_mu: float | None = None) -> SmoeModel:
    """Uniform lattice baseline.

    Kernels sit at the centers of a kernels_per_axis^2 lattice, isotropic
    with separation parameter delta_mu; when delta_mu is omitted it defaults
    to the lattice pitch (mean of the two axis pitches for non-square
    images). Experts sample the image at the rounded centers.
    """
    if kernels_per_axis < 1:
        raise ValueError("kernels_per_axis must be positive")
    n = kernels_per_axis
    pitch_x = image.width / n
    pitch_y = image.height / n
    dm = delta_mu if delta_mu is not None else 0.5 * (pitch_x + pitch_y)
    scale = math.sqrt(1.0 / (2.0 * dm * dm))
    chol = np.array([[scale, 0.0], [0.0, scale]])
    kernels = []
    for j in range(n):
        for i in range(n):
            cx = (i + 0.5) * pitch_x
            cy = (j + 0.5) * pitch_y
            px = min(int(math.floor(cx + 0.5)), image.width - 1)
            py = min(int(math.floor(cy + 0.5)), image.height - 1)
            kernels.append(
                Kernel(
                    mu=np.array([cx, cy]),
                    cholA=chol,
                    expert=image.pixels[py, px],
                    alpha=1.0,
                )
            )
    return SmoeModel(kernels=kernels, width=image.width, height=image.height)
