"""Steered mixture-of-experts image model.

A model is a collection of 2-D Gaussian kernels, each carrying a center,
a lower-triangular Cholesky factor of its steering matrix, a scalar expert
intensity, and a nonnegative gate amplitude. The kernels gate their experts
through a softmax over amplitude-weighted Gaussian responses; evaluating the
mixture over the pixel grid reconstructs a grayscale intensity surface.

Evaluation, loss, and gradients are pure functions. Pixel reductions run in
a fixed chunk order so results are bit-stable at a given thread count.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatch, ModelEmpty, ParseError

# Pixels per reduction block. Fixed so that accumulation order, and therefore
# every floating-point result, is reproducible.
_CHUNK = 8192

# Cap on shifted exponents: saturates amplitude gradients of far-away
# zero-amplitude kernels instead of overflowing to inf.
_EXP_CAP = 700.0

# Floor on shifted exponents. Far-tail gate responses flush to exp(-300)
# (~5e-131) so neither they nor their downstream products enter the
# subnormal range, which costs two orders of magnitude in throughput.
# Relative to the leading shifted term of 1.0 the flushed tails stay far
# below every tolerance in use.
_EXP_FLOOR = -300.0


@dataclass(eq=False)
class Image:
    """Grayscale raster: row-major float64 intensities, nominally in [0, 1]."""

    pixels: np.ndarray

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float64)
        if self.pixels.ndim != 2:
            raise ValueError("image pixels must be a 2-D (height, width) array")

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


@dataclass(eq=False)
class Kernel:
    """One steered Gaussian expert.

    mu      -- center in continuous pixel coordinates (x, y)
    cholA   -- 2x2 lower-triangular factor; the steering matrix is cholA @ cholA.T
    expert  -- scalar intensity contributed where this kernel wins the gate
    alpha   -- nonnegative gate amplitude; 0 removes the kernel from gating
    """

    mu: np.ndarray
    cholA: np.ndarray
    expert: float
    alpha: float = 1.0

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=np.float64).reshape(2).copy()
        a = np.asarray(self.cholA, dtype=np.float64).reshape(2, 2).copy()
        a[0, 1] = 0.0  # lower-triangular by construction
        self.cholA = a
        self.expert = float(self.expert)
        self.alpha = float(self.alpha)


@dataclass(eq=False)
class SmoeModel:
    """Ordered kernel collection plus the image-domain extent it models."""

    kernels: list[Kernel]
    width: int
    height: int


@dataclass(eq=False)
class Gradients:
    """Analytic gradients of the training objective for every kernel.

    d_cholA keeps the full 2x2 layout with the upper-right entry pinned to 0,
    matching the three free entries of the lower-triangular factor.
    """

    d_mu: np.ndarray      # (K, 2)
    d_cholA: np.ndarray   # (K, 2, 2)
    d_expert: np.ndarray  # (K,)
    d_alpha: np.ndarray   # (K,)


# ---------------------------------------------------------------------------
# packed-parameter helpers
# ---------------------------------------------------------------------------


def _packed(model: SmoeModel):
    if not model.kernels:
        raise ModelEmpty("model has no kernels")
    mu = np.array([k.mu for k in model.kernels], dtype=np.float64)
    tri = np.array(
        [[k.cholA[0, 0], k.cholA[1, 0], k.cholA[1, 1]] for k in model.kernels],
        dtype=np.float64,
    )
    m = np.array([k.expert for k in model.kernels], dtype=np.float64)
    alpha = np.array([k.alpha for k in model.kernels], dtype=np.float64)
    return mu, tri, m, alpha


def _model_from_arrays(mu, tri, m, alpha, width: int, height: int) -> SmoeModel:
    kernels = [
        Kernel(
            mu=mu[i],
            cholA=np.array([[tri[i, 0], 0.0], [tri[i, 1], tri[i, 2]]]),
            expert=m[i],
            alpha=alpha[i],
        )
        for i in range(len(m))
    ]
    return SmoeModel(kernels=kernels, width=width, height=height)


def _point_basis(points: np.ndarray) -> np.ndarray:
    x = points[:, 0]
    y = points[:, 1]
    return np.stack([x * x, x * y, y * y, x, y, np.ones_like(x)], axis=0)


def _grid_points(width: int, height: int) -> np.ndarray:
    xs = np.tile(np.arange(width, dtype=np.float64), height)
    ys = np.repeat(np.arange(height, dtype=np.float64), width)
    return np.stack([xs, ys], axis=1)


def _workspace(k: int, c: int = _CHUNK):
    """Three (k, c) scratch buffers, reused across blocks to avoid large
    allocations (and their page faults) in inner loops."""
    return np.empty((k, c)), np.empty((k, c)), np.empty((k, c))


def _block_exponents(mu, tri, pts: np.ndarray, work=None) -> np.ndarray:
    """-(x-mu)^T A A^T (x-mu) for every kernel (rows) and point (columns).

    Computed as -||A^T (x - mu)||^2 directly, which is free of cancellation
    and stable under integer translation of both frame and centers. The
    result aliases the first workspace buffer when one is supplied.
    """
    k, c = len(mu), len(pts)
    if work is None:
        work = _workspace(k, c)
    dx = work[0][:k, :c]
    dy = work[1][:k, :c]
    v2 = work[2][:k, :c]
    np.subtract(pts[:, 0][None, :], mu[:, 0][:, None], out=dx)
    np.subtract(pts[:, 1][None, :], mu[:, 1][:, None], out=dy)
    np.multiply(dy, tri[:, 2][:, None], out=v2)
    dx *= tri[:, 0][:, None]
    dy *= tri[:, 1][:, None]
    dx += dy
    np.multiply(dx, dx, out=dx)
    np.multiply(v2, v2, out=v2)
    dx += v2
    dx *= -1.0
    return dx


def _block_gating(mu, tri, log_alpha, pts: np.ndarray, work=None):
    """Softmax gate over one block of points, positive amplitudes only.

    Exponents are shifted by their per-point maximum (amplitude folded in)
    before exponentiation, so the denominator never underflows. Returns
    (weights, shift, denominator); weight columns sum to 1. The weights
    alias the first workspace buffer when one is supplied.
    """
    logits = _block_exponents(mu, tri, pts, work)
    logits += log_alpha[:, None]
    shift = logits.max(axis=0)
    logits -= shift[None, :]
    np.maximum(logits, _EXP_FLOOR, out=logits)
    np.exp(logits, out=logits)
    total = logits.sum(axis=0)
    logits /= total[None, :]
    return logits, shift, total


def _nearest_center_index(mu: np.ndarray, points: np.ndarray) -> np.ndarray:
    """First-index-wins nearest kernel center for each point."""
    dx = points[None, :, 0] - mu[:, None, 0]
    dy = points[None, :, 1] - mu[:, None, 1]
    return np.argmin(dx * dx + dy * dy, axis=0)


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


def kernel_value(kernel: Kernel, x) -> float:
    """Unnormalized gate response alpha * exp(-(x-mu)^T A A^T (x-mu))."""
    d = np.asarray(x, dtype=np.float64).reshape(2) - kernel.mu
    v = kernel.cholA.T @ d
    return float(kernel.alpha * math.exp(-float(v @ v)))


def gating_weights(model: SmoeModel, points) -> np.ndarray:
    """Normalized gate weights at each point; rows are points, columns kernels.

    Every row sums to 1. Zero-amplitude kernels are excluded from the
    computation outright, so their columns are exactly zero and the live
    weights are bit-identical to a model without them. With all amplitudes
    zero the gate degenerates to a one-hot assignment to the nearest kernel
    center (ties to the lowest kernel index).
    """
    mu, tri, m, alpha = _packed(model)
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    n = len(pts)
    k = len(m)
    out = np.zeros((n, k))
    live = alpha > 0
    if not live.any():
        for s in range(0, n, _CHUNK):
            blk = pts[s : s + _CHUNK]
            idx = _nearest_center_index(mu, blk)
            out[np.arange(s, s + len(blk)), idx] = 1.0
        return out
    mu_live, tri_live = mu[live], tri[live]
    la = np.log(alpha[live])
    cols = np.flatnonzero(live)
    work = _workspace(len(la), min(_CHUNK, n))
    for s in range(0, n, _CHUNK):
        blk = pts[s : s + _CHUNK]
        w, _, _ = _block_gating(mu_live, tri_live, la, blk, work)
        out[s : s + len(blk), cols] = w.T
    return out


def _predict_packed(mu, tri, m, alpha, pts: np.ndarray) -> np.ndarray:
    n = len(pts)
    out = np.empty(n)
    live = alpha > 0
    if not live.any():
        for s in range(0, n, _CHUNK):
            blk = pts[s : s + _CHUNK]
            out[s : s + len(blk)] = m[_nearest_center_index(mu, blk)]
        return out
    mu_live, tri_live = mu[live], tri[live]
    la = np.log(alpha[live])
    m_live = m[live]
    work = _workspace(len(la), min(_CHUNK, n))
    for s in range(0, n, _CHUNK):
        blk = pts[s : s + _CHUNK]
        w, _, _ = _block_gating(mu_live, tri_live, la, blk, work)
        out[s : s + len(blk)] = m_live @ w
    return out


def predict(model: SmoeModel, points) -> np.ndarray:
    """Unclamped mixture intensities at arbitrary continuous points."""
    mu, tri, m, alpha = _packed(model)
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    return _predict_packed(mu, tri, m, alpha, pts)


def evaluate(model: SmoeModel, x) -> float:
    """Mixture intensity at a single point."""
    return float(predict(model, np.asarray(x, dtype=np.float64)[None, :])[0])


def reconstruct(model: SmoeModel) -> Image:
    """Sample the mixture at integer pixel coordinates and clamp to [0, 1].

    Pixel (x, y) is sampled at exactly (x, y): origin top-left, x rightward,
    y downward. Clamping happens only here; loss and gradients always see
    the unclamped surface.
    """
    if model.width <= 0 or model.height <= 0:
        raise ValueError("model extent must be positive")
    vals = predict(model, _grid_points(model.width, model.height))
    grid = vals.reshape(model.height, model.width)
    return Image(np.clip(grid, 0.0, 1.0))


# ---------------------------------------------------------------------------
# loss and gradients
# ---------------------------------------------------------------------------


def _check_dims(model: SmoeModel, target: Image):
    if model.width != target.width or model.height != target.height:
        raise DimensionMismatch(
            f"model is {model.width}x{model.height}, "
            f"target is {target.width}x{target.height}"
        )


def mse_loss(model: SmoeModel, target: Image) -> float:
    """Mean squared error between the unclamped reconstruction and target."""
    _check_dims(model, target)
    vals = predict(model, _grid_points(model.width, model.height))
    r = vals - target.pixels.ravel()
    return float(r @ r) / r.size


def _grid_blocks(width: int, height: int, pixels: np.ndarray):
    """Precomputed (basis, target, points) blocks for one raster."""
    flat = pixels.ravel()
    pts = _grid_points(width, height)
    blocks = []
    for s in range(0, len(pts), _CHUNK):
        blk = pts[s : s + _CHUNK]
        blocks.append((_point_basis(blk), flat[s : s + len(blk)], blk))
    return blocks


def _loss_and_gradients_arrays(mu, tri, m, alpha, blocks, n_pixels, reg_weight, work=None):
    """Objective value and analytic gradients over packed parameter arrays.

    Objective: mean squared error plus reg_weight * (sum of amplitudes)^2.
    Zero-amplitude kernels take no part in gating: the surface and the live
    kernels' gradients are bit-identical to a model without them, and only
    their own amplitude gradient is computed (via the amplitude-stripped
    gate response). Gradient reductions over pixels use the fixed block
    order of `blocks`. `work` may carry scratch buffers of at least
    (live kernels, block length); train loops pass one to avoid reallocation.
    """
    k = len(m)
    g_m = np.zeros(k)
    g_mu = np.zeros((k, 2))
    g_tri = np.zeros((k, 3))
    g_alpha = np.zeros(k)
    sq = 0.0
    n = float(n_pixels)

    live = alpha > 0
    if not live.any():
        # Degenerate gate: nearest-center experts. Only the winning expert
        # sees a gradient; geometry and amplitudes get a zero subgradient.
        for _, tvals, blk in blocks:
            idx = _nearest_center_index(mu, blk)
            r = m[idx] - tvals
            sq += float(r @ r)
            np.add.at(g_m, idx, (2.0 / n) * r)
        loss = sq / n + reg_weight * float(alpha.sum()) ** 2
        return loss, (g_m, g_mu, g_tri, g_alpha)

    dead = np.flatnonzero(~live)
    mu_live, tri_live = mu[live], tri[live]
    la = np.log(alpha[live])
    m_live = m[live]

    kl = int(live.sum())
    if work is None:
        work = _workspace(kl, min(_CHUNK, n_pixels))
    sma = np.zeros((kl, 6))
    smb = np.zeros((kl, 6))
    row_u = np.zeros(kl)
    row_ul = np.zeros(kl)
    g_alpha_dead = np.zeros(len(dead))

    for basis, tvals, blk in blocks:
        w, shift, total = _block_gating(mu_live, tri_live, la, blk, work)
        lhat = m_live @ w
        r = lhat - tvals
        sq += float(r @ r)
        rb = (2.0 / n) * r

        if len(dead):
            # Amplitude gradient of switched-off kernels through the
            # amplitude-stripped gate response exp(e)/sum.
            e0 = _block_exponents(mu[dead], tri[dead], blk)
            e0 -= shift[None, :]
            np.clip(e0, None, _EXP_CAP, out=e0)
            phi = np.exp(e0) / total[None, :]
            term = rb[None, :] * (m[dead, None] - lhat[None, :])
            g_alpha_dead += (phi * term).sum(axis=1)

        u = w
        u *= rb[None, :]
        row_u += u.sum(axis=1)
        sma += u @ basis.T
        u *= lhat[None, :]
        row_ul += u.sum(axis=1)
        smb += u @ basis.T

    mse = sq / n
    asum = float(alpha.sum())
    loss = mse + reg_weight * asum * asum

    crow = m_live * row_u - row_ul
    sm = m_live[:, None] * sma - smb

    mux, muy = mu[live, 0], mu[live, 1]
    s_x = sm[:, 3] - mux * sm[:, 5]
    s_y = sm[:, 4] - muy * sm[:, 5]
    s_xx = sm[:, 0] - 2.0 * mux * sm[:, 3] + mux * mux * sm[:, 5]
    s_xy = sm[:, 1] - mux * sm[:, 4] - muy * sm[:, 3] + mux * muy * sm[:, 5]
    s_yy = sm[:, 2] - 2.0 * muy * sm[:, 4] + muy * muy * sm[:, 5]

    a11, a21, a22 = tri[live, 0], tri[live, 1], tri[live, 2]
    m11 = a11 * a11
    m21 = a11 * a21
    m22 = a21 * a21 + a22 * a22
    g_m[live] = row_u
    g_mu[live, 0] = 2.0 * (m11 * s_x + m21 * s_y)
    g_mu[live, 1] = 2.0 * (m21 * s_x + m22 * s_y)
    g_tri[live, 0] = -2.0 * (s_xx * a11 + s_xy * a21)
    g_tri[live, 1] = -2.0 * (s_xy * a11 + s_yy * a21)
    g_tri[live, 2] = -2.0 * (s_yy * a22)
    g_alpha[live] = crow / alpha[live]
    g_alpha[dead] = g_alpha_dead
    g_alpha += 2.0 * reg_weight * asum
    return loss, (g_m, g_mu, g_tri, g_alpha)


def loss_gradients(model: SmoeModel, target: Image, reg_weight: float = 0.0) -> Gradients:
    """Exact gradients of mse_loss + reg_weight * (sum alpha)^2.

    The Cholesky-factor gradient is restricted to the three free
    lower-triangular entries; the upper-right slot is always zero.
    """
    _check_dims(model, target)
    mu, tri, m, alpha = _packed(model)
    blocks = _grid_blocks(model.width, model.height, target.pixels)
    _, (g_m, g_mu, g_tri, g_alpha) = _loss_and_gradients_arrays(
        mu, tri, m, alpha, blocks, target.pixels.size, reg_weight
    )
    k = len(m)
    d_chol = np.zeros((k, 2, 2))
    d_chol[:, 0, 0] = g_tri[:, 0]
    d_chol[:, 1, 0] = g_tri[:, 1]
    d_chol[:, 1, 1] = g_tri[:, 2]
    return Gradients(d_mu=g_mu, d_cholA=d_chol, d_expert=g_m, d_alpha=g_alpha)


# ---------------------------------------------------------------------------
# serialization: textual "SMOE v1" format
# ---------------------------------------------------------------------------

_MAGIC = "SMOE v1"


def save_model(model: SmoeModel, path):
    """Write the line-oriented SMOE v1 format.

    Line 1 is the magic, line 2 "<width> <height> <K>", then one kernel per
    line: mu_x mu_y a11 a21 a22 expert alpha at 17 significant digits, so
    load(save(model)) is value-exact.
    """
    lines = [_MAGIC, f"{model.width} {model.height} {len(model.kernels)}"]
    for k in model.kernels:
        fields = (
            k.mu[0], k.mu[1],
            k.cholA[0, 0], k.cholA[1, 0], k.cholA[1, 1],
            k.expert, k.alpha,
        )
        lines.append(" ".join(f"{v:.17g}" for v in fields))
    data = ("\n".join(lines) + "\n").encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(data)


def load_model(path) -> SmoeModel:
    """Parse a SMOE v1 file; raises ParseError with the offending line."""
    with open(path, "rb") as fh:
        text = fh.read().decode("utf-8")
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines or lines[0] != _MAGIC:
        raise ParseError("expected 'SMOE v1' header", line=1)
    if len(lines) < 2:
        raise ParseError("missing dimension line", line=2)
    head = lines[1].split()
    if len(head) != 3:
        raise ParseError("expected '<width> <height> <K>'", line=2)
    try:
        width, height, count = (int(tok) for tok in head)
    except ValueError:
        raise ParseError("non-integer dimension field", line=2) from None
    if width <= 0 or height <= 0 or count < 0:
        raise ParseError("dimensions must be positive and K nonnegative", line=2)
    if len(lines) != 2 + count:
        bad = min(len(lines), 2 + count) + 1
        raise ParseError(
            f"expected {count} kernel lines, found {len(lines) - 2}", line=bad
        )
    kernels = []
    for i in range(count):
        lineno = 3 + i
        toks = lines[2 + i].split()
        if len(toks) != 7:
            raise ParseError(f"expected 7 fields, found {len(toks)}", line=lineno)
        try:
            vals = [float(tok) for tok in toks]
        except ValueError:
            raise ParseError("unparseable numeric field", line=lineno) from None
        if not all(math.isfinite(v) for v in vals):
            raise ParseError("non-finite value", line=lineno)
        kernels.append(
            Kernel(
                mu=np.array(vals[0:2]),
                cholA=np.array([[vals[2], 0.0], [vals[3], vals[4]]]),
                expert=vals[5],
                alpha=vals[6],
            )
        )
    return SmoeModel(kernels=kernels, width=width, height=height)
