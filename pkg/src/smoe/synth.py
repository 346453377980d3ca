"""Synthetic grayscale test images used by the experiment scripts and tests."""

from __future__ import annotations

import numpy as np

from .model import Image


def constant(width: int, height: int, value: float) -> Image:
    return Image(np.full((height, width), value))


def vertical_step(width: int, height: int, left: float = 0.0, right: float = 1.0) -> Image:
    px = np.full((height, width), left)
    px[:, width // 2 :] = right
    return Image(px)


def disk(
    width: int,
    height: int,
    radius: float | None = None,
    fg: float = 1.0,
    bg: float = 0.0,
) -> Image:
    """Filled circle centered in the frame; radius defaults to 0.3*min side."""
    r = radius if radius is not None else 0.3 * min(width, height)
    ys, xs = np.mgrid[0:height, 0:width]
    cx, cy = (width - 1) / 2.0, (height - 1) / 2.0
    inside = (xs - cx) ** 2 + (ys - cy) ** 2 <= r * r
    px = np.full((height, width), bg)
    px[inside] = fg
    return Image(px)


def crossing_bars(width: int, height: int, thickness: int | None = None) -> Image:
    """A horizontal and a vertical bright bar crossing mid-frame."""
    t = thickness if thickness is not None else max(4, min(width, height) // 8)
    px = np.full((height, width), 0.1)
    y0 = height // 2 - t // 2
    x0 = width // 2 - t // 2
    px[y0 : y0 + t, :] = 0.7
    px[:, x0 : x0 + t] = 0.9
    return Image(px)


def checkerboard_diagonal(width: int, height: int, cell: int = 16) -> Image:
    """Low-contrast checkerboard with a bright diagonal stripe on top."""
    ys, xs = np.mgrid[0:height, 0:width]
    board = ((xs // cell + ys // cell) % 2).astype(np.float64)
    px = 0.25 + 0.35 * board
    stripe = np.abs(xs - ys) <= max(3, cell // 3)
    px[stripe] = 0.95
    return Image(px)


def two_tone_gradient(width: int, height: int) -> Image:
    """Two horizontal ramps separated by a vertical step mid-frame."""
    xs = np.arange(width, dtype=np.float64)
    half = width // 2
    row = np.empty(width)
    row[:half] = 0.05 + 0.35 * xs[:half] / max(half - 1, 1)
    row[half:] = 0.60 + 0.35 * (xs[half:] - half) / max(width - half - 1, 1)
    return Image(np.tile(row, (height, 1)))


def composite(width: int, height: int) -> Image:
    """Edge-rich scene: disk, two bars, and a diagonal stripe."""
    px = disk(width, height, radius=0.28 * min(width, height), fg=0.85, bg=0.15).pixels
    t = max(4, min(width, height) // 16)
    px[height // 5 : height // 5 + t, :] = 0.6
    px[:, width // 6 : width // 6 + t] = 0.4
    ys, xs = np.mgrid[0:height, 0:width]
    px[np.abs((xs + ys) - (width + height) // 2) <= t // 2] = 0.95
    return Image(px)
