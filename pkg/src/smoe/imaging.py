"""Grayscale image I/O and quality metrics.

Files are 8-bit binary PGM (P5, maxval 255); loading maps v -> v/255 and
saving maps v -> round(clamp(v, 0, 1) * 255), ties to even. Grayscale PNG is
accepted on load when Pillow is importable; output is always PGM.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.ndimage as ndi

from .errors import DimensionMismatch, ImageTooSmall, ParseError
from .model import Image

_PNG_MAGIC = b"\x89PNG\r\n\x1a\n"

_SSIM_WINDOW = 11
_SSIM_SIGMA = 1.5
_SSIM_C1 = 0.01 ** 2
_SSIM_C2 = 0.03 ** 2


@dataclass
class MetricReport:
    psnr_db: float
    ssim: float
    mse: float


def _read_pgm(data: bytes, path) -> Image:
    # PNM header: magic then width, height, maxval as whitespace-separated
    # tokens; '#' comments run to end of line.
    pos = [0]

    def next_token() -> bytes:
        i = pos[0]
        while i < len(data):
            c = data[i : i + 1]
            if c == b"#":
                while i < len(data) and data[i : i + 1] != b"\n":
                    i += 1
            elif c.isspace():
                i += 1
            else:
                break
        start = i
        while i < len(data) and not data[i : i + 1].isspace():
            i += 1
        pos[0] = i
        if start == i:
            raise ParseError(f"{path}: truncated header")
        return data[start:i]

    if next_token() != b"P5":
        raise ParseError(f"{path}: not a binary PGM (P5) file", line=1)
    try:
        width = int(next_token())
        height = int(next_token())
        maxval = int(next_token())
    except ValueError:
        raise ParseError(f"{path}: non-integer header field") from None
    if width <= 0 or height <= 0:
        raise ParseError(f"{path}: bad dimensions {width}x{height}")
    if maxval != 255:
        raise ParseError(f"{path}: unsupported depth (maxval {maxval}, want 255)")
    pos[0] += 1  # single whitespace byte separates header from raster
    raster = data[pos[0] : pos[0] + width * height]
    if len(raster) != width * height:
        raise ParseError(f"{path}: raster truncated ({len(raster)} of {width * height} bytes)")
    pixels = np.frombuffer(raster, dtype=np.uint8).astype(np.float64) / 255.0
    return Image(pixels.reshape(height, width))


def _read_png(path) -> Image:
    try:
        from PIL import Image as PilImage
    except ImportError:
        raise ParseError(f"{path}: PNG input needs Pillow, which is not installed") from None
    with PilImage.open(path) as img:
        gray = img.convert("L")
        pixels = np.asarray(gray, dtype=np.float64) / 255.0
    return Image(pixels)


def load_image(path) -> Image:
    with open(path, "rb") as fh:
        data = fh.read()
    if data.startswith(_PNG_MAGIC):
        return _read_png(path)
    return _read_pgm(data, path)


def save_image(image: Image, path):
    levels = np.rint(np.clip(image.pixels, 0.0, 1.0) * 255.0).astype(np.uint8)
    header = f"P5\n{image.width} {image.height}\n255\n".encode("ascii")
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(levels.tobytes())


def _check_pair(a: Image, b: Image):
    if a.width != b.width or a.height != b.height:
        raise DimensionMismatch(
            f"images are {a.width}x{a.height} and {b.width}x{b.height}"
        )


def mse(a: Image, b: Image) -> float:
    _check_pair(a, b)
    r = (a.pixels - b.pixels).ravel()
    return float(r @ r) / r.size


def psnr(a: Image, b: Image) -> float:
    """Peak signal-to-noise ratio in dB for unit dynamic range.

    Identical images return +inf.
    """
    err = mse(a, b)
    if err == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / err)


def _ssim_filter(arr: np.ndarray, window: np.ndarray) -> np.ndarray:
    half = len(window) // 2
    out = ndi.correlate1d(arr, window, axis=0, mode="constant")
    out = ndi.correlate1d(out, window, axis=1, mode="constant")
    return out[half:-half, half:-half]  # crop = 'valid' windowing


def ssim(a: Image, b: Image) -> float:
    """Mean local SSIM with an 11x11 Gaussian window (sigma 1.5), unit range."""
    _check_pair(a, b)
    if min(a.width, a.height) < _SSIM_WINDOW:
        raise ImageTooSmall(
            f"ssim needs both sides >= {_SSIM_WINDOW}, got {a.width}x{a.height}"
        )
    offsets = np.arange(_SSIM_WINDOW, dtype=np.float64) - (_SSIM_WINDOW // 2)
    window = np.exp(-(offsets ** 2) / (2.0 * _SSIM_SIGMA ** 2))
    window /= window.sum()

    x = a.pixels
    y = b.pixels
    mu_x = _ssim_filter(x, window)
    mu_y = _ssim_filter(y, window)
    var_x = _ssim_filter(x * x, window) - mu_x * mu_x
    var_y = _ssim_filter(y * y, window) - mu_y * mu_y
    cov = _ssim_filter(x * y, window) - mu_x * mu_y

    num = (2.0 * mu_x * mu_y + _SSIM_C1) * (2.0 * cov + _SSIM_C2)
    den = (mu_x * mu_x + mu_y * mu_y + _SSIM_C1) * (var_x + var_y + _SSIM_C2)
    return float(np.mean(num / den))


def compare(a: Image, b: Image) -> MetricReport:
    return MetricReport(psnr_db=psnr(a, b), ssim=ssim(a, b), mse=mse(a, b))
