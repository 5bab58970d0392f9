"""Image ingestion (binary PGM/PPM) and the sliding-window front end."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .binio import FormatError

DEFAULT_WINDOW_EDGE = 24
DEFAULT_STRIDE = 4
DEFAULT_SCALE_FACTOR = 1.25


@dataclass(frozen=True, eq=False)
class GrayImage:
    pixels: np.ndarray          # (height, width), values in [0, 1]

    def __post_init__(self):
        p = np.array(self.pixels, dtype=np.float64, copy=True)
        if p.ndim != 2 or p.size == 0:
            raise ValueError("image must be a non-empty 2-D array")
        if np.any(p < 0.0) or np.any(p > 1.0) or not np.all(np.isfinite(p)):
            raise ValueError("pixel intensities must lie in [0, 1]")
        p.setflags(write=False)
        object.__setattr__(self, "pixels", p)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    def __eq__(self, other):
        if not isinstance(other, GrayImage):
            return NotImplemented
        return np.array_equal(self.pixels, other.pixels)


@dataclass(frozen=True, eq=False)
class DetectionWindow:
    origin_x: int               # source-image coordinates
    origin_y: int
    scale: float                # source pixels per level pixel
    vector: np.ndarray

    @property
    def edge_in_source(self) -> float:
        return math.sqrt(self.vector.size) * self.scale


# --- PNM ----------------------------------------------------------------------

def _header_tokens(data: bytes, count: int) -> tuple[list[int], int]:
    """Read ``count`` whitespace-separated integers after the magic, skipping comments."""
    tokens, pos, n = [], 2, len(data)
    while len(tokens) < count:
        while pos < n and (data[pos:pos + 1].isspace() or data[pos] == ord("#")):
            if data[pos] == ord("#"):
                while pos < n and data[pos] not in (10, 13):
                    pos += 1
            else:
                pos += 1
        start = pos
        while pos < n and data[pos:pos + 1].isdigit():
            pos += 1
        if start == pos:
            raise FormatError("truncated or malformed PNM header", start)
        tokens.append(int(data[start:pos]))
    if pos >= n or not data[pos:pos + 1].isspace():
        raise FormatError("truncated or malformed PNM header", pos)
    return tokens, pos + 1


def load_image(data: bytes) -> GrayImage:
    """Decode binary PGM (P5) or PPM (P6). Colour is reduced by averaging the channels."""
    magic = data[:2]
    if magic not in (b"P5", b"P6"):
        raise FormatError(f"unsupported image magic {magic!r}", 0)
    (width, height, maxval), pos = _header_tokens(data, 3)
    if width == 0 or height == 0:
        raise FormatError("zero image dimension", 0)
    if not 0 < maxval < 65536:
        raise FormatError(f"bad maxval {maxval}", 0)
    channels = 3 if magic == b"P6" else 1
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    need = width * height * channels * dtype.itemsize
    if len(data) - pos < need:
        raise FormatError(f"truncated pixel data: need {need} bytes, have {len(data) - pos}", pos)
    raw = np.frombuffer(data, dtype=dtype, count=width * height * channels, offset=pos)
    px = raw.astype(np.float64).reshape(height, width, channels).mean(axis=2) / maxval
    return GrayImage(np.clip(px, 0.0, 1.0))


def load_image_file(path) -> GrayImage:
    with open(path, "rb") as fh:
        return load_image(fh.read())


def image_to_pgm(img: GrayImage) -> bytes:
    px = np.rint(img.pixels * 255).astype(np.uint8)
    return b"P5\n%d %d\n255\n" % (img.width, img.height) + px.tobytes()


# --- pyramid and windows --------------------------------------------------------

def resize_bilinear(img: GrayImage, width: int, height: int) -> GrayImage:
    """Pixel-centre aligned bilinear resampling."""
    src = img.pixels
    h, w = src.shape

    def coords(n_out, n_in):
        c = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        c = np.clip(c, 0.0, n_in - 1)
        lo = np.floor(c).astype(int)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, c - lo

    y0, y1, fy = coords(height, h)
    x0, x1, fx = coords(width, w)
    top = src[y0][:, x0] * (1 - fx) + src[y0][:, x1] * fx
    bot = src[y1][:, x0] * (1 - fx) + src[y1][:, x1] * fx
    out = top * (1 - fy)[:, None] + bot * fy[:, None]
    return GrayImage(np.clip(out, 0.0, 1.0))


def build_pyramid(img: GrayImage, scale_factor: float = DEFAULT_SCALE_FACTOR,
                  min_edge: int = DEFAULT_WINDOW_EDGE) -> list[tuple[GrayImage, float]]:
    """Levels (image, scale) with level k sized floor(original / scale_factor**k).

    Stops before either side drops below ``min_edge``.
    """
    if scale_factor <= 1.0:
        raise ValueError("scale_factor must be > 1")
    if min_edge < 1:
        raise ValueError("min_edge must be positive")
    levels = []
    k = 0
    while True:
        scale = scale_factor ** k
        w = math.floor(img.width / scale)
        h = math.floor(img.height / scale)
        if w < min_edge or h < min_edge:
            break
        levels.append((img if k == 0 else resize_bilinear(img, w, h), scale))
        k += 1
    return levels


def normalize_window(raw) -> np.ndarray:
    """Zero mean, unit population standard deviation; constant input maps to zeros."""
    v = np.asarray(raw, dtype=np.float64).ravel()
    if v.size == 0:
        raise ValueError("empty window")
    v = v - v.mean()
    sd = v.std()
    if sd < 1e-12:
        return np.zeros_like(v)
    return v / sd


def extract_windows(img: GrayImage, window_edge: int = DEFAULT_WINDOW_EDGE,
                    stride: int = DEFAULT_STRIDE, scale: float = 1.0) -> list[DetectionWindow]:
    """All stride-aligned windows fully inside ``img``, row-major.

    ``scale`` maps level coordinates back to the source image.
    """
    if stride < 1:
        raise ValueError("stride must be >= 1")
    if window_edge < 1:
        raise ValueError("window_edge must be positive")
    px = img.pixels
    out = []
    for y in range(0, img.height - window_edge + 1, stride):
        for x in range(0, img.width - window_edge + 1, stride):
            vec = normalize_window(px[y:y + window_edge, x:x + window_edge])
            out.append(DetectionWindow(math.floor(x * scale), math.floor(y * scale), scale, vec))
    return out


def pyramid_windows(img: GrayImage, window_edge: int = DEFAULT_WINDOW_EDGE,
                    stride: int = DEFAULT_STRIDE, scale_factor: float = DEFAULT_SCALE_FACTOR,
                    min_edge: int | None = None) -> list[DetectionWindow]:
    """Windows from every pyramid level, level 0 first."""
    min_edge = window_edge if min_edge is None else min_edge
    if min_edge < window_edge:
        raise ValueError("min_edge must be >= window_edge")
    out = []
    for level, scale in build_pyramid(img, scale_factor, min_edge):
        out.extend(extract_windows(level, window_edge, stride, scale))
    return out
