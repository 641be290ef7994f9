"""Image loading and the illumination/noise preprocessing chain.

Only 8-bit binary PGM (P5) and PPM (P6) are parsed natively; PNG goes through
Pillow when it is installed.
"""
from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import CorruptHeaderError, ImageTooSmallError, UnsupportedFormatError

__all__ = [
    "GrayImage",
    "PreprocessConfig",
    "load_gray",
    "save_pgm",
    "clahe",
    "median_filter",
    "preprocess",
    "rgb_to_gray",
]


@dataclass(frozen=True, eq=False)
class GrayImage:
    """8-bit grayscale image, ``pixels`` has shape (height, width)."""

    pixels: np.ndarray

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if px.ndim != 2 or px.size == 0:
            raise ValueError(f"expected a non-empty 2-D array, got shape {px.shape}")
        if px.dtype != np.uint8:
            if np.any(px < 0) or np.any(px > 255):
                raise ValueError("pixel values must lie in [0, 255]")
            px = px.astype(np.uint8)
        px = np.ascontiguousarray(px)
        px.setflags(write=False)
        object.__setattr__(self, "pixels", px)

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    def __eq__(self, other):
        if not isinstance(other, GrayImage):
            return NotImplemented
        return np.array_equal(self.pixels, other.pixels)

    def __hash__(self):
        return hash((self.pixels.shape, self.pixels.tobytes()))

    @classmethod
    def from_list(cls, width: int, height: int, values) -> "GrayImage":
        arr = np.asarray(values, dtype=np.int64)
        if arr.size != width * height:
            raise ValueError("pixel count does not match width x height")
        return cls(arr.reshape(height, width))


@dataclass(frozen=True)
class PreprocessConfig:
    clahe_tiles_x: int = 8
    clahe_tiles_y: int = 8
    clahe_clip_limit: float = 2.0
    median_radius: int = 1

    def __post_init__(self):
        if self.clahe_tiles_x < 1 or self.clahe_tiles_y < 1:
            raise ValueError("CLAHE tile counts must be >= 1")
        if not self.clahe_clip_limit >= 1.0:
            raise ValueError("CLAHE clip limit must be >= 1.0")
        if self.median_radius < 0:
            raise ValueError("median radius must be >= 0")


# --------------------------------------------------------------------------
# Netpbm I/O
# --------------------------------------------------------------------------

def rgb_to_gray(rgb: np.ndarray) -> np.ndarray:
    """BT.601 luma, rounded half away from zero."""
    rgb = np.asarray(rgb, dtype=np.float64)
    luma = 0.299 * rgb[..., 0] + 0.587 * rgb[..., 1] + 0.114 * rgb[..., 2]
    return np.clip(np.floor(luma + 0.5), 0, 255).astype(np.uint8)


def _read_header_tokens(data: bytes, count: int) -> tuple[list[bytes], int]:
    """Read `count` whitespace-separated header tokens, skipping comments."""
    tokens = []
    pos = 0
    n = len(data)
    while len(tokens) < count:
        while pos < n and data[pos:pos + 1].isspace():
            pos += 1
        if pos < n and data[pos:pos + 1] == b"#":
            while pos < n and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        if pos >= n:
            raise CorruptHeaderError("header ended before all fields were read")
        start = pos
        while pos < n and not data[pos:pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    # exactly one whitespace byte separates the header from the raster
    if pos >= n or not data[pos:pos + 1].isspace():
        raise CorruptHeaderError("missing whitespace after header")
    return tokens, pos + 1


def _parse_netpbm(data: bytes, path: str) -> np.ndarray:
    magic = data[:2]
    channels = {b"P5": 1, b"P6": 3}.get(magic)
    if channels is None:
        raise UnsupportedFormatError(f"{path}: unsupported netpbm variant {magic!r}")
    tokens, offset = _read_header_tokens(data[2:], 3)
    try:
        width, height, maxval = (int(t) for t in tokens)
    except ValueError as exc:
        raise CorruptHeaderError(f"{path}: non-integer header field") from exc
    if width <= 0 or height <= 0:
        raise CorruptHeaderError(f"{path}: non-positive dimensions {width}x{height}")
    if maxval != 255:
        raise UnsupportedFormatError(f"{path}: maxval {maxval} (only 255 supported)")
    raster = data[2 + offset:]
    expected = width * height * channels
    if len(raster) < expected:
        raise CorruptHeaderError(
            f"{path}: truncated raster ({len(raster)} of {expected} bytes)"
        )
    arr = np.frombuffer(raster[:expected], dtype=np.uint8)
    if channels == 1:
        return arr.reshape(height, width)
    return rgb_to_gray(arr.reshape(height, width, 3))


def load_gray(path) -> GrayImage:
    """Load a PGM/PPM (or PNG, via Pillow) file as a grayscale image."""
    path = os.fspath(path)
    if not os.path.isfile(path):
        raise FileNotFoundError(path)
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:1] == b"P":
        return GrayImage(_parse_netpbm(data, path))
    if data[:8] == b"\x89PNG\r\n\x1a\n":
        try:
            from PIL import Image
        except ImportError as exc:  # pragma: no cover - Pillow is optional
            raise UnsupportedFormatError(f"{path}: PNG support needs Pillow") from exc
        with Image.open(path) as im:
            if im.mode in ("L", "LA"):
                arr = np.asarray(im.convert("L"))
            else:
                arr = rgb_to_gray(np.asarray(im.convert("RGB")))
        return GrayImage(arr)
    raise UnsupportedFormatError(f"{path}: unrecognised image format")


def save_pgm(img: GrayImage, path) -> None:
    header = f"P5\n{img.width} {img.height}\n255\n".encode("ascii")
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(img.pixels.tobytes())


# --------------------------------------------------------------------------
# CLAHE
# --------------------------------------------------------------------------

def _tile_edges(length: int, tiles: int) -> np.ndarray:
    return (np.arange(tiles + 1) * length) // tiles


def _clip_histogram(hist: np.ndarray, limit: float) -> np.ndarray:
    """Clip a normalized histogram and spread the excess over all bins.

    Two capped redistribution passes; whatever is still left over is then
    added uniformly without regard to the ceiling so the mass is preserved.
    """
    h = np.minimum(hist, limit)
    excess = float(hist.sum() - h.sum())
    for _ in range(2):
        if excess <= 0.0:
            break
        room = limit - h
        add = np.minimum(excess / h.size, room)
        h = h + add
        excess -= float(add.sum())
    if excess > 0.0:
        h = h + excess / h.size
    return h


def _tile_mapping(tile: np.ndarray, clip_limit: float) -> np.ndarray:
    counts = np.bincount(tile.ravel(), minlength=256).astype(np.float64)
    hist = counts / tile.size
    hist = _clip_histogram(hist, clip_limit / 256.0)
    cdf = np.cumsum(hist)
    # the epsilon absorbs cumulative-sum rounding just below an integer
    return np.clip(np.floor(255.0 * cdf + 1e-9), 0, 255)


def _interp_axis(length: int, edges: np.ndarray):
    """Lower tile index and upper-tile weight for every coordinate on one axis."""
    centers = 0.5 * (edges[:-1] + edges[1:]) - 0.5
    coords = np.arange(length, dtype=np.float64)
    n = centers.size
    if n == 1:
        return np.zeros(length, dtype=np.intp), np.zeros(length)
    lo = np.clip(np.searchsorted(centers, coords, side="right") - 1, 0, n - 2)
    w = (coords - centers[lo]) / (centers[lo + 1] - centers[lo])
    return lo, np.clip(w, 0.0, 1.0)


def clahe(img: GrayImage, cfg: PreprocessConfig = PreprocessConfig()) -> GrayImage:
    """Contrast-limited adaptive histogram equalization.

    The image is split into a ``clahe_tiles_y x clahe_tiles_x`` grid with
    floor-based edges. Each tile's histogram is clipped at
    ``clahe_clip_limit`` times the uniform bin height and equalized; output
    pixels bilinearly blend the mappings of the surrounding tile centres.
    """
    h, w = img.height, img.width
    ty, tx = cfg.clahe_tiles_y, cfg.clahe_tiles_x
    if w < tx or h < ty:
        raise ImageTooSmallError(
            f"image {w}x{h} is smaller than the {tx}x{ty} tile grid"
        )
    px = img.pixels
    ey, ex = _tile_edges(h, ty), _tile_edges(w, tx)
    maps = np.empty((ty, tx, 256))
    for i in range(ty):
        for j in range(tx):
            tile = px[ey[i]:ey[i + 1], ex[j]:ex[j + 1]]
            maps[i, j] = _tile_mapping(tile, cfg.clahe_clip_limit)

    yi, wy = _interp_axis(h, ey)
    xi, wx = _interp_axis(w, ex)
    yi1 = np.minimum(yi + 1, ty - 1)
    xi1 = np.minimum(xi + 1, tx - 1)
    Y, X = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    v = px.astype(np.intp)
    wy2, wx2 = wy[Y], wx[X]
    out = (
        (1 - wy2) * (1 - wx2) * maps[yi[Y], xi[X], v]
        + (1 - wy2) * wx2 * maps[yi[Y], xi1[X], v]
        + wy2 * (1 - wx2) * maps[yi1[Y], xi[X], v]
        + wy2 * wx2 * maps[yi1[Y], xi1[X], v]
    )
    return GrayImage(np.clip(np.rint(out), 0, 255).astype(np.uint8))


def median_filter(img: GrayImage, radius: int = 1) -> GrayImage:
    """Median over a (2r+1)x(2r+1) window with replicated borders."""
    if radius < 0:
        raise ValueError("radius must be >= 0")
    if radius == 0:
        return img
    out = ndimage.median_filter(img.pixels, size=2 * radius + 1, mode="nearest")
    return GrayImage(out)


def preprocess(img: GrayImage, cfg: PreprocessConfig = PreprocessConfig()) -> GrayImage:
    """CLAHE followed by median filtering."""
    return median_filter(clahe(img, cfg), cfg.median_radius)
