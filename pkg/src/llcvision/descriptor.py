"""Dense multi-scale SIFT-style descriptors sampled on a regular grid.

Each descriptor covers a square patch of 4x4 spatial bins of ``s`` pixels
for every configured bin size ``s``. Gradients come from central
differences with replicated borders, and magnitudes are spread bilinearly
over the spatial bins and linearly over 8 orientation bins. The window is
flat, without Gaussian weighting.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import CorruptHeaderError, EmptyDescriptorSetError
from .imageio import GrayImage

__all__ = [
    "DESCRIPTOR_DIM",
    "DescriptorConfig",
    "Descriptor",
    "DescriptorSet",
    "extract_dense",
    "grid_origins",
    "image_gradients",
    "normalize_sift",
    "write_descriptors",
    "read_descriptors",
]

SPATIAL_BINS = 4
ORIENTATION_BINS = 8
DESCRIPTOR_DIM = SPATIAL_BINS * SPATIAL_BINS * ORIENTATION_BINS
CLAMP = 0.2
FLAT_NORM = 1e-12


@dataclass(frozen=True)
class DescriptorConfig:
    step: int = 5
    bin_sizes: tuple[int, ...] = (4, 6)
    orientation_bins: int = ORIENTATION_BINS
    spatial_bins_per_axis: int = SPATIAL_BINS

    def __post_init__(self):
        object.__setattr__(self, "bin_sizes", tuple(int(s) for s in self.bin_sizes))
        if self.step < 1:
            raise ValueError("step must be >= 1")
        if not self.bin_sizes or any(s < 1 for s in self.bin_sizes):
            raise ValueError("bin_sizes must be a non-empty list of positive sizes")
        if (self.orientation_bins, self.spatial_bins_per_axis) != (
            ORIENTATION_BINS,
            SPATIAL_BINS,
        ):
            raise ValueError("only the 4x4x8 descriptor layout is supported")


@dataclass(frozen=True, eq=False)
class Descriptor:
    x: int
    y: int
    scale: int
    values: np.ndarray


@dataclass(eq=False)
class DescriptorSet:
    """Columnar storage for an ordered list of descriptors."""

    x: np.ndarray
    y: np.ndarray
    scale: np.ndarray
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.int32)
        self.y = np.asarray(self.y, dtype=np.int32)
        self.scale = np.asarray(self.scale, dtype=np.int32)
        self.values = np.asarray(self.values, dtype=np.float64).reshape(-1, DESCRIPTOR_DIM)

    def __len__(self):
        return self.values.shape[0]

    def __getitem__(self, i) -> Descriptor:
        return Descriptor(int(self.x[i]), int(self.y[i]), int(self.scale[i]), self.values[i])

    def __iter__(self):
        for i in range(len(self)):
            yield self[i]

    @classmethod
    def empty(cls) -> "DescriptorSet":
        z = np.zeros(0, dtype=np.int32)
        return cls(z, z, z, np.zeros((0, DESCRIPTOR_DIM)))

    @classmethod
    def concat(cls, sets) -> "DescriptorSet":
        sets = list(sets)
        if not sets:
            return cls.empty()
        return cls(
            np.concatenate([s.x for s in sets]),
            np.concatenate([s.y for s in sets]),
            np.concatenate([s.scale for s in sets]),
            np.concatenate([s.values for s in sets]),
        )

    def subset(self, idx) -> "DescriptorSet":
        return DescriptorSet(self.x[idx], self.y[idx], self.scale[idx], self.values[idx])

    @property
    def locations(self) -> np.ndarray:
        return np.stack([self.x, self.y], axis=1)

    def nonzero_mask(self) -> np.ndarray:
        return np.any(self.values != 0.0, axis=1)


def grid_origins(length: int, patch: int, step: int) -> np.ndarray:
    """Top-left offsets of every patch that fits entirely inside ``length``."""
    if patch > length:
        return np.zeros(0, dtype=np.intp)
    return np.arange(0, length - patch + 1, step)


def image_gradients(pixels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Central-difference gradients (gx, gy) with replicated borders."""
    p = np.pad(np.asarray(pixels, dtype=np.float64), 1, mode="edge")
    gx = 0.5 * (p[1:-1, 2:] - p[1:-1, :-2])
    gy = 0.5 * (p[2:, 1:-1] - p[:-2, 1:-1])
    return gx, gy


def _orientation_planes(gx: np.ndarray, gy: np.ndarray) -> np.ndarray:
    mag = np.hypot(gx, gy)
    theta = np.mod(np.arctan2(gy, gx), 2.0 * np.pi)
    o = theta * (ORIENTATION_BINS / (2.0 * np.pi))
    o0 = np.floor(o)
    frac = o - o0
    o0 = o0.astype(np.intp) % ORIENTATION_BINS
    o1 = (o0 + 1) % ORIENTATION_BINS
    planes = np.zeros((ORIENTATION_BINS,) + gx.shape)
    rows, cols = np.indices(gx.shape)
    # o0 != o1, so each fancy index below is unique per pixel
    planes[o0, rows, cols] = mag * (1.0 - frac)
    planes[o1, rows, cols] += mag * frac
    return planes


def _spatial_weights(bin_size: int) -> np.ndarray:
    """(4, 4*bin_size) bilinear weights of each patch offset to each bin centre."""
    u = (np.arange(SPATIAL_BINS * bin_size) + 0.5) / bin_size - 0.5
    centres = np.arange(SPATIAL_BINS)[:, None]
    return np.maximum(0.0, 1.0 - np.abs(u[None, :] - centres))


def normalize_sift(values: np.ndarray, return_clamped: bool = False):
    """L2-normalize, clamp at 0.2 and renormalize each row.

    Rows whose norm is below 1e-12 are returned as exact zeros. With
    ``return_clamped`` the intermediate clamped rows are also returned.
    """
    v = np.array(values, dtype=np.float64, ndmin=2)
    norms = np.linalg.norm(v, axis=1)
    flat = norms < FLAT_NORM
    safe = np.where(flat, 1.0, norms)
    v = v / safe[:, None]
    v[flat] = 0.0
    clamped = np.minimum(v, CLAMP)
    n2 = np.linalg.norm(clamped, axis=1)
    out = clamped / np.where(flat, 1.0, n2)[:, None]
    out[flat] = 0.0
    if return_clamped:
        return out, clamped
    return out


def extract_dense(img, cfg: DescriptorConfig = DescriptorConfig()) -> DescriptorSet:
    """Extract descriptors at every grid point of every configured scale.

    ``img`` is a :class:`GrayImage` or any 2-D array of intensities. Results
    are ordered by (scale, y, x) with scales ascending.
    """
    pixels = img.pixels if isinstance(img, GrayImage) else np.asarray(img, dtype=np.float64)
    if pixels.ndim != 2:
        raise ValueError("expected a 2-D image")
    height, width = pixels.shape
    gx, gy = image_gradients(pixels)
    planes = _orientation_planes(gx, gy)

    parts = []
    for s in sorted(set(cfg.bin_sizes)):
        patch = SPATIAL_BINS * s
        ys = grid_origins(height, patch, cfg.step)
        xs = grid_origins(width, patch, cfg.step)
        if ys.size == 0 or xs.size == 0:
            continue
        w = _spatial_weights(s)
        # (8, ny, nx, patch, patch) strided view; never materialized whole
        win = sliding_window_view(planes, (patch, patch), axis=(1, 2))
        win = win[:, :: cfg.step, :: cfg.step]
        # contract patch columns then rows: -> (orient, ny, nx, col, row)
        t = np.tensordot(win, w, axes=([4], [1]))
        t = np.tensordot(t, w, axes=([3], [1]))
        t = np.moveaxis(t, [0, 3, 4], [4, 3, 2])  # (ny, nx, row, col, orient)
        raw = t.reshape(ys.size * xs.size, DESCRIPTOR_DIM)
        gy_, gx_ = np.meshgrid(ys, xs, indexing="ij")
        parts.append(
            DescriptorSet(
                gx_.ravel() + 2 * s,
                gy_.ravel() + 2 * s,
                np.full(raw.shape[0], s),
                normalize_sift(raw),
            )
        )
    if not parts:
        raise EmptyDescriptorSetError(
            f"image {width}x{height} cannot hold a patch at any bin size {cfg.bin_sizes}"
        )
    return DescriptorSet.concat(parts)


# Binary layout (little endian):
#   magic b"LLCD", u32 version, u32 count, u32 dim,
#   then per record: i32 x, i32 y, i32 scale, dim x f32.
_DESC_MAGIC = b"LLCD"
_DESC_VERSION = 1


def _record_dtype(dim: int) -> np.dtype:
    return np.dtype([("x", "<i4"), ("y", "<i4"), ("scale", "<i4"), ("v", "<f4", (dim,))])


def write_descriptors(ds: DescriptorSet, path) -> None:
    rec = np.zeros(len(ds), dtype=_record_dtype(DESCRIPTOR_DIM))
    rec["x"], rec["y"], rec["scale"], rec["v"] = ds.x, ds.y, ds.scale, ds.values
    with open(path, "wb") as fh:
        fh.write(_DESC_MAGIC + struct.pack("<III", _DESC_VERSION, len(ds), DESCRIPTOR_DIM))
        fh.write(rec.tobytes())


def read_descriptors(path) -> DescriptorSet:
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 16 or data[:4] != _DESC_MAGIC:
        raise CorruptHeaderError(f"{path}: not a descriptor file")
    version, count, dim = struct.unpack("<III", data[4:16])
    if version != _DESC_VERSION:
        raise CorruptHeaderError(f"{path}: unsupported version {version}")
    dt = _record_dtype(dim)
    if len(data) - 16 != count * dt.itemsize:
        raise CorruptHeaderError(f"{path}: record block size mismatch")
    rec = np.frombuffer(data[16:], dtype=dt, count=count)
    return DescriptorSet(rec["x"], rec["y"], rec["scale"], rec["v"].astype(np.float64))
