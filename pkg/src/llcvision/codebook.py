"""Visual codebook learning: descriptor pool sampling and k-means."""
from __future__ import annotations

import hashlib
import logging
import struct
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse

from .descriptor import DescriptorConfig, DescriptorSet, extract_dense
from .errors import (
    CorruptHeaderError,
    NoDescriptorsError,
    PoolShortfallWarning,
    PoolTooSmallError,
)
from .imageio import load_gray

log = logging.getLogger(__name__)

__all__ = [
    "Codebook",
    "KMeansConfig",
    "KMeansResult",
    "sample_pool",
    "kmeans",
    "kmeans_pp_init",
    "lloyd_step",
    "write_codebook",
    "read_codebook",
]

_CHUNK = 4096


@dataclass(frozen=True, eq=False)
class Codebook:
    """M cluster centres. Values are kept exactly representable in float32."""

    bases: np.ndarray

    def __post_init__(self):
        b = np.asarray(self.bases, dtype=np.float32).astype(np.float64)
        if b.ndim != 2 or b.shape[0] < 1:
            raise ValueError("codebook needs at least one basis")
        if not np.all(np.isfinite(b)):
            raise ValueError("codebook bases must be finite")
        b.setflags(write=False)
        object.__setattr__(self, "bases", b)

    @property
    def M(self) -> int:
        return self.bases.shape[0]

    @property
    def dim(self) -> int:
        return self.bases.shape[1]

    def digest(self) -> str:
        return hashlib.sha256(self.bases.astype("<f4").tobytes()).hexdigest()

    def __eq__(self, other):
        if not isinstance(other, Codebook):
            return NotImplemented
        return np.array_equal(self.bases, other.bases)

    __hash__ = None


@dataclass(frozen=True)
class KMeansConfig:
    M: int = 256
    max_iters: int = 100
    seed: int = 0
    tol: float = 1e-4

    def __post_init__(self):
        if self.M < 1:
            raise ValueError("M must be >= 1")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if self.tol < 0:
            raise ValueError("tol must be non-negative")


@dataclass
class KMeansResult:
    codebook: Codebook
    distortion: list[float] = field(default_factory=list)
    iterations: int = 0


def sample_pool(dataset, cfg: DescriptorConfig, target: int, seed: int,
                max_images: int | None = None, transform=None) -> DescriptorSet:
    """Collect a shuffled pool of non-zero descriptors from a random image subset.

    ``transform`` (e.g. preprocessing) is applied to each loaded image before
    extraction. Warns with :class:`PoolShortfallWarning` when fewer than
    ``target`` descriptors exist.
    """
    paths = list(dataset)
    if not paths:
        raise ValueError("dataset is empty")
    if target < 1:
        raise ValueError("target must be >= 1")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(paths))
    if max_images is not None:
        order = order[:max_images]
    sets = []
    for i in order:
        img = load_gray(paths[i])
        if transform is not None:
            img = transform(img)
        ds = extract_dense(img, cfg)
        sets.append(ds.subset(ds.nonzero_mask()))
    pool = DescriptorSet.concat(sets)
    if len(pool) == 0:
        raise NoDescriptorsError("no non-zero descriptors in the sampled images")
    pool = pool.subset(rng.permutation(len(pool))[:target])
    if len(pool) < target:
        warnings.warn(
            f"descriptor pool has {len(pool)} entries, fewer than the requested {target}",
            PoolShortfallWarning,
            stacklevel=2,
        )
    return pool


def _sq_dists(X, C, x2=None):
    """Squared distances, chunked over rows of X; clipped at zero."""
    if x2 is None:
        x2 = np.einsum("ij,ij->i", X, X)
    c2 = np.einsum("ij,ij->i", C, C)
    out = np.empty((X.shape[0], C.shape[0]))
    for s in range(0, X.shape[0], _CHUNK):
        e = s + _CHUNK
        d = x2[s:e, None] - 2.0 * (X[s:e] @ C.T) + c2[None, :]
        np.maximum(d, 0.0, out=out[s:e])
    return out


def _assign(X, C, x2):
    labels = np.empty(X.shape[0], dtype=np.int64)
    mind = np.empty(X.shape[0])
    for s in range(0, X.shape[0], _CHUNK):
        e = s + _CHUNK
        d = _sq_dists(X[s:e], C, x2[s:e])
        labels[s:e] = np.argmin(d, axis=1)
        # exact residuals for the distortion; the expansion is only used to rank
        diff = X[s:e] - C[labels[s:e]]
        mind[s:e] = np.einsum("ij,ij->i", diff, diff)
    return labels, mind


def kmeans_pp_init(X: np.ndarray, M: int, rng: np.random.Generator) -> np.ndarray:
    n = X.shape[0]
    centers = np.empty((M, X.shape[1]))
    first = int(rng.integers(n))
    centers[0] = X[first]
    diff = X - X[first]
    d2 = np.einsum("ij,ij->i", diff, diff)
    for j in range(1, M):
        total = d2.sum()
        if total <= 0.0:
            raise PoolTooSmallError(f"pool has fewer than M={M} distinct points")
        pick = int(np.searchsorted(np.cumsum(d2), rng.random() * total, side="right"))
        pick = min(pick, n - 1)
        while d2[pick] <= 0.0:  # guard against landing on a zero-weight point
            pick = (pick + 1) % n
        centers[j] = X[pick]
        diff = X - X[pick]
        np.minimum(d2, np.einsum("ij,ij->i", diff, diff), out=d2)
    return centers


def lloyd_step(X: np.ndarray, C: np.ndarray, x2=None):
    """One assignment + update; returns (new_centers, labels, distortion_before_update).

    Empty clusters are moved onto the points farthest from their centres.
    """
    if x2 is None:
        x2 = np.einsum("ij,ij->i", X, X)
    labels, mind = _assign(X, C, x2)
    M = C.shape[0]
    counts = np.bincount(labels, minlength=M)
    onehot = sparse.csr_matrix(
        (np.ones(X.shape[0]), (labels, np.arange(X.shape[0]))), shape=(M, X.shape[0])
    )
    sums = onehot @ X
    new = C.copy()
    nz = counts > 0
    new[nz] = sums[nz] / counts[nz, None]
    empty = np.flatnonzero(~nz)
    if empty.size:
        far = np.argsort(-mind, kind="stable")[: empty.size]
        new[empty] = X[far]
    return new, labels, float(mind.sum())


def kmeans(pool, cfg: KMeansConfig = KMeansConfig(), return_result: bool = False):
    """k-means++ seeding followed by Lloyd iterations.

    Stops after ``cfg.max_iters`` updates or once the relative change in
    total distortion drops below ``cfg.tol``.
    """
    X = np.asarray(getattr(pool, "values", pool), dtype=np.float64)
    if X.shape[0] < cfg.M:
        raise PoolTooSmallError(f"pool of {X.shape[0]} points is smaller than M={cfg.M}")
    rng = np.random.default_rng(cfg.seed)
    C = kmeans_pp_init(X, cfg.M, rng)
    x2 = np.einsum("ij,ij->i", X, X)
    history = []
    it = 0
    for it in range(1, cfg.max_iters + 1):
        C, _, dist = lloyd_step(X, C, x2)
        history.append(dist)
        if len(history) >= 2:
            prev = history[-2]
            if prev == 0.0 or abs(prev - dist) / prev < cfg.tol:
                break
    log.debug("kmeans M=%d stopped after %d iterations, distortion %.6g", cfg.M, it, history[-1])
    cb = Codebook(C)
    if np.unique(cb.bases, axis=0).shape[0] != cb.M:
        raise PoolTooSmallError("k-means produced coincident centres")
    if return_result:
        return KMeansResult(cb, history, it)
    return cb


# Binary layout (little endian): magic b"LLCB", u32 version, u32 M, u32 dim,
# then M*dim f32 values, row-major.
_CB_MAGIC = b"LLCB"
_CB_VERSION = 1


def codebook_to_bytes(cb: Codebook) -> bytes:
    return (
        _CB_MAGIC
        + struct.pack("<III", _CB_VERSION, cb.M, cb.dim)
        + cb.bases.astype("<f4").tobytes()
    )


def codebook_from_bytes(data: bytes) -> Codebook:
    if len(data) < 16 or data[:4] != _CB_MAGIC:
        raise CorruptHeaderError("not a codebook record")
    version, M, dim = struct.unpack("<III", data[4:16])
    if version != _CB_VERSION:
        raise CorruptHeaderError(f"unsupported codebook version {version}")
    if dim < 1:
        raise CorruptHeaderError(f"bad codebook dimension {dim}")
    if len(data) != 16 + 4 * M * dim:
        raise CorruptHeaderError("codebook payload size mismatch")
    return Codebook(np.frombuffer(data, dtype="<f4", offset=16).reshape(M, dim))


def write_codebook(cb: Codebook, path) -> None:
    with open(path, "wb") as fh:
        fh.write(codebook_to_bytes(cb))


def read_codebook(path) -> Codebook:
    with open(path, "rb") as fh:
        return codebook_from_bytes(fh.read())
