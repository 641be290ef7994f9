"""Locality-constrained linear coding and spatial-pyramid max pooling.

Each descriptor ``x`` is reconstructed from its K nearest bases ``B~`` by
minimizing::

    0.5 * ||x - B~ a||^2 + sum_j (a_j * w_j)^2,   w_j = exp(d_j / sigma)

with ``d_j = ||x - b_j||``. The minimizer solves the K x K SPD system
``(B~^T B~ + 2 diag(w^2)) a = B~^T x``.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass

import numba
import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .codebook import Codebook
from .descriptor import DescriptorSet
from .errors import CorruptHeaderError, InvariantViolation
from .kdtree import KdTree, _check_budget, _knn_one, _tree_args

__all__ = [
    "LLCConfig",
    "SparseCode",
    "CodeSet",
    "PyramidConfig",
    "locality_weights",
    "llc_objective",
    "llc_gradient",
    "llc_solve",
    "llc_encode",
    "encode_image",
    "spm_pool",
    "feature_dim",
    "cell_edges",
    "write_feature",
    "read_feature",
    "format_sparse_line",
    "write_sparse_text",
]

WEIGHT_MODES = ("exp_ratio", "exp_over_sigma")


@dataclass(frozen=True)
class LLCConfig:
    """``weight_mode='exp_ratio'`` uses exp(d/sigma); 'exp_over_sigma' uses exp(d)/sigma."""

    K: int = 5
    sigma: float = 1.0
    max_comparisons: int | None = 100
    weight_mode: str = "exp_ratio"

    def __post_init__(self):
        if self.K < 1:
            raise ValueError("K must be >= 1")
        if not self.sigma > 0:
            raise ValueError("sigma must be positive")
        if self.weight_mode not in WEIGHT_MODES:
            raise ValueError(f"weight_mode must be one of {WEIGHT_MODES}")
        if self.max_comparisons is not None and self.max_comparisons < 0:
            object.__setattr__(self, "max_comparisons", None)


@dataclass(frozen=True, eq=False)
class SparseCode:
    indices: np.ndarray
    coeffs: np.ndarray

    def dense(self, M: int) -> np.ndarray:
        v = np.zeros(M)
        v[self.indices] = self.coeffs
        return v


@dataclass(eq=False)
class CodeSet:
    """Codes of one image: ``locations`` (n, 2) as (x, y), ``indices``/``coeffs`` (n, K)."""

    locations: np.ndarray
    indices: np.ndarray
    coeffs: np.ndarray
    comparisons: np.ndarray | None = None

    def __len__(self):
        return self.indices.shape[0]

    def __getitem__(self, i):
        loc = (int(self.locations[i, 0]), int(self.locations[i, 1]))
        return loc, SparseCode(self.indices[i], self.coeffs[i])

    def __iter__(self):
        for i in range(len(self)):
            yield self[i]

    @classmethod
    def from_pairs(cls, pairs) -> "CodeSet":
        pairs = list(pairs)
        if not pairs:
            return cls(np.zeros((0, 2), dtype=np.int64), np.zeros((0, 0), dtype=np.int64),
                       np.zeros((0, 0)))
        locs = np.array([p[0] for p in pairs], dtype=np.int64).reshape(-1, 2)
        idx = np.array([p[1].indices for p in pairs], dtype=np.int64)
        co = np.array([p[1].coeffs for p in pairs], dtype=np.float64)
        return cls(locs, idx, co)


# --------------------------------------------------------------------------
# objective and reference solve
# --------------------------------------------------------------------------

def locality_weights(dists, sigma: float, mode: str = "exp_ratio") -> np.ndarray:
    d = np.asarray(dists, dtype=np.float64)
    if mode == "exp_ratio":
        return np.exp(d / sigma)
    if mode == "exp_over_sigma":
        return np.exp(d) / sigma
    raise ValueError(f"unknown weight mode {mode!r}")


def llc_objective(x, bases, weights, alpha) -> float:
    """``bases`` holds the selected bases as rows (K, D)."""
    x, B = np.asarray(x, float), np.atleast_2d(np.asarray(bases, float))
    r = x - alpha @ B
    return float(0.5 * r @ r + np.sum((alpha * weights) ** 2))


def llc_gradient(x, bases, weights, alpha) -> np.ndarray:
    x, B = np.asarray(x, float), np.atleast_2d(np.asarray(bases, float))
    return -(B @ (x - alpha @ B)) + 2.0 * weights**2 * alpha


def llc_solve(x, bases, weights) -> np.ndarray:
    """Closed-form minimizer via a Cholesky factorization."""
    x, B = np.asarray(x, float), np.atleast_2d(np.asarray(bases, float))
    w = np.asarray(weights, float)
    A = B @ B.T + 2.0 * np.diag(w**2)
    return cho_solve(cho_factor(A, lower=True), B @ x)


# --------------------------------------------------------------------------
# batched kernel: knn + gram build + Cholesky solve per descriptor
# --------------------------------------------------------------------------

@numba.njit(cache=True)
def _cholesky_solve(A, b, k):
    L = np.zeros((k, k))
    for i in range(k):
        for j in range(i + 1):
            s = A[i, j]
            for p in range(j):
                s -= L[i, p] * L[j, p]
            if i == j:
                if s <= 0.0:
                    return b * np.nan, False
                L[i, i] = np.sqrt(s)
            else:
                L[i, j] = s / L[j, j]
    y = np.empty(k)
    for i in range(k):
        s = b[i]
        for p in range(i):
            s -= L[i, p] * y[p]
        y[i] = s / L[i, i]
    z = np.empty(k)
    for i in range(k - 1, -1, -1):
        s = y[i]
        for p in range(i + 1, k):
            s -= L[p, i] * z[p]
        z[i] = s / L[i, i]
    return z, True


@numba.njit(cache=True)
def _llc_batch(X, bases, left, right, sdim, sval, start, end, perm, lo, hi, clo, chi,
               k, budget, sigma, mode):
    n, dim = X.shape
    out_idx = np.full((n, k), -1, dtype=np.int64)
    out_co = np.zeros((n, k))
    comps = np.zeros(n, dtype=np.int64)
    ok = True
    hb = np.empty(left.shape[0])
    hn = np.empty(left.shape[0], dtype=np.int64)
    idx = np.empty(k, dtype=np.int64)
    d2 = np.empty(k)
    A = np.empty((k, k))
    r = np.empty(k)
    for i in range(n):
        idx[:] = -1
        d2[:] = np.inf
        c, found = _knn_one(X[i], bases, left, right, sdim, sval, start, end, perm,
                            lo, hi, clo, chi, k, budget, idx, d2, hb, hn)
        comps[i] = c
        if found < k:
            ok = False
            continue
        nonzero = False
        for t in range(dim):
            if X[i, t] != 0.0:
                nonzero = True
                break
        coef = np.zeros(k)
        if nonzero:
            for a in range(k):
                ia = idx[a]
                s = 0.0
                for t in range(dim):
                    s += bases[ia, t] * X[i, t]
                r[a] = s
                for b in range(a + 1):
                    ib = idx[b]
                    s = 0.0
                    for t in range(dim):
                        s += bases[ia, t] * bases[ib, t]
                    A[a, b] = s
                    A[b, a] = s
                d = np.sqrt(d2[a])
                if mode == 0:
                    w = np.exp(d / sigma)
                else:
                    w = np.exp(d) / sigma
                A[a, a] += 2.0 * w * w
            coef, good = _cholesky_solve(A, r, k)
            if not good:
                ok = False
        # reorder by increasing basis index
        order = np.argsort(idx)
        for a in range(k):
            out_idx[i, a] = idx[order[a]]
            out_co[i, a] = coef[order[a]]
    return out_idx, out_co, comps, ok


def _encode_arrays(X, cb: Codebook, tree: KdTree, cfg: LLCConfig):
    bases = np.ascontiguousarray(cb.bases)
    budget = _check_budget(cfg.K, cb.M, cfg.max_comparisons)
    X = np.ascontiguousarray(X, dtype=np.float64).reshape(-1, cb.dim)
    mode = WEIGHT_MODES.index(cfg.weight_mode)
    idx, co, comps, ok = _llc_batch(X, bases, *_tree_args(tree), cfg.K, budget,
                                    float(cfg.sigma), mode)
    if not ok:
        raise InvariantViolation("LLC system was not positive definite or knn came up short")
    return idx, co, comps


def llc_encode(x, cb: Codebook, tree: KdTree, cfg: LLCConfig = LLCConfig()) -> SparseCode:
    """Encode one descriptor (a Descriptor or a raw vector)."""
    vec = getattr(x, "values", x)
    idx, co, _ = _encode_arrays(np.asarray(vec)[None, :], cb, tree, cfg)
    return SparseCode(idx[0], co[0])


def encode_image(descs: DescriptorSet, cb: Codebook, tree: KdTree,
                 cfg: LLCConfig = LLCConfig()) -> CodeSet:
    if len(descs) == 0:
        return CodeSet(np.zeros((0, 2), dtype=np.int64), np.zeros((0, cfg.K), dtype=np.int64),
                       np.zeros((0, cfg.K)), np.zeros(0, dtype=np.int64))
    idx, co, comps = _encode_arrays(descs.values, cb, tree, cfg)
    return CodeSet(descs.locations.astype(np.int64), idx, co, comps)


# --------------------------------------------------------------------------
# spatial pyramid
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class PyramidConfig:
    grids: tuple[int, ...] = (1, 2, 3)

    def __post_init__(self):
        object.__setattr__(self, "grids", tuple(int(g) for g in self.grids))
        if not self.grids or any(g < 1 for g in self.grids):
            raise ValueError("pyramid grids must be a non-empty list of counts >= 1")

    @property
    def cells(self) -> tuple[int, ...]:
        return tuple(g * g for g in self.grids)


def feature_dim(M: int, pyramid: PyramidConfig = PyramidConfig()) -> int:
    return M * sum(pyramid.cells)


def cell_edges(length: int, g: int) -> np.ndarray:
    return (np.arange(g + 1) * length) // g


def spm_pool(codes: CodeSet, img_width: int, img_height: int, M: int,
             cfg: PyramidConfig = PyramidConfig(), normalize: bool = True) -> np.ndarray:
    """Max-pool absolute coefficients over a spatial pyramid.

    Layout is level-major, then row-major cells, then bases. The result is
    L2-normalized unless it is all zeros or ``normalize`` is False.
    """
    out = np.zeros(feature_dim(M, cfg))
    n = len(codes)
    if n == 0:
        return out
    loc = np.asarray(codes.locations)
    xs, ys = loc[:, 0], loc[:, 1]
    if np.any(xs < 0) or np.any(ys < 0) or np.any(xs >= img_width) or np.any(ys >= img_height):
        raise ValueError("code location outside the image")
    idx = np.asarray(codes.indices, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= M):
        raise ValueError("basis index outside [0, M)")
    vals = np.abs(np.asarray(codes.coeffs, dtype=np.float64))
    offset = 0
    for g in cfg.grids:
        cx = np.searchsorted(cell_edges(img_width, g), xs, side="right") - 1
        cy = np.searchsorted(cell_edges(img_height, g), ys, side="right") - 1
        cell = cy * g + cx
        flat = offset + cell[:, None] * M + idx
        np.maximum.at(out, flat.ravel(), vals.ravel())
        offset += g * g * M
    if normalize:
        norm = np.linalg.norm(out)
        if norm > 0:
            out /= norm
    return out


# Binary layout (little endian): magic b"LLCF", u32 version, u32 length,
# then length f32 values.
_FEAT_MAGIC = b"LLCF"
_FEAT_VERSION = 1


def write_feature(values, path) -> None:
    v = np.asarray(values, dtype="<f4").ravel()
    with open(path, "wb") as fh:
        fh.write(_FEAT_MAGIC + struct.pack("<II", _FEAT_VERSION, v.size) + v.tobytes())


def read_feature(path) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 12 or data[:4] != _FEAT_MAGIC:
        raise CorruptHeaderError(f"{path}: not a feature file")
    version, length = struct.unpack("<II", data[4:12])
    if version != _FEAT_VERSION or len(data) != 12 + 4 * length:
        raise CorruptHeaderError(f"{path}: bad feature header")
    return np.frombuffer(data, dtype="<f4", offset=12).astype(np.float64)


def format_sparse_line(values, label=None) -> str:
    """svmlight-style ``[label] index:value ...`` with 1-based indices."""
    v = np.asarray(values, dtype=np.float64).ravel()
    nz = np.flatnonzero(v)
    body = " ".join(f"{i + 1}:{v[i]:.9g}" for i in nz)
    if label is None:
        return body
    return f"{label} {body}".rstrip()


def write_sparse_text(features, path, labels=None) -> None:
    with open(path, "w", encoding="ascii") as fh:
        for i, f in enumerate(features):
            fh.write(format_sparse_line(f, None if labels is None else labels[i]) + "\n")
