"""kd-tree over codebook bases with best-bin-first K-nearest search.

The tree is stored as flat arrays so the search loop can run under numba.
A *comparison* is one full point-to-basis distance evaluation; split-plane
and bounding-box tests are free.

Cell lower bounds are maintained incrementally: the root cell is the
bounding box of all bases and each split replaces one side of its parent's
cell, so a child's squared distance differs from the parent's in a single
coordinate and costs O(1) to update.
"""
from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np

__all__ = ["KdTree", "build_kdtree", "knn", "knn_batch", "brute_force_knn", "UNBOUNDED"]

UNBOUNDED = -1
_PRUNE_SLACK = 1e-12


@dataclass(frozen=True, eq=False)
class KdTree:
    """Flat-array kd-tree. Node 0 is the root; leaves have ``left == -1``."""

    left: np.ndarray
    right: np.ndarray
    split_dim: np.ndarray
    split_val: np.ndarray
    start: np.ndarray
    end: np.ndarray
    perm: np.ndarray
    box_lo: np.ndarray
    box_hi: np.ndarray
    cell_lo: np.ndarray
    cell_hi: np.ndarray
    leaf_capacity: int

    @property
    def n_nodes(self) -> int:
        return self.left.shape[0]

    def is_leaf(self, node: int) -> bool:
        return self.left[node] < 0

    def leaf_indices(self, node: int) -> np.ndarray:
        return self.perm[self.start[node]:self.end[node]]

    def leaves(self) -> list[int]:
        return [n for n in range(self.n_nodes) if self.left[n] < 0]


def build_kdtree(cb, leaf_capacity: int = 16) -> KdTree:
    """Median split on the dimension of largest spread (lowest index on ties).

    Points equal to the split value go left. ``cb`` is a Codebook or an
    (M, D) array.
    """
    bases = np.asarray(getattr(cb, "bases", cb), dtype=np.float64)
    if bases.ndim != 2 or bases.shape[0] < 1:
        raise ValueError("need at least one basis")
    if leaf_capacity < 1:
        raise ValueError("leaf_capacity must be >= 1")

    left, right, sdim, sval, start, end, lo, hi = ([] for _ in range(8))
    perm = np.empty(bases.shape[0], dtype=np.int64)
    cursor = 0

    def new_node(idx):
        pts = bases[idx]
        left.append(-1)
        right.append(-1)
        sdim.append(-1)
        sval.append(0.0)
        start.append(0)
        end.append(0)
        lo.append(pts.min(axis=0))
        hi.append(pts.max(axis=0))
        return len(left) - 1

    # explicit stack keeps Python recursion limits out of the picture
    root = new_node(np.arange(bases.shape[0]))
    cell_lo, cell_hi = [0.0], [0.0]
    stack = [(root, np.arange(bases.shape[0]), lo[0].copy(), hi[0].copy())]
    while stack:
        node, idx, rlo, rhi = stack.pop()
        pts = bases[idx]
        spread = pts.max(axis=0) - pts.min(axis=0)
        d = int(np.argmax(spread))
        if idx.size <= leaf_capacity or spread[d] <= 0.0:
            # identical points cannot be separated; keep them in one leaf
            start[node] = cursor
            perm[cursor:cursor + idx.size] = idx
            cursor += idx.size
            end[node] = cursor
            continue
        vals = pts[:, d]
        v = float(np.median(vals))
        if not np.any(vals > v):
            v = float(np.max(vals[vals < vals.max()]))
        go_left = vals <= v
        li, ri = idx[go_left], idx[~go_left]
        sdim[node], sval[node] = d, v
        # extent of this node's cell along its own split dimension
        cell_lo[node], cell_hi[node] = float(rlo[d]), float(rhi[d])
        ln, rn = new_node(li), new_node(ri)
        cell_lo += [0.0, 0.0]
        cell_hi += [0.0, 0.0]
        left[node], right[node] = ln, rn
        lhi, rlo2 = rhi.copy(), rlo.copy()
        lhi[d] = v
        rlo2[d] = v
        # right pushed first so the left subtree is laid out first in perm
        stack.append((rn, ri, rlo2, rhi))
        stack.append((ln, li, rlo, lhi))

    # internal nodes span the contiguous perm range of their subtree
    starts, ends = np.array(start), np.array(end)
    for node in range(len(left) - 1, -1, -1):
        if left[node] >= 0:
            starts[node] = starts[left[node]]
            ends[node] = ends[right[node]]

    return KdTree(
        left=np.array(left, dtype=np.int64),
        right=np.array(right, dtype=np.int64),
        split_dim=np.array(sdim, dtype=np.int64),
        split_val=np.array(sval, dtype=np.float64),
        start=starts.astype(np.int64),
        end=ends.astype(np.int64),
        perm=perm,
        box_lo=np.array(lo, dtype=np.float64),
        box_hi=np.array(hi, dtype=np.float64),
        cell_lo=np.array(cell_lo, dtype=np.float64),
        cell_hi=np.array(cell_hi, dtype=np.float64),
        leaf_capacity=int(leaf_capacity),
    )


# --------------------------------------------------------------------------
# numba search kernel
# --------------------------------------------------------------------------

@numba.njit(cache=True)
def _box_dist2(q, lo, hi, node):
    s = 0.0
    for k in range(q.shape[0]):
        v = q[k]
        if v < lo[node, k]:
            g = lo[node, k] - v
            s += g * g
        elif v > hi[node, k]:
            g = v - hi[node, k]
            s += g * g
    return s


@numba.njit(cache=True)
def _heap_push(hb, hn, size, b, n):
    i = size
    hb[i] = b
    hn[i] = n
    while i > 0:
        p = (i - 1) >> 1
        if hb[p] < hb[i] or (hb[p] == hb[i] and hn[p] <= hn[i]):
            break
        hb[p], hb[i] = hb[i], hb[p]
        hn[p], hn[i] = hn[i], hn[p]
        i = p
    return size + 1


@numba.njit(cache=True)
def _heap_pop(hb, hn, size):
    b, n = hb[0], hn[0]
    size -= 1
    hb[0] = hb[size]
    hn[0] = hn[size]
    i = 0
    while True:
        l = 2 * i + 1
        if l >= size:
            break
        c = l
        r = l + 1
        if r < size and (hb[r] < hb[l] or (hb[r] == hb[l] and hn[r] < hn[l])):
            c = r
        if hb[i] < hb[c] or (hb[i] == hb[c] and hn[i] <= hn[c]):
            break
        hb[c], hb[i] = hb[i], hb[c]
        hn[c], hn[i] = hn[i], hn[c]
        i = c
    return b, n, size


@numba.njit(cache=True)
def _knn_one(q, bases, left, right, sdim, sval, start, end, perm, lo, hi, clo, chi,
             k, budget, out_idx, out_d2, hb, hn):
    """Best-bin-first search; fills out_idx/out_d2 ascending, returns comparisons."""
    count = 0
    comps = 0
    size = _heap_push(hb, hn, 0, _box_dist2(q, lo, hi, 0), 0)
    dim = q.shape[0]
    exhausted = False
    while size > 0 and not exhausted:
        rd, node, size = _heap_pop(hb, hn, size)
        if count == k and rd > out_d2[k - 1] * (1.0 + _PRUNE_SLACK) + _PRUNE_SLACK:
            break
        while left[node] >= 0:
            d = sdim[node]
            v = q[d]
            s = sval[node]
            if v <= s:
                near = left[node]
                far = right[node]
            else:
                near = right[node]
                far = left[node]
            # q's offset from this cell along d; the near child keeps it
            if v < clo[node]:
                o = clo[node] - v
            elif v > chi[node]:
                o = v - chi[node]
            else:
                o = 0.0
            fo = v - s
            frd = rd - o * o + fo * fo
            if frd < rd:
                frd = rd
            if count < k or frd <= out_d2[k - 1] * (1.0 + _PRUNE_SLACK) + _PRUNE_SLACK:
                size = _heap_push(hb, hn, size, frd, far)
            node = near
        for j in range(start[node], end[node]):
            if budget >= 0 and comps >= budget:
                exhausted = True
                break
            p = perm[j]
            s = 0.0
            for c in range(dim):
                g = q[c] - bases[p, c]
                s += g * g
            comps += 1
            if count < k or s < out_d2[k - 1] or (s == out_d2[k - 1] and p < out_idx[k - 1]):
                # insertion into the sorted (d2, index) result list
                pos = count if count < k else k - 1
                while pos > 0 and (out_d2[pos - 1] > s or (out_d2[pos - 1] == s and out_idx[pos - 1] > p)):
                    if pos < k:
                        out_d2[pos] = out_d2[pos - 1]
                        out_idx[pos] = out_idx[pos - 1]
                    pos -= 1
                out_d2[pos] = s
                out_idx[pos] = p
                if count < k:
                    count += 1
    return comps, count


@numba.njit(cache=True)
def _knn_batch(Q, bases, left, right, sdim, sval, start, end, perm, lo, hi, clo, chi,
               k, budget):
    n = Q.shape[0]
    idx = np.full((n, k), -1, dtype=np.int64)
    d2 = np.full((n, k), np.inf)
    comps = np.zeros(n, dtype=np.int64)
    found = np.zeros(n, dtype=np.int64)
    hb = np.empty(left.shape[0])
    hn = np.empty(left.shape[0], dtype=np.int64)
    for i in range(n):
        c, f = _knn_one(Q[i], bases, left, right, sdim, sval, start, end, perm,
                        lo, hi, clo, chi, k, budget, idx[i], d2[i], hb, hn)
        comps[i] = c
        found[i] = f
    return idx, d2, comps, found


def _tree_args(tree: KdTree):
    return (tree.left, tree.right, tree.split_dim, tree.split_val, tree.start,
            tree.end, tree.perm, tree.box_lo, tree.box_hi, tree.cell_lo, tree.cell_hi)


def _check_budget(k: int, m: int, max_comparisons) -> int:
    if k < 1:
        raise ValueError("K must be >= 1")
    if k > m:
        raise ValueError(f"K={k} exceeds the number of bases M={m}")
    if max_comparisons is None or max_comparisons == UNBOUNDED:
        return UNBOUNDED
    if max_comparisons < k:
        raise ValueError(f"max_comparisons={max_comparisons} is smaller than K={k}")
    return int(max_comparisons)


def knn_batch(tree: KdTree, cb, queries, k: int, max_comparisons=None):
    """K-nearest bases for each row of ``queries``.

    Returns ``(indices, distances, comparisons)`` with shapes (n, K), (n, K),
    (n,). ``max_comparisons=None`` (or -1) searches without a budget, which
    gives the exact answer with distance ties broken by lower index.
    """
    bases = np.ascontiguousarray(getattr(cb, "bases", cb), dtype=np.float64)
    budget = _check_budget(k, bases.shape[0], max_comparisons)
    Q = np.ascontiguousarray(np.atleast_2d(queries), dtype=np.float64)
    if Q.shape[1] != bases.shape[1]:
        raise ValueError("query dimension does not match the codebook")
    idx, d2, comps, _ = _knn_batch(Q, bases, *_tree_args(tree), k, budget)
    return idx, np.sqrt(d2), comps


def knn(tree: KdTree, cb, query, k: int, max_comparisons=None, stats: dict | None = None):
    """K nearest bases of one query as ``[(index, distance), ...]`` ascending.

    If ``stats`` is given, ``stats["comparisons"]`` receives the number of
    distance evaluations performed.
    """
    idx, dist, comps = knn_batch(tree, cb, np.asarray(query)[None, :], k, max_comparisons)
    if stats is not None:
        stats["comparisons"] = int(comps[0])
    return [(int(i), float(d)) for i, d in zip(idx[0], dist[0]) if i >= 0]


def brute_force_knn(bases, query, k: int):
    """Exhaustive reference: sort by (squared distance, index)."""
    bases = np.asarray(bases, dtype=np.float64)
    d2 = np.sum((bases - np.asarray(query, dtype=np.float64)) ** 2, axis=1)
    order = np.lexsort((np.arange(bases.shape[0]), d2))[:k]
    return [(int(i), float(np.sqrt(d2[i]))) for i in order]
