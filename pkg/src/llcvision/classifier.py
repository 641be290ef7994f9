"""Stage-1 linear SVMs, confidence MLPs and two-threshold open-set routing."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numba
import numpy as np

from .errors import (
    DimensionMismatchError,
    EmptyClassError,
    MissingUnknownError,
    NonFiniteLossError,
)

log = logging.getLogger(__name__)

__all__ = [
    "LinearSvmModel",
    "MlpModel",
    "OpenSetConfig",
    "ClassificationResult",
    "STAGE_SVM",
    "STAGE_MLP2",
    "STAGE_FALLBACK",
    "svm_train",
    "svm_score",
    "svm_predict",
    "svm_objective",
    "mlp_init",
    "mlp_forward",
    "mlp_loss_and_grads",
    "mlp_train",
    "route",
    "classify",
    "tune_thresholds",
]

STAGE_SVM = "svm-argmax"
STAGE_MLP2 = "mlp2-unknown"
STAGE_FALLBACK = "fallback"


# --------------------------------------------------------------------------
# linear SVM
# --------------------------------------------------------------------------

@dataclass(eq=False)
class LinearSvmModel:
    """One-vs-all linear SVM; ``weights`` is (C, D)."""

    weights: np.ndarray
    biases: np.ndarray
    lam: float = 1e-4

    def __post_init__(self):
        self.weights = np.atleast_2d(np.asarray(self.weights, dtype=np.float64))
        self.biases = np.asarray(self.biases, dtype=np.float64).ravel()
        if self.weights.shape[0] != self.biases.size:
            raise DimensionMismatchError("one bias per class is required")
        if self.weights.shape[0] < 2:
            raise ValueError("need at least two classes")
        if not np.all(np.isfinite(self.weights)):
            raise ValueError("SVM weights must be finite")

    @property
    def n_classes(self) -> int:
        return self.weights.shape[0]

    @property
    def dim(self) -> int:
        return self.weights.shape[1]


def _one_vs_all(labels: np.ndarray, C: int) -> np.ndarray:
    Y = -np.ones((labels.size, C))
    Y[np.arange(labels.size), labels] = 1.0
    return Y


def svm_objective(W, b, X, labels, lam: float, bias_multiplier: float = 1.0) -> np.ndarray:
    """Per-class regularized hinge objective.

    The bias is regularized as the weight of a constant feature equal to
    ``bias_multiplier``.
    """
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    W = np.atleast_2d(W)
    b = np.asarray(b, dtype=np.float64)
    Y = _one_vs_all(np.asarray(labels), W.shape[0])
    margins = Y * (X @ W.T + b)
    hinge = np.maximum(0.0, 1.0 - margins).mean(axis=0)
    wb = b / bias_multiplier
    return 0.5 * lam * (np.sum(W**2, axis=1) + wb**2) + hinge


@numba.njit(cache=True)
def _pegasos(Xa, Y, lam, order):
    """SGD on C hinge problems at once; W is kept as scale[c] * V[c]."""
    C = Y.shape[1]
    D = Xa.shape[1]
    V = np.zeros((C, D))
    scale = np.ones(C)
    t = 0
    for i in order:
        t += 1
        eta = 1.0 / (lam * t)
        shrink = 1.0 - eta * lam
        for c in range(C):
            m = 0.0
            for d in range(D):
                m += V[c, d] * Xa[i, d]
            m *= scale[c] * Y[i, c]
            if shrink <= 0.0:
                V[c, :] = 0.0
                scale[c] = 1.0
            else:
                scale[c] *= shrink
                if scale[c] < 1e-9:
                    V[c, :] *= scale[c]
                    scale[c] = 1.0
            if m < 1.0:
                g = eta * Y[i, c] / scale[c]
                for d in range(D):
                    V[c, d] += g * Xa[i, d]
    for c in range(C):
        V[c, :] *= scale[c]
    return V


def svm_train(features, labels, C: int, lam: float = 1e-4, epochs: int = 1000,
              seed: int = 0, bias_multiplier: float = 1.0) -> LinearSvmModel:
    """Train C binary hinge-loss classifiers with Pegasos-style SGD.

    Step size is 1/(lam*t). All C problems see the same seeded sample order,
    but are otherwise independent.
    """
    X = np.atleast_2d(np.asarray(features, dtype=np.float64))
    y = np.asarray(labels, dtype=np.int64)
    if X.shape[0] != y.size:
        raise DimensionMismatchError("features and labels differ in length")
    if C < 2:
        raise ValueError("need at least two classes")
    if y.size and (y.min() < 0 or y.max() >= C):
        raise ValueError("labels must lie in [0, C)")
    counts = np.bincount(y, minlength=C)
    missing = [c for c in range(C) if counts[c] == 0]
    if missing:
        raise EmptyClassError(f"classes without training samples: {missing}")
    if lam <= 0:
        raise ValueError("lambda must be positive")
    if epochs < 1:
        raise ValueError("epochs must be >= 1")

    n, D = X.shape
    Y = _one_vs_all(y, C)
    Xa = np.ascontiguousarray(np.hstack([X, np.full((n, 1), bias_multiplier)]))
    rng = np.random.default_rng(seed)
    order = np.concatenate([rng.permutation(n) for _ in range(epochs)])
    Wa = _pegasos(Xa, Y, float(lam), order)
    return LinearSvmModel(Wa[:, :D].copy(), Wa[:, D] * bias_multiplier, lam)


def svm_score(model: LinearSvmModel, f) -> np.ndarray:
    f = np.asarray(f, dtype=np.float64)
    if f.shape[-1] != model.dim:
        raise DimensionMismatchError(f"feature dim {f.shape[-1]} != model dim {model.dim}")
    return f @ model.weights.T + model.biases


def svm_predict(model: LinearSvmModel, f) -> np.ndarray:
    """Arg-max class per row; np.argmax already favours the lowest index."""
    return np.argmax(np.atleast_2d(svm_score(model, f)), axis=1)


# --------------------------------------------------------------------------
# MLP
# --------------------------------------------------------------------------

@dataclass(eq=False)
class MlpModel:
    """ReLU hidden layers, softmax output. ``weights[i]`` is (in_i, out_i)."""

    weights: list
    biases: list

    def __post_init__(self):
        self.weights = [np.asarray(w, dtype=np.float64) for w in self.weights]
        self.biases = [np.asarray(b, dtype=np.float64).ravel() for b in self.biases]
        if len(self.weights) != len(self.biases) or not self.weights:
            raise DimensionMismatchError("need one bias vector per weight matrix")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or w.shape[1] != b.size:
                raise DimensionMismatchError(f"layer {i}: weight/bias shapes disagree")
            if i and self.weights[i - 1].shape[1] != w.shape[0]:
                raise DimensionMismatchError(f"layer {i}: input size does not match")

    @property
    def sizes(self) -> list[int]:
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    def copy(self) -> "MlpModel":
        return MlpModel([w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def __call__(self, x):
        return mlp_forward(self, x)


def mlp_init(sizes, seed: int = 0, zero: bool = False) -> MlpModel:
    sizes = [int(s) for s in sizes]
    if len(sizes) < 2 or any(s < 1 for s in sizes):
        raise ValueError("need at least input and output sizes, all positive")
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        if zero:
            weights.append(np.zeros((fan_in, fan_out)))
        else:
            weights.append(rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return MlpModel(weights, biases)


def _softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _forward_cache(model: MlpModel, X):
    acts = [X]
    pre = []
    h = X
    last = len(model.weights) - 1
    for i, (w, b) in enumerate(zip(model.weights, model.biases)):
        z = h @ w + b
        pre.append(z)
        h = _softmax(z) if i == last else np.maximum(z, 0.0)
        acts.append(h)
    return pre, acts


def mlp_forward(model: MlpModel, x) -> np.ndarray:
    X = np.asarray(x, dtype=np.float64)
    if X.shape[-1] != model.sizes[0]:
        raise DimensionMismatchError(f"input dim {X.shape[-1]} != {model.sizes[0]}")
    return _forward_cache(model, X)[1][-1]


def mlp_loss_and_grads(model: MlpModel, X, T):
    """Mean cross-entropy over the batch and its gradients (dW list, db list)."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    T = np.atleast_2d(np.asarray(T, dtype=np.float64))
    pre, acts = _forward_cache(model, X)
    P = acts[-1]
    n = X.shape[0]
    loss = float(-np.sum(T * np.log(np.clip(P, 1e-300, None))) / n)
    delta = (P - T) / n
    gW = [None] * len(model.weights)
    gb = [None] * len(model.weights)
    for i in range(len(model.weights) - 1, -1, -1):
        gW[i] = acts[i].T @ delta
        gb[i] = delta.sum(axis=0)
        if i:
            delta = (delta @ model.weights[i].T) * (pre[i - 1] > 0.0)
    return loss, gW, gb


def mlp_train(inputs, targets, arch, epochs: int = 200, lr: float = 0.05,
              seed: int = 0, batch_size: int = 32, return_history: bool = False):
    """Mini-batch gradient descent on cross-entropy.

    ``arch`` lists layer sizes from input to output; its ends must match the
    data. ``targets`` are one-hot rows.
    """
    X = np.atleast_2d(np.asarray(inputs, dtype=np.float64))
    T = np.atleast_2d(np.asarray(targets, dtype=np.float64))
    if X.shape[0] == 0:
        raise ValueError("no training inputs")
    if X.shape[0] != T.shape[0]:
        raise DimensionMismatchError("inputs and targets differ in length")
    arch = list(arch)
    if arch[0] != X.shape[1] or arch[-1] != T.shape[1]:
        raise DimensionMismatchError(
            f"architecture {arch} does not fit inputs {X.shape[1]} / targets {T.shape[1]}"
        )
    rng = np.random.default_rng(seed)
    model = mlp_init(arch, seed=int(rng.integers(2**63)))
    n = X.shape[0]
    history = []
    for epoch in range(epochs):
        order = rng.permutation(n)
        total = 0.0
        for s in range(0, n, batch_size):
            idx = order[s:s + batch_size]
            loss, gW, gb = mlp_loss_and_grads(model, X[idx], T[idx])
            if not np.isfinite(loss):
                raise NonFiniteLossError(epoch, loss)
            total += loss * idx.size
            for i in range(len(model.weights)):
                model.weights[i] -= lr * gW[i]
                model.biases[i] -= lr * gb[i]
        history.append(total / n)
    if return_history:
        return model, history
    return model


# --------------------------------------------------------------------------
# open-set routing
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class OpenSetConfig:
    t1: float = 0.87
    t2: float = 0.93
    unknown_class_ids: frozenset = field(default_factory=frozenset)

    def __post_init__(self):
        object.__setattr__(self, "unknown_class_ids", frozenset(int(c) for c in self.unknown_class_ids))
        for name in ("t1", "t2"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")

    def validate(self, n_known: int) -> None:
        if not self.unknown_class_ids:
            raise ValueError("unknown_class_ids must not be empty")
        if min(self.unknown_class_ids) < n_known:
            raise ValueError("unknown class ids overlap the known classes")


@dataclass(frozen=True, eq=False)
class ClassificationResult:
    label: int
    confidence: float
    stage: str
    score_vector: np.ndarray

    def as_dict(self) -> dict:
        return {
            "label": self.label,
            "confidence": self.confidence,
            "stage": self.stage,
            "scores": [float(s) for s in self.score_vector],
        }


def _probs(model, s):
    return model(s) if callable(model) else mlp_forward(model, s)


def route(label1, conf1, p2, cfg: OpenSetConfig):
    """Vectorized routing: returns (labels, confidences, stages).

    ``p2`` is None in known-only mode.
    """
    label1 = np.asarray(label1)
    conf1 = np.asarray(conf1, dtype=np.float64)
    labels = label1.copy()
    conf = conf1.copy()
    stages = np.full(label1.shape, STAGE_SVM, dtype=object)
    low = ~(conf1 > cfg.t1)
    stages[low] = STAGE_FALLBACK
    if p2 is not None and cfg.unknown_class_ids:
        p2 = np.atleast_2d(p2)
        l2 = np.argmax(p2, axis=1)
        c2 = p2[np.arange(l2.size), l2]
        unk = np.isin(l2, sorted(cfg.unknown_class_ids))
        take = low & (c2 > cfg.t2) & unk
        labels[take] = l2[take]
        conf[take] = c2[take]
        stages[take] = STAGE_MLP2
    return labels, conf, stages


def classify(svm: LinearSvmModel, mlp1, mlp2, cfg: OpenSetConfig, f) -> ClassificationResult:
    """Route one pooled feature through the two-stage open-set classifier.

    ``mlp2=None`` gives known-only behaviour (stage 2 is never consulted).
    """
    s = svm_score(svm, f)
    if s.ndim != 1:
        raise ValueError("classify expects a single feature vector")
    L = int(np.argmax(s))
    p1 = _probs(mlp1, s)
    if p1.shape[-1] != svm.n_classes:
        raise DimensionMismatchError("MLP1 output size must equal the number of SVM classes")
    c1 = float(p1[L])
    if c1 > cfg.t1:
        return ClassificationResult(L, c1, STAGE_SVM, s)
    if mlp2 is not None:
        p2 = _probs(mlp2, s)
        if cfg.unknown_class_ids and max(cfg.unknown_class_ids) >= p2.shape[-1]:
            raise DimensionMismatchError("MLP2 output does not cover the unknown class ids")
        L2 = int(np.argmax(p2))
        if p2[L2] > cfg.t2 and L2 in cfg.unknown_class_ids:
            return ClassificationResult(L2, float(p2[L2]), STAGE_MLP2, s)
    return ClassificationResult(L, c1, STAGE_FALLBACK, s)


def _threshold_grid(step: float) -> np.ndarray:
    if not 0 < step <= 1:
        raise ValueError("grid_step must lie in (0, 1]")
    n = int(np.floor(1.0 / step + 1e-9))
    grid = np.round(np.arange(n + 1) * step, 12)
    if grid[-1] < 1.0:
        grid = np.append(grid, 1.0)
    return grid


def tune_thresholds(validation, mlp1, mlp2, grid_step: float = 0.01,
                    unknown_class_ids=None) -> OpenSetConfig:
    """Grid-search (t1, t2) for the best validation accuracy.

    ``validation`` is a sequence of ``(score_vector, true_label)``. Ties go to
    the larger t1, then the larger t2. Unknown ids default to every MLP2
    output beyond the SVM score dimension.
    """
    scores = np.array([np.asarray(s, dtype=np.float64) for s, _ in validation])
    truth = np.array([int(t) for _, t in validation])
    if scores.size == 0:
        raise ValueError("empty validation set")
    n_known = scores.shape[1]
    p1 = np.atleast_2d(_probs(mlp1, scores))
    p2 = np.atleast_2d(_probs(mlp2, scores))
    if unknown_class_ids is None:
        unknown_class_ids = range(n_known, p2.shape[1])
    unknown = frozenset(int(u) for u in unknown_class_ids)
    if not np.any(np.isin(truth, sorted(unknown))):
        raise MissingUnknownError("validation set contains no unknown-class samples")
    if not np.any(~np.isin(truth, sorted(unknown))):
        raise MissingUnknownError("validation set contains no known-class samples")

    L = np.argmax(scores, axis=1)
    c1 = p1[np.arange(L.size), L]
    grid = _threshold_grid(grid_step)
    best = (-1.0, None, None)
    for t1 in grid[::-1]:
        for t2 in grid[::-1]:
            labels, _, _ = route(L, c1, p2, OpenSetConfig(t1, t2, unknown))
            acc = float(np.mean(labels == truth))
            if acc > best[0]:
                best = (acc, float(t1), float(t2))
    log.info("threshold search: accuracy %.4f at t1=%.3f t2=%.3f", *best)
    return OpenSetConfig(best[1], best[2], unknown)
