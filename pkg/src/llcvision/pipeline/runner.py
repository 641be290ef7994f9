"""Training, evaluation, inference and benchmark orchestration."""
from __future__ import annotations

import dataclasses
import logging
import time
import warnings
from dataclasses import dataclass, field

import numpy as np

from ..classifier import (
    ClassificationResult,
    MlpModel,
    OpenSetConfig,
    classify,
    mlp_forward,
    mlp_train,
    route,
    svm_score,
    svm_train,
    tune_thresholds,
)
from ..codebook import Codebook, kmeans, sample_pool
from ..descriptor import extract_dense
from ..encoding import encode_image, feature_dim, spm_pool
from ..errors import DataError, MissingUnknownError, UnknownLabelError
from ..imageio import GrayImage, load_gray, preprocess
from ..kdtree import build_kdtree
from .bundle import Bundle
from .config import PipelineConfig
from .dataset import Manifest

log = logging.getLogger(__name__)

__all__ = [
    "STAGES",
    "FeatureExtractor",
    "EvalReport",
    "SweepRow",
    "build_codebook",
    "train_full",
    "evaluate",
    "evaluate_predictions",
    "classify_one",
    "benchmark_sweep",
    "encoding_timing",
]

STAGES = ("preprocess", "descriptors", "encoding", "pooling", "classification")


class FeatureExtractor:
    """Image -> pooled feature, with wall-clock time per stage."""

    def __init__(self, cfg: PipelineConfig, codebook: Codebook, tree=None):
        self.cfg = cfg
        self.codebook = codebook
        self.tree = tree if tree is not None else build_kdtree(codebook, cfg.leaf_capacity)

    @property
    def dim(self) -> int:
        return feature_dim(self.codebook.M, self.cfg.pyramid)

    def prepare(self, img: GrayImage) -> GrayImage:
        if self.cfg.preprocess_enabled:
            return preprocess(img, self.cfg.preprocess)
        return img

    def __call__(self, img: GrayImage, timings: dict | None = None) -> np.ndarray:
        t0 = time.perf_counter()
        img = self.prepare(img)
        t1 = time.perf_counter()
        descs = extract_dense(img, self.cfg.descriptor)
        t2 = time.perf_counter()
        codes = encode_image(descs, self.codebook, self.tree, self.cfg.llc)
        t3 = time.perf_counter()
        f = spm_pool(codes, img.width, img.height, self.codebook.M, self.cfg.pyramid)
        t4 = time.perf_counter()
        if timings is not None:
            for k, v in zip(STAGES, (t1 - t0, t2 - t1, t3 - t2, t4 - t3)):
                timings[k] = timings.get(k, 0.0) + v
        return f

    def batch(self, paths, timings: dict | None = None) -> np.ndarray:
        out = np.zeros((len(paths), self.dim))
        for i, p in enumerate(paths):
            out[i] = self(load_gray(p), timings)
        return out


def build_codebook(paths, cfg: PipelineConfig) -> Codebook:
    transform = (lambda im: preprocess(im, cfg.preprocess)) if cfg.preprocess_enabled else None
    pool = sample_pool(paths, cfg.descriptor, cfg.pool_target, cfg.seed,
                       max_images=cfg.pool_max_images, transform=transform)
    km = dataclasses.replace(cfg.kmeans, seed=cfg.seed + 1)
    return kmeans(pool, km)


def _onehot(labels, n):
    T = np.zeros((len(labels), n))
    T[np.arange(len(labels)), labels] = 1.0
    return T


def train_full(manifest: Manifest, cfg: PipelineConfig, codebook: Codebook | None = None) -> Bundle:
    """Codebook, features, SVMs, both MLPs and thresholds from the train split.

    Unknown-class images only reach MLP2 and threshold tuning. Without any
    unknown training images the bundle is known-only. A pre-built
    ``codebook`` skips the k-means stage.
    """
    if not manifest.has_split("train"):
        raise DataError("manifest has no train split")
    known = [n for n in manifest.known_names if manifest.splits["train"].get(n)]
    if len(known) < 2:
        raise DataError("training needs at least two known classes")
    if len(known) != len(manifest.known_names):
        raise DataError("every known class needs training images")
    unknown = manifest.unknown_names
    n_known = len(known)

    train_known = manifest.items("train", known)
    train_unknown = manifest.items("train", unknown) if unknown else []
    paths_k = [p for p, _ in train_known]
    y_k = np.array([c for _, c in train_known])

    t0 = time.perf_counter()
    if codebook is None:
        codebook = build_codebook(paths_k, cfg)
    fx = FeatureExtractor(cfg, codebook)
    t_cb = time.perf_counter() - t0
    F_k = fx.batch(paths_k)
    svm = svm_train(F_k, y_k, n_known, cfg.svm.lam, cfg.svm.epochs, cfg.seed + 2,
                    cfg.svm.bias_multiplier)
    S_k = svm_score(svm, F_k)
    mlp1 = mlp_train(S_k, _onehot(y_k, n_known), [n_known, *cfg.mlp.hidden1, n_known],
                     cfg.mlp.epochs, cfg.mlp.lr, cfg.seed + 3, cfg.mlp.batch_size)

    mlp2 = None
    openset = OpenSetConfig(cfg.openset.t1, cfg.openset.t2, frozenset())
    tuned = False
    if train_unknown:
        n_all = n_known + len(unknown)
        F_u = fx.batch([p for p, _ in train_unknown])
        y_u = np.array([c for _, c in train_unknown])
        S_all = np.vstack([S_k, svm_score(svm, F_u)])
        y_all = np.concatenate([y_k, y_u])
        mlp2 = mlp_train(S_all, _onehot(y_all, n_all), [n_known, *cfg.mlp.hidden2, n_all],
                         cfg.mlp.epochs, cfg.mlp.lr, cfg.seed + 4, cfg.mlp.batch_size)
        unknown_ids = frozenset(range(n_known, n_all))
        openset = OpenSetConfig(cfg.openset.t1, cfg.openset.t2, unknown_ids)
        if cfg.openset.tune and manifest.has_split("val"):
            val = manifest.items("val")
            if any(c in unknown_ids for _, c in val):
                S_v = svm_score(svm, fx.batch([p for p, _ in val]))
                openset = tune_thresholds(list(zip(S_v, [c for _, c in val])), mlp1, mlp2,
                                          cfg.openset.grid_step, unknown_ids)
                tuned = True
    else:
        warnings.warn("no unknown-class training images: open-set routing disabled",
                      stacklevel=2)

    # timings are kept out of the bundle so that reruns stay byte-identical
    log.info("codebook stage %.2fs", t_cb)
    names = known + (unknown if mlp2 is not None else [])
    return Bundle(cfg, names, n_known, codebook, svm, mlp1, mlp2, openset,
                  meta={"thresholds_tuned": tuned, "train_images": len(paths_k)})


# --------------------------------------------------------------------------
# evaluation
# --------------------------------------------------------------------------

@dataclass(eq=False)
class EvalReport:
    class_names: list[str]
    confusion: np.ndarray
    per_class_accuracy: np.ndarray
    overall_accuracy: float
    mean_per_class_accuracy: float
    timing: dict = field(default_factory=dict)
    predictions: list[int] = field(default_factory=list)
    truths: list[int] = field(default_factory=list)
    stages: list[str] = field(default_factory=list)
    confidences: list[float] = field(default_factory=list)

    def deterministic_dict(self) -> dict:
        """Everything except wall-clock timings."""
        pca = [None if np.isnan(a) else float(a) for a in self.per_class_accuracy]
        return {
            "class_names": list(self.class_names),
            "confusion": self.confusion.tolist(),
            "per_class_accuracy": pca,
            "overall_accuracy": self.overall_accuracy,
            "mean_per_class_accuracy": self.mean_per_class_accuracy,
            "predictions": list(self.predictions),
            "truths": list(self.truths),
            "stages": list(self.stages),
            "confidences": list(self.confidences),
        }

    def to_dict(self) -> dict:
        d = self.deterministic_dict()
        d["timing"] = dict(self.timing)
        return d

    def to_text(self) -> str:
        w = max(len(n) for n in self.class_names)
        lines = [
            f"overall accuracy        {self.overall_accuracy:.4f}",
            f"mean per-class accuracy {self.mean_per_class_accuracy:.4f}",
            "",
            "per-class accuracy:",
        ]
        for n, a, row in zip(self.class_names, self.per_class_accuracy, self.confusion):
            acc = "   n/a" if np.isnan(a) else f"{a:6.4f}"
            lines.append(f"  {n:<{w}}  {acc}  ({int(row.sum())} images)")
        lines += ["", "mean seconds per image:"]
        for k, v in self.timing.items():
            lines.append(f"  {k:<15} {v:.6f}")
        return "\n".join(lines) + "\n"

    def confusion_csv(self) -> str:
        rows = ["true\\pred," + ",".join(self.class_names)]
        for n, row in zip(self.class_names, self.confusion):
            rows.append(n + "," + ",".join(str(int(v)) for v in row))
        return "\n".join(rows) + "\n"


def evaluate_predictions(truths, predictions, class_names) -> EvalReport:
    n = len(class_names)
    truths = [int(t) for t in truths]
    predictions = [int(p) for p in predictions]
    if not truths:
        raise DataError("cannot evaluate an empty test split")
    conf = np.zeros((n, n), dtype=np.int64)
    np.add.at(conf, (truths, predictions), 1)
    rows = conf.sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        pca = np.where(rows > 0, np.diag(conf) / np.maximum(rows, 1), np.nan)
    overall = float(np.trace(conf) / conf.sum())
    return EvalReport(list(class_names), conf, pca, overall, float(np.nanmean(pca)),
                      predictions=predictions, truths=truths)


def _run_inference(bundle: Bundle, fx: FeatureExtractor, img: GrayImage, cfg: OpenSetConfig,
                   open_set: bool, timings: dict) -> ClassificationResult:
    f = fx(img, timings)
    t0 = time.perf_counter()
    res = classify(bundle.svm, bundle.mlp1, bundle.mlp2 if open_set else None, cfg, f)
    timings["classification"] = timings.get("classification", 0.0) + time.perf_counter() - t0
    return res


def evaluate(bundle: Bundle, manifest: Manifest, split: str = "test", open_set: bool = True,
             openset: OpenSetConfig | None = None) -> EvalReport:
    """Run inference over a split and summarize it.

    ``open_set=False`` disables stage-2 routing (stage-1 labels only);
    ``openset`` overrides the bundle thresholds.
    """
    if split not in manifest.splits:
        raise DataError(f"split {split!r} missing from {manifest.root}")
    ids = bundle.class_ids
    items = []
    for name, paths in manifest.splits[split].items():
        if name not in ids:
            raise UnknownLabelError(f"test class {name!r} is unknown to the bundle")
        items += [(p, ids[name]) for p in paths]
    if not items:
        raise DataError(f"split {split!r} is empty")
    items.sort(key=lambda it: (it[1], str(it[0])))
    cfg = openset or bundle.openset
    fx = FeatureExtractor(bundle.config, bundle.codebook, bundle.tree)
    timings = {k: 0.0 for k in STAGES}
    preds, stages, confs = [], [], []
    for path, _ in items:
        res = _run_inference(bundle, fx, load_gray(path), cfg, open_set, timings)
        preds.append(res.label)
        stages.append(res.stage)
        confs.append(res.confidence)
    report = evaluate_predictions([c for _, c in items], preds, bundle.class_names)
    report.stages = stages
    report.confidences = confs
    report.timing = {k: v / len(items) for k, v in timings.items()}
    return report


def classify_one(bundle: Bundle, image_path, openset: OpenSetConfig | None = None):
    """Returns (ClassificationResult, per-stage seconds)."""
    img = load_gray(image_path)
    fx = FeatureExtractor(bundle.config, bundle.codebook, bundle.tree)
    timings = {k: 0.0 for k in STAGES}
    res = _run_inference(bundle, fx, img, openset or bundle.openset, True, timings)
    return res, timings


# --------------------------------------------------------------------------
# benchmarks
# --------------------------------------------------------------------------

@dataclass
class SweepRow:
    M: int
    max_comparisons: int | None
    accuracy: float
    encode_seconds: float
    timing: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)


def _sweep_cfg(base: PipelineConfig, M: int, mc) -> PipelineConfig:
    return base.with_overrides(dict_size=M, max_comparisons=-1 if mc is None else mc)


def benchmark_sweep(manifest: Manifest, base: PipelineConfig, sweep, split: str = "test"):
    """Train and evaluate once per (M, max_comparisons) point.

    Returns ``(rows, trends)``; ``trends`` maps a check name to whether the
    accuracy/time ordering held.
    """
    sweep = [(int(M), None if mc is None or mc < 0 else int(mc)) for M, mc in sweep]
    if len(sweep) < 2:
        raise ValueError("a sweep needs at least two points")
    codebooks: dict[int, Codebook] = {}
    rows = []
    for M, mc in sweep:
        cfg = _sweep_cfg(base, M, mc)
        if M not in codebooks:
            paths = [p for p, _ in manifest.items("train", manifest.known_names)]
            codebooks[M] = build_codebook(paths, cfg)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            bundle = train_full(manifest, cfg, codebook=codebooks[M])
        rep = evaluate(bundle, manifest, split)
        rows.append(SweepRow(M, mc, rep.overall_accuracy, rep.timing["encoding"], rep.timing))
    trends = _trends(rows, "accuracy")
    trends.update(_trends(rows, "encode_seconds"))
    return rows, trends


def _budget_key(mc):
    return float("inf") if mc is None else mc


def _trends(rows, attr: str) -> dict:
    """Non-decreasing checks along each knob with the other held fixed."""
    out = {}
    by_m: dict[int, list] = {}
    by_c: dict = {}
    for r in rows:
        by_m.setdefault(r.M, []).append(r)
        by_c.setdefault(r.max_comparisons, []).append(r)
    for M, rs in by_m.items():
        rs = sorted(rs, key=lambda r: _budget_key(r.max_comparisons))
        if len(rs) > 1:
            vals = [getattr(r, attr) for r in rs]
            out[f"{attr} non-decreasing in comparisons at M={M}"] = all(
                a <= b for a, b in zip(vals, vals[1:]))
    for mc, rs in by_c.items():
        rs = sorted(rs, key=lambda r: r.M)
        if len(rs) > 1:
            vals = [getattr(r, attr) for r in rs]
            out[f"{attr} non-decreasing in M at comparisons={mc}"] = all(
                a <= b for a, b in zip(vals, vals[1:]))
    return out


def encoding_timing(images, codebooks: dict, base: PipelineConfig, sweep,
                    repetitions: int = 3, seed: int = 0) -> dict:
    """Mean LLC encoding seconds per image for each (M, max_comparisons).

    ``images`` are GrayImages; descriptors are extracted once up front so
    only the encoding stage is timed. Sweep points are interleaved per image
    in a shuffled order so that machine drift hits every point alike.
    """
    descs = []
    for img in images:
        if base.preprocess_enabled:
            img = preprocess(img, base.preprocess)
        descs.append(extract_dense(img, base.descriptor))
    sweep = list(sweep)
    trees = {M: build_kdtree(cb, base.leaf_capacity) for M, cb in codebooks.items()}
    llcs = [_sweep_cfg(base, M, mc).llc for M, mc in sweep]
    for (M, _), llc in zip(sweep, llcs):  # warm-up compiles the kernels outside the timed region
        encode_image(descs[0], codebooks[M], trees[M], llc)
    rng = np.random.default_rng(seed)
    totals = np.zeros(len(sweep))
    clock = time.perf_counter
    for _ in range(repetitions):
        for d in descs:
            for j in rng.permutation(len(sweep)):
                M = sweep[j][0]
                t0 = clock()
                encode_image(d, codebooks[M], trees[M], llcs[j])
                totals[j] += clock() - t0
    n = repetitions * len(descs)
    return {pt: float(totals[j] / n) for j, pt in enumerate(sweep)}
