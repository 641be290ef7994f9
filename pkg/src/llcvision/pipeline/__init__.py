"""End-to-end training, evaluation and benchmarking."""
from .bundle import Bundle, load_bundle, save_bundle
from .config import MlpConfig, OpenSetParams, PipelineConfig, SvmConfig, reference_profile
from .dataset import UNKNOWN_CLASS_NAMES, Manifest, ingest_dataset, make_toy_corpus
from .runner import (
    EvalReport,
    FeatureExtractor,
    SweepRow,
    benchmark_sweep,
    build_codebook,
    classify_one,
    encoding_timing,
    evaluate,
    evaluate_predictions,
    train_full,
)

__all__ = [
    "Bundle", "load_bundle", "save_bundle",
    "MlpConfig", "OpenSetParams", "PipelineConfig", "SvmConfig", "reference_profile",
    "UNKNOWN_CLASS_NAMES", "Manifest", "ingest_dataset", "make_toy_corpus",
    "EvalReport", "FeatureExtractor", "SweepRow", "benchmark_sweep", "build_codebook", "classify_one",
    "encoding_timing", "evaluate", "evaluate_predictions", "train_full",
]
