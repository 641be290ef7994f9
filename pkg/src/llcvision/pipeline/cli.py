"""Command-line interface: ``llcvision <command> ...``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 internal invariant
violation.
"""
from __future__ import annotations

import argparse
import configparser
import json
import logging
import sys
from pathlib import Path

from ..classifier import OpenSetConfig
from ..errors import DataError, InvariantViolation, NonFiniteLossError
from .bundle import header_dict, load_bundle, save_bundle
from .config import PipelineConfig
from .dataset import ingest_dataset, make_toy_corpus
from .runner import benchmark_sweep, classify_one, evaluate, train_full

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_INVARIANT = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="INI configuration file")
    p.add_argument("--seed", type=int)
    p.add_argument("--dict-size", type=int, help="codebook size M")
    p.add_argument("--knn", type=int, help="neighbours K per descriptor")
    p.add_argument("--max-comparisons", type=int,
                   help="kd-tree distance budget (negative for unbounded)")
    p.add_argument("--t1", type=float, help="stage-1 confidence threshold")
    p.add_argument("--t2", type=float, help="stage-2 unknown threshold")
    p.add_argument("--no-preprocess", action="store_true", help="skip CLAHE and median filter")


def _config(args) -> PipelineConfig:
    cfg = PipelineConfig.load(args.config) if args.config else PipelineConfig()
    return cfg.with_overrides(seed=args.seed, dict_size=args.dict_size, knn=args.knn,
                              max_comparisons=args.max_comparisons, t1=args.t1, t2=args.t2,
                              no_preprocess=args.no_preprocess)


def _thresholds(args, bundle) -> OpenSetConfig | None:
    if args.t1 is None and args.t2 is None:
        return None
    op = bundle.openset
    return OpenSetConfig(op.t1 if args.t1 is None else args.t1,
                         op.t2 if args.t2 is None else args.t2,
                         op.unknown_class_ids)


def _parse_splits(text: str | None) -> dict[str, int] | None:
    if not text:
        return None
    out = {}
    for part in text.split(","):
        name, _, n = part.partition("=")
        if not n:
            raise UsageError(f"bad split spec {part!r}, expected name=count")
        out[name.strip()] = int(n)
    return out


def _parse_sweep(text: str) -> list[tuple[int, int | None]]:
    points = []
    for part in text.split(","):
        m, _, c = part.partition(":")
        if not c:
            raise UsageError(f"bad sweep point {part!r}, expected M:comparisons")
        c = c.strip().lower()
        points.append((int(m), None if c in ("inf", "unbounded", "-1") else int(c)))
    return points


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------

def cmd_make_toy(args) -> int:
    m = make_toy_corpus(args.out, classes=args.classes, per_class=args.per_class,
                        seed=args.seed, splits=_parse_splits(args.splits), size=args.size)
    print(json.dumps({"root": str(m.root), "classes": m.class_names, "counts": m.counts()},
                     indent=2))
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _config(args)
    manifest = ingest_dataset(args.data)
    bundle = train_full(manifest, cfg)
    save_bundle(bundle, args.out)
    print(f"wrote {args.out} ({len(bundle.class_names)} classes, "
          f"M={bundle.codebook.M}, known_only={bundle.known_only})")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    bundle = load_bundle(args.bundle)
    manifest = ingest_dataset(args.data)
    report = evaluate(bundle, manifest, args.split, open_set=not args.known_only,
                      openset=_thresholds(args, bundle))
    text = report.to_text()
    sys.stdout.write(text)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.txt").write_text(text, encoding="utf-8")
        (out / "report.json").write_text(json.dumps(report.to_dict(), indent=2) + "\n",
                                         encoding="utf-8")
        (out / "confusion.csv").write_text(report.confusion_csv(), encoding="utf-8")
    return EXIT_OK


def cmd_classify(args) -> int:
    bundle = load_bundle(args.bundle)
    res, timing = classify_one(bundle, args.image, _thresholds(args, bundle))
    d = res.as_dict()
    d["class_name"] = bundle.class_names[res.label]
    d["timing"] = timing
    print(json.dumps(d, indent=2))
    return EXIT_OK


def cmd_benchmark(args) -> int:
    cfg = _config(args)
    manifest = ingest_dataset(args.data)
    rows, trends = benchmark_sweep(manifest, cfg, _parse_sweep(args.sweep), args.split)
    print(f"{'M':>6} {'budget':>9} {'accuracy':>9} {'encode s/img':>13}")
    for r in rows:
        budget = "unbounded" if r.max_comparisons is None else str(r.max_comparisons)
        print(f"{r.M:>6} {budget:>9} {r.accuracy:>9.4f} {r.encode_seconds:>13.6f}")
    for name, ok in trends.items():
        print(f"{'holds' if ok else 'VIOLATED':>8}  {name}")
    if args.out:
        Path(args.out).write_text(json.dumps(
            {"rows": [r.as_dict() for r in rows], "trends": trends}, indent=2) + "\n",
            encoding="utf-8")
    return EXIT_OK


def cmd_inspect(args) -> int:
    print(json.dumps(header_dict(load_bundle(args.bundle)), indent=2, sort_keys=True))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="llcvision", description="Sparse-coded image classification pipeline.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("make-toy", help="write a procedural toy corpus")
    s.add_argument("--out", required=True, type=Path)
    s.add_argument("--classes", type=int, default=5)
    s.add_argument("--per-class", type=int, default=30)
    s.add_argument("--splits", help="e.g. train=100,val=20,test=30 (default: flat layout)")
    s.add_argument("--size", type=int, default=96)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_make_toy)

    s = sub.add_parser("train", help="train a model bundle")
    s.add_argument("data", type=Path, help="dataset root")
    s.add_argument("--out", required=True, type=Path, help="bundle path")
    _add_config_flags(s)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("evaluate", help="evaluate a bundle on a split")
    s.add_argument("bundle", type=Path)
    s.add_argument("data", type=Path)
    s.add_argument("--split", default="test")
    s.add_argument("--known-only", action="store_true", help="disable open-set routing")
    s.add_argument("--t1", type=float)
    s.add_argument("--t2", type=float)
    s.add_argument("--out", type=Path, help="directory for report.{txt,json} and confusion.csv")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("classify", help="classify one image")
    s.add_argument("bundle", type=Path)
    s.add_argument("image", type=Path)
    s.add_argument("--t1", type=float)
    s.add_argument("--t2", type=float)
    s.set_defaults(func=cmd_classify)

    s = sub.add_parser("benchmark", help="accuracy and encoding time over (M, budget) points")
    s.add_argument("data", type=Path)
    s.add_argument("--sweep", required=True, help="e.g. 64:16,64:unbounded")
    s.add_argument("--split", default="test")
    s.add_argument("--out", type=Path, help="JSON results file")
    _add_config_flags(s)
    s.set_defaults(func=cmd_benchmark)

    s = sub.add_parser("inspect", help="print bundle metadata")
    s.add_argument("bundle", type=Path)
    s.set_defaults(func=cmd_inspect)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"llcvision: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"llcvision: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except InvariantViolation as exc:
        print(f"llcvision: internal invariant violated: {exc}", file=sys.stderr)
        return EXIT_INVARIANT
    except (DataError, OSError, NonFiniteLossError) as exc:
        print(f"llcvision: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (ValueError, configparser.Error) as exc:
        print(f"llcvision: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
