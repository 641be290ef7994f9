"""Dataset manifests and the procedural toy corpus."""
from __future__ import annotations

import os
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..errors import DataError, DuplicateClassError, EmptyClassError
from ..imageio import GrayImage, save_pgm

__all__ = [
    "UNKNOWN_CLASS_NAMES",
    "SPLIT_NAMES",
    "Manifest",
    "ingest_dataset",
    "make_toy_corpus",
    "toy_texture",
]

UNKNOWN_CLASS_NAMES = ("unknown_heavy", "unknown_light")
SPLIT_NAMES = ("train", "val", "test")
IMAGE_SUFFIXES = {".pgm", ".ppm", ".png"}


def normalize_class_name(name: str) -> str:
    return re.sub(r"[\s\-]+", "_", name.strip().lower())


@dataclass
class Manifest:
    """Class-id map plus image paths per split and class."""

    root: Path
    class_names: list[str]
    splits: dict[str, dict[str, list[Path]]] = field(default_factory=dict)

    @property
    def class_ids(self) -> dict[str, int]:
        return {n: i for i, n in enumerate(self.class_names)}

    @property
    def known_names(self) -> list[str]:
        return [n for n in self.class_names if n not in UNKNOWN_CLASS_NAMES]

    @property
    def unknown_names(self) -> list[str]:
        return [n for n in self.class_names if n in UNKNOWN_CLASS_NAMES]

    def has_split(self, split: str) -> bool:
        return split in self.splits and any(self.splits[split].values())

    def items(self, split: str, classes=None) -> list[tuple[Path, int]]:
        """(path, class id) pairs in deterministic order."""
        if split not in self.splits:
            raise DataError(f"split {split!r} not present in {self.root}")
        ids = self.class_ids
        wanted = self.class_names if classes is None else list(classes)
        out = []
        for name in wanted:
            for p in self.splits[split].get(name, []):
                out.append((p, ids[name]))
        return out

    def counts(self) -> dict[str, dict[str, int]]:
        return {s: {c: len(v) for c, v in per.items()} for s, per in self.splits.items()}


def _list_images(d: Path) -> list[Path]:
    return sorted(p for p in d.iterdir() if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES)


def _scan_classes(base: Path) -> dict[str, list[Path]]:
    found: dict[str, list[Path]] = {}
    origin: dict[str, Path] = {}
    for d in sorted(p for p in base.iterdir() if p.is_dir()):
        name = normalize_class_name(d.name)
        if name in found:
            raise DuplicateClassError(
                f"class directories {origin[name]} and {d} both normalize to {name!r}"
            )
        images = _list_images(d)
        if not images:
            raise EmptyClassError(f"class directory {d} contains no images")
        found[name] = images
        origin[name] = d
    return found


def ingest_dataset(root) -> Manifest:
    """Scan ``root/<class>/`` or ``root/<split>/<class>/`` into a manifest.

    Known classes get ids in sorted name order; the reserved unknown classes
    follow with the highest ids. A flat layout is treated as a single
    ``train`` split.
    """
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"dataset root {root} is not a directory")
    subdirs = {p.name.lower(): p for p in root.iterdir() if p.is_dir()}
    if subdirs and set(subdirs) <= set(SPLIT_NAMES):
        splits = {s: _scan_classes(subdirs[s]) for s in SPLIT_NAMES if s in subdirs}
    else:
        splits = {"train": _scan_classes(root)}
    names = sorted({c for per in splits.values() for c in per})
    if not names:
        raise DataError(f"no class directories under {root}")
    known = [n for n in names if n not in UNKNOWN_CLASS_NAMES]
    unknown = [n for n in UNKNOWN_CLASS_NAMES if n in names]
    return Manifest(root=root, class_names=known + unknown, splits=splits)


# --------------------------------------------------------------------------
# toy corpus
# --------------------------------------------------------------------------

def _grating(X, Y, theta, freq, phase):
    return np.sin(2 * np.pi * freq * (X * np.cos(theta) + Y * np.sin(theta)) + phase)


def toy_texture(class_index: int, n_classes: int, rng=None, size: int = 96,
                kind: str = "known", canonical: bool = False) -> np.ndarray:
    """Float image in [0, 255] for one class.

    Known classes are gratings with class-specific orientation and frequency
    plus a bright square or dark disc. ``kind='unknown_heavy'`` is a plaid
    of two off-grid orientations, ``'unknown_light'`` a jittered checkerboard
    mixed with a diagonal grating.
    """
    if rng is None:
        rng = np.random.default_rng(0)
    Y, X = np.mgrid[0:size, 0:size].astype(np.float64)
    jitter = 0.0 if canonical else 1.0
    phase = rng.uniform(0, 2 * np.pi) * jitter
    noise = rng.normal(0.0, 6.0, (size, size)) * jitter

    if kind == "known":
        theta = np.pi * class_index / n_classes
        freq = 0.08 + 0.04 * (class_index % 3)
        img = 128 + 55 * _grating(X, Y, theta, freq, phase)
        cx, cy = (size / 2 + rng.uniform(-15, 15, size=2) * jitter)
        r = size * 0.14
        if class_index % 2 == 0:
            mask = (np.abs(X - cx) < r) & (np.abs(Y - cy) < r)
            img[mask] = 225
        else:
            mask = (X - cx) ** 2 + (Y - cy) ** 2 < r * r
            img[mask] = 30
    elif kind == "unknown_heavy":
        step = np.pi / n_classes
        t1 = step * 0.5 + step * (class_index % n_classes)
        t2 = t1 + np.pi / 2
        img = 128 + 35 * _grating(X, Y, t1, 0.1, phase) + 35 * _grating(X, Y, t2, 0.14, -phase)
    elif kind == "unknown_light":
        cell = 8 + 4 * (class_index % 2)
        ox, oy = rng.integers(0, cell, size=2) * int(jitter)
        board = (((X + ox) // cell + (Y + oy) // cell) % 2) * 2 - 1
        img = 128 + 45 * board + 25 * _grating(X, Y, np.pi / 4 + np.pi / (2 * n_classes), 0.18, phase)
    else:
        raise ValueError(f"unknown texture kind {kind!r}")
    return np.clip(img + noise, 0, 255)


def make_toy_corpus(out_dir, classes: int = 5, per_class: int = 30, seed: int = 0,
                    splits: dict[str, int] | None = None, size: int = 96) -> Manifest:
    """Write a deterministic procedural corpus of PGM images.

    ``classes`` known classes named ``class_00``... plus the two reserved
    unknown classes. Without ``splits`` the layout is flat with ``per_class``
    images each; with e.g. ``{"train": 100, "test": 30}`` one subtree per split
    is written.
    """
    if classes < 2:
        raise ValueError("need at least two known classes")
    plan = dict(splits) if splits else {None: per_class}
    if any(n < 1 for n in plan.values()):
        raise ValueError("every split needs at least one image per class")
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write_probe"
        probe.write_bytes(b"")
        probe.unlink()
    except OSError as exc:
        raise DataError(f"output directory {out} is not writable: {exc}") from exc

    names = [(f"class_{c:02d}", "known", c) for c in range(classes)]
    names += [(u, u, i) for i, u in enumerate(UNKNOWN_CLASS_NAMES)]
    ss = np.random.SeedSequence(seed)
    children = ss.spawn(len(plan) * len(names))
    k = 0
    for split, count in plan.items():
        base = out if split is None else out / split
        for name, kind, idx in names:
            rng = np.random.default_rng(children[k])
            k += 1
            d = base / name
            d.mkdir(parents=True, exist_ok=True)
            for j in range(count):
                # the unknown classes cycle through their sub-variants
                sub = idx if kind == "known" else j
                img = toy_texture(sub, classes, rng, size=size, kind=kind)
                save_pgm(GrayImage(np.rint(img).astype(np.uint8)), d / f"{name}_{j:04d}.pgm")
    return ingest_dataset(out)
