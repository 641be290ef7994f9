"""Trained-model container and its binary file format.

Layout (all integers and floats little endian)::

    b"LLCM"  u32 version
    repeated sections:  4-byte tag, u64 payload length, payload
      CONF  UTF-8 JSON: pipeline config, class names, flags, codebook sha256
      CBK0  codebook record (b"LLCB", u32 version, u32 M, u32 dim, f32[M*dim])
      SVM0  u32 C, u32 D, f64 lambda, f64[C*D] weights, f64[C] biases
      MLP1  u32 L, u32[L+1] sizes, then per layer f64[in*out] W, f64[out] b
      MLP2  same as MLP1 (absent in known-only bundles)
      OPEN  f64 t1, f64 t2, u32 n, u32[n] unknown class ids
      END0  empty
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np

from ..classifier import LinearSvmModel, MlpModel, OpenSetConfig
from ..codebook import Codebook, codebook_from_bytes, codebook_to_bytes
from ..errors import CorruptHeaderError, InvariantViolation
from ..kdtree import build_kdtree
from .config import PipelineConfig

__all__ = ["Bundle", "save_bundle", "load_bundle", "bundle_to_bytes", "bundle_from_bytes"]

MAGIC = b"LLCM"
VERSION = 1


@dataclass(eq=False)
class Bundle:
    config: PipelineConfig
    class_names: list[str]
    n_known: int
    codebook: Codebook
    svm: LinearSvmModel
    mlp1: MlpModel
    mlp2: MlpModel | None
    openset: OpenSetConfig
    meta: dict = field(default_factory=dict)

    @property
    def known_only(self) -> bool:
        return self.mlp2 is None

    @property
    def class_ids(self) -> dict[str, int]:
        return {n: i for i, n in enumerate(self.class_names)}

    @property
    def feature_dim(self) -> int:
        return self.svm.dim

    @cached_property
    def tree(self):
        return build_kdtree(self.codebook, self.config.leaf_capacity)

    def to_bytes(self) -> bytes:
        return bundle_to_bytes(self)


def _section(tag: bytes, payload: bytes) -> bytes:
    return tag + struct.pack("<Q", len(payload)) + payload


def _f64(a) -> bytes:
    return np.ascontiguousarray(a, dtype="<f8").tobytes()


def _mlp_bytes(m: MlpModel) -> bytes:
    sizes = m.sizes
    out = [struct.pack("<I", len(m.weights)), struct.pack(f"<{len(sizes)}I", *sizes)]
    for w, b in zip(m.weights, m.biases):
        out += [_f64(w), _f64(b)]
    return b"".join(out)


def _mlp_from(buf: bytes) -> MlpModel:
    (L,) = struct.unpack_from("<I", buf, 0)
    sizes = struct.unpack_from(f"<{L + 1}I", buf, 4)
    off = 4 + 4 * (L + 1)
    ws, bs = [], []
    for a, b in zip(sizes[:-1], sizes[1:]):
        ws.append(np.frombuffer(buf, "<f8", a * b, off).reshape(a, b).copy())
        off += 8 * a * b
        bs.append(np.frombuffer(buf, "<f8", b, off).copy())
        off += 8 * b
    if off != len(buf):
        raise CorruptHeaderError("MLP section size mismatch")
    return MlpModel(ws, bs)


def header_dict(b: Bundle) -> dict:
    return {
        "format_version": VERSION,
        "config": b.config.to_dict(),
        "class_names": list(b.class_names),
        "n_known": b.n_known,
        "known_only": b.known_only,
        "codebook_sha256": b.codebook.digest(),
        "feature_dim": b.feature_dim,
        "thresholds": {"t1": b.openset.t1, "t2": b.openset.t2},
        "unknown_class_ids": sorted(b.openset.unknown_class_ids),
        "meta": b.meta,
    }


def bundle_to_bytes(b: Bundle) -> bytes:
    conf = json.dumps(header_dict(b), sort_keys=True).encode("utf-8")
    svm = (
        struct.pack("<IId", b.svm.n_classes, b.svm.dim, b.svm.lam)
        + _f64(b.svm.weights)
        + _f64(b.svm.biases)
    )
    ids = sorted(b.openset.unknown_class_ids)
    open_ = struct.pack("<ddI", b.openset.t1, b.openset.t2, len(ids)) + struct.pack(
        f"<{len(ids)}I", *ids
    )
    parts = [
        MAGIC + struct.pack("<I", VERSION),
        _section(b"CONF", conf),
        _section(b"CBK0", codebook_to_bytes(b.codebook)),
        _section(b"SVM0", svm),
        _section(b"MLP1", _mlp_bytes(b.mlp1)),
    ]
    if b.mlp2 is not None:
        parts.append(_section(b"MLP2", _mlp_bytes(b.mlp2)))
    parts += [_section(b"OPEN", open_), _section(b"END0", b"")]
    return b"".join(parts)


def bundle_from_bytes(data: bytes) -> Bundle:
    if data[:4] != MAGIC:
        raise CorruptHeaderError("not a model bundle")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != VERSION:
        raise CorruptHeaderError(f"unsupported bundle version {version}")
    off = 8
    sections = {}
    while off < len(data):
        if off + 12 > len(data):
            raise CorruptHeaderError("truncated section header")
        tag = data[off:off + 4]
        (length,) = struct.unpack_from("<Q", data, off + 4)
        off += 12
        if off + length > len(data):
            raise CorruptHeaderError(f"truncated section {tag!r}")
        sections[tag] = data[off:off + length]
        off += length
        if tag == b"END0":
            break
    for tag in (b"CONF", b"CBK0", b"SVM0", b"MLP1", b"OPEN", b"END0"):
        if tag not in sections:
            raise CorruptHeaderError(f"bundle lacks section {tag!r}")

    header = json.loads(sections[b"CONF"].decode("utf-8"))
    cb = codebook_from_bytes(sections[b"CBK0"])
    if cb.digest() != header["codebook_sha256"]:
        raise InvariantViolation("codebook hash does not match the bundle header")

    s = sections[b"SVM0"]
    C, D, lam = struct.unpack_from("<IId", s, 0)
    W = np.frombuffer(s, "<f8", C * D, 16).reshape(C, D).copy()
    bias = np.frombuffer(s, "<f8", C, 16 + 8 * C * D).copy()
    svm = LinearSvmModel(W, bias, lam)

    o = sections[b"OPEN"]
    t1, t2, n = struct.unpack_from("<ddI", o, 0)
    ids = struct.unpack_from(f"<{n}I", o, 20)
    mlp2 = _mlp_from(sections[b"MLP2"]) if b"MLP2" in sections else None
    return Bundle(
        config=PipelineConfig.from_dict(header["config"]),
        class_names=list(header["class_names"]),
        n_known=int(header["n_known"]),
        codebook=cb,
        svm=svm,
        mlp1=_mlp_from(sections[b"MLP1"]),
        mlp2=mlp2,
        openset=OpenSetConfig(t1, t2, frozenset(ids)),
        meta=header.get("meta", {}),
    )


def save_bundle(b: Bundle, path) -> Path:
    """Write the bundle and a ``.json`` sidecar of its hyperparameters."""
    path = Path(path)
    data = bundle_to_bytes(b)
    path.write_bytes(data)
    sidecar = header_dict(b)
    sidecar["bundle_sha256"] = hashlib.sha256(data).hexdigest()
    path.with_suffix(path.suffix + ".json").write_text(
        json.dumps(sidecar, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    return path


def load_bundle(path) -> Bundle:
    return bundle_from_bytes(Path(path).read_bytes())
