"""Pipeline configuration and its INI-style file format."""
from __future__ import annotations

import configparser
import dataclasses
import io
from dataclasses import dataclass, field

from ..codebook import KMeansConfig
from ..descriptor import DescriptorConfig
from ..encoding import LLCConfig, PyramidConfig
from ..imageio import PreprocessConfig

__all__ = ["SvmConfig", "MlpConfig", "OpenSetParams", "PipelineConfig", "reference_profile"]


@dataclass(frozen=True)
class SvmConfig:
    lam: float = 1e-4
    epochs: int = 1000
    bias_multiplier: float = 1.0


@dataclass(frozen=True)
class MlpConfig:
    hidden1: tuple[int, ...] = (100,)
    hidden2: tuple[int, ...] = (100,)
    epochs: int = 300
    lr: float = 0.05
    batch_size: int = 32

    def __post_init__(self):
        object.__setattr__(self, "hidden1", tuple(int(h) for h in self.hidden1))
        object.__setattr__(self, "hidden2", tuple(int(h) for h in self.hidden2))


@dataclass(frozen=True)
class OpenSetParams:
    t1: float = 0.87
    t2: float = 0.93
    tune: bool = True
    grid_step: float = 0.01


@dataclass(frozen=True)
class PipelineConfig:
    preprocess: PreprocessConfig = field(default_factory=PreprocessConfig)
    preprocess_enabled: bool = True
    descriptor: DescriptorConfig = field(default_factory=DescriptorConfig)
    kmeans: KMeansConfig = field(default_factory=KMeansConfig)
    pool_target: int = 100_000
    pool_max_images: int | None = None
    leaf_capacity: int = 16
    llc: LLCConfig = field(default_factory=LLCConfig)
    pyramid: PyramidConfig = field(default_factory=PyramidConfig)
    svm: SvmConfig = field(default_factory=SvmConfig)
    mlp: MlpConfig = field(default_factory=MlpConfig)
    openset: OpenSetParams = field(default_factory=OpenSetParams)
    seed: int = 0

    # ---- derived / convenience -------------------------------------------

    @property
    def M(self) -> int:
        return self.kmeans.M

    def replace(self, **kw) -> "PipelineConfig":
        return dataclasses.replace(self, **kw)

    def with_overrides(self, *, seed=None, dict_size=None, knn=None, max_comparisons=None,
                       t1=None, t2=None, no_preprocess=False) -> "PipelineConfig":
        cfg = self
        if seed is not None:
            cfg = cfg.replace(seed=int(seed))
        if dict_size is not None:
            cfg = cfg.replace(kmeans=dataclasses.replace(cfg.kmeans, M=int(dict_size)))
        if knn is not None:
            cfg = cfg.replace(llc=dataclasses.replace(cfg.llc, K=int(knn)))
        if max_comparisons is not None:
            mc = None if int(max_comparisons) < 0 else int(max_comparisons)
            cfg = cfg.replace(llc=dataclasses.replace(cfg.llc, max_comparisons=mc))
        if t1 is not None or t2 is not None:
            op = cfg.openset
            cfg = cfg.replace(openset=dataclasses.replace(
                op,
                t1=op.t1 if t1 is None else float(t1),
                t2=op.t2 if t2 is None else float(t2),
                tune=False,
            ))
        if no_preprocess:
            cfg = cfg.replace(preprocess_enabled=False)
        return cfg

    # ---- serialization ---------------------------------------------------

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        d = dict(d)
        llc = dict(d.get("llc", {}))
        return cls(
            preprocess=PreprocessConfig(**d.get("preprocess", {})),
            preprocess_enabled=bool(d.get("preprocess_enabled", True)),
            descriptor=DescriptorConfig(**d.get("descriptor", {})),
            kmeans=KMeansConfig(**d.get("kmeans", {})),
            pool_target=int(d.get("pool_target", 100_000)),
            pool_max_images=d.get("pool_max_images"),
            leaf_capacity=int(d.get("leaf_capacity", 16)),
            llc=LLCConfig(**llc),
            pyramid=PyramidConfig(**d.get("pyramid", {})),
            svm=SvmConfig(**d.get("svm", {})),
            mlp=MlpConfig(**d.get("mlp", {})),
            openset=OpenSetParams(**d.get("openset", {})),
            seed=int(d.get("seed", 0)),
        )

    def to_ini(self) -> str:
        cp = configparser.ConfigParser()
        cp.optionxform = str
        d = self.to_dict()
        general = {}
        for key, value in d.items():
            if isinstance(value, dict):
                cp[key] = {k: _fmt(v) for k, v in value.items()}
            else:
                general[key] = _fmt(value)
        cp["pipeline"] = general
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()

    @classmethod
    def from_ini(cls, text: str) -> "PipelineConfig":
        cp = configparser.ConfigParser()
        cp.optionxform = str
        cp.read_string(text)
        template = cls().to_dict()
        d = {}
        for key, default in template.items():
            if isinstance(default, dict):
                section = dict(default)
                names = {k.lower(): k for k in default}
                if cp.has_section(key):
                    for k, raw in cp[key].items():
                        if k.lower() not in names:
                            raise ValueError(f"unknown option [{key}] {k}")
                        k = names[k.lower()]
                        section[k] = _parse(raw, default[k])
                d[key] = section
            else:
                d[key] = default
        if cp.has_section("pipeline"):
            for k, raw in cp["pipeline"].items():
                if k not in template or isinstance(template[k], dict):
                    raise ValueError(f"unknown option [pipeline] {k}")
                d[k] = _parse(raw, template[k])
        for section in cp.sections():
            if section != "pipeline" and section not in template:
                raise ValueError(f"unknown section [{section}]")
        return cls.from_dict(d)

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        with open(path, encoding="utf-8") as fh:
            return cls.from_ini(fh.read())


def _fmt(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (list, tuple)):
        return ", ".join(str(x) for x in v)
    return str(v)


def _parse(raw: str, default):
    raw = raw.strip()
    if raw.lower() in ("none", "unbounded", ""):
        return None
    if isinstance(default, bool):
        return raw.lower() in ("1", "true", "yes", "on")
    if isinstance(default, (list, tuple)):
        return tuple(int(x) for x in raw.split(",") if x.strip())
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    if default is None:
        try:
            return int(raw)
        except ValueError:
            return float(raw)
    return raw


def reference_profile(M: int = 3600, max_comparisons: int = 100, seed: int = 0) -> PipelineConfig:
    """Full-scale settings for real vehicle datasets."""
    if M not in (1200, 3600):
        raise ValueError("reference profiles use M in {1200, 3600}")
    if max_comparisons not in (100, 500):
        raise ValueError("reference profiles use 100 or 500 comparisons")
    return PipelineConfig(
        descriptor=DescriptorConfig(step=5, bin_sizes=(4, 6)),
        kmeans=KMeansConfig(M=M, seed=seed),
        pool_target=1_000_000,
        llc=LLCConfig(K=5, max_comparisons=max_comparisons),
        pyramid=PyramidConfig(grids=(1, 2, 3)),
        openset=OpenSetParams(t1=0.87, t2=0.93),
        seed=seed,
    )
