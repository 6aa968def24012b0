"""Run configuration: strict JSON, every key checked before any work starts."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Mapping

from ..data import DSPRITES_FACTORS, SYNTHETIC_FACTORS, SyntheticSCM
from ..interventions import DEFAULT_GRID
from ..metrics import MetricsConfig
from ..models import ConfigError, ModelConfig, site_names, site_shapes

DEFAULT_SITES = ("encoder_conv_0", "encoder_conv_1", "encoder_conv_2", "mu",
                 "decoder_conv_0", "decoder_conv_1")
DEFAULT_INTERVENTIONS = ("shape", "background", "pos_x", "pos_y")
MEDIATION_SITES = ("encoder_conv_0", "encoder_conv_1", "encoder_conv_2")


def _strict(cls, d: Mapping[str, Any], where: str):
    if not isinstance(d, Mapping):
        raise ConfigError(f"{where}: expected an object, got {type(d).__name__}")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(d) - known)
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {unknown}; allowed: {sorted(known)}")
    return d


@dataclass
class SCMParams:
    base_size: dict = field(default_factory=lambda: {"square": 0.6, "circle": 0.7,
                                                     "triangle": 0.5})
    size_noise: float = 0.05
    contrast_noise: float = 0.05
    background_range: tuple[float, float] = (0.0, 0.1)
    pos_range: tuple[float, float] = (0.25, 0.75)

    def build(self, image_size: int) -> SyntheticSCM:
        return SyntheticSCM(base_size=tuple((k, float(v)) for k, v in self.base_size.items()),
                            size_noise=self.size_noise, contrast_noise=self.contrast_noise,
                            background_range=tuple(self.background_range),
                            pos_range=tuple(self.pos_range), image_size=image_size)

    def validate(self) -> None:
        if set(self.base_size) != {"square", "circle", "triangle"}:
            raise ConfigError("dataset.scm.base_size needs exactly square, circle, triangle")
        for k, v in self.base_size.items():
            if not 0.5 <= v <= 1.0:
                raise ConfigError(f"dataset.scm.base_size[{k}] = {v} outside [0.5, 1]")
        for name in ("size_noise", "contrast_noise"):
            if not 0 <= getattr(self, name) <= 0.5:
                raise ConfigError(f"dataset.scm.{name} must be in [0, 0.5]")
        for name, (lo, hi) in (("background_range", (0, 1)), ("pos_range", (0, 1))):
            a, b = getattr(self, name)
            if not lo <= a <= b <= hi:
                raise ConfigError(f"dataset.scm.{name} = {[a, b]} is not an ordered "
                                  f"sub-interval of [{lo}, {hi}]")


@dataclass
class DatasetConfig:
    source: str = "synthetic"
    path: str | None = None
    n: int = 5000
    stride: int = 1
    offset: int = 0
    scm: SCMParams = field(default_factory=SCMParams)

    def validate(self) -> None:
        if self.source not in ("synthetic", "dsprites"):
            raise ConfigError(f"dataset.source must be 'synthetic' or 'dsprites', "
                              f"got {self.source!r}")
        if self.source == "dsprites" and not self.path:
            raise ConfigError("dataset.path is required for dsprites")
        if self.n < 1:
            raise ConfigError(f"dataset.n must be >= 1, got {self.n}")
        if self.stride < 1 or self.offset < 0:
            raise ConfigError("dataset.stride must be >= 1 and dataset.offset >= 0")
        self.scm.validate()


@dataclass
class AnalysisConfig:
    grid: tuple[float, ...] = DEFAULT_GRID
    eps: float = 1e-6
    mono_threshold: float = 1.5
    mi_bins: int = 20
    sites: tuple[str, ...] = DEFAULT_SITES
    interventions: tuple[str, ...] = DEFAULT_INTERVENTIONS
    cluster_k: int = 3
    graph_threshold: float = 0.5
    sample_size: int = 64
    proxy_sample: int = 1000
    mediation_items: int = 8
    mediation_sites: tuple[str, ...] = MEDIATION_SITES
    mediation_probe: str = "mu"

    def metrics(self) -> MetricsConfig:
        return MetricsConfig(eps=self.eps, grid=tuple(self.grid),
                             mono_threshold=self.mono_threshold, mi_bins=self.mi_bins)

    def validate(self, model: ModelConfig, source: str) -> None:
        try:
            self.metrics()
        except ValueError as e:
            raise ConfigError(f"analysis: {e}") from None
        known = site_names(model)
        for group in ("sites", "mediation_sites"):
            bad = [s for s in getattr(self, group) if s not in known]
            if bad:
                raise ConfigError(f"analysis.{group}: unknown site(s) {bad}; known: {known}")
        if not self.sites:
            raise ConfigError("analysis.sites must be nonempty")
        factors = SYNTHETIC_FACTORS if source == "synthetic" else DSPRITES_FACTORS
        bad = [f for f in self.interventions if f not in factors]
        if bad:
            raise ConfigError(f"analysis.interventions: unknown factor(s) {bad} for {source}")
        if len(set(self.interventions)) < 2:
            raise ConfigError("analysis.interventions needs >= 2 distinct factors")
        if self.cluster_k < 1:
            raise ConfigError("analysis.cluster_k must be >= 1")
        units = site_shapes(model, 1)
        small = [s for s in self.sites if units[s][1] < self.cluster_k]
        if small:
            raise ConfigError(f"analysis.cluster_k={self.cluster_k} exceeds the unit count of "
                              f"site(s) {small}")
        if not self.graph_threshold >= 0:
            raise ConfigError("analysis.graph_threshold must be >= 0")
        for name in ("sample_size", "proxy_sample", "mediation_items"):
            if getattr(self, name) < 2:
                raise ConfigError(f"analysis.{name} must be >= 2")
        if self.mediation_probe not in ("mu", "recon"):
            raise ConfigError("analysis.mediation_probe must be 'mu' or 'recon'")
        order = known.index(self.mediation_probe)
        late = [s for s in self.mediation_sites if known.index(s) > order]
        if late:
            raise ConfigError(f"analysis.mediation_sites {late} lie downstream of the probe")


@dataclass
class RunConfig:
    seed: int = 0
    out: str = "runs/default"
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    model: ModelConfig = field(default_factory=lambda: ModelConfig(variant="standard"))
    analysis: AnalysisConfig = field(default_factory=AnalysisConfig)

    def validate(self) -> "RunConfig":
        if not isinstance(self.seed, int) or self.seed < 0:
            raise ConfigError(f"seed must be a nonnegative integer, got {self.seed!r}")
        self.dataset.validate()
        self.model.validate()
        if self.model.seed != self.seed:
            self.model = ModelConfig.from_dict({**self.model.to_dict(), "seed": self.seed})
        self.analysis.validate(self.model, self.dataset.source)
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        d["model"] = self.model.to_dict()
        d.pop("seed")
        d["model"].pop("seed", None)
        return {"seed": self.seed, **d}

    def with_overrides(self, seed: int | None = None, out: str | None = None) -> "RunConfig":
        d = self.to_dict()
        if seed is not None:
            d["seed"] = seed
        if out is not None:
            d["out"] = out
        return RunConfig.from_dict(d)

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "RunConfig":
        _strict(cls, d, "config")
        ds = dict(_strict(DatasetConfig, d.get("dataset", {}), "dataset"))
        if "scm" in ds:
            ds["scm"] = SCMParams(**_typed(SCMParams, _strict(SCMParams, ds["scm"], "dataset.scm"),
                                           "dataset.scm"))
        dataset = DatasetConfig(**_typed(DatasetConfig, ds, "dataset"))
        an = _strict(AnalysisConfig, d.get("analysis", {}), "analysis")
        analysis = AnalysisConfig(**_typed(AnalysisConfig, an, "analysis"))
        seed = d.get("seed", 0)
        m = dict(d.get("model", {}))
        if "seed" in m:
            raise ConfigError("model.seed is not allowed; use the top-level seed")
        m.setdefault("variant", "standard")
        m["seed"] = seed if isinstance(seed, int) else 0
        model = ModelConfig.from_dict(m)
        cfg = cls(seed=seed, out=str(d.get("out", "runs/default")), dataset=dataset,
                  model=model, analysis=analysis)
        return cfg.validate()

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        try:
            d = json.loads(p.read_text())
        except json.JSONDecodeError as e:
            raise ConfigError(f"{p}: invalid JSON ({e})") from None
        return cls.from_dict(d)

    def analysis_fingerprint(self) -> dict:
        """Everything that must agree for two reports to be comparable."""
        a = asdict(self.analysis)
        ds = asdict(self.dataset)
        return {"analysis": json.loads(json.dumps(a)), "dataset": json.loads(json.dumps(ds))}


_SCALARS = {"int": int, "float": (int, float), "str": str, "bool": bool}


def _typed(cls, d: Mapping[str, Any], where: str) -> dict:
    """Light type checks and tuple coercion for list-valued fields."""
    out = {}
    hints = {f.name: str(f.type) for f in fields(cls)}
    for k, v in d.items():
        t = hints[k]
        if t.startswith("tuple"):
            if not isinstance(v, (list, tuple)):
                raise ConfigError(f"{where}.{k}: expected a list, got {v!r}")
            v = tuple(v)
        elif t in _SCALARS:
            ok = isinstance(v, _SCALARS[t]) and not (t != "bool" and isinstance(v, bool))
            if not ok:
                raise ConfigError(f"{where}.{k}: expected {t}, got {v!r}")
            if t == "float":
                v = float(v)
        elif t == "str | None":
            if v is not None and not isinstance(v, str):
                raise ConfigError(f"{where}.{k}: expected a string or null, got {v!r}")
        elif t == "dict" and not isinstance(v, Mapping):
            raise ConfigError(f"{where}.{k}: expected an object, got {v!r}")
        out[k] = v
    return out
