"""Experiment configuration: sectioned ``key = value`` files (INI syntax).

Sections and keys (defaults in brackets)::

    [experiment] seed [0]
    [data]       cube_path [""] (empty: generate synthetic data), patch [10],
                 gamma [0.8], R [6], bands [224], side [0], filter_size [0],
                 filter_variance [2.0], snr_db [30.0], endmember_source
                 [procedural], library_path [""]
    [network]    J_E [1], J_A [3], m_E [128], m_A [128], k_E [5], k_A [5]
    [training]   lr [0.001], beta1 [0.9], beta2 [0.85], eps [1e-08],
                 epochs [5000], trace_every [1]
    [loss]       alpha1 [0.1], alpha2 [0.001], alpha3 [1.0], alpha4 [0.001],
                 alpha5 [0.001]
    [red]        mu_E [0.1], mu_A [0.1], T [5000], n_inner [1], tol [0.0001],
                 penalties [true], nlm_patch_radius [1], nlm_search_radius [5],
                 nlm_h_scale [0.1], nlm_weighting [uniform]
    [reference]  lam [0.01], rho [0.3], iters [300], m_E [1], k_E [1],
                 m_A [1], k_A [1]

Floats are written with ``repr`` so a parse/serialise round trip is exact;
``inf`` is accepted for infinite SNR.  Unknown sections or keys are errors.
"""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
import io
import math
from dataclasses import dataclass, field

from .red import NlmConfig, RedConfig
from .synth import SynthConfig
from .training import LossWeights, TrainConfig

__all__ = [
    "ConfigError",
    "DataSection",
    "NetworkConfig",
    "RedSection",
    "ReferenceConfig",
    "ExperimentConfig",
]


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DataSection:
    cube_path: str = ""
    patch: int = 10
    gamma: float = 0.8
    R: int = 6
    bands: int = 224
    side: int = 0
    filter_size: int = 0
    filter_variance: float = 2.0
    snr_db: float = 30.0
    endmember_source: str = "procedural"
    library_path: str = ""

    def synth(self, seed: int) -> SynthConfig:
        kw = {f.name: getattr(self, f.name) for f in dataclasses.fields(self) if f.name != "cube_path"}
        return SynthConfig(seed=seed, **kw)


@dataclass(frozen=True)
class NetworkConfig:
    J_E: int = 1
    J_A: int = 3
    m_E: int = 128
    m_A: int = 128
    k_E: int = 5
    k_A: int = 5

    def __post_init__(self):
        if min(self.J_E, self.J_A) < 0 or min(self.m_E, self.m_A) < 1:
            raise ValueError("layer counts must be >= 0 and kernel counts >= 1")
        if self.k_E % 2 == 0 or self.k_A % 2 == 0:
            raise ValueError("kernel sizes must be odd")


@dataclass(frozen=True)
class RedSection:
    mu_E: float = 0.1
    mu_A: float = 0.1
    T: int = 5000
    n_inner: int = 1
    tol: float = 1e-4
    penalties: bool = True
    nlm_patch_radius: int = 1
    nlm_search_radius: int = 5
    nlm_h_scale: float = 0.1
    nlm_weighting: str = "uniform"

    def build(self) -> RedConfig:
        nlm = NlmConfig(self.nlm_patch_radius, self.nlm_search_radius, self.nlm_h_scale,
                        self.nlm_weighting)
        return RedConfig(self.mu_E, self.mu_A, self.T, self.n_inner, self.tol, self.penalties, nlm)


@dataclass(frozen=True)
class ReferenceConfig:
    """Settings of the literal ADMM solvers used by ``run --mode admm-ref``."""

    lam: float = 0.01
    rho: float = 0.3
    iters: int = 300
    m_E: int = 1
    k_E: int = 1
    m_A: int = 1
    k_A: int = 1


SECTIONS = {
    "data": ("data", DataSection),
    "network": ("network", NetworkConfig),
    "training": ("training", TrainConfig),
    "loss": ("loss", LossWeights),
    "red": ("red", RedSection),
    "reference": ("reference", ReferenceConfig),
}


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    data: DataSection = field(default_factory=DataSection)
    network: NetworkConfig = field(default_factory=NetworkConfig)
    training: TrainConfig = field(default_factory=TrainConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    red: RedSection = field(default_factory=RedSection)
    reference: ReferenceConfig = field(default_factory=ReferenceConfig)

    # -------------------------------------------------------------- text form
    def to_text(self) -> str:
        cp = configparser.ConfigParser(interpolation=None)
        cp.optionxform = str
        cp["experiment"] = {"seed": str(self.seed)}
        for name, (attr, _) in SECTIONS.items():
            sec = getattr(self, attr)
            cp[name] = {f.name: _dump(getattr(sec, f.name)) for f in dataclasses.fields(sec)}
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()

    @classmethod
    def from_text(cls, text: str) -> "ExperimentConfig":
        cp = configparser.ConfigParser(interpolation=None)
        cp.optionxform = str
        try:
            cp.read_string(text)
        except configparser.Error as exc:
            raise ConfigError(f"malformed config: {exc}") from exc
        unknown = set(cp.sections()) - set(SECTIONS) - {"experiment"}
        if unknown:
            raise ConfigError(f"unknown section(s): {sorted(unknown)}")
        kw = {}
        if cp.has_section("experiment"):
            extra = set(cp["experiment"]) - {"seed"}
            if extra:
                raise ConfigError(f"unknown key(s) in [experiment]: {sorted(extra)}")
            if "seed" in cp["experiment"]:
                kw["seed"] = _parse(cp["experiment"]["seed"], 0, "experiment.seed")
        for name, (attr, typ) in SECTIONS.items():
            if not cp.has_section(name):
                continue
            defaults = {f.name: f.default for f in dataclasses.fields(typ)}
            vals = {}
            for key, raw in cp[name].items():
                if key not in defaults:
                    raise ConfigError(f"unknown key {key!r} in [{name}]")
                vals[key] = _parse(raw, defaults[key], f"{name}.{key}")
            try:
                kw[attr] = typ(**vals)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"[{name}]: {exc}") from exc
        return cls(**kw)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            with open(path) as f:
                return cls.from_text(f.read())
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc

    def save(self, path) -> None:
        with open(path, "w") as f:
            f.write(self.to_text())

    def digest(self) -> str:
        """SHA-256 of the canonical text form."""
        return hashlib.sha256(self.to_text().encode()).hexdigest()

    def replace(self, **changes) -> "ExperimentConfig":
        """``replace(seed=1, **{"data.snr_db": 20.0})`` style updates."""
        top = {k: v for k, v in changes.items() if "." not in k}
        cfg = dataclasses.replace(self, **top)
        for key, v in changes.items():
            if "." in key:
                sec, name = key.split(".", 1)
                cfg = dataclasses.replace(cfg, **{sec: dataclasses.replace(getattr(cfg, sec), **{name: v})})
        return cfg


def _dump(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return "inf" if v == math.inf else repr(v)
    return str(v)


def _parse(raw: str, default, where: str):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in ("true", "yes", "1", "on"):
                return True
            if low in ("false", "no", "0", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError as exc:
        raise ConfigError(f"{where}: cannot parse {raw!r} as {type(default).__name__}") from exc
    return raw
