"""Experiment configuration: TOML (dotted sections) or JSON, validated up front."""

from __future__ import annotations

import copy
import hashlib
import json
import math
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from . import expr as ex
from .model import SdeModel
from .simulator import SCHEMES


class ConfigError(ValueError):
    pass


@dataclass
class ModelSection:
    b: str
    sigma: str
    f: str = "0"
    x0: float = 0.0
    T: float = 1.0
    growth_exponents: Optional[list] = None


@dataclass
class SimSection:
    steps: int = 1000
    paths: int = 10000
    seed: int = 0
    scheme: Optional[str] = None
    r_grid_size: int = 32


@dataclass
class TruncationSection:
    xi: Optional[float] = None
    levels: list = field(default_factory=list)
    reference: int = 16


@dataclass
class AnalysisSection:
    p_list: list = field(default_factory=lambda: [2.0])
    eps_list: list = field(default_factory=lambda: [0.01, 0.02, 0.05])
    x_grid: Optional[list] = None
    grid_points: int = 11
    bandwidth: Optional[float] = None
    q: list = field(default_factory=lambda: [1, 2])
    M: float = 1.0
    R: float = 10.0
    with_sup: bool = True


@dataclass
class ExperimentConfig:
    model: ModelSection
    sim: SimSection = field(default_factory=SimSection)
    truncation: TruncationSection = field(default_factory=TruncationSection)
    analysis: AnalysisSection = field(default_factory=AnalysisSection)

    def to_dict(self) -> dict:
        return asdict(self)

    def canonical_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def digest(self) -> str:
        """Hash of everything except the seed (the seed names the run separately)."""
        d = self.to_dict()
        d["sim"].pop("seed")
        text = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode()).hexdigest()[:12]

    def build_model(self) -> SdeModel:
        m = self.model
        ge = tuple(m.growth_exponents) if m.growth_exponents is not None else None
        return SdeModel.from_text(b=m.b, sigma=m.sigma, f=m.f, x0=m.x0, T=m.T, growth_exponents=ge)


_SECTIONS = {"model": ModelSection, "sim": SimSection, "truncation": TruncationSection,
             "analysis": AnalysisSection}


def _as_list(v, key):
    if isinstance(v, (int, float)):
        return [v]
    if not isinstance(v, list):
        raise ConfigError(f"{key} must be a list")
    return v


def _num(v, key, kind=float):
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ConfigError(f"{key} must be a number")
    if kind is int:
        if isinstance(v, float) and not v.is_integer():
            raise ConfigError(f"{key} must be an integer")
        return int(v)
    v = float(v)
    if not math.isfinite(v):
        raise ConfigError(f"{key} must be finite")
    return v


def from_dict(raw: dict) -> ExperimentConfig:
    if not isinstance(raw, dict):
        raise ConfigError("configuration must be a table")
    unknown = set(raw) - set(_SECTIONS)
    if unknown:
        raise ConfigError(f"unknown sections: {sorted(unknown)}")
    if "model" not in raw:
        raise ConfigError("missing [model] section")
    parts = {}
    for name, cls in _SECTIONS.items():
        body = raw.get(name, {})
        if not isinstance(body, dict):
            raise ConfigError(f"[{name}] must be a table")
        allowed = set(cls.__dataclass_fields__)
        extra = set(body) - allowed
        if extra:
            raise ConfigError(f"unknown keys in [{name}]: {sorted(extra)}")
        try:
            parts[name] = cls(**body)
        except TypeError as err:
            raise ConfigError(f"[{name}]: {err}") from None
    cfg = ExperimentConfig(**parts)
    validate(cfg)
    return cfg


def validate(cfg: ExperimentConfig) -> None:
    """Normalise types in place and reject anything out of range."""
    m, s, t, a = cfg.model, cfg.sim, cfg.truncation, cfg.analysis
    for key in ("b", "sigma", "f"):
        text = getattr(m, key)
        if not isinstance(text, str):
            raise ConfigError(f"model.{key} must be an expression string")
        try:
            ex.parse(text)
        except ex.ExprError as err:
            raise ConfigError(f"model.{key}: {err}") from None
    m.x0 = _num(m.x0, "model.x0")
    m.T = _num(m.T, "model.T")
    if m.T <= 0:
        raise ConfigError("model.T must be positive")
    if m.growth_exponents is not None:
        m.growth_exponents = [_num(v, "model.growth_exponents") for v in _as_list(m.growth_exponents, "model.growth_exponents")]

    s.steps = _num(s.steps, "sim.steps", int)
    s.paths = _num(s.paths, "sim.paths", int)
    s.seed = _num(s.seed, "sim.seed", int)
    s.r_grid_size = _num(s.r_grid_size, "sim.r_grid_size", int)
    if s.steps < 1 or s.paths < 1:
        raise ConfigError("sim.steps and sim.paths must be >= 1")
    if not 0 <= s.seed < 2 ** 64:
        raise ConfigError("sim.seed must be a 64-bit unsigned integer")
    if s.r_grid_size < 2:
        raise ConfigError("sim.r_grid_size must be >= 2")
    if s.scheme is not None and s.scheme not in SCHEMES:
        raise ConfigError(f"sim.scheme must be one of {SCHEMES}")

    if t.xi is not None:
        t.xi = _num(t.xi, "truncation.xi")
        if t.xi < 0:
            raise ConfigError("truncation.xi must be >= 0")
    t.levels = [_num(v, "truncation.levels", int) for v in _as_list(t.levels, "truncation.levels")]
    if any(n < 1 for n in t.levels):
        raise ConfigError("truncation levels must be >= 1")
    t.reference = _num(t.reference, "truncation.reference", int)
    if t.reference < 1:
        raise ConfigError("truncation.reference must be >= 1")

    a.p_list = [_num(v, "analysis.p_list") for v in _as_list(a.p_list, "analysis.p_list")]
    if not a.p_list or any(p <= 0 for p in a.p_list):
        raise ConfigError("analysis.p_list must hold positive exponents")
    a.eps_list = [_num(v, "analysis.eps_list") for v in _as_list(a.eps_list, "analysis.eps_list")]
    if any(e <= 0 for e in a.eps_list):
        raise ConfigError("analysis.eps_list must be positive")
    if a.x_grid is not None:
        a.x_grid = [_num(v, "analysis.x_grid") for v in _as_list(a.x_grid, "analysis.x_grid")]
        if not a.x_grid:
            raise ConfigError("analysis.x_grid must be nonempty")
    a.grid_points = _num(a.grid_points, "analysis.grid_points", int)
    if a.grid_points < 2:
        raise ConfigError("analysis.grid_points must be >= 2")
    if a.bandwidth is not None:
        a.bandwidth = _num(a.bandwidth, "analysis.bandwidth")
        if a.bandwidth <= 0:
            raise ConfigError("analysis.bandwidth must be positive")
    a.q = [_num(v, "analysis.q", int) for v in _as_list(a.q, "analysis.q")]
    if not a.q or any(q < 1 for q in a.q):
        raise ConfigError("analysis.q must hold integers >= 1")
    a.M = _num(a.M, "analysis.M")
    a.R = _num(a.R, "analysis.R")
    if a.M <= 0 or a.R <= 0:
        raise ConfigError("analysis.M and analysis.R must be positive")
    if not isinstance(a.with_sup, bool):
        raise ConfigError("analysis.with_sup must be a boolean")


def load(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as err:
        raise ConfigError(f"cannot read {path}: {err}") from None
    try:
        if path.suffix.lower() == ".json":
            raw = json.loads(text)
        else:
            raw = tomllib.loads(text)
    except (json.JSONDecodeError, tomllib.TOMLDecodeError) as err:
        raise ConfigError(f"{path}: {err}") from None
    return from_dict(raw)


def with_overrides(cfg: ExperimentConfig, seed=None, paths=None, steps=None) -> ExperimentConfig:
    out = copy.deepcopy(cfg)
    if seed is not None:
        out.sim.seed = seed
    if paths is not None:
        out.sim.paths = paths
    if steps is not None:
        out.sim.steps = steps
    validate(out)
    return out
