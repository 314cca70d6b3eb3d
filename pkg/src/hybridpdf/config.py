"""Run configuration: nested dataclasses loaded from JSON with dotted overrides."""
from __future__ import annotations

import json
import math
from dataclasses import MISSING, asdict, dataclass, field, fields, is_dataclass
from pathlib import Path

import numpy as np

from .model import PRESETS, REGIMES, ConditionalGaussianModel, ou_model, triad_model, triad_params


class ConfigError(ValueError):
    """Invalid or unknown configuration."""


@dataclass
class ModelConfig:
    """Model family and parameters.

    ``family`` is "triad" (presets triad, triad_modified, triad_damped with
    regime I or II; any parameter may be overridden) or "ou" (one observed
    and one hidden Ornstein-Uhlenbeck component).
    """

    family: str = "triad"
    preset: str = "triad_modified"
    regime: str = "I"
    A1: float | None = None
    A2: float | None = None
    A3: float | None = None
    d1: float | None = None
    d2: float | None = None
    d3: float | None = None
    sigma2: float | None = None
    sigma3: float | None = None
    epsilon: float | None = None
    d: float = 1.0
    sigma: float = 1.0
    d_obs: float = 1.0
    sigma_obs: float = 1.0
    coupling: float = 0.0

    def validate(self):
        if self.family not in ("triad", "ou"):
            raise ConfigError(f"model.family must be 'triad' or 'ou', got {self.family!r}")
        if self.family == "triad":
            if self.preset not in PRESETS:
                raise ConfigError(f"model.preset must be one of {sorted(PRESETS)}")
            if self.regime not in REGIMES:
                raise ConfigError(f"model.regime must be one of {sorted(REGIMES)}")

    def overrides(self) -> dict:
        keys = ("A1", "A2", "A3", "d1", "d2", "d3", "sigma2", "sigma3", "epsilon")
        return {k: float(getattr(self, k)) for k in keys if getattr(self, k) is not None}

    def build(self) -> ConditionalGaussianModel:
        if self.family == "ou":
            return ou_model(d=self.d, sigma=self.sigma, d_obs=self.d_obs, sigma_obs=self.sigma_obs,
                            coupling=self.coupling)
        return triad_model(triad_params(self.regime, self.preset, **self.overrides()))

    def triad(self):
        return triad_params(self.regime, self.preset, **self.overrides()) if self.family == "triad" else None


@dataclass
class BandwidthConfig:
    """``policy``: "scaling" (H = kappa L^(-2/(4+n))), "silverman" or "fixed" (needs H).

    ``c``: per-direction factors; null means sample standard deviations.
    """

    policy: str = "scaling"
    kappa: float = 1.0
    H: float | None = None
    c: list | None = None

    def validate(self):
        if self.policy not in ("scaling", "silverman", "fixed"):
            raise ConfigError("bandwidth.policy must be scaling, silverman or fixed")
        if self.policy == "fixed" and not (self.H and self.H > 0):
            raise ConfigError("bandwidth.H must be positive with the fixed policy")
        if not self.kappa > 0:
            raise ConfigError("bandwidth.kappa must be positive")


@dataclass
class GridConfig:
    n_points: int = 100
    n_std: float = 5.0

    def validate(self):
        if self.n_points < 5:
            raise ConfigError("grid.n_points must be at least 5")
        if not self.n_std > 0:
            raise ConfigError("grid.n_std must be positive")


@dataclass
class ReferenceConfig:
    """Brute-force Monte Carlo truth; ``kind`` "mc" or "none"."""

    kind: str = "mc"
    n_samples: int = 100_000
    dt: float | None = None
    seed: int = 1_000_003

    def validate(self):
        if self.kind not in ("mc", "none"):
            raise ConfigError("reference.kind must be 'mc' or 'none'")
        if self.kind == "mc" and self.n_samples < 2:
            raise ConfigError("reference.n_samples must be at least 2")


@dataclass
class FilterConfig:
    delta: float = 1e-6
    eig_floor: float = 1e-10
    psd_floor: bool = True


@dataclass
class CompareConfig:
    Ls: list = field(default_factory=lambda: [125, 250, 500, 1000, 2000])
    n_repeats: int = 20
    t_eval: float = 1.0
    joint_points: int = 40
    hidden_points: int = 200
    slope_tol: float = 0.15
    estimators: list = field(default_factory=lambda: ["hybrid", "direct", "hidden"])

    def validate(self):
        if len(self.Ls) < 4:
            raise ConfigError("compare.Ls needs at least 4 ensemble sizes for a scaling fit")
        if any(int(L) < 2 for L in self.Ls):
            raise ConfigError("compare.Ls entries must be >= 2")
        if max(self.Ls) < 10 * min(self.Ls):
            raise ConfigError("compare.Ls must span at least one decade")
        if self.n_repeats < 2:
            raise ConfigError("compare.n_repeats must be at least 2")


@dataclass
class DiagnoseConfig:
    checkpoints: list = field(default_factory=lambda: [float(k) for k in range(2, 21, 2)])
    v: float = 1.0
    m: float = 1.0
    sample: int = 0
    R0: list = field(default_factory=lambda: [1e-2, 1.0])
    horizon: float = 10.0
    contraction_tol: float = 1e-3

    def validate(self):
        if not self.checkpoints:
            raise ConfigError("diagnose.checkpoints must not be empty")
        if min(self.checkpoints) < self.v:
            raise ConfigError("diagnose.checkpoints must be >= diagnose.v")
        if len(self.R0) != 2 or min(self.R0) <= 0:
            raise ConfigError("diagnose.R0 must hold two positive values")


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    L: int = 500
    dt: float = 1e-3
    t_end: float | None = None
    t_eval: list = field(default_factory=lambda: [1.0])
    seed: int = 0
    threads: int = 1
    store_stride: int = 10
    blowup_cap: float = 1e8
    estimators: list = field(default_factory=lambda: ["hybrid"])
    projection: list | None = None
    bandwidth: BandwidthConfig = field(default_factory=BandwidthConfig)
    grid: GridConfig = field(default_factory=GridConfig)
    reference: ReferenceConfig = field(default_factory=ReferenceConfig)
    filter: FilterConfig = field(default_factory=FilterConfig)
    compare: CompareConfig = field(default_factory=CompareConfig)
    diagnose: DiagnoseConfig = field(default_factory=DiagnoseConfig)
    out: str = "out"

    def validate(self) -> "RunConfig":
        if self.L < 1:
            raise ConfigError("L must be positive")
        if not (self.dt > 0 and math.isfinite(self.dt)):
            raise ConfigError("dt must be positive")
        if any(t < 0 for t in self.t_eval):
            raise ConfigError("t_eval entries must be nonnegative")
        if self.store_stride < 1:
            raise ConfigError("store_stride must be >= 1")
        if not self.blowup_cap > 0:
            raise ConfigError("blowup_cap must be positive")
        if self.threads < 1:
            raise ConfigError("threads must be >= 1")
        bad = set(self.estimators) - {"hybrid", "direct"}
        if bad:
            raise ConfigError(f"unknown estimators {sorted(bad)}; choose from hybrid, direct")
        for sub in (self.model, self.bandwidth, self.grid, self.reference, self.compare, self.diagnose):
            if hasattr(sub, "validate"):
                sub.validate()
        return self

    @property
    def horizon(self) -> float:
        if self.t_end is not None:
            return float(self.t_end)
        return float(max(self.t_eval)) if self.t_eval else 1.0

    def as_dict(self) -> dict:
        return asdict(self)


# --------------------------------------------------------------------------
# loading

def _check_type(value, default, typ: str, path: str):
    want_float = "float" in typ
    want_int = typ.startswith("int")
    if value is None:
        if "None" in typ:
            return None
        raise ConfigError(f"{path} must not be null")
    if isinstance(default, bool) or typ == "bool":
        if not isinstance(value, bool):
            raise ConfigError(f"{path} must be true or false")
        return value
    if want_int and not want_float:
        if isinstance(value, bool) or not isinstance(value, (int, float)) or float(value) != int(value):
            raise ConfigError(f"{path} must be an integer")
        return int(value)
    if want_float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path} must be a number")
        return float(value)
    if typ.startswith("str"):
        if not isinstance(value, str):
            raise ConfigError(f"{path} must be a string")
        return value
    if typ.startswith("list"):
        if not isinstance(value, list):
            raise ConfigError(f"{path} must be a list")
        return value
    return value


def from_dict(cls, data: dict, path: str = ""):
    """Build a config dataclass, rejecting unknown keys."""
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'} must be an object")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        where = f" in {path}" if path else ""
        raise ConfigError(f"unknown config key(s){where}: {', '.join(unknown)}")
    kw = {}
    for name, f in known.items():
        if name not in data:
            continue
        sub = f"{path}.{name}" if path else name
        default = f.default_factory() if f.default_factory is not MISSING else f.default
        if is_dataclass(default):
            kw[name] = from_dict(type(default), data[name], sub)
        else:
            kw[name] = _check_type(data[name], default, str(f.type), sub)
    return cls(**kw)


def parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_override(data: dict, key: str, value) -> None:
    parts = key.split(".")
    if not all(parts):
        raise ConfigError(f"malformed override key {key!r}")
    node = data
    for p in parts[:-1]:
        nxt = node.setdefault(p, {})
        if not isinstance(nxt, dict):
            raise ConfigError(f"override {key!r} descends into a non-object")
        node = nxt
    node[parts[-1]] = value


def load_config(path=None, overrides=(), seed=None, threads=None, out=None) -> RunConfig:
    """Read a JSON config (or defaults), apply ``KEY=VALUE`` overrides and flags."""
    data = {}
    if path is not None:
        try:
            data = json.loads(Path(path).read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} must have the form KEY=VALUE")
        k, v = item.split("=", 1)
        apply_override(data, k.strip(), parse_value(v.strip()))
    if seed is not None:
        data["seed"] = int(seed)
    if threads is not None:
        data["threads"] = int(threads)
    if out is not None:
        data["out"] = str(out)
    cfg = from_dict(RunConfig, data)
    return cfg.validate()


def resolve_bandwidth(bcfg: BandwidthConfig, samples: np.ndarray, L: int):
    """Bandwidth for ``samples`` ``(L, n)`` under the configured policy."""
    from .density import Bandwidth, sample_scale, scaling_bandwidth, silverman_bandwidth

    n = samples.shape[1]
    if bcfg.policy == "silverman":
        bw = silverman_bandwidth(samples)
        if bcfg.c is not None:
            bw = Bandwidth(bw.H, _c_for(bcfg.c, n))
        return bw
    c = _c_for(bcfg.c, n) if bcfg.c is not None else sample_scale(samples)
    if bcfg.policy == "fixed":
        return Bandwidth(bcfg.H, c)
    return scaling_bandwidth(L, n, c, bcfg.kappa)


def _c_for(c, n):
    arr = np.asarray(c, dtype=float).ravel()
    if arr.size == 1:
        return np.full(n, arr[0])
    if arr.size < n:
        raise ConfigError(f"bandwidth.c has {arr.size} entries, need {n}")
    return arr[:n]


__all__ = ["RunConfig", "ModelConfig", "BandwidthConfig", "GridConfig", "ReferenceConfig",
           "FilterConfig", "CompareConfig", "DiagnoseConfig", "ConfigError", "load_config",
           "from_dict", "apply_override", "parse_value", "resolve_bandwidth"]
