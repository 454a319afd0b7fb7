"""Run configuration: flat JSON keys, presets and validation."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

import numpy as np

from . import core
from .demon import DemonConfig, RestartPolicy
from .model import ModelParams
from .trajectory import Unraveling, UnravelingKind, default_beta

INITIAL_STATES = {
    "gg": core.GG,
    "ge": core.GE,
    "eg": core.EG,
    "ee": core.EE,
    "psi_plus": core.PSI_PLUS,
    "psi_minus": core.PSI_MINUS,
}
FORMATS = ("csv", "json")
JUMP_METHODS = ("waiting", "bernoulli")


class ConfigError(ValueError):
    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


@dataclass(frozen=True)
class RunConfig:
    """Every knob of a run. Times are in model units (1/gamma_c for the presets).

    ``dt = None`` picks the engine default for the chosen unraveling.
    """

    omega1: float = 0.0
    omega2: float = 0.0
    gamma1: float = 0.0
    gamma2: float = 0.0
    gamma_c: float = 0.0
    nth1: float = 0.0
    nth2: float = 0.0
    nthc: float = 0.0
    initial_state: str = "eg"
    dt: float | None = None
    sample_dt: float = 0.05
    t_max: float = 8.0
    n_traj: int = 1000
    master_seed: int = 0
    workers: int = 1
    unraveling: str = "counting"
    beta: float | None = None
    jump_method: str = "waiting"
    bin_width: float = 0.5
    eff1: float = 1.0
    eff2: float = 1.0
    gamma_c_active: float | None = None
    max_duration: float | None = None
    restart: str = "gated"
    out: str = "out"
    format: str = "csv"

    # -- conversions --------------------------------------------------------

    @property
    def params(self) -> ModelParams:
        return ModelParams(
            self.omega1, self.omega2, self.gamma1, self.gamma2, self.gamma_c, self.nth1, self.nth2, self.nthc
        )

    @property
    def psi0(self) -> np.ndarray:
        return INITIAL_STATES[self.initial_state]

    @property
    def unraveling_kind(self) -> Unraveling:
        kind = UnravelingKind(self.unraveling)
        if kind is UnravelingKind.DISPLACED_COUNTING:
            return Unraveling.displaced(self.beta if self.beta is not None else default_beta(self.params))
        return Unraveling(kind)

    @property
    def demon(self) -> DemonConfig:
        active = self.gamma_c_active if self.gamma_c_active is not None else self.gamma_c
        return DemonConfig(self.params, active, self.max_duration, RestartPolicy(self.restart))

    @property
    def time_scale(self) -> float:
        """Factor converting model time to the reported time column."""
        return self.gamma_c if self.gamma_c > 0 else 1.0

    @property
    def time_unit(self) -> str:
        return "gamma_c*t" if self.gamma_c > 0 else "t"

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, data: dict, base: "RunConfig | None" = None) -> "RunConfig":
        known = {f.name: f for f in fields(cls)}
        unknown = sorted(set(data) - set(known))
        if unknown:
            raise ConfigError(unknown[0], "unknown configuration key")
        coerced = {k: _coerce(k, known[k].type, v) for k, v in data.items()}
        return replace(base or cls(), **coerced)

    @classmethod
    def load(cls, path: str | Path, base: "RunConfig | None" = None) -> "RunConfig":
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError("config", f"cannot read {path}: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError("config", "top level must be a JSON object")
        return cls.from_dict(data, base)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json() + "\n", encoding="utf-8")

    # -- validation ---------------------------------------------------------

    def validate(self) -> "RunConfig":
        for name in ("omega1", "omega2", "gamma1", "gamma2", "gamma_c", "nth1", "nth2", "nthc"):
            v = getattr(self, name)
            if not math.isfinite(v):
                raise ConfigError(name, f"must be finite, got {v!r}")
            if name[0] in "gn" and v < 0:
                raise ConfigError(name, f"must be nonnegative, got {v!r}")
        if self.initial_state not in INITIAL_STATES:
            raise ConfigError("initial_state", f"expected one of {sorted(INITIAL_STATES)}")
        for name in ("sample_dt", "t_max", "bin_width"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v > 0):
                raise ConfigError(name, f"must be positive, got {v!r}")
        if self.dt is not None and not (math.isfinite(self.dt) and self.dt > 0):
            raise ConfigError("dt", f"must be positive, got {self.dt!r}")
        if self.n_traj < 1:
            raise ConfigError("n_traj", "must be at least 1")
        if not 0 <= self.master_seed < 2**64:
            raise ConfigError("master_seed", "must be an unsigned 64-bit integer")
        if self.workers < 1:
            raise ConfigError("workers", "must be at least 1")
        try:
            kind = UnravelingKind(self.unraveling)
        except ValueError:
            raise ConfigError("unraveling", f"expected one of {[k.value for k in UnravelingKind]}") from None
        if self.beta is not None:
            if kind is not UnravelingKind.DISPLACED_COUNTING:
                raise ConfigError("beta", "only used with unraveling = displaced_counting")
            if not self.beta > 0:
                raise ConfigError("beta", "must be positive")
        if self.jump_method not in JUMP_METHODS:
            raise ConfigError("jump_method", f"expected one of {list(JUMP_METHODS)}")
        for name in ("eff1", "eff2"):
            if not 0 <= getattr(self, name) <= 1:
                raise ConfigError(name, "must lie in [0, 1]")
        if self.gamma_c_active is not None and not self.gamma_c_active > 0:
            raise ConfigError("gamma_c_active", "must be positive")
        if self.max_duration is not None and not self.max_duration > 0:
            raise ConfigError("max_duration", "must be positive")
        if self.restart not in [r.value for r in RestartPolicy]:
            raise ConfigError("restart", f"expected one of {[r.value for r in RestartPolicy]}")
        if self.format not in FORMATS:
            raise ConfigError("format", f"expected one of {list(FORMATS)}")
        return self


def _coerce(name: str, typ: str, v):
    if v is None:
        if "None" in typ:
            return None
        raise ConfigError(name, "may not be null")
    if typ.startswith("float"):
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            raise ConfigError(name, f"expected a number, got {v!r}")
        return float(v)
    if typ == "int":
        if isinstance(v, bool) or not isinstance(v, int):
            if isinstance(v, float) and v.is_integer():
                return int(v)
            raise ConfigError(name, f"expected an integer, got {v!r}")
        return v
    if not isinstance(v, str):
        raise ConfigError(name, f"expected a string, got {v!r}")
    return v


_FIG3 = dict(omega1=10.0, omega2=10.0, gamma1=2.2, gamma2=0.2, gamma_c=1.0)

PRESETS: dict[str, dict] = {
    "fig2": dict(omega1=10.0, omega2=10.0, gamma1=0.2, gamma2=0.2, gamma_c=1.0, t_max=6.0),
    "fig3": dict(_FIG3, t_max=8.0),
    # gamma2 = gamma1/11 and gamma_c = 5 gamma1/11 when the door is open
    "fig4": dict(
        omega1=10.0,
        omega2=10.0,
        gamma1=2.2,
        gamma2=2.2 / 11,
        gamma_c=5 * 2.2 / 11,
        gamma_c_active=5 * 2.2 / 11,
        nth1=0.05,
        nth2=0.1,
        nthc=0.0,
        initial_state="gg",
        t_max=50.0,
    ),
    "alt_083": dict(omega1=10.0, omega2=10.0, gamma1=1.0, gamma2=0.1, gamma_c=1.0, t_max=8.0),
}


def preset(name: str) -> RunConfig:
    if name not in PRESETS:
        raise ConfigError("preset", f"unknown preset {name!r}; expected one of {sorted(PRESETS)}")
    return RunConfig.from_dict(PRESETS[name])
