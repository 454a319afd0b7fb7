"""Physical model: Hamiltonian, jump channels, effective Hamiltonian and the
closed-form no-jump evolution from ``|e,g>``.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, fields, replace

import numpy as np

from .core import EG, GE, N1, N2, SM1, SM2, SP1, SP2, SZ1, SZ2, adjoint

# below this |eta| t the hyperbolic terms switch to their series expansion
_ETA_SERIES_THRESHOLD = 1e-6


class ChannelLabel(enum.Enum):
    LOCAL1_DOWN = "local1_down"
    LOCAL1_UP = "local1_up"
    LOCAL2_DOWN = "local2_down"
    LOCAL2_UP = "local2_up"
    COLLECTIVE_DOWN = "collective_down"
    COLLECTIVE_UP = "collective_up"

    @property
    def bath(self) -> str:
        """``"cold"`` (qubit 1), ``"hot"`` (qubit 2) or ``"collective"``."""
        if self.value.startswith("local1"):
            return "cold"
        if self.value.startswith("local2"):
            return "hot"
        return "collective"

    @property
    def is_down(self) -> bool:
        return self.value.endswith("down")

    @property
    def bath_quanta(self) -> int:
        """Quanta deposited in the bath by one jump: +1 emission, -1 absorption."""
        return 1 if self.is_down else -1


CHANNEL_ORDER = tuple(ChannelLabel)

_COLLECTIVE_MINUS = (SM1 + SM2) / np.sqrt(2)
_CHANNEL_OPERATORS = {
    ChannelLabel.LOCAL1_DOWN: SM1,
    ChannelLabel.LOCAL1_UP: SP1,
    ChannelLabel.LOCAL2_DOWN: SM2,
    ChannelLabel.LOCAL2_UP: SP2,
    ChannelLabel.COLLECTIVE_DOWN: _COLLECTIVE_MINUS,
    ChannelLabel.COLLECTIVE_UP: adjoint(_COLLECTIVE_MINUS),
}
for _op in _CHANNEL_OPERATORS.values():
    _op.setflags(write=False)


def channel_operator(label: ChannelLabel) -> np.ndarray:
    return _CHANNEL_OPERATORS[label]


@dataclass(frozen=True)
class ModelParams:
    """Frequencies, decay rates and thermal occupations of the two qubits.

    ``gamma_c`` is the collective rate; ``nth1``, ``nth2``, ``nthc`` are the
    mean thermal occupations of the cold, hot and collective baths.
    """

    omega1: float = 0.0
    omega2: float = 0.0
    gamma1: float = 0.0
    gamma2: float = 0.0
    gamma_c: float = 0.0
    nth1: float = 0.0
    nth2: float = 0.0
    nthc: float = 0.0

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if not math.isfinite(v):
                raise ValueError(f"{f.name} must be finite, got {v!r}")
            if f.name.startswith(("gamma", "nth")) and v < 0:
                raise ValueError(f"{f.name} must be nonnegative, got {v!r}")

    @property
    def zero_temperature(self) -> bool:
        return self.nth1 == 0 and self.nth2 == 0 and self.nthc == 0

    def with_(self, **changes) -> "ModelParams":
        return replace(self, **changes)

    def normalized(self) -> tuple["ModelParams", float]:
        """Express rates and frequencies in units of ``gamma_c``.

        Returns the rescaled parameters and the scale that was divided out
        (1.0 when ``gamma_c`` is zero, in which case nothing changes).
        """
        if self.gamma_c <= 0:
            return self, 1.0
        s = self.gamma_c
        return (
            replace(
                self,
                omega1=self.omega1 / s,
                omega2=self.omega2 / s,
                gamma1=self.gamma1 / s,
                gamma2=self.gamma2 / s,
                gamma_c=1.0,
            ),
            s,
        )


@dataclass(frozen=True)
class JumpChannel:
    label: ChannelLabel
    operator: np.ndarray
    rate: float


@dataclass(frozen=True)
class ManifoldAnalytics:
    Gamma: float
    eta: complex
    delta_gamma: float
    delta_omega: float


@dataclass(frozen=True)
class EffectiveRates:
    gtilde1: float
    gtilde2: float
    gtilde_c: float


def channel_rates(p: ModelParams) -> dict[ChannelLabel, float]:
    """Rates of all six channels, zeros included, in ``CHANNEL_ORDER``."""
    return {
        ChannelLabel.LOCAL1_DOWN: p.gamma1 * (p.nth1 + 1),
        ChannelLabel.LOCAL1_UP: p.gamma1 * p.nth1,
        ChannelLabel.LOCAL2_DOWN: p.gamma2 * (p.nth2 + 1),
        ChannelLabel.LOCAL2_UP: p.gamma2 * p.nth2,
        ChannelLabel.COLLECTIVE_DOWN: p.gamma_c * (p.nthc + 1),
        ChannelLabel.COLLECTIVE_UP: p.gamma_c * p.nthc,
    }


def build_channels(p: ModelParams) -> list[JumpChannel]:
    """Jump channels with strictly positive rate."""
    return [
        JumpChannel(label, _CHANNEL_OPERATORS[label], rate)
        for label, rate in channel_rates(p).items()
        if rate > 0
    ]


def total_rate(p: ModelParams) -> float:
    """Sum of channel rates; every jump operator here has ``||J^dag J|| = 1``."""
    return float(sum(channel_rates(p).values()))


def build_hamiltonian(p: ModelParams) -> np.ndarray:
    return 0.5 * p.omega1 * SZ1 + 0.5 * p.omega2 * SZ2


def build_effective_hamiltonian(p: ModelParams) -> np.ndarray:
    """Linear no-jump generator ``H - (i/2) sum_mu rate_mu J_mu^dag J_mu``.

    The state-dependent scalar that keeps the norm fixed is left out; callers
    evolve unnormalized kets and normalize when they report observables.
    """
    h = build_hamiltonian(p).astype(complex)
    for ch in build_channels(p):
        h = h - 0.5j * ch.rate * (adjoint(ch.operator) @ ch.operator)
    return h


def effective_thermal_rates(p: ModelParams) -> EffectiveRates:
    return EffectiveRates(
        gtilde1=p.gamma1 * (1 + 2 * p.nth1),
        gtilde2=p.gamma2 * (1 + 2 * p.nth2),
        gtilde_c=p.gamma_c * (1 + 2 * p.nthc),
    )


def substituted_effective_hamiltonian(p: ModelParams) -> np.ndarray:
    """Zero-temperature ``H_eff`` with every rate replaced by its effective
    thermal value ``gamma (1 + 2 n_th)``.

    Provided for comparison against :func:`build_effective_hamiltonian` on the
    one-excitation block; the two agree on the collective coupling but the
    local diagonal splitting differs when ``nth1 != nth2``.
    """
    r = effective_thermal_rates(p)
    zt = ModelParams(p.omega1, p.omega2, r.gtilde1, r.gtilde2, r.gtilde_c)
    return build_effective_hamiltonian(zt)


ONE_EXCITATION_BASIS = (EG, GE)


def project_one_excitation(op: np.ndarray) -> np.ndarray:
    """2x2 block of ``op`` on ``{|e,g>, |g,e>}`` (in that order)."""
    b = np.stack(ONE_EXCITATION_BASIS, axis=1)
    return b.conj().T @ op @ b


def _require_zero_temperature(p: ModelParams) -> None:
    if not p.zero_temperature:
        raise ValueError("closed-form no-jump evolution requires nth1 = nth2 = nthc = 0")


def manifold_analytics(p: ModelParams) -> ManifoldAnalytics:
    dg = p.gamma1 - p.gamma2
    dw = p.omega1 - p.omega2
    eta = np.sqrt(complex(p.gamma_c**2 + (dg + 2j * dw) ** 2))
    return ManifoldAnalytics(
        Gamma=p.gamma1 + p.gamma2 + p.gamma_c, eta=complex(eta), delta_gamma=dg, delta_omega=dw
    )


def _cosh_and_sinhc(eta: complex, t: float) -> tuple[complex, complex]:
    """``cosh(eta t/4)`` and ``sinh(eta t/4)/eta`` with the eta -> 0 limit."""
    x = eta * t / 4
    if abs(x) < _ETA_SERIES_THRESHOLD:
        return 1 + x * x / 2, (t / 4) * (1 + x * x / 6)
    return np.cosh(x), np.sinh(x) / eta


def analytic_propagator(p: ModelParams, t: float) -> np.ndarray:
    """No-jump propagator ``exp(-i H_eff t)`` restricted to ``{|e,g>, |g,e>}``."""
    if t < 0:
        raise ValueError("t must be nonnegative")
    _require_zero_temperature(p)
    m = manifold_analytics(p)
    a = m.delta_gamma + 2j * m.delta_omega
    ch, sc = _cosh_and_sinhc(m.eta, t)
    pref = np.exp(-m.Gamma * t / 4)
    return pref * np.array(
        [[ch - a * sc, -p.gamma_c * sc], [-p.gamma_c * sc, ch + a * sc]], dtype=complex
    )


def analytic_no_jump_state(p: ModelParams, t: float) -> np.ndarray:
    """Unnormalized ket reached from ``|e,g>`` when no jump occurs up to ``t``."""
    u = analytic_propagator(p, t)
    return u[0, 0] * EG + u[1, 0] * GE


def analytic_populations(p: ModelParams, t: float) -> tuple[float, float]:
    """Normalized ``(n1, n2)`` of :func:`analytic_no_jump_state`."""
    psi = analytic_no_jump_state(p, t)
    nrm = float(np.real(np.vdot(psi, psi)))
    return (
        float(np.real(np.vdot(psi, N1 @ psi))) / nrm,
        float(np.real(np.vdot(psi, N2 @ psi))) / nrm,
    )


def survival_probability(p: ModelParams, t: float) -> float:
    psi = analytic_no_jump_state(p, t)
    return float(np.real(np.vdot(psi, psi)))


def transfer_fidelity_infinite(p: ModelParams) -> float:
    """Long-time overlap ``|<g,e|psi(t)>|^2`` of the normalized no-jump state.

    For ``gamma_c = 0`` the value of the limit ``gamma_c -> 0+`` is returned.
    """
    if p.omega1 != p.omega2:
        raise ValueError("detuned long-time limit undefined: omega1 != omega2")
    _require_zero_temperature(p)
    gc = p.gamma_c
    dg = p.gamma1 - p.gamma2
    eta = math.hypot(gc, dg)
    if dg >= 0:
        # eta - dg = gc^2 / (eta + dg), avoids cancellation for small gc
        s = eta + dg
        if s == 0.0:
            return 0.5
        return s * s / (s * s + gc * gc)
    d = eta - dg
    return gc * gc / (gc * gc + d * d)
