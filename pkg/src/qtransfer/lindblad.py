"""Deterministic Lindblad evolution, steady states and bath heat currents."""

from __future__ import annotations

from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field

import numpy as np

from . import core
from ._grid import sample_grid
from .core import IDENTITY, N1, N2, PSI_MINUS, PSI_PLUS, TOL, Tolerances
from .model import (
    ModelParams,
    build_channels,
    build_hamiltonian,
    total_rate,
)

STABILITY_LIMIT = 0.1


class StabilityError(ValueError):
    """Step size violates ``dt * total_rate < STABILITY_LIMIT``."""


class NonConvergenceError(RuntimeError):
    pass


@dataclass
class TimeSeries:
    times: np.ndarray
    values: dict[str, np.ndarray]
    states: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if len(self.times) > 1 and np.any(np.diff(self.times) <= 0):
            raise ValueError("times must be strictly increasing")
        for k, v in self.values.items():
            if len(v) != len(self.times):
                raise ValueError(f"observable {k!r} has {len(v)} rows, expected {len(self.times)}")

    def __getitem__(self, name: str) -> np.ndarray:
        return self.values[name]


@dataclass(frozen=True)
class HeatCurrentReport:
    """Energy per unit time flowing into each bath (positive = bath heats)."""

    current_cold: float
    current_hot: float
    current_collective: float

    @property
    def total(self) -> float:
        return self.current_cold + self.current_hot + self.current_collective


_NAMED = {
    "n1": N1,
    "n2": N2,
    "trace": IDENTITY,
    "bell_plus": core.projector(PSI_PLUS),
    "bell_minus": core.projector(PSI_MINUS),
    "p_gg": core.projector(core.GG),
    "p_ee": core.projector(core.EE),
}
DEFAULT_OBSERVABLES = ("n1", "n2", "trace", "purity")


def _observable_fn(name: str, spec):
    if spec is not None:
        op = np.asarray(spec, dtype=complex)
        return lambda rho: float(np.real(np.trace(op @ rho)))
    if name == "purity":
        return lambda rho: float(np.real(np.trace(rho @ rho)))
    if name not in _NAMED:
        raise KeyError(f"unknown observable {name!r}")
    op = _NAMED[name]
    return lambda rho: float(np.real(np.trace(op @ rho)))


def liouvillian_apply(p: ModelParams, rho: np.ndarray) -> np.ndarray:
    h = build_hamiltonian(p)
    out = -1j * (h @ rho - rho @ h)
    for ch in build_channels(p):
        j = ch.operator
        jd = j.conj().T
        jdj = jd @ j
        out = out + ch.rate * (j @ rho @ jd - 0.5 * (jdj @ rho + rho @ jdj))
    return out


def liouvillian_matrix(p: ModelParams) -> np.ndarray:
    """Superoperator acting on row-major ``rho.reshape(16)``."""
    eye = np.eye(4)
    h = build_hamiltonian(p)
    sup = -1j * (np.kron(h, eye) - np.kron(eye, h.T))
    for ch in build_channels(p):
        j = ch.operator
        jdj = j.conj().T @ j
        sup = sup + ch.rate * (
            np.kron(j, j.conj()) - 0.5 * np.kron(jdj, eye) - 0.5 * np.kron(eye, jdj.T)
        )
    return sup


def _check_step(p: ModelParams, dt: float) -> None:
    if not dt > 0:
        raise ValueError("dt must be positive")
    if dt * total_rate(p) >= STABILITY_LIMIT:
        raise StabilityError(
            f"dt*total_rate = {dt * total_rate(p):.3g} exceeds the stability guard {STABILITY_LIMIT}"
        )


def _rk4_step(sup: np.ndarray, v: np.ndarray, dt: float) -> np.ndarray:
    k1 = sup @ v
    k2 = sup @ (v + 0.5 * dt * k1)
    k3 = sup @ (v + 0.5 * dt * k2)
    k4 = sup @ (v + dt * k3)
    return v + (dt / 6) * (k1 + 2 * k2 + 2 * k3 + k4)


def integrate(
    p: ModelParams,
    rho0: np.ndarray,
    dt: float,
    t_max: float,
    observables: Sequence[str] | Mapping[str, np.ndarray] = DEFAULT_OBSERVABLES,
    sample_dt: float | None = None,
    keep_states: bool = False,
    tol: Tolerances = TOL,
) -> TimeSeries:
    """Classic fixed-step RK4 integration of the master equation.

    ``observables`` is either a list of names (``n1``, ``n2``, ``trace``,
    ``purity``, ``bell_plus``, ``bell_minus``, ``p_gg``, ``p_ee``) or a mapping
    from column name to operator. Samples are taken every ``sample_dt``
    (default: every step).
    """
    rho0 = np.asarray(rho0, dtype=complex)
    if not core.is_hermitian(rho0, tol.algebraic):
        raise ValueError("rho0 is not Hermitian")
    _check_step(p, dt)
    n_steps, stride, times = sample_grid(t_max, dt, sample_dt)
    if isinstance(observables, Mapping):
        fns = {k: _observable_fn(k, v) for k, v in observables.items()}
    else:
        fns = {k: _observable_fn(k, None) for k in observables}

    sup = liouvillian_matrix(p)
    v = rho0.reshape(-1).copy()
    rows = {k: np.empty(len(times)) for k in fns}
    states = np.empty((len(times), 4, 4), dtype=complex) if keep_states else None

    def record(i, vec):
        rho = vec.reshape(4, 4)
        for k, f in fns.items():
            rows[k][i] = f(rho)
        if states is not None:
            states[i] = rho

    record(0, v)
    s = 1
    for step in range(1, n_steps + 1):
        v = _rk4_step(sup, v, dt)
        if step % stride == 0:
            record(s, v)
            s += 1
    return TimeSeries(times=times, values=rows, states=states)


def evolve(p: ModelParams, rho0: np.ndarray, dt: float, t_max: float) -> np.ndarray:
    """Final density matrix after ``t_max`` (no sampling)."""
    _check_step(p, dt)
    n_steps, _, _ = sample_grid(t_max, dt, None)
    sup = liouvillian_matrix(p)
    v = np.asarray(rho0, dtype=complex).reshape(-1).copy()
    for _ in range(n_steps):
        v = _rk4_step(sup, v, dt)
    return v.reshape(4, 4)


def steady_state(
    p: ModelParams,
    tol: float = 1e-12,
    max_steps: int = 2_000_000,
    dt: float | None = None,
    check_every: int = 50,
) -> np.ndarray:
    """Long-time limit reached from the maximally mixed state."""
    rate = total_rate(p)
    if rate <= 0:
        raise ValueError("steady_state needs at least one active channel")
    if dt is None:
        dt = 0.5 * STABILITY_LIMIT / rate
    _check_step(p, dt)
    sup = liouvillian_matrix(p)
    v = (np.eye(4, dtype=complex) / 4).reshape(-1)
    for step in range(1, max_steps + 1):
        v = _rk4_step(sup, v, dt)
        if step % check_every == 0 and np.max(np.abs(sup @ v)) < tol:
            rho = v.reshape(4, 4)
            rho = 0.5 * (rho + rho.conj().T)
            return rho / np.trace(rho).real
    raise NonConvergenceError(f"steady state not reached within {max_steps} steps")


def heat_currents(p: ModelParams, rho: np.ndarray) -> HeatCurrentReport:
    """Jump-rate bookkeeping of energy flow into each bath.

    Each jump of a bath's channels carries one quantum of the relevant qubit
    energy: ``omega1`` for the cold bath, ``omega2`` for the hot bath and the
    common frequency for the collective bath (which therefore needs
    ``omega1 == omega2`` whenever it is active).
    """
    rho = np.asarray(rho, dtype=complex)
    flows = {"cold": 0.0, "hot": 0.0, "collective": 0.0}
    for ch in build_channels(p):
        j = ch.operator
        jump_rate = ch.rate * float(np.real(np.trace(j.conj().T @ j @ rho)))
        flows[ch.label.bath] += ch.label.bath_quanta * jump_rate
    if p.gamma_c > 0 and p.omega1 != p.omega2:
        raise ValueError("collective heat current undefined for detuned qubits (omega1 != omega2)")
    return HeatCurrentReport(
        current_cold=p.omega1 * flows["cold"],
        current_hot=p.omega2 * flows["hot"],
        current_collective=p.omega1 * flows["collective"],
    )
