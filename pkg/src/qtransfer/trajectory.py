"""Quantum-trajectory unravelings of the two-qubit master equation.

Three unravelings are available:

* counting (quantum jumps), sampled with the waiting-time method: the
  unnormalized ket evolves under ``-i H_eff`` until its squared norm falls
  to a uniform random threshold, at which point a channel is chosen with
  probability proportional to ``rate * <J^dag J>`` and applied;
* displaced counting, the same engine with every jump operator shifted by a
  local-oscillator amplitude ``beta`` and the matching Hamiltonian
  correction, which leaves the averaged dynamics unchanged;
* diffusive homodyne detection (the large-``beta`` limit), one real Wiener
  increment per channel per step.

Ensembles are split into fixed blocks of trajectory indices. Each block is a
vectorized batch and only uses elementwise array operations, so a block's
output depends on nothing but its indices and the master seed.
"""

from __future__ import annotations

import enum
import math
from collections.abc import Sequence
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from functools import lru_cache

import numpy as np

from ._grid import sample_grid, steps_between
from .core import TOL, DegenerateStateError
from .lindblad import STABILITY_LIMIT, StabilityError
from .model import (
    CHANNEL_ORDER,
    ChannelLabel,
    JumpChannel,
    ModelParams,
    build_hamiltonian,
    channel_operator,
    channel_rates,
)
from .rng import PRNG_ALGORITHM, child_seed, make_rng

DEFAULT_DT = 0.005
DEFAULT_HOMODYNE_DT = 0.001
BLOCK_SIZE = 2048
OBSERVABLES = ("n1", "n2", "norm2", "bell_plus", "bell_minus")

_BISECTION_STEPS = 40
_NOISE_BLOCK = 256


class UnravelingKind(enum.Enum):
    COUNTING = "counting"
    DISPLACED_COUNTING = "displaced_counting"
    HOMODYNE_DIFFUSION = "homodyne_diffusion"


@dataclass(frozen=True)
class Unraveling:
    kind: UnravelingKind = UnravelingKind.COUNTING
    beta: float | None = None

    def __post_init__(self):
        if self.kind is UnravelingKind.DISPLACED_COUNTING:
            if self.beta is None or not self.beta > 0:
                raise ValueError("displaced counting needs beta > 0")
        elif self.beta is not None:
            raise ValueError(f"beta is only meaningful for displaced counting, not {self.kind.value}")

    @classmethod
    def counting(cls) -> "Unraveling":
        return cls()

    @classmethod
    def displaced(cls, beta: float) -> "Unraveling":
        return cls(UnravelingKind.DISPLACED_COUNTING, beta)

    @classmethod
    def homodyne(cls) -> "Unraveling":
        return cls(UnravelingKind.HOMODYNE_DIFFUSION)

    @property
    def tag(self) -> str:
        if self.beta is None:
            return self.kind.value
        return f"{self.kind.value}(beta={self.beta!r})"


def default_beta(p: ModelParams) -> float:
    """Local-oscillator amplitude ``10 sqrt(gamma_c)`` (1 when ``gamma_c = 0``)."""
    return 10.0 * math.sqrt(p.gamma_c if p.gamma_c > 0 else 1.0)


@dataclass(frozen=True)
class JumpEvent:
    time: float
    channel: ChannelLabel


@dataclass
class TrajectoryRecord:
    sample_times: np.ndarray
    observables: dict[str, np.ndarray]
    events: list[JumpEvent]
    seed: int
    unraveling: Unraveling = field(default_factory=Unraveling)

    def __post_init__(self):
        ts = [e.time for e in self.events]
        if any(b < a for a, b in zip(ts, ts[1:])):
            raise ValueError("events must be ordered in time")


# -- dynamics ---------------------------------------------------------------


@dataclass(frozen=True)
class Dynamics:
    """Everything the batch engine needs for one fixed set of channels."""

    labels: tuple[ChannelLabel, ...]
    ops: np.ndarray  # (C, 4, 4)
    rates: np.ndarray  # (C,)
    generator: np.ndarray  # -i H_eff
    rate_bound: float

    @classmethod
    def from_params(cls, p: ModelParams, beta: float | None = None) -> "Dynamics":
        rates = channel_rates(p)
        labels = CHANNEL_ORDER
        ops = np.stack([channel_operator(lb) for lb in labels]).astype(complex)
        r = np.array([rates[lb] for lb in labels])
        h = build_hamiltonian(p).astype(complex)
        if beta is not None:
            eye = np.eye(4)
            # J -> J + beta with the Hamiltonian correction that keeps the
            # master equation invariant
            for k in range(len(labels)):
                h = h - 0.5j * beta * r[k] * (ops[k] - ops[k].conj().T)
            ops = ops + beta * eye
        heff = h.copy()
        for k in range(len(labels)):
            heff = heff - 0.5j * r[k] * (ops[k].conj().T @ ops[k])
        bound = float(sum(r[k] * np.linalg.norm(ops[k], 2) ** 2 for k in range(len(labels))))
        return cls(labels, ops, r, -1j * heff, bound)

    def check_step(self, dt: float) -> None:
        if not dt > 0:
            raise ValueError("dt must be positive")
        if dt * self.rate_bound >= STABILITY_LIMIT:
            raise StabilityError(
                f"dt*total_rate = {dt * self.rate_bound:.3g} exceeds the stability guard {STABILITY_LIMIT}"
            )


def _taylor4(a: np.ndarray, h: float) -> np.ndarray:
    """One classic RK4 step of ``dpsi/dt = a psi`` as a matrix."""
    ah = a * h
    out = np.eye(4, dtype=complex)
    term = np.eye(4, dtype=complex)
    for k in range(1, 5):
        term = term @ ah / k
        out = out + term
    return out


def _mv(m: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Row-wise ``m @ v`` for ``v`` of shape (N, 4); ``m`` is (4, 4) or (N, 4, 4)."""
    if m.ndim == 2:
        return v[:, 0, None] * m[:, 0] + v[:, 1, None] * m[:, 1] + v[:, 2, None] * m[:, 2] + v[:, 3, None] * m[:, 3]
    return (
        v[:, 0, None] * m[:, :, 0]
        + v[:, 1, None] * m[:, :, 1]
        + v[:, 2, None] * m[:, :, 2]
        + v[:, 3, None] * m[:, :, 3]
    )


def _norm2(v: np.ndarray) -> np.ndarray:
    p = v.real * v.real + v.imag * v.imag
    return p[:, 0] + p[:, 1] + p[:, 2] + p[:, 3]


def _observables(v: np.ndarray) -> dict[str, np.ndarray]:
    p = v.real * v.real + v.imag * v.imag
    nrm = p[:, 0] + p[:, 1] + p[:, 2] + p[:, 3]
    bp = v[:, 2] + v[:, 1]
    bm = v[:, 2] - v[:, 1]
    return {
        "n1": (p[:, 2] + p[:, 3]) / nrm,
        "n2": (p[:, 1] + p[:, 3]) / nrm,
        "norm2": nrm,
        "bell_plus": 0.5 * (bp.real * bp.real + bp.imag * bp.imag) / nrm,
        "bell_minus": 0.5 * (bm.real * bm.real + bm.imag * bm.imag) / nrm,
    }


def _excitation_class(v: np.ndarray, tol: float = 1e-12) -> np.ndarray:
    """Excitation number of each row, or -1 if the row mixes sectors."""
    p = v.real * v.real + v.imag * v.imag
    nrm = p.sum(axis=1)
    sectors = np.stack([p[:, 0], p[:, 1] + p[:, 2], p[:, 3]], axis=1) / nrm[:, None]
    cls = np.argmax(sectors, axis=1)
    pure = np.max(sectors, axis=1) >= 1 - tol
    return np.where(pure, cls, -1)


class _TaylorPowers:
    """``psi, A psi, A^2 psi, ...`` so ``T(tau) psi`` can be formed for any tau."""

    def __init__(self, a: np.ndarray, v: np.ndarray):
        self.w = [v]
        for _ in range(4):
            self.w.append(_mv(a, self.w[-1]))

    def at(self, tau: np.ndarray) -> np.ndarray:
        t = tau[:, None]
        w = self.w
        return w[0] + t * (w[1] + t * (w[2] / 2 + t * (w[3] / 6 + t * (w[4] / 24))))


def _crossing_time(a: np.ndarray, v: np.ndarray, thr: np.ndarray, hi: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Bisect for the time in ``(0, hi]`` where ``||T(tau) v||^2`` meets ``thr``."""
    tp = _TaylorPowers(a, v)
    lo = np.zeros_like(hi)
    hi = hi.copy()
    for _ in range(_BISECTION_STEPS):
        mid = 0.5 * (lo + hi)
        below = _norm2(tp.at(mid)) <= thr
        hi = np.where(below, mid, hi)
        lo = np.where(below, lo, mid)
    return hi, tp.at(hi)


def _jump_weights(d: Dynamics, v: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    jv = (
        v[0] * d.ops[:, :, 0] + v[1] * d.ops[:, :, 1] + v[2] * d.ops[:, :, 2] + v[3] * d.ops[:, :, 3]
    )
    p = jv.real * jv.real + jv.imag * jv.imag
    return jv, d.rates * (p[:, 0] + p[:, 1] + p[:, 2] + p[:, 3])


def _pick(weights: np.ndarray, u: float) -> int:
    total = float(weights.sum())
    if not total > 0:
        raise RuntimeError("no jump possible: all channel weights vanish")
    c = int(np.searchsorted(np.cumsum(weights), u * total, side="right"))
    return min(c, len(weights) - 1)


# -- single-trajectory building blocks ----------------------------------------


@lru_cache(maxsize=32)
def _cached_dynamics(p: ModelParams) -> Dynamics:
    return Dynamics.from_params(p)


def evolve_no_jump(p: ModelParams, psi: np.ndarray, dt: float) -> np.ndarray:
    """One RK4 step of ``dpsi/dt = -i H_eff psi`` on an unnormalized ket."""
    d = _cached_dynamics(p)
    d.check_step(dt)
    a = d.generator
    psi = np.asarray(psi, dtype=complex)
    k1 = a @ psi
    k2 = a @ (psi + 0.5 * dt * k1)
    k3 = a @ (psi + 0.5 * dt * k2)
    k4 = a @ (psi + dt * k3)
    return psi + (dt / 6) * (k1 + 2 * k2 + 2 * k3 + k4)


def _no_jump_path(d: Dynamics, psi0: np.ndarray, dt: float, n_steps: int) -> np.ndarray:
    step = _taylor4(d.generator, dt)
    out = np.empty((n_steps + 1, 4), dtype=complex)
    out[0] = psi0
    for k in range(n_steps):
        out[k + 1] = step @ out[k]
    return out


def sample_waiting_times(
    p: ModelParams,
    psi0: np.ndarray,
    thresholds: np.ndarray,
    horizon: float,
    dt: float = DEFAULT_DT,
) -> tuple[np.ndarray, np.ndarray]:
    """First-jump times for many uniform thresholds at once.

    All trajectories share the same deterministic no-jump path until their
    first jump, so the path is integrated once. Returns ``(times, states)``;
    rows that survive the horizon get ``nan`` and the state at the horizon.
    """
    d = Dynamics.from_params(p)
    d.check_step(dt)
    n_steps = steps_between(horizon, dt, "horizon")
    path = _no_jump_path(d, np.asarray(psi0, dtype=complex), dt, n_steps)
    norms = _norm2(path)
    thr = np.asarray(thresholds, dtype=float)
    # norms decrease along the path; first grid index with norm <= thr
    k = np.searchsorted(-norms, -thr, side="left")
    times = np.full(thr.shape, np.nan)
    states = np.tile(path[-1], (thr.size, 1))
    hit = np.nonzero(k <= n_steps)[0]
    if hit.size:
        start = np.maximum(k[hit] - 1, 0)
        tau, psi = _crossing_time(d.generator, path[start], thr[hit], np.full(hit.size, dt))
        tau = np.where(k[hit] == 0, 0.0, tau)
        times[hit] = start * dt + tau
        states[hit] = np.where((k[hit] == 0)[:, None], path[0], psi)
    return times, states


def sample_waiting_time(
    p: ModelParams,
    psi0: np.ndarray,
    rng: np.random.Generator,
    horizon: float,
    dt: float = DEFAULT_DT,
) -> tuple[float | None, np.ndarray]:
    """Draw one jump time; ``None`` if no jump happens before ``horizon``."""
    times, states = sample_waiting_times(p, psi0, np.array([rng.random()]), horizon, dt)
    t = float(times[0])
    return (None if math.isnan(t) else t), states[0]


def select_jump_channel(
    channels: Sequence[JumpChannel], psi: np.ndarray, rng: np.random.Generator
) -> ChannelLabel:
    psi = np.asarray(psi, dtype=complex)
    w = np.array([ch.rate * float(np.real(np.vdot(ch.operator @ psi, ch.operator @ psi))) for ch in channels])
    return channels[_pick(w, rng.random())].label


def apply_jump(channel: JumpChannel, psi: np.ndarray) -> np.ndarray:
    out = channel.operator @ np.asarray(psi, dtype=complex)
    n = float(np.real(np.vdot(out, out)))
    if not n > 0:
        raise DegenerateStateError(f"state annihilated by {channel.label.value}")
    return out / np.sqrt(n)


# -- batched counting engine ------------------------------------------------------


class Controller:
    """Hooks that let a protocol switch dynamics during a counting run.

    The default does nothing: every row uses dynamics 0 throughout.
    """

    def initial_models(self, n: int) -> np.ndarray:
        return np.zeros(n, dtype=np.intp)

    def on_jump(self, row: int, label: ChannelLabel, t: float, psi: np.ndarray, model: int) -> int:
        return model

    def after_step(self, t: float, psi: np.ndarray, models: np.ndarray) -> None:
        pass

    def finish(self, t: float, psi: np.ndarray, models: np.ndarray) -> None:
        pass


@dataclass
class BatchOutput:
    sample_times: np.ndarray
    sums: dict[str, np.ndarray]
    sqsums: dict[str, np.ndarray]
    samples: dict[str, np.ndarray] | None
    ev_row: np.ndarray
    ev_time: np.ndarray
    ev_chan: np.ndarray
    first_jump: np.ndarray
    final_class: np.ndarray
    final_state: np.ndarray


class _Recorder:
    def __init__(self, n: int, n_samples: int, keep: bool):
        self.sums = {k: np.zeros(n_samples) for k in OBSERVABLES}
        self.sqsums = {k: np.zeros(n_samples) for k in OBSERVABLES}
        self.samples = {k: np.empty((n, n_samples)) for k in OBSERVABLES} if keep else None
        self.i = 0

    def __call__(self, v: np.ndarray) -> None:
        for k, x in _observables(v).items():
            self.sums[k][self.i] = x.sum()
            self.sqsums[k][self.i] = (x * x).sum()
            if self.samples is not None:
                self.samples[k][:, self.i] = x
        self.i += 1


def run_counting_batch(
    dynamics: Sequence[Dynamics],
    psi0: np.ndarray,
    rngs: Sequence[np.random.Generator],
    dt: float,
    t_max: float,
    sample_dt: float | None,
    controller: Controller | None = None,
    keep_samples: bool = True,
    method: str = "waiting",
) -> BatchOutput:
    """Run ``len(rngs)`` counting trajectories side by side.

    ``dynamics`` may hold several channel configurations sharing the same
    label order; the controller decides which one each row uses.
    """
    if method not in ("waiting", "bernoulli"):
        raise ValueError(f"unknown jump sampling method {method!r}")
    for d in dynamics:
        d.check_step(dt)
    ctl = controller or Controller()
    n = len(rngs)
    n_steps, stride, times = sample_grid(t_max, dt, sample_dt)
    psi0 = np.asarray(psi0, dtype=complex)
    if abs(np.vdot(psi0, psi0).real - 1) > 1e-9:
        raise ValueError("psi0 must be normalized")
    gens = np.stack([d.generator for d in dynamics])
    steps = np.stack([_taylor4(d.generator, dt) for d in dynamics])
    models = ctl.initial_models(n)
    psi = np.tile(psi0, (n, 1))
    rec = _Recorder(n, len(times), keep_samples)
    ev_row: list[int] = []
    ev_time: list[float] = []
    ev_chan: list[int] = []
    first_jump = np.full(n, np.nan)

    def jump(row: int, v: np.ndarray, t: float) -> np.ndarray:
        d = dynamics[models[row]]
        jv, w = _jump_weights(d, v)
        c = _pick(w, rngs[row].random())
        out = jv[c] / math.sqrt(w[c] / d.rates[c])
        ev_row.append(row)
        ev_time.append(t)
        ev_chan.append(c)
        if math.isnan(first_jump[row]):
            first_jump[row] = t
        models[row] = ctl.on_jump(row, d.labels[c], t, out, int(models[row]))
        return out

    rec(psi)
    if method == "waiting":
        thr = np.array([g.random() for g in rngs])
        # rows parked in an invariant state stop being stepped; only safe
        # when the dynamics can never change under them
        can_park = controller is None and len(dynamics) == 1
        live = np.ones(n, dtype=bool)
        act = np.arange(n)
        for s in range(1, n_steps + 1):
            t0 = (s - 1) * dt
            m = steps[0] if len(dynamics) == 1 else steps[models[act]]
            new = _mv(m, psi[act])
            cross = np.nonzero(_norm2(new) <= thr[act])[0]
            if cross.size:
                rows = act[cross]
                new[cross] = _resolve_crossings(rows, psi[rows], t0, dt, thr, gens, models, rngs, jump)
                if can_park:
                    for i, row in zip(cross, rows):
                        if _is_invariant(dynamics[0], new[i]):
                            live[row] = False
            psi[act] = new
            if can_park and cross.size:
                act = np.nonzero(live)[0]
            ctl.after_step(s * dt, psi, models)
            if s % stride == 0:
                rec(psi)
    else:
        wsum = np.zeros(n)
        for s in range(1, n_steps + 1):
            if (s - 1) % _NOISE_BLOCK == 0:
                nb = min(_NOISE_BLOCK, n_steps - s + 1)
                draws = np.stack([g.random((nb, 2)) for g in rngs])
            u = draws[:, (s - 1) % _NOISE_BLOCK]
            for k, d in enumerate(dynamics):
                rows = np.nonzero(models == k)[0]
                if rows.size:
                    w = _batched_weights(d, psi[rows])
                    wsum[rows] = w.sum(axis=1)
            m = steps[0] if len(dynamics) == 1 else steps[models]
            new = _mv(m, psi)
            new = new / np.sqrt(_norm2(new))[:, None]
            for row in np.nonzero(u[:, 0] < wsum * dt)[0]:
                d = dynamics[models[row]]
                jv, w = _jump_weights(d, psi[row])
                c = _pick(w, u[row, 1])
                new[row] = jv[c] / math.sqrt(w[c] / d.rates[c])
                ev_row.append(int(row))
                ev_time.append(s * dt)
                ev_chan.append(c)
                if math.isnan(first_jump[row]):
                    first_jump[row] = s * dt
                models[row] = ctl.on_jump(int(row), d.labels[c], s * dt, new[row], int(models[row]))
            psi = new
            ctl.after_step(s * dt, psi, models)
            if s % stride == 0:
                rec(psi)
    ctl.finish(n_steps * dt, psi, models)
    order = np.lexsort((np.arange(len(ev_row)), np.asarray(ev_row, dtype=np.intp)))
    return BatchOutput(
        sample_times=times,
        sums=rec.sums,
        sqsums=rec.sqsums,
        samples=rec.samples,
        ev_row=np.asarray(ev_row, dtype=np.intp)[order],
        ev_time=np.asarray(ev_time, dtype=float)[order],
        ev_chan=np.asarray(ev_chan, dtype=np.intp)[order],
        first_jump=first_jump,
        final_class=_excitation_class(psi),
        final_state=psi,
    )


def _is_invariant(d: Dynamics, v: np.ndarray) -> bool:
    """True if no jump can occur from ``v`` and ``v`` only picks up a phase."""
    _, w = _jump_weights(d, v)
    if w.sum() != 0.0:
        return False
    av = d.generator @ v
    lam = np.vdot(v, av) / np.vdot(v, v)
    return bool(np.max(np.abs(av - lam * v)) <= 1e-14 * max(1.0, np.max(np.abs(av))))


def _batched_weights(d: Dynamics, v: np.ndarray) -> np.ndarray:
    w = np.empty((v.shape[0], len(d.labels)))
    for c in range(len(d.labels)):
        w[:, c] = d.rates[c] * _norm2(_mv(d.ops[c], v))
    return w


def _resolve_crossings(rows, v, t0, dt, thr, gens, models, rngs, jump) -> np.ndarray:
    """Handle every jump inside one step for the rows whose norm crossed."""
    v = v.copy()
    t_cur = np.full(rows.size, t0)
    rem = np.full(rows.size, dt)
    out = np.empty_like(v)
    pending = np.arange(rows.size)
    while pending.size:
        r = rows[pending]
        tau, vj = _crossing_time(gens[models[r]], v[pending], thr[r], rem[pending])
        t_cur[pending] += tau
        rem[pending] = np.maximum(rem[pending] - tau, 0.0)
        for k, row in enumerate(r):
            vj[k] = jump(int(row), vj[k].copy(), float(t_cur[pending[k]]))
            thr[row] = rngs[row].random()
        after = _TaylorPowers(gens[models[r]], vj).at(rem[pending])
        again = _norm2(after) <= thr[r]
        out[pending[~again]] = after[~again]
        v[pending[again]] = vj[again]
        pending = pending[again]
    return out


# -- diffusive homodyne -----------------------------------------------------------


def run_homodyne_batch(
    p: ModelParams,
    psi0: np.ndarray,
    rngs: Sequence[np.random.Generator],
    dt: float,
    t_max: float,
    sample_dt: float | None,
    keep_samples: bool = True,
) -> BatchOutput:
    """Diffusive homodyne unraveling, one X-quadrature record per channel.

    Each step applies the measurement operator
    ``T(dt) + sum_mu c_mu dY_mu + 1/2 sum_{mu,nu} c_mu c_nu (dY_mu dY_nu - delta dt)``
    where ``T(dt)`` is the RK4 no-jump propagator (``1 - i H_eff dt`` to first order)
    with ``c_mu = sqrt(rate_mu) J_mu`` and ``dY_mu = <c_mu + c_mu^dag> dt + dW_mu``,
    then renormalizes.
    """
    d = Dynamics.from_params(p)
    d.check_step(dt)
    active = [k for k in range(len(d.labels)) if d.rates[k] > 0]
    c_ops = np.stack([np.sqrt(d.rates[k]) * d.ops[k] for k in active]) if active else np.zeros((0, 4, 4))
    n_ch = len(active)
    n = len(rngs)
    n_steps, stride, times = sample_grid(t_max, dt, sample_dt)
    psi0 = np.asarray(psi0, dtype=complex)
    if abs(np.vdot(psi0, psi0).real - 1) > 1e-9:
        raise ValueError("psi0 must be normalized")
    # M = base + sum_a dY_a c_a + 1/2 sum_ab (dY_a dY_b - delta_ab dt) c_a c_b,
    # assembled per row from the nonzero matrices only. The drift uses the
    # RK4 propagator: a plain Euler factor 1 - i H dt inflates each energy
    # level by 1 + (E dt)^2 and, after renormalization, biases populations
    # toward the sectors with large |E|.
    base = _taylor4(d.generator, dt)
    quad = [
        (a, b, c_ops[a] @ c_ops[b])
        for a in range(n_ch)
        for b in range(n_ch)
        if np.any(c_ops[a] @ c_ops[b] != 0)
    ]
    x_ops = [c_ops[a] + c_ops[a].conj().T for a in range(n_ch)]
    psi = np.tile(psi0, (n, 1))
    rec = _Recorder(n, len(times), keep_samples)
    rec(psi)
    sq = math.sqrt(dt)
    for s in range(1, n_steps + 1):
        if (s - 1) % _NOISE_BLOCK == 0:
            nb = min(_NOISE_BLOCK, n_steps - s + 1)
            noise = np.stack([g.standard_normal((nb, max(n_ch, 1))) for g in rngs])
        dw = sq * noise[:, (s - 1) % _NOISE_BLOCK]
        dy = []
        for a in range(n_ch):
            z = psi.conj() * _mv(x_ops[a], psi)
            dy.append((z[:, 0] + z[:, 1] + z[:, 2] + z[:, 3]).real * dt + dw[:, a])
        m = np.broadcast_to(base, (n, 4, 4)).copy()
        for a in range(n_ch):
            m += dy[a][:, None, None] * c_ops[a]
        for a, b, cc in quad:
            coef = 0.5 * (dy[a] * dy[b] - (dt if a == b else 0.0))
            m += coef[:, None, None] * cc
        new = _mv(m, psi)
        psi = new / np.sqrt(_norm2(new))[:, None]
        if s % stride == 0:
            rec(psi)
    empty_i = np.zeros(0, dtype=np.intp)
    return BatchOutput(
        sample_times=times,
        sums=rec.sums,
        sqsums=rec.sqsums,
        samples=rec.samples,
        ev_row=empty_i,
        ev_time=np.zeros(0),
        ev_chan=empty_i,
        first_jump=np.full(n, np.nan),
        final_class=_excitation_class(psi),
        final_state=psi,
    )


# -- public runners ---------------------------------------------------------------


def _run_batch(
    p: ModelParams,
    psi0: np.ndarray,
    rngs: Sequence[np.random.Generator],
    dt: float,
    t_max: float,
    sample_dt: float | None,
    kind: Unraveling,
    keep_samples: bool,
    method: str,
) -> BatchOutput:
    if kind.kind is UnravelingKind.HOMODYNE_DIFFUSION:
        return run_homodyne_batch(p, psi0, rngs, dt, t_max, sample_dt, keep_samples)
    d = Dynamics.from_params(p, kind.beta)
    return run_counting_batch([d], psi0, rngs, dt, t_max, sample_dt, keep_samples=keep_samples, method=method)


def _record_from(out: BatchOutput, row: int, seed: int, kind: Unraveling, labels=CHANNEL_ORDER) -> TrajectoryRecord:
    sel = out.ev_row == row
    events = [JumpEvent(float(t), labels[c]) for t, c in zip(out.ev_time[sel], out.ev_chan[sel])]
    return TrajectoryRecord(
        sample_times=out.sample_times,
        observables={k: v[row].copy() for k, v in out.samples.items()},
        events=events,
        seed=seed,
        unraveling=kind,
    )


def run_counting_trajectory(
    p: ModelParams,
    psi0: np.ndarray,
    t_max: float,
    sample_dt: float | None,
    seed: int,
    dt: float = DEFAULT_DT,
    method: str = "waiting",
) -> TrajectoryRecord:
    kind = Unraveling.counting()
    out = _run_batch(p, psi0, [make_rng(seed)], dt, t_max, sample_dt, kind, True, method)
    return _record_from(out, 0, seed, kind)


def run_homodyne_trajectory(
    p: ModelParams,
    psi0: np.ndarray,
    t_max: float,
    dt: float,
    seed: int,
    kind: Unraveling,
    sample_dt: float | None = None,
) -> TrajectoryRecord:
    if kind.kind is UnravelingKind.COUNTING:
        raise ValueError("use run_counting_trajectory for the plain counting unraveling")
    out = _run_batch(p, psi0, [make_rng(seed)], dt, t_max, sample_dt, kind, True, "waiting")
    return _record_from(out, 0, seed, kind)


@dataclass
class EventTable:
    """Flat jump log of an ensemble: one entry per jump, sorted by trajectory."""

    traj: np.ndarray
    time: np.ndarray
    channel: np.ndarray  # index into ``labels``
    labels: tuple[ChannelLabel, ...] = CHANNEL_ORDER

    def __len__(self) -> int:
        return len(self.traj)

    def mask(self, label: ChannelLabel) -> np.ndarray:
        return self.channel == self.labels.index(label)

    def subset(self, keep: np.ndarray) -> "EventTable":
        return EventTable(self.traj[keep], self.time[keep], self.channel[keep], self.labels)


@dataclass
class EnsembleResult:
    n_traj: int
    times: np.ndarray
    mean: dict[str, np.ndarray]
    stderr: dict[str, np.ndarray]
    events: EventTable
    first_jump_time: np.ndarray
    final_class: np.ndarray
    seeds: np.ndarray
    unraveling: Unraveling
    samples: dict[str, np.ndarray] | None = None
    metadata: dict = field(default_factory=dict)

    @property
    def bin_edges(self) -> np.ndarray:
        return self.times

    @property
    def jump_counts(self) -> dict[ChannelLabel, np.ndarray]:
        """Jumps per channel in each interval between consecutive sample times."""
        out = {}
        for lb in self.events.labels:
            t = self.events.time[self.events.mask(lb)]
            out[lb] = np.histogram(t, bins=self.times)[0] if len(self.times) > 1 else np.zeros(0, int)
        return out

    def record(self, i: int) -> TrajectoryRecord:
        if self.samples is None:
            raise ValueError("ensemble was run without keep_samples")
        sel = self.events.traj == i
        evs = [
            JumpEvent(float(t), self.events.labels[c])
            for t, c in zip(self.events.time[sel], self.events.channel[sel])
        ]
        return TrajectoryRecord(
            self.times, {k: v[i].copy() for k, v in self.samples.items()}, evs, int(self.seeds[i]), self.unraveling
        )

    def records(self) -> list[TrajectoryRecord]:
        return [self.record(i) for i in range(self.n_traj)]


def _block_task(args) -> tuple[int, list[int], BatchOutput]:
    p, psi0, master_seed, start, stop, dt, t_max, sample_dt, kind, keep, method = args
    seeds = [child_seed(master_seed, i) for i in range(start, stop)]
    out = _run_batch(p, psi0, [make_rng(s) for s in seeds], dt, t_max, sample_dt, kind, keep, method)
    return start, seeds, out


def map_blocks(fn, tasks: list, workers: int) -> list:
    """Run block tasks, serially or on a process pool; results keep task order."""
    if workers <= 1 or len(tasks) <= 1:
        return [fn(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(fn, tasks))


def block_ranges(n_traj: int, block_size: int = BLOCK_SIZE) -> list[tuple[int, int]]:
    return [(s, min(s + block_size, n_traj)) for s in range(0, n_traj, block_size)]


def merge_stats(outs: Sequence[BatchOutput], n_traj: int) -> tuple[dict, dict]:
    """Ensemble means and standard errors, merged in block order."""
    mean, stderr = {}, {}
    for k in OBSERVABLES:
        s1 = np.zeros_like(outs[0].sums[k])
        s2 = np.zeros_like(s1)
        for o in outs:
            s1 = s1 + o.sums[k]
            s2 = s2 + o.sqsums[k]
        m = s1 / n_traj
        if n_traj > 1:
            var = np.maximum(s2 - n_traj * m * m, 0.0) / (n_traj - 1)
            se = np.sqrt(var / n_traj)
        else:
            se = np.zeros_like(m)
        mean[k], stderr[k] = m, se
    return mean, stderr


def run_ensemble(
    p: ModelParams,
    psi0: np.ndarray,
    n_traj: int,
    t_max: float,
    sample_dt: float | None,
    master_seed: int,
    kind: Unraveling | None = None,
    dt: float | None = None,
    workers: int = 1,
    keep_samples: bool = False,
    method: str = "waiting",
) -> EnsembleResult:
    """Run ``n_traj`` trajectories; trajectory ``i`` uses ``child_seed(master_seed, i)``."""
    if n_traj < 1:
        raise ValueError("n_traj must be at least 1")
    kind = kind or Unraveling.counting()
    if dt is None:
        dt = DEFAULT_HOMODYNE_DT if kind.kind is UnravelingKind.HOMODYNE_DIFFUSION else DEFAULT_DT
    tasks = [
        (p, psi0, master_seed, a, b, dt, t_max, sample_dt, kind, keep_samples, method)
        for a, b in block_ranges(n_traj)
    ]
    results = map_blocks(_block_task, tasks, workers)
    outs = [r[2] for r in results]
    mean, stderr = merge_stats(outs, n_traj)
    starts = [r[0] for r in results]
    events = EventTable(
        traj=np.concatenate([o.ev_row + s for s, o in zip(starts, outs)]),
        time=np.concatenate([o.ev_time for o in outs]),
        channel=np.concatenate([o.ev_chan for o in outs]),
    )
    samples = None
    if keep_samples:
        samples = {k: np.concatenate([o.samples[k] for o in outs]) for k in OBSERVABLES}
    return EnsembleResult(
        n_traj=n_traj,
        times=outs[0].sample_times,
        mean=mean,
        stderr=stderr,
        events=events,
        first_jump_time=np.concatenate([o.first_jump for o in outs]),
        final_class=np.concatenate([o.final_class for o in outs]),
        seeds=np.array([s for r in results for s in r[1]], dtype=np.uint64),
        unraveling=kind,
        samples=samples,
        metadata={
            "prng": PRNG_ALGORITHM,
            "block_size": BLOCK_SIZE,
            "dt": dt,
            "jump_sampling": method,
            "unraveling": kind.tag,
            "tolerances": asdict(TOL),
        },
    )
