"""Feedback protocol that opens the collective channel only while an
excitation absorbed from the cold bath is in flight.

Phases of one trajectory:

``MONITORING``  collective channel off; a Local1Up jump opens the door.
``TRANSFER``    collective channel on; Local2Down closes the cycle as a
                success, Local1Down or CollectiveDown close it as a failure,
                and a maximum duration closes it as a timeout.
``CLOSED``      collective channel off until the cycle restarts (at once, or
                once qubit 2 has relaxed, depending on the restart policy).

Each jump moves one quantum between the system and one bath, and the ledger
counts the net quanta each bath received.
"""

from __future__ import annotations

import enum
import math
import warnings
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .core import EG, GG
from .model import CHANNEL_ORDER, ChannelLabel, ModelParams, effective_thermal_rates
from .rng import child_seed, make_rng
from .trajectory import (
    DEFAULT_DT,
    BatchOutput,
    Controller,
    Dynamics,
    TrajectoryRecord,
    _record_from,
    _taylor4,
    block_ranges,
    map_blocks,
    run_counting_batch,
    Unraveling,
)

RELAXED_N2 = 1e-12
DEFAULT_MAX_DURATION = 20.0  # in units of 1 / gamma_c_active


class DemonPhase(enum.IntEnum):
    MONITORING = 0
    TRANSFER = 1
    CLOSED = 2


class RestartPolicy(enum.Enum):
    GATED = "gated"
    IMMEDIATE = "immediate"


class Outcome(enum.Enum):
    HOT = "hot"  # Local1Up then Local2Down, nothing in between
    HOT_MIXED = "hot_mixed"  # Local2Down after other jumps inside the phase
    COLD = "cold"
    COLLECTIVE = "collective"
    TIMEOUT = "timeout"
    TRUNCATED = "truncated"  # still open at t_max


@dataclass(frozen=True)
class DemonConfig:
    base: ModelParams
    gamma_c_active: float
    max_duration: float | None = None
    restart: RestartPolicy = RestartPolicy.GATED

    def __post_init__(self):
        if not self.gamma_c_active > 0:
            raise ValueError("gamma_c_active must be positive")
        if self.base.nthc != 0:
            raise ValueError("the collective bath must be at zero temperature (nthc = 0)")
        if self.max_duration is not None and not self.max_duration > 0:
            raise ValueError("max_duration must be positive")
        if isinstance(self.restart, str):
            object.__setattr__(self, "restart", RestartPolicy(self.restart))

    @property
    def transfer_limit(self) -> float:
        if self.max_duration is not None:
            return self.max_duration
        return DEFAULT_MAX_DURATION / self.gamma_c_active

    @property
    def closed_params(self) -> ModelParams:
        return self.base.with_(gamma_c=0.0)

    @property
    def active_params(self) -> ModelParams:
        return self.base.with_(gamma_c=self.gamma_c_active)

    def check_transfer_condition(self) -> bool:
        r = effective_thermal_rates(self.base)
        ok = r.gtilde1 > r.gtilde2
        if not ok:
            warnings.warn(
                "effective rate of qubit 1 does not exceed that of qubit 2; no transfer expected",
                stacklevel=2,
            )
        return ok


@dataclass
class HeatLedger:
    """Net quanta per bath (+1 for each emission into it, -1 per absorption)."""

    cold: int = 0
    hot: int = 0
    collective: int = 0
    timeline: list[tuple[float, DemonPhase]] = field(default_factory=list)

    def as_tuple(self) -> tuple[int, int, int]:
        return self.cold, self.hot, self.collective


@dataclass(frozen=True)
class CycleRecord:
    traj: int
    t_open: float
    t_close: float
    outcome: Outcome
    start_excitations: int
    first_event: ChannelLabel | None
    delta: tuple[int, int, int]  # (cold, hot, collective) over the phase

    @property
    def completed(self) -> bool:
        return self.outcome is Outcome.HOT


_BATH_INDEX = {"cold": 0, "hot": 1, "collective": 2}


def _excitations(psi: np.ndarray) -> int:
    p = np.abs(psi) ** 2
    return int(round((p[1] + p[2] + 2 * p[3]) / p.sum()))


class DemonController(Controller):
    """Phase machine driving :func:`run_counting_batch` (model 0: door shut,
    model 1: door open)."""

    def __init__(self, cfg: DemonConfig, n: int, row_offset: int = 0):
        self.cfg = cfg
        self.offset = row_offset
        self.phase = np.full(n, DemonPhase.MONITORING, dtype=np.int8)
        self.t_open = np.zeros(n)
        self.ledger = np.zeros((n, 3), dtype=np.int64)
        self.exc = np.zeros(n, dtype=np.int64)
        self._open_ledger = np.zeros((n, 3), dtype=np.int64)
        self._open_exc = np.zeros(n, dtype=np.int64)
        self._first = [None] * n
        self._mixed = np.zeros(n, dtype=bool)
        self.timeline: list[list[tuple[float, DemonPhase]]] = [[(0.0, DemonPhase.MONITORING)] for _ in range(n)]
        self.cycles: list[CycleRecord] = []
        # per-event log: phase at the jump and system excitations before/after
        self.ev_phase: list[int] = []
        self.ev_exc_before: list[int] = []
        self.ev_exc_after: list[int] = []
        self.ev_row: list[int] = []

    def initial_models(self, n: int) -> np.ndarray:
        return np.zeros(n, dtype=np.intp)

    def set_initial_state(self, psi0: np.ndarray) -> None:
        self.exc[:] = _excitations(psi0)

    def _enter(self, row: int, t: float, ph: DemonPhase) -> None:
        self.phase[row] = ph
        self.timeline[row].append((t, ph))

    def _close(self, row: int, t: float, outcome: Outcome) -> None:
        d = self.ledger[row] - self._open_ledger[row]
        self.cycles.append(
            CycleRecord(
                traj=row + self.offset,
                t_open=float(self.t_open[row]),
                t_close=t,
                outcome=outcome,
                start_excitations=int(self._open_exc[row]),
                first_event=self._first[row],
                delta=(int(d[0]), int(d[1]), int(d[2])),
            )
        )

    def _maybe_restart(self, row: int, t: float, psi: np.ndarray) -> None:
        if self.cfg.restart is RestartPolicy.IMMEDIATE:
            self._enter(row, t, DemonPhase.MONITORING)
            return
        p = np.abs(psi) ** 2
        if (p[1] + p[3]) / p.sum() <= RELAXED_N2:
            self._enter(row, t, DemonPhase.MONITORING)

    def on_jump(self, row, label, t, psi, model):
        before = int(self.exc[row])
        after = _excitations(psi)
        self.exc[row] = after
        self.ledger[row, _BATH_INDEX[label.bath]] += label.bath_quanta
        ph = DemonPhase(self.phase[row])
        self.ev_row.append(row)
        self.ev_phase.append(int(ph))
        self.ev_exc_before.append(before)
        self.ev_exc_after.append(after)

        if ph is DemonPhase.MONITORING:
            if label is ChannelLabel.LOCAL1_UP:
                self.t_open[row] = t
                self._open_ledger[row] = self.ledger[row]
                # the triggering absorption belongs to the cycle
                self._open_ledger[row, 0] += 1
                self._open_exc[row] = after
                self._first[row] = None
                self._mixed[row] = False
                self._enter(row, t, DemonPhase.TRANSFER)
                return 1
            return 0
        if ph is DemonPhase.TRANSFER:
            if self._first[row] is None:
                self._first[row] = label
            if label is ChannelLabel.LOCAL2_DOWN:
                outcome = Outcome.HOT_MIXED if self._mixed[row] else Outcome.HOT
            elif label is ChannelLabel.LOCAL1_DOWN:
                outcome = Outcome.COLD
            elif label is ChannelLabel.COLLECTIVE_DOWN:
                outcome = Outcome.COLLECTIVE
            else:
                self._mixed[row] = True
                return 1
            self._close(row, t, outcome)
            self._enter(row, t, DemonPhase.CLOSED)
            self._maybe_restart(row, t, psi)
            return 0
        self._maybe_restart(row, t, psi)
        return 0

    def after_step(self, t, psi, models):
        open_rows = np.nonzero(self.phase == DemonPhase.TRANSFER)[0]
        for row in open_rows[t - self.t_open[open_rows] >= self.cfg.transfer_limit - 1e-12]:
            self._close(int(row), t, Outcome.TIMEOUT)
            self._enter(int(row), t, DemonPhase.CLOSED)
            models[row] = 0
            self._maybe_restart(int(row), t, psi[row])
        if self.cfg.restart is RestartPolicy.GATED:
            for row in np.nonzero(self.phase == DemonPhase.CLOSED)[0]:
                self._maybe_restart(int(row), t, psi[row])

    def finish(self, t, psi, models):
        for row in np.nonzero(self.phase == DemonPhase.TRANSFER)[0]:
            self._close(int(row), t, Outcome.TRUNCATED)


@dataclass
class DemonBatch:
    output: BatchOutput
    ledger: np.ndarray  # (n, 3): cold, hot, collective
    cycles: list[CycleRecord]
    timeline: list[list[tuple[float, DemonPhase]]]
    ev_phase: np.ndarray  # aligned with output.ev_row / ev_chan
    ev_exc_before: np.ndarray
    ev_exc_after: np.ndarray
    seeds: list[int]


def _run_block(args) -> DemonBatch:
    cfg, psi0, master_seed, start, stop, dt, t_max, sample_dt, seeds = args
    if seeds is None:
        seeds = [child_seed(master_seed, i) for i in range(start, stop)]
    dyn = [Dynamics.from_params(cfg.closed_params), Dynamics.from_params(cfg.active_params)]
    ctl = DemonController(cfg, len(seeds), row_offset=start)
    ctl.set_initial_state(psi0)
    out = run_counting_batch(dyn, psi0, [make_rng(s) for s in seeds], dt, t_max, sample_dt, controller=ctl)
    # the engine sorts events by (row, time); apply the same order to the log
    order = np.lexsort((np.arange(len(ctl.ev_row)), np.asarray(ctl.ev_row, dtype=np.intp)))
    return DemonBatch(
        output=out,
        ledger=ctl.ledger,
        cycles=ctl.cycles,
        timeline=ctl.timeline,
        ev_phase=np.asarray(ctl.ev_phase, dtype=np.int8)[order],
        ev_exc_before=np.asarray(ctl.ev_exc_before, dtype=np.int64)[order],
        ev_exc_after=np.asarray(ctl.ev_exc_after, dtype=np.int64)[order],
        seeds=list(seeds),
    )


def run_demon_trajectory(
    cfg: DemonConfig,
    t_max: float,
    seed: int,
    psi0: np.ndarray = GG,
    dt: float = DEFAULT_DT,
    sample_dt: float | None = None,
) -> tuple[TrajectoryRecord, HeatLedger]:
    cfg.check_transfer_condition()
    b = _run_block((cfg, np.asarray(psi0, dtype=complex), 0, 0, 1, dt, t_max, sample_dt, [seed]))
    rec = _record_from(b.output, 0, seed, Unraveling.counting())
    cold, hot, coll = (int(x) for x in b.ledger[0])
    return rec, HeatLedger(cold, hot, coll, list(b.timeline[0]))


@dataclass
class DemonEnsembleResult:
    n_traj: int
    t_max: float
    ledger: np.ndarray  # per-trajectory (cold, hot, collective)
    cycles: list[CycleRecord]
    timelines: list[list[tuple[float, DemonPhase]]]
    ev_traj: np.ndarray
    ev_time: np.ndarray
    ev_chan: np.ndarray
    ev_phase: np.ndarray
    ev_exc_before: np.ndarray
    ev_exc_after: np.ndarray
    seeds: np.ndarray

    @property
    def mean_net_quanta(self) -> dict[str, float]:
        m = self.ledger.mean(axis=0)
        return {"cold": float(m[0]), "hot": float(m[1]), "collective": float(m[2])}

    @property
    def stderr_net_quanta(self) -> dict[str, float]:
        if self.n_traj < 2:
            return {k: 0.0 for k in _BATH_INDEX}
        s = self.ledger.std(axis=0, ddof=1) / math.sqrt(self.n_traj)
        return {"cold": float(s[0]), "hot": float(s[1]), "collective": float(s[2])}

    @property
    def n_cycles(self) -> int:
        return len(self.cycles)

    def outcome_counts(self) -> dict[Outcome, int]:
        c = Counter(cy.outcome for cy in self.cycles)
        return {o: c.get(o, 0) for o in Outcome}

    def outcome_frequencies(self) -> dict[Outcome, float]:
        n = max(self.n_cycles, 1)
        return {o: k / n for o, k in self.outcome_counts().items()}

    def completed_cycles(self) -> list[CycleRecord]:
        return [c for c in self.cycles if c.completed]

    def per_trajectory_cycles(self) -> tuple[np.ndarray, np.ndarray]:
        """``(n_cycles, n_completed)`` per trajectory."""
        n = np.zeros(self.n_traj, dtype=np.int64)
        done = np.zeros(self.n_traj, dtype=np.int64)
        for c in self.cycles:
            n[c.traj] += 1
            done[c.traj] += c.completed
        return n, done

    def balance_violations(self) -> int:
        """Events where the system excitation change does not mirror the bath quantum."""
        quanta = np.array([CHANNEL_ORDER[c].bath_quanta for c in self.ev_chan], dtype=np.int64)
        return int(np.count_nonzero(self.ev_exc_after - self.ev_exc_before != -quanta))


def run_demon_ensemble(
    cfg: DemonConfig,
    n_traj: int,
    t_max: float,
    master_seed: int,
    psi0: np.ndarray = GG,
    dt: float = DEFAULT_DT,
    workers: int = 1,
) -> DemonEnsembleResult:
    if n_traj < 1:
        raise ValueError("n_traj must be at least 1")
    cfg.check_transfer_condition()
    psi0 = np.asarray(psi0, dtype=complex)
    tasks = [(cfg, psi0, master_seed, a, b, dt, t_max, None, None) for a, b in block_ranges(n_traj)]
    batches = map_blocks(_run_block, tasks, workers)
    starts = [a for a, _ in block_ranges(n_traj)]
    return DemonEnsembleResult(
        n_traj=n_traj,
        t_max=t_max,
        ledger=np.concatenate([b.ledger for b in batches]),
        cycles=[c for b in batches for c in b.cycles],
        timelines=[tl for b in batches for tl in b.timeline],
        ev_traj=np.concatenate([b.output.ev_row + s for s, b in zip(starts, batches)]),
        ev_time=np.concatenate([b.output.ev_time for b in batches]),
        ev_chan=np.concatenate([b.output.ev_chan for b in batches]),
        ev_phase=np.concatenate([b.ev_phase for b in batches]),
        ev_exc_before=np.concatenate([b.ev_exc_before for b in batches]),
        ev_exc_after=np.concatenate([b.ev_exc_after for b in batches]),
        seeds=np.array([s for b in batches for s in b.seeds], dtype=np.uint64),
    )


def branching_probabilities(cfg: DemonConfig, dt: float = 1e-3) -> dict[str, float]:
    """Probability of each first event after the door opens on ``|e,g>``.

    Integrates the no-jump norm under the open-door dynamics up to the
    maximum phase duration; the channel weights ``rate * ||J psi||^2`` give
    the first-jump density per channel. ``"timeout"`` is the probability of
    no jump before the limit.
    """
    d = Dynamics.from_params(cfg.active_params)
    n = int(round(cfg.transfer_limit / dt))
    step = _taylor4(d.generator, dt)
    psi = EG.astype(complex)
    dens = np.empty((n + 1, len(d.labels)))
    for k in range(n + 1):
        jv = np.einsum("cij,j->ci", d.ops, psi)
        dens[k] = d.rates * np.sum(np.abs(jv) ** 2, axis=1)
        if k < n:
            psi = step @ psi
    # Simpson's rule for the integral of each first-jump density
    w = np.ones(n + 1)
    w[1:-1:2] = 4
    w[2:-1:2] = 2
    if n % 2:
        raise ValueError("transfer_limit / dt must be even")
    probs = (dt / 3) * (w @ dens)
    out = {lb.value: float(p) for lb, p in zip(d.labels, probs)}
    out["timeout"] = float(np.vdot(psi, psi).real)
    return out


def fig4_config(restart: RestartPolicy | str = RestartPolicy.GATED) -> DemonConfig:
    gamma1 = 2.2
    base = ModelParams(
        omega1=10.0, omega2=10.0, gamma1=gamma1, gamma2=gamma1 / 11, gamma_c=0.0, nth1=0.05, nth2=0.1, nthc=0.0
    )
    return DemonConfig(base=base, gamma_c_active=5 * gamma1 / 11, restart=RestartPolicy(restart))
