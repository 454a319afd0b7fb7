"""Post-processing of trajectory ensembles: local-jump histograms, detector
thinning, postselection and ensemble averages.

Most functions accept either a list of :class:`TrajectoryRecord` or an
:class:`EnsembleResult`; the latter keeps events in flat arrays and is the
only practical input for 10^5 trajectories.
"""

from __future__ import annotations

import math
from collections.abc import Sequence
from dataclasses import dataclass, replace

import numpy as np

from .core import GG, N1, N2, TOL
from .lindblad import TimeSeries, integrate
from .model import CHANNEL_ORDER, ChannelLabel, ModelParams, channel_rates
from .trajectory import EnsembleResult, EventTable, TrajectoryRecord

LOW_STATS_THRESHOLD = 10
DEFAULT_BIN_WIDTH = 0.5
LOCAL_DOWN = (ChannelLabel.LOCAL1_DOWN, ChannelLabel.LOCAL2_DOWN)


class InsufficientStatisticsError(ValueError):
    pass


class PostselectionUndefinedError(ValueError):
    """The one-excitation population vanished: nothing left to condition on."""


Records = Sequence[TrajectoryRecord] | EnsembleResult


def _event_table(records: Records) -> tuple[EventTable, int, float]:
    """Flat events, number of trajectories and the common final time."""
    if isinstance(records, EnsembleResult):
        return records.events, records.n_traj, float(records.times[-1])
    if len(records) == 0:
        raise ValueError("records must be nonempty")
    traj, time, chan = [], [], []
    for i, r in enumerate(records):
        for e in r.events:
            traj.append(i)
            time.append(e.time)
            chan.append(CHANNEL_ORDER.index(e.channel))
    t_end = max(float(r.sample_times[-1]) for r in records)
    table = EventTable(
        np.asarray(traj, dtype=np.intp), np.asarray(time, dtype=float), np.asarray(chan, dtype=np.intp)
    )
    return table, len(records), t_end


# -- histograms ---------------------------------------------------------------


@dataclass
class HistogramSeries:
    """Counts of two local channels per time bin.

    Fractions are ``nan`` in empty bins; ``low_stats`` marks bins with fewer
    than ``LOW_STATS_THRESHOLD`` events in total.
    """

    edges: np.ndarray
    count_local1: np.ndarray
    count_local2: np.ndarray
    channels: tuple[ChannelLabel, ChannelLabel] = LOCAL_DOWN

    def __post_init__(self):
        if np.any(self.count_local1 < 0) or np.any(self.count_local2 < 0):
            raise ValueError("counts must be nonnegative")
        if not len(self.edges) == len(self.count_local1) + 1 == len(self.count_local2) + 1:
            raise ValueError("need one more edge than bins")

    @property
    def total(self) -> np.ndarray:
        return self.count_local1 + self.count_local2

    @property
    def empty(self) -> np.ndarray:
        return self.total == 0

    @property
    def low_stats(self) -> np.ndarray:
        return self.total < LOW_STATS_THRESHOLD

    def _fraction(self, c: np.ndarray) -> np.ndarray:
        tot = self.total
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(tot > 0, c / np.maximum(tot, 1), np.nan)

    @property
    def fraction_local1(self) -> np.ndarray:
        return self._fraction(self.count_local1)

    @property
    def fraction_local2(self) -> np.ndarray:
        return self._fraction(self.count_local2)

    def fraction_stderr(self) -> np.ndarray:
        """Binomial standard error of ``fraction_local1`` (same for local2)."""
        f = self.fraction_local1
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.sqrt(f * (1 - f) / self.total)

    def bins_within(self, t0: float, t1: float) -> np.ndarray:
        """Boolean mask of bins lying inside ``[t0, t1]``."""
        eps = 1e-9 * max(1.0, abs(t1))
        return (self.edges[:-1] >= t0 - eps) & (self.edges[1:] <= t1 + eps)


def histogram_edges(t_end: float, bin_width: float) -> np.ndarray:
    if not bin_width > 0:
        raise ValueError("bin_width must be positive")
    n = max(1, int(math.ceil(t_end / bin_width - 1e-9)))
    return np.arange(n + 1) * bin_width


def jump_histogram(
    records: Records,
    bin_width: float = DEFAULT_BIN_WIDTH,
    channels_of_interest: tuple[ChannelLabel, ChannelLabel] = LOCAL_DOWN,
    t_end: float | None = None,
) -> HistogramSeries:
    """Histogram two channels' jumps over time, ignoring every other channel."""
    if len(channels_of_interest) != 2:
        raise ValueError("exactly two channels are histogrammed")
    ev, _, t_rec = _event_table(records)
    edges = histogram_edges(t_rec if t_end is None else t_end, bin_width)
    counts = [
        np.histogram(ev.time[ev.mask(lb)], bins=edges)[0].astype(np.int64) for lb in channels_of_interest
    ]
    return HistogramSeries(edges, counts[0], counts[1], tuple(channels_of_interest))


def thin_by_efficiency(records, eff1: float, eff2: float, rng: np.random.Generator, channels=LOCAL_DOWN):
    """Keep each event of ``channels[0]`` (``channels[1]``) with probability
    ``eff1`` (``eff2``); other events are untouched.

    Accepts a list of records, an ``EventTable`` or an ``EnsembleResult`` and
    returns the same kind. One uniform is drawn per candidate event, in
    trajectory-then-time order.
    """
    for e in (eff1, eff2):
        if not 0 <= e <= 1:
            raise ValueError("efficiencies must lie in [0, 1]")
    effs = {channels[0]: eff1, channels[1]: eff2}
    if isinstance(records, EnsembleResult):
        return replace(records, events=thin_by_efficiency(records.events, eff1, eff2, rng, channels))
    if isinstance(records, EventTable):
        keep = np.ones(len(records), dtype=bool)
        prob = np.ones(len(records))
        for lb, e in effs.items():
            prob[records.mask(lb)] = e
        cand = np.nonzero(prob < 1)[0]
        keep[cand] = rng.random(cand.size) < prob[cand]
        return records.subset(keep)
    out = []
    for r in records:
        kept = [e for e in r.events if e.channel not in effs or rng.random() < effs[e.channel]]
        out.append(replace(r, events=kept))
    return out


def expected_local_fractions(
    p: ModelParams,
    rho0: np.ndarray,
    edges: np.ndarray,
    dt: float = 1e-3,
    eff1: float = 1.0,
    eff2: float = 1.0,
) -> np.ndarray:
    """Expected ``fraction_local1`` per bin from the master equation.

    The mean number of Local1Down (Local2Down) clicks in a bin is the
    integral of ``gamma1 (nth1+1) <n1>`` (``gamma2 (nth2+1) <n2>``) over it.
    Detector efficiencies scale each count.
    """
    r = channel_rates(p)
    ts = integrate(p, rho0, dt, float(edges[-1]), ("n1", "n2"))
    rate1 = eff1 * r[ChannelLabel.LOCAL1_DOWN] * ts["n1"]
    rate2 = eff2 * r[ChannelLabel.LOCAL2_DOWN] * ts["n2"]
    # cumulative trapezoid, then difference at the bin edges
    c1 = np.concatenate([[0.0], np.cumsum(0.5 * dt * (rate1[1:] + rate1[:-1]))])
    c2 = np.concatenate([[0.0], np.cumsum(0.5 * dt * (rate2[1:] + rate2[:-1]))])
    idx = np.rint(np.asarray(edges) / dt).astype(int)
    m1 = np.diff(c1[idx])
    m2 = np.diff(c2[idx])
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(m1 + m2 > 0, m1 / (m1 + m2), np.nan)


# -- postselection ------------------------------------------------------------------


@dataclass
class PostselectedSeries:
    times: np.ndarray
    n1: np.ndarray
    n2: np.ndarray
    survival: np.ndarray

    def __post_init__(self):
        if np.any(np.abs(self.n1 + self.n2 - 1) > TOL.trace):
            raise ValueError("postselected populations must sum to 1")


_NSUM = N1 + N2
_P_GG = np.outer(GG, GG.conj())


def postselect_lme(rho_series, tol: float = TOL.trace) -> PostselectedSeries:
    """Condition master-equation states on the one-excitation sector.

    ``rho_series`` is a :class:`TimeSeries` with stored states or a pair
    ``(times, states)``. The ``|g,g>`` population is removed and the rest is
    divided by ``Tr[(n1 + n2) rho]``. This is exact only while the state has
    no ``|e,e>`` weight and no coherence between excitation sectors, which
    holds at zero temperature from a state with at most one excitation; both
    conditions are checked.
    """
    if isinstance(rho_series, TimeSeries):
        if rho_series.states is None:
            raise ValueError("TimeSeries has no stored states; integrate with keep_states=True")
        times, states = rho_series.times, rho_series.states
    else:
        times, states = rho_series
    times = np.asarray(times, dtype=float)
    states = np.asarray(states, dtype=complex)
    ee = np.abs(states[:, 3, 3])
    if np.any(ee > tol):
        raise ValueError(f"state has |e,e> population {ee.max():.3g}; postselection formula does not apply")
    # coherences between |g,g> and the one-excitation block
    cross = np.abs(states[:, 0, 1:3]).max(axis=1) if len(states) else np.zeros(0)
    if np.any(cross > tol):
        raise ValueError("state has coherences between excitation sectors")
    denom = np.einsum("ij,tji->t", _NSUM, states).real
    if np.any(denom < 1e-12):
        raise PostselectionUndefinedError("fully decayed; postselection undefined")
    ps = (states - _P_GG[None] * states[:, 0, 0][:, None, None]) / denom[:, None, None]
    n1 = np.einsum("ij,tji->t", N1, ps).real
    n2 = np.einsum("ij,tji->t", N2, ps).real
    norm = np.einsum("ij,tji->t", _NSUM, ps).real
    if np.any(np.abs(norm - 1) > tol):
        raise ArithmeticError("postselected state not normalized")
    return PostselectedSeries(times, n1, n2, denom)


@dataclass(frozen=True)
class PostselectionEstimate:
    mean_n1: float
    mean_n2: float
    surviving_fraction: float
    stderr_n1: float
    stderr_n2: float
    n_survivors: int
    n_total: int

    def __iter__(self):
        return iter((self.mean_n1, self.mean_n2, self.surviving_fraction))

    @property
    def fraction_stderr(self) -> float:
        f = self.surviving_fraction
        return math.sqrt(f * (1 - f) / self.n_total)


def _sample_index(times: np.ndarray, t: float) -> int:
    k = int(np.argmin(np.abs(times - t)))
    if abs(times[k] - t) > 1e-9 * max(1.0, abs(t)):
        raise ValueError(f"t={t!r} is not on the sample grid")
    return k


def postselect_trajectories(records: Records, t: float) -> PostselectionEstimate:
    """Average ``n1``, ``n2`` at ``t`` over trajectories with no jump up to ``t``."""
    if isinstance(records, EnsembleResult):
        if records.samples is None:
            raise ValueError("ensemble was run without keep_samples")
        k = _sample_index(records.times, t)
        fj = records.first_jump_time
        alive = np.isnan(fj) | (fj > t)
        x1 = records.samples["n1"][alive, k]
        x2 = records.samples["n2"][alive, k]
        n = records.n_traj
    else:
        if len(records) == 0:
            raise ValueError("records must be nonempty")
        x1, x2 = [], []
        for r in records:
            if r.events and r.events[0].time <= t:
                continue
            k = _sample_index(r.sample_times, t)
            x1.append(r.observables["n1"][k])
            x2.append(r.observables["n2"][k])
        x1, x2, n = np.asarray(x1), np.asarray(x2), len(records)
    m = len(x1)
    if m == 0:
        raise InsufficientStatisticsError(f"no trajectory survives to t={t!r}: insufficient statistics")

    def se(x):
        return float(np.std(x, ddof=1) / math.sqrt(m)) if m > 1 else 0.0

    return PostselectionEstimate(
        float(np.mean(x1)), float(np.mean(x2)), m / n, se(x1), se(x2), m, n
    )


def ensemble_average(records: Sequence[TrajectoryRecord]) -> TimeSeries:
    """Pointwise mean of every observable; ``<name>_stderr`` columns hold the
    standard error of the mean (zero for a single record)."""
    if len(records) == 0:
        raise ValueError("records must be nonempty")
    times = records[0].sample_times
    for r in records[1:]:
        if r.sample_times.shape != times.shape or np.any(r.sample_times != times):
            raise ValueError("records do not share a sample grid")
    n = len(records)
    values = {}
    for k in records[0].observables:
        x = np.stack([r.observables[k] for r in records])
        values[k] = x.mean(axis=0)
        values[f"{k}_stderr"] = x.std(axis=0, ddof=1) / math.sqrt(n) if n > 1 else np.zeros(len(times))
    return TimeSeries(times=times.copy(), values=values)


def survival_fraction(result: EnsembleResult, t: float) -> tuple[float, float]:
    """Fraction of trajectories with no jump up to ``t`` and its binomial error."""
    fj = result.first_jump_time
    f = float(np.mean(np.isnan(fj) | (fj > t)))
    return f, math.sqrt(max(f * (1 - f), 0.0) / result.n_traj)

