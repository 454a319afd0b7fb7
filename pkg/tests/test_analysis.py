import numpy as np
import pytest

from qtransfer import analysis as an
from qtransfer.core import EG, GE, GG
from qtransfer.lindblad import integrate
from qtransfer.model import ChannelLabel, ModelParams, analytic_populations, survival_probability
from qtransfer.trajectory import JumpEvent, TrajectoryRecord, run_ensemble

L1, L2, C = ChannelLabel.LOCAL1_DOWN, ChannelLabel.LOCAL2_DOWN, ChannelLabel.COLLECTIVE_DOWN


def rec(events, t_end=2.0, n1=None, seed=0):
    times = np.linspace(0, t_end, 5)
    obs = {"n1": np.zeros(5) if n1 is None else np.asarray(n1, float), "n2": np.zeros(5)}
    return TrajectoryRecord(times, obs, [JumpEvent(t, c) for t, c in events], seed)


def test_histogram_counts_only_local_channels():
    recs = [rec([(0.1, L1)]), rec([(0.7, L2)]), rec([(0.2, C)]), rec([(1.2, L1)])]
    h = an.jump_histogram(recs, bin_width=0.5)
    np.testing.assert_allclose(h.edges, [0, 0.5, 1.0, 1.5, 2.0])
    np.testing.assert_array_equal(h.count_local1, [1, 0, 1, 0])
    np.testing.assert_array_equal(h.count_local2, [0, 1, 0, 0])
    np.testing.assert_array_equal(h.empty, [False, False, False, True])
    assert np.isnan(h.fraction_local1[3])
    np.testing.assert_allclose(h.fraction_local1[:3] + h.fraction_local2[:3], 1.0)
    assert h.low_stats.all()


def test_histogram_rejects_bad_input():
    with pytest.raises(ValueError):
        an.jump_histogram([], 0.5)
    with pytest.raises(ValueError):
        an.histogram_edges(1.0, 0.0)


def test_histogram_edges_cover_horizon():
    assert an.histogram_edges(6.0, 0.5)[-1] == 6.0
    assert an.histogram_edges(6.1, 0.5)[-1] == 6.5


def test_thinning_extremes_and_other_channels():
    recs = [rec([(0.1, L1), (0.2, L2), (0.3, C)]) for _ in range(20)]
    rng = np.random.default_rng(0)
    kept = an.thin_by_efficiency(recs, 0.0, 1.0, rng)
    assert all([e.channel for e in r.events] == [L2, C] for r in kept)
    same = an.thin_by_efficiency(recs, 1.0, 1.0, rng)
    assert all(len(r.events) == 3 for r in same)
    with pytest.raises(ValueError):
        an.thin_by_efficiency(recs, 1.5, 1.0, rng)


def test_thinning_ensemble_scales_counts(fig3):
    ens = run_ensemble(fig3, EG, 4000, 6.0, 0.5, master_seed=1)
    thin = an.thin_by_efficiency(ens, 0.5, 1.0, np.random.default_rng(2))
    h0, h1 = an.jump_histogram(ens), an.jump_histogram(thin)
    np.testing.assert_array_equal(h0.count_local2, h1.count_local2)
    n0, n1 = h0.count_local1.sum(), h1.count_local1.sum()
    assert abs(n1 - 0.5 * n0) < 4 * np.sqrt(0.25 * n0)


def test_expected_fractions_oracle_single_decay():
    # independent decays, no coupling: fraction is a ratio of exponential integrals
    p = ModelParams(gamma1=1.0, gamma2=0.5)
    rho0 = np.outer(EG + GE, EG + GE).astype(complex) / 2
    edges = np.array([0.0, 1.0, 2.0])
    f = an.expected_local_fractions(p, rho0, edges)
    for i in range(2):
        a, b = edges[i], edges[i + 1]
        m1 = 0.5 * (np.exp(-a) - np.exp(-b))
        m2 = 0.5 * (np.exp(-0.5 * a) - np.exp(-0.5 * b))
        assert f[i] == pytest.approx(m1 / (m1 + m2), rel=1e-6)


def test_postselect_lme_matches_closed_form(fig3):
    ts = integrate(fig3, np.outer(EG, EG).astype(complex), 1e-3, 4.0, sample_dt=0.5, keep_states=True)
    ps = an.postselect_lme(ts)
    for i, t in enumerate(ps.times):
        n1, n2 = analytic_populations(fig3, t)
        assert ps.n1[i] == pytest.approx(n1, abs=1e-9)
        assert ps.n2[i] == pytest.approx(n2, abs=1e-9)
        assert ps.survival[i] == pytest.approx(survival_probability(fig3, t), abs=1e-9)


def test_postselect_lme_errors(fig3):
    ts = integrate(fig3, np.outer(EG, EG).astype(complex), 1e-3, 0.5, sample_dt=0.5)
    with pytest.raises(ValueError):
        an.postselect_lme(ts)
    gg = np.outer(GG, GG).astype(complex)[None]
    with pytest.raises(an.PostselectionUndefinedError):
        an.postselect_lme((np.array([0.0]), gg))


def test_postselect_trajectories_counts_survivors():
    recs = [
        rec([], n1=[1, 0.5, 0.2, 0.1, 0.1]),
        rec([(0.3, L1)]),
        rec([(1.9, L2)], n1=[1, 0.7, 0.4, 0.3, 0.3]),
    ]
    est = an.postselect_trajectories(recs, 1.0)
    assert est.n_survivors == 2 and est.n_total == 3
    assert est.mean_n1 == pytest.approx(0.3)
    assert est.surviving_fraction == pytest.approx(2 / 3)
    mean_n1, mean_n2, frac = est
    assert frac == est.surviving_fraction
    with pytest.raises(an.InsufficientStatisticsError):
        an.postselect_trajectories([rec([(0.1, L1)])], 1.0)


def test_ensemble_average_and_grid_check():
    avg = an.ensemble_average([rec([], n1=[1, 1, 1, 1, 1]), rec([], n1=[0, 0, 0, 0, 0])])
    np.testing.assert_allclose(avg["n1"], 0.5)
    np.testing.assert_allclose(avg["n1_stderr"], 0.5)
    with pytest.raises(ValueError):
        an.ensemble_average([rec([], t_end=2.0), rec([], t_end=3.0)])


def test_survival_fraction(fig3):
    ens = run_ensemble(fig3, EG, 3000, 2.0, 0.5, master_seed=8)
    f, se = an.survival_fraction(ens, 2.0)
    assert abs(f - survival_probability(fig3, 2.0)) < 4 * se
