import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from qtransfer import lindblad
from qtransfer.core import EG, EE, IDENTITY, projector
from qtransfer.model import ModelParams


def random_rho(seed):
    rng = np.random.default_rng(seed)
    a = rng.normal(size=(4, 4)) + 1j * rng.normal(size=(4, 4))
    rho = a @ a.conj().T
    return rho / np.trace(rho)


def test_superoperator_matches_direct_action():
    p = ModelParams(10.0, 9.0, 1.0, 0.3, 0.7, 0.1, 0.2, 0.05)
    rho = random_rho(0)
    direct = lindblad.liouvillian_apply(p, rho)
    via_matrix = (lindblad.liouvillian_matrix(p) @ rho.reshape(-1)).reshape(4, 4)
    np.testing.assert_allclose(direct, via_matrix, atol=1e-13)


@settings(max_examples=25, deadline=None)
@given(
    st.floats(0, 3), st.floats(0, 3), st.floats(0, 3), st.floats(0, 0.5), st.floats(0, 0.5), st.integers(0, 10**6)
)
def test_generator_is_traceless_and_hermiticity_preserving(g1, g2, gc, n1, n2, seed):
    p = ModelParams(10.0, 10.0, g1, g2, gc, n1, n2)
    out = lindblad.liouvillian_apply(p, random_rho(seed))
    assert abs(np.trace(out)) < 1e-12
    np.testing.assert_allclose(out, out.conj().T, atol=1e-12)


def test_no_dissipation_keeps_populations_constant():
    ts = lindblad.integrate(ModelParams(10.0, 10.0), projector(EG), 0.01, 2.0, sample_dt=0.5)
    np.testing.assert_allclose(ts["n1"], 1.0, atol=1e-14)
    np.testing.assert_allclose(ts["n2"], 0.0, atol=1e-14)
    np.testing.assert_allclose(ts["purity"], 1.0, atol=1e-12)


def test_single_qubit_decay_is_exponential():
    p = ModelParams(gamma1=1.3)
    ts = lindblad.integrate(p, projector(EG), 1e-3, 3.0, ("n1",), sample_dt=0.5)
    np.testing.assert_allclose(ts["n1"], np.exp(-1.3 * ts.times), atol=1e-11)


def test_thermal_steady_state_occupation():
    p = ModelParams(gamma1=1.0, nth1=0.3, gamma2=0.5, nth2=0.1)
    rho = lindblad.steady_state(p)
    assert np.real(np.trace(projector(EG) @ rho) + np.trace(projector(EE) @ rho)) == pytest.approx(0.3 / 1.6, abs=1e-9)


def test_uncoupled_baths_carry_no_current():
    p = ModelParams(10.0, 10.0, 2.2, 0.2, 0.0, 0.05, 0.1)
    q = lindblad.heat_currents(p, lindblad.steady_state(p))
    assert abs(q.current_cold) < 1e-9 and abs(q.current_hot) < 1e-9 and q.current_collective == 0


def test_heat_currents_conserve_energy_in_steady_state():
    p = ModelParams(10.0, 10.0, 2.2, 0.2, 1.0, 0.05, 0.1)
    q = lindblad.heat_currents(p, lindblad.steady_state(p))
    assert abs(q.total) < 1e-9


def test_heat_current_of_excited_state():
    q = lindblad.heat_currents(ModelParams(5.0, 5.0, gamma1=2.0), projector(EG))
    assert q.current_cold == pytest.approx(10.0)


def test_detuned_collective_current_rejected():
    with pytest.raises(ValueError, match="detuned"):
        lindblad.heat_currents(ModelParams(10.0, 9.0, 1.0, 1.0, 1.0), projector(EG))


def test_stability_guard():
    with pytest.raises(lindblad.StabilityError):
        lindblad.integrate(ModelParams(gamma1=10.0), projector(EG), 0.01, 1.0)


def test_grid_must_be_commensurate():
    with pytest.raises(ValueError, match="multiple"):
        lindblad.integrate(ModelParams(gamma1=1.0), projector(EG), 0.01, 1.0, sample_dt=0.025)


def test_non_hermitian_initial_state_rejected():
    bad = projector(EG) + 0.1j * np.triu(np.ones((4, 4)), 1)
    with pytest.raises(ValueError, match="Hermitian"):
        lindblad.integrate(ModelParams(gamma1=1.0), bad, 0.01, 1.0)


def test_custom_observables_and_states():
    ts = lindblad.integrate(
        ModelParams(gamma1=1.0), projector(EG), 0.01, 0.1, {"id": IDENTITY}, keep_states=True
    )
    assert ts.states.shape == (11, 4, 4)
    np.testing.assert_allclose(ts["id"], 1.0, atol=1e-14)


def test_unknown_observable():
    with pytest.raises(KeyError):
        lindblad.integrate(ModelParams(gamma1=1.0), projector(EG), 0.01, 0.1, ("entropy",))


def test_steady_state_nonconvergence():
    with pytest.raises(lindblad.NonConvergenceError):
        lindblad.steady_state(ModelParams(gamma1=1.0, nth1=0.1), max_steps=10, check_every=5)
    with pytest.raises(ValueError):
        lindblad.steady_state(ModelParams())


def test_time_series_validation():
    with pytest.raises(ValueError):
        lindblad.TimeSeries(np.array([0.0, 0.0]), {})
    with pytest.raises(ValueError):
        lindblad.TimeSeries(np.array([0.0, 1.0]), {"x": np.zeros(3)})
