import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.integrate import quad

from ouscore import (
    ContractViolation,
    DivergenceError,
    GaussianMixture,
    NoiseSchedule,
    OracleScoreDrift,
    ReferenceDrift,
    Trajectory,
    VectorFieldDrift,
    forward_sample,
    lambda_at,
    reverse_drift,
    simulate_reverse,
)

from conftest import mixture_2d, unit_schedule
from em_moments import em_moments


def test_lambda_at_zero():
    assert lambda_at(unit_schedule(), 0.0) == 0.0


def test_lambda_at_ln2():
    assert lambda_at(unit_schedule(), math.log(2)) == pytest.approx(0.75, abs=1e-15)


def test_lambda_linear_against_quadrature():
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        s = NoiseSchedule.linear(0.1, 1.0, 1.0)
    integral, _ = quad(lambda u: 0.1 + 0.9 * u, 0.0, 1.0, epsabs=1e-14)
    assert integral == pytest.approx(0.55, abs=1e-10)
    assert s.integral(1.0) == pytest.approx(integral, abs=1e-10)
    assert lambda_at(s, 1.0) == pytest.approx(1 - math.exp(-1.1), abs=1e-10)


@settings(max_examples=50, deadline=None)
@given(st.floats(0.05, 3.0), st.floats(0.0, 5.0), st.floats(0.0, 1.0))
def test_lambda_in_unit_interval_and_monotone(b0, extra, frac):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        s = NoiseSchedule.linear(b0, b0 + extra, 2.0)
    t = 2.0 * frac
    lam = lambda_at(s, t)
    assert 0.0 <= lam < 1.0
    assert lambda_at(s, min(2.0, t + 0.1)) >= lam


@pytest.mark.parametrize("t", [-0.1, 1.5, float("nan")])
def test_lambda_outside_horizon(t):
    with pytest.raises(ContractViolation):
        lambda_at(unit_schedule(), t)


def test_schedule_contracts():
    with pytest.raises(ContractViolation):
        NoiseSchedule.linear(2.0, 1.0, 4.0)
    with pytest.raises(ContractViolation):
        NoiseSchedule.constant(0.0, 4.0)
    with pytest.raises(ContractViolation):
        NoiseSchedule.constant(1.0, -1.0)
    with pytest.warns(UserWarning, match="integrated noise"):
        NoiseSchedule.constant(1.0, 1.0)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        NoiseSchedule.constant(1.0, 2.0)


def test_trajectory_contract():
    with pytest.raises(ContractViolation):
        Trajectory(np.array([0.0, 1.0]), np.zeros((3, 1, 1)), 0)
    with pytest.raises(ContractViolation):
        Trajectory(np.array([0.5, 1.0]), np.zeros((2, 1, 1)), 0)


def test_forward_sample_at_zero():
    x0 = np.array([[1.0, -2.0], [0.5, 3.0]])
    np.testing.assert_array_equal(forward_sample(unit_schedule(), 1.0, x0, 0.0, seed=1), x0)


def test_forward_sample_moments():
    s = NoiseSchedule.constant(1.0, 2.0)
    x = forward_sample(s, 1.0, np.full((100_000, 1), 2.0), 1.0, seed=0)[:, 0]
    n = x.size
    assert abs(x.mean() - 2 * math.exp(-1)) < 4 * x.std() / math.sqrt(n)
    var_se = np.std((x - x.mean()) ** 2) / math.sqrt(n)
    assert abs(x.var() - (1 - math.exp(-2))) < 4 * var_se


def test_forward_sample_determinism():
    s = unit_schedule()
    x0 = np.zeros((50, 2))
    a = forward_sample(s, 1.0, x0, 0.5, seed=3)
    np.testing.assert_array_equal(a, forward_sample(s, 1.0, x0, 0.5, seed=3))
    assert not np.array_equal(a, forward_sample(s, 1.0, x0, 0.5, seed=4))


def test_reference_drift():
    s = NoiseSchedule.linear(0.5, 2.0, 3.0)
    y = np.array([[1.0, -2.0]])
    np.testing.assert_array_equal(reverse_drift(ReferenceDrift(s, 1.0), y, 1.0), -s.beta_at(2.0) * y)


def test_oracle_drift_reference_target_is_reference():
    s = NoiseSchedule.constant(1.0, 4.0)
    d = OracleScoreDrift(GaussianMixture.gaussian([0.0, 0.0], 1.0), s, 1.0)
    y = np.random.default_rng(0).normal(size=(30, 2))
    for t in (0.0, 1.3, 4.0):
        np.testing.assert_allclose(reverse_drift(d, y, t), -y, atol=1e-13)


def test_oracle_drift_shifted_gaussian():
    s = NoiseSchedule.constant(1.0, 4.0)
    m = np.array([1.0, -0.5])
    d = OracleScoreDrift(GaussianMixture.gaussian(m, 1.0), s, 1.0)
    y = np.random.default_rng(1).normal(size=(30, 2))
    for t in (0.0, 2.2, 4.0):
        np.testing.assert_allclose(reverse_drift(d, y, t), -y + 2 * math.exp(-(4 - t)) * m, atol=1e-13)


def test_reverse_drift_time_range():
    d = ReferenceDrift(NoiseSchedule.constant(1.0, 4.0), 1.0)
    with pytest.raises(ContractViolation):
        reverse_drift(d, np.zeros((1, 1)), 4.5)


def test_two_form_drift_equality():
    s = NoiseSchedule.linear(0.3, 2.0, 3.0)
    d = OracleScoreDrift(mixture_2d(), s, 1.3)
    rng = np.random.default_rng(2)
    worst = 0.0
    for _ in range(50):
        t = float(rng.uniform(0, 3))
        y = rng.normal(size=(4, 2)) * 2
        worst = max(worst, np.abs(d.reverse_drift(y, t) - d.value_function_drift(y, t)).max())
    assert worst < 1e-10


def test_vector_field_forms_agree():
    s = NoiseSchedule.constant(1.0, 4.0)
    oracle = OracleScoreDrift(mixture_2d(), s, 1.0)
    y = np.random.default_rng(3).normal(size=(10, 2))
    by_score = VectorFieldDrift(oracle.score, s, 1.0, form="score")
    by_phi = VectorFieldDrift(oracle.log_phi_grad, s, 1.0, form="log_phi")
    by_drift = VectorFieldDrift(lambda u, tf: oracle.reverse_drift(u, 4.0 - tf), s, 1.0, form="drift")
    for t in (0.0, 1.0, 3.5):
        ref = oracle.reverse_drift(y, t)
        for d in (by_score, by_phi, by_drift):
            np.testing.assert_allclose(d.reverse_drift(y, t), ref, atol=1e-12)
    with pytest.raises(ContractViolation):
        VectorFieldDrift(oracle.score, s, 1.0, form="velocity")


def test_stationarity_reference_target():
    s = NoiseSchedule.constant(1.0, 2.0)
    sigma = 1.5
    d = OracleScoreDrift(GaussianMixture.gaussian([0.0, 0.0], sigma**2), s, sigma)
    y = simulate_reverse(s, sigma, d, n_steps=50, n_particles=20_000, seed=0).samples
    n = y.shape[0]
    assert np.all(np.abs(y.mean(axis=0)) < 4 * sigma / math.sqrt(n))
    cov = np.cov(y, rowvar=False)
    # var of a N(0, s2) sample variance is 2 s2^2 / n; off-diagonal s2^2 / n
    assert np.all(np.abs(np.diag(cov) - sigma**2) < 4 * sigma**2 * math.sqrt(2 / n))
    assert abs(cov[0, 1]) < 4 * sigma**2 / math.sqrt(n)


def test_reference_process_invariant_at_every_step():
    s = NoiseSchedule.constant(1.0, 2.0)
    res = simulate_reverse(s, 1.0, ReferenceDrift(s, 1.0), n_steps=20, n_particles=20_000, seed=1, dim=1,
                           record_paths=True)
    n = res.samples.shape[0]
    assert res.paths.times[-1] == 2.0
    assert res.paths.states.shape == (21, n, 1)
    # the Euler chain keeps N(0, v_k) with v_{k+1} = v_k (1 - dt)^2 + 2 dt, an O(dt) drift away from 1
    dt, v = 0.1, 1.0
    for state in res.paths.states:
        x = state[:, 0]
        assert abs(v - 1) <= dt
        assert abs(x.mean()) < 4 * math.sqrt(v / n)
        assert abs(x.var() - v) < 4 * v * math.sqrt(2 / n)
        v = v * (1 - dt) ** 2 + 2 * dt


def test_simulate_deterministic_and_particle_count_independent():
    s = NoiseSchedule.constant(1.0, 2.0)
    d = OracleScoreDrift(mixture_2d(), s, 1.0)
    a = simulate_reverse(s, 1.0, d, n_steps=20, n_particles=5000, seed=7).samples
    b = simulate_reverse(s, 1.0, d, n_steps=20, n_particles=5000, seed=7).samples
    assert a.tobytes() == b.tobytes()
    c = simulate_reverse(s, 1.0, d, n_steps=20, n_particles=9000, seed=7).samples
    np.testing.assert_array_equal(c[:5000], a)
    e = simulate_reverse(s, 1.0, d, n_steps=20, n_particles=5000, seed=8).samples
    assert not np.array_equal(a, e)


def test_simulate_contracts():
    s = NoiseSchedule.constant(1.0, 2.0)
    d = ReferenceDrift(s, 1.0)
    with pytest.raises(ContractViolation):
        simulate_reverse(s, 1.0, d, n_steps=5, n_particles=10, dim=1)
    with pytest.raises(ContractViolation):
        simulate_reverse(s, 1.0, d, n_steps=10, n_particles=0, dim=1)
    with pytest.raises(ContractViolation):
        simulate_reverse(s, 1.0, d, n_steps=10, n_particles=10)
    with pytest.raises(ContractViolation):
        simulate_reverse(s, 1.0, d, init="uniform", n_steps=10, n_particles=10, dim=1)


def test_divergence_reports_step():
    s = NoiseSchedule.constant(1.0, 2.0)
    blowup = VectorFieldDrift(lambda y, t: 1e300 * (1 + y * y), s, 1.0, form="drift")
    with pytest.raises(DivergenceError, match="step"):
        with np.errstate(over="ignore", invalid="ignore"):
            simulate_reverse(s, 1.0, blowup, n_steps=10, n_particles=4, dim=1)


def test_em_recursion_matches_hand_formula():
    # b = -y + 4 e^{-(T - t)} for N(2, 1): mean' = mean (1 - dt) + 4 e^{-(T-t)} dt, var' = var (1 - dt)^2 + 2 dt
    s = NoiseSchedule.constant(1.0, 4.0)
    d = OracleScoreDrift(GaussianMixture.gaussian([2.0], 1.0), s, 1.0)
    m, v = em_moments(d, s, 1.0, 40, 2 * math.exp(-4), 1.0)
    hm, hv = 2 * math.exp(-4), 1.0
    dt = 0.1
    for k in range(40):
        hm = hm * (1 - dt) + 4 * math.exp(-(4 - k * dt)) * dt
        hv = hv * (1 - dt) ** 2 + 2 * dt
    assert m == pytest.approx(hm, rel=1e-12)
    assert v == pytest.approx(hv, rel=1e-12)
