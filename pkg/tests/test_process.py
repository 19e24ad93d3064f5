import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from icse import process as ps
from icse.process import (NOMINAL, U_SS, X_SS, ClassPrior, NoiseSpec, ProcessParams,
                          SimulationDivergence, continuous_dynamics, integrate_step)


def evaporator_rhs(x1, x2, u1, u2, p):
    # second, scalar transcription of the model written straight from the equations
    T2 = p.a * x2 + p.b * x1 + p.c
    T3 = p.d * x2 + p.e
    T100 = p.varphi * u1 + p.gamma
    Q100 = p.h * (p.F1 + p.F3) * (T100 - T2)
    F4 = (Q100 - p.F1 * p.Cp * (T2 - p.T1)) / p.lambda_
    Q200 = p.UA2 * (T3 - p.T200) / (1 + p.UA2 / (2 * p.Cp * u2))
    F5 = Q200 / p.lambda_
    F2 = p.F1 - F4
    return (p.F1 * p.X1 - F2 * x1) / p.M, (F4 - F5) / p.C


def test_nominal_values():
    assert ps.N_PARAMS == len(ps.PARAM_NAMES) == 19
    assert NOMINAL.varphi == 0.1538 and NOMINAL.UA2 == 6.84 and NOMINAL.lambda_s == 36.6
    np.testing.assert_array_equal(X_SS, [25.0, 49.743])
    np.testing.assert_array_equal(U_SS, [191.713, 215.888])


def test_params_array_roundtrip():
    arr = NOMINAL.as_array()
    assert ProcessParams.from_array(arr) == NOMINAL
    with pytest.raises(ValueError):
        ProcessParams(M=-1.0)


def test_steady_state_is_equilibrium():
    assert np.max(np.abs(continuous_dynamics(X_SS, U_SS, NOMINAL))) <= 1e-2


@given(st.floats(0, 60), st.floats(20, 80), st.floats(150, 250), st.floats(150, 280))
@settings(max_examples=200, deadline=None)
def test_matches_independent_transcription(x1, x2, u1, u2):
    got = continuous_dynamics([x1, x2], [u1, u2], NOMINAL)
    ref = evaporator_rhs(x1, x2, u1, u2, NOMINAL)
    np.testing.assert_allclose(got, ref, rtol=1e-12, atol=1e-12)


def test_vectorised_over_params():
    rng = np.random.default_rng(3)
    P = np.stack([ps.sample_instance(ClassPrior(), rng).as_array() for _ in range(5)])
    x = X_SS + rng.normal(size=(5, 2))
    got = continuous_dynamics(x, U_SS, P)
    for i in range(5):
        np.testing.assert_allclose(got[i], continuous_dynamics(x[i], U_SS, ProcessParams.from_array(P[i])),
                                   rtol=1e-14)


def test_divergence_names_quantity():
    with pytest.raises(SimulationDivergence) as exc:
        continuous_dynamics([np.nan, 49.743], U_SS, NOMINAL)
    assert exc.value.quantity == "T2"


def test_zero_dynamics_hook_leaves_state():
    x = np.array([3.0, -2.0])
    out = integrate_step(x, U_SS, NOMINAL, dynamics=lambda x, u, p, check=True: np.zeros_like(x))
    np.testing.assert_array_equal(out, x)


def test_linear_hook_matches_rk4_series():
    # RK4 on dx/dt = -x reproduces the 4th-order Taylor factor per substep
    x0 = np.array([1.0, 2.0])
    out = integrate_step(x0, U_SS, NOMINAL, Ts=1.0, n_sub=10,
                         dynamics=lambda x, u, p, check=True: -x)
    h = 0.1
    factor = (1 - h + h ** 2 / 2 - h ** 3 / 6 + h ** 4 / 24) ** 10
    np.testing.assert_allclose(out, x0 * factor, rtol=1e-14)


def test_step_doubling_converges():
    x0 = np.array([28.0, 52.0])
    u = np.array([200.0, 200.0])
    coarse = integrate_step(x0, u, NOMINAL, n_sub=10)
    fine = integrate_step(x0, u, NOMINAL, n_sub=20)
    assert np.max(np.abs(coarse - fine)) <= 1e-6


def test_nonpositive_sample_time_rejected():
    with pytest.raises(ValueError):
        integrate_step(X_SS, U_SS, NOMINAL, Ts=0.0)


def test_integrate_rows_matches_numpy():
    rng = np.random.default_rng(0)
    P = np.stack([ps.sample_instance(ClassPrior(), rng).as_array() for _ in range(8)])
    x = X_SS * (1 + 0.2 * rng.uniform(-1, 1, (8, 2)))
    u = U_SS + 20 * rng.choice([-1.0, 1.0], (8, 2))
    np.testing.assert_array_equal(ps.integrate_rows(x, u, P), integrate_step(x, u, P))


def test_compiled_simulation_matches_numpy_loop():
    tr = ps.simulate_trajectory(ClassPrior(), NoiseSpec(), 60, 11)
    x = tr.states[0].copy()
    xo = tr.clean_states[0].copy()
    for k in range(59):
        x = integrate_step(x, tr.inputs[k], tr.params) + tr.process_noise[k]
        xo = integrate_step(xo, tr.inputs[k], tr.params)
        np.testing.assert_allclose(tr.states[k + 1], x, rtol=1e-13)
        np.testing.assert_allclose(tr.clean_states[k + 1], xo, rtol=1e-13)
    np.testing.assert_allclose(tr.outputs, tr.states[:, 1] + tr.measurement_noise, rtol=1e-15)


def test_steady_state_trajectory_stays_put():
    tr = ps.steady_state_trajectory(500)
    assert len(tr) == 500
    assert np.max(np.abs(tr.clean_states - X_SS)) <= 0.1
    np.testing.assert_array_equal(tr.outputs, tr.clean_states[:, 1])


@given(st.integers(0, 2 ** 32))
@settings(max_examples=50, deadline=None)
def test_perturbation_envelope(seed):
    p = ps.sample_instance(ClassPrior(), seed).as_array()
    ratio = p / NOMINAL.as_array()
    assert np.all(ratio >= 0.8 - 1e-12) and np.all(ratio <= 1.2 + 1e-12)


def test_zero_perturbation_returns_nominal():
    assert ps.sample_instance(ClassPrior(perturb_frac=0.0), 5) == NOMINAL


def test_initial_state_and_input_envelope():
    trajs, ok = ps.simulate_batch(ClassPrior(), NoiseSpec(), 20, range(200))
    assert ok.all()
    x0 = np.stack([t.states[0] for t in trajs])
    assert np.all(np.abs(x0 / X_SS - 1) <= 0.2 + 1e-12)
    u = np.stack([t.inputs for t in trajs])
    np.testing.assert_allclose(np.abs(u - U_SS), 20.0, rtol=1e-12)


def test_prbs_properties():
    s = ps.generate_prbs(20000, 20.0, 0)
    assert set(np.unique(s)) == {-20.0, 20.0}
    assert abs(s.mean()) < 0.5
    # i.i.d. coin flips: lag-1 correlation near zero
    assert abs(np.corrcoef(s[:-1], s[1:])[0, 1]) < 0.03
    with pytest.raises(ValueError):
        ps.generate_prbs(0, 20.0, 0)


def test_input_channels_independent():
    tr = ps.simulate_trajectory(ClassPrior(), NoiseSpec(), 5000, 2)
    d = tr.inputs - U_SS
    assert abs(np.corrcoef(d[:, 0], d[:, 1])[0, 1]) < 0.05


def test_noise_statistics():
    trajs, _ = ps.simulate_batch(ClassPrior(), NoiseSpec(), 500, range(40))
    w = np.concatenate([t.process_noise for t in trajs])
    v = np.concatenate([t.measurement_noise for t in trajs])
    np.testing.assert_allclose(w.var(0), [0.5, 0.5], rtol=0.05)
    assert abs(v.var() - 2.0) / 2.0 < 0.05
    assert abs(w.mean()) < 0.03 and abs(v.mean()) < 0.05


def test_zero_noise_gives_clean_twin():
    tr = ps.simulate_trajectory(ClassPrior(), NoiseSpec.zero(), 100, 4)
    np.testing.assert_array_equal(tr.states, tr.clean_states)
    np.testing.assert_array_equal(tr.outputs, tr.clean_states[:, 1])


def test_determinism_and_seed_independence():
    a = ps.simulate_trajectory(ClassPrior(), NoiseSpec(), 50, 123)
    b = ps.simulate_trajectory(ClassPrior(), NoiseSpec(), 50, 123)
    c = ps.simulate_trajectory(ClassPrior(), NoiseSpec(), 50, 124)
    for f in ("inputs", "clean_states", "outputs", "states"):
        np.testing.assert_array_equal(getattr(a, f), getattr(b, f))
    assert a.params == b.params and a.params != c.params
    assert not np.array_equal(a.inputs, c.inputs)


def test_batch_equals_single():
    trajs, _ = ps.simulate_batch(ClassPrior(), NoiseSpec(), 30, [7, 8, 9])
    single = ps.simulate_trajectory(ClassPrior(), NoiseSpec(), 30, 8)
    np.testing.assert_array_equal(trajs[1].outputs, single.outputs)


def test_trajectory_seeds_distinct_across_streams():
    seeds = {ps.trajectory_seed(0, i, s) for i in range(100) for s in range(5)}
    assert len(seeds) == 500
    assert ps.trajectory_seed(0, 1, 0, 0) != ps.trajectory_seed(0, 1, 0, 1)


def test_divergent_instance_flagged():
    bad = ClassPrior(nominal=ProcessParams(M=1e-3), perturb_frac=0.0)
    trajs, ok = ps.simulate_batch(bad, NoiseSpec(), 20, [1])
    assert not ok[0] and trajs[0] is None
    with pytest.raises(SimulationDivergence):
        ps.simulate_trajectory(bad, NoiseSpec(), 20, 1)


def test_stack_batch_shapes():
    trajs, _ = ps.simulate_batch(ClassPrior(), NoiseSpec(), 12, [1, 2, 3])
    u, y, xo = ps.stack_batch(trajs)
    assert u.shape == (3, 12, 2) and y.shape == (3, 12) and xo.shape == (3, 12, 2)
    assert math.isfinite(float(y.sum()))
