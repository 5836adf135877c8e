import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from sklearn.base import clone
from sklearn.pipeline import Pipeline

from robinstokes.forward import ForwardModel
from robinstokes.inversion import (
    ForwardMap,
    RobinInverter,
    add_noise,
    gauss_newton_solve,
    misfit,
    synthetic_trace,
)
from robinstokes.parameters import AdmissibleSet
from robinstokes.sensitivity import assemble_jacobian
from robinstokes.stability import estimate_constant

K = AdmissibleSet(0.5, 5.0)


@pytest.fixture(scope="module")
def q_true(default_model):
    return np.random.default_rng(0).uniform(K.lower, K.upper, default_model.n_params)


@pytest.fixture(scope="module")
def measured(default_model, q_true):
    return default_model.trace(q_true)


def _rel(a, b):
    return np.max(np.abs(a - b)) / np.max(np.abs(b))


def test_misfit_zero_at_truth(small_model):
    q = np.full(small_model.n_params, 2.0)
    assert misfit(small_model, q, small_model.trace(q)) == 0.0


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_misfit_nonnegative(small_model, seed):
    rng = np.random.default_rng(seed)
    meas = small_model.trace(rng.uniform(0.5, 5, small_model.n_params))
    assert misfit(small_model, rng.uniform(0.5, 5, small_model.n_params), meas) >= 0.0


def test_misfit_with_injected_noise(small_model):
    q = np.full(small_model.n_params, 2.0)
    clean = small_model.trace(q)
    noisy = add_noise(clean, 0.03, seed=4)
    noise = noisy - clean
    assert misfit(small_model, q, noisy) == pytest.approx(0.5 * noise.norm() ** 2, rel=1e-10)


def test_add_noise_properties(small_model):
    tr = small_model.trace(np.full(small_model.n_params, 2.0))
    assert np.array_equal(add_noise(tr, 0.0, 1).values, tr.values)
    n1 = add_noise(tr, 0.01, 7)
    assert abs((n1 - tr).norm() / tr.norm() - 0.01) <= 1e-12
    assert np.array_equal(n1.values, add_noise(tr, 0.01, 7).values)
    assert not np.array_equal(n1.values, add_noise(tr, 0.01, 8).values)
    with pytest.raises(ValueError):
        add_noise(tr, -0.1, 0)


def test_start_at_truth(default_model, q_true, measured):
    res = gauss_newton_solve(default_model, measured, K, q_true)
    assert res.converged
    assert res.n_iter <= 1


def test_truth_is_stationary(default_model, q_true, measured):
    fwd = default_model.solve(q_true)
    J = assemble_jacobian(default_model, None, fwd)
    g = J.adjoint(measured - default_model.trace_of(fwd.velocity))
    assert np.linalg.norm(g) <= 1e-12 * np.linalg.norm(J.gram)


def test_noiseless_recovery_from_midpoint(default_model, q_true, measured):
    res = gauss_newton_solve(default_model, measured, K, np.full(default_model.n_params, K.midpoint), max_iter=25)
    assert _rel(res.q.coeffs, q_true) <= 1e-3
    misfits = [h["misfit"] for h in res.history]
    assert np.all(np.diff(misfits) < 0)
    for h in res.history:
        c = np.array(h["coeffs"])
        assert np.all(c >= K.lower) and np.all(c <= K.upper)


def test_noisy_recovery_within_stability_bound(default_model, q_true, measured):
    noisy = add_noise(measured, 0.01, seed=3)
    res = gauss_newton_solve(default_model, noisy, K, np.full(default_model.n_params, K.midpoint), max_iter=25)
    C = estimate_constant(default_model, K, 4, seed=0).C_emp
    err = np.max(np.abs(res.q.coeffs - q_true))
    assert err <= 3.0 * C * (noisy - measured).norm()


def test_scale_invariance(small_model):
    q_true = np.linspace(1.5, 3.5, small_model.n_params)
    alpha = 3.7
    scaled = ForwardModel(
        small_model.mesh, small_model.grid, small_model.data.scaled(alpha), small_model.basis, window=small_model.trace_op.interval, ops=small_model.ops
    )
    meas = small_model.trace(q_true)
    q0 = np.full(small_model.n_params, 2.5)
    a = gauss_newton_solve(small_model, meas, K, q0, max_iter=60)
    b = gauss_newton_solve(scaled, meas * alpha, K, q0, max_iter=60)
    assert np.max(np.abs(a.q.coeffs - b.q.coeffs)) <= 1e-8


def test_regularised_noisy_run_stays_feasible(small_model):
    q_true = np.linspace(1.5, 3.5, small_model.n_params)
    meas = add_noise(small_model.trace(q_true), 0.05, seed=1)
    res = gauss_newton_solve(small_model, meas, K, np.full(small_model.n_params, K.midpoint), reg=1e-3, max_iter=30)
    assert K.contains(res.q)
    assert res.history[-1]["misfit"] <= res.history[0]["misfit"]


def test_crime_free_trace_close_to_model_trace(small_model):
    q = np.full(small_model.n_params, 2.0)
    a = synthetic_trace(small_model, q)
    b = synthetic_trace(small_model, q, crime_free=True)
    assert a.values.shape == b.values.shape
    assert 0 < (a - b).norm() <= 0.1 * a.norm()


def test_estimators_follow_sklearn_conventions(small_model):
    inv = RobinInverter(small_model, lower=0.5, upper=5.0, max_iter=40)
    params = inv.get_params()
    assert params["upper"] == 5.0 and params["model"] is small_model
    twin = clone(inv)
    assert twin.get_params()["max_iter"] == 40
    inv.set_params(reg=0.0)

    q_true = np.linspace(1.5, 3.5, small_model.n_params)
    fmap = ForwardMap(small_model).fit(q_true[None, :])
    X = fmap.transform(q_true[None, :])
    assert X.shape == (1, (small_model.grid.n_steps + 1) * small_model.trace_op.size)
    inv.fit(X)
    assert inv.coef_.shape == (small_model.n_params,)
    assert _rel(inv.coef_, q_true) <= 1e-6
    assert inv.score(X) <= 0.0
    assert inv.predict().shape == (small_model.grid.n_steps + 1, small_model.trace_op.size)

    pipe = Pipeline([("forward", ForwardMap(small_model)), ("noise_free", "passthrough")])
    assert np.array_equal(pipe.fit_transform(q_true[None, :]), X)


def test_forward_map_rejects_wrong_width(small_model):
    fmap = ForwardMap(small_model).fit()
    with pytest.raises(ValueError):
        fmap.transform(np.ones((1, small_model.n_params + 1)))
