import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from robinstokes.mesh import build_channel_mesh
from robinstokes.parameters import (
    AdmissibleSet,
    RobinBasis,
    RobinCoefficient,
    default_basis,
    evaluate_q,
    linf_distance,
    project_onto_K,
    sample_K,
)

MESH = build_channel_mesh(2.0, 1.0, 4, 4, 2)


def _bases():
    return [
        default_basis(MESH, 1.0, 3),
        default_basis(MESH, 1.0, 5, space_nodes=1),
        default_basis(MESH, 2.0, 2, space_nodes=2),
    ]


def _random_points(basis, rng, n):
    ts = rng.uniform(0, basis.final_time, n)
    ys = rng.uniform(0, 1.0, n)
    return ts, ys


@pytest.mark.parametrize("basis", _bases())
def test_partition_of_unity(basis):
    rng = np.random.default_rng(0)
    ts, ys = _random_points(basis, rng, 1000)
    one = RobinCoefficient.constant(basis, 1.0)
    res = max(abs(evaluate_q(one, t, (2.0, y)) - 1.0) for t, y in zip(ts, ys))
    assert res <= 1e-12


@pytest.mark.parametrize("basis", _bases())
def test_constant_coefficient(basis):
    q = RobinCoefficient.constant(basis, 2.5)
    for t in (0.0, 0.3 * basis.final_time, basis.final_time):
        for y in (0.0, 0.2, 0.5, 0.9, 1.0):
            assert evaluate_q(q, t, (2.0, y)) == pytest.approx(2.5, abs=1e-13)


def test_linear_in_time_reproduced():
    basis = default_basis(MESH, 1.0, 4)
    a, b = 1.5, 0.75
    c = a + b * basis.time_knots[basis.functions[:, 0]]
    q = RobinCoefficient(basis, c)
    for t in np.linspace(0, 1, 17):
        for y in (0.1, 0.4, 0.75):
            assert evaluate_q(q, t, (2.0, y)) == pytest.approx(a + b * t, abs=1e-13)


def test_segment_jump():
    basis = default_basis(MESH, 1.0, 2, space_nodes=1)
    c = np.where(basis.functions[:, 1] == 0, 1.0, 3.0)
    q = RobinCoefficient(basis, c)
    lower = evaluate_q(q, 0.4, (2.0, 0.5), segment=1)
    upper = evaluate_q(q, 0.4, (2.0, 0.5), segment=2)
    assert lower - upper == pytest.approx(1.0 - 3.0)


def test_evaluate_outside_domain():
    q = RobinCoefficient.constant(default_basis(MESH, 1.0, 2), 1.0)
    with pytest.raises(ValueError):
        evaluate_q(q, 1.5, (2.0, 0.5))
    with pytest.raises(ValueError):
        evaluate_q(q, 0.5, (2.0, 1.5))


@settings(max_examples=40, deadline=None)
@given(
    st.integers(0, 2**32 - 1),
    st.floats(-3, 3, allow_nan=False),
    st.floats(-3, 3, allow_nan=False),
)
def test_evaluate_is_linear(seed, alpha, beta):
    basis = default_basis(MESH, 1.0, 3)
    rng = np.random.default_rng(seed)
    q1 = RobinCoefficient(basis, rng.normal(size=len(basis)))
    q2 = RobinCoefficient(basis, rng.normal(size=len(basis)))
    t, y = rng.uniform(0, 1), rng.uniform(0, 1)
    lhs = evaluate_q(alpha * q1 + beta * q2, t, (2.0, y))
    rhs = alpha * evaluate_q(q1, t, (2.0, y)) + beta * evaluate_q(q2, t, (2.0, y))
    assert lhs == pytest.approx(rhs, abs=1e-12)


def test_linf_distance_examples():
    basis = default_basis(MESH, 1.0, 3)
    q = RobinCoefficient(basis, np.linspace(1, 2, len(basis)))
    assert linf_distance(q, q) == 0.0
    shifted = q.with_coeffs(q.coeffs - 0.3)
    assert linf_distance(q, shifted) == pytest.approx(0.3)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_linf_distance_matches_dense_sampling(seed):
    basis = default_basis(MESH, 1.0, 3)
    rng = np.random.default_rng(seed)
    q1 = RobinCoefficient(basis, rng.uniform(0.5, 5, len(basis)))
    q2 = RobinCoefficient(basis, rng.uniform(0.5, 5, len(basis)))
    d = linf_distance(q1, q2)
    assert d == pytest.approx(np.max(np.abs(q1.coeffs - q2.coeffs)))
    assert linf_distance(q1, q2, dense=True, refine_factor=10) == pytest.approx(d, rel=1e-12)


def test_projection():
    K = AdmissibleSet(0.5, 5.0)
    basis = default_basis(MESH, 1.0, 2)
    inside = RobinCoefficient(basis, np.linspace(1, 4, len(basis)))
    assert np.array_equal(project_onto_K(inside, K).coeffs, inside.coeffs)
    low = RobinCoefficient.constant(basis, K.lower - 1)
    high = RobinCoefficient.constant(basis, K.upper + 5)
    assert np.all(project_onto_K(low, K).coeffs == K.lower)
    assert np.all(project_onto_K(high, K).coeffs == K.upper)


def test_admissible_set_requires_positive_lower_bound():
    with pytest.raises(ValueError, match="positive"):
        AdmissibleSet(0.0, 1.0)
    with pytest.raises(ValueError):
        AdmissibleSet(2.0, 1.0)


def test_sample_K_determinism_and_bounds():
    K = AdmissibleSet(0.5, 5.0)
    basis = default_basis(MESH, 1.0, 3)
    a = sample_K(K, basis, 50, seed=7)
    b = sample_K(K, basis, 50, seed=7)
    assert all(np.array_equal(x.coeffs, y.coeffs) for x, y in zip(a, b))
    assert all(K.contains(q) for q in a)
    rng = np.random.default_rng(3)
    for q in a[:10]:
        ts, ys = _random_points(basis, rng, 50)
        assert min(evaluate_q(q, t, (2.0, y)) for t, y in zip(ts, ys)) >= K.lower - 1e-12


def test_sample_K_mean():
    K = AdmissibleSet(0.5, 5.0)
    basis = default_basis(MESH, 1.0, 2, space_nodes=1)
    n = 10_000
    X = np.array([q.coeffs for q in sample_K(K, basis, n, seed=11)])
    sigma = (K.upper - K.lower) / np.sqrt(12) / np.sqrt(n)
    assert np.all(np.abs(X.mean(axis=0) - K.midpoint) <= 3 * sigma)


def test_coefficient_json_roundtrip():
    basis = default_basis(MESH, 1.0, 3)
    q = RobinCoefficient(basis, np.arange(1.0, len(basis) + 1))
    r = RobinCoefficient.from_json(q.to_json())
    assert r.basis == basis
    assert np.array_equal(r.coeffs, q.coeffs)


def test_coeffs_are_read_only():
    q = RobinCoefficient.constant(default_basis(MESH, 1.0, 2), 1.0)
    with pytest.raises(ValueError):
        q.coeffs[0] = 3.0


def test_basis_validation():
    with pytest.raises(ValueError):
        RobinBasis([0.0], [[0.0, 1.0]])
    with pytest.raises(ValueError):
        RobinBasis([0.0, 1.0], [[1.0, 0.0]])
    with pytest.raises(ValueError):
        default_basis(MESH, 1.0, 2, space_nodes=0)
