import numpy as np
import pytest
import sympy as sym

from robinstokes.forward import (
    ForwardModel,
    MeasurementTrace,
    ProblemData,
    TimeGrid,
    default_data,
    extract_trace,
    verify_energy_estimate,
)
from robinstokes.manufactured import ManufacturedSolution, t_, x_, y_
from robinstokes.mesh import build_channel_mesh, refine
from robinstokes.parameters import AdmissibleSet, RobinCoefficient, default_basis, sample_K

MESH = build_channel_mesh(2.0, 1.0, 8, 4, 2)


def _model(data, n_t=8, mesh=MESH, method="lowrank", window=(0.25, 0.75), T=1.0):
    return ForwardModel(mesh, TimeGrid(T, n_t), data, default_basis(mesh, T, 3, space_nodes=1), window=window, method=method)


def _q(model, seed=0):
    return sample_K(AdmissibleSet(0.5, 5.0), model.basis, 1, seed)[0]


def test_zero_data_gives_zero_solution():
    model = _model(ProblemData())
    traj = model.solve(_q(model))
    assert not np.any(traj.velocity)
    assert not np.any(traj.pressure)
    tr = model.trace_of(traj.velocity)
    assert tr.norm() == 0.0


def test_energy_dissipation_without_forcing():
    data = default_data()
    model = _model(ProblemData(u0=data.u0), n_t=16)
    traj = model.solve(_q(model))
    M = model.ops.mass_free
    e = np.einsum("ni,ni->n", traj.velocity, (M @ traj.velocity.T).T)
    assert e[0] > 0
    assert np.all(np.diff(e) <= 1e-14 * e[0])


def test_lowrank_matches_direct():
    data = default_data()
    a = _model(data, method="lowrank")
    b = _model(data, method="direct")
    q = _q(a)
    ta, tb = a.solve(q), b.solve(q)
    scale = np.max(np.abs(tb.velocity))
    assert np.max(np.abs(ta.velocity - tb.velocity)) <= 1e-10 * scale
    assert np.max(np.abs(ta.pressure - tb.pressure)) <= 1e-9 * np.max(np.abs(tb.pressure))


def test_discrete_divergence_free():
    model = _model(default_data(), method="direct")
    traj = model.solve(_q(model))
    B, M = model.ops.divergence_free, model.ops.mass_free
    for u in traj.velocity[1:]:
        assert np.linalg.norm(B @ u) <= 1e-8 * np.sqrt(u @ (M @ u))


def test_superposition():
    full = default_data()
    kappa = lambda t, p: np.column_stack([0.3 * np.cos(3 * t) * p[:, 1], np.zeros(len(p))])
    f = lambda t, p: np.column_stack([np.sin(p[:, 0]) * t, p[:, 1] ** 2])
    d_all = ProblemData(full.u0, full.g, kappa, f)
    d1 = ProblemData(full.u0, full.g)
    d2 = ProblemData(None, None, kappa, f)
    m_all = _model(d_all)
    q = _q(m_all)
    u_all = m_all.solve(q).velocity
    u1 = ForwardModel(MESH, m_all.grid, d1, m_all.basis, window=(0.25, 0.75), ops=m_all.ops).solve(q).velocity
    u2 = ForwardModel(MESH, m_all.grid, d2, m_all.basis, window=(0.25, 0.75), ops=m_all.ops).solve(q).velocity
    assert np.max(np.abs(u_all - u1 - u2)) <= 1e-10 * np.max(np.abs(u_all))


def test_first_order_in_time():
    data = default_data()
    norms = []
    for n in (16, 32, 64):
        m = _model(data, n_t=n)
        norms.append(m.trace(np.full(m.n_params, 2.0)).norm())
    d1, d2 = abs(norms[0] - norms[1]), abs(norms[1] - norms[2])
    assert 1.5 <= d1 / d2 <= 2.5


def test_trace_norm_of_constant_in_time_values():
    model = _model(ProblemData())
    rng = np.random.default_rng(0)
    v = rng.normal(size=model.trace_op.size)
    tr = MeasurementTrace(np.tile(v, (model.grid.n_steps + 1, 1)), model.grid.weights, model.trace_op.gram)
    assert tr.norm() ** 2 == pytest.approx(model.grid.T * (v @ (model.trace_op.gram @ v)), rel=1e-13)


def test_trace_norm_matches_symbolic_integral():
    # exact trace norm of the manufactured velocity, then the discrete one under refinement
    exact = ManufacturedSolution(H=1.0, L=2.0)
    ux, uy = (c.subs(x_, 0) for c in exact.u_expr)
    ref = float(sym.integrate(sym.expand(ux**2 + uy**2), (y_, sym.Rational(1, 4), sym.Rational(3, 4)), (t_, 0, 1)))
    errs = []
    mesh = build_channel_mesh(2.0, 1.0, 8, 4, 2)
    for n_t in (64, 256):
        basis = default_basis(mesh, 1.0, 2)
        q = RobinCoefficient.constant(basis, 1.0)
        model = ForwardModel(mesh, TimeGrid(1.0, n_t), exact.data(q), basis, window=(0.25, 0.75))
        errs.append(abs(model.trace(q).norm() ** 2 - ref) / ref)
        mesh = refine(mesh)
    # dt ~ h^2 and first order in time: each level divides the error by about 4
    assert errs[0] / errs[1] >= 3.0, errs
    assert errs[1] < 5e-3


def test_extract_trace_default_window():
    model = _model(default_data())
    traj = model.solve(_q(model))
    a = extract_trace(traj)
    b = model.trace_of(traj.velocity)
    assert np.array_equal(a.values, b.values)


def test_trace_csv_roundtrip(tmp_path):
    model = _model(default_data())
    tr = model.trace(_q(model))
    path = tmp_path / "trace.csv"
    tr.to_csv(path, model.grid.times, model.trace_op.labels(model.spaces))
    times, vals = MeasurementTrace.read_csv(path)
    assert np.array_equal(times, model.grid.times)
    assert np.array_equal(vals, tr.values)


def test_energy_ratio_homogeneous_in_data():
    data = default_data()
    model = _model(data)
    samples = sample_K(AdmissibleSet(0.5, 5.0), model.basis, 3, 0)
    r1 = verify_energy_estimate(model, samples)["ratios"]
    r2 = verify_energy_estimate(model, samples, data.scaled(2.0))["ratios"]
    assert np.allclose(r1, r2, rtol=1e-10)


def test_energy_sweep_bounded():
    model = _model(default_data())
    rep = verify_energy_estimate(model, sample_K(AdmissibleSet(0.5, 5.0), model.basis, 20, 1))
    assert np.all(np.isfinite(rep["ratios"]))
    assert max(rep["ratios"]) <= rep["max_ratio"]
    assert rep["spread"] <= 3.0


def test_energy_ratio_non_increasing_in_lower_bound():
    model = _model(default_data())
    U = np.random.default_rng(5).uniform(size=(8, model.n_params))
    maxima = []
    for m in (0.5, 1.0, 2.0, 4.0):
        samples = [RobinCoefficient(model.basis, m + (5.0 - m) * u) for u in U]
        maxima.append(verify_energy_estimate(model, samples)["max_ratio"])
    assert np.all(np.diff(maxima) <= 1e-12 * maxima[0]), maxima


def test_nonpositive_coefficient_warns():
    model = _model(default_data())
    with pytest.warns(RuntimeWarning, match="not positive"):
        model.solve(np.zeros(model.n_params), keep_factors=False)


def test_basis_must_span_time_grid():
    with pytest.raises(ValueError, match="time grid"):
        ForwardModel(MESH, TimeGrid(2.0, 8), default_data(), default_basis(MESH, 1.0, 3))


def test_data_bound_bookkeeping():
    data = default_data()
    model = _model(data)
    assert model.data_bound() == pytest.approx(model.l2_norm_u0() + model.boundary_data_norm(data.g, "inlet"))
    # ||u0||^2 for 0.5 * 4y(1-y) over [0,2]x[0,1]: 2 * 0.25 * 16/30
    assert model.l2_norm_u0() == pytest.approx(np.sqrt(2 * 0.25 * 16 / 30), rel=1e-12)
