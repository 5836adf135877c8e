"""Acceptance criteria on the default desk-scale configuration.

Each test checks one criterion at its stated tolerance and records a
one-line verdict; the lines are printed in the pytest terminal summary
(see ``conftest.py``) and when this file is run as a script.
"""
import json
import time

import numpy as np
import pytest

from robinstokes import cli
from robinstokes.config import parse_config_text, serialize_config
from robinstokes.forward import ForwardModel, verify_energy_estimate
from robinstokes.inversion import gauss_newton_solve, synthetic_trace
from robinstokes.manufactured import convergence_table, temporal_table
from robinstokes.mesh import refine
from robinstokes.parameters import AdmissibleSet, sample_K
from robinstokes.sensitivity import DEFAULT_SCALES, assemble_jacobian, dT_continuity_test, taylor_remainder_test
from robinstokes.stability import estimate_constant, identifiability_scan

RESULTS = {}
K = AdmissibleSet(0.5, 5.0)


def record(key, ok, detail):
    line = f"criterion {key}: {'PASS' if ok else 'FAIL'} | {detail}"
    RESULTS[key] = line
    print(line)
    return ok


@pytest.fixture(scope="module")
def cfg():
    return parse_config_text("[geometry]\n[time]\n")


@pytest.fixture(scope="module")
def model(cfg):
    return cfg.build_model()


def test_criterion_1_convergence(cfg):
    start = time.perf_counter()
    cv = cfg.convergence
    base = cfg.convergence_mesh()
    space = convergence_table(base, cfg.time.T, cv.n_t0, 3, cfg.manufactured(), cv.coeffs, window=(0.25, 0.75))
    fine = base
    for _ in range(cv.temporal_refinements):
        fine = refine(fine)
    temporal = temporal_table(fine, cfg.time.T, cv.temporal_steps, cfg.manufactured(temporal=True), cv.coeffs, window=(0.25, 0.75))
    elapsed = time.perf_counter() - start
    s_rates, t_rates = space["rates"]["l2h1"], temporal["rates"]["l2h1"]
    ok = min(s_rates) >= 1.8 and all(0.8 <= r <= 1.2 for r in t_rates) and elapsed < 180
    assert record(
        "1 (manufactured convergence)",
        ok,
        f"spatial L2(H1) rates {np.round(s_rates, 3).tolist()} (need >= 1.8), "
        f"temporal rates {np.round(t_rates, 3).tolist()} (need [0.8, 1.2]), {elapsed:.1f} s",
    )


def test_criterion_2_energy_estimate(model):
    start = time.perf_counter()
    rep = verify_energy_estimate(model, sample_K(K, model.basis, 20, seed=0))
    elapsed = time.perf_counter() - start
    ok = bool(np.all(np.isfinite(rep["ratios"]))) and rep["spread"] <= 3.0 and elapsed < 120
    assert record("2 (energy estimate)", ok, f"max/min ratio {rep['spread']:.4f} over 20 samples (need <= 3), {elapsed:.1f} s")


def test_criterion_3_taylor(model):
    start = time.perf_counter()
    rng = np.random.default_rng(0)
    slopes, firsts = [], []
    for _ in range(3):
        q = rng.uniform(K.lower, K.upper, model.n_params)
        h = rng.uniform(-1, 1, model.n_params)
        res = taylor_remainder_test(model, q, h, DEFAULT_SCALES)
        slopes.append(res["slope"])
        firsts.append(res["first_order_slope"])
    elapsed = time.perf_counter() - start
    ok = all(1.8 <= s <= 2.2 for s in slopes) and all(0.9 <= s <= 1.1 for s in firsts) and elapsed < 180
    assert record(
        "3 (Frechet differentiability)",
        ok,
        f"remainder slopes {np.round(slopes, 4).tolist()}, first-order slopes {np.round(firsts, 4).tolist()}, {elapsed:.1f} s",
    )


def test_criterion_4_derivative_continuity(model):
    start = time.perf_counter()
    rng = np.random.default_rng(1)
    slopes, monotone = [], []
    for _ in range(3):
        q = rng.uniform(K.lower + 0.5, K.upper - 0.5, model.n_params)
        l = rng.uniform(-1, 1, model.n_params)
        res = dT_continuity_test(model, q, l, DEFAULT_SCALES)
        slopes.append(res["slope"])
        monotone.append(res["monotone"])
    elapsed = time.perf_counter() - start
    ok = all(0.8 <= s <= 1.2 for s in slopes) and elapsed < 180
    assert record("4 (dT continuity)", ok, f"slopes {np.round(slopes, 4).tolist()}, monotone {monotone}, {elapsed:.1f} s")


def test_criterion_5_derivative_injectivity(model):
    start = time.perf_counter()
    reps = [assemble_jacobian(model, q).report() for q in sample_K(K, model.basis, 5, seed=0)]
    degenerate = ForwardModel(model.mesh, model.grid, model.data, model.basis.duplicated(0), window=model.trace_op.interval, ops=model.ops)
    flagged = not assemble_jacobian(degenerate, np.full(degenerate.n_params, K.midpoint)).report()["injective"]
    elapsed = time.perf_counter() - start
    ok = all(r["min_eigenvalue"] > 0 and r["injective"] for r in reps) and flagged and elapsed < 120
    conds = [f"{r['condition_number']:.2e}" for r in reps]
    eigs = [f"{r['min_eigenvalue']:.2e}" for r in reps]
    assert record(
        "5 (derivative injectivity)",
        ok,
        f"min Gram eigenvalues {eigs}, condition numbers {conds}, "
        f"degenerate basis flagged singular: {flagged}, {elapsed:.1f} s",
    )


@pytest.fixture(scope="module")
def q_true(cfg, model):
    return cfg.resolve_coefficient(model.basis, "random", 0).coeffs


def _rel(a, b):
    return float(np.max(np.abs(a - b)) / np.max(np.abs(b)))


def test_criterion_6a_inverse_crime(model, q_true):
    start = time.perf_counter()
    res = gauss_newton_solve(model, synthetic_trace(model, q_true), K, np.full(model.n_params, K.midpoint), max_iter=25)
    err = _rel(res.q.coeffs, q_true)
    elapsed = time.perf_counter() - start
    ok = err <= 1e-3 and res.n_iter <= 25 and elapsed < 240
    assert record("6a (inversion, inverse crime)", ok, f"relative Linf error {err:.2e} after {res.n_iter} iterations (need <= 1e-3), {elapsed:.1f} s")


def test_criterion_6b_crime_free(model, q_true):
    start = time.perf_counter()
    measured = synthetic_trace(model, q_true, crime_free=True)
    model_error = (measured - model.trace(q_true)).norm() / measured.norm()
    res = gauss_newton_solve(model, measured, K, np.full(model.n_params, K.midpoint), max_iter=25)
    err = _rel(res.q.coeffs, q_true)
    elapsed = time.perf_counter() - start
    ok = err <= 1e-2 and elapsed < 240
    assert record(
        "6b (inversion, crime-free)",
        ok,
        f"relative Linf error {err:.2e} after {res.n_iter} iterations (need <= 1e-2); "
        f"relative trace gap between data and model discretisations {model_error:.2e}, {elapsed:.1f} s",
    )


def test_criterion_7_lipschitz_probe(model):
    start = time.perf_counter()
    n = 200
    rep = estimate_constant(model, K, 2 * n, seed=0)
    ratios = np.array(rep.ratios)
    finite = bool(np.all(np.isfinite(ratios[:n])) and np.all(ratios[:n] > 0))
    running = np.maximum.accumulate(ratios)
    hard = max(rep.hard_ratios.values())
    c_n, c_2n = max(running[n - 1], hard), max(running[2 * n - 1], hard)
    change = abs(c_2n - c_n) / c_n
    change_random = abs(running[2 * n - 1] - running[n - 1]) / running[n - 1]
    small_err = float(np.max(rep.prediction_errors()))
    scan = identifiability_scan(model, K, n, seed=1, C_emp=rep.C_emp, tolerance=0.05)
    elapsed = time.perf_counter() - start
    ok = finite and change <= 0.2 and small_err <= 0.05 and scan["holds"] and elapsed < 300
    assert record(
        "7 (Lipschitz probe)",
        ok,
        f"{n} ratios finite: {finite}; C_emp(200) {c_n:.4e}, C_emp(400) {c_2n:.4e}, change {change:.3f} (need <= 0.2; "
        f"random pairs alone: {change_random:.3f}); max small-pair prediction error {small_err:.2e} (need <= 0.05); "
        f"identifiability floor holds: {scan['holds']} (min trace distance {scan['min_trace_distance']:.3e}), {elapsed:.1f} s",
    )


def _run_suite(cfg_path, out):
    codes = {}
    for command in cli.SUBCOMMANDS:
        codes[command] = cli.main([command, "--config", str(cfg_path), "--out", str(out), "--threads", "1"])
    return codes


def test_criterion_8_determinism(tmp_path, cfg):
    start = time.perf_counter()
    path = tmp_path / "default.toml"
    path.write_text(serialize_config(cfg))
    codes_a = _run_suite(path, tmp_path / "a")
    codes_b = _run_suite(path, tmp_path / "b")
    files_a = sorted((tmp_path / "a").rglob("*.json"))
    same = bool(files_a)
    for fa in files_a:
        fb = tmp_path / "b" / fa.relative_to(tmp_path / "a")
        same &= fb.exists() and fa.read_bytes() == fb.read_bytes()
        json.loads(fa.read_text())
    elapsed = time.perf_counter() - start
    ok = same and set(codes_a.values()) == {0} and codes_a == codes_b
    assert record(
        "8 (determinism)",
        ok,
        f"{len(files_a)} JSON reports from two sequential runs of all subcommands bit-identical: {same}; exit codes {codes_a}, {elapsed:.1f} s",
    )


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-q"]))
