"""Empirical Lipschitz constant of the inverse map and its hypotheses.

All estimates are lower bounds: the constant is a maximum over finitely
many coefficient pairs on a fixed discretisation.
"""
from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .forward import ForwardModel, MeasurementTrace
from .parameters import AdmissibleSet, sample_K
from .sensitivity import (
    DEFAULT_SCALES,
    assemble_jacobian,
    dT_continuity_test,
    sensitivity_traces,
    taylor_remainder_test,
)

__all__ = [
    "StabilityReport",
    "lipschitz_ratio",
    "estimate_constant",
    "identifiability_scan",
    "identifiability_floor",
    "hypothesis_check",
]

log = logging.getLogger(__name__)


def _linf(d):
    # hat bases interpolate at their knots, so the sup norm is the coefficient max
    return float(np.max(np.abs(d)))


def lipschitz_ratio(model: ForwardModel, q1, q2) -> float:
    """``||q1 - q2||_inf / ||T(q1) - T(q2)||``.

    Returns ``inf`` (and logs) when distinct coefficients produce identical
    traces; that is a finding about identifiability, not a solver failure.
    """
    c1, c2 = model.coefficient(q1), model.coefficient(q2)
    dq = _linf(c1 - c2)
    if dq <= 1e-14:
        raise ValueError("ratio undefined for identical coefficients")
    dT = (model.trace(c1) - model.trace(c2)).norm()
    if dT == 0.0:
        log.warning("identifiability violation: distinct coefficients with identical traces")
        return float("inf")
    return dq / dT


@dataclass
class StabilityReport:
    n_pairs: int
    seed: int
    ratios: list
    kinds: list
    parameter_distances: list
    trace_distances: list
    predicted_ratios: list
    hard_ratios: dict
    C_emp: float
    C_emp_random: float
    growth: dict
    min_trace_distance: float
    singular_values: list
    data_bound: float
    note: str = "empirical lower bound on a fixed discretisation"

    def to_dict(self) -> dict:
        return asdict(self)

    def prediction_errors(self) -> np.ndarray:
        r = np.array([x for x, k in zip(self.ratios, self.kinds) if k == "small"])
        p = np.array([x for x, k in zip(self.predicted_ratios, self.kinds) if k == "small"])
        return np.abs(r - p) / p


def _draw_pairs(K: AdmissibleSet, M: int, n_pairs: int, seed: int, small_scale: float):
    """Alternating uniform and small-perturbation pairs, drawn up front."""
    rng = np.random.default_rng(seed)
    delta = small_scale * (K.upper - K.lower)
    pairs = []
    for i in range(n_pairs):
        if i % 2 == 0:
            c1 = rng.uniform(K.lower, K.upper, M)
            c2 = rng.uniform(K.lower, K.upper, M)
            pairs.append(("uniform", c1, c2))
        else:
            c1 = rng.uniform(K.lower + delta, K.upper - delta, M)
            d = rng.uniform(-1.0, 1.0, M)
            d /= np.max(np.abs(d))
            pairs.append(("small", c1, c1 + delta * d))
    return pairs


def _evaluate_pair(model, kind, c1, c2):
    fwd = model.solve(c1, keep_factors=(kind == "small"))
    T1 = model.trace_of(fwd.velocity)
    T2 = model.trace(c2)
    dq = _linf(c2 - c1)
    dT = (T2 - T1).norm()
    pred = float("nan")
    if kind == "small":
        lin = sensitivity_traces(model, fwd, c2 - c1)[:, :, 0]
        pred = dq / MeasurementTrace(lin, model.grid.weights, model.trace_op.gram).norm()
    ratio = dq / dT if dT > 0 else float("inf")
    return ratio, dq, dT, pred


def _hard_pairs(model: ForwardModel, K: AdmissibleSet, small_scale: float):
    """Single-direction pairs at the box midpoint, incl. the weakest singular direction."""
    M = model.n_params
    c = np.full(M, K.midpoint)
    fwd = model.solve(c)
    J = assemble_jacobian(model, None, fwd)
    _, s, Vt = np.linalg.svd(J.whitened(), full_matrices=False)
    v = Vt[-1] / np.max(np.abs(Vt[-1]))
    delta = small_scale * (K.upper - K.lower)
    T0 = model.trace_of(fwd.velocity)
    out = {}
    dirs = [("singular_vector", v)] + [(f"basis_{j}", np.eye(M)[j]) for j in range(M)]
    for name, d in dirs:
        dT = (model.trace(c + delta * d) - T0).norm()
        out[name] = delta * np.max(np.abs(d)) / dT if dT > 0 else float("inf")
    return out, s


def _pool_map(fn, items, threads):
    if threads <= 1:
        return [fn(*it) for it in items]
    with ThreadPoolExecutor(max_workers=threads) as ex:
        return list(ex.map(lambda it: fn(*it), items))


def estimate_constant(
    model: ForwardModel,
    K: AdmissibleSet,
    n_pairs: int,
    seed: int,
    small_scale: float = 1e-3,
    threads: int = 1,
    include_hard: bool = True,
) -> StabilityReport:
    """Sampled estimate of the Lipschitz constant over the admissible box.

    Even-indexed pairs are independent uniform draws, odd-indexed pairs are
    small perturbations whose ratios are compared with the linearised
    prediction. Deterministic single-direction pairs at the box midpoint
    (including the smallest singular direction of the Jacobian) are added
    to every prefix of the growth curve.
    """
    if n_pairs < 1:
        raise ValueError("n_pairs must be at least 1")
    pairs = _draw_pairs(K, model.n_params, n_pairs, seed, small_scale)
    results = _pool_map(lambda k, a, b: _evaluate_pair(model, k, a, b), pairs, threads)
    ratios = np.array([r[0] for r in results])
    if include_hard:
        hard, svals = _hard_pairs(model, K, small_scale)
    else:
        hard, svals = {}, np.array([])
    hard_max = max(hard.values()) if hard else 0.0
    running = np.maximum.accumulate(ratios)
    checkpoints = sorted({n for n in [2**k for k in range(32)] if n <= n_pairs} | {n_pairs})
    growth = {str(n): float(max(running[n - 1], hard_max)) for n in checkpoints}
    return StabilityReport(
        n_pairs=n_pairs,
        seed=seed,
        ratios=ratios.tolist(),
        kinds=[p[0] for p in pairs],
        parameter_distances=[r[1] for r in results],
        trace_distances=[r[2] for r in results],
        predicted_ratios=[r[3] for r in results],
        hard_ratios=hard,
        C_emp=float(max(running[-1], hard_max)),
        C_emp_random=float(running[-1]),
        growth=growth,
        min_trace_distance=float(min(r[2] for r in results)),
        singular_values=[float(x) for x in svals],
        data_bound=model.data_bound(),
    )


def identifiability_floor(parameter_distance, C_emp: float, tolerance: float = 0.05):
    """Smallest trace distance compatible with ``C_emp``, relaxed by ``tolerance``."""
    return np.asarray(parameter_distance) / C_emp * (1 - tolerance)


def identifiability_scan(
    model: ForwardModel,
    K: AdmissibleSet,
    n_pairs: int,
    seed: int,
    C_emp: float,
    tolerance: float = 0.05,
    threads: int = 1,
) -> dict:
    """Trace distances of distinct uniform pairs against the floor ``||dq|| / C_emp``.

    A pair whose trace distance falls below ``(1 - tolerance)`` times the
    floor is recorded as a violation (possible non-identifiability at the
    discrete level); the scan never raises for it.
    """
    samples = sample_K(K, model.basis, 2 * n_pairs, seed)
    pairs = [(samples[2 * i].coeffs, samples[2 * i + 1].coeffs) for i in range(n_pairs)]
    pairs = [(a, b) for a, b in pairs if _linf(a - b) > 1e-14]

    def one(a, b):
        return _linf(a - b), (model.trace(a) - model.trace(b)).norm()

    res = _pool_map(one, pairs, threads)
    dq = np.array([r[0] for r in res])
    dT = np.array([r[1] for r in res])
    floor = identifiability_floor(dq, C_emp, tolerance)
    bad = np.flatnonzero(dT < floor)
    return {
        "n_pairs": len(pairs),
        "seed": seed,
        "C_emp": C_emp,
        "tolerance": tolerance,
        "min_trace_distance": float(dT.min()),
        "parameter_distances": dq.tolist(),
        "trace_distances": dT.tolist(),
        "floors": floor.tolist(),
        "violations": bad.tolist(),
        "holds": bool(len(bad) == 0),
    }


def hypothesis_check(
    model: ForwardModel,
    samples,
    K: AdmissibleSet,
    seed: int = 0,
    scales=DEFAULT_SCALES,
    n_pairs: int = 20,
    taylor_range=(1.8, 2.2),
    first_order_range=(0.9, 1.1),
    continuity_range=(0.8, 1.2),
    injectivity_rtol: float = 1e-12,
    threads: int = 1,
) -> dict:
    """Discrete checks of injectivity, C1 regularity and derivative injectivity.

    Per sampled coefficient: Taylor-remainder and first-order slopes, the
    derivative-continuity slope and the Gram spectrum. Injectivity of the
    map itself is checked by an identifiability scan against a constant
    estimated on independent pairs.
    """
    samples = list(samples)
    if not samples:
        raise ValueError("need at least one sample")
    rng = np.random.default_rng(seed)
    per_q = []
    for q in samples:
        c = model.coefficient(q)
        h = rng.uniform(-1.0, 1.0, model.n_params)
        l = rng.uniform(-1.0, 1.0, model.n_params)
        tay = taylor_remainder_test(model, c, h, scales)
        cont = dT_continuity_test(model, c, l, scales)
        gram = assemble_jacobian(model, c).report(injectivity_rtol)
        per_q.append(
            {
                "coeffs": c.tolist(),
                "taylor_slope": tay["slope"],
                "first_order_slope": tay["first_order_slope"],
                "continuity_slope": cont["slope"],
                "gram": gram,
            }
        )
    est = estimate_constant(model, K, n_pairs, seed + 1, threads=threads)
    scan = identifiability_scan(model, K, n_pairs, seed + 2, est.C_emp, threads=threads)

    def within(x, lo_hi):
        return bool(lo_hi[0] <= x <= lo_hi[1])

    hyp2 = all(
        within(p["taylor_slope"], taylor_range)
        and within(p["first_order_slope"], first_order_range)
        and within(p["continuity_slope"], continuity_range)
        for p in per_q
    )
    hyp3 = all(p["gram"]["injective"] for p in per_q)
    return {
        "seed": seed,
        "per_sample": per_q,
        "C_emp": est.C_emp,
        "identifiability": {k: scan[k] for k in ("n_pairs", "min_trace_distance", "violations", "holds", "tolerance")},
        "data_bound_M1": model.data_bound(),
        "hypotheses": {
            "injective": scan["holds"],
            "C1": hyp2,
            "derivative_injective": hyp3,
        },
        "verdict": bool(scan["holds"] and hyp2 and hyp3),
    }
