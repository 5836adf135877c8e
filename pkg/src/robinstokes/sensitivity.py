"""Linearised Stokes solves: directional derivatives of the forward map.

The derivative of the discrete trace in direction ``h`` solves the same
implicit Euler scheme with zero initial state, zero inlet traction and the
outlet source ``-h u``, where ``u`` is the forward velocity at the new time
level. This is exactly the derivative of the discrete scheme, so finite
differences of :meth:`ForwardModel.trace` converge to it.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .forward import ForwardModel, MeasurementTrace, SolverError, StateTrajectory
from .parameters import RobinCoefficient

__all__ = [
    "SensitivitySolution",
    "TraceJacobian",
    "solve_sensitivity",
    "sensitivity_traces",
    "assemble_jacobian",
    "taylor_remainder_test",
    "dT_continuity_test",
    "loglog_slope",
]


@dataclass
class SensitivitySolution:
    trajectory: StateTrajectory
    direction: np.ndarray


def _check_forward(model: ForwardModel, forward: StateTrajectory):
    if forward.model is not model or forward.grid != model.grid:
        raise ValueError("forward trajectory was computed on a different mesh or time grid")
    if len(forward.factors) != model.grid.n_steps:
        raise ValueError("forward trajectory was solved without keeping its factorizations")


def _directions(model, h):
    if isinstance(h, RobinCoefficient):
        return model.coefficient(h)[:, None]
    H = np.asarray(h, dtype=float)
    if H.ndim == 1:
        H = H[:, None]
    if H.shape[0] != model.n_params:
        raise ValueError(f"directions must have {model.n_params} rows")
    return H


def _march(model: ForwardModel, forward: StateTrajectory, H: np.ndarray):
    """Velocity of the linearised problem for every column of ``H``, (n+1, n_free, k)."""
    N = model.grid.n_steps
    nf = model.spaces.n_free
    k = H.shape[1]
    basis = model.basis
    V = np.zeros((N + 1, nf, k))
    rhs = np.zeros((nf + model.spaces.n_pressure, k))
    onehot = np.zeros((basis.n_space, len(basis)))
    onehot[basis.space_of, np.arange(len(basis))] = 1.0
    for n in range(N):
        t = model.grid.times[n + 1]
        u = forward.velocity[n + 1]
        Ru = np.column_stack([R @ u for R in model.robin_free])  # (nf, n_space)
        W = (onehot * basis.time_weights(t)[None, :]) @ H  # (n_space, k)
        rhs[:] = 0.0
        rhs[:nf] = model._mass_dt @ V[n] - Ru @ W
        x = forward.factors[n].solve(rhs)
        if not np.all(np.isfinite(x)):
            raise SolverError("non-finite sensitivity", n + 1)
        V[n + 1] = x[:nf]
    return V


def solve_sensitivity(model: ForwardModel, q, forward: StateTrajectory, h) -> SensitivitySolution:
    """Linearised solution in direction ``h`` (a coefficient of the model basis)."""
    _check_forward(model, forward)
    if q is not None and not np.array_equal(model.coefficient(q), forward.coeffs):
        raise ValueError("forward trajectory was computed for a different coefficient")
    H = _directions(model, h)
    V = _march(model, forward, H)[:, :, 0]
    traj = StateTrajectory(V, np.zeros((model.grid.n_steps, 0)), model.grid, None, [], model)
    return SensitivitySolution(traj, H[:, 0].copy())


def sensitivity_traces(model: ForwardModel, forward: StateTrajectory, H) -> np.ndarray:
    """Trace values of the derivative for every direction column, (n+1, n_trace, k)."""
    _check_forward(model, forward)
    V = _march(model, forward, _directions(model, H))
    return np.einsum("ij,njk->nik", model.restriction.toarray(), V)


@dataclass
class TraceJacobian:
    """Trace derivative with respect to every basis coefficient.

    ``columns[n, :, j]`` is the trace at time node ``n`` of the derivative
    in direction ``phi_j``.
    """

    columns: np.ndarray
    weights: np.ndarray
    gram_space: object

    @property
    def n_params(self) -> int:
        return self.columns.shape[2]

    def column(self, j) -> MeasurementTrace:
        return MeasurementTrace(self.columns[:, :, j], self.weights, self.gram_space)

    def apply(self, h) -> MeasurementTrace:
        return MeasurementTrace(self.columns @ np.asarray(h, dtype=float), self.weights, self.gram_space)

    def adjoint(self, trace: MeasurementTrace) -> np.ndarray:
        """``J^T W r`` for a trace residual ``r``."""
        Gr = (self.gram_space @ trace.values.T).T  # (n+1, n_tr)
        return np.einsum("n,ni,nij->j", self.weights, Gr, self.columns)

    @property
    def gram(self) -> np.ndarray:
        G = np.zeros((self.n_params, self.n_params))
        for w, Jn in zip(self.weights, self.columns):
            G += w * (Jn.T @ (self.gram_space @ Jn))
        return 0.5 * (G + G.T)

    def gram_eigenvalues(self) -> np.ndarray:
        return np.linalg.eigvalsh(self.gram)

    def whitened(self) -> np.ndarray:
        """Matrix ``W^{1/2} J`` whose singular values are those of the derivative."""
        G = self.gram_space.toarray()
        evals, evecs = np.linalg.eigh(0.5 * (G + G.T))
        half = (evecs * np.sqrt(np.clip(evals, 0, None))) @ evecs.T
        blocks = [np.sqrt(w) * (half @ Jn) for w, Jn in zip(self.weights, self.columns)]
        return np.vstack(blocks)

    def is_injective(self, rtol: float = 1e-12) -> bool:
        ev = self.gram_eigenvalues()
        return bool(ev[0] > rtol * ev[-1])

    def report(self, rtol: float = 1e-12) -> dict:
        ev = self.gram_eigenvalues()
        return {
            "min_eigenvalue": float(ev[0]),
            "max_eigenvalue": float(ev[-1]),
            "condition_number": float(ev[-1] / ev[0]) if ev[0] > 0 else float("inf"),
            "psd": bool(ev[0] >= -1e-12 * ev[-1]),
            "injective": bool(ev[0] > rtol * ev[-1]),
        }


def assemble_jacobian(model: ForwardModel, q, forward: StateTrajectory | None = None, threads: int = 1) -> TraceJacobian:
    """All ``M`` derivative columns from multi-right-hand-side marches.

    With ``threads > 1`` the columns are split into contiguous blocks marched
    concurrently; ``threads=1`` marches all columns at once.
    """
    if forward is None:
        forward = model.solve(q)
    elif q is not None and not np.array_equal(model.coefficient(q), forward.coeffs):
        raise ValueError("forward trajectory was computed for a different coefficient")
    eye = np.eye(model.n_params)
    if threads <= 1:
        cols = sensitivity_traces(model, forward, eye)
    else:
        from concurrent.futures import ThreadPoolExecutor

        blocks = np.array_split(np.arange(model.n_params), min(threads, model.n_params))
        with ThreadPoolExecutor(max_workers=threads) as ex:
            parts = list(ex.map(lambda b: sensitivity_traces(model, forward, eye[:, b]), blocks))
        cols = np.concatenate(parts, axis=2)
    return TraceJacobian(cols, model.grid.weights, model.trace_op.gram)


def loglog_slope(x, y) -> float:
    """Least-squares slope of ``log y`` against ``log x``."""
    lx, ly = np.log(np.asarray(x, dtype=float)), np.log(np.asarray(y, dtype=float))
    return float(np.polyfit(lx, ly, 1)[0])


DEFAULT_SCALES = (1e-1, 3e-2, 1e-2, 3e-3, 1e-3)


def taylor_remainder_test(model: ForwardModel, q, h, scales=DEFAULT_SCALES, noise_floor: float = 1e-13) -> dict:
    """Second-order decay of the linearisation remainder.

    Returns the remainders ``||T(q + eps h) - T(q) - eps dT_q h||`` and the
    first-order differences ``||T(q + eps h) - T(q)||`` with their log-log
    slopes. Remainders below ``noise_floor * ||T(q)||`` are flagged as
    saturated and excluded from the fit.
    """
    c = model.coefficient(q)
    H = _directions(model, h)[:, 0]
    if not np.any(H):
        raise ValueError("direction must be nonzero")
    if np.any(c - max(scales) * np.abs(H) <= 0):
        raise ValueError("q + eps h leaves the positive cone for the largest eps")
    fwd = model.solve(c)
    T0 = model.trace_of(fwd.velocity)
    dT = MeasurementTrace(sensitivity_traces(model, fwd, H)[:, :, 0], model.grid.weights, model.trace_op.gram)
    rem, first = [], []
    for eps in scales:
        Te = model.trace(c + eps * H)
        rem.append((Te - T0 - eps * dT).norm())
        first.append((Te - T0).norm())
    rem, first = np.array(rem), np.array(first)
    floor = noise_floor * T0.norm()
    ok = rem > floor
    return {
        "scales": list(map(float, scales)),
        "remainder": rem.tolist(),
        "first_order": first.tolist(),
        "saturated": (~ok).tolist(),
        "slope": loglog_slope(np.asarray(scales)[ok], rem[ok]) if ok.sum() >= 2 else float("nan"),
        "first_order_slope": loglog_slope(scales, first),
    }


def _basis_sup_norms(model):
    # tensor hats peak at 1 on their node
    return np.ones(model.n_params)


def dT_continuity_test(model: ForwardModel, q, l, scales=DEFAULT_SCALES, probe=None) -> dict:
    """Lipschitz dependence of the derivative on the coefficient.

    The operator norm of ``dT_{q + eps l} - dT_q`` is estimated from below by
    its largest action over the ``probe`` directions (basis functions by
    default), each normalised in the sup norm.
    """
    c = model.coefficient(q)
    L = _directions(model, l)[:, 0]
    probe = np.eye(model.n_params) if probe is None else np.asarray(probe, dtype=float)
    if probe.size == 0:
        raise ValueError("probe set is empty")
    if not np.any(L):
        # no perturbation, no change in the derivative
        return {"perturbation_sizes": [0.0] * len(scales), "estimates": [0.0] * len(scales), "slope": float("nan"), "monotone": True}
    sup = np.max(np.abs(probe), axis=0)
    J0 = sensitivity_traces(model, model.solve(c), probe)
    weights, gram = model.grid.weights, model.trace_op.gram
    sizes, est = [], []
    for eps in scales:
        Je = sensitivity_traces(model, model.solve(c + eps * L), probe)
        D = Je - J0
        norms = [MeasurementTrace(D[:, :, k], weights, gram).norm() / sup[k] for k in range(probe.shape[1])]
        sizes.append(eps * np.max(np.abs(L)))
        est.append(max(norms))
    est = np.array(est)
    return {
        "perturbation_sizes": list(map(float, sizes)),
        "estimates": est.tolist(),
        "slope": loglog_slope(sizes, est),
        "monotone": bool(np.all(np.diff(est) <= 0)),
    }
