"""Recovery of the Robin coefficient from velocity traces.

Projected Levenberg-Marquardt on the half squared trace misfit, plus
scikit-learn style wrappers so the forward map and the inversion compose
with ``Pipeline``/``clone``/``get_params``.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .forward import ForwardModel, MeasurementTrace
from .mesh import refine
from .parameters import AdmissibleSet, RobinCoefficient, project_onto_K
from .sensitivity import assemble_jacobian

__all__ = [
    "InversionResult",
    "misfit",
    "add_noise",
    "synthetic_trace",
    "gauss_newton_solve",
    "ForwardMap",
    "RobinInverter",
]

log = logging.getLogger(__name__)


def misfit(model: ForwardModel, q, measured: MeasurementTrace) -> float:
    """Half the squared space-time distance between predicted and measured traces."""
    return 0.5 * (model.trace(q) - measured).norm() ** 2


def add_noise(trace: MeasurementTrace, level: float, seed: int) -> MeasurementTrace:
    """Gaussian perturbation rescaled to ``level * ||trace||`` exactly."""
    if level < 0:
        raise ValueError("noise level must be nonnegative")
    if level == 0:
        return trace.copy()
    rng = np.random.default_rng(seed)
    e = MeasurementTrace(rng.standard_normal(trace.values.shape), trace.weights, trace.gram)
    return trace + e * (level * trace.norm() / e.norm())


def synthetic_trace(model: ForwardModel, q, crime_free: bool = False) -> MeasurementTrace:
    """Measurement generated by ``model`` itself or by a finer discretisation.

    The crime-free variant solves on the once-refined mesh with half the time
    step and samples the result at the coarse window nodes and time nodes;
    coarse P2 nodes are vertices of the refined mesh, so no interpolation is
    involved.
    """
    if not crime_free:
        return model.trace(q)
    from .forward import TimeGrid

    fine = ForwardModel(
        refine(model.mesh),
        TimeGrid(model.grid.T, 2 * model.grid.n_steps),
        model.data,
        model.basis,
        window=model.trace_op.interval,
    )
    Tf = fine.trace(model.coefficient(q))
    yc = model.spaces.nodes[model.trace_op.nodes, 1]
    yf = fine.spaces.nodes[fine.trace_op.nodes, 1]
    idx = np.searchsorted(yf, yc)
    if not np.allclose(yf[np.minimum(idx, len(yf) - 1)], yc):
        raise RuntimeError("coarse window nodes are not nodes of the refined mesh")
    cols = np.concatenate([idx, len(yf) + idx])
    return MeasurementTrace(Tf.values[::2][:, cols], model.grid.weights, model.trace_op.gram)


@dataclass
class InversionResult:
    q: RobinCoefficient
    history: list = field(default_factory=list)
    converged: bool = False
    reason: str = ""
    n_iter: int = 0

    def to_dict(self) -> dict:
        return {
            "coeffs": self.q.coeffs.tolist(),
            "converged": self.converged,
            "reason": self.reason,
            "n_iter": self.n_iter,
            "history": self.history,
        }


def _active(g, c, K):
    # g is the descent direction J^T W r; bounds it pushes through are active
    return ((c <= K.lower) & (g < 0)) | ((c >= K.upper) & (g > 0))


def _projected(g, c, K):
    pg = g.copy()
    pg[_active(g, c, K)] = 0.0
    return pg


def gauss_newton_solve(
    model: ForwardModel,
    measured: MeasurementTrace,
    K: AdmissibleSet,
    q_init,
    reg: float = 0.0,
    max_iter: int = 50,
    step_tol: float = 1e-8,
    grad_rtol: float = 1e-10,
    max_escalations: int = 10,
    damping0: float = 1e-8,
) -> InversionResult:
    """Projected Levenberg-Marquardt iteration.

    Each step solves ``(J^T W J + (lam + reg_abs) I) d = J^T W r`` on the
    coordinates not held at an active bound and clamps ``q + d`` to the box. ``reg`` is relative: the absolute
    regularisation is ``reg * trace(J^T W J) / M``, so rescaling the data
    leaves the iterates unchanged. The damping ``lam`` follows the gain
    ratio (Nielsen's rule).
    """
    c = np.clip(model.coefficient(q_init).astype(float), K.lower, K.upper)
    M = len(c)
    fwd = model.solve(c)
    r = measured - model.trace_of(fwd.velocity)
    f = 0.5 * r.norm() ** 2
    J = assemble_jacobian(model, None, fwd)
    G, g = J.gram, J.adjoint(r)
    g0 = np.linalg.norm(_projected(g, c, K))
    lam = damping0 * max(np.max(np.diag(G)), np.finfo(float).tiny)
    nu = 2.0
    history = [{"iter": 0, "misfit": f, "step_norm": 0.0, "damping": float(lam), "grad_norm": float(g0), "coeffs": c.tolist()}]
    k, escalations = 0, 0
    converged, reason = False, "max_iter"
    while True:
        pg = np.linalg.norm(_projected(g, c, K))
        if pg <= grad_rtol * g0:
            converged, reason = True, "gradient"
            break
        if k >= max_iter:
            break
        reg_abs = reg * np.trace(G) / M
        free = ~_active(g, c, K)
        d = np.zeros(M)
        try:
            Gf = G[np.ix_(free, free)]
            d[free] = np.linalg.solve(Gf + (lam + reg_abs) * np.eye(len(Gf)), g[free])
        except np.linalg.LinAlgError:
            lam *= 10.0
            escalations += 1
            if escalations > max_escalations:
                reason = "singular normal equations"
                break
            continue
        c_new = np.clip(c + d, K.lower, K.upper)
        s = c_new - c
        step = float(np.max(np.abs(s)))
        if step <= step_tol:
            converged, reason = True, "step"
            break
        fwd_new = model.solve(c_new)
        r_new = measured - model.trace_of(fwd_new.velocity)
        f_new = 0.5 * r_new.norm() ** 2
        pred = float(g @ s - 0.5 * s @ G @ s)
        rho = (f - f_new) / pred if pred > 0 else -1.0
        if f_new < f and rho > 0:
            c, fwd, r, f = c_new, fwd_new, r_new, f_new
            J = assemble_jacobian(model, None, fwd)
            G, g = J.gram, J.adjoint(r)
            lam *= max(1.0 / 3.0, 1.0 - (2.0 * rho - 1.0) ** 3)
            nu = 2.0
            k += 1
            escalations = 0
            history.append(
                {
                    "iter": k,
                    "misfit": f,
                    "step_norm": step,
                    "damping": float(lam),
                    "grad_norm": float(np.linalg.norm(_projected(g, c, K))),
                    "coeffs": c.tolist(),
                }
            )
            log.debug("iter %d misfit %.3e step %.3e", k, f, step)
        else:
            lam *= nu
            nu *= 2.0
            escalations += 1
            if escalations > max_escalations:
                # no decrease possible at this damping range: misfit is at its floor
                reason = "stalled"
                break
    return InversionResult(RobinCoefficient(model.basis, c), history, converged, reason, k)


def _as_trace(model, X) -> MeasurementTrace:
    if isinstance(X, MeasurementTrace):
        return X
    X = check_array(X, ensure_2d=True)
    shape = (model.grid.n_steps + 1, model.trace_op.size)
    if X.shape != shape:
        X = X.reshape(shape)
    return MeasurementTrace(X, model.grid.weights, model.trace_op.gram)


class ForwardMap(BaseEstimator, TransformerMixin):
    """Coefficient rows to flattened traces.

    Parameters
    ----------
    model : ForwardModel
    """

    def __init__(self, model=None):
        self.model = model

    def fit(self, X=None, y=None):
        if self.model is None:
            raise ValueError("ForwardMap needs a ForwardModel")
        if X is not None:
            X = check_array(X)
            if X.shape[1] != self.model.n_params:
                raise ValueError(f"expected {self.model.n_params} coefficients per row")
        self.n_features_in_ = self.model.n_params
        return self

    def transform(self, X):
        check_is_fitted(self, "n_features_in_")
        X = check_array(X)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"expected {self.n_features_in_} coefficients per row")
        return np.vstack([self.model.trace(row).values.ravel() for row in X])


class RobinInverter(BaseEstimator):
    """Fit a Robin coefficient to one measured trace.

    Parameters
    ----------
    model : ForwardModel
    lower, upper : float
        Admissible box bounds.
    reg : float
        Relative Tikhonov weight (see :func:`gauss_newton_solve`).
    q_init : array_like or None
        Starting coefficients; the box midpoint when ``None``.
    max_iter, step_tol, grad_rtol : stopping rule.

    Attributes
    ----------
    coef_ : ndarray
    q_ : RobinCoefficient
    result_ : InversionResult
    n_iter_ : int
    converged_ : bool
    """

    def __init__(self, model=None, lower=0.5, upper=5.0, reg=0.0, q_init=None, max_iter=50, step_tol=1e-8, grad_rtol=1e-10):
        self.model = model
        self.lower = lower
        self.upper = upper
        self.reg = reg
        self.q_init = q_init
        self.max_iter = max_iter
        self.step_tol = step_tol
        self.grad_rtol = grad_rtol

    def fit(self, X, y=None):
        if self.model is None:
            raise ValueError("RobinInverter needs a ForwardModel")
        K = AdmissibleSet(self.lower, self.upper)
        measured = _as_trace(self.model, X)
        q0 = np.full(self.model.n_params, K.midpoint) if self.q_init is None else self.q_init
        res = gauss_newton_solve(
            self.model, measured, K, q0, reg=self.reg, max_iter=self.max_iter, step_tol=self.step_tol, grad_rtol=self.grad_rtol
        )
        self.result_ = res
        self.q_ = project_onto_K(res.q, K)
        self.coef_ = self.q_.coeffs.copy()
        self.n_iter_ = res.n_iter
        self.converged_ = res.converged
        return self

    def predict(self, X=None):
        """Trace values predicted by the fitted coefficient."""
        check_is_fitted(self, "coef_")
        return self.model.trace(self.coef_).values

    def score(self, X, y=None):
        """Negative misfit of the fitted coefficient against ``X``."""
        check_is_fitted(self, "coef_")
        return -misfit(self.model, self.coef_, _as_trace(self.model, X))
