"""Implicit Euler time stepping of the Stokes system with Robin outlet."""
from __future__ import annotations

import logging
import threading
import warnings
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.sparse as sp
from scipy.linalg import lu_factor, lu_solve
from scipy.sparse.linalg import splu

from .assembly import (
    AssembledOperators,
    FunctionSpaces,
    TraceOperator,
    assemble_loads,
    assemble_static,
    body_load,
    boundary_load,
    robin_space_matrices,
    trace_matrix,
)
from .mesh import BoundaryTag, Mesh
from .parameters import RobinBasis, RobinCoefficient

__all__ = [
    "TimeGrid",
    "ProblemData",
    "StateTrajectory",
    "MeasurementTrace",
    "SolverError",
    "ForwardModel",
    "solve_forward",
    "extract_trace",
    "verify_energy_estimate",
    "default_data",
]

log = logging.getLogger(__name__)


class SolverError(RuntimeError):
    """Linear solve failure inside time stepping."""

    def __init__(self, message, step=None):
        super().__init__(message if step is None else f"step {step}: {message}")
        self.step = step


@dataclass(frozen=True)
class TimeGrid:
    T: float
    n_steps: int

    def __post_init__(self):
        if not self.T > 0:
            raise ValueError("final time must be positive")
        if self.n_steps < 1:
            raise ValueError("need at least one time step")

    @property
    def dt(self) -> float:
        return self.T / self.n_steps

    @property
    def times(self) -> np.ndarray:
        t = np.arange(self.n_steps + 1) * self.dt
        t[-1] = self.T
        return t

    @property
    def weights(self) -> np.ndarray:
        """Trapezoid weights on the time nodes."""
        w = np.full(self.n_steps + 1, self.dt)
        w[0] = w[-1] = 0.5 * self.dt
        return w


@dataclass
class ProblemData:
    """Initial velocity, inlet traction, outlet Robin source and body force.

    ``u0(points)`` returns (n, 2); ``g``, ``kappa`` and ``f`` take
    ``(t, points)`` and return (n, 2). ``None`` means zero.
    """

    u0: Callable | None = None
    g: Callable | None = None
    kappa: Callable | None = None
    f: Callable | None = None

    def scaled(self, alpha: float) -> "ProblemData":
        def sc(fn, timed=True):
            if fn is None:
                return None
            if timed:
                return lambda t, x: alpha * np.asarray(fn(t, x))
            return lambda x: alpha * np.asarray(fn(x))

        return ProblemData(sc(self.u0, timed=False), sc(self.g), sc(self.kappa), sc(self.f))


def default_data(H: float = 1.0, T: float = 1.0, traction: float = 1.0, u0_amplitude: float = 0.5) -> ProblemData:
    """Pulsatile parabolic inlet traction and a Poiseuille initial state."""

    def g(t, x):
        y = x[:, 1]
        out = np.zeros((len(x), 2))
        out[:, 0] = traction * (1 + 0.5 * np.sin(2 * np.pi * t / T)) * 4 * y * (H - y) / H**2
        return out

    def u0(x):
        y = x[:, 1]
        out = np.zeros((len(x), 2))
        out[:, 0] = u0_amplitude * 4 * y * (H - y) / H**2
        return out

    return ProblemData(u0=u0, g=g)


@dataclass
class StateTrajectory:
    """Free velocity dofs at all time nodes and pressures at steps 1..n."""

    velocity: np.ndarray
    pressure: np.ndarray
    grid: TimeGrid
    coeffs: np.ndarray | None = None
    factors: list = field(default_factory=list, repr=False)
    model: "ForwardModel | None" = field(default=None, repr=False)

    @property
    def n_steps(self) -> int:
        return len(self.velocity) - 1

    def outlet_traces(self) -> np.ndarray:
        """Velocity restricted to outlet dofs at every time node (full numbering)."""
        sp_ = self.model.spaces
        full = sp_.expand(self.velocity)
        return full[:, self.model.outlet_dofs]


@dataclass
class MeasurementTrace:
    """Velocity on the measurement window at every time node.

    The norm is the trapezoid-in-time, boundary-mass-in-space
    approximation of the space-time L2 norm.
    """

    values: np.ndarray
    weights: np.ndarray
    gram: sp.spmatrix

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)

    def _check(self, other):
        if self.values.shape != other.values.shape or not np.array_equal(self.weights, other.weights):
            raise ValueError("traces live on different grids or windows")

    def inner(self, other) -> float:
        self._check(other)
        return float(np.sum(self.weights * np.einsum("ni,ni->n", self.values, (self.gram @ other.values.T).T)))

    def norm(self) -> float:
        return float(np.sqrt(max(self.inner(self), 0.0)))

    def __sub__(self, other):
        self._check(other)
        return MeasurementTrace(self.values - other.values, self.weights, self.gram)

    def __add__(self, other):
        self._check(other)
        return MeasurementTrace(self.values + other.values, self.weights, self.gram)

    def __mul__(self, alpha):
        return MeasurementTrace(float(alpha) * self.values, self.weights, self.gram)

    __rmul__ = __mul__

    def copy(self) -> "MeasurementTrace":
        return MeasurementTrace(self.values.copy(), self.weights, self.gram)

    def to_csv(self, path, times, labels=None):
        n = self.values.shape[1]
        labels = labels or [f"dof{k}" for k in range(n)]
        header = "step,time," + ",".join(labels)
        rows = np.column_stack([np.arange(len(times)), times, self.values])
        fmt = ["%d", "%.17g"] + ["%.17g"] * n
        np.savetxt(path, rows, delimiter=",", header=header, comments="", fmt=fmt)

    @staticmethod
    def read_csv(path) -> tuple[np.ndarray, np.ndarray]:
        """Return ``(times, values)`` from a trace CSV."""
        data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        return data[:, 1], data[:, 2:]


class _DirectStep:
    def __init__(self, lu):
        self.lu = lu

    def solve(self, b):
        return self.lu.solve(b)


class _LowRankStep:
    """Solve with ``S0 + U C U^T`` from the factorization of ``S0``.

    ``U`` injects the outlet dofs and ``C`` is the dense outlet block of the
    Robin matrix; the push-through form of the Woodbury identity avoids
    inverting ``C``, which is singular wherever the coefficient vanishes.
    """

    def __init__(self, model, C):
        self.model = model
        self.lu0 = model._reference_factor()
        self.C = C
        k = C.shape[0]
        self.cap = lu_factor(np.eye(k) + model._UZ @ C)

    def solve(self, b):
        m = self.model
        y = self.lu0.solve(b)
        corr = lu_solve(self.cap, y[m._outlet_free])
        return y - m._Z @ (self.C @ corr)


class ForwardModel:
    """Discretised forward map from Robin coefficients to trajectories and traces.

    Static matrices, the Robin matrices of every spatial hat, the data
    loads and the measurement restriction are built once. With
    ``method="lowrank"`` (default) the coefficient-independent saddle-point
    matrix is factorised once per model and each step applies its Robin
    block through a small capacitance system on the outlet dofs;
    ``method="direct"`` factorises the full matrix at every new Robin
    matrix instead.
    """

    def __init__(
        self,
        mesh: Mesh,
        grid: TimeGrid,
        data: ProblemData,
        basis: RobinBasis,
        window=None,
        ops: AssembledOperators | None = None,
        method: str = "lowrank",
    ):
        if method not in ("lowrank", "direct"):
            raise ValueError("method must be 'lowrank' or 'direct'")
        self.method = method
        self.mesh = mesh
        self.grid = grid
        self.data = data
        self.basis = basis
        self.ops = ops or assemble_static(mesh)
        self.spaces: FunctionSpaces = self.ops.spaces
        self.trace_op: TraceOperator = trace_matrix(mesh, self.spaces, window)
        if not np.isclose(basis.final_time, grid.T):
            raise ValueError("basis time knots do not span the time grid")

        sp_ = self.spaces
        P = sp_.prolongation
        self.robin_free = [(P.T @ R @ P).tocsr() for R in robin_space_matrices(sp_, basis)]
        self.restriction = (self.trace_op.restriction @ P).tocsr()
        outlet = [k for k, t in enumerate(mesh.boundary_tags) if t.kind == "outlet"]
        onodes = np.unique(sp_.boundary_nodes[outlet])
        self.outlet_dofs = np.concatenate([onodes, sp_.n_nodes + onodes])

        u0 = sp_.interpolate(data.u0) if data.u0 is not None else np.zeros(sp_.n_velocity)
        self.u0 = u0[sp_.free]
        self.loads = self._data_loads(data)
        self._base = (self.ops.mass_free / grid.dt + self.ops.stiffness_free).tocsr()
        self._mass_dt = (self.ops.mass_free / grid.dt).tocsr()
        self._B = self.ops.divergence_free

        # the Robin term only couples outlet dofs
        outlet_free = np.flatnonzero(np.isin(sp_.free, self.outlet_dofs))
        self._outlet_free = outlet_free
        self._robin_outlet = np.array([R[outlet_free][:, outlet_free].toarray() for R in self.robin_free])
        self._lu0 = None
        self._lock = threading.Lock()

    def _data_loads(self, data):
        sp_ = self.spaces
        loads = np.zeros((self.grid.n_steps + 1, sp_.n_free))
        for n, t in enumerate(self.grid.times):
            if n == 0:
                continue
            F = assemble_loads(self.mesh, sp_, data.g, data.kappa, t) + body_load(sp_, data.f, t)
            loads[n] = F[sp_.free]
        return loads

    def __deepcopy__(self, memo):
        # immutable apart from the factor cache; estimator cloning shares it
        return self

    @property
    def n_params(self) -> int:
        return len(self.basis)

    def coefficient(self, q) -> np.ndarray:
        if isinstance(q, RobinCoefficient):
            if q.basis is not self.basis and q.basis != self.basis:
                raise ValueError("coefficient basis does not match the model")
            return q.coeffs
        c = np.asarray(q, dtype=float).ravel()
        if len(c) != self.n_params:
            raise ValueError(f"expected {self.n_params} coefficients, got {len(c)}")
        return c

    def robin_matrix(self, coeffs, t) -> sp.csr_matrix:
        w = self.basis.space_weights(coeffs, t)
        R = sp.csr_matrix(self._base.shape)
        for ws, Rs in zip(w, self.robin_free):
            if ws != 0.0:
                R = R + ws * Rs
        return R

    def _factorize(self, coeffs, t, step):
        if self.method == "direct":
            K = self._base + self.robin_matrix(coeffs, t)
            S = sp.bmat([[K, self._B.T], [self._B, None]], format="csc")
            try:
                return _DirectStep(splu(S))
            except RuntimeError as exc:
                raise SolverError(f"factorization failed: {exc}", step) from exc
        w = self.basis.space_weights(coeffs, t)
        C = np.tensordot(w, self._robin_outlet, axes=1)
        try:
            return _LowRankStep(self, C)
        except (np.linalg.LinAlgError, ValueError) as exc:
            raise SolverError(f"capacitance factorization failed: {exc}", step) from exc

    def _reference_factor(self):
        with self._lock:
            return self._build_reference_factor()

    def _build_reference_factor(self):
        if self._lu0 is None:
            S0 = sp.bmat([[self._base, self._B.T], [self._B, None]], format="csc")
            try:
                self._lu0 = splu(S0)
            except RuntimeError as exc:
                raise SolverError(f"factorization of the q-independent operator failed: {exc}") from exc
            n = S0.shape[0]
            U = np.zeros((n, len(self._outlet_free)))
            U[self._outlet_free, np.arange(len(self._outlet_free))] = 1.0
            self._Z = self._lu0.solve(U)
            self._UZ = self._Z[self._outlet_free]
        return self._lu0

    def solve(self, q, data_loads=None, u0=None, keep_factors=True) -> StateTrajectory:
        """Time-march the saddle-point system for coefficient ``q``."""
        c = self.coeffs_checked(q)
        loads = self.loads if data_loads is None else data_loads
        nf, npr = self.spaces.n_free, self.spaces.n_pressure
        N = self.grid.n_steps
        U = np.zeros((N + 1, nf))
        Pr = np.zeros((N, npr))
        U[0] = self.u0 if u0 is None else u0
        factors = []
        lu, w_prev = None, None
        rhs = np.zeros(nf + npr)
        for n in range(N):
            t = self.grid.times[n + 1]
            w = self.basis.space_weights(c, t)
            if lu is None or not np.array_equal(w, w_prev):
                lu = self._factorize(c, t, n + 1)
                w_prev = w
            rhs[:nf] = self._mass_dt @ U[n] + loads[n + 1]
            x = lu.solve(rhs)
            if not np.all(np.isfinite(x)):
                raise SolverError("non-finite solution", n + 1)
            U[n + 1] = x[:nf]
            Pr[n] = x[nf:]
            if keep_factors:
                factors.append(lu)
        return StateTrajectory(U, Pr, self.grid, c.copy(), factors, self)

    def coeffs_checked(self, q) -> np.ndarray:
        c = self.coefficient(q)
        if np.any(c <= 0):
            warnings.warn("Robin coefficient is not positive; well-posedness is not guaranteed", RuntimeWarning, stacklevel=3)
        return c

    def trace_of(self, velocity) -> MeasurementTrace:
        vals = (self.restriction @ np.asarray(velocity).T).T
        return MeasurementTrace(vals, self.grid.weights, self.trace_op.gram)

    def trace(self, q) -> MeasurementTrace:
        """Forward map: coefficient to the measured velocity trace."""
        return self.trace_of(self.solve(q, keep_factors=False).velocity)

    def zero_trace(self) -> MeasurementTrace:
        return MeasurementTrace(np.zeros((self.grid.n_steps + 1, self.trace_op.size)), self.grid.weights, self.trace_op.gram)

    # norms -------------------------------------------------------------
    def l2h1_norm(self, traj: StateTrajectory) -> float:
        """Trapezoid-in-time norm with ``u^T (M + A) u``."""
        H1 = self.ops.mass_free + self.ops.stiffness_free
        U = traj.velocity
        e = np.einsum("ni,ni->n", U, (H1 @ U.T).T)
        return float(np.sqrt(np.sum(self.grid.weights * e)))

    def l2_norm_u0(self) -> float:
        return float(np.sqrt(self.u0 @ (self.ops.mass_free @ self.u0)))

    def boundary_data_norm(self, func, kind: str) -> float:
        """``||func||`` in L2(0,T; L2(boundary part)), trapezoid in time."""
        if func is None:
            return 0.0
        from .assembly import EDGE_POINTS, EDGE_WEIGHTS

        if kind == "inlet":
            ids = self.spaces.boundary_edges(BoundaryTag.inlet())
        else:
            ids = np.array([k for k, t in enumerate(self.mesh.boundary_tags) if t.kind == "outlet"])
        p = self.mesh.vertices[self.mesh.boundary[ids]]
        pts = p[:, None, 0, :] + EDGE_POINTS[None, :, None] * (p[:, None, 1, :] - p[:, None, 0, :])
        w = np.linalg.norm(p[:, 1] - p[:, 0], axis=1)[:, None] * EDGE_WEIGHTS[None, :]
        total = 0.0
        for tw, t in zip(self.grid.weights, self.grid.times):
            v = np.asarray(func(t, pts.reshape(-1, 2))).reshape(pts.shape[0], pts.shape[1], 2)
            total += tw * np.sum(w * np.sum(v**2, axis=-1))
        return float(np.sqrt(total))

    def data_bound(self) -> float:
        """``||u0|| + ||g||``, the bound the differentiability argument is uniform in."""
        return self.l2_norm_u0() + self.boundary_data_norm(self.data.g, "inlet")

    def check_data(self):
        """Inlet traction must not vanish identically at any time node."""
        ids = self.spaces.boundary_edges(BoundaryTag.inlet())
        for n, t in enumerate(self.grid.times):
            F = boundary_load(self.spaces, ids, self.data.g, t)
            if not np.any(F != 0):
                raise ValueError(f"inlet traction vanishes identically at t={t} (node {n})")


def solve_forward(ops: AssembledOperators, data: ProblemData, q: RobinCoefficient, grid: TimeGrid, window=None) -> StateTrajectory:
    model = ForwardModel(ops.mesh, grid, data, q.basis, window=window, ops=ops)
    return model.solve(q)


def extract_trace(traj: StateTrajectory, restriction=None, gram=None, grid: TimeGrid | None = None) -> MeasurementTrace:
    """Trace of a trajectory; defaults to the trajectory's own model window."""
    if restriction is None:
        return traj.model.trace_of(traj.velocity)
    grid = grid or traj.grid
    vals = (restriction @ np.asarray(traj.velocity).T).T
    return MeasurementTrace(vals, grid.weights, gram)


def verify_energy_estimate(model: ForwardModel, samples, data: ProblemData | None = None) -> dict:
    """Ratio of the solution's L2(H1) norm to the data norms for each sample.

    A bounded spread of the ratios across coefficients is the discrete
    counterpart of a coefficient-independent stability constant.
    """
    if data is not None and data is not model.data:
        model = ForwardModel(model.mesh, model.grid, data, model.basis, window=model.trace_op.interval, ops=model.ops)
    denom = (
        model.l2_norm_u0()
        + model.boundary_data_norm(model.data.g, "inlet")
        + model.boundary_data_norm(model.data.kappa, "outlet")
    )
    if denom == 0:
        raise ValueError("all data norms vanish; the ratio is undefined")
    ratios = [model.l2h1_norm(model.solve(q, keep_factors=False)) / denom for q in samples]
    ratios = np.asarray(ratios)
    return {
        "ratios": ratios.tolist(),
        "max_ratio": float(ratios.max()),
        "min_ratio": float(ratios.min()),
        "spread": float(ratios.max() / ratios.min()) if ratios.min() > 0 else float("inf"),
        "data_norm": float(denom),
    }
