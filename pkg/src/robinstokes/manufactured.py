"""Manufactured solutions and the convergence harness.

A velocity ``theta(t) * curl(psi)`` is divergence-free for any stream
function ``psi``; choosing ``psi`` with a double root on the lateral walls
makes it vanish there too. Body force, inlet traction and outlet Robin
source are derived symbolically so the discrete solution must converge to
the chosen pair.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import sympy as sym

from .assembly import EDGE_POINTS, EDGE_WEIGHTS, edge_p2_values
from .forward import ForwardModel, ProblemData, TimeGrid
from .mesh import Mesh, build_channel_mesh, refine
from .parameters import RobinCoefficient, default_basis

__all__ = ["ManufacturedSolution", "solution_errors", "convergence_table", "temporal_table", "observed_rates"]

t_, x_, y_ = sym.symbols("t x y", real=True)


def _vectorize(expr, args):
    fn = sym.lambdify(args, expr, "numpy")

    def call(*vals):
        out = fn(*vals)
        return np.broadcast_to(np.asarray(out, dtype=float), np.broadcast(*vals).shape)

    return call


def _q_at(q: RobinCoefficient, t, y):
    """Robin coefficient at outlet points ``y``; interface points go to the lower segment."""
    b = q.basis
    out = np.empty(len(y))
    starts = np.array([lo for lo, _ in b.segment_bounds])
    seg = np.clip(np.searchsorted(starts, y, side="right") - 1, 0, b.n_segments - 1)
    for i in range(b.n_segments):
        on = seg == i
        if np.any(on):
            out[on] = q.coeffs @ b.values(t, i, y[on])
    return out


@dataclass
class ManufacturedSolution:
    """Exact Stokes pair built from a stream function, a pressure and a time factor.

    Expressions are sympy strings in ``x``, ``y`` (and ``t`` for the time
    factor). Zero stream function and pressure give the trivial solution.
    """

    stream: str = "y**2*(H - y)**2*cos(x)"
    pressure: str = "sin(x)*cos(y)"
    time_factor: str = "1 + sin(2*pi*t)"
    H: float = 1.0
    L: float = 2.0

    def __post_init__(self):
        H = sym.Float(self.H)
        env = {"x": x_, "y": y_, "t": t_, "H": H, "L": sym.Float(self.L)}
        psi = sym.sympify(self.stream, locals=env)
        P = sym.sympify(self.pressure, locals=env)
        th = sym.sympify(self.time_factor, locals=env)
        ux = th * sym.diff(psi, y_)
        uy = -th * sym.diff(psi, x_)
        p = th * P
        div = sym.simplify(sym.diff(ux, x_) + sym.diff(uy, y_))
        if div != 0:
            raise ValueError("manufactured velocity is not divergence-free")
        for yw in (0, H):
            if sym.simplify(ux.subs(y_, yw)) != 0 or sym.simplify(uy.subs(y_, yw)) != 0:
                raise ValueError("manufactured velocity must vanish on the lateral walls")
        self.u_expr = (ux, uy)
        self.p_expr = p
        lap = [sym.diff(c, x_, 2) + sym.diff(c, y_, 2) for c in (ux, uy)]
        f = [sym.diff(ux, t_) - lap[0] + sym.diff(p, x_), sym.diff(uy, t_) - lap[1] + sym.diff(p, y_)]
        # inlet normal (-1, 0): du/dnu - p nu
        g = [-sym.diff(ux, x_) + p, -sym.diff(uy, x_)]
        # outlet normal (1, 0), Robin term added numerically
        k = [sym.diff(ux, x_) - p, sym.diff(uy, x_)]
        args = (t_, x_, y_)
        self._u = [_vectorize(c, args) for c in (ux, uy)]
        self._grad = [[_vectorize(sym.diff(c, v), args) for v in (x_, y_)] for c in (ux, uy)]
        self._f = [_vectorize(c, args) for c in f]
        self._g = [_vectorize(c, args) for c in g]
        self._k = [_vectorize(c, args) for c in k]

    def velocity(self, t, pts):
        return np.column_stack([c(t, pts[:, 0], pts[:, 1]) for c in self._u])

    def gradient(self, t, pts):
        return np.stack([[g(t, pts[:, 0], pts[:, 1]) for g in row] for row in self._grad]).transpose(2, 0, 1)

    def data(self, q: RobinCoefficient) -> ProblemData:
        def f(t, pts):
            return np.column_stack([c(t, pts[:, 0], pts[:, 1]) for c in self._f])

        def g(t, pts):
            return np.column_stack([c(t, pts[:, 0], pts[:, 1]) for c in self._g])

        def kappa(t, pts):
            base = np.column_stack([c(t, pts[:, 0], pts[:, 1]) for c in self._k])
            return base + _q_at(q, t, pts[:, 1])[:, None] * self.velocity(t, pts)

        return ProblemData(u0=lambda pts: self.velocity(0.0, pts), g=g, kappa=kappa, f=f)


def solution_errors(model: ForwardModel, exact: ManufacturedSolution, velocity) -> dict:
    """Space-time errors of a discrete velocity history against the exact field."""
    sp_ = model.spaces
    weights = model.grid.weights
    pts = sp_.quad_points.reshape(-1, 2)
    qw = sp_.quad_weights.ravel()
    win = model.trace_op.edges
    pe = model.mesh.vertices[model.mesh.boundary[win]]
    epts = pe[:, None, 0, :] + EDGE_POINTS[None, :, None] * (pe[:, None, 1, :] - pe[:, None, 0, :])
    ew = (np.linalg.norm(pe[:, 1] - pe[:, 0], axis=1)[:, None] * EDGE_WEIGHTS[None, :]).ravel()
    N = edge_p2_values(EDGE_POINTS)
    enodes = sp_.boundary_nodes[win]
    l2 = h1 = tr = 0.0
    for w, t, u in zip(weights, model.grid.times, velocity):
        full = sp_.expand(u)
        vals, grads = sp_.evaluate(full)
        ev = vals.reshape(-1, 2) - exact.velocity(t, pts)
        eg = grads.reshape(-1, 2, 2) - exact.gradient(t, pts)
        e_l2 = np.sum(qw * np.sum(ev**2, axis=1))
        e_g = np.sum(qw * np.sum(eg**2, axis=(1, 2)))
        l2 += w * e_l2
        h1 += w * (e_l2 + e_g)
        uu = full.reshape(2, -1)[:, enodes]  # (2, ne, 3)
        tv = np.einsum("qi,cei->eqc", N, uu).reshape(-1, 2)
        tr += w * np.sum(ew * np.sum((tv - exact.velocity(t, epts.reshape(-1, 2))) ** 2, axis=1))
    return {"l2l2": math.sqrt(l2), "l2h1": math.sqrt(h1), "trace": math.sqrt(tr)}


def _model(mesh, grid, exact, coeffs, n_time_knots, window):
    basis = default_basis(mesh, grid.T, n_time_knots)
    q = RobinCoefficient(basis, np.resize(coeffs, len(basis)))
    model = ForwardModel(mesh, grid, exact.data(q), basis, window=window)
    return model, q


def observed_rates(sizes, errors) -> list[float]:
    s, e = np.asarray(sizes, dtype=float), np.asarray(errors, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        return (np.log(e[:-1] / e[1:]) / np.log(s[:-1] / s[1:])).tolist()


def convergence_table(
    base: Mesh,
    T: float,
    n_t0: int,
    levels: int = 3,
    exact: ManufacturedSolution | None = None,
    coeffs=(1.0, 2.0),
    n_time_knots: int = 2,
    window=None,
) -> dict:
    """Errors under uniform refinement with ``dt`` proportional to ``h**2``."""
    if levels < 2:
        raise ValueError("need at least two levels to compute rates")
    exact = exact or ManufacturedSolution(H=base.height, L=base.length)
    rows = []
    mesh = base
    for lev in range(levels):
        grid = TimeGrid(T, n_t0 * 4**lev)
        model, q = _model(mesh, grid, exact, coeffs, n_time_knots, window)
        traj = model.solve(q, keep_factors=False)
        rows.append({"level": lev, "h": mesh.h, "n_t": grid.n_steps, **solution_errors(model, exact, traj.velocity)})
        mesh = refine(mesh)
    hs = [r["h"] for r in rows]
    rates = {k: observed_rates(hs, [r[k] for r in rows]) for k in ("l2l2", "l2h1", "trace")}
    return {"rows": rows, "rates": rates}


def temporal_table(
    mesh: Mesh,
    T: float,
    steps=(4, 8, 16),
    exact: ManufacturedSolution | None = None,
    coeffs=(1.0, 2.0),
    n_time_knots: int = 2,
    window=None,
) -> dict:
    """Errors on a fixed mesh while the time step is halved."""
    exact = exact or ManufacturedSolution(H=mesh.height, L=mesh.length)
    rows = []
    for n in steps:
        grid = TimeGrid(T, n)
        model, q = _model(mesh, grid, exact, coeffs, n_time_knots, window)
        traj = model.solve(q, keep_factors=False)
        rows.append({"n_t": n, "dt": grid.dt, **solution_errors(model, exact, traj.velocity)})
    dts = [r["dt"] for r in rows]
    rates = {k: observed_rates(dts, [r[k] for r in rows]) for k in ("l2l2", "l2h1", "trace")}
    return {"rows": rows, "rates": rates}


def default_base_mesh() -> Mesh:
    return build_channel_mesh(2.0, 1.0, 4, 2, 2)
