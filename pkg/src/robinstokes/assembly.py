"""Taylor-Hood (P2/P1) discretisation of the Stokes weak form.

Velocity unknowns are ordered component-major: degree of freedom
``c * n_nodes + k`` is component ``c`` at P2 node ``k``. P2 nodes are the
mesh vertices followed by the edge midpoints. Lateral-wall nodes carry the
no-slip condition and are removed from the free set.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.sparse as sp

from .mesh import BoundaryTag, Mesh
from .parameters import RobinBasis, RobinCoefficient

__all__ = [
    "FunctionSpaces",
    "AssembledOperators",
    "TRI_POINTS",
    "TRI_WEIGHTS",
    "EDGE_POINTS",
    "EDGE_WEIGHTS",
    "assemble_static",
    "assemble_robin_matrix",
    "robin_space_matrices",
    "assemble_loads",
    "boundary_load",
    "trace_matrix",
    "TraceOperator",
]

# degree-4 rule on the reference triangle, barycentric coordinates
_a, _b = 0.44594849091596488632, 0.09157621350977074346
TRI_POINTS = np.array(
    [
        [_a, _a, 1 - 2 * _a],
        [_a, 1 - 2 * _a, _a],
        [1 - 2 * _a, _a, _a],
        [_b, _b, 1 - 2 * _b],
        [_b, 1 - 2 * _b, _b],
        [1 - 2 * _b, _b, _b],
    ]
)
TRI_WEIGHTS = np.array([0.22338158967801146570] * 3 + [0.10995174365532186764] * 3)

# 3-point Gauss-Legendre on [0, 1]
EDGE_POINTS = np.array([0.5 - np.sqrt(15) / 10, 0.5, 0.5 + np.sqrt(15) / 10])
EDGE_WEIGHTS = np.array([5.0, 8.0, 5.0]) / 18.0

_EDGE_PAIRS = ((0, 1), (1, 2), (2, 0))


def p2_values(lam):
    """P2 shape functions at barycentric points ``lam`` (nq, 3) -> (nq, 6)."""
    l0, l1, l2 = lam.T
    return np.column_stack(
        [l0 * (2 * l0 - 1), l1 * (2 * l1 - 1), l2 * (2 * l2 - 1), 4 * l0 * l1, 4 * l1 * l2, 4 * l2 * l0]
    )


def p2_gradient_coeffs(lam):
    """Coefficients of each P2 gradient on the barycentric gradients, (nq, 6, 3)."""
    nq = len(lam)
    C = np.zeros((nq, 6, 3))
    for i in range(3):
        C[:, i, i] = 4 * lam[:, i] - 1
    for k, (i, j) in enumerate(_EDGE_PAIRS):
        C[:, 3 + k, i] = 4 * lam[:, j]
        C[:, 3 + k, j] = 4 * lam[:, i]
    return C


def edge_p2_values(s):
    """1D P2 shape functions at ``s`` in [0, 1] ordered (start, midpoint, end)."""
    s = np.asarray(s, dtype=float)
    return np.column_stack([(1 - s) * (1 - 2 * s), 4 * s * (1 - s), s * (2 * s - 1)])


class FunctionSpaces:
    """Degree-of-freedom bookkeeping for the Taylor-Hood pair on ``mesh``."""

    def __init__(self, mesh: Mesh):
        self.mesh = mesh
        nv = mesh.n_vertices
        edges = mesh.edges
        self.n_nodes = nv + len(edges)
        self.n_pressure = nv
        self.n_velocity = 2 * self.n_nodes
        self.nodes = np.vstack([mesh.vertices, 0.5 * (mesh.vertices[edges[:, 0]] + mesh.vertices[edges[:, 1]])])
        self.cell_nodes = np.hstack([mesh.triangles, nv + mesh.triangle_edges])

        bidx = mesh.boundary_edge_index()
        # (start, midpoint, end) P2 nodes of each boundary edge
        self.boundary_nodes = np.column_stack([mesh.boundary[:, 0], nv + bidx, mesh.boundary[:, 1]])

        lateral = np.array([t.kind == "lateral" for t in mesh.boundary_tags])
        dir_nodes = np.unique(self.boundary_nodes[lateral])
        self.dirichlet_nodes = dir_nodes
        is_dir = np.zeros(self.n_velocity, dtype=bool)
        is_dir[dir_nodes] = True
        is_dir[self.n_nodes + dir_nodes] = True
        self.free = np.flatnonzero(~is_dir)
        self.n_free = len(self.free)
        self.prolongation = sp.csr_matrix(
            (np.ones(self.n_free), (self.free, np.arange(self.n_free))), shape=(self.n_velocity, self.n_free)
        )

        # per-cell geometry
        p = mesh.vertices[mesh.triangles]
        self.areas = mesh.areas
        grads = np.empty((mesh.n_triangles, 3, 2))
        for i in range(3):
            j, k = (i + 1) % 3, (i + 2) % 3
            grads[:, i, 0] = p[:, j, 1] - p[:, k, 1]
            grads[:, i, 1] = p[:, k, 0] - p[:, j, 0]
        self.lambda_grads = grads / (2 * self.areas)[:, None, None]

        self.shape = p2_values(TRI_POINTS)  # (nq, 6)
        C = p2_gradient_coeffs(TRI_POINTS)  # (nq, 6, 3)
        self.shape_grads = np.einsum("qik,tkd->tqid", C, self.lambda_grads)  # (nt, nq, 6, 2)
        self.quad_points = np.einsum("qk,tkd->tqd", TRI_POINTS, p)
        self.quad_weights = self.areas[:, None] * TRI_WEIGHTS[None, :]

    def component_dofs(self, nodes, c):
        return c * self.n_nodes + np.asarray(nodes)

    def interpolate(self, func: Callable) -> np.ndarray:
        """Nodal interpolant of ``func(points) -> (n, 2)`` as a full velocity vector."""
        vals = np.asarray(func(self.nodes), dtype=float).reshape(self.n_nodes, 2)
        return np.concatenate([vals[:, 0], vals[:, 1]])

    def expand(self, u_free) -> np.ndarray:
        """Full velocity vector from free values; no-slip nodes set to zero."""
        u_free = np.asarray(u_free)
        out = np.zeros(u_free.shape[:-1] + (self.n_velocity,))
        out[..., self.free] = u_free
        return out

    def evaluate(self, u_full):
        """Velocity values and gradients at the triangle quadrature points.

        Returns arrays of shape (nt, nq, 2) and (nt, nq, 2, 2), the latter
        indexed ``[..., component, derivative]``.
        """
        u = np.asarray(u_full).reshape(2, self.n_nodes)
        loc = u[:, self.cell_nodes]  # (2, nt, 6)
        vals = np.einsum("qi,cti->tqc", self.shape, loc)
        grads = np.einsum("tqid,cti->tqcd", self.shape_grads, loc)
        return vals, grads

    def boundary_edges(self, tag: BoundaryTag) -> np.ndarray:
        return np.array([k for k, t in enumerate(self.mesh.boundary_tags) if t == tag], dtype=np.int64)


@dataclass
class AssembledOperators:
    """Static operators; ``*_free`` variants act on unconstrained velocity dofs.

    Sparse matrices are CSR. ``B`` maps velocity to pressure test functions
    and realises ``-(div v, psi)``.
    """

    spaces: FunctionSpaces
    mass: sp.csr_matrix
    stiffness: sp.csr_matrix
    divergence: sp.csr_matrix
    pressure_mass: sp.csr_matrix
    mass_free: sp.csr_matrix = field(init=False)
    stiffness_free: sp.csr_matrix = field(init=False)
    divergence_free: sp.csr_matrix = field(init=False)

    def __post_init__(self):
        f = self.spaces.free
        self.mass_free = self.mass[f][:, f].tocsr()
        self.stiffness_free = self.stiffness[f][:, f].tocsr()
        self.divergence_free = self.divergence[:, f].tocsr()

    @property
    def mesh(self) -> Mesh:
        return self.spaces.mesh


def _scatter(rows_local, cols_local, vals, shape):
    return sp.coo_matrix((vals.ravel(), (rows_local.ravel(), cols_local.ravel())), shape=shape).tocsr()


def assemble_static(mesh: Mesh, spaces: FunctionSpaces | None = None) -> AssembledOperators:
    """Velocity mass, full-gradient stiffness, divergence and pressure mass matrices."""
    spaces = spaces or FunctionSpaces(mesh)
    if np.any(spaces.areas <= 0):
        raise ValueError("degenerate triangle: non-positive Jacobian")
    nn = spaces.n_nodes
    cn = spaces.cell_nodes
    w = spaces.quad_weights  # (nt, nq)

    m_loc = np.einsum("tq,qi,qj->tij", w, spaces.shape, spaces.shape)
    k_loc = np.einsum("tq,tqid,tqjd->tij", w, spaces.shape_grads, spaces.shape_grads)
    rows = np.repeat(cn[:, :, None], 6, axis=2)
    cols = np.repeat(cn[:, None, :], 6, axis=1)
    Ms = _scatter(rows, cols, m_loc, (nn, nn))
    Ks = _scatter(rows, cols, k_loc, (nn, nn))
    mass = sp.block_diag([Ms, Ms], format="csr")
    stiffness = sp.block_diag([Ks, Ks], format="csr")

    lam = TRI_POINTS  # P1 pressure shapes are the barycentrics
    tri = mesh.triangles
    prow = np.repeat(tri[:, :, None], 6, axis=2)
    pcol = np.repeat(cn[:, None, :], 3, axis=1)
    blocks = []
    for c in range(2):
        b_loc = -np.einsum("tq,qi,tqj->tij", w, lam, spaces.shape_grads[..., c])
        blocks.append(_scatter(prow, pcol, b_loc, (spaces.n_pressure, nn)))
    divergence = sp.hstack(blocks, format="csr")

    mp_loc = np.einsum("tq,qi,qj->tij", w, lam, lam)
    pressure_mass = _scatter(
        np.repeat(tri[:, :, None], 3, axis=2), np.repeat(tri[:, None, :], 3, axis=1), mp_loc, (spaces.n_pressure, spaces.n_pressure)
    )
    return AssembledOperators(spaces, mass, stiffness, divergence, pressure_mass)


def _edge_geometry(spaces: FunctionSpaces, edge_ids):
    mesh = spaces.mesh
    p = mesh.vertices[mesh.boundary[edge_ids]]  # (ne, 2, 2)
    pts = p[:, None, 0, :] + EDGE_POINTS[None, :, None] * (p[:, None, 1, :] - p[:, None, 0, :])
    lengths = np.linalg.norm(p[:, 1] - p[:, 0], axis=1)
    weights = lengths[:, None] * EDGE_WEIGHTS[None, :]
    return pts, weights


def _edge_mass(spaces: FunctionSpaces, edge_ids, weight_fn=None):
    """Scalar boundary mass on the given edges, optionally weighted; (n_nodes, n_nodes)."""
    nn = spaces.n_nodes
    if len(edge_ids) == 0:
        return sp.csr_matrix((nn, nn))
    pts, w = _edge_geometry(spaces, edge_ids)
    if weight_fn is not None:
        w = w * weight_fn(pts)
    N = edge_p2_values(EDGE_POINTS)
    loc = np.einsum("eq,qi,qj->eij", w, N, N)
    nodes = spaces.boundary_nodes[edge_ids]
    rows = np.repeat(nodes[:, :, None], 3, axis=2)
    cols = np.repeat(nodes[:, None, :], 3, axis=1)
    return _scatter(rows, cols, loc, (nn, nn))


def _outlet_edges(spaces, segment):
    return spaces.boundary_edges(BoundaryTag.outlet(segment))


def outlet_mass(spaces: FunctionSpaces) -> sp.csr_matrix:
    """Unweighted vector boundary mass on the whole outlet (full dofs)."""
    ids = np.array([k for k, t in enumerate(spaces.mesh.boundary_tags) if t.kind == "outlet"])
    Ms = _edge_mass(spaces, ids)
    return sp.block_diag([Ms, Ms], format="csr")


def robin_space_matrices(spaces: FunctionSpaces, basis: RobinBasis) -> list[sp.csr_matrix]:
    """Vector outlet mass weighted by every spatial hat of ``basis`` (full dofs).

    ``sum_s w_s R_s`` is the Robin matrix of a coefficient whose spatial
    weights at the current time are ``w_s``.
    """
    if basis.n_segments != spaces.mesh.n_segments:
        raise ValueError("basis and mesh disagree on the number of outlet segments")
    mats = []
    for seg, node in basis.space_index:
        ids = _outlet_edges(spaces, seg + 1)
        Ms = _edge_mass(spaces, ids, lambda pts, seg=seg, node=node: basis.space_values(seg, pts[..., 1].ravel())[node].reshape(pts.shape[:2]))
        mats.append(sp.block_diag([Ms, Ms], format="csr"))
    return mats


def assemble_robin_matrix(mesh: Mesh, spaces: FunctionSpaces, q: RobinCoefficient, t: float, space_mats=None) -> sp.csr_matrix:
    """Matrix of ``(u, v) -> int_{outlet} q(t) u . v`` on full velocity dofs."""
    mats = space_mats if space_mats is not None else robin_space_matrices(spaces, q.basis)
    w = q.basis.space_weights(q.coeffs, t)
    out = sp.csr_matrix((spaces.n_velocity, spaces.n_velocity))
    for ws, R in zip(w, mats):
        if ws != 0.0:
            out = out + ws * R
    return out


def boundary_load(spaces: FunctionSpaces, edge_ids, func: Callable, t: float) -> np.ndarray:
    """``int f(t) . v`` over the given boundary edges for every velocity test function.

    ``func(t, points)`` receives points of shape (n, 2) and returns (n, 2).
    """
    out = np.zeros(spaces.n_velocity)
    if func is None or len(edge_ids) == 0:
        return out
    pts, w = _edge_geometry(spaces, edge_ids)
    vals = np.asarray(func(t, pts.reshape(-1, 2)), dtype=float).reshape(pts.shape[0], pts.shape[1], 2)
    N = edge_p2_values(EDGE_POINTS)
    nodes = spaces.boundary_nodes[edge_ids]
    for c in range(2):
        loc = np.einsum("eq,eq,qi->ei", w, vals[..., c], N)
        np.add.at(out, c * spaces.n_nodes + nodes.ravel(), loc.ravel())
    return out


def assemble_loads(mesh: Mesh, spaces: FunctionSpaces, g, kappa, t: float) -> np.ndarray:
    """Inlet traction plus outlet Robin source against velocity test functions (full dofs)."""
    inlet = spaces.boundary_edges(BoundaryTag.inlet())
    outlet = np.array([k for k, tg in enumerate(mesh.boundary_tags) if tg.kind == "outlet"], dtype=np.int64)
    return boundary_load(spaces, inlet, g, t) + boundary_load(spaces, outlet, kappa, t)


def body_load(spaces: FunctionSpaces, f: Callable, t: float) -> np.ndarray:
    """``int_Omega f(t) . v`` (full dofs); used for manufactured solutions."""
    out = np.zeros(spaces.n_velocity)
    if f is None:
        return out
    pts = spaces.quad_points
    vals = np.asarray(f(t, pts.reshape(-1, 2)), dtype=float).reshape(pts.shape[0], pts.shape[1], 2)
    for c in range(2):
        loc = np.einsum("tq,tq,qi->ti", spaces.quad_weights, vals[..., c], spaces.shape)
        np.add.at(out, c * spaces.n_nodes + spaces.cell_nodes.ravel(), loc.ravel())
    return out


@dataclass
class TraceOperator:
    """Restriction of velocity fields to the measurement window.

    ``restriction`` maps full velocity vectors to the window dofs and
    ``gram`` is the boundary mass there, so that
    ``(R u) @ gram @ (R u) = int_window |u|^2``.
    """

    interval: tuple[float, float]
    edges: np.ndarray
    nodes: np.ndarray
    restriction: sp.csr_matrix
    gram: sp.csr_matrix

    @property
    def size(self) -> int:
        return self.restriction.shape[0]

    @property
    def measure(self) -> float:
        return float(self.gram.sum() / 2)

    def labels(self, spaces: FunctionSpaces) -> list[str]:
        ys = spaces.nodes[self.nodes, 1]
        return [f"u{c}@y={y:.6g}" for c in ("x", "y") for y in ys]


def trace_matrix(mesh: Mesh, spaces: FunctionSpaces, interval=None) -> TraceOperator:
    """Measurement window: inlet edges whose midpoints fall in ``interval`` (y-range)."""
    lo, hi = (0.0, mesh.height) if interval is None else (float(interval[0]), float(interval[1]))
    if not hi > lo:
        raise ValueError("measurement interval must be nonempty")
    inlet = spaces.boundary_edges(BoundaryTag.inlet())
    mids = mesh.vertices[mesh.boundary[inlet]][..., 1].mean(axis=1)
    tol = 1e-12 * mesh.height
    chosen = inlet[(mids >= lo - tol) & (mids <= hi + tol)]
    if len(chosen) == 0:
        raise ValueError(f"measurement interval [{lo}, {hi}] contains no inlet edge")
    nodes = np.unique(spaces.boundary_nodes[chosen])
    nodes = nodes[np.argsort(spaces.nodes[nodes, 1], kind="stable")]
    n = len(nodes)
    dofs = np.concatenate([nodes, spaces.n_nodes + nodes])
    R = sp.csr_matrix((np.ones(2 * n), (np.arange(2 * n), dofs)), shape=(2 * n, spaces.n_velocity))
    Ms = _edge_mass(spaces, chosen)[nodes][:, nodes]
    gram = sp.block_diag([Ms, Ms], format="csr")
    ys = mesh.vertices[mesh.boundary[chosen]][..., 1]
    return TraceOperator((float(ys.min()), float(ys.max())), chosen, nodes, R, gram)
