"""Finite-dimensional Robin coefficients on the outlet.

A coefficient is a combination of tensor hat functions: piecewise-linear
hats in time times piecewise-linear hats along each outlet segment. Hats of
different segments do not interact, so functions may jump at segment
interfaces while remaining continuous in time.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .mesh import Mesh

__all__ = [
    "RobinBasis",
    "RobinCoefficient",
    "AdmissibleSet",
    "default_basis",
    "evaluate_q",
    "linf_distance",
    "project_onto_K",
    "sample_K",
]


def _hats(knots, x):
    """Values of all hat functions on ``knots`` at ``x``, shape (len(knots), len(x))."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    knots = np.asarray(knots, dtype=float)
    if len(knots) == 1:
        return np.ones((1, len(x)))  # single-node segment: constant
    eye = np.eye(len(knots))
    return np.array([np.interp(x, knots, row) for row in eye])


class RobinBasis:
    """Tensor hat basis of the coefficient space.

    Parameters
    ----------
    time_knots : array_like
        Increasing knots ``0 = s_0 < ... < s_P = T``.
    segment_knots : sequence of array_like
        Increasing y-coordinates of the spatial nodes on each outlet segment.
    functions : array_like of shape (M, 3), optional
        Rows ``(time index, segment, node)``. Defaults to the full tensor
        product with the time index varying slowest. Repeating a row gives a
        deliberately degenerate basis.
    segment_bounds : sequence of (float, float), optional
        y-extent of every segment; defaults to the first and last knot.
        Needed when the knots do not reach the segment ends, e.g. a single
        midpoint node per segment.
    """

    def __init__(self, time_knots, segment_knots, functions=None, segment_bounds=None):
        self.time_knots = np.asarray(time_knots, dtype=float)
        self.segment_knots = [np.asarray(k, dtype=float) for k in segment_knots]
        if len(self.time_knots) < 2 or np.any(np.diff(self.time_knots) <= 0) or self.time_knots[0] != 0.0:
            raise ValueError("need at least two increasing time knots starting at 0")
        for k in self.segment_knots:
            if len(k) < 1 or np.any(np.diff(k) <= 0):
                raise ValueError("segment knots must be increasing")
        if segment_bounds is None:
            segment_bounds = [(k[0], k[-1]) for k in self.segment_knots]
        self.segment_bounds = [(float(a), float(b)) for a, b in segment_bounds]
        if len(self.segment_bounds) != len(self.segment_knots):
            raise ValueError("one (lower, upper) bound pair per segment is required")
        for (a, b), k in zip(self.segment_bounds, self.segment_knots):
            if not (a <= k[0] and k[-1] <= b):
                raise ValueError("segment knots must lie inside the segment bounds")
        # flat list of (segment, node) spatial functions
        self.space_index = [(i, a) for i, k in enumerate(self.segment_knots) for a in range(len(k))]
        if functions is None:
            functions = [(p, i, a) for p in range(len(self.time_knots)) for (i, a) in self.space_index]
        self.functions = np.asarray(functions, dtype=np.int64).reshape(-1, 3)
        lookup = {sa: s for s, sa in enumerate(self.space_index)}
        self._space_of = np.array([lookup[(i, a)] for _, i, a in self.functions], dtype=np.int64)

    @property
    def final_time(self) -> float:
        return float(self.time_knots[-1])

    @property
    def n_segments(self) -> int:
        return len(self.segment_knots)

    @property
    def n_space(self) -> int:
        return len(self.space_index)

    def __len__(self):
        return len(self.functions)

    @property
    def space_of(self) -> np.ndarray:
        """Spatial-function index of every basis function."""
        return self._space_of

    def is_tensor(self) -> bool:
        full = [(p, i, a) for p in range(len(self.time_knots)) for (i, a) in self.space_index]
        return len(full) == len(self.functions) and np.array_equal(np.asarray(full), self.functions)

    def time_weights(self, t) -> np.ndarray:
        """Time-hat value of every basis function at scalar ``t``, shape (M,)."""
        th = _hats(self.time_knots, [t])[:, 0]
        return th[self.functions[:, 0]]

    def space_values(self, segment: int, y) -> np.ndarray:
        """Spatial hats of segment ``segment`` (0-based) at ``y``, shape (n_nodes, len(y))."""
        return _hats(self.segment_knots[segment], y)

    def values(self, t, segment: int, y) -> np.ndarray:
        """All basis functions at time ``t`` and points ``y`` of one segment, shape (M, len(y))."""
        y = np.atleast_1d(y)
        out = np.zeros((len(self), len(y)))
        sv = self.space_values(segment, y)
        tw = self.time_weights(t)
        on = self.functions[:, 1] == segment
        out[on] = tw[on, None] * sv[self.functions[on, 2]]
        return out

    def space_weights(self, coeffs, t) -> np.ndarray:
        """Collapse coefficients at time ``t`` onto spatial functions, shape (n_space,)."""
        w = np.asarray(coeffs, dtype=float) * self.time_weights(t)
        return np.bincount(self._space_of, weights=w, minlength=self.n_space)

    def duplicated(self, j: int) -> "RobinBasis":
        """Copy with basis function ``j`` appended a second time."""
        return RobinBasis(
            self.time_knots, self.segment_knots, np.vstack([self.functions, self.functions[j]]), self.segment_bounds
        )

    def to_dict(self) -> dict:
        return {
            "time_knots": self.time_knots.tolist(),
            "segment_knots": [k.tolist() for k in self.segment_knots],
            "functions": self.functions.tolist(),
            "segment_bounds": [list(b) for b in self.segment_bounds],
        }

    @classmethod
    def from_dict(cls, d) -> "RobinBasis":
        return cls(d["time_knots"], d["segment_knots"], d.get("functions"), d.get("segment_bounds"))

    def __eq__(self, other):
        if not isinstance(other, RobinBasis):
            return NotImplemented
        return (
            np.array_equal(self.time_knots, other.time_knots)
            and len(self.segment_knots) == len(other.segment_knots)
            and all(np.array_equal(a, b) for a, b in zip(self.segment_knots, other.segment_knots))
            and np.array_equal(self.functions, other.functions)
            and self.segment_bounds == other.segment_bounds
        )

    __hash__ = None

    def __repr__(self):
        return f"RobinBasis(M={len(self)}, time_knots={len(self.time_knots)}, segments={self.n_segments})"


def default_basis(mesh: Mesh, T: float, n_time_knots: int = 2, space_nodes: int | None = None) -> RobinBasis:
    """Tensor hat basis on the outlet segments of ``mesh``.

    ``space_nodes=None`` places a spatial node at every outlet vertex of the
    mesh. An integer ``k`` gives ``k`` equispaced nodes per segment
    (the segment midpoint when ``k == 1``, i.e. piecewise constant in space).
    """
    if n_time_knots < 2:
        raise ValueError("need at least two time knots")
    if space_nodes is not None and space_nodes < 1:
        raise ValueError("space_nodes must be at least 1")
    time_knots = np.linspace(0.0, T, n_time_knots)
    L = mesh.length
    segs, bounds = [], []
    for i in range(1, mesh.n_segments + 1):
        on = [k for k, t in enumerate(mesh.boundary_tags) if t.kind == "outlet" and t.segment == i]
        ys = np.unique(mesh.vertices[mesh.boundary[on]][..., 1])
        assert np.allclose(mesh.vertices[mesh.boundary[on]][..., 0], L)
        bounds.append((ys[0], ys[-1]))
        if space_nodes == 1:
            ys = np.array([0.5 * (ys[0] + ys[-1])])
        elif space_nodes is not None:
            ys = np.linspace(ys[0], ys[-1], space_nodes)
        segs.append(ys)
    return RobinBasis(time_knots, segs, segment_bounds=bounds)


@dataclass(frozen=True, eq=False)
class RobinCoefficient:
    basis: RobinBasis
    coeffs: np.ndarray = field(repr=False)

    def __post_init__(self):
        c = np.array(self.coeffs, dtype=float).ravel()
        if len(c) != len(self.basis):
            raise ValueError(f"expected {len(self.basis)} coefficients, got {len(c)}")
        c.setflags(write=False)
        object.__setattr__(self, "coeffs", c)

    def __call__(self, t, x):
        return evaluate_q(self, t, x)

    def __add__(self, other):
        _check_same_basis(self, other)
        return RobinCoefficient(self.basis, self.coeffs + other.coeffs)

    def __sub__(self, other):
        _check_same_basis(self, other)
        return RobinCoefficient(self.basis, self.coeffs - other.coeffs)

    def __mul__(self, alpha):
        return RobinCoefficient(self.basis, float(alpha) * self.coeffs)

    __rmul__ = __mul__

    def with_coeffs(self, coeffs) -> "RobinCoefficient":
        return RobinCoefficient(self.basis, coeffs)

    def to_json(self) -> str:
        return json.dumps({**self.basis.to_dict(), "coeffs": self.coeffs.tolist()})

    @classmethod
    def from_json(cls, text: str) -> "RobinCoefficient":
        d = json.loads(text)
        return cls(RobinBasis.from_dict(d), d["coeffs"])

    @classmethod
    def constant(cls, basis: RobinBasis, value: float) -> "RobinCoefficient":
        return cls(basis, np.full(len(basis), float(value)))


def _check_same_basis(q1, q2):
    if q1.basis is not q2.basis and q1.basis != q2.basis:
        raise ValueError("coefficients live on different bases")


def _segment_of(basis: RobinBasis, y):
    for i, (a, b) in enumerate(basis.segment_bounds):
        if a <= y <= b:
            return i
    raise ValueError(f"point y={y} is not on the outlet")


def evaluate_q(q: RobinCoefficient, t: float, x, segment: int | None = None) -> float:
    """Point value of ``q`` at time ``t`` and outlet point ``x = (L, y)``.

    At an interface between two segments the lower segment is used unless
    ``segment`` (1-based) is given.
    """
    T = q.basis.final_time
    if t < -1e-12 * T or t > T * (1 + 1e-12):
        raise ValueError(f"time {t} outside [0, {T}]")
    y = float(np.asarray(x, dtype=float).ravel()[-1])
    i = _segment_of(q.basis, y) if segment is None else segment - 1
    a, b = q.basis.segment_bounds[i]
    if not a - 1e-12 <= y <= b + 1e-12:
        raise ValueError(f"point y={y} is not on outlet segment {i + 1}")
    return float(q.coeffs @ q.basis.values(t, i, [y])[:, 0])


def sample_grid(basis: RobinBasis, refine_factor: int = 10):
    """Dense (t, segment, y) sampling including every knot."""

    def densify(k):
        if len(k) == 1:
            return k
        pts = [np.linspace(a, b, refine_factor + 1)[:-1] for a, b in zip(k[:-1], k[1:])]
        return np.concatenate(pts + [k[-1:]])

    ts = densify(basis.time_knots)
    return ts, [densify(k) for k in basis.segment_knots]


def linf_distance(q1: RobinCoefficient, q2: RobinCoefficient, *, dense: bool = False, refine_factor: int = 10) -> float:
    """Sup-norm distance on the outlet over the whole time interval.

    For the tensor hat basis the maximum is attained at the knots, so it is
    the largest coefficient gap. ``dense=True`` samples instead.
    """
    _check_same_basis(q1, q2)
    d = q1.coeffs - q2.coeffs
    if not dense and q1.basis.is_tensor():
        return float(np.max(np.abs(d))) if len(d) else 0.0
    ts, segs = sample_grid(q1.basis, refine_factor)
    best = 0.0
    for t in ts:
        for i, ys in enumerate(segs):
            best = max(best, float(np.max(np.abs(d @ q1.basis.values(t, i, ys)))))
    return best


@dataclass(frozen=True)
class AdmissibleSet:
    """Coefficient box ``[lower, upper]^M`` with ``lower > 0``."""

    lower: float
    upper: float

    def __post_init__(self):
        if not self.lower > 0:
            raise ValueError("the lower bound must be positive (q >= m > 0)")
        if not self.upper > self.lower:
            raise ValueError("upper bound must exceed the lower bound")

    @property
    def midpoint(self) -> float:
        return 0.5 * (self.lower + self.upper)

    def contains(self, q: RobinCoefficient) -> bool:
        return bool(np.all(q.coeffs >= self.lower) and np.all(q.coeffs <= self.upper))


def project_onto_K(q: RobinCoefficient, K: AdmissibleSet) -> RobinCoefficient:
    return q.with_coeffs(np.clip(q.coeffs, K.lower, K.upper))


def sample_K(K: AdmissibleSet, basis: RobinBasis, count: int, seed: int) -> list[RobinCoefficient]:
    """``count`` independent uniform draws from the box."""
    if count < 1:
        raise ValueError("count must be at least 1")
    rng = np.random.default_rng(seed)
    draws = rng.uniform(K.lower, K.upper, size=(count, len(basis)))
    return [RobinCoefficient(basis, row) for row in draws]
