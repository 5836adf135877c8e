"""Structured triangulations of a rectangular channel with tagged walls.

The channel is ``[0, L] x [0, H]``. The left wall is the inlet, the right
wall is the outlet (split into ``N`` contiguous segments numbered from the
bottom) and the top and bottom walls are lateral no-slip walls.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

__all__ = [
    "BoundaryTag",
    "BoundaryEdge",
    "Mesh",
    "build_channel_mesh",
    "refine",
    "boundary_edges_by_tag",
]


@dataclass(frozen=True)
class BoundaryTag:
    """Boundary label: ``"lateral"``, ``"inlet"`` or ``"outlet"`` with a segment index."""

    kind: str
    segment: int = 0

    def __post_init__(self):
        if self.kind not in ("lateral", "inlet", "outlet"):
            raise ValueError(f"unknown boundary kind {self.kind!r}")
        if self.kind == "outlet" and self.segment < 1:
            raise ValueError("outlet segments are numbered from 1")
        if self.kind != "outlet" and self.segment != 0:
            raise ValueError("only outlet tags carry a segment index")

    @classmethod
    def lateral(cls) -> "BoundaryTag":
        return cls("lateral")

    @classmethod
    def inlet(cls) -> "BoundaryTag":
        return cls("inlet")

    @classmethod
    def outlet(cls, i: int) -> "BoundaryTag":
        return cls("outlet", i)

    def __str__(self):
        return f"outlet{self.segment}" if self.kind == "outlet" else self.kind


class BoundaryEdge(NamedTuple):
    vertices: tuple[int, int]
    tag: BoundaryTag
    normal: np.ndarray
    length: float


class Mesh:
    """Immutable triangle mesh of the channel.

    Attributes
    ----------
    vertices : ndarray, shape (nv, 2)
    triangles : ndarray, shape (nt, 3)
        Counter-clockwise vertex triples.
    boundary : ndarray, shape (nb, 2)
        Vertex pairs of boundary edges.
    boundary_tags : list of BoundaryTag
    length, height : float
    n_segments : int
        Number of outlet segments.
    """

    def __init__(self, vertices, triangles, boundary, boundary_tags, length, height, n_segments):
        self.vertices = np.asarray(vertices, dtype=float)
        self.triangles = np.asarray(triangles, dtype=np.int64)
        self.boundary = np.asarray(boundary, dtype=np.int64).reshape(-1, 2)
        self.boundary_tags = list(boundary_tags)
        self.length = float(length)
        self.height = float(height)
        self.n_segments = int(n_segments)
        for arr in (self.vertices, self.triangles, self.boundary):
            arr.setflags(write=False)
        if np.any(self.areas <= 0.0):
            raise ValueError("mesh contains degenerate or clockwise triangles")
        self._edges = None

    # geometry -----------------------------------------------------------
    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_triangles(self) -> int:
        return len(self.triangles)

    @property
    def areas(self) -> np.ndarray:
        p = self.vertices[self.triangles]
        d1 = p[:, 1] - p[:, 0]
        d2 = p[:, 2] - p[:, 0]
        return 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])

    @property
    def h(self) -> float:
        """Largest edge length."""
        p = self.vertices[self.edges]
        return float(np.max(np.linalg.norm(p[:, 1] - p[:, 0], axis=1)))

    @property
    def edges(self) -> np.ndarray:
        """Unique undirected edges as sorted vertex pairs, shape (ne, 2)."""
        if self._edges is None:
            self._edges, self._tri_edges = _edge_tables(self.triangles)
        return self._edges

    @property
    def triangle_edges(self) -> np.ndarray:
        """Edge index of local edges (v0,v1), (v1,v2), (v2,v0) per triangle."""
        self.edges
        return self._tri_edges

    def boundary_edge_index(self) -> np.ndarray:
        """Global edge index of each boundary edge, aligned with ``boundary``."""
        lookup = {tuple(e): k for k, e in enumerate(self.edges)}
        return np.array([lookup[tuple(sorted(e))] for e in self.boundary], dtype=np.int64)

    def boundary_normals(self) -> np.ndarray:
        p = self.vertices[self.boundary]
        t = p[:, 1] - p[:, 0]
        n = np.column_stack([t[:, 1], -t[:, 0]])
        return n / np.linalg.norm(n, axis=1)[:, None]

    def boundary_lengths(self) -> np.ndarray:
        p = self.vertices[self.boundary]
        return np.linalg.norm(p[:, 1] - p[:, 0], axis=1)

    def arc_length(self, points) -> np.ndarray:
        """Counter-clockwise perimeter coordinate starting at the origin."""
        pts = np.atleast_2d(points)
        L, H = self.length, self.height
        x, y = pts[:, 0], pts[:, 1]
        tol = 1e-12 * max(L, H)
        s = np.full(len(pts), np.nan)
        bottom = np.abs(y) <= tol
        right = (np.abs(x - L) <= tol) & ~bottom
        top = (np.abs(y - H) <= tol) & ~right & ~bottom
        left = (np.abs(x) <= tol) & ~top & ~bottom
        s[bottom] = x[bottom]
        s[right] = L + y[right]
        s[top] = L + H + (L - x[top])
        s[left] = 2 * L + H + (H - y[left])
        return s

    def boundary_edge(self, k: int) -> BoundaryEdge:
        a, b = self.boundary[k]
        return BoundaryEdge(
            (int(a), int(b)),
            self.boundary_tags[k],
            self.boundary_normals()[k],
            float(self.boundary_lengths()[k]),
        )

    def to_json(self) -> str:
        """Plain-text export for debugging and plotting."""
        return json.dumps(
            {
                "length": self.length,
                "height": self.height,
                "n_segments": self.n_segments,
                "vertices": self.vertices.tolist(),
                "triangles": self.triangles.tolist(),
                "boundary_edges": [
                    {"vertices": [int(a), int(b)], "tag": str(tag), "normal": nu.tolist()}
                    for (a, b), tag, nu in zip(self.boundary, self.boundary_tags, self.boundary_normals())
                ],
            }
        )

    def __repr__(self):
        return (
            f"Mesh(L={self.length}, H={self.height}, vertices={self.n_vertices}, "
            f"triangles={self.n_triangles}, N={self.n_segments})"
        )


def _edge_tables(triangles):
    local = np.array([[0, 1], [1, 2], [2, 0]])
    all_edges = np.sort(triangles[:, local].reshape(-1, 2), axis=1)
    edges, inverse = np.unique(all_edges, axis=0, return_inverse=True)
    return edges, inverse.reshape(-1, 3)


def build_channel_mesh(L: float, H: float, nx: int, ny: int, N: int = 1) -> Mesh:
    """Diagonal-split structured mesh of ``[0, L] x [0, H]``.

    Parameters
    ----------
    L, H : float
        Channel length and height.
    nx, ny : int
        Cells along x and y.
    N : int
        Number of outlet segments; must divide ``ny``.
    """
    if not (L > 0 and H > 0):
        raise ValueError("channel dimensions must be positive")
    if nx < 1 or ny < 1:
        raise ValueError("nx and ny must be at least 1")
    if not 1 <= N <= ny:
        raise ValueError("outlet segment count must satisfy 1 <= N <= ny")
    if ny % N != 0:
        raise ValueError(f"ny={ny} is not divisible by N={N}: outlet segments would split an edge")

    xs = np.linspace(0.0, L, nx + 1)
    ys = np.linspace(0.0, H, ny + 1)
    X, Y = np.meshgrid(xs, ys, indexing="ij")
    vertices = np.column_stack([X.ravel(), Y.ravel()])

    def vid(i, j):
        return i * (ny + 1) + j

    tris = []
    for i in range(nx):
        for j in range(ny):
            a, b, c, d = vid(i, j), vid(i + 1, j), vid(i + 1, j + 1), vid(i, j + 1)
            tris.append((a, b, c))
            tris.append((a, c, d))

    boundary, tags = [], []
    for i in range(nx):
        boundary.append((vid(i, 0), vid(i + 1, 0)))
        tags.append(BoundaryTag.lateral())
    per_segment = ny // N
    for j in range(ny):
        boundary.append((vid(nx, j), vid(nx, j + 1)))
        tags.append(BoundaryTag.outlet(j // per_segment + 1))
    for i in range(nx, 0, -1):
        boundary.append((vid(i, ny), vid(i - 1, ny)))
        tags.append(BoundaryTag.lateral())
    for j in range(ny, 0, -1):
        boundary.append((vid(0, j), vid(0, j - 1)))
        tags.append(BoundaryTag.inlet())

    return Mesh(vertices, tris, boundary, tags, L, H, N)


def refine(mesh: Mesh) -> Mesh:
    """Uniform red refinement: every triangle is split into four."""
    edges = mesh.edges
    tri_edges = mesh.triangle_edges
    nv = mesh.n_vertices
    mids = 0.5 * (mesh.vertices[edges[:, 0]] + mesh.vertices[edges[:, 1]])
    vertices = np.vstack([mesh.vertices, mids])

    t = mesh.triangles
    m = nv + tri_edges  # midpoints of (v0,v1), (v1,v2), (v2,v0)
    tris = np.concatenate(
        [
            np.column_stack([t[:, 0], m[:, 0], m[:, 2]]),
            np.column_stack([m[:, 0], t[:, 1], m[:, 1]]),
            np.column_stack([m[:, 2], m[:, 1], t[:, 2]]),
            np.column_stack([m[:, 0], m[:, 1], m[:, 2]]),
        ]
    )

    bidx = mesh.boundary_edge_index()
    boundary, tags = [], []
    for (a, b), k, tag in zip(mesh.boundary, bidx, mesh.boundary_tags):
        mid = nv + k
        boundary += [(a, mid), (mid, b)]
        tags += [tag, tag]

    return Mesh(vertices, tris, boundary, tags, mesh.length, mesh.height, mesh.n_segments)


def boundary_edges_by_tag(mesh: Mesh, tag: BoundaryTag) -> list[BoundaryEdge]:
    """Boundary edges carrying ``tag``, sorted by perimeter arc length."""
    if tag.kind == "outlet" and tag.segment > mesh.n_segments:
        raise ValueError(f"outlet segment {tag.segment} out of range 1..{mesh.n_segments}")
    idx = [k for k, t in enumerate(mesh.boundary_tags) if t == tag]
    if not idx:
        return []
    p = mesh.vertices[mesh.boundary[idx]]
    s = mesh.arc_length(p.mean(axis=1))
    normals = mesh.boundary_normals()
    lengths = mesh.boundary_lengths()
    return [
        BoundaryEdge(tuple(int(v) for v in mesh.boundary[idx[k]]), tag, normals[idx[k]], float(lengths[idx[k]]))
        for k in np.argsort(s, kind="stable")
    ]
