"""
Triangular meshes of convex polygons.

The mesher samples the polygon boundary uniformly, fills the interior with a
hexagonal lattice, triangulates with Delaunay and relaxes the interior nodes
by Laplacian smoothing.  Everything is deterministic; no random numbers are
drawn.

Text format (0-based indices)::

    nodes N
    x y            (N lines)
    triangles M
    i j k          (M lines, counterclockwise)
    boundary_edges B
    i j            (B lines, interior on the left)
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from scipy.spatial import Delaunay

from .errors import InvalidInputError, MeshingError, OutOfDomainError

MIN_ANGLE_DEG = 20.0


def _signed_area2(a, b, c):
    """Twice the signed area of triangles (a, b, c); arrays of shape (..., 2)."""
    return (b[..., 0] - a[..., 0]) * (c[..., 1] - a[..., 1]) - (b[..., 1] - a[..., 1]) * (
        c[..., 0] - a[..., 0]
    )


@dataclass(frozen=True)
class PolygonSpec:
    """Convex polygon, vertices stored counterclockwise.

    Clockwise input is accepted and reversed.
    """

    vertices: np.ndarray

    def __post_init__(self):
        v = np.array(self.vertices, dtype=float)
        if v.ndim != 2 or v.shape[1] != 2 or len(v) < 3:
            raise InvalidInputError("polygon needs at least 3 vertices of dimension 2")
        if not np.all(np.isfinite(v)):
            raise InvalidInputError("polygon vertices must be finite")
        if _shoelace(v) < 0:
            v = v[::-1].copy()
        cross = _signed_area2(v, np.roll(v, -1, axis=0), np.roll(v, -2, axis=0))
        scale = np.ptp(v, axis=0).max() ** 2
        if _shoelace(v) <= 1e-14 * scale:
            raise InvalidInputError("degenerate polygon (zero area)")
        if np.any(cross <= 1e-12 * scale):
            raise InvalidInputError(
                "polygon must be strictly convex with no repeated or collinear vertices"
            )
        # convex turns plus total turning of 2*pi rule out self-intersection
        edges = np.roll(v, -1, axis=0) - v
        ang = np.arctan2(edges[:, 1], edges[:, 0])
        turn = np.mod(np.diff(np.append(ang, ang[0])), 2 * np.pi)
        if not np.isclose(turn.sum(), 2 * np.pi):
            raise InvalidInputError("polygon is self-intersecting")
        v.setflags(write=False)
        object.__setattr__(self, "vertices", v)

    @property
    def area(self) -> float:
        return _shoelace(self.vertices)

    @property
    def perimeter(self) -> float:
        e = np.roll(self.vertices, -1, axis=0) - self.vertices
        return float(np.hypot(e[:, 0], e[:, 1]).sum())

    @property
    def diameter(self) -> float:
        d = self.vertices[:, None, :] - self.vertices[None, :, :]
        return float(np.sqrt((d**2).sum(-1)).max())

    @property
    def centroid(self) -> np.ndarray:
        v = self.vertices
        w = np.roll(v, -1, axis=0)
        cr = v[:, 0] * w[:, 1] - w[:, 0] * v[:, 1]
        a = cr.sum() / 2
        return np.array([((v[:, 0] + w[:, 0]) * cr).sum(), ((v[:, 1] + w[:, 1]) * cr).sum()]) / (
            6 * a
        )

    def inward_distance(self, points) -> np.ndarray:
        """Distance from each point to the boundary, negative outside."""
        p = np.atleast_2d(np.asarray(points, dtype=float))
        v = self.vertices
        e = np.roll(v, -1, axis=0) - v
        length = np.hypot(e[:, 0], e[:, 1])
        inward = np.stack([-e[:, 1], e[:, 0]], axis=1) / length[:, None]
        d = ((p[:, None, :] - v[None, :, :]) * inward[None, :, :]).sum(-1)
        return d.min(axis=1)


def _shoelace(v):
    w = np.roll(v, -1, axis=0)
    return float(0.5 * (v[:, 0] * w[:, 1] - w[:, 0] * v[:, 1]).sum())


def trapezoid() -> PolygonSpec:
    """Trapezoid with vertices (0,0), (0,1), (1.5,0.5), (1.5,0)."""
    return PolygonSpec([(0.0, 0.0), (0.0, 1.0), (1.5, 0.5), (1.5, 0.0)])


@dataclass(frozen=True)
class Mesh:
    """Conforming P1 triangulation.

    Arrays are made read-only on construction so a mesh can be shared freely.
    """

    nodes: np.ndarray
    triangles: np.ndarray
    boundary_edges: np.ndarray
    _cache: dict = field(default_factory=dict, init=False, repr=False, compare=False)

    def __post_init__(self):
        nodes = np.array(self.nodes, dtype=float).reshape(-1, 2)
        tris = np.array(self.triangles, dtype=np.int64).reshape(-1, 3)
        bedges = np.array(self.boundary_edges, dtype=np.int64).reshape(-1, 2)
        for a in (nodes, tris, bedges):
            a.setflags(write=False)
        object.__setattr__(self, "nodes", nodes)
        object.__setattr__(self, "triangles", tris)
        object.__setattr__(self, "boundary_edges", bedges)

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    @property
    def n_triangles(self) -> int:
        return len(self.triangles)

    def signed_areas(self) -> np.ndarray:
        p = self.nodes[self.triangles]
        return 0.5 * _signed_area2(p[:, 0], p[:, 1], p[:, 2])

    @property
    def area(self) -> float:
        return float(self.signed_areas().sum())

    def edges(self) -> np.ndarray:
        """Unique undirected edges, sorted, shape (E, 2)."""
        if "edges" not in self._cache:
            self._cache["edges"] = np.unique(
                np.sort(self.triangles[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2), axis=1), axis=0
            )
        return self._cache["edges"]

    def boundary_nodes(self) -> np.ndarray:
        return np.unique(self.boundary_edges)

    def min_angle(self) -> float:
        """Smallest interior angle over all triangles, in degrees."""
        return float(triangle_angles(self.nodes, self.triangles).min())

    def locate(self, point) -> tuple[int, np.ndarray]:
        """Containing triangle and barycentric weights of ``point``.

        Points on shared edges or vertices go to the lowest-index triangle.
        """
        x = np.asarray(point, dtype=float)
        p = self.nodes[self.triangles]
        a2 = _signed_area2(p[:, 0], p[:, 1], p[:, 2])
        l0 = _signed_area2(x, p[:, 1], p[:, 2]) / a2
        l1 = _signed_area2(p[:, 0], x, p[:, 2]) / a2
        l2 = 1.0 - l0 - l1
        lam = np.stack([l0, l1, l2], axis=1)
        tol = 1e-12
        inside = np.flatnonzero(np.all(lam >= -tol, axis=1))
        if len(inside) == 0:
            raise OutOfDomainError(f"point {tuple(x)} lies outside the mesh")
        t = int(inside[0])
        w = np.clip(lam[t], 0.0, None)
        return t, w / w.sum()

    # -- text format ----------------------------------------------------------

    def to_text(self) -> str:
        lines = [f"nodes {self.n_nodes}"]
        lines += [f"{x!r} {y!r}" for x, y in self.nodes.tolist()]
        lines.append(f"triangles {self.n_triangles}")
        lines += [f"{i} {j} {k}" for i, j, k in self.triangles.tolist()]
        lines.append(f"boundary_edges {len(self.boundary_edges)}")
        lines += [f"{i} {j}" for i, j in self.boundary_edges.tolist()]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "Mesh":
        tokens = text.split()
        pos = 0

        def header(name):
            nonlocal pos
            if pos + 1 >= len(tokens) or tokens[pos] != name:
                raise InvalidInputError(f"expected '{name} <count>' in mesh file")
            count = int(tokens[pos + 1])
            pos += 2
            return count

        def block(count, width, dtype):
            nonlocal pos
            vals = tokens[pos : pos + count * width]
            if len(vals) != count * width:
                raise InvalidInputError("mesh file truncated")
            pos += count * width
            return np.array(vals, dtype=dtype).reshape(count, width)

        try:
            nodes = block(header("nodes"), 2, float)
            tris = block(header("triangles"), 3, np.int64)
            bedges = block(header("boundary_edges"), 2, np.int64)
        except ValueError as exc:
            raise InvalidInputError(f"malformed mesh file: {exc}") from exc
        return cls(nodes, tris, bedges)

    def save(self, path) -> None:
        Path(path).write_text(self.to_text())

    @classmethod
    def load(cls, path) -> "Mesh":
        return cls.from_text(Path(path).read_text())


def triangle_angles(nodes, triangles) -> np.ndarray:
    """Interior angles (degrees) of each triangle, shape (M, 3)."""
    p = nodes[triangles]
    out = np.empty(triangles.shape)
    for k in range(3):
        a = p[:, (k + 1) % 3] - p[:, k]
        b = p[:, (k + 2) % 3] - p[:, k]
        cross = a[:, 0] * b[:, 1] - a[:, 1] * b[:, 0]
        dot = (a * b).sum(1)
        out[:, k] = np.degrees(np.arctan2(np.abs(cross), dot))
    return out


def _boundary_from_triangles(triangles):
    """Edges used by exactly one triangle, oriented as in that triangle."""
    directed = triangles[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2)
    key = np.sort(directed, axis=1)
    _, inv, counts = np.unique(key, axis=0, return_inverse=True, return_counts=True)
    return directed[counts[inv.ravel()] == 1]


def _sample_boundary(polygon: PolygonSpec, h: float) -> np.ndarray:
    v = polygon.vertices
    pts = []
    for a, b in zip(v, np.roll(v, -1, axis=0)):
        m = max(1, int(round(np.hypot(*(b - a)) / h)))
        s = np.arange(m)[:, None] / m
        pts.append(a + s * (b - a))
    return np.vstack(pts)


def _lattice(polygon: PolygonSpec, h: float) -> np.ndarray:
    lo = polygon.vertices.min(0)
    hi = polygon.vertices.max(0)
    dy = h * np.sqrt(3) / 2
    rows = np.arange(lo[1] + dy / 2, hi[1], dy)
    pts = []
    for r, y in enumerate(rows):
        x = np.arange(lo[0] + (h / 2 if r % 2 else h / 4), hi[0], h)
        pts.append(np.column_stack([x, np.full_like(x, y)]))
    if not pts:
        return np.empty((0, 2))
    pts = np.vstack(pts)
    return pts[polygon.inward_distance(pts) > 0.55 * h]


def _delaunay(points: np.ndarray) -> np.ndarray:
    tri = Delaunay(points, qhull_options="Qbb Qc Qz Q12")
    if len(tri.coplanar):
        raise MeshingError(
            "Delaunay dropped input points", {"coplanar": tri.coplanar[:, 0].tolist()}
        )
    t = tri.simplices.astype(np.int64)
    p = points[t]
    a2 = _signed_area2(p[:, 0], p[:, 1], p[:, 2])
    t[a2 < 0] = t[a2 < 0][:, [0, 2, 1]]
    return t


def triangulate(
    polygon: PolygonSpec, target_edge_length: float, smoothing_iters: int = 8
) -> Mesh:
    """Mesh ``polygon`` with edges of roughly ``target_edge_length``.

    Raises
    ------
    InvalidInputError
        Nonpositive or non-finite edge length.
    MeshingError
        If the finished mesh has an angle below 20 degrees or does not cover
        the polygon.
    """
    h = float(target_edge_length)
    if not np.isfinite(h) or h <= 0:
        raise InvalidInputError("target_edge_length must be positive")
    if polygon.diameter / h > 5e3:
        raise InvalidInputError("target_edge_length too small for this polygon")

    bpts = _sample_boundary(polygon, h)
    ipts = _lattice(polygon, h)
    nb = len(bpts)
    pts = np.vstack([bpts, ipts])

    tris = _delaunay(pts)
    for _ in range(smoothing_iters if len(ipts) else 0):
        edges = np.unique(np.sort(tris[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2), axis=1), axis=0)
        both = np.vstack([edges, edges[:, ::-1]])
        deg = np.bincount(both[:, 0], minlength=len(pts))
        acc = np.zeros_like(pts)
        np.add.at(acc, both[:, 0], pts[both[:, 1]])
        new = acc / deg[:, None]
        pts[nb:] = new[nb:]
        tris = _delaunay(pts)

    areas = 0.5 * _signed_area2(*(pts[tris][:, k] for k in range(3)))
    keep = areas > 1e-12 * h * h
    tris = tris[keep]
    mesh = Mesh(pts, tris, _boundary_from_triangles(tris))

    diag = {
        "n_nodes": mesh.n_nodes,
        "n_triangles": mesh.n_triangles,
        "min_angle": mesh.min_angle(),
        "area": mesh.area,
        "polygon_area": polygon.area,
    }
    if abs(mesh.area - polygon.area) > 1e-12 * polygon.area:
        raise MeshingError("triangles do not cover the polygon", diag)
    if diag["min_angle"] < MIN_ANGLE_DEG:
        raise MeshingError(
            f"minimum angle {diag['min_angle']:.2f} deg below {MIN_ANGLE_DEG} deg", diag
        )
    return mesh


@dataclass(frozen=True)
class Violation:
    invariant: str
    index: int
    detail: str = ""


def validate(mesh: Mesh, polygon: Optional[PolygonSpec] = None) -> list[Violation]:
    """Check the mesh invariants; an empty list means the mesh is valid.

    Area coverage is only checked when ``polygon`` is given.
    """
    out: list[Violation] = []
    n = mesh.n_nodes
    tris, bedges = mesh.triangles, mesh.boundary_edges

    bad_t = np.flatnonzero(np.any((tris < 0) | (tris >= n), axis=1))
    bad_e = np.flatnonzero(np.any((bedges < 0) | (bedges >= n), axis=1))
    out += [Violation("index-range", int(i), "triangle") for i in bad_t]
    out += [Violation("index-range", int(i), "boundary edge") for i in bad_e]
    if len(bad_t) or len(bad_e):
        return out

    for i in np.flatnonzero(mesh.signed_areas() <= 0):
        out.append(Violation("positive-area", int(i), "triangle is clockwise or degenerate"))
    for i in np.flatnonzero(
        (tris[:, 0] == tris[:, 1]) | (tris[:, 1] == tris[:, 2]) | (tris[:, 0] == tris[:, 2])
    ):
        out.append(Violation("distinct-vertices", int(i)))

    directed = tris[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2)
    count: dict[tuple[int, int], int] = {}
    for a, b in np.sort(directed, axis=1).tolist():
        count[(a, b)] = count.get((a, b), 0) + 1
    dset = set(map(tuple, directed.tolist()))
    listed = set()
    for i, (a, b) in enumerate(bedges.tolist()):
        key = (min(a, b), max(a, b))
        listed.add(key)
        c = count.get(key, 0)
        if c != 1:
            out.append(
                Violation("edge-incidence", i, f"boundary edge ({a},{b}) in {c} triangles")
            )
        elif (a, b) not in dset:
            out.append(Violation("boundary-orientation", i, f"edge ({a},{b}) not outward"))
    for t, (a, b) in enumerate(directed.tolist()):
        key = (min(a, b), max(a, b))
        c = count[key]
        if c > 2 or (c == 1 and key not in listed):
            out.append(
                Violation("edge-incidence", t // 3, f"edge ({a},{b}) in {c} triangles")
            )
            count[key] = 0  # report each edge once

    if polygon is not None:
        total = float(mesh.signed_areas().sum())
        if abs(total - polygon.area) > 1e-12 * polygon.area:
            out.append(Violation("area-coverage", -1, f"{total!r} vs {polygon.area!r}"))
    return out
