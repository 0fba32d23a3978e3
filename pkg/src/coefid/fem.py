"""
P1 finite-element assembly on triangles.

Bilinear forms (consistent mass, no lumping):

    M_ij = int phi_i phi_j dx
    K_ij = int k grad phi_i . grad phi_j dx
    B_ij = int_{boundary} g phi_i phi_j ds

Triangle integrals use the three-point mid-edge rule (exact for quadratics),
boundary integrals two-point Gauss.  The three matrices are stored on one
shared CSR pattern, the union of the element stencils, so that time-stepping
matrices can be formed by combining ``data`` arrays directly.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Union

import numpy as np
import scipy.sparse as sp

from .errors import InvalidCoefficientError, InvalidInputError
from .mesh import Mesh

Field = Union[float, Callable[[np.ndarray], np.ndarray]]
TimeField = Union[float, Callable[[np.ndarray, float], np.ndarray]]

# barycentric coordinates of the edge midpoints
_MID_EDGE = np.array([[0.5, 0.5, 0.0], [0.0, 0.5, 0.5], [0.5, 0.0, 0.5]])
_GAUSS2 = np.array([0.5 - 0.5 / np.sqrt(3.0), 0.5 + 0.5 / np.sqrt(3.0)])


def _eval(fun, x, *args) -> np.ndarray:
    if callable(fun):
        flat = x.reshape(-1, 2)
        val = np.asarray(fun(flat, *args), dtype=float)
        return np.broadcast_to(val, flat.shape[:1]).reshape(x.shape[:-1]).astype(float)
    return np.full(x.shape[:-1], float(fun))


@dataclass(frozen=True)
class ProblemSpec:
    """Data of the direct problem.

    Each field is either a constant or a vectorised callable taking points of
    shape ``(m, 2)`` (and time, for ``source``) and returning shape ``(m,)``.
    """

    diffusion: Field = 1.0
    boundary_coeff: Field = 0.0
    source: TimeField = 0.0
    initial: Field = 1.0

    def k(self, x):
        return _eval(self.diffusion, x)

    def g(self, x):
        return _eval(self.boundary_coeff, x)

    def f(self, x, t):
        if callable(self.source):
            return _eval(self.source, x, t)
        return _eval(self.source, x)

    def u0(self, x):
        return _eval(self.initial, x)

    @property
    def source_is_zero(self) -> bool:
        return not callable(self.source) and float(self.source) == 0.0


@dataclass(frozen=True)
class AssembledForms:
    """Mass, stiffness and boundary matrices on a common CSR pattern."""

    M: sp.csr_matrix
    K: sp.csr_matrix
    B: sp.csr_matrix

    @property
    def n(self) -> int:
        return self.M.shape[0]

    def combine(self, mass: float = 0.0, stiff: float = 0.0, bound: float = 0.0) -> sp.csr_matrix:
        """``mass*M + stiff*K + bound*B`` on the shared pattern."""
        data = mass * self.M.data + stiff * self.K.data + bound * self.B.data
        return sp.csr_matrix((data, self.M.indices, self.M.indptr), shape=self.M.shape)


class _Pattern:
    """Maps (row, col) pairs onto the positions of a fixed CSR pattern."""

    def __init__(self, mesh: Mesh):
        n = mesh.n_nodes
        t = mesh.triangles
        rows = np.repeat(t, 3, axis=1).ravel()
        cols = np.tile(t, (1, 3)).ravel()
        self.n = n
        self.keys = np.unique(rows * n + cols)
        self.indices = (self.keys % n).astype(np.int32)
        self.indptr = np.searchsorted(self.keys, np.arange(n + 1) * n).astype(np.int32)

    def build(self, rows, cols, vals) -> sp.csr_matrix:
        keys = np.asarray(rows).ravel() * self.n + np.asarray(cols).ravel()
        pos = np.searchsorted(self.keys, keys)
        if np.any(pos >= len(self.keys)) or np.any(self.keys[pos] != keys):
            raise InvalidInputError("entry outside the element stencil pattern")
        data = np.bincount(pos, weights=np.asarray(vals).ravel(), minlength=len(self.keys))
        return sp.csr_matrix((data, self.indices.copy(), self.indptr.copy()), shape=(self.n, self.n))


def _geometry(mesh: Mesh):
    p = mesh.nodes[mesh.triangles]  # (m, 3, 2)
    d1 = p[:, 1] - p[:, 0]
    d2 = p[:, 2] - p[:, 0]
    det = d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0]
    area = 0.5 * det
    # gradients of the barycentric functions, (m, 3, 2)
    grads = np.empty((len(det), 3, 2))
    grads[:, 1] = np.stack([d2[:, 1], -d2[:, 0]], axis=1) / det[:, None]
    grads[:, 2] = np.stack([-d1[:, 1], d1[:, 0]], axis=1) / det[:, None]
    grads[:, 0] = -grads[:, 1] - grads[:, 2]
    qpts = np.einsum("qa,mad->mqd", _MID_EDGE, p)  # (m, 3, 2)
    return area, grads, qpts


def element_mass(area: float) -> np.ndarray:
    return area / 12.0 * np.array([[2.0, 1.0, 1.0], [1.0, 2.0, 1.0], [1.0, 1.0, 2.0]])


def assemble(mesh: Mesh, spec: ProblemSpec) -> AssembledForms:
    area, grads, qpts = _geometry(mesh)
    t = mesh.triangles
    pat = _Pattern(mesh)
    rows = np.repeat(t, 3, axis=1)
    cols = np.tile(t, (1, 3))

    kq = spec.k(qpts)
    if np.any(~np.isfinite(kq)) or np.any(kq <= 0):
        bad = int(np.flatnonzero(np.any(~(kq > 0), axis=1))[0])
        raise InvalidCoefficientError(f"diffusion coefficient not positive in triangle {bad}")

    w = area[:, None] / 3.0  # quadrature weights
    mass_loc = np.einsum("mq,qa,qb->mab", w, _MID_EDGE, _MID_EDGE)
    kbar = (w * kq).sum(1)
    stiff_loc = kbar[:, None, None] * np.einsum("mad,mbd->mab", grads, grads)

    M = pat.build(rows, cols, mass_loc.reshape(len(t), 9))
    K = pat.build(rows, cols, stiff_loc.reshape(len(t), 9))

    e = mesh.boundary_edges
    if len(e):
        a, b = mesh.nodes[e[:, 0]], mesh.nodes[e[:, 1]]
        length = np.hypot(*(b - a).T)
        s = _GAUSS2
        phi = np.stack([1 - s, s], axis=1)  # (2 points, 2 shape functions)
        xq = a[:, None, :] + s[None, :, None] * (b - a)[:, None, :]
        gq = spec.g(xq)
        if np.any(~np.isfinite(gq)) or np.any(gq < 0):
            raise InvalidCoefficientError("boundary coefficient must be nonnegative")
        bloc = np.einsum("m,mq,qa,qb->mab", length / 2.0, gq, phi, phi)
        er = np.repeat(e, 2, axis=1)
        ec = np.tile(e, (1, 2))
        B = pat.build(er, ec, bloc.reshape(len(e), 4))
    else:
        B = pat.build([], [], [])
    return AssembledForms(M, K, B)


def assemble_load(mesh: Mesh, spec: ProblemSpec, t: float) -> np.ndarray:
    """Nodal vector ``F_i = int f(x, t) phi_i dx``."""
    if spec.source_is_zero:
        return np.zeros(mesh.n_nodes)
    area, _, qpts = _geometry(mesh)
    fq = spec.f(qpts, t)
    return _integrate_against_basis(mesh, area, fq)


def assemble_field_load(mesh: Mesh, fun: Field) -> np.ndarray:
    """Nodal vector ``int fun(x) phi_i dx`` for a time-independent field."""
    area, _, qpts = _geometry(mesh)
    return _integrate_against_basis(mesh, area, _eval(fun, qpts))


def _integrate_against_basis(mesh, area, fq):
    loc = (area[:, None] / 3.0 * fq) @ _MID_EDGE  # (m, 3)
    return np.bincount(mesh.triangles.ravel(), weights=loc.ravel(), minlength=mesh.n_nodes)


# -- observation functionals -------------------------------------------------


@dataclass(frozen=True)
class PointEval:
    x_star: tuple


@dataclass(frozen=True)
class WeightedIntegral:
    """``int u omega dx``; ``omega=None`` means the mean value ``1/|Omega|``."""

    omega: Field | None = None


@dataclass(frozen=True)
class ObservationFunctional:
    kind: object
    r: np.ndarray

    def __call__(self, u) -> float:
        return float(self.r @ u)

    def apply(self, states) -> np.ndarray:
        return np.asarray(states) @ self.r


def build_observation(mesh: Mesh, kind) -> ObservationFunctional:
    """Nodal weight vector ``r`` such that ``r @ U`` evaluates the functional on U."""
    r = np.zeros(mesh.n_nodes)
    if isinstance(kind, PointEval):
        tri, lam = mesh.locate(kind.x_star)
        r[mesh.triangles[tri]] = lam
    elif isinstance(kind, WeightedIntegral):
        omega = kind.omega
        if omega is None:
            omega = 1.0 / mesh.area
        r = assemble_field_load(mesh, omega)
    else:
        raise InvalidInputError(f"unknown observation kind {kind!r}")
    r.setflags(write=False)
    return ObservationFunctional(kind, r)
