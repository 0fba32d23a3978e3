"""
Identification of a time-dependent reaction coefficient p(t).

Every linearized scheme advances one time level by splitting the new state as
``u = y + p w``, where ``y`` and ``w`` solve two elliptic systems with the same
matrix ``A`` and ``p`` follows from the observation ``r @ u = phi``:

    scheme          A                           rhs(y)                          rhs(w)
    first_order     M/tau + K + B               M u/tau + F                     -M u
    crank_nicolson  (1/tau + p_n/2) M + K/2 + B/2  (M/tau - K/2 - B/2) u + F   -M u / 2
    hybrid          (1/tau + p_n/2) M + K + B   M u/tau + F                     -M u / 2

Two independent routes are provided for cross-checking: the exponential
transform ``v = chi u`` (a linear problem for v) and a fixed-point solver for
the fully implicit nonlinear scheme.
"""

from __future__ import annotations

import csv
import enum
import logging
import math
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from .direct import FieldTrajectory, TimeGrid, project_initial
from .errors import (
    DegenerateObservationError,
    IndefiniteSystemError,
    InvalidInputError,
    NoConvergenceError,
    NumericalError,
    StepFailure,
    TransformDegenerateError,
)
from .fem import AssembledForms, ObservationFunctional, ProblemSpec, assemble, assemble_load
from .linalg import DEFAULT_REL_TOL, solve_spd
from .mesh import Mesh

log = logging.getLogger(__name__)


class SchemeKind(str, enum.Enum):
    FIRST_ORDER = "first_order"
    CRANK_NICOLSON = "crank_nicolson"
    HYBRID = "hybrid"


@dataclass
class DecompositionPair:
    y: np.ndarray
    w: np.ndarray


@dataclass
class IdentificationResult:
    """Recovered ``p^1..p^N`` with the reconstructed states ``u^0..u^N``.

    ``p_start`` is the value used for ``p^0`` by schemes that need one.
    Diagnostics are per step; ``residual`` is the relative residual of the
    scheme equation at the accepted ``(u, p)``.
    """

    p_series: np.ndarray
    trajectory: FieldTrajectory
    w_functional: np.ndarray
    residual: np.ndarray
    scheme: str
    p_start: Optional[float] = None
    iterations: Optional[np.ndarray] = None

    @property
    def times(self) -> np.ndarray:
        return self.trajectory.time_grid.times[1:]

    @property
    def w_sign_ok(self) -> bool:
        """True when ``r @ w < 0`` at every step (NaN entries are ignored)."""
        wf = self.w_functional[np.isfinite(self.w_functional)]
        return bool(np.all(wf < 0))

    def errors(self, p_exact) -> np.ndarray:
        return self.p_series - np.asarray(p_exact(self.times), dtype=float)

    def to_csv(self, path, p_exact=None) -> None:
        header = ["t", "p_recovered"] + (["p_exact"] if p_exact is not None else []) + ["w_functional", "residual"]
        ex = np.asarray(p_exact(self.times), dtype=float) if p_exact is not None else None
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh, lineterminator="\n")
            wr.writerow(header)
            for i, t in enumerate(self.times):
                row = [t, self.p_series[i]] + ([ex[i]] if ex is not None else [])
                row += [self.w_functional[i], self.residual[i]]
                wr.writerow([_fmt(v) for v in row])


@dataclass
class TransformState:
    chi_series: np.ndarray
    v_trajectory: np.ndarray


def _fmt(v) -> str:
    v = float(v)
    return "" if math.isnan(v) else format(v, ".17g")


def default_threshold(tau: float, u0) -> float:
    """Degeneracy threshold for ``|r @ w|``: ``1e-14 * scale(u) / tau``."""
    scale = float(np.max(np.abs(u0))) if np.size(u0) else 0.0
    return 1e-14 * (scale if scale > 0 else 1.0) / tau


# -- single-step building blocks ----------------------------------------------


def _system(forms: AssembledForms, tau: float, scheme: SchemeKind, p_n: float):
    """Matrix of the y/w systems and the weight ``c`` in ``rhs(w) = -c M u``."""
    scheme = SchemeKind(scheme)
    if scheme is SchemeKind.FIRST_ORDER:
        return forms.combine(1.0 / tau, 1.0, 1.0), 1.0
    coeff = 1.0 / tau + 0.5 * p_n
    if not coeff > 0:
        raise IndefiniteSystemError(
            f"1/tau + p_n/2 = {coeff:.6g} <= 0; the {scheme.value} system is not SPD"
        )
    if scheme is SchemeKind.CRANK_NICOLSON:
        return forms.combine(coeff, 0.5, 0.5), 0.5
    return forms.combine(coeff, 1.0, 1.0), 0.5


def _y_rhs(forms, u_n, F_next, tau, scheme):
    if SchemeKind(scheme) is SchemeKind.CRANK_NICOLSON:
        return forms.combine(1.0 / tau, -0.5, -0.5) @ u_n + F_next
    return forms.M @ u_n / tau + F_next


def solve_y_first_order(forms, u_n, F_next, tau, rel_tol=DEFAULT_REL_TOL):
    A, _ = _system(forms, tau, SchemeKind.FIRST_ORDER, 0.0)
    return solve_spd(A, forms.M @ u_n / tau + F_next, rel_tol, x0=u_n)


def solve_w_first_order(forms, u_n, tau, rel_tol=DEFAULT_REL_TOL):
    A, _ = _system(forms, tau, SchemeKind.FIRST_ORDER, 0.0)
    return solve_spd(A, -(forms.M @ u_n), rel_tol)


def recover_p(y, w, obs: ObservationFunctional, phi_next: float, threshold: float, step: Optional[int] = None) -> float:
    """``p = (phi - r.y) / (r.w)``; raises if ``|r.w| <= threshold``."""
    rw = obs(w)
    if not abs(rw) > threshold:
        where = f" at step {step}" if step is not None else ""
        raise DegenerateObservationError(
            f"observation of w is {rw:.3e} (threshold {threshold:.3e}){where}", step=step, value=rw
        )
    return (phi_next - obs(y)) / rw


@dataclass
class _StepOutput:
    u: np.ndarray
    p: float
    pair: DecompositionPair
    w_functional: float
    residual: float


def _step(forms, u_n, p_n, F_next, tau, scheme, obs, phi_next, threshold, rel_tol, step=None):
    A, c = _system(forms, tau, scheme, p_n)
    rhs_y = _y_rhs(forms, u_n, F_next, tau, scheme)
    rhs_w = -c * (forms.M @ u_n)
    y = solve_spd(A, rhs_y, rel_tol, x0=u_n)
    w = solve_spd(A, rhs_w, rel_tol)
    p = recover_p(y, w, obs, phi_next, threshold, step)
    u = y + p * w
    res = A @ u - rhs_y - p * rhs_w
    denom = np.linalg.norm(rhs_y)
    rel = float(np.linalg.norm(res) / denom) if denom > 0 else float(np.linalg.norm(res))
    return _StepOutput(u, p, DecompositionPair(y, w), obs(w), rel)


def step_inverse(forms, u_n, p_n, F_next, tau, scheme, obs, phi_next, threshold, rel_tol=DEFAULT_REL_TOL):
    """Advance one level; returns ``(u_next, p_next, DecompositionPair)``."""
    out = _step(forms, u_n, p_n, F_next, tau, scheme, obs, phi_next, threshold, rel_tol)
    return out.u, out.p, out.pair


def scheme_residual(forms, u_n, u_next, p_n, p_next, F_next, tau, scheme) -> float:
    """Relative residual of the assembled scheme equation at ``(u_next, p_next)``."""
    A, c = _system(forms, tau, scheme, p_n)
    rhs = _y_rhs(forms, u_n, F_next, tau, scheme)
    r = A @ u_next + c * p_next * (forms.M @ u_n) - rhs
    return float(np.linalg.norm(r) / np.linalg.norm(rhs))


# -- full runs ------------------------------------------------------------------


def _check_series(phi, grid):
    phi = np.asarray(phi, dtype=float)
    if phi.shape != (grid.N + 1,):
        raise InvalidInputError(f"observation series has shape {phi.shape}, expected ({grid.N + 1},)")
    if not np.all(np.isfinite(phi)):
        raise InvalidInputError("observation series contains non-finite values")
    return phi


def startup_p0(forms, mesh, spec, grid, obs, phi, method: Union[str, float] = "compatibility", threshold=None,
               rel_tol=DEFAULT_REL_TOL, u0=None, scheme=None) -> float:
    """Starting value ``p^0`` for schemes that reference the previous level.

    ``compatibility``
        Evaluates the semi-discrete equation at t = 0 under the observation,
        ``p^0 = (r.z - phi'(0)) / r.u^0`` with ``M z = F(0) - (K + B) u^0``
        and a one-sided second-order difference for ``phi'(0)``.
    ``first_order``
        p recovered by one first-order step of size tau.  Its O(tau) bias
        persists as an undamped alternating error under Crank-Nicolson.
    ``extrapolated``
        ``2 p(tau) - p(2 tau)`` from two first-order steps.

    ``linear``
        Chooses ``p^0`` so that the scheme's own ``p^0, p^1, p^2`` have zero
        second difference (secant iteration started from ``compatibility``).
        Exact when the data come from the matching direct scheme with p = 0;
        O(tau^2) for smooth p.  Schemes without a ``p^n`` dependence fall
        back to ``compatibility``.

    A number is returned unchanged.
    """
    if not isinstance(method, str):
        return float(method)
    if u0 is None:
        u0 = project_initial(forms, mesh, spec.initial, rel_tol)
    tau = grid.tau
    thr = default_threshold(tau, u0) if threshold is None else threshold

    def one_step(h, phi_h):
        F = assemble_load(mesh, spec, h)
        out = _step(forms, u0, 0.0, F, h, SchemeKind.FIRST_ORDER, obs, phi_h, thr, rel_tol, step=1)
        return out.p

    if method == "compatibility":
        ru0 = obs(u0)
        if not abs(ru0) > thr * tau:
            raise DegenerateObservationError(f"observation of u^0 is {ru0:.3e}", step=0, value=ru0)
        z = solve_spd(forms.M, assemble_load(mesh, spec, 0.0) - (forms.K + forms.B) @ u0, rel_tol)
        if grid.N >= 2:
            dphi = (-3.0 * phi[0] + 4.0 * phi[1] - phi[2]) / (2.0 * tau)
        else:
            dphi = (phi[1] - phi[0]) / tau
        return (obs(z) - dphi) / ru0
    if method == "linear":
        q0 = startup_p0(forms, mesh, spec, grid, obs, phi, "compatibility", thr, rel_tol, u0)
        if scheme is None or SchemeKind(scheme) is SchemeKind.FIRST_ORDER or grid.N < 2:
            return q0
        return _linear_start(forms, mesh, spec, grid, obs, phi, SchemeKind(scheme), q0, thr, rel_tol, u0)
    if method == "first_order":
        return one_step(tau, phi[1])
    if method == "extrapolated":
        if grid.N < 2:
            return one_step(tau, phi[1])
        return 2.0 * one_step(tau, phi[1]) - one_step(2 * tau, phi[2])
    raise InvalidInputError(f"unknown p0 method {method!r}")


def _linear_start(forms, mesh, spec, grid, obs, phi, scheme, q0, thr, rel_tol, u0, tol=1e-9, max_iter=30):
    tau = grid.tau
    F1 = assemble_load(mesh, spec, grid.times[1])
    F2 = assemble_load(mesh, spec, grid.times[2])

    def second_difference(q):
        s1 = _step(forms, u0, q, F1, tau, scheme, obs, phi[1], thr, rel_tol, step=1)
        s2 = _step(forms, s1.u, s1.p, F2, tau, scheme, obs, phi[2], thr, rel_tol, step=2)
        return q - 2.0 * s1.p + s2.p

    qa, qb = q0, q0 + max(1e-3, 1e-3 * abs(q0))
    fa, fb = second_difference(qa), second_difference(qb)
    for _ in range(max_iter):
        if fb == fa:
            break
        qa, qb = qb, qb - fb * (qb - qa) / (fb - fa)
        fa, fb = fb, second_difference(qb)
        if abs(qb - qa) <= tol * (1.0 + abs(qb)):
            break
    else:
        raise NoConvergenceError("linear startup for p^0 did not converge", residual=abs(fb))
    return qb


def identify(
    mesh: Mesh,
    spec: ProblemSpec,
    grid: TimeGrid,
    scheme,
    obs: ObservationFunctional,
    phi,
    p_0: Union[str, float, None] = None,
    threshold: Optional[float] = None,
    forms: Optional[AssembledForms] = None,
    rel_tol: float = DEFAULT_REL_TOL,
) -> IdentificationResult:
    """Recover ``p^1..p^N`` from ``phi^0..phi^N`` with a linearized scheme.

    Raises
    ------
    DegenerateObservationError
        ``|r @ w|`` fell below ``threshold``; ``.step`` names the level.
    StepFailure
        Any other numerical failure, wrapped with its step index.
    """
    scheme = SchemeKind(scheme)
    phi = _check_series(phi, grid)
    forms = assemble(mesh, spec) if forms is None else forms
    tau = grid.tau
    t = grid.times
    N = grid.N
    states = np.empty((N + 1, mesh.n_nodes))
    states[0] = project_initial(forms, mesh, spec.initial, rel_tol)
    thr = default_threshold(tau, states[0]) if threshold is None else threshold

    p_start = None
    if scheme is not SchemeKind.FIRST_ORDER:
        p_start = startup_p0(forms, mesh, spec, grid, obs, phi, "linear" if p_0 is None else p_0,
                             thr, rel_tol, u0=states[0], scheme=scheme)
    p = np.empty(N)
    wf = np.empty(N)
    res = np.empty(N)
    p_prev = 0.0 if p_start is None else p_start
    for n in range(N):
        F = assemble_load(mesh, spec, t[n + 1])
        try:
            out = _step(forms, states[n], p_prev, F, tau, scheme, obs, phi[n + 1], thr, rel_tol, step=n + 1)
        except DegenerateObservationError:
            raise
        except NumericalError as exc:
            raise StepFailure(n + 1, exc) from exc
        states[n + 1] = out.u
        p[n] = p_prev = out.p
        wf[n] = out.w_functional
        res[n] = out.residual
    result = IdentificationResult(p, FieldTrajectory(states, grid), wf, res, scheme.value, p_start)
    _warn_sign(result)
    return result


def _warn_sign(result):
    if not result.w_sign_ok:
        bad = int(np.count_nonzero(result.w_functional >= 0))
        log.warning("%s: r.w is nonnegative at %d of %d steps", result.scheme, bad, len(result.w_functional))


def forward_linearized(mesh, spec, grid, p, scheme, p_0=None, forms=None, rel_tol=DEFAULT_REL_TOL) -> FieldTrajectory:
    """March a linearized scheme with a known coefficient (``u = y + p w``).

    Produces data that the same scheme inverts exactly; used for
    consistency checks.  ``p_0`` defaults to ``p(0)``.
    """
    scheme = SchemeKind(scheme)
    forms = assemble(mesh, spec) if forms is None else forms
    tau = grid.tau
    t = grid.times
    pv = np.asarray(p(t), dtype=float)
    if p_0 is not None:
        pv[0] = p_0
    states = np.empty((grid.N + 1, mesh.n_nodes))
    states[0] = project_initial(forms, mesh, spec.initial, rel_tol)
    for n in range(grid.N):
        F = assemble_load(mesh, spec, t[n + 1])
        A, c = _system(forms, tau, scheme, pv[n])
        rhs = _y_rhs(forms, states[n], F, tau, scheme) - c * pv[n + 1] * (forms.M @ states[n])
        states[n + 1] = solve_spd(A, rhs, rel_tol, x0=states[n])
    return FieldTrajectory(states, grid)


def solve_via_transform(
    mesh: Mesh,
    spec: ProblemSpec,
    grid: TimeGrid,
    obs: ObservationFunctional,
    phi,
    forms: Optional[AssembledForms] = None,
    rel_tol: float = DEFAULT_REL_TOL,
    phi_floor: float = 1e-12,
) -> tuple[TransformState, IdentificationResult]:
    """Identify p through ``v = chi u`` with ``chi = exp(int p)``.

    The transformed problem has no reaction term, so ``v`` is marched by
    backward Euler without knowing p.  The source is weighted by the lagged
    ``chi^n``.  Then ``chi^n = r.v^n / phi^n``, ``u^n = v^n / chi^n`` and
    ``p^n = log(chi^n / chi^{n-1}) / tau``.
    """
    phi = _check_series(phi, grid)
    forms = assemble(mesh, spec) if forms is None else forms
    tau = grid.tau
    t = grid.times
    N = grid.N
    floor = phi_floor * float(np.max(np.abs(phi)))
    A = forms.combine(1.0 / tau, 1.0, 1.0)

    v = np.empty((N + 1, mesh.n_nodes))
    chi = np.empty(N + 1)
    v[0] = project_initial(forms, mesh, spec.initial, rel_tol)
    chi[0] = 1.0
    for n in range(N):
        F = assemble_load(mesh, spec, t[n + 1])
        v[n + 1] = solve_spd(A, forms.M @ v[n] / tau + chi[n] * F, rel_tol, x0=v[n])
        if not abs(phi[n + 1]) > floor:
            raise TransformDegenerateError(f"observation {phi[n + 1]:.3e} too close to zero at step {n + 1}")
        chi[n + 1] = obs(v[n + 1]) / phi[n + 1]
        if not chi[n + 1] > 0:
            raise TransformDegenerateError(f"chi became nonpositive ({chi[n + 1]:.3e}) at step {n + 1}")

    u = v / chi[:, None]
    p = np.diff(np.log(chi)) / tau
    nan = np.full(N, np.nan)
    result = IdentificationResult(p, FieldTrajectory(u, grid), nan, nan.copy(), "transform")
    return TransformState(chi, v), result


def solve_nonlinear_implicit(
    mesh: Mesh,
    spec: ProblemSpec,
    grid: TimeGrid,
    obs: ObservationFunctional,
    phi,
    fp_tol: float = 1e-8,
    max_iters: int = 50,
    p_init: float = 0.0,
    threshold: Optional[float] = None,
    forms: Optional[AssembledForms] = None,
    rel_tol: float = 1e-12,
) -> IdentificationResult:
    """Fully implicit scheme with ``p^{n+1} M u^{n+1}``, solved by fixed point.

    Each iteration solves the backward Euler step with the current ``p_k``,
    then recovers ``p_{k+1}`` from the decomposition with ``w`` driven by
    that iterate.  Iterations start from the previous level's p (``p_init``
    at the first level) and stop when
    ``|p_{k+1} - p_k| <= fp_tol (1 + |p_{k+1}|)``.
    """
    phi = _check_series(phi, grid)
    forms = assemble(mesh, spec) if forms is None else forms
    tau = grid.tau
    t = grid.times
    N = grid.N
    A0 = forms.combine(1.0 / tau, 1.0, 1.0)

    states = np.empty((N + 1, mesh.n_nodes))
    states[0] = project_initial(forms, mesh, spec.initial, rel_tol)
    thr = default_threshold(tau, states[0]) if threshold is None else threshold
    p = np.empty(N)
    wf = np.empty(N)
    res = np.empty(N)
    iters = np.zeros(N, dtype=int)
    p_k = float(p_init)
    for n in range(N):
        u_n = states[n]
        F = assemble_load(mesh, spec, t[n + 1])
        rhs = forms.M @ u_n / tau + F
        try:
            y = solve_spd(A0, rhs, rel_tol, x0=u_n)
            history = [p_k]
            u_k = u_n
            for k in range(1, max_iters + 1):
                coeff = 1.0 / tau + p_k
                if not coeff > 0:
                    raise IndefiniteSystemError(f"fixed-point iterate p={p_k:.6g} makes the system indefinite")
                u_k = solve_spd(forms.combine(coeff, 1.0, 1.0), rhs, rel_tol, x0=u_k)
                w = solve_spd(A0, -(forms.M @ u_k), rel_tol)
                p_new = recover_p(y, w, obs, phi[n + 1], thr, step=n + 1)
                history.append(p_new)
                done = abs(p_new - p_k) <= fp_tol * (1.0 + abs(p_new))
                p_k = p_new
                if done:
                    break
            else:
                raise NoConvergenceError(
                    f"fixed point did not converge in {max_iters} iterations at step {n + 1}",
                    residual=abs(history[-1] - history[-2]),
                    history=history,
                )
        except DegenerateObservationError:
            raise
        except NumericalError as exc:
            raise StepFailure(n + 1, exc) from exc
        u_next = y + p_k * w
        states[n + 1] = u_next
        p[n] = p_k
        wf[n] = obs(w)
        r = forms.combine(1.0 / tau + p_k, 1.0, 1.0) @ u_next - rhs
        res[n] = np.linalg.norm(r) / np.linalg.norm(rhs)
        iters[n] = k
    result = IdentificationResult(p, FieldTrajectory(states, grid), wf, res, "nonlinear_implicit", iterations=iters)
    _warn_sign(result)
    return result
