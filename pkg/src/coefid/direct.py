"""Time marching for the direct problem with a known reaction coefficient p(t)."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
from scipy import integrate

from .errors import IndefiniteSystemError, InvalidInputError
from .fem import AssembledForms, ObservationFunctional, ProblemSpec, assemble, assemble_field_load, assemble_load
from .linalg import DEFAULT_REL_TOL, solve_spd
from .mesh import Mesh

SCHEMES = ("implicit", "crank_nicolson")


@dataclass(frozen=True)
class TimeGrid:
    T: float
    N: int

    def __post_init__(self):
        if not (self.T > 0 and np.isfinite(self.T)):
            raise InvalidInputError("T must be positive")
        if int(self.N) != self.N or self.N < 1:
            raise InvalidInputError("N must be a positive integer")
        object.__setattr__(self, "N", int(self.N))

    @property
    def tau(self) -> float:
        return self.T / self.N

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.N + 1) * self.tau


@dataclass
class FieldTrajectory:
    states: np.ndarray  # (N+1, n_nodes)
    time_grid: TimeGrid

    def __post_init__(self):
        if len(self.states) != self.time_grid.N + 1:
            raise InvalidInputError("trajectory length must be N+1")


class CoefficientFunction:
    """A scalar function of time with an optional closed-form antiderivative.

    ``integral(t)`` returns the integral of p over [0, t]; it falls back to
    adaptive quadrature when no closed form was supplied.
    """

    def __init__(self, fun: Callable, name: str = "custom", antiderivative: Optional[Callable] = None, breakpoints=()):
        self._fun = fun
        self.name = name
        self._anti = antiderivative
        self.breakpoints = tuple(breakpoints)

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        out = np.vectorize(self._fun, otypes=[float])(t)
        return out if out.ndim else float(out)

    def integral(self, t: float) -> float:
        if self._anti is not None:
            return float(self._anti(t))
        pts = [b for b in self.breakpoints if 0 < b < t] or None
        val, _ = integrate.quad(self._fun, 0.0, t, points=pts, limit=200, epsabs=1e-14, epsrel=1e-13)
        return val

    def __repr__(self):
        return f"CoefficientFunction({self.name})"

    @classmethod
    def zero(cls):
        return cls(lambda t: 0.0, "zero", lambda t: 0.0)

    @classmethod
    def constant(cls, c: float):
        return cls(lambda t: c, f"constant({c})", lambda t: c * t)

    @classmethod
    def ramp_step(cls, T: float, slope: float = 1000.0):
        """Linear ramp ``slope*t`` on (0, T/2], zero on (T/2, T]."""
        half = T / 2

        def fun(t):
            return slope * t if t <= half else 0.0

        def anti(t):
            s = min(t, half)
            return 0.5 * slope * s * s

        return cls(fun, "ramp_step", anti, breakpoints=(half,))

    @classmethod
    def smooth_rational(cls, a: float = 1000.0, b: float = 500.0):
        """``a t / (1 + b t^2)``; its antiderivative is ``(a/2b) log(1 + b t^2)``."""
        return cls(lambda t: a * t / (1 + b * t * t), "smooth_rational", lambda t: a / (2 * b) * np.log1p(b * t * t))

    @classmethod
    def from_table(cls, times, values, rule: str = "linear"):
        """Piecewise coefficient from samples; ``rule`` is ``linear`` or ``step``.

        ``step`` holds each value on the interval ending at its time, so
        ``p(t) = values[i]`` for ``times[i-1] < t <= times[i]``.
        """
        ts = np.asarray(times, dtype=float)
        vs = np.asarray(values, dtype=float)
        if ts.shape != vs.shape or len(ts) < 1 or np.any(np.diff(ts) <= 0):
            raise InvalidInputError("table needs increasing times and matching values")
        if rule == "linear":
            fun = lambda t: float(np.interp(t, ts, vs))  # noqa: E731
        elif rule == "step":
            fun = lambda t: float(vs[min(np.searchsorted(ts, t, side="left"), len(vs) - 1)])  # noqa: E731
        else:
            raise InvalidInputError(f"unknown interpolation rule {rule!r}")
        return cls(fun, f"table({rule})", breakpoints=tuple(ts))


def _check_mass_coeff(tau, coeff):
    if not coeff > 0:
        raise IndefiniteSystemError(
            f"system loses positive definiteness: mass coefficient {coeff:.6g} <= 0 (tau={tau:.3g})"
        )


def project_initial(forms: AssembledForms, mesh: Mesh, u0, rel_tol: float = DEFAULT_REL_TOL) -> np.ndarray:
    """L2 projection of the initial state onto the P1 space."""
    if isinstance(u0, ProblemSpec):
        u0 = u0.initial
    rhs = assemble_field_load(mesh, u0)
    return solve_spd(forms.M, rhs, rel_tol)


def step_implicit(forms, u_n, p_next, F_next, tau, rel_tol=DEFAULT_REL_TOL, x0=None):
    """Backward Euler: ``(M/tau + K + B + p M) u = M u_n / tau + F``."""
    coeff = 1.0 / tau + p_next
    _check_mass_coeff(tau, coeff)
    A = forms.combine(coeff, 1.0, 1.0)
    rhs = forms.M @ u_n / tau + F_next
    return solve_spd(A, rhs, rel_tol, x0=u_n if x0 is None else x0)


def step_crank_nicolson(forms, u_n, p_n, p_next, F_next, tau, rel_tol=DEFAULT_REL_TOL, x0=None):
    """Trapezoidal step; the source is taken at the new time level."""
    coeff = 1.0 / tau + 0.5 * p_next
    _check_mass_coeff(tau, coeff)
    A = forms.combine(coeff, 0.5, 0.5)
    rhs = forms.combine(1.0 / tau - 0.5 * p_n, -0.5, -0.5) @ u_n + F_next
    return solve_spd(A, rhs, rel_tol, x0=u_n if x0 is None else x0)


def run_direct(
    mesh: Mesh,
    spec: ProblemSpec,
    p: CoefficientFunction,
    grid: TimeGrid,
    scheme: str = "implicit",
    forms: Optional[AssembledForms] = None,
    rel_tol: float = DEFAULT_REL_TOL,
) -> FieldTrajectory:
    if scheme not in SCHEMES:
        raise InvalidInputError(f"unknown scheme {scheme!r}; expected one of {SCHEMES}")
    forms = assemble(mesh, spec) if forms is None else forms
    tau = grid.tau
    t = grid.times
    pv = np.asarray(p(t), dtype=float)
    states = np.empty((grid.N + 1, mesh.n_nodes))
    states[0] = project_initial(forms, mesh, spec.initial, rel_tol)
    for n in range(grid.N):
        F = assemble_load(mesh, spec, t[n + 1])
        if scheme == "implicit":
            states[n + 1] = step_implicit(forms, states[n], pv[n + 1], F, tau, rel_tol)
        else:
            states[n + 1] = step_crank_nicolson(forms, states[n], pv[n], pv[n + 1], F, tau, rel_tol)
    return FieldTrajectory(states, grid)


def record_observations(
    traj: FieldTrajectory, obs: ObservationFunctional, noise_level: float = 0.0, seed=None
) -> np.ndarray:
    """Observation series; optional multiplicative Gaussian noise ``1 + level*xi``."""
    phi = obs.apply(traj.states)
    if noise_level < 0:
        raise InvalidInputError("noise_level must be nonnegative")
    if noise_level > 0:
        rng = np.random.default_rng(seed)
        phi = phi * (1.0 + noise_level * rng.standard_normal(phi.shape))
    return phi


def subsample(series, n_fine: int, n_coarse: int) -> np.ndarray:
    """Values of a fine-grid series at the time points of a coarser grid."""
    series = np.asarray(series)
    if len(series) != n_fine + 1:
        raise InvalidInputError(f"series has {len(series)} values, expected {n_fine + 1}")
    if n_coarse < 1 or n_fine % n_coarse:
        raise InvalidInputError(f"fine step count {n_fine} is not divisible by {n_coarse}")
    return series[:: n_fine // n_coarse].copy()


def write_series_csv(path, times, values, header=("t", "value")) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for t, v in zip(times, values):
            w.writerow([format(float(t), ".17g"), format(float(v), ".17g")])


def write_trajectory_csv(path, traj: FieldTrajectory) -> None:
    n = traj.states.shape[1]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t"] + [f"node_{i}" for i in range(n)])
        for t, row in zip(traj.time_grid.times, traj.states):
            w.writerow([format(float(t), ".17g")] + [format(v, ".17g") for v in row.tolist()])
