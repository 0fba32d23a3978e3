import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate

from coefid.errors import InvalidCoefficientError, InvalidInputError, OutOfDomainError
from coefid.fem import (
    PointEval,
    ProblemSpec,
    WeightedIntegral,
    assemble,
    assemble_load,
    build_observation,
    element_mass,
)
from coefid.linalg import is_symmetric


def test_unit_triangle_element_matrices(unit_triangle):
    forms = assemble(unit_triangle, ProblemSpec(diffusion=1.0, boundary_coeff=0.0))
    K = np.array([[1.0, -0.5, -0.5], [-0.5, 0.5, 0.0], [-0.5, 0.0, 0.5]])
    M = np.array([[2.0, 1.0, 1.0], [1.0, 2.0, 1.0], [1.0, 1.0, 2.0]]) / 24.0
    assert np.allclose(forms.K.toarray(), K, rtol=0, atol=1e-14)
    assert np.allclose(forms.M.toarray(), M, rtol=0, atol=1e-14)
    assert np.allclose(element_mass(0.5), M, atol=1e-16)
    assert forms.B.count_nonzero() == 0


def test_boundary_edge_matrix(unit_triangle):
    g = 3.0
    B = assemble(unit_triangle, ProblemSpec(boundary_coeff=g)).B.toarray()
    # edge (0,1) of length 1: g*L/6 [[2,1],[1,2]]
    assert B[0, 1] == pytest.approx(g / 6, rel=1e-14)
    assert B[1, 2] == pytest.approx(g * np.sqrt(2) / 6, rel=1e-14)
    assert B[0, 0] == pytest.approx(g * 2 / 6 * 2, rel=1e-14)


def test_trap_forms(trap_forms, trap_polygon, trap_mesh):
    ones = np.ones(trap_forms.n)
    assert np.abs(trap_forms.K @ ones).max() <= 1e-12
    assert trap_forms.B.sum() == pytest.approx(10 * trap_polygon.perimeter, rel=1e-12)
    assert trap_forms.M.sum() == pytest.approx(trap_mesh.area, rel=1e-13)
    for A in (trap_forms.M, trap_forms.K, trap_forms.B):
        assert is_symmetric(A)
        assert np.array_equal(A.indptr, trap_forms.M.indptr)


def test_mass_positive_definite(square_mesh):
    forms = assemble(square_mesh, ProblemSpec(boundary_coeff=1.0))
    assert np.linalg.eigvalsh(forms.M.toarray()).min() > 0
    assert np.linalg.eigvalsh(forms.combine(0.0, 1.0, 1.0).toarray()).min() > 0


def test_variable_diffusion_constant_per_element(square_mesh):
    # linear k: the mid-edge rule integrates it exactly
    forms = assemble(square_mesh, ProblemSpec(diffusion=lambda x: 1.0 + x[:, 0]))
    x = square_mesh.nodes[:, 0]
    # a(x, x) = int (1 + x) dx = 1.5
    assert x @ forms.K @ x == pytest.approx(1.5, rel=1e-13)


@pytest.mark.parametrize("k", [0.0, -1.0])
def test_nonpositive_diffusion_rejected(square_mesh, k):
    with pytest.raises(InvalidCoefficientError):
        assemble(square_mesh, ProblemSpec(diffusion=k))


def test_negative_boundary_coeff_rejected(square_mesh):
    with pytest.raises(InvalidCoefficientError):
        assemble(square_mesh, ProblemSpec(boundary_coeff=-1.0))


def test_load_linear_exact(square_mesh):
    spec = ProblemSpec(source=lambda x, t: x[:, 0] * (1 + t))
    F = assemble_load(square_mesh, spec, 0.5)
    # closed form per element: area/12 * (2 f_a + f_b + f_c)
    expected = np.zeros(square_mesh.n_nodes)
    for tri, a in zip(square_mesh.triangles, square_mesh.signed_areas()):
        fx = 1.5 * square_mesh.nodes[tri, 0]
        expected[tri] += a / 12 * (fx + fx.sum())
    assert np.allclose(F, expected, rtol=0, atol=1e-14)
    assert F.sum() == pytest.approx(0.75, rel=1e-13)


def test_load_zero_source(square_mesh):
    assert np.array_equal(assemble_load(square_mesh, ProblemSpec(), 0.0), np.zeros(square_mesh.n_nodes))


def test_load_smooth_against_quadrature(four_triangle_square):
    mesh = four_triangle_square
    f = lambda x, y: np.sin(np.pi * x) * np.exp(y)  # noqa: E731
    F = assemble_load(mesh, ProblemSpec(source=lambda p, t: f(p[:, 0], p[:, 1])), 0.0)
    # sum of the load vector is the integral of the P1-weighted f over the domain
    total, _ = integrate.dblquad(lambda y, x: f(x, y), 0, 1, 0, 1)
    assert F.sum() == pytest.approx(total, rel=5e-2)


def test_point_observation_at_node(square_mesh):
    i = 7
    obs = build_observation(square_mesh, PointEval(tuple(square_mesh.nodes[i])))
    assert obs.r[i] == pytest.approx(1.0, abs=1e-12)
    assert obs.r.sum() == pytest.approx(1.0, abs=1e-14)


def test_point_observation_centroid(unit_triangle):
    obs = build_observation(unit_triangle, PointEval((1 / 3, 1 / 3)))
    assert np.allclose(obs.r, 1 / 3, atol=1e-15)


def test_point_observation_outside(square_mesh):
    with pytest.raises(OutOfDomainError):
        build_observation(square_mesh, PointEval((2.0, 0.0)))


def test_integral_observation(trap_mesh):
    mean = build_observation(trap_mesh, WeightedIntegral())
    assert mean(np.ones(trap_mesh.n_nodes)) == pytest.approx(1.0, rel=1e-13)
    total = build_observation(trap_mesh, WeightedIntegral(1.0))
    assert total(np.ones(trap_mesh.n_nodes)) == pytest.approx(1.125, rel=1e-13)
    # linear reproduction: int x dx over the trapezoid
    xbar = trap_mesh.nodes[:, 0]
    exact = integrate.dblquad(lambda y, x: x, 0, 1.5, 0, lambda x: 1 - x / 3)[0]
    assert total(xbar) == pytest.approx(exact, rel=1e-12)


def test_unknown_observation(square_mesh):
    with pytest.raises(InvalidInputError):
        build_observation(square_mesh, "centre")


@settings(max_examples=40, deadline=None)
@given(x=st.floats(0.0, 1.0), y=st.floats(0.0, 1.0), a=st.floats(-5, 5), b=st.floats(-5, 5), c=st.floats(-5, 5))
def test_point_observation_reproduces_linear(square_mesh, x, y, a, b, c):
    obs = build_observation(square_mesh, PointEval((x, y)))
    assert np.all(obs.r >= -1e-12) and obs.r.sum() == pytest.approx(1.0, abs=1e-12)
    u = a + b * square_mesh.nodes[:, 0] + c * square_mesh.nodes[:, 1]
    assert obs(u) == pytest.approx(a + b * x + c * y, abs=1e-11)


@settings(max_examples=20, deadline=None)
@given(s=st.floats(-3, 3), u_seed=st.integers(0, 2**32 - 1))
def test_observation_linear_in_state(square_mesh, square_obs, s, u_seed):
    g = np.random.default_rng(u_seed)
    u, v = g.standard_normal((2, square_mesh.n_nodes))
    assert square_obs(u + s * v) == pytest.approx(square_obs(u) + s * square_obs(v), abs=1e-12)
