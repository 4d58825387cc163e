import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from specopt.materials import (MaterialModel, Phase, cutoff, cutoff_deriv, interp_material, interp_void,
                               lame_from_young, project_sum, project_tangent, psi0, psi0_deriv, voigt_matrix)

from conftest import random_simplex

EPS = 0.02
SCALAR = MaterialModel()
P1 = Phase(*lame_from_young(1.0, 0.3), rho=1.0)
VEC3 = MaterialModel((P1, Phase(0.9, 0.35, 2.5)), representation="vector")
VEC2 = MaterialModel((P1,), representation="vector")


def central(f, x, h=1e-6):
    x = np.asarray(x, dtype=float)
    g = np.zeros(x.shape + np.shape(f(x)))
    for i in np.ndindex(x.shape):
        e = np.zeros_like(x)
        e[i] = h
        g[i] = (np.asarray(f(x + e)) - np.asarray(f(x - e))) / (2 * h)
    return g


def _tangential(g):
    """Remove the component mean along the leading (phase) axis."""
    return g - g.mean(axis=0, keepdims=True)


def test_lame_from_young():
    mu, lam = lame_from_young(1.0, 0.3)
    assert mu == pytest.approx(0.3846153846, rel=1e-9)
    assert lam == pytest.approx(0.5769230769, rel=1e-9)


def test_interpolation_endpoints_and_positivity():
    assert interp_material(0.0) == interp_void(0.0) == 0.0
    assert interp_material(1.0) == interp_void(1.0) == 1.0
    s = np.linspace(-2, 2, 401)
    s = s[s != 0]
    assert np.all(interp_material(s) > 0)


def test_default_exponents():
    assert (SCALAR.k, SCALAR.l) == (1, 2)
    assert (SCALAR.alpha_void, SCALAR.beta_void) == (2e-4, 1e-4)


# -- cutoff -----------------------------------------------------------------

@given(st.floats(-3, 4))
def test_cutoff_clamps_and_is_identity_inside(s):
    w = 0.1
    v = float(cutoff(s, w))
    if 0 <= s <= 1:
        assert v == s
    elif s <= -w:
        assert v == -w
    elif s >= 1 + w:
        assert v == 1 + w
    else:
        assert -w <= v <= 1 + w


def test_cutoff_is_c11():
    w = 0.1
    for x in (-w, 0.0, 1.0, 1.0 + w):
        for f in (cutoff, cutoff_deriv):
            left, right = float(f(x - 1e-12, w)), float(f(x + 1e-12, w))
            assert left == pytest.approx(right, abs=1e-9)
    s = np.linspace(-0.3, 1.3, 3201)
    d = cutoff_deriv(s, w)
    # Lipschitz derivative: bounded difference quotients
    assert np.max(np.abs(np.diff(d)) / np.diff(s)) <= 4.0 / w + 1e-6
    x = s[::37]
    fd = (cutoff(x + 1e-7, w) - cutoff(x - 1e-7, w)) / 2e-7
    assert np.allclose(fd, d[::37], atol=1e-5)


# -- stiffness and density endpoints ----------------------------------------

def test_pure_phases_reproduce_tensors():
    for i, ph in enumerate(VEC3.phases):
        e = VEC3.pure_phase(i)
        assert np.allclose(VEC3.stiffness_at(e, EPS), voigt_matrix(ph.mu, ph.lame), rtol=1e-15)
        assert VEC3.density_at(e, EPS) == pytest.approx(ph.rho, rel=1e-15)
    assert np.allclose(SCALAR.stiffness_at(1.0, EPS), voigt_matrix(P1.mu, P1.lame), rtol=1e-15)


def test_void_stiffness_scales_with_eps():
    e_void = VEC3.pure_phase(2)
    assert np.allclose(VEC3.stiffness_at(e_void, EPS), EPS * VEC3.alpha_void * voigt_matrix(P1.mu, P1.lame),
                       rtol=1e-12)


def test_scalar_void_factors():
    assert float(SCALAR.alpha(-1.0, 0.02)) == pytest.approx(4e-6, rel=1e-12)
    assert float(SCALAR.beta(-1.0, 0.02)) == pytest.approx(4e-8, rel=1e-12)
    assert float(SCALAR.beta(1.0, 0.02)) == 1.0
    assert float(SCALAR.alpha_deriv(-1.0, 0.02)) == 0.0
    assert float(SCALAR.beta_deriv(-1.0, 0.02)) == 0.0


def test_scalar_matches_two_phase_vector():
    phi = np.linspace(-1, 1, 11)
    vec = np.column_stack([(1 + phi) / 2, (1 - phi) / 2])
    mu_s, _ = SCALAR.lame_fields(phi, EPS)
    mu_v, _ = VEC2.lame_fields(vec, EPS)
    assert np.allclose(mu_s, mu_v, rtol=1e-13)
    assert np.allclose(SCALAR.density(phi, EPS), VEC2.density(vec, EPS), rtol=1e-13)


def test_vector_void_density_derivative_has_no_material_part():
    d = VEC2.density_deriv_at(VEC2.pure_phase(1), EPS)
    # at pure void the material interpolant is flat and the void one too
    assert np.allclose(d, 0.0, atol=1e-15)


# -- derivatives ------------------------------------------------------------

@given(st.floats(-0.999, 0.999))
def test_scalar_derivatives_fd(phi):
    for f, df in ((SCALAR.alpha, SCALAR.alpha_deriv), (SCALAR.beta, SCALAR.beta_deriv)):
        fd = (f(phi + 1e-6, EPS) - f(phi - 1e-6, EPS)) / 2e-6
        assert float(df(phi, EPS)) == pytest.approx(float(fd), rel=1e-6, abs=1e-12)


def test_vector_derivatives_fd_random_interior(rng):
    pts = random_simplex(rng, 100, 3)
    pts = 0.9 * pts + 0.1 / 3
    for p in pts:
        t = _tangential(central(lambda x: VEC3.stiffness_at(x, EPS), p))
        assert np.allclose(VEC3.stiffness_deriv(p, EPS), t, rtol=1e-5, atol=1e-7)
        g = project_tangent(central(lambda x: VEC3.density_at(x, EPS), p))
        assert np.allclose(VEC3.density_deriv_at(p, EPS), g, rtol=1e-5, atol=1e-7)


def test_vector_derivative_at_barycenter():
    b = np.full(3, 1 / 3)
    fd = _tangential(central(lambda x: VEC3.stiffness_at(x, EPS), b))
    assert np.allclose(VEC3.stiffness_deriv(b, EPS), fd, rtol=1e-6, atol=1e-9)


def test_derivatives_are_tangential(rng):
    pts = random_simplex(rng, 50, 3)
    dmu, dlam = VEC3.lame_derivs(pts, EPS)
    assert np.allclose(dmu.sum(axis=1), 0, atol=1e-14)
    assert np.allclose(VEC3.density_deriv(pts, EPS).sum(axis=1), 0, atol=1e-14)


# -- positivity -------------------------------------------------------------

@given(arrays(float, 3, elements=st.floats(0.0, 1.0)), arrays(float, 3, elements=st.floats(-1, 1)))
def test_stiffness_and_density_positive_on_simplex(raw, b):
    if raw.sum() == 0 or np.allclose(b, 0):
        return
    p = raw / raw.sum()
    C = VEC3.stiffness_at(p, EPS)
    v = np.array([b[0], b[1], 2 * b[2]])
    B2 = b[0] ** 2 + b[1] ** 2 + 2 * b[2] ** 2
    theta_min = min(min(ph.mu for ph in VEC3.phases), 1.0) * 2
    assert v @ C @ v >= 0.5 * VEC3.alpha_void * EPS * theta_min * B2 * 0.5
    assert VEC3.density_at(p, EPS) >= 0.99 * VEC3.beta_void * EPS**2 * min(ph.rho for ph in VEC3.phases)


# -- potential --------------------------------------------------------------

def test_potential_wells_and_midpoint():
    for i in range(3):
        assert psi0(np.eye(3)[i], scalar=False) == 0.0
    assert psi0(1.0, True) == psi0(-1.0, True) == 0.0
    assert psi0(0.0, True) == 0.5
    assert np.all(psi0(random_simplex(np.random.default_rng(0), 100, 3), False) >= 0)


def test_potential_derivative_fd(rng):
    p = rng.uniform(-1, 1, 3)
    fd = central(lambda x: psi0(x, False), p)
    assert np.allclose(psi0_deriv(p, False), fd, rtol=1e-8, atol=1e-10)


def test_projections():
    x = np.array([[0.3, 0.9, -0.1], [2.0, 0.0, 0.0]])
    assert np.allclose(project_sum(x).sum(axis=1), 1.0)
    assert np.allclose(project_tangent(x).sum(axis=1), 0.0)
    assert np.allclose(project_sum(project_sum(x)), project_sum(x))


@pytest.mark.parametrize("bad", [
    dict(phases=()), dict(alpha_void=0.0), dict(beta_void=-1.0), dict(omega=0.0), dict(representation="tensor"),
    dict(phases=(P1, P1)),
])
def test_model_validation(bad):
    with pytest.raises(ValueError):
        MaterialModel(**bad)


def test_nonfinite_point_rejected():
    with pytest.raises(ValueError, match="non-finite"):
        SCALAR.stiffness_at(np.nan, EPS)
    with pytest.raises(ValueError):
        Phase(-1.0, 0.5)
