import numpy as np
import pytest

from specopt.materials import MaterialModel, Phase, lame_from_young, project_tangent
from specopt.mesh_fem import Assembler, TractionSegment, box_density, build_mesh
from specopt.objective import ObjectiveSpec, Problem, ginzburg_landau_energy, ginzburg_landau_gradient

from conftest import random_simplex

EPS = 0.25
STEPS = (1e-3, 1e-4, 1e-5, 1e-6)
TRACTION = TractionSegment("right", 0.45, 0.55)


def scalar_problem(spec, nx=8, ny=4, eps=EPS):
    m = build_mesh(nx, ny, 2.0, 1.0)
    return Problem(m, MaterialModel(), eps, spec, rho_spatial=box_density((1.5, 2.0, 0.25, 0.75), 10.0))


def vector_problem(spec, eps=EPS):
    m = build_mesh(8, 4, 2.0, 1.0)
    mat = MaterialModel((Phase(*lame_from_young(1.0, 0.3)), Phase(0.5, 0.3, 0.6)), representation="vector")
    return Problem(m, mat, eps, spec)


def interior_scalar(rng, n):
    return rng.uniform(-0.9, 0.9, n)


def interior_vector(rng, n):
    return 0.8 * random_simplex(rng, n, 3) + 0.2 / 3


def best_fd_error(f, grad, phi, eta):
    exact = float(np.sum(grad * eta))
    errs = []
    for t in STEPS:
        fd = (f(phi + t * eta) - f(phi - t * eta)) / (2 * t)
        errs.append(abs(fd - exact) / max(abs(exact), 1e-300))
    return min(errs)


def directions(rng, phi, k):
    out = []
    for _ in range(k):
        eta = rng.standard_normal(phi.shape)
        out.append(project_tangent(eta) if phi.ndim == 2 else eta)
    return out


# -- Ginzburg-Landau ----------------------------------------------------------

def test_glandau_zero_on_pure_phase():
    pb = vector_problem(ObjectiveSpec((), ()))
    e1 = np.tile([1.0, 0, 0], (pb.mesh.n_nodes, 1))
    assert ginzburg_landau_energy(e1, pb.asm, EPS, False) == pytest.approx(0.0, abs=1e-14)
    ps = scalar_problem(ObjectiveSpec((), ()))
    assert ginzburg_landau_energy(np.ones(ps.mesh.n_nodes), ps.asm, EPS, True) == pytest.approx(0.0, abs=1e-14)


def test_glandau_one_dimensional_profile():
    eps = 0.01
    m = build_mesh(800, 2, 1.0, 0.01)
    asm = Assembler(m)
    z = (m.nodes[:, 0] - 0.5) / eps
    phi = np.sin(np.clip(z, -np.pi / 2, np.pi / 2))
    # per unit interface length
    assert ginzburg_landau_energy(phi, asm, eps, True) / 0.01 == pytest.approx(np.pi / 2, rel=2e-3)


def test_glandau_rejects_inadmissible():
    ps = scalar_problem(ObjectiveSpec((), ()))
    phi = np.zeros(ps.mesh.n_nodes)
    phi[0] = 1.01
    with pytest.raises(ValueError, match="obstacle"):
        ginzburg_landau_energy(phi, ps.asm, EPS, True)
    pv = vector_problem(ObjectiveSpec((), ()))
    bad = np.tile([0.5, 0.6, -0.1], (pv.mesh.n_nodes, 1))
    with pytest.raises(ValueError, match="simplex"):
        ginzburg_landau_energy(bad, pv.asm, EPS, False)


def test_laplacian_stencil_unit_square():
    asm = Assembler(build_mesh(1, 1, 1.0, 1.0))
    L = asm.laplacian.toarray()
    # row-major nodes (0,0), (1,0), (0,1), (1,1): edge neighbours -1/6, opposite corner -1/3
    ref = np.array([[4, -1, -1, -2], [-1, 4, -2, -1], [-1, -2, 4, -1], [-2, -1, -1, 4]]) / 6.0
    assert np.allclose(L, ref, atol=1e-15)
    phi = np.array([0.0, 1.0, 1.0, 0.0])
    g = ginzburg_landau_gradient(phi, asm, 1.0, 1.0, True)
    assert np.allclose(g - asm.lumped * -phi, L @ phi, atol=1e-15)


def test_glandau_gradient_on_vertex_field():
    pb = vector_problem(ObjectiveSpec((), (), gamma=2.0))
    phi = np.tile([0.0, 1.0, 0.0], (pb.mesh.n_nodes, 1))
    g = pb.gradient(phi).glandau
    expect = -(2.0 / EPS) * pb.asm.lumped[:, None] * project_tangent(np.array([0.0, 1.0, 0.0]))
    assert np.allclose(g, expect, rtol=1e-13)


@pytest.mark.parametrize("kind", ["scalar", "vector"])
def test_glandau_gradient_fd(kind, rng):
    spec = ObjectiveSpec((), (), gamma=1.0)
    pb = scalar_problem(spec) if kind == "scalar" else vector_problem(spec)
    phi = interior_scalar(rng, pb.mesh.n_nodes) if kind == "scalar" else interior_vector(rng, pb.mesh.n_nodes)
    grad = pb.gradient(phi).glandau
    for eta in directions(rng, phi, 5):
        assert best_fd_error(lambda p: pb.glandau(p, check=False), grad, phi, eta) <= 1e-6


# -- eigenvalue part ----------------------------------------------------------

@pytest.mark.parametrize("kind", ["scalar", "vector"])
def test_eigenvalue_gradient_fd(kind, rng):
    spec = ObjectiveSpec((1, 2), (1.0, 0.0), gamma=1e-9)
    pb = scalar_problem(spec) if kind == "scalar" else vector_problem(spec)
    phi = interior_scalar(rng, pb.mesh.n_nodes) if kind == "scalar" else interior_vector(rng, pb.mesh.n_nodes)
    for r in (0, 1):
        ev = pb.evaluate(phi, check=False)
        pair = ev.spectrum[r]
        grad = pb.eigenvalue_gradient(phi, pair.value, pair.vector)
        if kind == "vector":
            grad = project_tangent(grad)
        for eta in directions(rng, phi, 5):
            assert best_fd_error(lambda p: pb.spectrum(p).values[r], grad, phi, eta) <= 1e-4


def test_eigenvalue_gradient_requires_normalised_vector(rng):
    pb = scalar_problem(ObjectiveSpec((1,), (-1.0,)))
    phi = interior_scalar(rng, pb.mesh.n_nodes)
    pair = pb.spectrum(phi)[0]
    with pytest.raises(ValueError, match="M-normalised"):
        pb.eigenvalue_gradient(phi, pair.value, 2.0 * pair.vector)


def test_descent_adds_material_where_strain_energy_is_large():
    pb = scalar_problem(ObjectiveSpec((1,), (-1.0,)), nx=16, ny=8)
    phi = np.zeros(pb.mesh.n_nodes)
    grad = pb.gradient(phi).eigen
    w = pb.spectrum(phi)[0].vector
    emu, elam = pb._strain_energies(w)
    dens = pb._scatter(emu + elam) / pb.asm.lumped
    top = dens > np.quantile(dens, 0.9)
    # -grad > 0 means increasing phi (adding material) lowers J = -lambda_1
    assert np.mean(-grad[top] > 0) > 0.9


# -- compliance ---------------------------------------------------------------

def test_compliance_zero_load():
    pb = scalar_problem(ObjectiveSpec((), (), compliance_weight=1.0, traction=TRACTION, g=(0.0, 0.0)))
    phi = np.zeros(pb.mesh.n_nodes)
    ev = pb.evaluate(phi)
    assert ev.compliance == 0.0
    assert not np.any(pb.gradient(phi, ev).compliance)


def test_compliance_gradient_fd(rng):
    pb = scalar_problem(ObjectiveSpec((), (), compliance_weight=1.0, traction=TRACTION, g=(0.0, -1.0)))
    phi = interior_scalar(rng, pb.mesh.n_nodes)
    grad = pb.gradient(phi).compliance
    for eta in directions(rng, phi, 5):
        assert best_fd_error(lambda p: pb.compliance(p)[0], grad, phi, eta) <= 1e-4


def test_compliance_needs_traction():
    with pytest.raises(ValueError, match="traction"):
        ObjectiveSpec((1,), (-1.0,), compliance_weight=1.0)


# -- totals -------------------------------------------------------------------

def test_degenerate_spec_is_glandau_only(rng):
    pb = scalar_problem(ObjectiveSpec((), (), gamma=0.3))
    phi = interior_scalar(rng, pb.mesh.n_nodes)
    assert pb.total_objective(phi) == pytest.approx(0.3 * ginzburg_landau_energy(phi, pb.asm, EPS, True), rel=1e-15)


@pytest.mark.parametrize("kind", ["scalar", "vector"])
def test_total_gradient_fd_and_decomposition(kind, rng):
    if kind == "scalar":
        pb = scalar_problem(ObjectiveSpec((1, 2), (-1.0, -0.1), gamma=1e-3, compliance_weight=1.0,
                                          traction=TRACTION, g=(0.0, -1.0)))
        phi = interior_scalar(rng, pb.mesh.n_nodes)
    else:
        pb = vector_problem(ObjectiveSpec((1, 2), (-1.0, -0.1), gamma=1e-3))
        phi = interior_vector(rng, pb.mesh.n_nodes)
    ev = pb.evaluate(phi)
    assert ev.J == ev.eigen_part + ev.glandau + ev.compliance_part
    grad = pb.total_gradient(phi)
    if kind == "vector":
        assert np.max(np.abs(grad.sum(axis=1))) <= 1e-12
    for eta in directions(rng, phi, 3):
        assert best_fd_error(lambda p: pb.total_objective(p, check=False), grad, phi, eta) <= 1e-4


def test_spec_validation():
    for bad in (dict(indices=(1, 2), weights=(1.0,)), dict(indices=(0,), weights=(1.0,)),
                dict(gamma=0.0)):
        with pytest.raises(ValueError):
            ObjectiveSpec(**bad)
    with pytest.raises(ValueError):
        Problem(build_mesh(2, 2, 1, 1), MaterialModel(), 0.0, ObjectiveSpec())
