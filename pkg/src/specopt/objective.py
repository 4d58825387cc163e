"""Objective J = sum_r c_r lambda_{n_r} + gamma E(phi) [+ compliance] and its gradient.

Gradients are returned as nodal "dual" vectors, i.e. the derivative of the
discrete objective with respect to each nodal value.  Dividing by the lumped
mass gives the L2 representative.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import materials
from .eigensolver import Spectrum, factorize, solve_generalized
from .materials import MaterialModel
from .mesh_fem import Assembler, DofMap, StructuredMesh, TractionSegment

ADMISSIBLE_TOL = 1e-8


@dataclass
class ObjectiveSpec:
    """Weighted linear eigenvalue functional plus perimeter and compliance terms.

    ``indices`` are 1-based eigenvalue numbers, ``weights`` the coefficients
    c_r.  The compliance term is active when ``compliance_weight`` is nonzero.
    """

    indices: tuple[int, ...] = (1,)
    weights: tuple[float, ...] = (-1.0,)
    gamma: float = 1e-4
    compliance_weight: float = 0.0
    traction: TractionSegment | None = None
    g: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        self.indices = tuple(int(i) for i in self.indices)
        self.weights = tuple(float(c) for c in self.weights)
        if len(self.indices) != len(self.weights):
            raise ValueError("indices and weights differ in length")
        if any(i < 1 for i in self.indices):
            raise ValueError("eigenvalue indices are 1-based")
        if not self.gamma > 0:
            raise ValueError("gamma must be positive")
        if self.compliance_weight and self.traction is None:
            raise ValueError("compliance term needs a traction segment")

    @property
    def n_eigen(self) -> int:
        return max(self.indices, default=0)


@dataclass
class GradientField:
    eigen: np.ndarray
    glandau: np.ndarray
    compliance: np.ndarray

    @property
    def total(self) -> np.ndarray:
        return self.eigen + self.glandau + self.compliance


@dataclass
class Evaluation:
    J: float
    eigenvalues: np.ndarray
    eigen_part: float
    glandau: float  # gamma * E
    compliance: float
    compliance_part: float
    spectrum: Spectrum | None = field(default=None, repr=False)
    displacement: np.ndarray | None = field(default=None, repr=False)

    @property
    def parts(self) -> dict:
        return {"eigen": self.eigen_part, "glandau": self.glandau, "compliance": self.compliance_part}


def ginzburg_landau_energy(phi, asm: Assembler, eps: float, scalar: bool, check: bool = True) -> float:
    """int eps/2 |grad phi|^2 + psi0(phi)/eps; the potential term is mass lumped."""
    phi = np.asarray(phi, dtype=float)
    if check:
        _check_admissible(phi, scalar)
    L = asm.laplacian
    if scalar:
        grad2 = phi @ (L @ phi)
    else:
        grad2 = np.sum(phi * (L @ phi))
    pot = asm.lumped @ materials.psi0(phi, scalar)
    return float(0.5 * eps * grad2 + pot / eps)


def ginzburg_landau_gradient(phi, asm: Assembler, eps: float, gamma: float, scalar: bool) -> np.ndarray:
    phi = np.asarray(phi, dtype=float)
    W = asm.lumped if scalar else asm.lumped[:, None]
    return gamma * (eps * (asm.laplacian @ phi) + W * materials.psi0_deriv(phi, scalar) / eps)


def _check_admissible(phi, scalar: bool, tol: float = ADMISSIBLE_TOL):
    if scalar:
        if np.any(np.abs(phi) > 1.0 + tol):
            raise ValueError("phase-field leaves [-1, 1]; the obstacle energy is infinite")
    else:
        if np.any(phi < -tol) or np.any(np.abs(phi.sum(axis=1) - 1.0) > tol):
            raise ValueError("phase-field leaves the Gibbs simplex; the obstacle energy is infinite")


class Problem:
    """Discrete state + objective for one mesh, material model and interface width."""

    def __init__(self, mesh: StructuredMesh, material: MaterialModel, eps: float, spec: ObjectiveSpec,
                 dofs: DofMap | None = None, rho_spatial=None, eig_tol: float = 1e-9, eig_seed: int = 42,
                 n_extra: int = 2, assembler: Assembler | None = None):
        if not eps > 0:
            raise ValueError("eps must be positive")
        self.mesh = mesh
        self.material = material
        self.eps = float(eps)
        self.spec = spec
        self.asm = assembler if assembler is not None else Assembler(mesh, dofs)
        self.dofs = self.asm.dofs
        gp = mesh.gauss_points()
        self.rho_spatial_fn = rho_spatial
        self.rho_spatial = np.ones(gp.shape[:2]) if rho_spatial is None else np.asarray(rho_spatial(gp), dtype=float)
        self.eig_tol = eig_tol
        self.eig_seed = eig_seed
        self.n_extra = n_extra
        self.load = None
        if spec.compliance_weight or spec.traction is not None:
            if spec.traction is not None:
                self.load = self.asm.traction(spec.traction, spec.g)
        self.n_evals = 0

    @property
    def scalar(self) -> bool:
        return self.material.scalar

    # -- operators -------------------------------------------------------
    def stiffness(self, phi):
        return self.asm.stiffness(phi, self.material, self.eps)

    def mass(self, phi, include_void: bool = True):
        rho_q = self.material.density(self.mesh.to_gauss(phi), self.eps, include_void=include_void)
        return self.asm._finish(self.asm.mass_raw(rho_q * self.rho_spatial))

    def spectrum(self, phi, k: int | None = None, with_fraction: bool = False) -> Spectrum:
        k = (self.spec.n_eigen + self.n_extra) if k is None else k
        K = self.stiffness(phi)
        M = self.mass(phi)
        Mm = self.mass(phi, include_void=False) if with_fraction else None
        return solve_generalized(K, M, k, tol=self.eig_tol, seed=self.eig_seed, M_material=Mm)

    # -- values ------------------------------------------------------------
    def glandau(self, phi, check: bool = True) -> float:
        return self.spec.gamma * ginzburg_landau_energy(phi, self.asm, self.eps, self.scalar, check=check)

    def compliance(self, phi, K=None, lu=None):
        """Compliance f.u with K(phi) u = f; returns (value, u)."""
        if self.load is None:
            raise ValueError("no traction data configured")
        if not np.any(self.load):
            return 0.0, np.zeros_like(self.load)
        free = self.dofs.free
        if lu is None:
            K = self.stiffness(phi) if K is None else K
            lu = factorize(K.reduced(), order=K.order)
        u = np.zeros_like(self.load)
        u[free] = lu.solve(self.load[free])
        if not np.all(np.isfinite(u)):
            raise FloatingPointError("compliance solve produced non-finite displacements")
        return float(self.load @ u), u

    def evaluate(self, phi, check: bool = True) -> Evaluation:
        phi = np.asarray(phi, dtype=float)
        self.n_evals += 1
        spec = self.spec
        glandau = self.glandau(phi, check=check)
        lams = np.zeros(0)
        spectrum = None
        eig_part = 0.0
        if spec.indices:
            spectrum = self.spectrum(phi)
            lams = spectrum.values[np.array(spec.indices) - 1]
            eig_part = float(np.dot(spec.weights, lams))
        comp, u = 0.0, None
        if spec.compliance_weight:
            lu = spectrum.lu if spectrum is not None else None
            comp, u = self.compliance(phi, lu=lu)
        comp_part = spec.compliance_weight * comp
        J = eig_part + glandau + comp_part
        return Evaluation(J, lams, eig_part, glandau, comp, comp_part, spectrum, u)

    # -- gradients ---------------------------------------------------------
    def _scatter(self, integrand: np.ndarray) -> np.ndarray:
        """Assemble sum_q integrand[e, q] N_a(x_q) into nodal values."""
        el = self.mesh.elements
        contrib = np.einsum("eq...,qa->ea...", integrand, self.asm.N)
        n = self.mesh.n_nodes
        if contrib.ndim == 2:
            return np.bincount(el.ravel(), weights=contrib.ravel(), minlength=n)
        return np.column_stack([np.bincount(el.ravel(), weights=contrib[..., i].ravel(), minlength=n)
                                for i in range(contrib.shape[-1])])

    def _strain_energies(self, w):
        we = w[self.asm.edofs]
        emu = np.einsum("ea,qab,eb->eq", we, self.asm.kmu, we, optimize=True)
        elam = np.einsum("ea,qab,eb->eq", we, self.asm.klam, we, optimize=True)
        return emu, elam

    def eigenvalue_gradient(self, phi, lam: float, w: np.ndarray, check_norm: bool = True) -> np.ndarray:
        """d lambda / d phi at an M-normalised eigenvector ``w``."""
        if check_norm:
            M = self.mass(phi)
            nrm = w @ (M.matrix @ w)
            if abs(nrm - 1.0) > 1e-8:
                raise ValueError(f"eigenvector not M-normalised (w'Mw = {nrm:.12g})")
        phi_q = self.mesh.to_gauss(phi)
        dmu, dlam = self.material.lame_derivs(phi_q, self.eps)
        drho = self.material.density_deriv(phi_q, self.eps)
        emu, elam = self._strain_energies(w)
        we = w[self.asm.edofs]
        mw = np.einsum("ea,qab,eb->eq", we, self.asm.mq, we, optimize=True) * self.rho_spatial
        if self.scalar:
            integrand = dmu * emu + dlam * elam - lam * drho * mw
        else:
            integrand = dmu * emu[..., None] + dlam * elam[..., None] - lam * drho * mw[..., None]
        return self._scatter(integrand)

    def compliance_gradient(self, phi, u: np.ndarray) -> np.ndarray:
        phi_q = self.mesh.to_gauss(phi)
        dmu, dlam = self.material.lame_derivs(phi_q, self.eps)
        emu, elam = self._strain_energies(u)
        if self.scalar:
            integrand = -(dmu * emu + dlam * elam)
        else:
            integrand = -(dmu * emu[..., None] + dlam * elam[..., None])
        return self._scatter(integrand)

    def gradient(self, phi, ev: Evaluation | None = None) -> GradientField:
        phi = np.asarray(phi, dtype=float)
        ev = self.evaluate(phi) if ev is None else ev
        spec = self.spec
        eig = np.zeros_like(phi)
        for idx, c in zip(spec.indices, spec.weights):
            pair = ev.spectrum[idx - 1]
            eig = eig + c * self.eigenvalue_gradient(phi, pair.value, pair.vector, check_norm=False)
        gl = ginzburg_landau_gradient(phi, self.asm, self.eps, spec.gamma, self.scalar)
        comp = np.zeros_like(phi)
        if spec.compliance_weight:
            comp = spec.compliance_weight * self.compliance_gradient(phi, ev.displacement)
        if not self.scalar:
            eig, gl, comp = (materials.project_tangent(a) for a in (eig, gl, comp))
        return GradientField(eig, gl, comp)

    def total_objective(self, phi, check: bool = True) -> float:
        return self.evaluate(phi, check=check).J

    def total_gradient(self, phi) -> np.ndarray:
        return self.gradient(phi).total
