"""Phase-dependent elasticity and density, interpolation, cutoff and potential.

Two field representations are supported:

* ``scalar``: two phases (material/void) as one order parameter in [-1, 1],
  +1 being material.  Interpolations are evaluated directly.
* ``vector``: N phases as volume fractions on the Gibbs simplex, the last
  component being void.  Values are first projected onto the hyperplane
  ``sum = 1`` and the interpolants are wrapped by a C^{1,1} cutoff.

All functions are vectorised over leading axes.  For the vector
representation the trailing axis holds the N components.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


def lame_from_young(E: float, nu: float) -> tuple[float, float]:
    """Plane-strain Lame pair (mu, lambda) from Young's modulus and Poisson ratio."""
    mu = E / (2.0 * (1.0 + nu))
    lam = E * nu / ((1.0 + nu) * (1.0 - 2.0 * nu))
    return mu, lam


# ---------------------------------------------------------------------------
# cutoff

def cutoff(s, omega: float = 0.1):
    """C^{1,1} cutoff: identity on [0, 1], constant outside [-omega, 1+omega].

    The blends on (-omega, 0) and (1, 1+omega) are cubic Hermite pieces
    matching value and slope at both ends.
    """
    s = np.asarray(s, dtype=float)
    out = np.array(np.clip(s, -omega, 1.0 + omega))
    lo = (s > -omega) & (s < 0.0)
    t = s[lo] + omega
    out[lo] = -omega + 2.0 * t**2 / omega - t**3 / omega**2
    hi = (s > 1.0) & (s < 1.0 + omega)
    t = 1.0 + omega - s[hi]
    out[hi] = 1.0 + omega - (2.0 * t**2 / omega - t**3 / omega**2)
    return out


def cutoff_deriv(s, omega: float = 0.1):
    s = np.asarray(s, dtype=float)
    out = np.array(np.where((s >= 0.0) & (s <= 1.0), 1.0, 0.0))
    lo = (s > -omega) & (s < 0.0)
    t = s[lo] + omega
    out[lo] = 4.0 * t / omega - 3.0 * t**2 / omega**2
    hi = (s > 1.0) & (s < 1.0 + omega)
    t = 1.0 + omega - s[hi]
    out[hi] = 4.0 * t / omega - 3.0 * t**2 / omega**2
    return out


# ---------------------------------------------------------------------------
# interpolation functions (quadratic choice)

def interp_material(s):
    s = np.asarray(s, dtype=float)
    return s * s


def interp_material_deriv(s):
    return 2.0 * np.asarray(s, dtype=float)


def interp_void(s):
    s = np.asarray(s, dtype=float)
    return 1.0 - (s - 1.0) ** 2


def interp_void_deriv(s):
    return -2.0 * (np.asarray(s, dtype=float) - 1.0)


def project_sum(phi):
    """Orthogonal projection of the trailing axis onto {sum = 1}."""
    phi = np.asarray(phi, dtype=float)
    n = phi.shape[-1]
    return phi - ((phi.sum(axis=-1, keepdims=True) - 1.0) / n)


def project_tangent(u):
    """Orthogonal projection of the trailing axis onto {sum = 0}."""
    u = np.asarray(u, dtype=float)
    return u - u.mean(axis=-1, keepdims=True)


# ---------------------------------------------------------------------------
# potential

def psi0(phi, scalar: bool):
    """Smooth part of the multiwell potential, 1/2 (1 - |phi|^2)."""
    phi = np.asarray(phi, dtype=float)
    if scalar:
        return 0.5 * (1.0 - phi * phi)
    return 0.5 * (1.0 - np.sum(phi * phi, axis=-1))


def psi0_deriv(phi, scalar: bool):
    return -np.asarray(phi, dtype=float)


# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Phase:
    mu: float
    lame: float
    rho: float = 1.0

    def __post_init__(self):
        if not (self.mu > 0 and self.lame > -self.mu and self.rho > 0):
            raise ValueError(f"invalid phase parameters {self}")


@dataclass
class MaterialModel:
    """Per-phase isotropic tensors, densities and the void scaling.

    ``phases`` lists the N-1 materials; the void tensor and density default
    to ``alpha_void * C^1`` and ``beta_void * rho^1`` and are multiplied by
    ``eps**k`` and ``eps**l`` respectively.
    """

    phases: tuple[Phase, ...] = field(default_factory=lambda: (Phase(*lame_from_young(1.0, 0.3)),))
    alpha_void: float = 2e-4
    beta_void: float = 1e-4
    k: int = 1
    l: int = 2
    omega: float = 0.1
    representation: str = "scalar"

    def __post_init__(self):
        self.phases = tuple(self.phases)
        if not self.phases:
            raise ValueError("at least one material phase is required")
        if self.alpha_void <= 0 or self.beta_void <= 0:
            raise ValueError("void prefactors must be positive")
        if self.omega <= 0:
            raise ValueError("cutoff width must be positive")
        if self.representation not in ("scalar", "vector"):
            raise ValueError(f"unknown representation {self.representation!r}")
        if self.representation == "scalar" and len(self.phases) != 1:
            raise ValueError("scalar representation requires exactly one material phase")

    @property
    def n_phases(self) -> int:
        return len(self.phases) + 1

    @property
    def scalar(self) -> bool:
        return self.representation == "scalar"

    # -- scalar two-phase fast path --------------------------------------
    def alpha(self, phi, eps):
        """Stiffness factor alpha(phi) for the scalar representation."""
        s = 0.5 * (1.0 + np.asarray(phi, dtype=float))
        return interp_material(s) + self.alpha_void * eps**self.k * interp_void(1.0 - s)

    def alpha_deriv(self, phi, eps):
        s = 0.5 * (1.0 + np.asarray(phi, dtype=float))
        return 0.5 * (interp_material_deriv(s) - self.alpha_void * eps**self.k * interp_void_deriv(1.0 - s))

    def beta(self, phi, eps):
        s = 0.5 * (1.0 + np.asarray(phi, dtype=float))
        return interp_material(s) + self.beta_void * eps**self.l * interp_void(1.0 - s)

    def beta_deriv(self, phi, eps):
        s = 0.5 * (1.0 + np.asarray(phi, dtype=float))
        return 0.5 * (interp_material_deriv(s) - self.beta_void * eps**self.l * interp_void_deriv(1.0 - s))

    # -- generic coefficient fields ----------------------------------------
    def _vector_weights(self, phi, eps, which: str):
        p = project_sum(phi)
        mats = p[..., :-1]
        void = p[..., -1]
        if which == "stiffness":
            wm = cutoff(interp_material(mats), self.omega)
            wv = eps**self.k * self.alpha_void * cutoff(interp_void(void), self.omega)
            dm = cutoff_deriv(interp_material(mats), self.omega) * interp_material_deriv(mats)
            dv = eps**self.k * self.alpha_void * cutoff_deriv(interp_void(void), self.omega) * interp_void_deriv(void)
        else:
            wm = cutoff(interp_material(mats), self.omega)
            wv = eps**self.l * self.beta_void * cutoff(interp_void(void), self.omega)
            dm = cutoff_deriv(interp_material(mats), self.omega) * interp_material_deriv(mats)
            dv = eps**self.l * self.beta_void * cutoff_deriv(interp_void(void), self.omega) * interp_void_deriv(void)
        return wm, wv, dm, dv

    def lame_fields(self, phi, eps):
        """Effective (mu, lambda) at the given points."""
        ph1 = self.phases[0]
        if self.scalar:
            a = self.alpha(phi, eps)
            return ph1.mu * a, ph1.lame * a
        wm, wv, _, _ = self._vector_weights(phi, eps, "stiffness")
        mus = np.array([p.mu for p in self.phases])
        lams = np.array([p.lame for p in self.phases])
        return wm @ mus + wv * ph1.mu, wm @ lams + wv * ph1.lame

    def lame_derivs(self, phi, eps):
        """Derivatives of (mu, lambda) with respect to the field values.

        Scalar: arrays shaped like ``phi``.  Vector: trailing axis N, the
        chain rule through the sum projection makes each row tangential.
        """
        ph1 = self.phases[0]
        if self.scalar:
            da = self.alpha_deriv(phi, eps)
            return ph1.mu * da, ph1.lame * da
        _, _, dm, dv = self._vector_weights(phi, eps, "stiffness")
        mus = np.array([p.mu for p in self.phases])
        lams = np.array([p.lame for p in self.phases])
        gmu = np.concatenate([dm * mus, (dv * ph1.mu)[..., None]], axis=-1)
        glam = np.concatenate([dm * lams, (dv * ph1.lame)[..., None]], axis=-1)
        return project_tangent(gmu), project_tangent(glam)

    def density(self, phi, eps, include_void: bool = True):
        """Mass density rho(phi); ``include_void=False`` drops the void term."""
        ph1 = self.phases[0]
        if self.scalar:
            s = 0.5 * (1.0 + np.asarray(phi, dtype=float))
            out = interp_material(s)
            if include_void:
                out = out + self.beta_void * eps**self.l * interp_void(1.0 - s)
            return ph1.rho * out
        wm, wv, _, _ = self._vector_weights(phi, eps, "density")
        rhos = np.array([p.rho for p in self.phases])
        out = wm @ rhos
        if include_void:
            out = out + wv * ph1.rho
        return out

    def density_deriv(self, phi, eps):
        ph1 = self.phases[0]
        if self.scalar:
            return ph1.rho * self.beta_deriv(phi, eps)
        _, _, dm, dv = self._vector_weights(phi, eps, "density")
        rhos = np.array([p.rho for p in self.phases])
        g = np.concatenate([dm * rhos, (dv * ph1.rho)[..., None]], axis=-1)
        return project_tangent(g)

    # -- point-level API ---------------------------------------------------
    def stiffness_at(self, phi_pt, eps) -> np.ndarray:
        """Plane-strain elasticity matrix (Voigt, engineering shear) at one point."""
        phi_pt = np.asarray(phi_pt, dtype=float)
        if not np.all(np.isfinite(phi_pt)):
            raise ValueError("non-finite phase-field value")
        mu, lam = self.lame_fields(phi_pt, eps)
        return voigt_matrix(float(mu), float(lam))

    def density_at(self, phi_pt, eps) -> float:
        phi_pt = np.asarray(phi_pt, dtype=float)
        if not np.all(np.isfinite(phi_pt)):
            raise ValueError("non-finite phase-field value")
        return float(self.density(phi_pt, eps))

    def stiffness_deriv(self, phi_pt, eps) -> np.ndarray:
        """d C / d phi as Voigt matrices; shape (3, 3) scalar or (N, 3, 3) vector."""
        dmu, dlam = self.lame_derivs(np.asarray(phi_pt, dtype=float), eps)
        if self.scalar:
            return voigt_matrix(float(dmu), float(dlam))
        return np.stack([voigt_matrix(a, b) for a, b in zip(dmu, dlam)])

    def density_deriv_at(self, phi_pt, eps):
        d = self.density_deriv(np.asarray(phi_pt, dtype=float), eps)
        return float(d) if self.scalar else np.asarray(d)

    def pure_phase(self, i: int) -> np.ndarray | float:
        """Field value of pure phase ``i`` (0-based, last = void)."""
        if self.scalar:
            return 1.0 if i == 0 else -1.0
        e = np.zeros(self.n_phases)
        e[i] = 1.0
        return e


def voigt_matrix(mu: float, lam: float) -> np.ndarray:
    return np.array([[2 * mu + lam, lam, 0.0],
                     [lam, 2 * mu + lam, 0.0],
                     [0.0, 0.0, mu]])
