"""Projected-gradient minimisation over the admissible phase-field set.

The admissible set is {phi(x) in G pointwise, weighted mean = m}, where G is
[-1, 1] for the scalar representation and the Gibbs simplex for the vector
one.  Descent directions are H^1-smoothed gradients, S g with
S = (gamma*eps*L + W)^-1, and trial points are projected back onto the set.
A penalty mode replaces the obstacle projection by a quadratic penalty on the
negative parts plus linear projections onto the sum and mean constraints.
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.optimize as sopt
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import materials
from .eigensolver import EigenSolveError
from .objective import Evaluation, GradientField, Problem

log = logging.getLogger(__name__)

PROJ_TOL = 1e-13


# ---------------------------------------------------------------------------
# projection

@dataclass
class ProjectionResult:
    field: np.ndarray
    active: np.ndarray  # scalar: |phi| == 1, vector: phi^i == 0
    shift: np.ndarray | float  # constant multiplier of the mean constraint


def project_simplex(Y: np.ndarray) -> np.ndarray:
    """Row-wise Euclidean projection onto the probability simplex (sorted thresholds)."""
    Y = np.asarray(Y, dtype=float)
    n = Y.shape[-1]
    U = -np.sort(-Y, axis=-1)
    css = np.cumsum(U, axis=-1) - 1.0
    ind = np.arange(1, n + 1)
    cond = U - css / ind > 0
    r = n - 1 - np.argmax(cond[..., ::-1], axis=-1)
    theta = np.take_along_axis(css, r[..., None], axis=-1) / (r[..., None] + 1.0)
    return np.maximum(Y - theta, 0.0)


def _simplex_support(X):
    return X > 0.0


def _project_scalar(z, w, target):
    def mass(c):
        return w @ np.clip(z + c, -1.0, 1.0) - target

    lo, hi = -2.0 - z.max(), 2.0 - z.min()
    c = sopt.brentq(mass, lo, hi, xtol=1e-15, rtol=4 * np.finfo(float).eps, maxiter=500)
    # one exact correction on the current linear piece
    for _ in range(3):
        x = z + c
        free = (x > -1.0) & (x < 1.0)
        slope = w[free].sum()
        r = mass(c)
        if slope == 0.0 or abs(r) <= PROJ_TOL * max(1.0, w.sum()):
            break
        c_new = c - r / slope
        if abs(mass(c_new)) < abs(r):
            c = c_new
        else:
            break
    return np.clip(z + c, -1.0, 1.0), float(c)


def _project_vector(Z, w, target, max_iter=200):
    """Solve sum_i w_i P_G(z_i + t) = target for a tangential shift t.

    Semismooth Newton on the convex dual F(t) - t.target, where the gradient
    of F is the weighted sum of simplex projections.
    """
    n, N = Z.shape
    wsum = w.sum()

    def dual(t):
        Y = Z + t
        X = project_simplex(Y)
        F = w @ (0.5 * np.sum(Y * Y, axis=1) - 0.5 * np.sum((Y - X) ** 2, axis=1))
        return F - t @ target, X

    t = np.zeros(N)
    val, X = dual(t)
    ones = np.ones((N, N)) / N
    for _ in range(max_iter):
        r = target - w @ X
        if np.max(np.abs(r)) <= PROJ_TOL * max(1.0, wsum):
            break
        S = _simplex_support(X).astype(float)
        cnt = S.sum(axis=1)
        H = np.diag(w @ S) - np.einsum("i,ij,ik->jk", w / cnt, S, S)
        H = H + ones * max(wsum, 1.0) + 1e-14 * wsum * np.eye(N)
        d = np.linalg.solve(H, r)
        d -= d.mean()
        # full step when it reduces the residual (dual values lose precision
        # near the solution), otherwise Armijo on the dual
        step = 1.0
        slope = -r @ d
        new_val, Xn = dual(t + d)
        if np.max(np.abs(target - w @ Xn)) < np.max(np.abs(r)):
            t = t + d
            val, X = new_val, Xn
            continue
        while True:
            new_val, Xn = dual(t + step * d)
            if new_val <= val + 1e-4 * step * slope + 1e-15 * abs(val) or step < 1e-12:
                break
            step *= 0.5
        t = t + step * d
        val, X = new_val, Xn
    else:
        raise RuntimeError("simplex projection shift did not converge")
    return X, t


def _admissible(z, m, w, fixed, fixed_value, tol: float = 1e-13) -> bool:
    scalar = z.ndim == 1
    if scalar:
        fv = 1.0 if fixed_value is None else float(fixed_value)
        if m.ndim != 0 or np.any(np.abs(z) > 1.0):
            return False
    else:
        fv = np.eye(z.shape[1])[0] if fixed_value is None else np.asarray(fixed_value, dtype=float)
        if m.shape != (z.shape[1],) or np.any(z < 0.0) or np.max(np.abs(z.sum(axis=1) - 1.0)) > tol:
            return False
    if np.any(z[fixed] != fv):
        return False
    return bool(np.max(np.abs(w @ z / w.sum() - m)) <= tol)


def project_admissible(field, m, weights=None, fixed=None, fixed_value=None) -> ProjectionResult:
    """Weighted L2-closest admissible field with prescribed weighted mean ``m``.

    ``weights`` are nodal quadrature weights (uniform if omitted).  Nodes in
    the boolean mask ``fixed`` are set to ``fixed_value`` and excluded from the
    shift; the mean is taken over all nodes.
    """
    z = np.asarray(field, dtype=float)
    if not np.all(np.isfinite(z)):
        raise ValueError("non-finite field values")
    scalar = z.ndim == 1
    n = z.shape[0]
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=float)
    fixed = np.zeros(n, dtype=bool) if fixed is None else np.asarray(fixed, dtype=bool)
    W = w.sum()
    m = np.asarray(m, dtype=float)
    if _admissible(z, m, w, fixed, fixed_value):
        # already admissible up to rounding: return it unchanged so that P(P(z)) == P(z)
        active = np.abs(z) >= 1.0 if scalar else z <= 0.0
        return ProjectionResult(z.copy(), active, 0.0 if scalar else np.zeros(z.shape[1]))
    if scalar:
        if m.ndim != 0 or not -1.0 < float(m) < 1.0:
            raise ValueError(f"scalar mean must lie in (-1, 1), got {m}")
        fv = 1.0 if fixed_value is None else float(fixed_value)
        target = float(m) * W - fv * w[fixed].sum()
        wf = w[~fixed]
        if not -wf.sum() < target < wf.sum():
            raise ValueError("mean constraint infeasible with the fixed region")
        out = np.empty(n)
        out[fixed] = fv
        out[~fixed], shift = _project_scalar(z[~fixed], wf, target)
        active = np.abs(out) >= 1.0
        return ProjectionResult(out, active, shift)
    N = z.shape[1]
    if m.shape != (N,) or np.any(m <= 0.0) or np.any(m >= 1.0) or abs(m.sum() - 1.0) > 1e-12:
        raise ValueError(f"vector mean must lie in the open simplex, got {m}")
    fv = np.eye(N)[0] if fixed_value is None else np.asarray(fixed_value, dtype=float)
    target = m * W - w[fixed].sum() * fv
    wf = w[~fixed]
    if np.any(target <= 0.0):
        raise ValueError("mean constraint infeasible with the fixed region")
    out = np.empty_like(z)
    out[fixed] = fv
    out[~fixed], shift = _project_vector(z[~fixed], wf, target)
    return ProjectionResult(out, out <= 0.0, shift)


# ---------------------------------------------------------------------------
# state

@dataclass(frozen=True)
class HistoryRow:
    iter: int
    J: float
    eigenvalues: tuple
    glandau: float
    compliance: float
    step: float
    gradnorm: float


@dataclass
class OptState:
    phi: np.ndarray
    iteration: int
    eps: float
    step: float
    history: list[HistoryRow] = field(default_factory=list)
    status: str = "running"
    evaluation: Evaluation | None = field(default=None, repr=False)
    gradient: GradientField | None = field(default=None, repr=False)
    gradnorm: float = float("nan")

    @property
    def J(self) -> float:
        return self.evaluation.J

    @property
    def converged(self) -> bool:
        return self.status in ("converged", "stationary")


@dataclass
class OptOptions:
    tol_rel: float = 1e-3
    tol_abs: float = 0.0
    max_iter: int = 2000
    tau0: float = 1.0
    tau_max: float = 1e4
    c1: float = 1e-4
    max_halvings: int = 40
    mode: str = "projection"
    delta: float = 1e-3

    def __post_init__(self):
        if self.mode not in ("projection", "penalty"):
            raise ValueError(f"unknown optimizer mode {self.mode!r}")
        if self.tol_rel < 0 or self.tol_abs < 0 or self.max_iter < 0:
            raise ValueError("tolerances and max_iter must be nonnegative")
        if not 0 < self.c1 < 1:
            raise ValueError("c1 must lie in (0, 1)")
        if self.delta <= 0:
            raise ValueError("penalty weight delta must be positive")


class Optimizer:
    """H^1-scaled projected gradient with Armijo backtracking on one Problem."""

    def __init__(self, problem: Problem, mean, options: OptOptions | None = None, fixed=None, callback=None):
        self.problem = problem
        self.options = options or OptOptions()
        self.mean = np.asarray(mean, dtype=float)
        asm = problem.asm
        self.w = asm.lumped
        self.fixed = np.zeros(problem.mesh.n_nodes, dtype=bool) if fixed is None else np.asarray(fixed, dtype=bool)
        self.fixed_value = 1.0 if problem.scalar else problem.material.pure_phase(0)
        # H^1 Riesz map on the free nodes; fixed nodes get a zero direction
        self._free = ~self.fixed
        A = (problem.spec.gamma * problem.eps) * asm.laplacian + sp.diags(self.w)
        A = sp.csr_matrix(A)[self._free][:, self._free]
        self._smoother = spla.splu(sp.csc_matrix(A))
        self.callback = callback

    # -- building blocks -------------------------------------------------
    def project(self, z) -> ProjectionResult:
        return project_admissible(z, self.mean, self.w, self.fixed, self.fixed_value)

    def smooth(self, g) -> np.ndarray:
        g = np.asarray(g, dtype=float)
        out = np.zeros_like(g)
        out[self._free] = self._smoother.solve(np.ascontiguousarray(g[self._free]))
        return out

    def norm2(self, u) -> float:
        u = np.asarray(u)
        return float(self.w @ (u * u if u.ndim == 1 else np.sum(u * u, axis=1)))

    def gradnorm(self, phi, g) -> float:
        """Lumped-L2 norm of the unit projected-gradient step; zero exactly at KKT points."""
        return float(np.sqrt(self.norm2(self.project(phi - self._direction_l2(g)).field - phi)))

    def _evaluate(self, phi) -> Evaluation:
        return self.problem.evaluate(phi, check=self.options.mode == "projection")

    def _row(self, it, ev, step, gnorm) -> HistoryRow:
        return HistoryRow(it, ev.J, tuple(float(v) for v in ev.eigenvalues), ev.glandau, ev.compliance,
                          float(step), float(gnorm))

    def _penalty(self, phi):
        delta = self.options.delta
        coef = self.problem.spec.gamma / (delta * self.problem.eps)
        return coef * penalty_value(phi, self.w, self.problem.scalar), coef

    def _merit(self, phi, ev) -> float:
        if self.options.mode == "projection":
            return ev.J
        return ev.J + self._penalty(phi)[0]

    def _merit_gradient(self, phi, grad: GradientField) -> np.ndarray:
        g = grad.total
        if self.options.mode == "penalty":
            g = g + penalty_gradient(phi, self.w, self.problem.spec.gamma, self.problem.eps, self.options.delta,
                                     self.problem.scalar)
        return g

    def _trial(self, phi, d, tau):
        if self.options.mode == "projection":
            return self.project(phi - tau * d).field
        t = phi - tau * d
        t[self.fixed] = self.fixed_value
        return t

    def _direction_l2(self, g):
        d = g / (self.w if g.ndim == 1 else self.w[:, None])
        if self.options.mode == "penalty":
            d = _linear_projection(d, self.w, self.problem.scalar)
        return d

    def _direction(self, g):
        d = self.smooth(g)
        if self.options.mode == "penalty":
            d = _linear_projection(d, self.w, self.problem.scalar)
        return d

    # -- iteration --------------------------------------------------------
    def initial_state(self, phi0) -> OptState:
        phi = np.array(phi0, dtype=float)
        if self.options.mode == "projection":
            phi = self.project(phi).field
        ev = self._evaluate(phi)
        grad = self.problem.gradient(phi, ev)
        gn = self._stationarity(phi, grad)
        state = OptState(phi, 0, self.problem.eps, self.options.tau0, [], "running", ev, grad, gn)
        state.history.append(self._row(0, ev, 0.0, gn))
        return state

    def _stationarity(self, phi, grad):
        g = self._merit_gradient(phi, grad)
        if self.options.mode == "projection":
            return self.gradnorm(phi, g)
        d = self._direction(g)
        d[self.fixed] = 0.0
        return float(np.sqrt(self.norm2(d)))

    def step(self, state: OptState, grad: GradientField | None = None) -> OptState:
        """One Armijo-controlled projected-gradient step from ``state``."""
        grad = state.gradient if grad is None else grad
        opts = self.options
        phi = state.phi
        f0 = self._merit(phi, state.evaluation)
        g = self._merit_gradient(phi, grad)
        if not np.any(g):
            return replace(state, status="stationary", gradnorm=0.0)
        d = self._direction(g)
        tau = state.step
        scaled = True
        halvings = 0
        while halvings <= opts.max_halvings:
            trial = self._trial(phi, d, tau)
            diff2 = self.norm2(trial - phi)
            if diff2 == 0.0:
                return replace(state, status="stationary")
            if scaled and np.sum(g * (trial - phi)) >= 0.0:
                # the smoothed step is not a descent direction after projection;
                # the lumped-L2 gradient is, for small enough tau
                d = self._direction_l2(g)
                scaled = False
                continue
            try:
                ev = self._evaluate(trial)
            except (EigenSolveError, FloatingPointError) as exc:
                log.debug("trial evaluation failed at tau=%g: %s", tau, exc)
                tau *= 0.5
                halvings += 1
                continue
            f1 = self._merit(trial, ev)
            if f1 <= f0 - opts.c1 / tau * diff2:
                new_grad = self.problem.gradient(trial, ev)
                gn = self._stationarity(trial, new_grad)
                it = state.iteration + 1
                hist = state.history + [self._row(it, ev, tau, gn)]
                # grow the step only after a first-try acceptance
                next_tau = min(2.0 * tau, opts.tau_max) if halvings == 0 else tau
                return OptState(trial, it, state.eps, next_tau, hist, "running", ev, new_grad, gn)
            tau *= 0.5
            halvings += 1
        return replace(state, status="stalled")

    def run(self, phi0=None, state: OptState | None = None) -> OptState:
        opts = self.options
        state = self.initial_state(phi0) if state is None else state
        self.last_state = state
        g0 = state.gradnorm
        tol = opts.tol_abs + opts.tol_rel * g0
        t0 = time.perf_counter()
        while True:
            if state.gradnorm <= tol:
                state.status = "converged"
                break
            if state.iteration >= opts.max_iter:
                state.status = "max_iter"
                break
            try:
                new = self.step(state)
            except Exception as exc:
                log.error("optimizer aborted at iteration %d", state.iteration)
                state.status = "failed"
                self.last_state = state
                exc.last_state = state
                raise
            if new.status != "running":
                state = new
                break
            state = new
            self.last_state = state
            if self.callback is not None:
                self.callback(state)
        log.info("eps=%g: %s after %d iterations (%.1fs), J=%.6g", state.eps, state.status, state.iteration,
                 time.perf_counter() - t0, state.J)
        return state


def run(problem: Problem, phi0, mean, options: OptOptions | None = None, fixed=None, callback=None) -> OptState:
    return Optimizer(problem, mean, options, fixed, callback).run(phi0)


@dataclass
class ContinuationResult:
    eps: float
    state: OptState

    @property
    def gamma_E(self) -> float:
        return self.state.evaluation.glandau

    @property
    def lambda_1(self) -> float:
        return float(self.state.evaluation.spectrum.values[0])


def epsilon_continuation(make_problem, phi0, schedule, mean, options: OptOptions | None = None, fixed=None,
                         callback=None) -> list[ContinuationResult]:
    """Run the optimiser for each eps in a strictly decreasing schedule, warm starting.

    ``make_problem(eps)`` builds the Problem for one interface width.
    """
    schedule = [float(e) for e in schedule]
    if not schedule:
        raise ValueError("empty eps schedule")
    if any(b >= a for a, b in zip(schedule, schedule[1:])):
        raise ValueError("eps schedule must be strictly decreasing")
    out = []
    phi = np.asarray(phi0, dtype=float)
    for eps in schedule:
        problem = make_problem(eps)
        h = max(problem.mesh.hx, problem.mesh.hy)
        if h > eps / 2:
            log.warning("mesh size %.3g under-resolves eps=%.3g (h > eps/2)", h, eps)
        fix = fixed(problem.mesh) if callable(fixed) else fixed
        state = run(problem, phi, mean, options, fix, callback)
        out.append(ContinuationResult(eps, state))
        phi = state.phi
    return out


# ---------------------------------------------------------------------------
# penalty mode

def _negative_parts(phi, scalar: bool):
    phi = np.asarray(phi, dtype=float)
    if scalar:
        # two-component view ((1 + phi)/2, (1 - phi)/2) of the scalar field
        phi = 0.5 * np.column_stack([1.0 + phi, 1.0 - phi])
    return np.minimum(phi, 0.0)


def penalty_value(phi, w, scalar: bool = False) -> float:
    """Lumped integral of sum_i min(phi^i, 0)^2."""
    neg = _negative_parts(phi, scalar)
    return float(w @ np.sum(neg**2, axis=1))


def penalty_gradient(phi, w, gamma, eps, delta, scalar: bool = False):
    """Nodal derivative of gamma/(delta*eps) * penalty_value."""
    if delta <= 0:
        raise ValueError("penalty weight delta must be positive")
    phi = np.asarray(phi, dtype=float)
    coef = gamma / (delta * eps)
    if scalar:
        neg = _negative_parts(phi, True)
        return coef * w * (neg[:, 0] - neg[:, 1])
    return coef * w[:, None] * 2.0 * np.minimum(phi, 0.0)


def _linear_projection(u, w, scalar: bool):
    """P = P_TSigma o P_mean on a direction field (weighted mean removed)."""
    u = np.asarray(u, dtype=float)
    if scalar:
        return u - (w @ u) / w.sum()
    u = materials.project_tangent(u)
    return u - (w @ u) / w.sum()


def negative_part_norm(phi, w) -> float:
    """Discrete L2 norm of [phi]_- (vector representation)."""
    neg = np.minimum(np.asarray(phi, dtype=float), 0.0)
    return float(np.sqrt(w @ np.sum(neg * neg, axis=1)))


def penalty_mode_step(phi, delta: float, f, L, w, gamma: float, eps: float, tau: float = 1.0, smoother=None):
    """One preconditioned gradient step on the penalised energy

    I(phi) = gamma*eps/2 |grad phi|^2 + gamma/(delta*eps) sum_i [phi^i]_-^2 - (f, phi)

    over the affine set {sum_i phi^i = 1, weighted mean fixed}; ``f`` is a
    fixed nodal (dual) force.  The update is projected by P_TSigma o P_mean.
    """
    if delta <= 0:
        raise ValueError("penalty weight delta must be positive")
    phi = np.asarray(phi, dtype=float)
    g = gamma * eps * (L @ phi) + penalty_gradient(phi, w, gamma, eps, delta) - f
    if smoother is None:
        smoother = spla.splu(sp.csc_matrix(gamma * eps * L + sp.diags(w)))
    d = _linear_projection(smoother.solve(g), w, scalar=False)
    return phi - tau * d


def solve_penalized(phi0, delta: float, f, L, w, gamma: float, eps: float, max_iter: int = 100):
    """Minimiser of the penalised energy of :func:`penalty_mode_step` (semismooth Newton).

    The energy is convex and piecewise quadratic; Newton on the KKT system of
    the affine constraints terminates once the negative set stops changing.
    """
    if delta <= 0:
        raise ValueError("penalty weight delta must be positive")
    phi = np.array(phi0, dtype=float)
    n, N = phi.shape
    coef = gamma / (delta * eps)
    # constraints: nodal sums = 1 (n rows), weighted component means (N - 1 rows)
    rows_sum = sp.hstack([sp.identity(n)] * N)
    rows_mean = sp.lil_matrix((N - 1, n * N))
    for i in range(N - 1):
        rows_mean[i, i * n:(i + 1) * n] = w
    A = sp.vstack([rows_sum, rows_mean.tocsr()]).tocsr()
    LL = sp.block_diag([gamma * eps * L] * N)
    fv = f.T.ravel()
    x = phi.T.ravel()
    b = A @ x
    prev = None
    for it in range(max_iter):
        neg = x < 0.0
        D = sp.diags(2.0 * coef * np.tile(w, N) * neg)
        H = (LL + D).tocsc()
        K = sp.bmat([[H, A.T], [A, None]], format="csc")
        rhs = np.concatenate([fv, b])
        sol = spla.spsolve(K, rhs)
        x = sol[: n * N]
        if prev is not None and np.array_equal(prev, x < 0.0):
            break
        prev = x < 0.0
    return x.reshape(N, n).T
