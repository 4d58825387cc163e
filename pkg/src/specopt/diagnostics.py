"""Post-processing checks of the sharp-interface behaviour of phase-field optima.

Interfaces are extracted with marching squares on the nodal grid.  Curvature
uses the sign convention kappa = -div n with n the outward normal of the
material, so a material disc of radius R has kappa = -1/R.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.integrate as sint
import scipy.optimize as sopt
import scipy.sparse as sp
from scipy.interpolate import RegularGridInterpolator
from scipy.sparse.csgraph import dijkstra
from scipy.spatial import cKDTree

from . import materials
from .eigensolver import EigenPair, solve_generalized
from .mesh_fem import Assembler, SparseSymOperator, StructuredMesh, shape_gradients, strain_matrix
from .objective import Problem, ginzburg_landau_energy
from .optimizer import project_simplex

SIGMA_SCALAR = math.pi / 2


# ---------------------------------------------------------------------------
# transition constant

@dataclass
class TransitionConstant:
    pair: tuple[int, int]
    sigma: float
    path: np.ndarray = field(repr=False)
    profile_energy: float = float("nan")


def _symmetric_psi0(phi):
    return materials.psi0(phi, scalar=False)


def _path_length(path, psi0, nq: int = 8):
    """Length of a polyline in the metric sqrt(2 psi0), Gauss-Legendre per segment."""
    xq, wq = np.polynomial.legendre.leggauss(nq)
    t = 0.5 * (xq + 1.0)
    a, b = path[:-1], path[1:]
    pts = a[:, None, :] + t[None, :, None] * (b - a)[:, None, :]
    dens = np.sqrt(np.maximum(2.0 * psi0(pts), 0.0))
    seg = np.linalg.norm(b - a, axis=1)
    return float(np.sum(seg * (0.5 * dens @ wq)))


def _profile_energy(path, psi0):
    """int |d_z Phi|^2 dz along the path reparametrised by the optimal-profile ODE."""
    mid = 0.5 * (path[1:] + path[:-1])
    ds = np.linalg.norm(np.diff(path, axis=0), axis=1)
    dens = np.sqrt(np.maximum(2.0 * psi0(mid), 0.0))
    ok = dens > 0
    dz = ds[ok] / dens[ok]
    return float(np.sum(ds[ok] ** 2 / dz))


def transition_constant(psi0=None, i: int = 0, j: int = 1, n_phases: int | None = None,
                        resolution: int = 60, n_smooth: int = 64) -> TransitionConstant:
    """Geodesic distance between pure phases e_i and e_j in the metric sqrt(2 psi0).

    ``n_phases=None`` selects the scalar double-obstacle case on [-1, 1]
    (pair indices are then ignored).  Otherwise a shortest path on a lattice
    of the simplex is computed and then relaxed as a polyline.
    """
    if n_phases is None:
        f = psi0 if psi0 is not None else (lambda s: materials.psi0(s, scalar=True))
        sigma, _ = sint.quad(lambda s: math.sqrt(max(2.0 * f(s), 0.0)), -1.0, 1.0, epsabs=1e-12, limit=200)
        path = np.linspace(-1.0, 1.0, 2 * resolution + 1)[:, None]
        # optimal profile sin(z) on (-pi/2, pi/2) for the default potential
        prof = float("nan")
        if psi0 is None:
            prof, _ = sint.quad(lambda z: math.cos(z) ** 2, -math.pi / 2, math.pi / 2)
        return TransitionConstant((0, 1), float(sigma), path, float(prof))
    N = int(n_phases)
    if not (0 <= i < N and 0 <= j < N and i != j):
        raise ValueError(f"invalid phase pair ({i}, {j}) for N={N}")
    psi0 = _symmetric_psi0 if psi0 is None else psi0
    lattice = np.array([c for c in itertools.product(range(resolution + 1), repeat=N - 1)
                        if sum(c) <= resolution])
    pts = np.column_stack([lattice, resolution - lattice.sum(axis=1)]) / resolution
    index = {tuple(c): k for k, c in enumerate(lattice)}
    rows, cols, vals = [], [], []
    steps = [v for v in itertools.product((-1, 0, 1), repeat=N - 1) if any(v)]
    for k, c in enumerate(lattice):
        for v in steps:
            nb = tuple(np.add(c, v))
            m = index.get(nb)
            if m is None or m < k:
                continue
            seg = pts[[k, m]]
            rows.append(k)
            cols.append(m)
            vals.append(_path_length(seg, psi0, nq=4) + 1e-300)
    G = sp.coo_matrix((vals, (rows, cols)), shape=(len(pts),) * 2).tocsr()
    ei, ej = np.eye(N)[i], np.eye(N)[j]
    src = int(np.argmin(np.linalg.norm(pts - ei, axis=1)))
    dst = int(np.argmin(np.linalg.norm(pts - ej, axis=1)))
    _, pred = dijkstra(G, directed=False, indices=src, return_predecessors=True)
    chain = [dst]
    while chain[-1] != src:
        chain.append(pred[chain[-1]])
        if chain[-1] < 0:
            raise RuntimeError("lattice path search failed")
    path = pts[chain[::-1]]
    # resample by arclength and relax the interior points
    s = np.concatenate([[0.0], np.cumsum(np.linalg.norm(np.diff(path, axis=0), axis=1))])
    u = np.linspace(0.0, s[-1], n_smooth + 1)
    path = np.column_stack([np.interp(u, s, path[:, c]) for c in range(N)])

    def length(x):
        inner = project_simplex(x.reshape(-1, N))
        return _path_length(np.vstack([ei, inner, ej]), psi0)

    res = sopt.minimize(length, path[1:-1].ravel(), method="L-BFGS-B", options={"maxiter": 500})
    if not (res.success or res.status == 2):
        raise RuntimeError(f"path refinement did not converge: {res.message}")
    path = np.vstack([ei, project_simplex(res.x.reshape(-1, N)), ej])
    sigma = _path_length(path, psi0, nq=16)
    return TransitionConstant((i, j), sigma, path, _profile_energy(_refine(path, 32), psi0))


def _refine(path, k):
    t = np.linspace(0.0, 1.0, k + 1)[:-1]
    out = (path[:-1, None, :] + t[None, :, None] * np.diff(path, axis=0)[:, None, :]).reshape(-1, path.shape[1])
    return np.vstack([out, path[-1]])


# ---------------------------------------------------------------------------
# interface extraction

@dataclass
class InterfacePolyline:
    points: np.ndarray
    normals: np.ndarray = field(repr=False)
    curvature: np.ndarray = field(repr=False)
    closed: bool = False

    @property
    def length(self) -> float:
        p = np.vstack([self.points, self.points[:1]]) if self.closed else self.points
        return float(np.sum(np.linalg.norm(np.diff(p, axis=0), axis=1)))

    def weights(self) -> np.ndarray:
        """Arclength quadrature weight per point."""
        p = self.points
        seg = np.linalg.norm(np.diff(np.vstack([p, p[:1]]) if self.closed else p, axis=0), axis=1)
        w = np.zeros(len(p))
        if self.closed:
            w += 0.5 * seg
            w += 0.5 * np.roll(seg, 1)
        else:
            w[:-1] += 0.5 * seg
            w[1:] += 0.5 * seg
        return w


def marching_squares(values: np.ndarray, hx: float, hy: float, level: float = 0.0):
    """Level-set chains of a nodal grid (ny+1, nx+1) as (points, closed) pairs."""
    G = np.asarray(values, dtype=float) - level
    ny1, nx1 = G.shape
    nx, ny = nx1 - 1, ny1 - 1
    above = G >= 0.0
    H = ny1 * nx  # horizontal edges (j, i) -- (j, i+1)
    pts = {}

    def point(eid):
        if eid in pts:
            return
        if eid < H:
            j, i = divmod(eid, nx)
            v0, v1 = G[j, i], G[j, i + 1]
            t = v0 / (v0 - v1)
            pts[eid] = ((i + t) * hx, j * hy)
        else:
            j, i = divmod(eid - H, nx1)
            v0, v1 = G[j, i], G[j + 1, i]
            t = v0 / (v0 - v1)
            pts[eid] = (i * hx, (j + t) * hy)

    a, b = above[:-1, :-1], above[:-1, 1:]
    c, d = above[1:, 1:], above[1:, :-1]
    case = a.astype(int) + 2 * b + 4 * c + 8 * d
    adj: dict[int, list[int]] = {}

    def link(e0, e1):
        point(e0)
        point(e1)
        adj.setdefault(e0, []).append(e1)
        adj.setdefault(e1, []).append(e0)

    for j, i in zip(*np.nonzero((case != 0) & (case != 15))):
        bottom = j * nx + i
        top = (j + 1) * nx + i
        left = H + j * nx1 + i
        right = H + j * nx1 + i + 1
        crossed = []
        if a[j, i] != b[j, i]:
            crossed.append(bottom)
        if b[j, i] != c[j, i]:
            crossed.append(right)
        if c[j, i] != d[j, i]:
            crossed.append(top)
        if d[j, i] != a[j, i]:
            crossed.append(left)
        if len(crossed) == 2:
            link(*crossed)
            continue
        # saddle: cut off the corners whose sign differs from the cell centre
        centre = 0.25 * (G[j, i] + G[j, i + 1] + G[j + 1, i + 1] + G[j + 1, i]) >= 0.0
        if a[j, i] != centre:
            link(bottom, left)
        if b[j, i] != centre:
            link(bottom, right)
        if c[j, i] != centre:
            link(right, top)
        if d[j, i] != centre:
            link(top, left)

    chains = []
    seen = set()
    starts = [e for e, nb in adj.items() if len(nb) == 1] + list(adj)
    for s0 in starts:
        if s0 in seen:
            continue
        chain = [s0]
        seen.add(s0)
        prev, cur = None, s0
        closed = False
        while True:
            nxt = [e for e in adj[cur] if e != prev and (e not in seen or (e == s0 and len(chain) > 2))]
            if not nxt:
                break
            if nxt[0] == s0:
                closed = True
                break
            prev, cur = cur, nxt[0]
            seen.add(cur)
            chain.append(cur)
        chains.append((np.array([pts[e] for e in chain]), closed))
    return chains


def _grid_interpolator(mesh: StructuredMesh, grid_values):
    x = np.linspace(0.0, mesh.Lx, mesh.nx + 1)
    y = np.linspace(0.0, mesh.Ly, mesh.ny + 1)
    interp = RegularGridInterpolator((y, x), grid_values, bounds_error=False, fill_value=None)
    return lambda p: interp(np.column_stack([p[:, 1], p[:, 0]]))


def _levelset_geometry(mesh: StructuredMesh, G):
    """Grid gradient and div(grad G/|grad G|) from second-order differences."""
    gy, gx = np.gradient(G, mesh.hy, mesh.hx)
    gxy, gxx = np.gradient(gx, mesh.hy, mesh.hx)
    gyy, _ = np.gradient(gy, mesh.hy, mesh.hx)
    # compact second differences in the interior
    gxx[:, 1:-1] = (G[:, 2:] - 2 * G[:, 1:-1] + G[:, :-2]) / mesh.hx**2
    gyy[1:-1, :] = (G[2:, :] - 2 * G[1:-1, :] + G[:-2, :]) / mesh.hy**2
    norm2 = gx**2 + gy**2
    with np.errstate(divide="ignore", invalid="ignore"):
        div = (gxx * gy**2 - 2 * gx * gy * gxy + gyy * gx**2) / norm2**1.5
    div[~np.isfinite(div)] = 0.0
    return gx, gy, div


def _circle_curvature(p, closed, normals, span):
    """Signed curvature of circles through p[i-k], p[i], p[i+k]."""
    n = len(p)
    out = np.full(n, np.nan)
    ds = np.linalg.norm(np.diff(p, axis=0), axis=1)
    k = max(2, int(round(span / max(np.median(ds) if ds.size else 1.0, 1e-300))))
    for i in range(n):
        if closed:
            i0, i2 = (i - k) % n, (i + k) % n
        else:
            if i - k < 0 or i + k >= n:
                continue
            i0, i2 = i - k, i + k
        a, b, c = p[i0], p[i], p[i2]
        cross = (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
        den = np.linalg.norm(b - a) * np.linalg.norm(c - b) * np.linalg.norm(c - a)
        kap = 2.0 * abs(cross) / den if den > 0 else 0.0
        out[i] = kap * np.sign(np.dot(a + c - 2 * b, normals[i]))
    return out


def extract_interface(values, mesh: StructuredMesh, level: float = 0.0, curvature: str = "levelset",
                      span: float | None = None) -> list[InterfacePolyline]:
    """Level line ``values = level`` with normals pointing towards decreasing values.

    With ``values`` positive in the material this is the outward normal of the
    material.  ``curvature`` is ``"levelset"`` (kappa = div(grad u/|grad u|)
    interpolated from the grid) or ``"circle"`` (circumscribed circles along
    the polyline, stencil half-width ``span``, default 4h).
    """
    G = mesh.grid(np.asarray(values, dtype=float))
    chains = marching_squares(G, mesh.hx, mesh.hy, level)
    if not chains:
        return []
    gx, gy, div = _levelset_geometry(mesh, G)
    fx, fy, fk = (_grid_interpolator(mesh, a) for a in (gx, gy, div))
    out = []
    for p, closed in chains:
        g = np.column_stack([fx(p), fy(p)])
        nrm = -g / np.maximum(np.linalg.norm(g, axis=1, keepdims=True), 1e-300)
        if curvature == "levelset":
            kap = fk(p)
        elif curvature == "circle":
            kap = _circle_curvature(p, closed, nrm, span if span is not None else 4 * max(mesh.hx, mesh.hy))
        else:
            raise ValueError(f"unknown curvature method {curvature!r}")
        out.append(InterfacePolyline(p, nrm, kap, closed))
    return out


def _scalar_view(phi):
    phi = np.asarray(phi, dtype=float)
    if phi.ndim == 1:
        return phi
    if phi.shape[1] != 2:
        raise ValueError("a scalar interface view needs N = 2")
    return phi[:, 0] - phi[:, 1]


def interface_perimeter(phi, mesh: StructuredMesh) -> float:
    return sum(pl.length for pl in extract_interface(_scalar_view(phi), mesh))


# ---------------------------------------------------------------------------
# Gamma-limit and equipartition

def _energy_parts(phi, asm: Assembler, eps: float):
    phi = np.asarray(phi, dtype=float)
    scalar = phi.ndim == 1
    L = asm.laplacian
    grad2 = float(phi @ (L @ phi)) if scalar else float(np.sum(phi * (L @ phi)))
    pot = float(asm.lumped @ materials.psi0(phi, scalar))
    return eps * grad2, pot / eps


def gamma_limit_check(phi, asm: Assembler, eps: float, sigma: float = SIGMA_SCALAR) -> float:
    """|E(phi) - sigma P| / E(phi) with P the perimeter of the zero level set."""
    phi = np.asarray(phi, dtype=float)
    E = ginzburg_landau_energy(phi, asm, eps, phi.ndim == 1, check=False)
    lines = extract_interface(_scalar_view(phi), asm.mesh)
    if E <= 1e-14 and not lines:
        return 0.0
    if not lines:
        raise ValueError("no zero level set found")
    P = sum(pl.length for pl in lines)
    return abs(E - sigma * P) / E


def equipartition_residual(phi, asm: Assembler, eps: float) -> float:
    """|int eps|grad phi|^2 - (2/eps) int psi0| / E; zero for a pure phase."""
    g, p = _energy_parts(phi, asm, eps)
    E = 0.5 * g + p
    if E <= 1e-14:
        return 0.0
    return abs(g - 2.0 * p) / E


# ---------------------------------------------------------------------------
# sharp-interface optimality residual

@dataclass
class GMVResult:
    rms: float
    normalized: float
    theta: float
    points: np.ndarray = field(repr=False)
    residual: np.ndarray = field(repr=False)
    terms: dict = field(repr=False, default_factory=dict)


def _element_lookup(mesh: StructuredMesh, p):
    i = np.clip((p[:, 0] / mesh.hx).astype(int), 0, mesh.nx - 1)
    j = np.clip((p[:, 1] / mesh.hy).astype(int), 0, mesh.ny - 1)
    return j * mesh.nx + i


def _centre_strains(mesh: StructuredMesh, edofs, w):
    B = strain_matrix(shape_gradients(np.zeros(1), np.zeros(1), mesh.hx, mesh.hy))[0]  # (3, 8)
    return w[edofs] @ B.T  # (ne, 3) engineering shear


def _strain_energy(strain, mu, lam):
    e11, e22, g12 = strain[:, 0], strain[:, 1], strain[:, 2]
    return 2 * mu * (e11**2 + e22**2 + 0.5 * g12**2) + lam * (e11 + e22) ** 2


def gmv_residual(phi, problem: Problem, spectrum=None, sigma: float = SIGMA_SCALAR,
                 offset: float | None = None, boundary_margin: float | None = None,
                 curvature: str = "levelset", u=None, exclude=None) -> GMVResult:
    """Pointwise residual of the sharp-interface optimality condition on the zero level set.

    Material-side quantities are sampled a distance ``offset`` (default
    pi*eps/2, the half width of the optimal profile) inside the material along
    the normal.  The constant multiplier is fitted by least squares.  Points
    closer than ``boundary_margin`` to the outer boundary, or to a node of the
    boolean mask ``exclude`` (held nodes, where no optimality holds), are excluded.
    """
    mesh = problem.mesh
    eps = problem.eps
    spec = problem.spec
    gamma = spec.gamma
    lines = extract_interface(_scalar_view(phi), mesh, curvature=curvature)
    if not lines:
        raise ValueError("no zero level set found")
    P = np.vstack([pl.points for pl in lines])
    n = np.vstack([pl.normals for pl in lines])
    kap = np.concatenate([pl.curvature for pl in lines])
    wts = np.concatenate([pl.weights() for pl in lines])
    h = max(mesh.hx, mesh.hy)
    off = 0.5 * math.pi * eps if offset is None else offset
    margin = off + 2 * h if boundary_margin is None else boundary_margin
    keep = ((P[:, 0] > margin) & (P[:, 0] < mesh.Lx - margin) & (P[:, 1] > margin) & (P[:, 1] < mesh.Ly - margin)
            & np.isfinite(kap))
    if exclude is not None and np.any(exclude):
        held = cKDTree(mesh.nodes[np.asarray(exclude, dtype=bool)])
        keep &= held.query(P)[0] > margin
    P, n, kap, wts = P[keep], n[keep], kap[keep], wts[keep]
    if not len(P):
        raise ValueError("no interior interface points")
    Q = P - off * n
    Q[:, 0] = np.clip(Q[:, 0], 0.0, mesh.Lx)
    Q[:, 1] = np.clip(Q[:, 1], 0.0, mesh.Ly)
    ph = problem.material.phases[0]
    rho_sp = np.asarray(problem.rho_spatial_fn(Q[None]) if problem.rho_spatial_fn else np.ones((1, len(Q))))[0]
    elem = _element_lookup(mesh, Q)
    t_kappa = gamma * sigma * kap
    t_rho = np.zeros(len(P))
    t_c = np.zeros(len(P))
    if spec.indices:
        spectrum = problem.spectrum(phi) if spectrum is None else spectrum
        if len(spectrum) < spec.n_eigen:
            raise ValueError(f"spectrum has {len(spectrum)} pairs, objective needs {spec.n_eigen}")
        for idx, c in zip(spec.indices, spec.weights):
            pair = spectrum[idx - 1]
            w = pair.vector
            strain = _centre_strains(mesh, problem.asm.edofs, w)[elem]
            wx = _grid_interpolator(mesh, mesh.grid(w[0::2]))(Q)
            wy = _grid_interpolator(mesh, mesh.grid(w[1::2]))(Q)
            t_rho += c * pair.value * ph.rho * rho_sp * (wx**2 + wy**2)
            t_c -= c * _strain_energy(strain, ph.mu, ph.lame)
    t_comp = np.zeros(len(P))
    if spec.compliance_weight:
        if u is None:
            _, u = problem.compliance(phi)
        strain = _centre_strains(mesh, problem.asm.edofs, u)[elem]
        t_comp = spec.compliance_weight * _strain_energy(strain, ph.mu, ph.lame)
    r0 = t_kappa + t_rho + t_c + t_comp
    W = wts.sum()
    theta = -float(wts @ r0) / (W * gamma)
    r = r0 + gamma * theta
    rms = math.sqrt(float(wts @ r**2) / W)
    scale = math.sqrt(float(wts @ (t_kappa**2 + t_rho**2 + t_c**2 + t_comp**2)) / W)
    terms = {"kappa": t_kappa, "rho": t_rho, "stiffness": t_c, "compliance": t_comp}
    return GMVResult(rms, rms / scale if scale > 0 else 0.0, theta, P, r, terms)


# ---------------------------------------------------------------------------
# triple junctions

@dataclass
class JunctionAngles:
    point: np.ndarray
    angles: tuple[float, float, float]  # degrees, counter-clockwise between branches
    directions: np.ndarray = field(repr=False)


def _junction_candidates(phi, mesh: StructuredMesh):
    dominant = np.argmax(phi, axis=1)
    D = mesh.grid(dominant)
    cells = np.stack([D[:-1, :-1], D[:-1, 1:], D[1:, 1:], D[1:, :-1]], axis=-1)
    s = np.sort(cells, axis=-1)
    n_distinct = 1 + np.sum(s[..., 1:] != s[..., :-1], axis=-1)
    return np.argwhere(n_distinct >= 3)


def triple_junction_angles(phi, mesh: StructuredMesh, radius: tuple[float, float] | None = None,
                           min_separation: float | None = None) -> list[JunctionAngles]:
    """Angles between the three interfaces meeting at each triple junction.

    Each branch is fitted by a quadratic in the distance to the junction
    over interface points in the annulus ``radius = (r0, r1)`` (default
    3h..8h, outside the diffuse core); its tangent at the junction gives
    the branch direction.
    """
    phi = np.asarray(phi, dtype=float)
    if phi.ndim != 2 or phi.shape[1] != 3:
        return []
    cand = _junction_candidates(phi, mesh)
    if not len(cand):
        return []
    h = max(mesh.hx, mesh.hy)
    # refine each candidate: point where the three components are equal
    fields = [_grid_interpolator(mesh, mesh.grid(phi[:, k])) for k in range(3)]

    def mismatch(x):
        v = np.array([f(x[None])[0] for f in fields])
        return [v[0] - v[1], v[1] - v[2]]

    junctions = []
    for j, i in cand:
        x0 = np.array([(i + 0.5) * mesh.hx, (j + 0.5) * mesh.hy])
        sol = sopt.least_squares(mismatch, x0, bounds=([0, 0], [mesh.Lx, mesh.Ly]))
        x = sol.x
        if np.linalg.norm(x - x0) > 3 * h:
            x = x0
        junctions.append(x)
    sep = 4 * h if min_separation is None else min_separation
    merged: list[np.ndarray] = []
    for x in junctions:
        if all(np.linalg.norm(x - y) > sep for y in merged):
            merged.append(x)
    r0, r1 = (3 * h, 8 * h) if radius is None else radius
    out = []
    for x in merged:
        dirs = []
        for a, b in ((0, 1), (1, 2), (0, 2)):
            c = 3 - a - b
            pts = []
            for pl in extract_interface(phi[:, a] - phi[:, b], mesh):
                p = pl.points
                vals = np.column_stack([f(p) for f in fields])
                valid = vals[:, c] <= np.minimum(vals[:, a], vals[:, b]) + 1e-12
                dist = np.linalg.norm(p - x, axis=1)
                sel = valid & (dist >= r0) & (dist <= r1)
                pts.append(p[sel])
            pts = np.vstack(pts) if pts else np.zeros((0, 2))
            if not len(pts):
                break
            d = pts - x
            r = np.linalg.norm(d, axis=1)
            if len(pts) >= 3:
                # p(r) = x + a r + b r^2; the tangent a removes the chord bias of curved branches
                coef = np.linalg.lstsq(np.column_stack([r, r * r]), d, rcond=None)[0]
                m = coef[0]
            else:
                m = (d / r[:, None]).mean(axis=0)
            dirs.append(m / np.linalg.norm(m))
        if len(dirs) != 3:
            continue
        dirs = np.array(dirs)
        ang = np.sort(np.arctan2(dirs[:, 1], dirs[:, 0]))
        gaps = np.diff(np.concatenate([ang, [ang[0] + 2 * math.pi]]))
        out.append(JunctionAngles(x, tuple(float(np.degrees(g)) for g in gaps), dirs))
    return out


# ---------------------------------------------------------------------------
# multipliers

@dataclass
class MultiplierEstimate:
    """Constant shift theta, nodal obstacle multiplier mu >= 0 and componentwise-equal Lambda.

    Convention: g + Lambda 1 + theta - mu = residual for the vector
    representation (g the L2 gradient density); for the scalar one
    g + theta - mu_lower + mu_upper = residual.
    """

    theta: np.ndarray | float
    mu: np.ndarray
    Lambda: np.ndarray | None
    residual: float
    complementarity: float


def recover_multipliers(phi, grad, weights, active_tol: float = 1e-12, n_sweeps: int = 200) -> MultiplierEstimate:
    """Lagrange multipliers of the discrete gradient inequality at ``phi``.

    ``grad`` is the nodal (dual) gradient; dividing by the lumped ``weights``
    gives its L2 density.
    """
    phi = np.asarray(phi, dtype=float)
    w = np.asarray(weights, dtype=float)
    if phi.ndim == 1:
        g = np.asarray(grad, dtype=float) / w
        lower = phi <= -1.0 + active_tol
        upper = phi >= 1.0 - active_tol
        inactive = ~(lower | upper)
        if inactive.any():
            theta = -float(w[inactive] @ g[inactive]) / w[inactive].sum()
        else:
            # every node on an obstacle: any theta with sign-consistent mu is exact
            lo = float(np.max(-g[lower], initial=-np.inf))
            hi = float(np.min(-g[upper], initial=np.inf))
            theta = -float(w @ g) / w.sum()
            theta = float(np.clip(theta, lo, hi)) if lo <= hi else 0.5 * (lo + hi)
        r = g + theta
        mu = np.zeros_like(phi)
        mu[lower] = np.maximum(r[lower], 0.0)
        mu[upper] = np.maximum(-r[upper], 0.0)
        res = r - np.where(lower, mu, 0.0) + np.where(upper, mu, 0.0)
        comp = float(np.max(mu * np.minimum(1.0 + phi, 1.0 - phi), initial=0.0))
        return MultiplierEstimate(theta, mu, None, float(np.sqrt(w @ res**2)), comp)
    g = np.asarray(grad, dtype=float) / w[:, None]
    n, N = phi.shape
    active = phi <= active_tol
    inactive = ~active
    cnt = np.maximum(inactive.sum(axis=1), 1)
    theta = np.zeros(N)
    Lam = -g.mean(axis=1)
    for _ in range(n_sweeps):
        Lam = -np.where(inactive, g + theta, 0.0).sum(axis=1) / cnt
        r = g + Lam[:, None]
        wi = w[:, None] * inactive
        tot = np.maximum(wi.sum(axis=0), 1e-300)
        new = -(wi * r).sum(axis=0) / tot
        new = materials.project_tangent(new)
        if np.max(np.abs(new - theta)) <= 1e-15 * max(1.0, np.max(np.abs(g))):
            theta = new
            break
        theta = new
    Lam = -np.where(inactive, g + theta, 0.0).sum(axis=1) / cnt
    r = g + Lam[:, None] + theta
    mu = np.where(active, np.maximum(r, 0.0), 0.0)
    res = r - mu
    comp = float(np.max(mu * phi, initial=0.0))
    return MultiplierEstimate(theta, mu, Lam, float(np.sqrt(w @ np.sum(res**2, axis=1))), comp)


# ---------------------------------------------------------------------------
# spurious (void-localised) modes

def void_island_field(mesh: StructuredMesh, centre, radius: float, eps: float) -> np.ndarray:
    """Material everywhere except a disc of void, joined by the optimal sine profile."""
    d = np.linalg.norm(mesh.nodes - np.asarray(centre, dtype=float), axis=1) - radius
    return np.sin(np.clip(d / eps, -math.pi / 2, math.pi / 2))


def localized_mode(problem: Problem, phi, region, k: int = 12, seed: int = 42,
                   threshold: float = 1e-2) -> EigenPair:
    """Lowest eigenpair of the full pencil localised in the void ``region`` (node mask).

    The shift is the lowest eigenvalue of the pencil restricted to the nodes
    whose incident elements all lie in ``region`` (displacements held at zero
    elsewhere); it bounds the localised branch from above. Of the ``k`` pairs
    nearest to it, the lowest one with material fraction below ``threshold``
    is returned, or the one with the smallest fraction if none qualifies.
    """
    asm = problem.asm
    mesh = problem.mesh
    region = np.asarray(region, dtype=bool)
    inside_el = region[mesh.elements].all(axis=1)
    inner = np.ones(mesh.n_nodes, dtype=bool)
    inner[mesh.elements[~inside_el].ravel()] = False
    dof_region = np.repeat(inner, 2) & ~asm.dofs.dirichlet
    if not dof_region.any():
        raise ValueError("region contains no interior node")
    K = problem.stiffness(phi)
    M = problem.mass(phi)
    Mm = problem.mass(phi, include_void=False)
    idx = np.flatnonzero(dof_region)
    Kr = SparseSymOperator(K.matrix, idx)
    Mr = SparseSymOperator(M.matrix, idx)
    lam_island = solve_generalized(Kr, Mr, 1, tol=1e-8, seed=seed).values[0]
    spec = solve_generalized(K, M, k, tol=1e-8, seed=seed, M_material=Mm, sigma=0.99 * lam_island)
    local = [p for p in spec.pairs if p.material_fraction <= threshold]
    if local:
        return min(local, key=lambda p: p.value)
    return min(spec.pairs, key=lambda p: p.material_fraction)
