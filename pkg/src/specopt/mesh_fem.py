"""Structured rectangle mesh, bilinear (Q1) elements and operator assembly.

Node ``(i, j)`` (``i`` along x, ``j`` along y) has index ``j * (nx + 1) + i``;
displacement dofs are interleaved, ``2 * node + c``.  Element nodes are
ordered counter-clockwise starting at the lower-left corner.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.sparse as sp

from .materials import MaterialModel

GAUSS = 1.0 / np.sqrt(3.0)
# reference coordinates of the 2x2 Gauss points and of the element corners
_GP = np.array([[-GAUSS, -GAUSS], [GAUSS, -GAUSS], [GAUSS, GAUSS], [-GAUSS, GAUSS]])
_CORNERS = np.array([[-1.0, -1.0], [1.0, -1.0], [1.0, 1.0], [-1.0, 1.0]])


def shape_functions(xi, eta):
    xi = np.asarray(xi, dtype=float)
    eta = np.asarray(eta, dtype=float)
    return 0.25 * np.stack([(1 + _CORNERS[a, 0] * xi) * (1 + _CORNERS[a, 1] * eta) for a in range(4)], axis=-1)


def shape_gradients(xi, eta, hx, hy):
    """Physical gradients of the four shape functions, shape (..., 4, 2)."""
    xi = np.asarray(xi, dtype=float)
    eta = np.asarray(eta, dtype=float)
    dx = np.stack([0.25 * _CORNERS[a, 0] * (1 + _CORNERS[a, 1] * eta) for a in range(4)], axis=-1) * (2.0 / hx)
    dy = np.stack([0.25 * _CORNERS[a, 1] * (1 + _CORNERS[a, 0] * xi) for a in range(4)], axis=-1) * (2.0 / hy)
    return np.stack([dx, dy], axis=-1)


def strain_matrix(grads):
    """B such that [e_xx, e_yy, 2 e_xy] = B @ u_e for interleaved dofs."""
    B = np.zeros(grads.shape[:-2] + (3, 8))
    B[..., 0, 0::2] = grads[..., 0]
    B[..., 1, 1::2] = grads[..., 1]
    B[..., 2, 0::2] = grads[..., 1]
    B[..., 2, 1::2] = grads[..., 0]
    return B


D_MU = np.diag([2.0, 2.0, 1.0])
D_LAM = np.array([[1.0, 1.0, 0.0], [1.0, 1.0, 0.0], [0.0, 0.0, 0.0]])


@dataclass
class StructuredMesh:
    nx: int
    ny: int
    Lx: float
    Ly: float
    nodes: np.ndarray = field(init=False, repr=False)
    elements: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if int(self.nx) != self.nx or int(self.ny) != self.ny or self.nx < 1 or self.ny < 1:
            raise ValueError("element counts must be positive integers")
        if not (self.Lx > 0 and self.Ly > 0):
            raise ValueError("domain extents must be positive")
        self.nx, self.ny = int(self.nx), int(self.ny)
        xs = np.linspace(0.0, self.Lx, self.nx + 1)
        ys = np.linspace(0.0, self.Ly, self.ny + 1)
        X, Y = np.meshgrid(xs, ys)
        self.nodes = np.column_stack([X.ravel(), Y.ravel()])
        ex, ey = np.meshgrid(np.arange(self.nx), np.arange(self.ny))
        n0 = (ey * (self.nx + 1) + ex).ravel()
        self.elements = np.column_stack([n0, n0 + 1, n0 + self.nx + 2, n0 + self.nx + 1])

    @property
    def hx(self) -> float:
        return self.Lx / self.nx

    @property
    def hy(self) -> float:
        return self.Ly / self.ny

    @property
    def n_nodes(self) -> int:
        return (self.nx + 1) * (self.ny + 1)

    @property
    def n_elements(self) -> int:
        return self.nx * self.ny

    @property
    def area(self) -> float:
        return self.Lx * self.Ly

    @property
    def shape(self) -> tuple[int, int]:
        """Nodal grid shape (rows along y, columns along x)."""
        return self.ny + 1, self.nx + 1

    def boundary_nodes(self, side: str) -> np.ndarray:
        idx = np.arange(self.n_nodes).reshape(self.shape)
        try:
            return {"left": idx[:, 0], "right": idx[:, -1], "bottom": idx[0, :], "top": idx[-1, :]}[side].copy()
        except KeyError:
            raise ValueError(f"unknown boundary side {side!r}") from None

    def gauss_points(self) -> np.ndarray:
        """Physical Gauss point coordinates, shape (n_elements, 4, 2)."""
        x0 = self.nodes[self.elements[:, 0]]
        off = 0.5 * (1.0 + _GP) * np.array([self.hx, self.hy])
        return x0[:, None, :] + off[None, :, :]

    def element_centers(self) -> np.ndarray:
        return self.nodes[self.elements[:, 0]] + 0.5 * np.array([self.hx, self.hy])

    def to_gauss(self, field_values: np.ndarray) -> np.ndarray:
        """Interpolate a nodal field (n,) or (n, N) to Gauss points."""
        N = shape_functions(_GP[:, 0], _GP[:, 1])  # (4 gp, 4 nodes)
        fe = field_values[self.elements]  # (ne, 4, ...)
        return np.einsum("qa,ea...->eq...", N, fe)

    def nested_dissection(self, leaf: int = 16) -> np.ndarray:
        """Node ordering by recursive grid bisection, separators last."""
        stride = self.nx + 1
        out: list[np.ndarray] = []

        def split(i0, i1, j0, j1):
            if (i1 - i0) * (j1 - j0) <= leaf:
                jj, ii = np.mgrid[j0:j1, i0:i1]
                out.append((jj * stride + ii).ravel())
            elif i1 - i0 >= j1 - j0:
                c = (i0 + i1) // 2
                split(i0, c, j0, j1)
                split(c + 1, i1, j0, j1)
                out.append(np.arange(j0, j1) * stride + c)
            else:
                c = (j0 + j1) // 2
                split(i0, i1, j0, c)
                split(i0, i1, c + 1, j1)
                out.append(c * stride + np.arange(i0, i1))

        split(0, self.nx + 1, 0, self.ny + 1)
        return np.concatenate(out)

    def grid(self, values: np.ndarray) -> np.ndarray:
        """Reshape a nodal scalar to the (ny+1, nx+1) grid."""
        return np.asarray(values).reshape(self.shape)


def build_mesh(nx: int, ny: int, Lx: float, Ly: float) -> StructuredMesh:
    return StructuredMesh(nx, ny, Lx, Ly)


@dataclass
class DofMap:
    """Two displacement dofs per node plus the Dirichlet mask."""

    mesh: StructuredMesh
    dirichlet_sides: tuple[str, ...] = ("left",)
    traction_segments: tuple = ()

    def __post_init__(self):
        self.n_dofs = 2 * self.mesh.n_nodes
        mask = np.zeros(self.n_dofs, dtype=bool)
        for side in self.dirichlet_sides:
            nodes = self.mesh.boundary_nodes(side)
            mask[2 * nodes] = True
            mask[2 * nodes + 1] = True
        self.dirichlet = mask
        self.free = np.flatnonzero(~mask)
        # fill-reducing order of the free block (positions into ``free``)
        nodes = self.mesh.nested_dissection()
        dof_order = np.column_stack([2 * nodes, 2 * nodes + 1]).ravel()
        pos = np.full(self.n_dofs, -1)
        pos[self.free] = np.arange(self.free.size)
        order = pos[dof_order]
        self.order = order[order >= 0]

    def apply_mask(self, vec: np.ndarray) -> np.ndarray:
        out = np.array(vec, dtype=float, copy=True)
        out[self.dirichlet] = 0.0
        return out


@dataclass
class SparseSymOperator:
    """Symmetric sparse matrix with Dirichlet rows/cols replaced by identity."""

    matrix: sp.csr_matrix
    free: np.ndarray
    order: np.ndarray | None = None

    @property
    def dim(self) -> int:
        return self.matrix.shape[0]

    @property
    def is_symmetric(self) -> bool:
        diff = abs(self.matrix - self.matrix.T)
        scale = abs(self.matrix).max()
        return diff.max() <= 1e-12 * scale if diff.nnz else True

    def reduced(self) -> sp.csc_matrix:
        """Block on the free dofs."""
        return self.matrix[self.free][:, self.free].tocsc()


class Assembler:
    """Caches Q1 reference matrices and the sparse pattern for a mesh.

    Assembly reduces to computing per-element data arrays; the scatter into
    CSR storage reuses a precomputed permutation.
    """

    def __init__(self, mesh: StructuredMesh, dofs: DofMap | None = None):
        self.mesh = mesh
        self.dofs = dofs if dofs is not None else DofMap(mesh)
        hx, hy = mesh.hx, mesh.hy
        detJ = 0.25 * hx * hy
        self.detJ = detJ
        grads = shape_gradients(_GP[:, 0], _GP[:, 1], hx, hy)  # (4, 4, 2)
        B = strain_matrix(grads)  # (4, 3, 8)
        self.B = B
        self.grads = grads
        self.N = shape_functions(_GP[:, 0], _GP[:, 1])  # (4 gp, 4 nodes)
        self.kmu = np.einsum("qia,ij,qjb->qab", B, D_MU, B) * detJ  # (4, 8, 8)
        self.klam = np.einsum("qia,ij,qjb->qab", B, D_LAM, B) * detJ
        Nv = np.zeros((4, 2, 8))
        Nv[:, 0, 0::2] = self.N
        Nv[:, 1, 1::2] = self.N
        self.mq = np.einsum("qia,qib->qab", Nv, Nv) * detJ  # (4, 8, 8)
        # scalar Laplacian and mass for the phase-field
        self.lap_e = np.einsum("qad,qbd->ab", grads, grads) * detJ
        self.mass_e = np.einsum("qa,qb->ab", self.N, self.N) * detJ

        el = mesh.elements
        edofs = np.empty((el.shape[0], 8), dtype=np.int64)
        edofs[:, 0::2] = 2 * el
        edofs[:, 1::2] = 2 * el + 1
        self.edofs = edofs
        self._scal = self._pattern(el, mesh.n_nodes)
        self.laplacian = self._scatter(self._scal, np.broadcast_to(self.lap_e, (el.shape[0], 4, 4)))
        self.scalar_mass = self._scatter(self._scal, np.broadcast_to(self.mass_e, (el.shape[0], 4, 4)))
        self.lumped = np.asarray(self.scalar_mass.sum(axis=1)).ravel()

    @cached_property
    def _vec(self):
        return self._pattern(self.edofs, self.dofs.n_dofs)

    @staticmethod
    def _pattern(edofs, n):
        ne, k = edofs.shape
        rows = np.repeat(edofs, k, axis=1).ravel()
        cols = np.tile(edofs, (1, k)).ravel()
        key = rows * n + cols
        uniq, inv = np.unique(key, return_inverse=True)
        indptr = np.zeros(n + 1, dtype=np.int64)
        np.add.at(indptr, uniq // n + 1, 1)
        indptr = np.cumsum(indptr)
        indices = (uniq % n).astype(np.int64)
        return indptr, indices, inv, n, uniq.size

    @staticmethod
    def _scatter(pattern, data):
        indptr, indices, inv, n, nnz = pattern
        vals = np.bincount(inv, weights=np.ascontiguousarray(data).ravel(), minlength=nnz)
        return sp.csr_matrix((vals, indices.copy(), indptr.copy()), shape=(n, n))

    # -- vector operators ---------------------------------------------------
    def element_stiffness(self, mu_q: np.ndarray, lam_q: np.ndarray) -> np.ndarray:
        """Element matrices from Lame coefficients at Gauss points (ne, 4)."""
        return np.einsum("eq,qab->eab", mu_q, self.kmu) + np.einsum("eq,qab->eab", lam_q, self.klam)

    def element_mass(self, rho_q: np.ndarray) -> np.ndarray:
        return np.einsum("eq,qab->eab", rho_q, self.mq)

    def _finish(self, mat: sp.csr_matrix) -> SparseSymOperator:
        mask = self.dofs.dirichlet
        if mask.any():
            keep = sp.diags((~mask).astype(float))
            mat = (keep @ mat @ keep + sp.diags(mask.astype(float))).tocsr()
        return SparseSymOperator(mat, self.dofs.free, self.dofs.order)

    def stiffness_raw(self, mu_q, lam_q) -> sp.csr_matrix:
        return self._scatter(self._vec, self.element_stiffness(mu_q, lam_q))

    def mass_raw(self, rho_q) -> sp.csr_matrix:
        return self._scatter(self._vec, self.element_mass(rho_q))

    def stiffness(self, phi, mat: MaterialModel, eps: float) -> SparseSymOperator:
        mu_q, lam_q = mat.lame_fields(self.mesh.to_gauss(_check_field(phi, self.mesh)), eps)
        return self._finish(self.stiffness_raw(mu_q, lam_q))

    def mass(self, phi, mat: MaterialModel, eps: float, rho_spatial=None,
             include_void: bool = True) -> SparseSymOperator:
        rho_q = mat.density(self.mesh.to_gauss(_check_field(phi, self.mesh)), eps, include_void=include_void)
        if rho_spatial is not None:
            rho_q = rho_q * rho_spatial
        return self._finish(self.mass_raw(rho_q))

    def traction(self, segment: "TractionSegment", g) -> np.ndarray:
        """Load vector of a constant traction on a boundary segment."""
        g = np.asarray(g, dtype=float)
        f = np.zeros(self.dofs.n_dofs)
        nodes = self.mesh.boundary_nodes(segment.side)
        axis = 1 if segment.side in ("left", "right") else 0
        for a, b in zip(nodes[:-1], nodes[1:]):
            ta, tb = self.mesh.nodes[a, axis], self.mesh.nodes[b, axis]
            lo, hi = max(min(ta, tb), segment.start), min(max(ta, tb), segment.stop)
            if hi <= lo:
                continue
            # 2-point Gauss on the covered part of the edge
            for xg in (-GAUSS, GAUSS):
                s = 0.5 * (lo + hi) + 0.5 * (hi - lo) * xg
                w = 0.5 * (hi - lo)
                na = (tb - s) / (tb - ta)
                nb = 1.0 - na
                f[2 * a:2 * a + 2] += w * na * g
                f[2 * b:2 * b + 2] += w * nb * g
        if np.any(f[self.dofs.dirichlet] != 0.0):
            raise ValueError("traction segment intersects the Dirichlet boundary")
        return f


@dataclass(frozen=True)
class TractionSegment:
    side: str
    start: float
    stop: float


def _check_field(phi, mesh: StructuredMesh) -> np.ndarray:
    phi = np.asarray(phi, dtype=float)
    if phi.shape[0] != mesh.n_nodes:
        raise ValueError(f"field has {phi.shape[0]} nodal values, mesh has {mesh.n_nodes} nodes")
    if not np.all(np.isfinite(phi)):
        raise ValueError("phase-field contains non-finite values")
    return phi


def assemble_stiffness(mesh, dofs, phi, mat, eps) -> SparseSymOperator:
    return Assembler(mesh, dofs).stiffness(phi, mat, eps)


def assemble_mass(mesh, dofs, phi, mat, eps, rho_spatial=None) -> SparseSymOperator:
    asm = Assembler(mesh, dofs)
    return asm.mass(phi, mat, eps, None if rho_spatial is None else rho_spatial(mesh.gauss_points()))


def assemble_traction(mesh, dofs, segment: TractionSegment, g) -> np.ndarray:
    return Assembler(mesh, dofs).traction(segment, g)


def box_density(box, factor: float):
    """Spatial density map: ``factor`` inside the open box (x0, x1, y0, y1), 1 outside."""
    x0, x1, y0, y1 = box

    def rho(points):
        x, y = points[..., 0], points[..., 1]
        inside = (x > x0) & (x < x1) & (y > y0) & (y < y1)
        return np.where(inside, factor, 1.0)

    return rho
