"""
Discrete weighted divergence-form operators L = -(1/w) div(w A grad) on a Grid.

Assembly is cell based: in every cell the quadratic form is evaluated at the
2^n cell vertices with the one-sided edge differences of that cell (the exact
bilinear gradient at the vertex), against wA sampled at the cell center.
This gives the (2n+1)-point Laplacian for A = I and a symmetric 9-point (2d)
or 19-point (3d) stencil in general: a vertex gradient only pairs edges
meeting at one vertex, so mixed terms reach face diagonals and never the body
diagonals. The coefficient seen by an edge is the mean of its adjacent cell
centers, the face-midpoint value up to O(h^2).
Masses are lumped: each node collects w(center) h^n / 2^n from its cells.

The discrete gradient is the same edge operator D, so it lives at the
cell-vertex quadrature points with measure q = w(center) h^n / 2^n and
K = D^T diag(q A) D holds exactly.
"""
import logging
from dataclasses import dataclass, field as dc_field
from itertools import product
from typing import Optional

import numpy as np
import scipy.sparse as sp
from scipy.linalg import eigh
from scipy.sparse.linalg import eigsh

from coeffs import MatrixField, WeightField
from grid import Grid, GridFunction, VectorGridFunction

logger = logging.getLogger(__name__)

DENSE_CAP = 3000
# dense spectral bounds up to this many unknowns, Lanczos above
_DENSE_BOUNDS_SIZE = 600


@dataclass(frozen=True)
class DenseSpectrum:
    """L = V diag(eigenvalues) V^T M with V^T M V = I and V = M^(-1/2) Q."""
    eigenvalues: np.ndarray
    vectors: np.ndarray
    orthonormal: np.ndarray


@dataclass
class DiscreteOperator:
    grid: Grid
    field: MatrixField
    weight: Optional[WeightField]
    stiffness: sp.csr_matrix
    mass: np.ndarray
    cell_coeff: np.ndarray
    cell_weight: np.ndarray
    _edges: sp.csr_matrix = dc_field(repr=False)
    _cache: dict = dc_field(default_factory=dict, repr=False)

    @property
    def size(self) -> int:
        return self.grid.size

    @property
    def node_weight(self) -> np.ndarray:
        """Nodal weight w_i = m_i / h^n, the density behind the discrete L^p(w) norms."""
        return self.mass / self.grid.cell_volume

    @property
    def unit_weight(self) -> bool:
        return self.weight is None

    @property
    def quad_size(self) -> int:
        return 2 ** self.grid.n * self.cell_weight.size

    @property
    def cell_centers(self) -> np.ndarray:
        if "centers" not in self._cache:
            self._cache["centers"] = _cell_layout(self.grid)[1]
        return self._cache["centers"]

    @property
    def quad_points(self) -> np.ndarray:
        """Cell vertices in edge-operator order: vertex type major, then cell."""
        if "quad_points" not in self._cache:
            n, h = self.grid.n, self.grid.h
            offsets = (np.array(list(product((0, 1), repeat=n))) - 0.5) * h
            pts = self.cell_centers[None, :, :] + offsets[:, None, :]
            self._cache["quad_points"] = pts.reshape(-1, n)
        return self._cache["quad_points"]

    @property
    def quad_weights(self) -> np.ndarray:
        """w(center) h^n / 2^n at every cell vertex."""
        if "quad_weights" not in self._cache:
            share = self.cell_weight * self.grid.cell_volume / 2 ** self.grid.n
            self._cache["quad_weights"] = np.tile(share, 2 ** self.grid.n)
        return self._cache["quad_weights"]

    @property
    def quad_coeff(self) -> np.ndarray:
        """A (without the weight) at every cell vertex."""
        if "quad_coeff" not in self._cache:
            mats = self.cell_coeff / self.cell_weight[:, None, None]
            self._cache["quad_coeff"] = np.tile(mats, (2 ** self.grid.n, 1, 1))
        return self._cache["quad_coeff"]

    def apply(self, f: np.ndarray) -> np.ndarray:
        return self.stiffness @ f / self.mass

    def __call__(self, f: GridFunction) -> GridFunction:
        return GridFunction(self.grid, self.apply(f.values))

    def inner(self, f: np.ndarray, g: np.ndarray) -> float:
        return float(np.sum(self.mass * f * g))

    def norm(self, f: np.ndarray) -> float:
        return float(np.sqrt(self.inner(f, f)))

    def symmetric(self) -> sp.csr_matrix:
        """S = M^(-1/2) K M^(-1/2), similar to L."""
        if "sym" not in self._cache:
            d = sp.diags(1.0 / np.sqrt(self.mass))
            self._cache["sym"] = (d @ self.stiffness @ d).tocsr()
        return self._cache["sym"]

    @property
    def is_m_matrix(self) -> bool:
        if "m_matrix" not in self._cache:
            K = self.stiffness
            off = K - sp.diags(K.diagonal())
            scale = float(np.abs(K.diagonal()).max())
            tol = 1e-12 * scale
            nonpos = off.nnz == 0 or float(off.data.max()) <= tol
            rows = np.asarray(K.sum(axis=1)).ravel()
            self._cache["m_matrix"] = bool(nonpos and rows.min() >= -tol)
        return self._cache["m_matrix"]

    def spectral_bounds(self) -> tuple:
        """(lambda_min, lambda_max), cached."""
        if "bounds" not in self._cache:
            if self.size <= _DENSE_BOUNDS_SIZE or "dense" in self._cache:
                lam = dense_spectral(self).eigenvalues
                bounds = (float(lam[0]), float(lam[-1]))
            else:
                S = self.symmetric()
                lam_max = eigsh(S, k=1, which="LA", return_eigenvectors=False)[0]
                lam_min = eigsh(S, k=1, sigma=0.0, which="LM", return_eigenvectors=False)[0]
                bounds = (float(lam_min), float(lam_max))
            self._cache["bounds"] = bounds
        return self._cache["bounds"]


# -----------------------------
# ASSEMBLY
# -----------------------------

def _cell_layout(grid: Grid):
    """Cell multi-indices, cell centers and the full-lattice -> interior index map."""
    m, n = grid.nodes_per_axis, grid.n
    axis = np.arange(m - 1)
    mesh = np.meshgrid(*([axis] * n), indexing="ij")
    cells = np.stack([c.ravel() for c in mesh], axis=1)
    centers = -grid.L + (cells + 0.5) * grid.h

    full = -np.ones((m,) * n, dtype=np.int64)
    inner = (slice(1, m - 1),) * n
    full[inner] = np.arange(grid.size).reshape(grid.shape)
    return cells, centers, full.ravel()


def _edge_operator(grid: Grid, cells: np.ndarray, interior: np.ndarray) -> sp.csr_matrix:
    """
    Stacked vertex gradients: block s (one per vertex type) maps nodal values to
    the n one-sided edge differences of every cell at vertex s.
    Row index: (s * ncells + cell) * n + axis.
    """
    n, m, h = grid.n, grid.nodes_per_axis, grid.h
    ncells = cells.shape[0]
    dims = (m,) * n
    rows, cols, vals = [], [], []
    for s_idx, s in enumerate(product((0, 1), repeat=n)):
        for a in range(n):
            hi, lo = np.array(s), np.array(s)
            hi[a], lo[a] = 1, 0
            row = (s_idx * ncells + np.arange(ncells)) * n + a
            for offset, sign in ((hi, 1.0), (lo, -1.0)):
                node = interior[np.ravel_multi_index(tuple((cells + offset).T), dims)]
                keep = node >= 0
                rows.append(row[keep])
                cols.append(node[keep])
                vals.append(np.full(keep.sum(), sign / h))
    shape = (2 ** n * ncells * n, grid.size)
    return sp.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=shape
    )


def _block_diag(blocks: np.ndarray) -> sp.csr_matrix:
    nb, n = blocks.shape[0], blocks.shape[1]
    return sp.bsr_matrix(
        (blocks, np.arange(nb), np.arange(nb + 1)), shape=(nb * n, nb * n)
    ).tocsr()


def _block_weights(grid: Grid, cell_coeff: np.ndarray) -> sp.csr_matrix:
    """Block-diagonal (h^n / 2^n) * cell_coeff, repeated for every vertex type."""
    factor = grid.cell_volume / 2 ** grid.n
    return _block_diag(np.tile(cell_coeff * factor, (2 ** grid.n, 1, 1)))


def _lumped_mass(grid: Grid, cells: np.ndarray, interior: np.ndarray, cell_weight: np.ndarray) -> np.ndarray:
    n, m = grid.n, grid.nodes_per_axis
    share = cell_weight * grid.cell_volume / 2 ** n
    mass = np.zeros(grid.size)
    for s in product((0, 1), repeat=n):
        node = interior[np.ravel_multi_index(tuple((cells + np.array(s)).T), (m,) * n)]
        keep = node >= 0
        mass += np.bincount(node[keep], weights=share[keep], minlength=grid.size)
    return mass


def assemble(grid: Grid, A: MatrixField, w: Optional[WeightField] = None) -> DiscreteOperator:
    if A.n != grid.n:
        raise ValueError(f"dimension mismatch: grid n={grid.n}, field n={A.n}")
    A.spot_check()

    cells, centers, interior = _cell_layout(grid)
    mats = A(centers)
    eig = np.linalg.eigvalsh(mats)
    if eig.min() < A.c_ell * (1 - 1e-9) - 1e-12 or eig.max() > A.C_ell * (1 + 1e-9) + 1e-12:
        raise ValueError(f"{A.name}: ellipticity violated at cell centers")
    cell_weight = np.ones(cells.shape[0]) if w is None else w(centers)
    if not np.all(np.isfinite(cell_weight)) or np.any(cell_weight <= 0):
        raise ValueError("weight must be positive and finite at cell centers")

    cell_coeff = cell_weight[:, None, None] * mats
    edges = _edge_operator(grid, cells, interior)
    stiffness = (edges.T @ _block_weights(grid, cell_coeff) @ edges).tocsr()
    stiffness = (0.5 * (stiffness + stiffness.T)).tocsr()
    mass = _lumped_mass(grid, cells, interior, cell_weight)

    op = DiscreteOperator(
        grid=grid, field=A, weight=w, stiffness=stiffness, mass=mass,
        cell_coeff=cell_coeff, cell_weight=cell_weight, _edges=edges,
    )
    logger.info(
        f"ASSEMBLE | n={grid.n} | L={grid.L} | h={grid.h} | unknowns={grid.size} "
        f"| field={A.name} | nnz={stiffness.nnz} | m_matrix={op.is_m_matrix}"
    )
    return op


def stiffness_from(op: DiscreteOperator, cell_coeff: np.ndarray) -> sp.csr_matrix:
    """Energy matrix of an arbitrary (ncells, n, n) coefficient array on op's grid."""
    expected = op.cell_coeff.shape
    if cell_coeff.shape != expected:
        raise ValueError(f"cell coefficients must have shape {expected}")
    K = op._edges.T @ _block_weights(op.grid, cell_coeff) @ op._edges
    return (0.5 * (K + K.T)).tocsr()


def energy(op: DiscreteOperator, f: GridFunction) -> float:
    """<Lf, f>_w."""
    return float(f.values @ (op.stiffness @ f.values))


# -----------------------------
# GRADIENT / DIVERGENCE
# -----------------------------

def vertex_field(op: DiscreteOperator, values: np.ndarray) -> VectorGridFunction:
    """Wrap (quad_size, n) values as a vector field at op's cell vertices."""
    return VectorGridFunction(op.grid, values, points=op.quad_points, measure=op.quad_weights)


def _at_vertices(op: DiscreteOperator, V: VectorGridFunction) -> np.ndarray:
    if V.grid != op.grid:
        raise ValueError("vector field lives on another grid")
    if V.at_nodes or V.values.shape[0] != op.quad_size:
        raise ValueError(f"vector field must live at the {op.quad_size} cell-vertex points of the operator")
    return V.values


def gradient(op: DiscreteOperator, f: GridFunction) -> VectorGridFunction:
    """One-sided edge differences at every cell vertex, the gradient the energy is built from."""
    values = (op._edges @ f.values).reshape(op.quad_size, op.grid.n)
    return vertex_field(op, values)


def apply_coefficient(op: DiscreteOperator, V: VectorGridFunction) -> VectorGridFunction:
    """Pointwise A V at the cell vertices."""
    return vertex_field(op, np.einsum("kij,kj->ki", op.quad_coeff, _at_vertices(op, V)))


def divergence_w(op: DiscreteOperator, V: VectorGridFunction) -> GridFunction:
    """-M^(-1) D^T (q V): negative adjoint of gradient, L f = -div_w(A grad f)."""
    weighted = (op.quad_weights[:, None] * _at_vertices(op, V)).ravel()
    return GridFunction(op.grid, -(op._edges.T @ weighted) / op.mass)


def cell_average(op: DiscreteOperator, V: VectorGridFunction) -> np.ndarray:
    """(ncells, n) mean over the vertices of each cell; for a gradient, the centered difference at the cell center."""
    n = op.grid.n
    return _at_vertices(op, V).reshape(2 ** n, -1, n).mean(axis=0)


@dataclass(frozen=True)
class BallProblem:
    """Energy and lumped mass of op restricted to the cells inside a ball, free (Neumann) at its edge."""
    nodes: np.ndarray
    stiffness: np.ndarray
    mass: np.ndarray
    quad: np.ndarray


def restrict_to_ball(op: DiscreteOperator, center, r: float) -> BallProblem:
    grid = op.grid
    n = grid.n
    center = np.asarray(center, dtype=float)
    if np.max(np.abs(center)) + r > grid.L - grid.h + 1e-12:
        raise ValueError("ball must stay one cell away from the Dirichlet boundary")
    reach = 0.5 * grid.h * np.sqrt(n)
    cells = np.flatnonzero(np.linalg.norm(op.cell_centers - center, axis=1) + reach <= r + 1e-12)
    if cells.size < 2 ** n:
        raise ValueError(f"ball of radius {r} holds too few cells at h={grid.h}")

    ncells = op.cell_centers.shape[0]
    quad = (np.arange(2 ** n)[:, None] * ncells + cells[None, :]).ravel()
    rows = (quad[:, None] * n + np.arange(n)).ravel()
    D = op._edges[rows]
    nodes = np.unique(D.indices)
    D = D[:, nodes]
    blocks = op.quad_weights[quad][:, None, None] * op.quad_coeff[quad]
    K = (D.T @ _block_diag(blocks) @ D).toarray()

    # every vertex of a selected cell is an unknown, so its share lands on the vertex node
    layout, _, interior = _cell_layout(grid)
    m = grid.nodes_per_axis
    share = op.quad_weights[quad]
    vertex = np.concatenate([
        interior[np.ravel_multi_index(tuple((layout[cells] + np.array(s)).T), (m,) * n)]
        for s in product((0, 1), repeat=n)
    ])
    full = np.bincount(vertex, weights=share, minlength=grid.size)
    return BallProblem(nodes=nodes, stiffness=0.5 * (K + K.T), mass=full[nodes], quad=quad)


# -----------------------------
# SPECTRAL ORACLE
# -----------------------------

def dense_spectral(op: DiscreteOperator, cap: int = DENSE_CAP) -> DenseSpectrum:
    if "dense" in op._cache:
        return op._cache["dense"]
    if op.size > cap:
        raise ValueError(
            f"{op.size} unknowns exceed the dense cap {cap}; use the matrix-free path (CG + quadrature)"
        )
    lam, Q = eigh(op.symmetric().toarray())
    spectrum = DenseSpectrum(
        eigenvalues=lam, vectors=Q / np.sqrt(op.mass)[:, None], orthonormal=Q
    )
    op._cache["dense"] = spectrum
    logger.info(f"DENSE_SPECTRAL | unknowns={op.size} | lam_min={lam[0]:.6g} | lam_max={lam[-1]:.6g}")
    return spectrum


def adjointness_error(op: DiscreteOperator, pairs: int = 100, rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """|<Lf,g>_w - <f,Lg>_w| / (|f| |g| lambda_max) over random pairs."""
    rng = rng or np.random.default_rng(0)
    lam_max = op.spectral_bounds()[1]
    out = np.empty(pairs)
    for i in range(pairs):
        f = rng.standard_normal(op.size)
        g = rng.standard_normal(op.size)
        diff = op.inner(op.apply(f), g) - op.inner(f, op.apply(g))
        out[i] = abs(diff) / (op.norm(f) * op.norm(g) * lam_max)
    return out
