"""Two-point-flux finite volumes for steady Darcy flow on a rectangle.

Solves ``div(T grad u) = 0`` with ``T = exp(y)`` per cell, harmonic-mean face
transmissivities, Dirichlet heads imposed at boundary faces (half-cell
distance) and prescribed outward Neumann fluxes.

Cells are numbered ``k = j * nx + i`` with ``i`` along x and ``j`` along y.
"""
from __future__ import annotations

import hashlib
import threading
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .kle import FieldBasis, expand

EDGES = ("left", "right", "bottom", "top")


class SolverError(RuntimeError):
    pass


@dataclass(frozen=True)
class GridGeometry:
    nx: int = 32
    ny: int = 32
    lx: float = 1.0
    ly: float = 1.0
    boundary: dict = field(default_factory=lambda: {
        "left": "dirichlet", "right": "dirichlet",
        "bottom": "neumann", "top": "neumann"})

    def __post_init__(self):
        if self.nx < 2 or self.ny < 2:
            raise ValueError("need at least 2 cells per direction")
        if not (self.lx > 0 and self.ly > 0):
            raise ValueError("domain lengths must be positive")
        if set(self.boundary) != set(EDGES):
            raise ValueError(f"boundary tags needed for edges {EDGES}")
        for kind in self.boundary.values():
            if kind not in ("dirichlet", "neumann"):
                raise ValueError(f"bad boundary kind {kind!r}")

    @property
    def dx(self) -> float:
        return self.lx / self.nx

    @property
    def dy(self) -> float:
        return self.ly / self.ny

    @property
    def n_cells(self) -> int:
        return self.nx * self.ny

    @property
    def cell_areas(self) -> np.ndarray:
        return np.full(self.n_cells, self.dx * self.dy)

    @property
    def cell_centers(self) -> np.ndarray:
        x = (np.arange(self.nx) + 0.5) * self.dx
        y = (np.arange(self.ny) + 0.5) * self.dy
        xx, yy = np.meshgrid(x, y)
        return np.column_stack([xx.ravel(), yy.ravel()])

    def cell_index(self, i, j):
        return np.asarray(j) * self.nx + np.asarray(i)

    def nearest_cell(self, points) -> np.ndarray:
        p = np.atleast_2d(points)
        i = np.clip((p[:, 0] / self.dx).astype(int), 0, self.nx - 1)
        j = np.clip((p[:, 1] / self.dy).astype(int), 0, self.ny - 1)
        return self.cell_index(i, j)

    def boundary_cells(self, edge: str) -> np.ndarray:
        i = np.arange(self.nx)
        j = np.arange(self.ny)
        if edge == "left":
            return self.cell_index(0, j)
        if edge == "right":
            return self.cell_index(self.nx - 1, j)
        if edge == "bottom":
            return self.cell_index(i, 0)
        if edge == "top":
            return self.cell_index(i, self.ny - 1)
        raise ValueError(edge)

    def face_geometry(self, edge: str):
        """(face length, center-to-face distance) for faces on ``edge``."""
        if edge in ("left", "right"):
            return self.dy, 0.5 * self.dx
        return self.dx, 0.5 * self.dy

    def hash(self) -> str:
        text = f"{self.nx}|{self.ny}|{self.lx!r}|{self.ly!r}|" + "|".join(
            f"{e}={self.boundary[e]}" for e in EDGES)
        return hashlib.sha256(text.encode()).hexdigest()[:16]


@dataclass(frozen=True)
class BvpSpec:
    """Boundary data: heads on Dirichlet edges, outward fluxes on Neumann edges."""

    head: dict = field(default_factory=lambda: {"left": 1.0, "right": 0.0})
    flux: dict = field(default_factory=lambda: {"bottom": 0.0, "top": 0.0})

    def check(self, grid: GridGeometry) -> None:
        dirichlet = [e for e in EDGES if grid.boundary[e] == "dirichlet"]
        if not dirichlet:
            raise ValueError("at least one Dirichlet edge is required")
        for e in dirichlet:
            if e not in self.head:
                raise ValueError(f"no head value for Dirichlet edge {e!r}")
        for e in EDGES:
            if grid.boundary[e] == "neumann" and e not in self.flux:
                raise ValueError(f"no flux value for Neumann edge {e!r}")


@dataclass(frozen=True)
class ObservationLayout:
    """Cell indices of head wells (``head_cells``) and direct field data."""

    head_cells: np.ndarray
    field_cells: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))

    def __post_init__(self):
        for name in ("head_cells", "field_cells"):
            a = np.asarray(getattr(self, name), dtype=int).ravel()
            if len(np.unique(a)) != len(a):
                raise ValueError(f"{name} contains duplicates")
            object.__setattr__(self, name, a)

    def check(self, grid: GridGeometry) -> None:
        for a in (self.head_cells, self.field_cells):
            if len(a) and (a.min() < 0 or a.max() >= grid.n_cells):
                raise ValueError("observation cell index out of range")


def _interior_faces(grid: GridGeometry):
    """Pairs of neighbouring cells and the geometric factor length/distance."""
    i, j = np.meshgrid(np.arange(grid.nx - 1), np.arange(grid.ny))
    left = grid.cell_index(i, j).ravel()
    xf = (left, left + 1, np.full(left.size, grid.dy / grid.dx))
    i, j = np.meshgrid(np.arange(grid.nx), np.arange(grid.ny - 1))
    low = grid.cell_index(i, j).ravel()
    yf = (low, low + grid.nx, np.full(low.size, grid.dx / grid.dy))
    return tuple(np.concatenate(z) for z in zip(xf, yf))


class _Faces:
    """Face connectivity cached per grid."""

    _cache: dict = {}
    _lock = threading.Lock()

    @classmethod
    def get(cls, grid: GridGeometry):
        key = (grid.nx, grid.ny, grid.lx, grid.ly,
               tuple(grid.boundary[e] for e in EDGES))
        with cls._lock:
            if key not in cls._cache:
                cls._cache[key] = _interior_faces(grid)
            return cls._cache[key]


def assemble(grid: GridGeometry, bvp: BvpSpec, y):
    """System matrix (CSC) and right-hand side for log-transmissivity ``y``."""
    y = np.asarray(y, dtype=float)
    if y.shape != (grid.n_cells,):
        raise ValueError(f"field must have {grid.n_cells} entries")
    if not np.all(np.isfinite(y)):
        raise ValueError("non-finite log-transmissivity")
    T = np.exp(y)
    a, b, g = _Faces.get(grid)
    t = g * 2.0 * T[a] * T[b] / (T[a] + T[b])
    n = grid.n_cells
    diag = np.zeros(n)
    np.add.at(diag, a, t)
    np.add.at(diag, b, t)
    rhs = np.zeros(n)
    for edge in EDGES:
        cells = grid.boundary_cells(edge)
        length, dist = grid.face_geometry(edge)
        if grid.boundary[edge] == "dirichlet":
            tb = T[cells] * length / dist
            np.add.at(diag, cells, tb)
            np.add.at(rhs, cells, tb * bvp.head[edge])
        else:
            np.add.at(rhs, cells, -bvp.flux[edge] * length)
    rows = np.concatenate([np.arange(n), a, b])
    cols = np.concatenate([np.arange(n), b, a])
    vals = np.concatenate([diag, -t, -t])
    A = sp.csc_matrix((vals, (rows, cols)), shape=(n, n))
    return A, rhs


def _solve(A, rhs):
    try:
        lu = spla.splu(A)
    except RuntimeError as exc:
        raise SolverError(f"sparse factorization failed: {exc}") from exc
    u = lu.solve(rhs)
    scale = max(np.linalg.norm(rhs), np.finfo(float).tiny)
    if not np.all(np.isfinite(u)) or np.linalg.norm(A @ u - rhs) > 1e-10 * scale:
        u, info = spla.cg(A, rhs, x0=np.nan_to_num(u), rtol=1e-12, maxiter=10 * len(rhs))
        if info != 0 or np.linalg.norm(A @ u - rhs) > 1e-10 * scale:
            raise SolverError("linear solver did not converge")
    return u, lu


def solve_head(grid: GridGeometry, bvp: BvpSpec, y) -> np.ndarray:
    """Head at cell centers for log-transmissivity ``y``."""
    bvp.check(grid)
    A, rhs = assemble(grid, bvp, y)
    return _solve(A, rhs)[0]


def residual_field_derivative(grid: GridGeometry, bvp: BvpSpec, y, u):
    """Sparse ``d(A(y) u - b(y)) / dy`` evaluated at ``(y, u)``."""
    T = np.exp(np.asarray(y, dtype=float))
    a, b, g = _Faces.get(grid)
    tf = 2.0 * T[a] * T[b] / (T[a] + T[b])
    du = u[a] - u[b]
    # d t_face / d y_a = g tf^2 / (2 T_a)
    da = g * tf * tf / (2.0 * T[a]) * du
    db = g * tf * tf / (2.0 * T[b]) * du
    rows = [a, a, b, b]
    cols = [a, b, a, b]
    vals = [da, db, -da, -db]
    for edge in EDGES:
        if grid.boundary[edge] != "dirichlet":
            continue
        cells = grid.boundary_cells(edge)
        length, dist = grid.face_geometry(edge)
        rows.append(cells)
        cols.append(cells)
        vals.append(T[cells] * length / dist * (u[cells] - bvp.head[edge]))
    n = grid.n_cells
    return sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                         shape=(n, n))


def solve_with_sensitivity(grid: GridGeometry, bvp: BvpSpec, y, directions):
    """Head and its derivatives along field perturbations.

    ``directions`` has shape ``(n_cells, m)``; returns ``u`` and ``du`` of
    shape ``(n_cells, m)`` with ``du[:, k] = du/dy . directions[:, k]``. The
    factorized system matrix is reused for all right-hand sides.
    """
    bvp.check(grid)
    A, rhs = assemble(grid, bvp, y)
    u, lu = _solve(A, rhs)
    S = residual_field_derivative(grid, bvp, y, u)
    du = -lu.solve(np.asarray(S @ directions))
    return u, du


def boundary_fluxes(grid: GridGeometry, bvp: BvpSpec, y, u) -> dict:
    """Total outward Darcy flux through each edge."""
    T = np.exp(np.asarray(y, dtype=float))
    out = {}
    for edge in EDGES:
        cells = grid.boundary_cells(edge)
        length, dist = grid.face_geometry(edge)
        if grid.boundary[edge] == "dirichlet":
            out[edge] = float(np.sum(T[cells] * length / dist * (u[cells] - bvp.head[edge])))
        else:
            out[edge] = float(bvp.flux[edge] * length * len(cells))
    return out


def observe(u, layout: ObservationLayout) -> np.ndarray:
    return np.asarray(u)[layout.head_cells]


class ObservableFunction:
    """``xi -> heads at wells`` through the KLE and the flow solver.

    Every call counts as one forward query (``queries``); nothing is cached.
    """

    def __init__(self, grid: GridGeometry, bvp: BvpSpec, basis: FieldBasis,
                 layout: ObservationLayout):
        if basis.n_cells != grid.n_cells:
            raise ValueError("basis and grid disagree on cell count")
        bvp.check(grid)
        layout.check(grid)
        self.grid = grid
        self.bvp = bvp
        self.basis = basis
        self.layout = layout
        self._queries = 0
        self._lock = threading.Lock()

    @property
    def queries(self) -> int:
        return self._queries

    @property
    def n_inputs(self) -> int:
        return self.basis.n_terms

    @property
    def n_outputs(self) -> int:
        return len(self.layout.head_cells)

    def _count(self, k=1):
        with self._lock:
            self._queries += k

    def __call__(self, xi) -> np.ndarray:
        self._count()
        u = solve_head(self.grid, self.bvp, expand(self.basis, xi))
        return observe(u, self.layout)

    def batch(self, Xi) -> np.ndarray:
        """Observables for each column of ``Xi``; shape ``(n_outputs, q)``."""
        Xi = np.asarray(Xi, dtype=float)
        out = np.empty((self.n_outputs, Xi.shape[1]))
        for k in range(Xi.shape[1]):
            out[:, k] = self(Xi[:, k])
        return out

    def value_and_jacobian(self, xi):
        """Observables and their Jacobian w.r.t. ``xi`` (forward sensitivities)."""
        self._count()
        y = expand(self.basis, xi)
        u, du = solve_with_sensitivity(self.grid, self.bvp, y, self.basis.scaled_modes)
        return observe(u, self.layout), du[self.layout.head_cells]


def observable_fn(grid, bvp, basis, layout) -> ObservableFunction:
    return ObservableFunction(grid, bvp, basis, layout)
