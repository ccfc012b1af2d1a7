"""Synthetic-twin building blocks shared by the pipeline stages."""
from __future__ import annotations

import numpy as np

from ..darcy import BvpSpec, GridGeometry, ObservationLayout, observable_fn, solve_head
from ..gp import GpModel, KernelSpec, condition, cond_cov_matrix, _factor_gram
from ..kle import eigensolve, stream


def grid_from(cfg) -> GridGeometry:
    g = cfg["grid"]
    return GridGeometry(g["nx"], g["ny"], float(g["lx"]), float(g["ly"]), dict(g["boundary"]))


def bvp_from(cfg) -> BvpSpec:
    return BvpSpec(dict(cfg["bvp"]["head"]), dict(cfg["bvp"]["flux"]))


def prior_from(cfg) -> GpModel:
    k = cfg["kernel"]
    return GpModel(KernelSpec(k["family"], float(k["variance"]), float(k["lengthscale"])),
                   mean=float(k["mean"]))


def draw_reference(gp: GpModel, grid: GridGeometry, rng) -> np.ndarray:
    """One exact draw of the GP on the cell centers (not truncated)."""
    pts = grid.cell_centers
    c = gp.cov(pts)
    (L, _), _ = _factor_gram(c)
    L = np.tril(L)
    return gp.mean_at(pts) + L @ rng.standard_normal(grid.n_cells)


def well_cells(grid: GridGeometry, n_u: int, jitter: float, rng) -> np.ndarray:
    """``n_u`` distinct cells on a jittered lattice covering the domain."""
    ratio = grid.lx / grid.ly
    nc = max(1, int(np.ceil(np.sqrt(n_u * ratio))))
    nr = int(np.ceil(n_u / nc))
    sx, sy = grid.lx / nc, grid.ly / nr
    cells = []
    r = c = 0
    for k in range(nr * nc):
        r, c = divmod(k, nc)
        shift = rng.uniform(-0.5, 0.5, size=2) * jitter
        p = np.array([(c + 0.5 + shift[0]) * sx, (r + 0.5 + shift[1]) * sy])
        cell = int(grid.nearest_cell(p)[0])
        if cell not in cells:
            cells.append(cell)
        if len(cells) == n_u:
            break
    if len(cells) < n_u:
        raise ValueError("grid too coarse for the requested number of wells")
    return np.array(cells, dtype=int)


def k_center(points, k: int) -> np.ndarray:
    """Greedy k-center selection starting from the point nearest the centroid."""
    points = np.asarray(points, dtype=float)
    centroid = points.mean(axis=0)
    chosen = [int(np.argmin(np.linalg.norm(points - centroid, axis=1)))]
    dist = np.linalg.norm(points - points[chosen[0]], axis=1)
    while len(chosen) < k:
        nxt = int(np.argmax(dist))
        chosen.append(nxt)
        dist = np.minimum(dist, np.linalg.norm(points - points[nxt], axis=1))
    return np.array(chosen, dtype=int)


def field_observation_order(grid: GridGeometry, rng) -> np.ndarray:
    """Random permutation of cells; prefixes give nested observation sets."""
    return rng.permutation(grid.n_cells)


def synthesize(cfg):
    """Reference field, wells and noisy data, all from derived RNG streams."""
    seed = cfg["seed"]
    grid, bvp, gp = grid_from(cfg), bvp_from(cfg), prior_from(cfg)
    y_ref = draw_reference(gp, grid, stream(seed, "synth/reference"))
    wells = well_cells(grid, cfg["wells"]["n_u"], cfg["wells"]["jitter"],
                       stream(seed, "synth/wells"))
    diag = k_center(grid.cell_centers[wells], cfg["wells"]["n_diagnostic"])
    layout = ObservationLayout(wells)
    u_true = solve_head(grid, bvp, y_ref)[wells]
    u_obs = u_true + cfg["noise"]["sigma_u"] * stream(seed, "synth/head-noise").standard_normal(len(wells))
    order = field_observation_order(grid, stream(seed, "synth/field-cells"))
    y_noise = stream(seed, "synth/field-noise").standard_normal(grid.n_cells)
    field_sets = {}
    for i, n in enumerate(cfg["n_y"]):
        if cfg["nested"]:
            cells = order[:n]
            noise = y_noise[:n]
        else:
            r = stream(seed, f"synth/field-cells/{n}")
            cells = r.permutation(grid.n_cells)[:n]
            noise = r.standard_normal(n)
        field_sets[n] = (cells, y_ref[cells] + cfg["noise"]["sigma_y"] * noise)
    return {
        "grid": grid, "bvp": bvp, "gp": gp, "y_ref": y_ref, "layout": layout,
        "diagnostic": diag, "u_true": u_true, "u_obs": u_obs, "field_sets": field_sets,
    }


def build_basis(cfg, grid, gp, cells=None, values=None, kind="unconditional"):
    pts = grid.cell_centers
    model = gp
    if cells is not None:
        model = condition(gp, pts[cells], values, cfg["noise"]["sigma_y"] ** 2)
    cov = cond_cov_matrix(model, pts, grid.cell_areas)
    return eigensolve(cov, grid.cell_areas, cfg["n_xi"], mean=model.mean_at(pts), kind=kind)


def basis_names(cfg):
    return ["unc"] + [f"cond{n}" for n in cfg["n_y"]]


def make_observable(grid, bvp, basis, layout):
    return observable_fn(grid, bvp, basis, layout)
