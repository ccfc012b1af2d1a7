"""Pipeline stages and the run manifest.

Each stage reads upstream artifacts from the run directory, writes its own
subdirectory from scratch and records the checksums of everything it wrote
in ``manifest.json``. A stage refuses to run when an upstream stage is
missing, was produced under a different configuration, or its files no
longer match the recorded checksums.
"""
from __future__ import annotations

import hashlib
import json
import logging
import os
import shutil
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from .. import __version__, io
from ..ba import EnsembleDataset, PceConfig, fit, load_surrogate, parse_variant, predict, save_surrogate
from ..inverse import InverseProblemSpec, solve_map
from ..kle import load_basis, sample_coeffs, save_basis
from ..uq import kde, kl_divergence, rmse
from .config import config_hash
from .experiment import (basis_names, build_basis, bvp_from, grid_from, make_observable,
                         prior_from, synthesize)
from ..darcy import ObservationLayout

logger = logging.getLogger(__name__)

STAGES = ("synth", "eigs", "ensemble", "train", "uq", "invert", "report")

UPSTREAM = {
    "synth": (),
    "eigs": ("synth",),
    "ensemble": ("synth", "eigs"),
    "train": ("ensemble", "eigs", "synth"),
    "uq": ("train", "ensemble", "synth"),
    "invert": ("train", "eigs", "synth"),
    "report": ("synth", "eigs", "ensemble", "train", "uq", "invert"),
}

# configuration sections each stage depends on (cumulative along the chain)
_SECTIONS = {
    "synth": ("seed", "grid", "bvp", "kernel", "n_y", "nested", "wells", "noise"),
    "eigs": ("n_xi",),
    "ensemble": ("ensemble",),
    "train": ("ba",),
    "uq": ("uq",),
    "invert": ("inversion",),
    "report": (),
}

MANIFEST = "manifest.json"
FMT = "%.10g"


class StageError(RuntimeError):
    """Missing or stale upstream artifacts."""


def stage_config_hash(cfg: dict, stage: str) -> str:
    keys = set()
    for s in STAGES[:STAGES.index(stage) + 1]:
        keys.update(_SECTIONS[s])
    return config_hash({k: cfg[k] for k in sorted(keys)})


def workers() -> int:
    try:
        return max(1, int(os.environ.get("CKBA_THREADS", "1")))
    except ValueError:
        return 1


def _digest(entry: dict) -> str:
    text = json.dumps(entry["files"], sort_keys=True)
    return hashlib.sha256(text.encode()).hexdigest()[:16]


class Run:
    """A run directory with its manifest."""

    def __init__(self, cfg: dict, out):
        self.cfg = cfg
        self.out = Path(out)

    def path(self, *parts) -> Path:
        return self.out.joinpath(*parts)

    def manifest(self) -> dict:
        p = self.path(MANIFEST)
        if not p.exists():
            return {"stages": {}}
        return io.read_json(p)

    def check_entry(self, stage: str, manifest: dict) -> None:
        entry = manifest["stages"].get(stage)
        if entry is None:
            raise StageError(f"stage '{stage}' has not been run in {self.out}")
        want = stage_config_hash(self.cfg, stage)
        if entry["config_hash"] != want:
            raise StageError(f"stage '{stage}' is stale: produced under configuration "
                             f"{entry['config_hash']}, current is {want}; rerun '{stage}'")
        for rel, sha in entry["files"].items():
            p = self.path(rel)
            if not p.exists():
                raise StageError(f"stage '{stage}': artifact {rel} is missing; rerun '{stage}'")
            if io.file_sha256(p) != sha:
                raise StageError(f"stage '{stage}': artifact {rel} does not match its "
                                 f"recorded checksum; rerun '{stage}'")
        for up, dig in entry.get("upstream", {}).items():
            other = manifest["stages"].get(up)
            if other is None or _digest(other) != dig:
                raise StageError(f"stage '{stage}' is stale: upstream '{up}' changed since; "
                                 f"rerun '{stage}'")

    def check_upstream(self, stage: str) -> dict:
        manifest = self.manifest()
        for up in UPSTREAM[stage]:
            self.check_entry(up, manifest)
        return manifest

    def record(self, stage: str, wall: float, queries=None) -> dict:
        manifest = self.manifest()
        root = self.path(stage)
        files = {}
        for p in sorted(root.rglob("*")):
            if p.is_file() and not p.name.startswith("."):
                files[p.relative_to(self.out).as_posix()] = io.file_sha256(p)
        entry = {
            "config_hash": stage_config_hash(self.cfg, stage),
            "files": files,
            "wall_clock_s": round(wall, 3),
            "tool_version": __version__,
            "upstream": {u: _digest(manifest["stages"][u]) for u in UPSTREAM[stage]},
        }
        if queries is not None:
            entry["queries"] = queries
        manifest["stages"][stage] = entry
        manifest["tool_version"] = __version__
        manifest["config_hash"] = config_hash(self.cfg)
        io.write_json(self.path(MANIFEST), manifest)
        return entry

    def fresh(self, stage: str) -> Path:
        root = self.path(stage)
        if root.exists():
            shutil.rmtree(root)
        root.mkdir(parents=True)
        return root


# ---------------------------------------------------------------------------
# shared loaders
# ---------------------------------------------------------------------------

def _vec(path) -> np.ndarray:
    return io.read_matrix(path).ravel()


def load_synth(run: Run) -> dict:
    root = run.path("synth")
    meta = io.read_json(root / "synth.json")
    sets = {}
    for n in run.cfg["n_y"]:
        cells = np.array(meta["field_cells"][str(n)], dtype=int)
        sets[n] = (cells, _vec(root / f"field_obs_{n}.bin"))
    return {
        "y_ref": _vec(root / "y_ref.bin"),
        "u_true": _vec(root / "u_true.bin"),
        "u_obs": _vec(root / "u_obs.bin"),
        "layout": ObservationLayout(np.array(meta["head_cells"], dtype=int)),
        "diagnostic": np.array(meta["diagnostic"], dtype=int),
        "field_sets": sets,
    }


def _basis_n_y(name: str):
    return None if name == "unc" else int(name[4:])


# ---------------------------------------------------------------------------
# stages
# ---------------------------------------------------------------------------

def stage_synth(run: Run):
    cfg = run.cfg
    root = run.fresh("synth")
    s = synthesize(cfg)
    io.write_matrix(root / "y_ref.bin", s["y_ref"])
    io.write_matrix(root / "u_true.bin", s["u_true"])
    io.write_matrix(root / "u_obs.bin", s["u_obs"])
    for n, (cells, vals) in s["field_sets"].items():
        io.write_matrix(root / f"field_obs_{n}.bin", vals)
    io.write_json(root / "synth.json", {
        "grid_hash": s["grid"].hash(),
        "head_cells": s["layout"].head_cells.tolist(),
        "diagnostic": s["diagnostic"].tolist(),
        "field_cells": {str(n): c.tolist() for n, (c, _) in s["field_sets"].items()},
    })
    return None


def stage_eigs(run: Run):
    cfg = run.cfg
    data = load_synth(run)
    root = run.fresh("eigs")
    grid, gp = grid_from(cfg), prior_from(cfg)
    summary = {}
    for name in basis_names(cfg):
        n = _basis_n_y(name)
        if n is None:
            basis = build_basis(cfg, grid, gp)
        else:
            cells, vals = data["field_sets"][n]
            basis = build_basis(cfg, grid, gp, cells, vals, kind="conditional")
        save_basis(basis, root / name, grid.hash())
        summary[name] = {"eigenvalue_sum": float(basis.eigenvalues.sum()),
                         "smallest_eigenvalue": float(basis.eigenvalues[-1])}
        logger.info("eigs %s: sum of eigenvalues %.4g", name, summary[name]["eigenvalue_sum"])
    io.write_json(root / "eigs.json", summary)
    return None


def stage_ensemble(run: Run):
    cfg = run.cfg
    data = load_synth(run)
    root = run.fresh("ensemble")
    grid, bvp = grid_from(cfg), bvp_from(cfg)
    e = cfg["ensemble"]
    xi_train = sample_coeffs(cfg["seed"], e["q_train"], cfg["n_xi"], "ensemble/train")
    xi_test = sample_coeffs(cfg["seed"], e["q_test"], cfg["n_xi"], "ensemble/test")
    io.write_matrix(root / "xi_train.bin", xi_train)
    io.write_matrix(root / "xi_test.bin", xi_test)
    queries = {}
    for name in basis_names(cfg):
        basis = load_basis(run.path("eigs", name))
        g = make_observable(grid, bvp, basis, data["layout"])
        io.write_matrix(root / name / "u_train.bin", g.batch(xi_train))
        io.write_matrix(root / name / "u_test.bin", g.batch(xi_test))
        queries[name] = g.queries
        logger.info("ensemble %s: %d forward solves", name, g.queries)
    return queries


def load_ensemble(run: Run, name: str, role: str) -> EnsembleDataset:
    xi = io.read_matrix(run.path("ensemble", f"xi_{role}.bin"))
    u = io.read_matrix(run.path("ensemble", name, f"u_{role}.bin"))
    return EnsembleDataset(xi, u, run.cfg["seed"], role)


def _pce_config(cfg) -> PceConfig:
    b = cfg["ba"]
    return PceConfig(b["degree"], b["level"], b["tau"], b["penalize_bias"], b["debias"])


def stage_train(run: Run):
    cfg = run.cfg
    data = load_synth(run)
    root = run.fresh("train")
    grid, bvp = grid_from(cfg), bvp_from(cfg)
    queries = {}
    for name in basis_names(cfg):
        basis = load_basis(run.path("eigs", name))
        train = load_ensemble(run, name, "train")
        g = make_observable(grid, bvp, basis, data["layout"])
        queries[name] = {}
        for v in cfg["ba"]["variants"]:
            kind, K = parse_variant(v)
            t0 = time.perf_counter()
            sur = fit(g, train, K, kind, _pce_config(cfg), workers=workers())
            save_surrogate(sur, root / name / v, {"name": v})
            node = sur.queries
            queries[name][v] = {"q_train": train.q, "node_queries": node,
                                "per_observable": [train.q + k for k in node]}
            logger.info("train %s %s: %.1f s, %d node queries per observable",
                        name, v, time.perf_counter() - t0, max(node))
    return queries


def stage_uq(run: Run):
    cfg = run.cfg
    data = load_synth(run)
    root = run.fresh("uq")
    diag = data["diagnostic"]
    npts, klp = cfg["uq"]["kde_points"], cfg["uq"]["kl_points"]
    for name in basis_names(cfg):
        test = load_ensemble(run, name, "test")
        train = load_ensemble(run, name, "train")
        out = {"diagnostic": diag.tolist(), "variance_mc": [], "rmse_test": {},
               "rmse_train": {}, "kl": {}, "variance_surrogate": {}}
        mc = [kde(test.U[w], npts) for w in diag]
        out["variance_mc"] = [float(np.var(test.U[w], ddof=1)) for w in diag]
        curves = [np.vstack([p.grid, p.density]) for p in mc]
        io.write_matrix(root / name / "pdf_mc.bin", np.vstack(curves))
        for v in cfg["ba"]["variants"]:
            sur = load_surrogate(run.path("train", name, v))
            pred = predict(sur, test.Xi)
            out["rmse_test"][v] = rmse(pred, test.U, axis=1).tolist()
            out["rmse_train"][v] = rmse(predict(sur, train.Xi), train.U, axis=1).tolist()
            ps = [kde(pred[w], npts) for w in diag]
            out["kl"][v] = [kl_divergence(p, m, klp) for p, m in zip(ps, mc)]
            out["variance_surrogate"][v] = [float(np.var(pred[w], ddof=1)) for w in diag]
            io.write_matrix(root / name / f"pdf_{v}.bin",
                            np.vstack([np.vstack([p.grid, p.density]) for p in ps]))
        io.write_json(root / name / "uq.json", out)
    return None


def inversion_jobs(cfg) -> list:
    """(case, n_y, method) triples in report order."""
    inv = cfg["inversion"]
    methods = (["CKLEMAP"] if inv["cklemap"] else []) + list(inv["variants"])
    jobs = [("conditional", n, m) for n in cfg["n_y"] for m in methods]
    if inv["unconditional"]:
        jobs += [("unconditional", n, v) for n in cfg["n_y"] for v in inv["variants"]]
    return jobs


def stage_invert(run: Run):
    cfg = run.cfg
    inv = cfg["inversion"]
    data = load_synth(run)
    root = run.fresh("invert")
    grid, bvp = grid_from(cfg), bvp_from(cfg)
    su, sy = cfg["noise"]["sigma_u"], cfg["noise"]["sigma_y"]

    def job(item):
        case, n, method = item
        if case == "conditional":
            name = f"cond{n}"
            spec = InverseProblemSpec(data["u_obs"], su, inv["gamma_conditional"])
        else:
            name = "unc"
            cells, vals = data["field_sets"][n]
            spec = InverseProblemSpec(data["u_obs"], su, inv["gamma_unconditional"],
                                      y_obs=vals, sigma_y=sy, field_cells=cells)
        basis = load_basis(run.path("eigs", name))
        if method == "CKLEMAP":
            predictor = make_observable(grid, bvp, basis, data["layout"])
        else:
            predictor = load_surrogate(run.path("train", name, method))
        res = solve_map(spec, predictor, basis, y_ref=data["y_ref"], max_iter=inv["max_iter"])
        queries = predictor.queries if method == "CKLEMAP" else 0
        return item, res, queries

    jobs = inversion_jobs(cfg)
    if workers() > 1:
        with ThreadPoolExecutor(workers()) as pool:
            results = list(pool.map(job, jobs))
    else:
        results = [job(j) for j in jobs]
    summary = []
    queries = {}
    for (case, n, method), res, nq in results:
        tag = f"{case}_{n}_{method}"
        io.write_matrix(root / f"{tag}_xi.bin", res.xi)
        io.write_matrix(root / f"{tag}_field.bin", res.field)
        summary.append({"case": case, "n_y": n, "method": method,
                        "iterations": res.iterations, "evaluations": res.evaluations,
                        "objective": res.objective, "converged": res.converged,
                        "status": res.status, "rel_l2": res.rel_l2, "abs_linf": res.abs_linf})
        if nq:
            queries[tag] = nq
        logger.info("invert %s: %d iterations, rel l2 %.4g", tag, res.iterations, res.rel_l2)
    io.write_json(root / "invert.json", summary)
    return queries


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------

def _fmt(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return str(bool(x)).lower()
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return FMT % x
    return str(x)


def _csv(path, header, rows) -> None:
    lines = [",".join(header)] + [",".join(_fmt(v) for v in r) for r in rows]
    io.atomic_write_text(path, "\n".join(lines) + "\n")


def stage_report(run: Run):
    cfg = run.cfg
    data = load_synth(run)
    root = run.fresh("report")
    variants = cfg["ba"]["variants"]
    diag = data["diagnostic"]
    wells = data["layout"].head_cells
    uq = {name: io.read_json(run.path("uq", name, "uq.json")) for name in basis_names(cfg)}
    train_q = {}
    for name in basis_names(cfg):
        for v in variants:
            h = io.read_json(run.path("train", name, v, "header.json"))
            train_q[name, v] = [t["queries"] for t in h["terms"]]

    def rmse_rows(names):
        rows = []
        for name in names:
            u = uq[name]
            n = _basis_n_y(name)
            for v in variants:
                tr, te = np.array(u["rmse_train"][v]), np.array(u["rmse_test"][v])
                rows.append([n if n is not None else "unc", v, tr.mean(), te.mean()]
                            + [te[w] for w in diag])
        return rows

    head = ["n_y", "variant", "mean_rmse_train", "mean_rmse_test"] + [f"rmse_test_well{w}" for w in diag]
    cond = [f"cond{n}" for n in cfg["n_y"]]
    _csv(root / "rmse_conditional.csv", head, rmse_rows(cond))
    _csv(root / "rmse_unconditional.csv", head, rmse_rows(["unc"]))

    rows = []
    for name in basis_names(cfg):
        for v in variants:
            for j, w in enumerate(diag):
                rows.append([name, v, w, int(wells[w]), uq[name]["kl"][v][j],
                             uq[name]["variance_mc"][j], uq[name]["variance_surrogate"][v][j]])
    _csv(root / "kl.csv", ["basis", "variant", "well", "cell", "kl_surrogate_mc",
                           "variance_mc", "variance_surrogate"], rows)

    names = basis_names(cfg)
    rows = [[w, int(wells[w])] + [uq[nm]["variance_mc"][j] for nm in names]
            for j, w in enumerate(diag)]
    _csv(root / "variance.csv", ["well", "cell"] + [f"variance_{nm}" for nm in names], rows)

    rows = []
    for name in names:
        for v in variants:
            for i, nq in enumerate(train_q[name, v]):
                q = cfg["ensemble"]["q_train"]
                rows.append([name, v, i, q, nq, q + nq])
    _csv(root / "queries.csv", ["basis", "variant", "well", "q_train", "node_queries",
                                "total"], rows)

    inv = io.read_json(run.path("invert", "invert.json"))
    _csv(root / "inversion.csv",
         ["case", "n_y", "method", "iterations", "rel_l2", "abs_linf", "converged"],
         [[r["case"], r["n_y"], r["method"], r["iterations"], r["rel_l2"], r["abs_linf"],
           r["converged"]] for r in inv])

    grid = grid_from(cfg)
    for r in inv:
        tag = f"{r['case']}_{r['n_y']}_{r['method']}"
        field = _vec(run.path("invert", f"{tag}_field.bin"))
        err = np.abs(field - data["y_ref"]).reshape(grid.ny, grid.nx)
        io.atomic_write_text(root / "error_maps" / f"{tag}.csv",
                             "\n".join(",".join(FMT % x for x in row) for row in err) + "\n")

    for name in names:
        sources = ["mc"] + list(variants)
        curves = {s: io.read_matrix(run.path("uq", name, f"pdf_{s}.bin")) for s in sources}
        for j, w in enumerate(diag):
            rows = []
            for s in sources:
                x, d = curves[s][2 * j], curves[s][2 * j + 1]
                rows.extend([s, a, b] for a, b in zip(x, d))
            _csv(root / "pdfs" / f"{name}_well{w}.csv", ["source", "head", "density"], rows)
    return None


_RUNNERS = {
    "synth": stage_synth, "eigs": stage_eigs, "ensemble": stage_ensemble,
    "train": stage_train, "uq": stage_uq, "invert": stage_invert, "report": stage_report,
}


def run_stage(cfg: dict, stage: str, out) -> dict:
    """Run one stage after checking its upstream; returns its manifest entry."""
    if stage not in _RUNNERS:
        raise ValueError(f"unknown stage {stage!r}")
    run = Run(cfg, out)
    run.check_upstream(stage)
    t0 = time.perf_counter()
    queries = _RUNNERS[stage](run)
    entry = run.record(stage, time.perf_counter() - t0, queries)
    logger.info("stage %s done in %.1f s", stage, entry["wall_clock_s"])
    return entry


def run_all(cfg: dict, out) -> dict:
    return {s: run_stage(cfg, s, out) for s in STAGES}
