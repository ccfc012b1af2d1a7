"""Experiment configuration: strict JSON schema with desk-scale defaults."""
from __future__ import annotations

import copy
import hashlib
import json
from pathlib import Path

DEFAULTS = {
    "seed": 20231,
    "grid": {
        "nx": 32, "ny": 32, "lx": 1.0, "ly": 1.0,
        "boundary": {"left": "dirichlet", "right": "dirichlet",
                     "bottom": "neumann", "top": "neumann"},
    },
    "bvp": {
        "head": {"left": 1.0, "right": 0.0},
        "flux": {"bottom": 0.0, "top": 0.0},
    },
    "kernel": {
        "family": "matern52",
        "variance": 1.0,
        # null -> 0.2 x domain diagonal
        "lengthscale": None,
        "mean": 0.0,
    },
    "n_xi": 128,
    "n_y": [25, 50, 100, 200],
    "nested": True,
    "wells": {"n_u": 20, "jitter": 0.5, "n_diagnostic": 5},
    "noise": {"sigma_u": 1e-6, "sigma_y": 1e-3},
    "ensemble": {"q_train": 1000, "q_test": 1000},
    "ba": {
        "variants": ["1D", "2x1D", "2D"],
        "degree": 3,
        "level": 5,
        "tau": 0.01,
        "penalize_bias": True,
        "debias": True,
    },
    "uq": {"kde_points": 512, "kl_points": 1024},
    "inversion": {
        "gamma_conditional": 1e-6,
        "gamma_unconditional": 0.1,
        "variants": ["1D", "2x1D"],
        "cklemap": True,
        "unconditional": True,
        "max_iter": 50000,
    },
}

# keys whose values are free-form mappings (not checked key by key)
_OPEN_KEYS = {("grid", "boundary"), ("bvp", "head"), ("bvp", "flux")}


class ConfigError(ValueError):
    def __init__(self, errors):
        self.errors = list(errors)
        super().__init__("invalid configuration:\n  " + "\n  ".join(self.errors))


def _merge(defaults, given, path, errors):
    out = copy.deepcopy(defaults)
    for key, value in given.items():
        here = path + (key,)
        if key not in defaults:
            errors.append(f"unknown key {'.'.join(here)}")
            continue
        if isinstance(defaults[key], dict) and here not in _OPEN_KEYS:
            if not isinstance(value, dict):
                errors.append(f"{'.'.join(here)} must be an object")
                continue
            out[key] = _merge(defaults[key], value, here, errors)
        else:
            out[key] = copy.deepcopy(value)
    return out


def _check(cfg, errors):
    def positive_int(path, v):
        if not (isinstance(v, int) and not isinstance(v, bool) and v > 0):
            errors.append(f"{path} must be a positive integer (got {v!r})")

    def positive(path, v):
        if not (isinstance(v, (int, float)) and not isinstance(v, bool) and v > 0):
            errors.append(f"{path} must be positive (got {v!r})")

    if not isinstance(cfg["seed"], int) or isinstance(cfg["seed"], bool) or cfg["seed"] < 0:
        errors.append("seed must be a nonnegative integer")
    g = cfg["grid"]
    for k in ("nx", "ny"):
        positive_int(f"grid.{k}", g[k])
        if isinstance(g[k], int) and g[k] < 2:
            errors.append(f"grid.{k} must be at least 2")
    for k in ("lx", "ly"):
        positive(f"grid.{k}", g[k])
    edges = ("left", "right", "bottom", "top")
    if set(g["boundary"]) != set(edges):
        errors.append(f"grid.boundary needs exactly the edges {edges}")
    elif not any(v == "dirichlet" for v in g["boundary"].values()):
        errors.append("grid.boundary needs at least one dirichlet edge")
    else:
        for e, kind in g["boundary"].items():
            if kind not in ("dirichlet", "neumann"):
                errors.append(f"grid.boundary.{e} must be dirichlet or neumann")
            elif kind == "dirichlet" and e not in cfg["bvp"]["head"]:
                errors.append(f"bvp.head.{e} missing for dirichlet edge")
            elif kind == "neumann" and e not in cfg["bvp"]["flux"]:
                errors.append(f"bvp.flux.{e} missing for neumann edge")
    k = cfg["kernel"]
    if k["family"] not in ("matern52", "squared-exponential"):
        errors.append("kernel.family must be matern52 or squared-exponential")
    positive("kernel.variance", k["variance"])
    if k["lengthscale"] is not None:
        positive("kernel.lengthscale", k["lengthscale"])
    positive_int("n_xi", cfg["n_xi"])
    if isinstance(g["nx"], int) and isinstance(g["ny"], int) and isinstance(cfg["n_xi"], int):
        if cfg["n_xi"] > g["nx"] * g["ny"]:
            errors.append("n_xi exceeds the number of grid cells")
    ny = cfg["n_y"]
    if not (isinstance(ny, list) and ny):
        errors.append("n_y must be a nonempty list")
    else:
        for v in ny:
            positive_int("n_y[]", v)
        if sorted(set(ny)) != ny:
            errors.append("n_y must be strictly increasing")
    w = cfg["wells"]
    positive_int("wells.n_u", w["n_u"])
    positive_int("wells.n_diagnostic", w["n_diagnostic"])
    if isinstance(w["n_u"], int) and isinstance(w["n_diagnostic"], int) and w["n_diagnostic"] > w["n_u"]:
        errors.append("wells.n_diagnostic exceeds wells.n_u")
    if not (0 <= w["jitter"] < 1):
        errors.append("wells.jitter must lie in [0, 1)")
    positive("noise.sigma_u", cfg["noise"]["sigma_u"])
    if not cfg["noise"]["sigma_y"] >= 0:
        errors.append("noise.sigma_y must be nonnegative")
    for kk in ("q_train", "q_test"):
        positive_int(f"ensemble.{kk}", cfg["ensemble"][kk])
    if isinstance(cfg["ensemble"]["q_test"], int) and cfg["ensemble"]["q_test"] < 2:
        errors.append("ensemble.q_test must be at least 2")
    b = cfg["ba"]
    from ..ba import parse_variant
    for v in b["variants"]:
        try:
            parse_variant(v)
        except (ValueError, TypeError):
            errors.append(f"ba.variants: bad variant {v!r}")
    positive_int("ba.level", b["level"])
    if not (isinstance(b["degree"], int) and b["degree"] >= 0):
        errors.append("ba.degree must be a nonnegative integer")
    for kk in ("penalize_bias", "debias"):
        if not isinstance(b[kk], bool):
            errors.append(f"ba.{kk} must be true or false")
    if not b["tau"] >= 0:
        errors.append("ba.tau must be nonnegative")
    positive_int("uq.kde_points", cfg["uq"]["kde_points"])
    positive_int("uq.kl_points", cfg["uq"]["kl_points"])
    inv = cfg["inversion"]
    for kk in ("gamma_conditional", "gamma_unconditional"):
        if not inv[kk] >= 0:
            errors.append(f"inversion.{kk} must be nonnegative")
    for v in inv["variants"]:
        if v not in b["variants"]:
            errors.append(f"inversion.variants: {v!r} is not trained (ba.variants)")
    positive_int("inversion.max_iter", inv["max_iter"])
    if inv["unconditional"] and not cfg["noise"]["sigma_y"] > 0:
        errors.append("unconditional inversion needs noise.sigma_y > 0")


def resolve(given: dict) -> dict:
    """Merge ``given`` over the defaults and validate; raises ConfigError."""
    if not isinstance(given, dict):
        raise ConfigError(["configuration must be a JSON object"])
    errors = []
    cfg = _merge(DEFAULTS, given, (), errors)
    try:
        _check(cfg, errors)
    except (TypeError, KeyError) as exc:
        errors.append(f"malformed value: {exc}")
    if errors:
        raise ConfigError(errors)
    if cfg["kernel"]["lengthscale"] is None:
        g = cfg["grid"]
        cfg["kernel"]["lengthscale"] = 0.2 * (g["lx"] ** 2 + g["ly"] ** 2) ** 0.5
    return cfg


def load(path) -> dict:
    try:
        given = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError([f"{path}: not valid JSON ({exc})"]) from exc
    return resolve(given)


def config_hash(cfg: dict) -> str:
    text = json.dumps(cfg, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode()).hexdigest()[:16]
