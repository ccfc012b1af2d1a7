"""Basis adaptation: low-dimensional ridge surrogates of scalar observables.

For every observable ``u(xi)`` a rotation ``A`` (rows ``a_1..a_K``) and a
Hermite PCE ``f`` are built so that ``u(xi) ~ f(A xi)``. Directions come from
sparse affine fits (basis pursuit denoising) of the normalized observable,
and later directions from the residual left by the current surrogate. Two
variants are supported:

``KD``
    a full ``K``-dimensional PCE re-projected after each new direction;
``Kx1D``
    a sum of one-dimensional PCEs, one per direction.
"""
from __future__ import annotations

import logging
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np
from scipy.linalg import LinAlgError, solve

from . import io
from .pce import (PceModel, eval_grad, eval_pce, multi_index_set, project,
                  smolyak_gh, zero_model)

logger = logging.getLogger(__name__)

VARIANTS = ("KD", "Kx1D")


class DegenerateObservableError(ValueError):
    """The observable (or its residual) has no usable variation."""


@dataclass
class EnsembleDataset:
    """Paired ensembles: ``Xi`` (n_inputs x q) and ``U`` (n_outputs x q)."""

    Xi: np.ndarray
    U: np.ndarray
    seed: Optional[int] = None
    role: str = "train"

    def __post_init__(self):
        self.Xi = np.atleast_2d(np.asarray(self.Xi, dtype=float))
        self.U = np.atleast_2d(np.asarray(self.U, dtype=float))
        if self.Xi.shape[1] != self.U.shape[1]:
            raise ValueError("Xi and U have different sample counts")
        if not (np.all(np.isfinite(self.Xi)) and np.all(np.isfinite(self.U))):
            raise ValueError("dataset has non-finite entries")
        if self.role not in ("train", "test"):
            raise ValueError(f"bad role {self.role!r}")

    @property
    def q(self) -> int:
        return self.Xi.shape[1]


# ---------------------------------------------------------------------------
# basis pursuit denoising
# ---------------------------------------------------------------------------

@dataclass
class BpdnResult:
    a: np.ndarray
    b: float
    eps: float
    residual: float
    converged: bool
    iterations: int
    active: int

    def report(self) -> dict:
        return {"eps": self.eps, "residual": self.residual,
                "converged": self.converged, "iterations": self.iterations,
                "active": self.active, "l1": float(np.abs(self.a).sum() + abs(self.b))}


def _lasso_homotopy(G, c, uu, eps, penalized, max_iter):
    """Follow the LASSO path ``min 1/2 |Dx - u|^2 + lam |x_P|_1`` until the
    residual norm reaches ``eps``.

    Works on the Gram matrix ``G = D^T D``, ``c = D^T u`` and ``uu = |u|^2``.
    Returns ``(x, residual, reached, steps)``.
    """
    n = len(c)
    free = ~penalized
    x = np.zeros(n)

    def rnorm(x):
        return np.sqrt(max(uu - 2.0 * x @ c + x @ G @ x, 0.0))

    def solve_sub(idx, rhs):
        sub = G[np.ix_(idx, idx)]
        try:
            return solve(sub, rhs, assume_a="pos")
        except (LinAlgError, ValueError):
            return np.linalg.lstsq(sub, rhs, rcond=None)[0]

    if free.any():
        fi = np.flatnonzero(free)
        x[fi] = solve_sub(fi, c[fi])
    if rnorm(x) <= eps:
        return x, rnorm(x), True, 0

    corr = c - G @ x
    pen = np.flatnonzero(penalized)
    if not len(pen) or np.max(np.abs(corr[pen])) == 0.0:
        return x, rnorm(x), False, 0
    lam = float(np.max(np.abs(corr[pen])))
    active = np.zeros(n, dtype=bool)
    sign = np.zeros(n)
    tie = 1e-12 * lam
    hit = pen[np.abs(np.abs(corr[pen]) - lam) <= tie]
    active[hit] = True
    sign[hit] = np.sign(corr[hit])

    for step in range(1, max_iter + 1):
        E = np.flatnonzero(active | free)
        # direction of x_E as lam decreases: d = G_EE^{-1} s_E
        d = solve_sub(E, sign[E])
        kappa = float(sign[E] @ d)
        rho0 = rnorm(x)
        # residual^2 along the segment: rho0^2 - kappa * t * (2 lam - t)
        disc = lam * lam - (rho0 * rho0 - eps * eps) / kappa if kappa > 0 else -1.0
        t_target = lam - np.sqrt(disc) if disc >= 0 else np.inf

        t_next = lam
        event = None
        inactive = np.flatnonzero(penalized & ~active)
        if len(inactive):
            a_j = G[np.ix_(inactive, E)] @ d
            cj = corr[inactive]
            with np.errstate(divide="ignore", invalid="ignore"):
                t1 = (lam - cj) / (1.0 - a_j)
                t2 = (lam + cj) / (1.0 + a_j)
            cand = np.where(t1 > tie, t1, np.inf)
            cand = np.minimum(cand, np.where(t2 > tie, t2, np.inf))
            k = int(np.argmin(cand))
            if cand[k] < t_next:
                t_next, event = float(cand[k]), ("add", inactive[k])
        act = np.flatnonzero(active)
        if len(act):
            pos = np.searchsorted(E, act)
            with np.errstate(divide="ignore", invalid="ignore"):
                t3 = -x[act] / d[pos]
            t3 = np.where(t3 > tie, t3, np.inf)
            k = int(np.argmin(t3))
            if t3[k] < t_next:
                t_next, event = float(t3[k]), ("drop", act[k])

        if t_target <= t_next:
            x[E] += t_target * d
            return x, rnorm(x), True, step
        x[E] += t_next * d
        lam -= t_next
        if event is None or lam <= tie:
            return x, rnorm(x), rnorm(x) <= eps, step
        kind, j = event
        if kind == "add":
            active[j] = True
            sign[j] = np.sign(c[j] - G[j] @ x)
        else:
            active[j] = False
            sign[j] = 0.0
            x[j] = 0.0
        # re-anchor x on the exact path point to stop drift
        E = np.flatnonzero(active | free)
        x[:] = 0.0
        x[E] = solve_sub(E, c[E] - lam * sign[E])
        corr = c - G @ x
    return x, rnorm(x), False, max_iter


def bpdn(design, target, eps: float, has_bias: bool = True, penalize_bias: bool = True,
         max_iter: Optional[int] = None) -> BpdnResult:
    """Basis pursuit denoising ``min |[a; b]|_1  s.t.  |target - design [a; b]|_2 <= eps``.

    ``design`` is ``q x (m + 1)`` with the bias column last (or ``q x m``
    with ``has_bias=False``, in which case ``b`` is returned as 0). With
    ``penalize_bias=False`` the bias is left out of the l1 norm. The
    solution follows the exact LASSO homotopy path, so it is deterministic
    and accurate to rounding. If ``eps`` is below the least-squares residual
    the problem is infeasible; the least-squares fit is returned with
    ``converged=False``.
    """
    D = np.asarray(design, dtype=float)
    u = np.asarray(target, dtype=float).ravel()
    if eps < 0:
        raise ValueError("eps must be nonnegative")
    if not (np.all(np.isfinite(D)) and np.all(np.isfinite(u))):
        raise ValueError("non-finite design or target")
    n = D.shape[1]
    G = D.T @ D
    # tiny ridge keeps the path unique when columns are dependent
    G[np.diag_indices(n)] += 1e-13 * max(float(np.max(np.diag(G))), 1e-300)
    c = D.T @ u
    penalized = np.ones(n, dtype=bool)
    if has_bias and not penalize_bias:
        penalized[-1] = False
    x, _, reached, steps = _lasso_homotopy(
        G, c, float(u @ u), float(eps), penalized, max_iter or 20 * n + 100)
    residual = float(np.linalg.norm(u - D @ x))
    converged = residual <= eps + 1e-6
    if not converged:
        logger.warning("bpdn: residual %.3g exceeds eps %.3g", residual, eps)
    a, b = (x[:-1].copy(), float(x[-1])) if has_bias else (x.copy(), 0.0)
    return BpdnResult(a, b, float(eps), residual, converged, steps, int(np.count_nonzero(a)))


# ---------------------------------------------------------------------------
# directions
# ---------------------------------------------------------------------------

@dataclass
class DirectionFit:
    direction: np.ndarray
    mean: float
    std: float
    bpdn: BpdnResult


def _normalize(u):
    u = np.asarray(u, dtype=float).ravel()
    mean, std = float(u.mean()), float(u.std())
    if not std >= 1e-14 * max(1.0, abs(mean)):
        raise DegenerateObservableError(f"observable is constant (std={std:.3g})")
    return (u - mean) / std, mean, std


def bpdn_eps(design, target, tau: float) -> float:
    """``sqrt(r_ls^2 + (tau |target|)^2)`` with ``r_ls`` the least-squares residual."""
    coef = np.linalg.lstsq(design, target, rcond=None)[0]
    r_ls = float(np.linalg.norm(target - design @ coef))
    return float(np.hypot(r_ls, tau * np.linalg.norm(target)))


def dominant_direction(Xi, u, tau: float = 0.01, penalize_bias: bool = True,
                       eps: Optional[float] = None, debias: bool = True) -> DirectionFit:
    """Unit direction of the sparse affine fit ``u_hat ~ Xi^T a + b``.

    ``Xi`` is ``n_inputs x q``, ``u`` has length ``q``. The bias is
    discarded and ``a`` normalized; its sign is chosen so that ``a^T xi`` is
    positively correlated with ``u``.

    With ``debias`` the l1 solution only selects the support, and the
    coefficients on it are refitted by least squares. This removes the
    uniform shrinkage of the l1 penalty, which otherwise tilts the direction
    towards the smaller coefficients.
    """
    Xi = np.asarray(Xi, dtype=float)
    u_hat, mean, std = _normalize(u)
    D = np.column_stack([Xi.T, np.ones(Xi.shape[1])])
    if eps is None:
        eps = bpdn_eps(D, u_hat, tau)
    res = bpdn(D, u_hat, eps, penalize_bias=penalize_bias)
    a = res.a
    support = np.flatnonzero(a)
    if debias and len(support):
        cols = np.append(support, D.shape[1] - 1)
        coef = np.linalg.lstsq(D[:, cols], u_hat, rcond=None)[0]
        a = np.zeros_like(res.a)
        a[support] = coef[:-1]
    norm = np.linalg.norm(a)
    if norm == 0.0:
        raise DegenerateObservableError("sparse fit selected no direction")
    a = a / norm
    if (a @ Xi) @ u_hat < 0:
        a = -a
    return DirectionFit(a, mean, std, res)


def _orthonormalize(a, A):
    """Remove the span of the rows of ``A`` from ``a`` (twice) and normalize."""
    for _ in range(2):
        if len(A):
            a = a - A.T @ (A @ a)
    n = np.linalg.norm(a)
    if n == 0.0:
        raise DegenerateObservableError("direction lies in the current subspace")
    return a / n


def next_direction(Xi, u, f_k: Callable, A_k, tau: float = 0.01,
                   penalize_bias: bool = True, debias: bool = True) -> Optional[DirectionFit]:
    """Next direction from the residual of the current surrogate.

    ``f_k`` maps the ``k x q`` array ``A_k Xi`` to ``q`` predictions. Returns
    ``None`` when the residual has no variation left (the surrogate is
    already exact on the data).
    """
    Xi = np.asarray(Xi, dtype=float)
    u = np.asarray(u, dtype=float).ravel()
    A_k = np.atleast_2d(np.asarray(A_k, dtype=float))
    resid = u - np.asarray(f_k(A_k @ Xi)).ravel()
    if resid.std() <= 1e-10 * max(u.std(), 1e-300) or resid.std() < 1e-14:
        return None
    Xi_p = Xi - A_k.T @ (A_k @ Xi)
    fit = dominant_direction(Xi_p, resid, tau=tau, penalize_bias=penalize_bias, debias=debias)
    a = _orthonormalize(fit.direction, A_k)
    if (a @ Xi_p) @ (resid - resid.mean()) < 0:
        a = -a
    fit.direction = a
    return fit


# ---------------------------------------------------------------------------
# surrogates
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PceConfig:
    degree: int = 3
    level: int = 5
    tau: float = 0.01
    penalize_bias: bool = True
    debias: bool = True


@dataclass
class RidgeTerm:
    """Surrogate of one observable."""

    rows: np.ndarray                      # (K, n_inputs), orthonormal
    models: list                          # KD: [f_K]; Kx1D: [q_1..q_K]
    offsets: list = field(default_factory=list)   # Kx1D: f_{k-1}(0)
    stats: list = field(default_factory=list)     # (mean, std) per stage
    bpdn: list = field(default_factory=list)      # BpdnResult.report() per stage
    train_rmse: list = field(default_factory=list)
    fallback: list = field(default_factory=list)  # stage fell back to previous model
    queries: int = 0

    @property
    def K(self) -> int:
        return self.rows.shape[0]


@dataclass
class RidgeSurrogate:
    variant: str
    terms: list
    n_inputs: int
    degree: int
    level: int
    K: int

    @property
    def n_outputs(self) -> int:
        return len(self.terms)

    @property
    def queries(self) -> list:
        return [t.queries for t in self.terms]


def parse_variant(name: str):
    """``"1D"`` -> (KD, 1); ``"2D"`` -> (KD, 2); ``"2x1D"`` -> (Kx1D, 2)."""
    m = re.fullmatch(r"(\d+)\s*[xX×]\s*1D", name)
    if m:
        return "Kx1D", int(m.group(1))
    m = re.fullmatch(r"(\d+)D", name)
    if m:
        return "KD", int(m.group(1))
    raise ValueError(f"bad surrogate variant {name!r}")


def _term_predict(term: RidgeTerm, variant: str, Xi) -> np.ndarray:
    eta = term.rows @ Xi
    if variant == "KD":
        return np.atleast_1d(eval_pce(term.models[0], eta))
    out = np.zeros(Xi.shape[1])
    for k, q in enumerate(term.models):
        out += np.atleast_1d(eval_pce(q, eta[k:k + 1]))
    return out


def _term_grad(term: RidgeTerm, variant: str, xi) -> np.ndarray:
    eta = term.rows @ xi
    if variant == "KD":
        return term.rows.T @ eval_grad(term.models[0], eta)
    g = np.array([eval_grad(q, eta[k:k + 1])[0] for k, q in enumerate(term.models)])
    return term.rows.T @ g


def _embed(model: PceModel, k: int, degree: int) -> PceModel:
    """Lift a (k-1)-dim PCE to k dims (constant in the new coordinate)."""
    new = multi_index_set(k, degree)
    coef = np.zeros(len(new))
    for j, alpha in enumerate(model.index_set.indices):
        coef[new.position(tuple(alpha) + (0,))] = model.coefficients[j]
    return PceModel(new, coef)


def _rmse(a, b) -> float:
    return float(np.sqrt(np.mean((np.asarray(a) - np.asarray(b)) ** 2)))


def fit_one(g: Callable, Xi, u, K: int, variant: str, cfg: PceConfig) -> RidgeTerm:
    """Ridge surrogate of the scalar map ``g`` from data ``(Xi, u)``."""
    if variant not in VARIANTS:
        raise ValueError(f"variant must be one of {VARIANTS}")
    Xi = np.asarray(Xi, dtype=float)
    u = np.asarray(u, dtype=float).ravel()
    n = Xi.shape[0]
    queries = 0

    def query(xi):
        nonlocal queries
        queries += 1
        return float(g(xi))

    term = RidgeTerm(np.zeros((0, n)), [])
    prev_pred = np.zeros_like(u)
    rule1 = smolyak_gh(1, cfg.level)
    set1 = multi_index_set(1, cfg.degree)
    for k in range(1, K + 1):
        try:
            if k == 1:
                fit = dominant_direction(Xi, u, tau=cfg.tau, penalize_bias=cfg.penalize_bias,
                                         debias=cfg.debias)
            else:
                fit = next_direction(Xi, u, lambda eta: _term_predict(term, variant, Xi),
                                     term.rows, tau=cfg.tau, penalize_bias=cfg.penalize_bias,
                                     debias=cfg.debias)
        except DegenerateObservableError:
            if k == 1:
                raise
            fit = None
        if fit is None:
            logger.info("stage %d: residual exhausted, stopping at K=%d", k, k - 1)
            break
        a = _orthonormalize(fit.direction, term.rows)
        rows = np.vstack([term.rows, a])
        if variant == "KD":
            model = project(lambda eta: query(rows.T @ eta),
                            multi_index_set(k, cfg.degree), smolyak_gh(k, cfg.level))
            cand = RidgeTerm(rows, [model])
            fallback = (_embed(term.models[0], k, cfg.degree) if k > 1
                        else zero_model(multi_index_set(1, cfg.degree)))
            fallback_term = RidgeTerm(rows, [fallback])
            offset = None
        else:
            offset = float(prev_pred_at_zero(term, variant)) if k > 1 else 0.0
            q_k = project(lambda eta: query(a * eta[0]) - offset, set1, rule1)
            cand = RidgeTerm(rows, term.models + [q_k])
            fallback_term = RidgeTerm(rows, term.models + [zero_model(set1)])
        pred = _term_predict(cand, variant, Xi)
        used_fallback = False
        if k > 1 and _rmse(pred, u) > _rmse(prev_pred, u) + 1e-10:
            cand, pred, used_fallback = fallback_term, _term_predict(fallback_term, variant, Xi), True
        cand.offsets = term.offsets + ([offset] if offset is not None else [])
        cand.stats = term.stats + [(fit.mean, fit.std)]
        cand.bpdn = term.bpdn + [fit.bpdn.report()]
        cand.train_rmse = term.train_rmse + [_rmse(pred, u)]
        cand.fallback = term.fallback + [used_fallback]
        term, prev_pred = cand, pred
    term.queries = queries
    return term


def prev_pred_at_zero(term: RidgeTerm, variant: str) -> float:
    """Current surrogate evaluated at ``xi = 0``."""
    return float(_term_predict(term, variant, np.zeros((term.rows.shape[1], 1)))[0])


def fit(observable_fn: Callable, dataset, K: int, variant: str,
        cfg: PceConfig = PceConfig(), outputs=None, workers: int = 1) -> RidgeSurrogate:
    """Fit one ridge surrogate per observable (row of ``dataset.U``).

    ``observable_fn`` maps a coefficient vector to the vector of all
    observables; each PCE node costs one call.
    """
    if K < 1:
        raise ValueError("K must be at least 1")
    Xi, U = dataset.Xi, dataset.U
    outputs = range(U.shape[0]) if outputs is None else outputs

    def one(i):
        try:
            return fit_one(lambda xi: observable_fn(xi)[i], Xi, U[i], K, variant, cfg)
        except Exception as exc:
            raise type(exc)(f"observable {i}: {exc}") from exc

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            terms = list(pool.map(one, outputs))
    else:
        terms = [one(i) for i in outputs]
    return RidgeSurrogate(variant, terms, Xi.shape[0], cfg.degree, cfg.level, K)


def predict(surrogate: RidgeSurrogate, Xi) -> np.ndarray:
    """Predictions for columns of ``Xi``; shape ``(n_outputs, q)``.

    A single coefficient vector gives a vector of length ``n_outputs``.
    """
    Xi = np.asarray(Xi, dtype=float)
    single = Xi.ndim == 1
    Xi2 = Xi.reshape(surrogate.n_inputs, -1)
    out = np.array([_term_predict(t, surrogate.variant, Xi2) for t in surrogate.terms])
    return out[:, 0] if single else out


def predict_jacobian(surrogate: RidgeSurrogate, xi) -> np.ndarray:
    """Jacobian of the predictions at ``xi``; shape ``(n_outputs, n_inputs)``."""
    xi = np.asarray(xi, dtype=float)
    return np.array([_term_grad(t, surrogate.variant, xi) for t in surrogate.terms])


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------

def save_surrogate(s: RidgeSurrogate, path, extra: Optional[dict] = None) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    terms = []
    for i, t in enumerate(s.terms):
        io.write_matrix(path / f"rows_{i:04d}.bin", t.rows)
        for k, m in enumerate(t.models):
            io.write_matrix(path / f"coef_{i:04d}_{k}.bin", m.coefficients)
        terms.append({
            "K": t.K, "dims": [m.dim for m in t.models], "offsets": t.offsets,
            "stats": [list(x) for x in t.stats], "bpdn": t.bpdn,
            "train_rmse": t.train_rmse, "fallback": t.fallback, "queries": t.queries,
        })
    header = {"variant": s.variant, "K": s.K, "degree": s.degree, "level": s.level,
              "growth": "linear m(i)=i", "n_inputs": s.n_inputs, "terms": terms}
    if extra:
        header.update(extra)
    io.write_json(path / "header.json", header)


def load_surrogate(path) -> RidgeSurrogate:
    path = Path(path)
    h = io.read_json(path / "header.json")
    terms = []
    for i, th in enumerate(h["terms"]):
        rows = io.read_matrix(path / f"rows_{i:04d}.bin").reshape(th["K"], h["n_inputs"])
        models = [PceModel(multi_index_set(d, h["degree"]),
                           io.read_matrix(path / f"coef_{i:04d}_{k}.bin").ravel())
                  for k, d in enumerate(th["dims"])]
        terms.append(RidgeTerm(rows, models, th["offsets"], [tuple(x) for x in th["stats"]],
                               th["bpdn"], th["train_rmse"], th["fallback"], th["queries"]))
    return RidgeSurrogate(h["variant"], terms, h["n_inputs"], h["degree"], h["level"], h["K"])
