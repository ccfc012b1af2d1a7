"""Hermite polynomial chaos with Smolyak-Gauss-Hermite projection.

Polynomials are the probabilists' Hermite polynomials normalized to unit
variance under the standard normal measure, ``H_n = He_n / sqrt(n!)``.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass
from functools import lru_cache
from math import comb

import numpy as np
from scipy.linalg import eigh_tridiagonal

NODE_TOL = 1e-12


def hermite_table(p: int, x) -> np.ndarray:
    """Normalized Hermite values ``H_0..H_p`` at ``x``; shape ``(p + 1,) + x.shape``.

    Uses the normalized recurrence
    ``H_{n+1} = (x H_n - sqrt(n) H_{n-1}) / sqrt(n + 1)``.
    """
    x = np.asarray(x, dtype=float)
    out = np.empty((p + 1,) + x.shape)
    out[0] = 1.0
    if p >= 1:
        out[1] = x
    for n in range(1, p):
        out[n + 1] = (x * out[n] - np.sqrt(n) * out[n - 1]) / np.sqrt(n + 1)
    return out


def hermite_norm(n: int, x):
    if n < 0:
        raise ValueError("degree must be nonnegative")
    v = hermite_table(n, x)[n]
    return float(v) if np.ndim(v) == 0 else v


def hermite_table_deriv(p: int, x) -> np.ndarray:
    """Derivatives ``H_n'(x) = sqrt(n) H_{n-1}(x)`` for n = 0..p."""
    h = hermite_table(p, x)
    d = np.zeros_like(h)
    for n in range(1, p + 1):
        d[n] = np.sqrt(n) * h[n - 1]
    return d


@dataclass(frozen=True)
class MultiIndexSet:
    """All multi-indices in ``r`` dimensions with total degree at most ``p``."""

    r: int
    p: int
    indices: np.ndarray  # (n_terms, r) int

    def __len__(self):
        return len(self.indices)

    def position(self, alpha) -> int:
        hits = np.flatnonzero(np.all(self.indices == np.asarray(alpha), axis=1))
        if not len(hits):
            raise KeyError(tuple(alpha))
        return int(hits[0])


def multi_index_set(r: int, p: int) -> MultiIndexSet:
    """Total-degree set in graded lexicographic order."""
    if r < 1 or p < 0:
        raise ValueError("need r >= 1 and p >= 0")
    idx = [a for a in itertools.product(range(p + 1), repeat=r) if sum(a) <= p]
    idx.sort(key=lambda a: (sum(a), a))
    arr = np.array(idx, dtype=int).reshape(-1, r)
    assert len(arr) == comb(r + p, p)
    return MultiIndexSet(r, p, arr)


@lru_cache(maxsize=None)
def gauss_hermite(n: int):
    """``n``-point Gauss rule for the standard normal weight (Golub-Welsch)."""
    if n < 1:
        raise ValueError("need at least one node")
    if n == 1:
        return np.zeros(1), np.ones(1)
    off = np.sqrt(np.arange(1, n, dtype=float))
    nodes, vecs = eigh_tridiagonal(np.zeros(n), off)
    weights = vecs[0] ** 2
    # enforce the exact symmetry of the rule
    nodes = 0.5 * (nodes - nodes[::-1])
    weights = 0.5 * (weights + weights[::-1])
    weights = weights / weights.sum()
    nodes.setflags(write=False)
    weights.setflags(write=False)
    return nodes, weights


def growth(level: int) -> int:
    """Number of 1-D points at ``level`` (linear growth)."""
    return level


@dataclass(frozen=True)
class QuadratureRule:
    nodes: np.ndarray  # (n_nodes, r)
    weights: np.ndarray
    level: int
    dim: int

    def __len__(self):
        return len(self.weights)

    def integrate(self, f_values) -> float:
        return float(np.dot(self.weights, f_values))


def _compositions(total: int, parts: int):
    """Positive integer vectors of length ``parts`` summing to ``total``."""
    if parts == 1:
        yield (total,)
        return
    for first in range(1, total - parts + 2):
        for rest in _compositions(total - first, parts - 1):
            yield (first,) + rest


@lru_cache(maxsize=None)
def _smolyak(r: int, level: int):
    q = level + r - 1
    nodes, weights = [], []
    for s in range(max(r, q - r + 1), q + 1):
        coef = (-1) ** (q - s) * comb(r - 1, q - s)
        for levels in _compositions(s, r):
            rules = [gauss_hermite(growth(i)) for i in levels]
            grid = np.array(list(itertools.product(*[x for x, _ in rules]))).reshape(-1, r)
            w = np.ones(len(grid))
            for k, combo in enumerate(itertools.product(*[w_ for _, w_ in rules])):
                w[k] = np.prod(combo)
            nodes.append(grid)
            weights.append(coef * w)
    nodes = np.concatenate(nodes)
    weights = np.concatenate(weights)
    # merge coincident nodes of the non-nested union
    key = np.round(nodes / NODE_TOL).astype(np.int64) if np.all(
        np.abs(nodes) < 1e6) else nodes
    uniq, inverse = np.unique(key, axis=0, return_inverse=True)
    inverse = inverse.ravel()
    merged_w = np.zeros(len(uniq))
    np.add.at(merged_w, inverse, weights)
    merged_x = np.zeros((len(uniq), r))
    merged_x[inverse] = nodes
    keep = np.abs(merged_w) > 1e-15
    return merged_x[keep], merged_w[keep]


def smolyak_gh(r: int, level: int) -> QuadratureRule:
    """Smolyak combination of Gauss-Hermite rules in ``r`` dimensions.

    For ``r = 1`` this is the ``level``-point Gauss-Hermite rule.
    """
    if r < 1 or level < 1:
        raise ValueError("need r >= 1 and level >= 1")
    x, w = _smolyak(r, level)
    return QuadratureRule(x.copy(), w.copy(), level, r)


def basis_matrix(index_set: MultiIndexSet, eta) -> np.ndarray:
    """``H_alpha(eta_k)`` for points given as rows of ``eta``; shape (n_pts, n_terms)."""
    eta = np.atleast_2d(np.asarray(eta, dtype=float))
    table = hermite_table(index_set.p, eta)  # (p+1, n, r)
    out = np.ones((eta.shape[0], len(index_set)))
    for d in range(index_set.r):
        out *= table[index_set.indices[:, d], :, d].T
    return out


@dataclass(frozen=True)
class PceModel:
    index_set: MultiIndexSet
    coefficients: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.coefficients, dtype=float).ravel()
        if len(c) != len(self.index_set):
            raise ValueError("coefficient count does not match index set")
        object.__setattr__(self, "coefficients", c)

    @property
    def dim(self) -> int:
        return self.index_set.r

    def __call__(self, eta):
        return eval_pce(self, eta)


def project(f_query, index_set: MultiIndexSet, rule: QuadratureRule) -> PceModel:
    """Coefficients ``c_alpha = sum_i w_i f(eta_i) H_alpha(eta_i)``.

    ``f_query`` is called once per node with an ``r``-vector.
    """
    if rule.dim != index_set.r:
        raise ValueError("quadrature dimension differs from index set dimension")
    values = np.empty(len(rule))
    for i, eta in enumerate(rule.nodes):
        v = float(f_query(eta))
        if not np.isfinite(v):
            raise FloatingPointError(f"non-finite value at node {eta.tolist()}")
        values[i] = v
    return project_values(values, index_set, rule)


def project_values(values, index_set: MultiIndexSet, rule: QuadratureRule) -> PceModel:
    """Projection from function values already evaluated at ``rule.nodes``."""
    B = basis_matrix(index_set, rule.nodes)
    return PceModel(index_set, B.T @ (rule.weights * np.asarray(values, dtype=float)))


def _as_points(model: PceModel, eta):
    eta = np.asarray(eta, dtype=float)
    if eta.ndim == 0:
        eta = eta.reshape(1)
    if eta.shape[0] != model.dim:
        raise ValueError(f"expected {model.dim} coordinates, got {eta.shape[0]}")
    return eta


def eval_pce(model: PceModel, eta):
    """Evaluate at a point (``r``-vector) or at columns of an ``(r, n)`` array."""
    eta = _as_points(model, eta)
    pts = eta.reshape(model.dim, -1).T
    out = basis_matrix(model.index_set, pts) @ model.coefficients
    return float(out[0]) if eta.ndim == 1 else out


def eval_grad(model: PceModel, eta) -> np.ndarray:
    """Gradient w.r.t. ``eta``; shape ``(r,)`` or ``(r, n)`` for batched input."""
    eta = _as_points(model, eta)
    pts = eta.reshape(model.dim, -1).T
    idx = model.index_set.indices
    h = hermite_table(model.index_set.p, pts)
    dh = hermite_table_deriv(model.index_set.p, pts)
    grad = np.empty((model.dim, len(pts)))
    for d in range(model.dim):
        prod = np.ones((len(pts), len(idx)))
        for e in range(model.dim):
            tab = dh if e == d else h
            prod *= tab[idx[:, e], :, e].T
        grad[d] = prod @ model.coefficients
    return grad[:, 0] if eta.ndim == 1 else grad


def zero_model(index_set: MultiIndexSet) -> PceModel:
    return PceModel(index_set, np.zeros(len(index_set)))
