"""Truncated (conditional) Karhunen-Loeve expansions on a cell grid.

The Mercer eigenproblem is discretized with cell-area quadrature weights
``w`` (Nystrom): ``W^{1/2} C W^{1/2} v = lambda v`` and ``phi = W^{-1/2} v``,
so the eigenfunctions are orthonormal in the weighted inner product.
"""
from __future__ import annotations

import re
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.linalg import eigh, LinAlgError

from . import io


class EigenSolverError(np.linalg.LinAlgError):
    def __init__(self, msg, index=None):
        super().__init__(msg)
        self.index = index


@dataclass(frozen=True)
class FieldBasis:
    """Truncated KLE of a random field over ``n_cells`` grid cells.

    Attributes
    ----------
    mean : ndarray, shape (n_cells,)
    eigenvalues : ndarray, shape (n_terms,)
        Sorted descending, nonnegative.
    eigenfunctions : ndarray, shape (n_cells, n_terms)
        Column ``i`` holds the discretized ``phi_i``.
    kind : {"unconditional", "conditional"}
    """

    mean: np.ndarray
    eigenvalues: np.ndarray
    eigenfunctions: np.ndarray
    kind: str = "unconditional"

    @property
    def n_terms(self) -> int:
        return len(self.eigenvalues)

    @property
    def n_cells(self) -> int:
        return len(self.mean)

    @property
    def scaled_modes(self) -> np.ndarray:
        """``phi_i * sqrt(lambda_i)`` as columns; the linear part of :func:`expand`."""
        return self.eigenfunctions * np.sqrt(self.eigenvalues)

    def covariance(self) -> np.ndarray:
        s = self.scaled_modes
        return s @ s.T

    def with_mean(self, mean) -> "FieldBasis":
        return FieldBasis(np.asarray(mean, dtype=float), self.eigenvalues,
                          self.eigenfunctions, self.kind)

    def truncated(self, n_terms: int) -> "FieldBasis":
        return FieldBasis(self.mean, self.eigenvalues[:n_terms],
                          self.eigenfunctions[:, :n_terms], self.kind)


def _fix_signs(phi: np.ndarray) -> np.ndarray:
    # argmax returns the lowest index among ties
    idx = np.argmax(np.abs(phi), axis=0)
    signs = np.sign(phi[idx, np.arange(phi.shape[1])])
    signs[signs == 0] = 1.0
    return phi * signs


def eigensolve(cov, weights, n_terms: int, mean=None,
               kind: str = "unconditional") -> FieldBasis:
    """Leading ``n_terms`` eigenpairs of the weighted covariance operator.

    Negative eigenvalues from roundoff are clamped to zero. Each
    eigenfunction is signed so that its largest-magnitude entry is positive.
    """
    cov = np.asarray(cov, dtype=float)
    n = cov.shape[0]
    if cov.shape != (n, n):
        raise ValueError("covariance must be square")
    weights = np.broadcast_to(np.asarray(weights, dtype=float), (n,))
    if np.any(weights <= 0):
        raise ValueError("quadrature weights must be positive")
    if not 1 <= n_terms <= n:
        raise ValueError(f"n_terms must lie in [1, {n}]")
    sw = np.sqrt(weights)
    b = sw[:, None] * cov * sw[None, :]
    b = 0.5 * (b + b.T)
    try:
        vals, vecs = eigh(b, subset_by_index=[n - n_terms, n - 1])
    except LinAlgError as exc:
        # LAPACK reports the failing eigenvalue index as its error code
        m = re.search(r"(\d+)\)?\s*$", str(exc))
        index = int(m.group(1)) if m else None
        raise EigenSolverError(f"eigensolver failed at index {index}: {exc}", index) from exc
    order = np.argsort(vals)[::-1]
    vals = np.clip(vals[order], 0.0, None)
    phi = _fix_signs(vecs[:, order] / sw[:, None])
    mean = np.zeros(n) if mean is None else np.asarray(mean, dtype=float)
    return FieldBasis(mean, vals, phi, kind)


def expand(basis: FieldBasis, xi) -> np.ndarray:
    """Field values ``mean + sum_i sqrt(lambda_i) xi_i phi_i``.

    ``xi`` may be a vector of length ``n_terms`` or a matrix with one
    coefficient vector per column; the result has matching shape.
    """
    xi = np.asarray(xi, dtype=float)
    if xi.shape[0] != basis.n_terms:
        raise ValueError(f"expected {basis.n_terms} coefficients, got {xi.shape[0]}")
    out = basis.scaled_modes @ xi
    if xi.ndim == 1:
        return basis.mean + out
    return basis.mean[:, None] + out


def stream(seed: int, tag: str = "") -> np.random.Generator:
    """Counter-based generator for the stream named ``tag`` under ``seed``."""
    key = zlib.crc32(tag.encode("utf-8"))
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(key,))
    return np.random.Generator(np.random.Philox(ss))


def sample_coeffs(seed, count: int, n_terms: int, tag: str = "coeffs") -> np.ndarray:
    """``n_terms x count`` matrix of i.i.d. standard normal draws.

    ``seed`` is an integer (combined with ``tag`` into a Philox stream) or an
    existing :class:`numpy.random.Generator`.
    """
    if count < 0:
        raise ValueError("count must be nonnegative")
    rng = seed if isinstance(seed, np.random.Generator) else stream(seed, tag)
    # draw column-major so the first k columns do not depend on count
    return rng.standard_normal((count, n_terms)).T.copy()


def save_basis(basis: FieldBasis, path, grid_hash: str = "") -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    io.write_matrix(path / "mean.bin", basis.mean)
    io.write_matrix(path / "eigenvalues.bin", basis.eigenvalues)
    io.write_matrix(path / "eigenfunctions.bin", basis.eigenfunctions)
    io.write_json(path / "header.json", {
        "kind": basis.kind,
        "n_terms": basis.n_terms,
        "n_cells": basis.n_cells,
        "grid_hash": grid_hash,
    })


def load_basis(path) -> FieldBasis:
    path = Path(path)
    header = io.read_json(path / "header.json")
    basis = FieldBasis(
        io.read_matrix(path / "mean.bin").ravel(),
        io.read_matrix(path / "eigenvalues.bin").ravel(),
        io.read_matrix(path / "eigenfunctions.bin"),
        header["kind"],
    )
    if basis.n_terms != header["n_terms"] or basis.n_cells != header["n_cells"]:
        raise ValueError(f"basis arrays in {path} disagree with header")
    return basis
