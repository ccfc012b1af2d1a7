"""Sampling-based forward UQ: Gaussian KDE and density comparison metrics."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import trapezoid

KDE_POINTS = 512
KL_POINTS = 1024
KL_FLOOR = 1e-12
# above this many kernel evaluations samples are linearly binned first
_EXACT_LIMIT = 4_000_000
_BINS = 1 << 14


class DegenerateSampleError(ValueError):
    pass


def scott_bandwidth(samples) -> float:
    x = np.asarray(samples, dtype=float).ravel()
    return float(np.std(x, ddof=1) * len(x) ** (-1.0 / 5.0))


def _gauss_sum(centers, counts, points, h):
    out = np.zeros(len(points))
    step = max(1, _EXACT_LIMIT // max(len(points), 1))
    for s in range(0, len(centers), step):
        z = (points[:, None] - centers[None, s:s + step]) / h
        out += np.exp(-0.5 * z * z) @ counts[s:s + step]
    return out


@dataclass(frozen=True)
class PdfEstimate:
    """Density evaluated on ``grid`` plus what is needed to re-evaluate it."""

    grid: np.ndarray
    density: np.ndarray
    bandwidth: float
    n: int
    _centers: np.ndarray = field(repr=False, default=None)
    _counts: np.ndarray = field(repr=False, default=None)

    def evaluate(self, points) -> np.ndarray:
        points = np.asarray(points, dtype=float)
        s = _gauss_sum(self._centers, self._counts, points.ravel(), self.bandwidth)
        return (s / (self.n * self.bandwidth * np.sqrt(2 * np.pi))).reshape(points.shape)

    @property
    def mass(self) -> float:
        return float(trapezoid(self.density, self.grid))


def kde(samples, n_points: int = KDE_POINTS) -> PdfEstimate:
    """Gaussian KDE with Scott's bandwidth ``h = std * n^(-1/5)``.

    Evaluated on ``n_points`` equispaced abscissae over
    ``[min - 3h, max + 3h]``.
    """
    x = np.asarray(samples, dtype=float).ravel()
    if len(x) < 2:
        raise DegenerateSampleError("need at least two samples")
    if not np.all(np.isfinite(x)):
        raise ValueError("non-finite samples")
    h = scott_bandwidth(x)
    if not h > 0:
        raise DegenerateSampleError("samples are constant")
    lo, hi = x.min() - 3 * h, x.max() + 3 * h
    grid = np.linspace(lo, hi, n_points)
    if len(x) * n_points <= _EXACT_LIMIT:
        centers, counts = x, np.ones(len(x))
    else:
        # linear binning; bin width is far below h for any n this large
        edges = np.linspace(x.min(), x.max(), _BINS)
        pos = (x - edges[0]) / (edges[1] - edges[0])
        i = np.clip(np.floor(pos).astype(int), 0, _BINS - 2)
        frac = pos - i
        counts = np.bincount(i, 1 - frac, _BINS) + np.bincount(i + 1, frac, _BINS)
        keep = counts > 0
        centers, counts = edges[keep], counts[keep]
    est = PdfEstimate(grid, np.zeros(n_points), h, len(x), centers, counts)
    return PdfEstimate(grid, est.evaluate(grid), h, len(x), centers, counts)


def shared_grid(p: PdfEstimate, q: PdfEstimate, n_points: int = KL_POINTS) -> np.ndarray:
    lo = min(p.grid[0], q.grid[0])
    hi = max(p.grid[-1], q.grid[-1])
    return np.linspace(lo, hi, n_points)


def kl_divergence(p: PdfEstimate, q: PdfEstimate, n_points: int = KL_POINTS) -> float:
    """Trapezoidal ``int p log(p / (q + floor))`` on the union span of both grids.

    Not symmetric; estimation noise can make it slightly negative.
    """
    if p is q:
        return 0.0
    grid = shared_grid(p, q, n_points)
    pv = p.evaluate(grid)
    qv = q.evaluate(grid)
    with np.errstate(divide="ignore", invalid="ignore"):
        integrand = np.where(pv > 0, pv * np.log(pv / (qv + KL_FLOOR)), 0.0)
    return float(trapezoid(integrand, grid))


def rmse(pred, actual, axis=-1) -> np.ndarray:
    d = np.asarray(pred, dtype=float) - np.asarray(actual, dtype=float)
    return np.sqrt(np.mean(d * d, axis=axis))


def rmse_table(surrogate, dataset) -> np.ndarray:
    """Per-observable RMSE of ``surrogate`` on a test dataset.

    ``surrogate`` may be a :class:`~ckba.ba.RidgeSurrogate` or any callable
    mapping ``Xi`` to an ``(n_outputs, q)`` prediction array.
    """
    if getattr(dataset, "role", "test") != "test":
        raise ValueError("rmse_table expects a test dataset")
    from .ba import RidgeSurrogate, predict
    pred = predict(surrogate, dataset.Xi) if isinstance(surrogate, RidgeSurrogate) \
        else surrogate(dataset.Xi)
    return rmse(pred, dataset.U, axis=1)
