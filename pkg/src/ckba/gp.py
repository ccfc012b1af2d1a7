"""Gaussian-process models of the log-transmissivity field.

A :class:`GpModel` carries a mean function and a stationary covariance
kernel. Conditioning on direct point measurements (simple Kriging) returns a
new model whose mean and covariance are

.. math::

    \\bar y^c(x) = m(x) + C(x, X) [C(X, X) + \\sigma_y^2 I]^{-1} (\\hat y - m(X))

    C^c(x, x') = C(x, x') - C(x, X) [C(X, X) + \\sigma_y^2 I]^{-1} C(X, x')

Points are arrays of shape ``(n, 2)``.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional, Union

import numpy as np
from scipy.linalg import cho_factor, cho_solve, LinAlgError
from scipy.spatial.distance import cdist

logger = logging.getLogger(__name__)

KERNEL_FAMILIES = ("matern52", "squared-exponential")

JITTER_START = 1e-10
JITTER_DOUBLINGS = 10


class DegenerateGramError(np.linalg.LinAlgError):
    """The observation Gram matrix could not be factorized."""


@dataclass(frozen=True)
class KernelSpec:
    """Stationary isotropic covariance kernel."""

    family: str = "matern52"
    variance: float = 1.0
    lengthscale: float = 0.2

    def __post_init__(self):
        if self.family not in KERNEL_FAMILIES:
            raise ValueError(f"unknown kernel family {self.family!r}")
        if not self.variance > 0:
            raise ValueError("kernel variance must be positive")
        if not self.lengthscale > 0:
            raise ValueError("kernel lengthscale must be positive")

    def of_distance(self, r):
        """Evaluate the kernel as a function of distance ``r``."""
        r = np.asarray(r, dtype=float)
        if self.family == "matern52":
            s = np.sqrt(5.0) * r / self.lengthscale
            return self.variance * (1.0 + s + s * s / 3.0) * np.exp(-s)
        return self.variance * np.exp(-0.5 * (r / self.lengthscale) ** 2)

    def matrix(self, x1, x2):
        x1 = np.atleast_2d(np.asarray(x1, dtype=float))
        x2 = np.atleast_2d(np.asarray(x2, dtype=float))
        return self.of_distance(cdist(x1, x2))


def kernel_eval(spec: KernelSpec, x1, x2) -> float:
    """Covariance between two single points."""
    r = np.linalg.norm(np.asarray(x1, dtype=float) - np.asarray(x2, dtype=float))
    return float(spec.of_distance(r))


@dataclass(frozen=True)
class Conditioning:
    locations: np.ndarray
    values: np.ndarray
    noise_variance: float
    # Cholesky factor of C(X, X) + (noise + jitter) I and the Kriging weights
    # (C(X, X) + ...)^{-1} (y - m(X)).
    factor: tuple = field(repr=False)
    alpha: np.ndarray = field(repr=False)
    jitter: float = 0.0

    @property
    def size(self) -> int:
        return len(self.values)


MeanLike = Union[float, Callable[[np.ndarray], np.ndarray]]


@dataclass(frozen=True)
class GpModel:
    """Gaussian process, optionally conditioned on point data.

    Parameters
    ----------
    kernel : KernelSpec
        Prior covariance.
    mean : float or callable
        Constant prior mean, or a function mapping ``(n, 2)`` points to ``n``
        values.
    conditioning : Conditioning, optional
        Set by :func:`condition`; do not build by hand.
    """

    kernel: KernelSpec = field(default_factory=KernelSpec)
    mean: MeanLike = 0.0
    conditioning: Optional[Conditioning] = None

    @property
    def is_conditioned(self) -> bool:
        return self.conditioning is not None

    def prior_mean(self, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if callable(self.mean):
            return np.asarray(self.mean(x), dtype=float).reshape(len(x))
        return np.full(len(x), float(self.mean))

    def mean_at(self, x) -> np.ndarray:
        """Posterior (or prior) mean at points ``x``."""
        m = self.prior_mean(x)
        c = self.conditioning
        if c is None:
            return m
        return m + self.kernel.matrix(x, c.locations) @ c.alpha

    def cov(self, x1, x2=None) -> np.ndarray:
        """Posterior (or prior) covariance matrix between point sets."""
        sym = x2 is None
        if sym:
            x2 = x1
        k = self.kernel.matrix(x1, x2)
        c = self.conditioning
        if c is None:
            return k
        k1 = self.kernel.matrix(x1, c.locations)
        if sym:
            v = cho_solve(c.factor, k1.T)
            out = k - k1 @ v
            return 0.5 * (out + out.T)
        k2 = self.kernel.matrix(c.locations, x2)
        return k - k1 @ cho_solve(c.factor, k2)


def _factor_gram(gram: np.ndarray):
    """Cholesky with adaptive diagonal jitter. Returns (factor, jitter)."""
    scale = max(float(np.mean(np.diag(gram))), 1e-300)
    jitter = 0.0
    for attempt in range(JITTER_DOUBLINGS + 2):
        try:
            g = gram if jitter == 0.0 else gram + jitter * scale * np.eye(len(gram))
            return cho_factor(g, lower=True), jitter
        except LinAlgError:
            jitter = JITTER_START if jitter == 0.0 else 2.0 * jitter
    raise DegenerateGramError(
        f"Gram matrix not factorizable with jitter up to {jitter / 2:.3g}"
    )


def condition(gp: GpModel, X, y_hat, noise_variance: float = 0.0) -> GpModel:
    """Condition ``gp`` on observations ``y_hat`` at locations ``X``.

    Duplicate locations are allowed only when ``noise_variance > 0``.
    Conditioning an already conditioned model is not supported.
    """
    X = np.asarray(X, dtype=float).reshape(-1, 2)
    y_hat = np.asarray(y_hat, dtype=float).ravel()
    if len(X) != len(y_hat):
        raise ValueError("locations and values differ in length")
    if noise_variance < 0:
        raise ValueError("noise variance must be nonnegative")
    if len(X) == 0:
        return gp
    if gp.is_conditioned:
        raise ValueError("model is already conditioned")
    if noise_variance == 0.0 and len(np.unique(X, axis=0)) < len(X):
        raise DegenerateGramError("duplicate observation locations without noise")
    gram = gp.kernel.matrix(X, X)
    gram[np.diag_indices_from(gram)] += noise_variance
    factor, jitter = _factor_gram(gram)
    if jitter:
        logger.info("gram factorized with relative jitter %.3g", jitter)
    alpha = cho_solve(factor, y_hat - gp.prior_mean(X))
    cond = Conditioning(X, y_hat, float(noise_variance), factor, alpha, jitter)
    return GpModel(kernel=gp.kernel, mean=gp.mean, conditioning=cond)


def cond_cov_matrix(gp: GpModel, points, weights=None) -> np.ndarray:
    """Covariance matrix of ``gp`` over grid cell centers.

    ``weights`` is accepted for interface symmetry with the eigensolver and
    does not enter the matrix itself.
    """
    points = np.atleast_2d(np.asarray(points, dtype=float))
    if len(points) == 0:
        raise ValueError("empty grid")
    if weights is not None and len(weights) != len(points):
        raise ValueError("weights do not match grid")
    return gp.cov(points)
