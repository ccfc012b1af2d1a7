"""MAP estimation of KLE coefficients from head and field data.

The objective is

    1/(2 s_u^2) |u_obs - g(xi)|^2  [+ 1/(2 s_y^2) |y_obs - y(X; xi)|^2]  + gamma/2 |xi|^2

with ``g`` either a ridge surrogate (BA-MAP) or the flow solver itself
(CKLEMAP). The field-data term is used only with unconditional bases.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.optimize import least_squares

from .ba import RidgeSurrogate, predict, predict_jacobian
from .darcy import ObservableFunction
from .kle import FieldBasis, expand

GTOL = 1e-8
MAX_ITER = 50_000


@dataclass(frozen=True)
class InverseProblemSpec:
    u_obs: np.ndarray
    sigma_u: float
    gamma: float
    y_obs: Optional[np.ndarray] = None
    sigma_y: Optional[float] = None
    field_cells: Optional[np.ndarray] = None
    regularizer: str = "l2"

    def __post_init__(self):
        if not self.sigma_u > 0:
            raise ValueError("sigma_u must be positive")
        if self.gamma < 0:
            raise ValueError("gamma must be nonnegative")
        if self.regularizer != "l2":
            raise ValueError("only the squared l2 regularizer is supported")
        if self.y_obs is not None:
            if self.field_cells is None or len(self.field_cells) != len(self.y_obs):
                raise ValueError("field data need matching field_cells")
            if not (self.sigma_y and self.sigma_y > 0):
                raise ValueError("field data need a positive sigma_y")

    @property
    def uses_field_data(self) -> bool:
        return self.y_obs is not None and len(self.y_obs) > 0


@dataclass
class InversionResult:
    xi: np.ndarray
    field: np.ndarray
    iterations: int
    evaluations: int
    objective: float
    converged: bool
    status: str
    rel_l2: Optional[float] = None
    abs_linf: Optional[float] = None
    history: list = field(default_factory=list, repr=False)


def _forward(predictor, xi):
    if isinstance(predictor, RidgeSurrogate):
        return predict(predictor, xi), predict_jacobian(predictor, xi)
    if isinstance(predictor, ObservableFunction):
        return predictor.value_and_jacobian(xi)
    raise TypeError(f"unsupported predictor {type(predictor).__name__}")


def residuals(xi, spec: InverseProblemSpec, predictor, basis: FieldBasis):
    """Stacked weighted residuals and their Jacobian at ``xi``.

    Blocks: ``(u_obs - g(xi)) / sigma_u``, then ``(y_obs - y(X; xi)) / sigma_y``
    when field data are used, then ``sqrt(gamma) xi``.
    """
    xi = np.asarray(xi, dtype=float)
    if xi.shape != (basis.n_terms,):
        raise ValueError(f"expected {basis.n_terms} coefficients")
    g, J = _forward(predictor, xi)
    if len(g) != len(spec.u_obs):
        raise ValueError("predictor output does not match u_obs")
    blocks = [(spec.u_obs - g) / spec.sigma_u]
    jacs = [-J / spec.sigma_u]
    if spec.uses_field_data:
        S = basis.scaled_modes[spec.field_cells]
        y = basis.mean[spec.field_cells] + S @ xi
        blocks.append((spec.y_obs - y) / spec.sigma_y)
        jacs.append(-S / spec.sigma_y)
    sg = np.sqrt(spec.gamma)
    blocks.append(sg * xi)
    jacs.append(sg * np.eye(len(xi)))
    return np.concatenate(blocks), np.vstack(jacs)


def field_errors(y_est, y_ref):
    """Relative l2 and absolute l-infinity errors."""
    y_est = np.asarray(y_est, dtype=float)
    y_ref = np.asarray(y_ref, dtype=float)
    if y_est.shape != y_ref.shape:
        raise ValueError("fields live on different grids")
    d = y_est - y_ref
    return float(np.linalg.norm(d) / np.linalg.norm(y_ref)), float(np.max(np.abs(d)))


def solve_map(spec: InverseProblemSpec, predictor, basis: FieldBasis, xi0=None,
              y_ref=None, gtol: float = GTOL, max_iter: int = MAX_ITER) -> InversionResult:
    """Trust-region reflective least squares from ``xi0`` (default: zero).

    ``iterations`` counts Jacobian evaluations, i.e. accepted steps plus the
    initial point; ``history`` holds the objective at each of them.
    """
    xi0 = np.zeros(basis.n_terms) if xi0 is None else np.asarray(xi0, dtype=float)
    if not np.all(np.isfinite(xi0)):
        raise ValueError("non-finite starting point")
    cache = {}
    history = []

    def at(x):
        key = x.tobytes()
        if key not in cache:
            cache.clear()
            cache[key] = residuals(x, spec, predictor, basis)
        return cache[key]

    def fun(x):
        return at(x)[0]

    def jac(x):
        r, J = at(x)
        history.append(0.5 * float(r @ r))
        return J

    # ftol/xtol only catch stagnation at rounding level
    sol = least_squares(fun, xi0, jac=jac, method="trf", gtol=gtol, xtol=1e-12,
                        ftol=1e-12, max_nfev=max_iter)
    y = expand(basis, sol.x)
    # status 0 means the evaluation budget ran out
    res = InversionResult(sol.x, y, int(sol.njev), int(sol.nfev), float(sol.cost),
                          sol.status > 0, sol.message, history=history)
    if y_ref is not None:
        res.rel_l2, res.abs_linf = field_errors(y, y_ref)
    return res
