"""Conditional KLE and basis-adaptation surrogates for groundwater flow.

Submodules
----------
gp        Gaussian-process priors and Kriging.
kle       Karhunen-Loeve bases on a cell grid.
darcy     Finite-volume steady Darcy flow and head sensitivities.
pce       Hermite chaos and sparse Gauss-Hermite quadrature.
ba        Basis-adaptation ridge surrogates.
uq        Kernel density estimates and KL divergence.
inverse   MAP estimation of KLE coefficients.
pipeline  Configured end-to-end experiment and command line.
"""

__version__ = "0.1.0"
