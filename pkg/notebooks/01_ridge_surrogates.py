# %% [markdown]
# # Ridge surrogates for well heads
#
# A 16x16 transmissivity field is conditioned on 40 point measurements and
# expanded in 24 KLE modes. Each well head is then a function of 24
# standard-normal coefficients, and we compare BA surrogates of
# dimension one and two against the solver on held-out samples.

# %%
import numpy as np

from ckba.ba import EnsembleDataset, fit, predict
from ckba.kle import sample_coeffs
from ckba.pipeline import resolve
from ckba.pipeline.experiment import (bvp_from, build_basis, grid_from, make_observable,
                                      prior_from, synthesize)

cfg = resolve({"grid": {"nx": 16, "ny": 16}, "n_xi": 24, "n_y": [40],
               "wells": {"n_u": 8, "n_diagnostic": 3}})
syn = synthesize(cfg)
grid, bvp, gp = grid_from(cfg), bvp_from(cfg), prior_from(cfg)
cells, values = syn["field_sets"][40]
basis = build_basis(cfg, grid, gp, cells, values, kind="conditional")
print("leading eigenvalues", np.round(basis.eigenvalues[:6], 4))

# %% [markdown]
# Training and test ensembles come from independent named streams.

# %%
g = make_observable(grid, bvp, basis, syn["layout"])
xi_train = sample_coeffs(cfg["seed"], 300, cfg["n_xi"], "demo/train")
xi_test = sample_coeffs(cfg["seed"], 300, cfg["n_xi"], "demo/test")
train = EnsembleDataset(xi_train, g.batch(xi_train), cfg["seed"], "train")
test = EnsembleDataset(xi_test, g.batch(xi_test), cfg["seed"], "test")

# %%
for name, kind, K in (("1D", "KD", 1), ("2x1D", "Kx1D", 2), ("2D", "KD", 2)):
    s = fit(g, train, K, kind)
    err = np.sqrt(np.mean((predict(s, test.Xi) - test.U) ** 2, axis=1))
    print(f"{name:5s} test rmse per well", np.array2string(err, formatter={"float": "{:.1e}".format}),
          " node queries", s.queries[0])

# %% [markdown]
# Head variance at each well relative to its surrogate error shows how much
# of the variation a single direction already captures.

# %%
s1 = fit(g, train, 1, "KD")
resid = predict(s1, test.Xi) - test.U
print("explained fraction", np.round(1 - resid.var(axis=1) / test.U.var(axis=1), 5))
