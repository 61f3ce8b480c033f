"""Pairwise penalties and their group proximal maps.

Run: python gallery/penalties_and_prox.py
"""
# %%
import numpy as np

from llfmc import PenaltySpec, evaluate
from llfmc.penalty import group_prox_columns, scalar_prox

# %% [markdown]
# Each penalty acts on the length of a difference vector. The concave ones
# (MCP, SCAD, M-type) stop growing past a threshold, so large gaps between
# latent rows are not shrunk while small gaps are pulled to zero.

# %%
specs = {
    "l1": PenaltySpec("l1", 1.0),
    "sql2": PenaltySpec("sql2", 1.0),
    "mcp": PenaltySpec("mcp", 1.0, t=2.0),
    "scad": PenaltySpec("scad", 1.0),
    "mtype": PenaltySpec("mtype", 0.5, b=1.0),
}
z = np.linspace(0, 5, 11)
print("z      " + " ".join(f"{v:6.2f}" for v in z))
for name, spec in specs.items():
    print(f"{name:6} " + " ".join(f"{evaluate(spec, v):6.2f}" for v in z))

# %% [markdown]
# The 1-D prox ``argmin_s (s - r)^2 / 2 + lam * p(s)``. Firm thresholding for
# MCP: zero below ``lam * gamma``, identity above ``gamma * t``.

# %%
lam = 0.4
r = np.linspace(0, 4, 9)
print("\nr      " + " ".join(f"{v:6.2f}" for v in r))
for name, spec in specs.items():
    if lam > spec.max_prox_step():
        continue
    print(f"{name:6} " + " ".join(f"{scalar_prox(spec, v, lam):6.2f}" for v in r))

# %% [markdown]
# The group version rescales each column: only its length changes.

# %%
V = np.array([[3.0, 0.1], [4.0, 0.1]])
print("\ncolumn lengths before", np.linalg.norm(V, axis=0))
out = group_prox_columns(specs["mcp"], V, lam)
print("column lengths after ", np.linalg.norm(out, axis=0))
