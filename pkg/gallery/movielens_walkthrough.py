"""MovieLens100K: one split, unit k-NN graphs, MCP against gamma = 0.

Needs data/ml-100k (see scripts/fetch_movielens100k.py). About two minutes.

Run: python gallery/movielens_walkthrough.py [split]
"""
# %%
import sys

import numpy as np

from llfmc import (PenaltySpec, RunConfig, build_knn_graph, cut_cycles, distance_source,
                   load_movielens_split, solve)

split = sys.argv[1] if len(sys.argv) > 1 else "1"
train, test = load_movielens_split(f"data/ml-100k/u{split}.base", f"data/ml-100k/u{split}.test")
print("train", train.shape, train.nnz, "| test", test.nnz)

# %% [markdown]
# d2 fills a missing rating with the column mean, so every pair gets a
# distance even without co-rated items.

# %%
gx = cut_cycles(build_knn_graph(distance_source(train, "d2"), 100, "unit"), 0)
gy = cut_cycles(build_knn_graph(distance_source(train, "d2", transpose=True), 100, "unit"), 1)
print("forest edges", gx.n_edges, gy.n_edges)

# %%
def heldout_rmse(gamma, t=20.0, iters=3000):
    pen = PenaltySpec("mcp", gamma, t=t)
    cfg = RunConfig(rank=4, penalty_x=pen, penalty_y=pen, max_iter=iters,
                    tol1=1e-12, tol2=1e-15)
    f = solve(train, gx, gy, cfg).factors
    return np.sqrt(np.mean((f.predict_observed(test) - test.values) ** 2))

for gamma in (0.0, 4.0):
    print(f"gamma={gamma:g}: test RMSE {heldout_rmse(gamma):.4f}")
