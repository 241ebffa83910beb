"""Sample paths of a delayed Hawkes queue with Beta(3.5, 1.5) marks.

Simulates one path with the cluster engine, one with thinning, and prints
Q, N and the intensity on a coarse grid.  Run from the repo root:

    python3 demos/paths_figure1.py
"""
from pathlib import Path

import numpy as np

from hawkeslab.cluster import simulate_paths
from hawkeslab.events import reconstruct_paths
from hawkeslab.io import parse_model
from hawkeslab.rng import StreamFactory
from hawkeslab.thinning import simulate_network

# %% model
model = parse_model(Path(__file__).parent / "configs" / "figure1.json")
print(model)

# %% one path per engine, same horizon
T = 50.0
grid = np.linspace(0.0, T, 11)
f = StreamFactory(2024, "demo-figure1")
log_c = simulate_paths(model, T, f.child("cluster"))
log_t = simulate_network(model, T, f.child("thinning"))

for name, log in (("cluster", log_c), ("thinning", log_t)):
    p = reconstruct_paths(log, model, grid)
    print(f"\n{name}: {len(log)} events")
    print("    t      Q      N    intensity")
    for t, q, n, lam in zip(grid, p.Q[:, 0], p.N[:, 0], p.Lam[:, 0]):
        print(f"{t:5.1f} {q:6.0f} {n:6.0f} {lam:10.3f}")
