"""Three routes to the joint law of (Q(t), intensity(t)) for the reference model.

The fixed-point transform, the characteristics ODE and Monte Carlo should
agree on E[z^Q exp(-s Lam)]; the moment ODE should agree with sample moments.
"""
from pathlib import Path

import numpy as np

from hawkeslab.cluster import sample_state
from hawkeslab.io import parse_model
from hawkeslab.moments import characteristics_transform, factorial_to_raw, solve_moments_transient
from hawkeslab.rng import StreamFactory
from hawkeslab.transform import fixed_point_transform, mean_queue_from_R1

model = parse_model(Path(__file__).parent / "configs" / "reference.json")
t, z, s = 5.0, 0.5, 0.3

# %% transform
fp = fixed_point_transform(model, t, z, s)
ch = characteristics_transform(model, t, z, s)
smp = sample_state(model, [t], 20_000, StreamFactory(11, "demo-transform"))
x = z ** smp.Q[:, 0, 0] * np.exp(-s * smp.Lam[:, 0, 0])
print(f"fixed point      {fp:.6f}")
print(f"characteristics  {ch:.6f}")
print(f"Monte Carlo      {x.mean():.6f} +- {x.std(ddof=1) / np.sqrt(x.size):.6f}")

# %% moments up to order 2
raw = factorial_to_raw(solve_moments_transient(model, 2, [t]))
for q, g in raw.indices:
    if 0 < q[0] + g[0]:
        sim = (smp.Q[:, 0, 0] ** q[0] * smp.Lam[:, 0, 0] ** g[0]).mean()
        print(f"E[Q^{q[0]} Lam^{g[0]}]  ode {raw.get(q, g)[-1]:8.4f}   simulation {sim:8.4f}")

# %% mean queue from the renewal-type equation
print(f"\nE[Q(10)] via Volterra {mean_queue_from_R1(model, 10.0):.6f}, "
      f"via moment ODE {solve_moments_transient(model, 1, [10.0]).get((1,), (0,))[-1]:.6f}")
