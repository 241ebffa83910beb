"""Cluster sizes: closed forms, the hitting-time oracle and simulation.

Exponential marks give the gamma/negative-binomial law, and an ephemeral
model with unit marks, flat kernel and exponential presence times produces
the same offspring law.
"""
import numpy as np

from hawkeslab.cluster import sample_cluster_sizes
from hawkeslab.cluster_stats import gamma_cluster_pmf, hitting_time_pmf, offspring_pmf
from hawkeslab.experiments import chi2_homogeneity, total_variation
from hawkeslab.model import Kernel, MarkDistribution, NetworkModel, ServiceDistribution
from hawkeslab.rng import StreamFactory

n = np.arange(1, 11)
closed = gamma_cluster_pmf(n, 1.0, 2.0, 1.0)
oracle = hitting_time_pmf(offspring_pmf(MarkDistribution.exponential(2.0), 1.0, 40), n)
print(" n   closed      oracle")
for k, a, b in zip(n, closed, oracle):
    print(f"{k:2d}  {a:.8f}  {b:.8f}")

svc = ServiceDistribution.exponential(1.0)
models = {
    "hawkes": NetworkModel.univariate(1.0, Kernel.exponential(1.0), MarkDistribution.exponential(2.0), svc,
                                      mode="hawkes"),
    "delayed": NetworkModel.univariate(1.0, Kernel.exponential(1.0), MarkDistribution.exponential(2.0), svc),
    "ephemeral": NetworkModel.univariate(1.0, Kernel.piecewise_constant([0.0, 30.0], [1.0]),
                                         MarkDistribution.deterministic(1.0), ServiceDistribution.exponential(2.0),
                                         mode="ephemeral"),
}
f = StreamFactory(3, "demo-clusters")
sizes = {k: sample_cluster_sizes(m, 0, 20_000, f.child(k)) for k, m in models.items()}
pmf = gamma_cluster_pmf(np.arange(1, 401), 1.0, 2.0, 1.0)
for k, v in sizes.items():
    print(f"{k:9s} mean size {v.mean():.3f}  TV to closed form {total_variation(np.bincount(v)[1:], pmf):.4f}")
print(f"chi-square homogeneity p = {chi2_homogeneity(list(sizes.values())):.3f}")
