import math

import numpy as np
import pytest
from scipy import stats

from hawkeslab.cluster import (RealizedKernel, sample_cluster_sizes, sample_offspring_times, sample_state,
                               simulate_cluster, simulate_paths, simulate_paths_many)
from hawkeslab.errors import GenerationCapExceeded
from hawkeslab.events import ARRIVAL, DEPARTURE, reconstruct_paths
from hawkeslab.io import builtin_config, parse_model
from hawkeslab.model import ExcitationMode, Kernel, MarkDistribution, NetworkModel, ServiceDistribution

from conftest import markov_model


def test_offspring_zero_kernel(rng):
    rk = RealizedKernel(ExcitationMode.HAWKES, 1.0, 1.0, Kernel.zero())
    assert sample_offspring_times(rk, 10.0, rng).size == 0


def test_offspring_delayed_window_empty(rng):
    rk = RealizedKernel(ExcitationMode.DELAYED, 5.0, 2.0, Kernel.exponential(1.0))
    for _ in range(50):
        assert sample_offspring_times(rk, 2.0, rng).size == 0


@pytest.mark.parametrize("kernel", [Kernel.exponential(1.0), Kernel.piecewise_constant([0, 0.5, 2], [1.2, 0.2])])
def test_offspring_count_poisson(kernel, rng):
    rk = RealizedKernel(ExcitationMode.HAWKES, 1.0, 1.0, kernel)
    counts = np.array([sample_offspring_times(rk, np.inf, rng).size for _ in range(20000)])
    mean = kernel.l1
    assert abs(counts.mean() - mean) < 4 * math.sqrt(mean / counts.size)
    assert abs(counts.var() - mean) < 0.05


def test_offspring_delayed_shift(rng):
    rk = RealizedKernel(ExcitationMode.DELAYED, 2.0, 1.5, Kernel.exponential(1.0))
    times = np.concatenate([sample_offspring_times(rk, 50.0, rng) for _ in range(3000)])
    assert times.min() >= 1.5
    # lags after J are Exp(1)
    assert stats.kstest(times - 1.5, "expon").pvalue > 1e-3


def test_offspring_ephemeral_cut(rng):
    rk = RealizedKernel(ExcitationMode.EPHEMERAL, 3.0, 0.4, Kernel.exponential(1.0))
    times = np.concatenate([sample_offspring_times(rk, 50.0, rng) for _ in range(2000)])
    assert times.max() < 0.4
    assert times.size / 2000 == pytest.approx(3.0 * (1 - math.exp(-0.4)), rel=0.06)


def test_cluster_zero_kernel(rng):
    m = NetworkModel.univariate(1.0, Kernel.zero())
    node = simulate_cluster(m, 0, 0.0, 100.0, rng)
    assert node.size() == 1 and node.children == []


def test_cluster_tree_invariants(rng):
    m = markov_model(r=1.25, mode="hawkes")
    for _ in range(200):
        root = simulate_cluster(m, 0, 1.0, 30.0, rng)
        for node in root.iter_nodes():
            for c in node.children:
                assert node.birth <= c.birth <= 30.0
                assert c.event.parent_id == node.event.particle_id


def test_cluster_mean_size_borel(rng):
    m = markov_model(r=2.0)
    sizes = np.array([simulate_cluster(m, 0, 0.0, np.inf, rng).size() for _ in range(4000)])
    # Borel(0.5): mean 2, variance rho/(1-rho)^3 = 4
    assert abs(sizes.mean() - 2.0) < 4 * 2.0 / math.sqrt(sizes.size)


def test_generation_cap():
    m = markov_model(r=0.5)  # supercritical
    with pytest.raises(GenerationCapExceeded):
        sample_cluster_sizes(m, 0, 10, 3, node_cap=500)


def test_block_engine_sizes_match_tree(rng):
    m = markov_model(r=2.0, mode="hawkes")
    a = sample_cluster_sizes(m, 0, 4000, 11)
    b = np.array([simulate_cluster(m, 0, 0.0, np.inf, rng).size() for _ in range(4000)])
    assert stats.mannwhitneyu(a, b).pvalue > 1e-3


def test_mm_inf_stationary_poisson():
    m = NetworkModel.univariate(1.0, Kernel.zero())
    s = sample_state(m, [50.0], 20000, 5, want=("Q",))
    q = s.Q[:, 0, 0]
    assert abs(q.mean() - 1.0) < 4 / math.sqrt(q.size)
    assert abs(q.var() - 1.0) < 0.06


def test_zero_baseline_empty():
    m = markov_model(lambda0=0.0)
    assert len(simulate_paths(m, 50.0, 1)) == 0


def test_figure1_log_delayed_bumps_at_departures():
    m = parse_model(builtin_config("figure1"))
    log = simulate_paths(m, 30.0, 2024)
    assert len(log) > 0 and log.is_sorted()
    dep = log.time[log.kind == DEPARTURE]
    arr = log.time[log.kind == ARRIVAL]
    assert dep.size > 0
    eps = 1e-9
    up = reconstruct_paths(log, m, dep).Lam[:, 0] - reconstruct_paths(log, m, dep - eps).Lam[:, 0]
    assert np.all(up > 0)
    # arrivals that are not also departure epochs do not move the intensity
    arr = arr[~np.isin(arr, dep)]
    jump = reconstruct_paths(log, m, arr).Lam[:, 0] - reconstruct_paths(log, m, arr - eps).Lam[:, 0]
    assert np.all(jump <= 1e-6)


def test_paths_thread_independent():
    m = markov_model(mode="hawkes")
    a = simulate_paths_many(m, 20.0, 12, 99, threads=1)
    b = simulate_paths_many(m, 20.0, 12, 99, threads=3)
    for x, y in zip(a, b):
        assert np.array_equal(x.time, y.time) and np.array_equal(x.particle_id, y.particle_id)


def test_log_and_state_agree():
    m = markov_model(mode="delayed")
    logs = simulate_paths_many(m, 10.0, 5, 4)
    for log in logs:
        p = reconstruct_paths(log, m, [10.0])
        assert p.Q[0, 0] >= 0 and p.Lam[0, 0] >= m.lambda0[0]
        assert p.N[0, 0] == np.sum(log.kind == ARRIVAL)


def test_mode_total_sizes_equal_hawkes_delayed():
    k = Kernel.exponential(1.0, 0.6)
    svc = ServiceDistribution.lognormal(0.0, 1.0)
    mark = MarkDistribution.gamma(2.0, 2.0)
    a = sample_cluster_sizes(NetworkModel.univariate(1, k, mark, svc, mode="hawkes"), 0, 20000, 1)
    b = sample_cluster_sizes(NetworkModel.univariate(1, k, mark, svc, mode="delayed"), 0, 20000, 2)
    assert stats.ks_2samp(a, b).pvalue > 1e-3
