"""Acceptance criteria, each checked at its stated tolerance.

Every check prints one ``CRITERION k ... PASS|FAIL`` line (repeated in the
terminal summary).  Seeds are fixed per criterion through keyed substreams of
master seed 7.  Criteria that do not hold for the model as stated are marked
``xfail(strict=True)``: they still run and print FAIL with the measured
numbers, and a companion test pins down what does hold.
"""
import math
import time

import numpy as np
import pytest
from scipy import linalg, stats

from hawkeslab.cluster import sample_cluster_sizes, sample_state
from hawkeslab.cluster_stats import borel_pmf, gamma_cluster_pmf, hitting_time_pmf, offspring_pmf
from hawkeslab.experiments import (chi2_homogeneity, dominance_check, fclt_run, heavy_traffic_run,
                                   load_thresholds, stationarity_equality_check, tail_index_estimate,
                                   total_variation)
from hawkeslab.model import Kernel, MarkDistribution, NetworkModel, ServiceDistribution
from hawkeslab.moments import (characteristics_transform, factorial_to_raw, lagrange_sylvester_exp,
                               solve_moments_transient, stationary_moments, transient_Z_univariate,
                               univariate_eigenvalues, univariate_moment_matrix)
from hawkeslab.rng import StreamFactory
from hawkeslab.thinning import simulate_network_many
from hawkeslab.events import reconstruct_paths
from hawkeslab.transform import fixed_point_transform, mean_queue_from_R1

from conftest import markov_model, record

pytestmark = pytest.mark.slow

TH = load_thresholds()
SE = TH["se_multiple"]
MASTER = 7


def seed(name):
    return StreamFactory(MASTER, name)


def verdict(ok):
    return "PASS" if ok else "FAIL"


# ---------------------------------------------------------------------------

def test_criterion_01_stationary_means():
    m = markov_model()
    t0 = time.perf_counter()
    s = sample_state(m, [100.0], 10_000, seed("criterion-1"))
    elapsed = time.perf_counter() - t0
    q, lam = s.Q[:, 0, 0], s.Lam[:, 0, 0]
    se_q, se_l = q.std(ddof=1) / 100, lam.std(ddof=1) / 100
    ok = abs(q.mean() - 2) <= SE * se_q and abs(lam.mean() - 2) <= SE * se_l and elapsed < 120
    record(f"CRITERION 1 stationary means: E[Q]={q.mean():.4f}+-{se_q:.4f} E[Lam]={lam.mean():.4f}+-{se_l:.4f} "
           f"target (2, 2), runtime {elapsed:.1f}s on 1 core ... {verdict(ok)}")
    assert ok


def test_criterion_02_cluster_vs_thinning():
    m = markov_model()
    a = sample_state(m, [10.0], 10_000, seed("criterion-2-cluster"), want=("Q",)).Q[:, 0, 0]
    logs = simulate_network_many(m, 10.0, 10_000, seed("criterion-2-thinning"))
    b = np.array([reconstruct_paths(log, m, [10.0]).Q[0, 0] for log in logs])
    p = stats.ks_2samp(a, b).pvalue
    ok = p > TH["ks_p_min"]
    record(f"CRITERION 2 cluster vs thinning law of Q(10): KS p={p:.4f} (means {a.mean():.3f} / {b.mean():.3f}) "
           f"... {verdict(ok)}")
    assert ok


def test_criterion_03_transform_triangle():
    m = markov_model()
    z, s, t = 0.5, 0.3, 5.0
    fp = fixed_point_transform(m, t, z, s)
    ch = characteristics_transform(m, t, z, s)
    smp = sample_state(m, [t], 100_000, seed("criterion-3"))
    x = z ** smp.Q[:, 0, 0] * np.exp(-s * smp.Lam[:, 0, 0])
    mc, se = x.mean(), x.std(ddof=1) / math.sqrt(x.size)
    tol = max(1e-4, SE * se)
    gaps = {"fp-ch": abs(fp - ch), "fp-mc": abs(fp - mc), "ch-mc": abs(ch - mc)}
    ok = all(g <= tol for g in gaps.values())
    record(f"CRITERION 3 transform triangle: fixed point {fp:.6f}, characteristics {ch:.6f}, "
           f"Monte Carlo {mc:.6f}+-{se:.6f}; max gap {max(gaps.values()):.2e} <= {tol:.2e} ... {verdict(ok)}")
    assert ok


def test_criterion_04_moment_recursion():
    m = markov_model()
    times = [1.0, 5.0, 10.0]
    raw = factorial_to_raw(solve_moments_transient(m, 3, times))
    smp = sample_state(m, times, 100_000, seed("criterion-4"))
    worst = 0.0
    for (q, g) in raw.indices:
        if q[0] + g[0] == 0:
            continue
        for c in range(len(times)):
            x = smp.Q[:, c, 0] ** q[0] * smp.Lam[:, c, 0] ** g[0]
            z = abs(raw.get(q, g)[c] - x.mean()) / (x.std(ddof=1) / math.sqrt(x.size))
            worst = max(worst, z)
    sim_ok = worst <= SE
    gap = 0.0
    tab = solve_moments_transient(m, 3, [5.0])
    for n in (1, 2, 3):
        closed = transient_Z_univariate(m, n, 5.0)
        rk = np.array([tab.get(q, g)[-1] for q, g in tab.indices if q[0] + g[0] == n])
        gap = max(gap, float(np.max(np.abs(closed - rk))))
    ok = sim_ok and gap < 1e-6
    record(f"CRITERION 4 moment recursion: orders 1-3 at t=1,5,10 vs 1e5 reps, worst |z|={worst:.2f} <= {SE}; "
           f"closed form vs RK4 at t=5 max gap {gap:.1e} < 1e-6 ... {verdict(ok)}")
    assert ok


def test_criterion_05_spectral_formulas():
    g = np.random.default_rng(5)
    eig_err = 0.0
    for n in range(1, 9):
        for _ in range(50):
            mu, r, b1 = g.uniform(0.1, 5, 3)
            f = np.sort(univariate_eigenvalues(n, mu, r, b1))
            d = np.sort(np.linalg.eigvals(univariate_moment_matrix(n, mu, r, b1)).real)
            eig_err = max(eig_err, float(np.max(np.abs(f - d))))
    A = univariate_moment_matrix(1, 1.0, 2.0, 1.0)
    ev = univariate_eigenvalues(1, 1.0, 2.0, 1.0)
    expm_err = float(np.max(np.abs(lagrange_sylvester_exp(A, ev, 1.0) - linalg.expm(A))))
    semi_err = 0.0
    for n, (mu, r, b1) in [(1, (1.0, 2.0, 1.0)), (3, (0.7, 1.9, 1.1)), (5, (2.0, 0.5, 0.3))]:
        A = univariate_moment_matrix(n, mu, r, b1)
        ev = univariate_eigenvalues(n, mu, r, b1)
        expm_err = max(expm_err, float(np.max(np.abs(lagrange_sylvester_exp(A, ev, 1.0) - linalg.expm(A)))))
        prod = lagrange_sylvester_exp(A, ev, 0.7) @ lagrange_sylvester_exp(A, ev, 0.3)
        semi_err = max(semi_err, float(np.max(np.abs(prod - lagrange_sylvester_exp(A, ev, 1.0)))))
    ok = eig_err < 1e-8 and expm_err < 1e-10 and semi_err < 1e-9
    record(f"CRITERION 5 spectral formulas: eigenvalue err {eig_err:.1e} (n<=8, 400 draws), "
           f"expm err {expm_err:.1e}, semigroup err {semi_err:.1e} ... {verdict(ok)}")
    assert ok


def test_criterion_06_cluster_sizes():
    n = np.arange(1, 51)
    conv_err = 0.0
    for rho in (0.2, 0.5, 0.9):
        conv_err = max(conv_err, float(np.max(np.abs(
            hitting_time_pmf(offspring_pmf(MarkDistribution.deterministic(1.0), rho, 200), n) - borel_pmf(n, rho)))))
    for alpha, c, rho in ((1.0, 1.0, 1.0), (2.5, 3.0, 0.8), (0.5, 2.0, 1.5)):
        conv_err = max(conv_err, float(np.max(np.abs(
            hitting_time_pmf(offspring_pmf(MarkDistribution.gamma(alpha, c), rho, 200), n)
            - gamma_cluster_pmf(n, alpha, c, rho)))))
    # simulated clusters vs closed forms
    nn = np.arange(1, 401)
    borel_model = NetworkModel.univariate(1.0, Kernel.exponential(2.0))
    c1, c2 = 2.0, 1.0
    exp1 = ServiceDistribution.exponential(1.0)
    gamma_models = [NetworkModel.univariate(1.0, Kernel.exponential(1.0), MarkDistribution.exponential(c1), exp1,
                                            mode=mode) for mode in ("hawkes", "delayed")]
    # ephemeral coincidence: B = 1, h = rho on the presence window, J ~ Exp(c) gives Poisson(rho J) offspring
    eph = NetworkModel.univariate(1.0, Kernel.piecewise_constant([0.0, 60.0 / c1], [c2]),
                                  MarkDistribution.deterministic(1.0), ServiceDistribution.exponential(c1),
                                  mode="ephemeral")
    f = seed("criterion-6")
    sizes_b = sample_cluster_sizes(borel_model, 0, 100_000, f.child("borel"))
    tv_b = total_variation(np.bincount(sizes_b)[1:], borel_pmf(nn, 0.5))
    modes = [sample_cluster_sizes(m, 0, 100_000, f.child(k)) for k, m in enumerate(gamma_models + [eph])]
    pmf_g = gamma_cluster_pmf(nn, 1.0, c1, c2)
    tvs = [total_variation(np.bincount(s)[1:], pmf_g) for s in modes]
    p = chi2_homogeneity(modes)
    ok = conv_err < 1e-10 and max([tv_b] + tvs) < TH["tv_max"] and p > TH["chi2_p_min"]
    record(f"CRITERION 6 cluster sizes: convolution err {conv_err:.1e}; TV Borel {tv_b:.4f}, "
           f"TV gamma hawkes/delayed/ephemeral {tvs[0]:.4f}/{tvs[1]:.4f}/{tvs[2]:.4f} < {TH['tv_max']}; "
           f"chi2 across modes p={p:.3f} ... {verdict(ok)}")
    assert ok


def test_criterion_07_fclt():
    m = NetworkModel.univariate(1.0, Kernel.exponential(1.0, 0.5), MarkDistribution.deterministic(1.0),
                                ServiceDistribution.exponential(1.0))
    v = [0.2, 0.4, 0.6, 0.8, 1.0]
    t0 = time.perf_counter()
    r0 = fclt_run(m, 5000.0, 0.0, 2000, v, seed("criterion-7-alpha0"))
    rh = fclt_run(m, 5000.0, 0.5, 2000, v, seed("criterion-7-alpha-half"))
    elapsed = time.perf_counter() - t0
    var1 = r0.statistics["variance"][-1]
    var_ok = abs(var1 - 8.0) <= 0.10 * 8.0
    z = np.abs(rh.statistics["mean"] + 2.0) / rh.statistics["se_mean"]
    mean_ok = bool(np.all(z <= SE))
    ok = var_ok and mean_ok and elapsed < 900
    means = ", ".join(f"{x:.3f}" for x in rh.statistics["mean"])
    record(f"CRITERION 7 FCLT: alpha=0 Var at v=1 {var1:.3f} (target 8 +-10%); alpha=1/2 means [{means}] "
           f"worst |z| vs -2 {z.max():.2f} <= {SE}; alpha=1/2 Var at v=1 {rh.statistics['variance'][-1]:.3f}; "
           f"runtime {elapsed:.0f}s ... {verdict(ok)}")
    assert ok


@pytest.mark.xfail(strict=True, reason="stationary laws of hawkes and delayed excitation differ (see README)")
def test_criterion_08_steady_state_equality():
    res = stationarity_equality_check(markov_model(), 100.0, 10_000, seed("criterion-8"))
    q, lam = res.statistics["Q"], res.statistics["Lam"]
    record(f"CRITERION 8 steady-state equality: KS p Q={q['ks_pvalue']:.1e}, Lam={lam['ks_pvalue']:.1e} "
           f"(Var Q {q['var_hawkes']:.2f} vs {q['var_delayed']:.2f}) ... {verdict(res.passed)}"
           + ("" if res.passed else " [DEVIATION: equal means, unequal laws; exact moments give Var Lam "
                                    "10.0 vs 5.556 at r=1.25]"))
    assert res.passed


def test_criterion_08_companion_equal_means_unequal_variances():
    # exact stationary moments: same means, different second moments
    for r in (2.0, 1.25):
        h = stationary_moments(markov_model(r=r, mode="hawkes"), 2)
        d = stationary_moments(markov_model(r=r, mode="delayed"), 2)
        assert h[((1,), (0,))] == pytest.approx(d[((1,), (0,))], abs=1e-10)
        assert h[((0,), (1,))] == pytest.approx(d[((0,), (1,))], abs=1e-10)
        assert h[((0,), (2,))] > d[((0,), (2,))] + 0.3
    h = stationary_moments(markov_model(r=1.25, mode="hawkes"), 2)
    d = stationary_moments(markov_model(r=1.25, mode="delayed"), 2)
    assert h[((0,), (2,))] - h[((0,), (1,))] ** 2 == pytest.approx(10.0, abs=1e-9)
    assert d[((0,), (2,))] - d[((0,), (1,))] ** 2 == pytest.approx(50 / 9, abs=1e-9)


# ---------------------------------------------------------------------------
# criterion 9: orderings

@pytest.fixture(scope="module")
def mode_ordering():
    m = markov_model(mode="hawkes")
    return dominance_check(m, m.replace(mode="delayed"), [1.0, 2.0, 5.0], 10_000, seed("criterion-9-modes"))


def _rows(res, quantity):
    return [r for r in res.statistics["checks"] if r["quantity"] == quantity]


def _describe(rows):
    return ", ".join(f"t={r['t']:g}: {r['max_excess']:.4f}/{r['band']:.4f}" for r in rows)


@pytest.mark.parametrize("quantity", ["N", "Lam"])
def test_criterion_09_hawkes_dominates_delayed(mode_ordering, quantity):
    rows = _rows(mode_ordering, quantity)
    ok = all(r["passed"] for r in rows)
    record(f"CRITERION 9 hawkes >=st delayed for {quantity} (excess/band) {_describe(rows)} ... {verdict(ok)}")
    assert ok


@pytest.mark.xfail(strict=True, reason="hawkes does not dominate delayed for Q: P(Q=0) is larger under hawkes at t=5")
def test_criterion_09_hawkes_dominates_delayed_Q(mode_ordering):
    rows = _rows(mode_ordering, "Q")
    ok = all(r["passed"] for r in rows)
    record(f"CRITERION 9 hawkes >=st delayed for Q (excess/band) {_describe(rows)} ... {verdict(ok)}"
           + ("" if ok else " [DEVIATION: exact P(Q(5)=0) is 0.2290 hawkes vs 0.1977 delayed]"))
    assert ok


def test_criterion_09_companion_exact_Q_violation():
    h = fixed_point_transform(markov_model(mode="hawkes"), 5.0, 0.0, 0.0)
    d = fixed_point_transform(markov_model(mode="delayed"), 5.0, 0.0, 0.0)
    assert h == pytest.approx(0.2290, abs=5e-4) and d == pytest.approx(0.1977, abs=5e-4)
    assert h > d  # F_hawkes(0) > F_delayed(0) contradicts Q_hawkes >=st Q_delayed


def _monotone_pair(name):
    base = markov_model(mode="delayed")
    if name == "i":
        return base.replace(lambda0=(2.0,)), base
    if name == "ii":
        return base, markov_model(b=0.5)
    if name == "iii":
        return base, base.replace(kernels=((Kernel.exponential(2.0, 0.5),),))
    fast = NetworkModel.univariate(1.0, Kernel.exponential(2.0), service=ServiceDistribution.exponential(2.0))
    slow = NetworkModel.univariate(1.0, Kernel.exponential(2.0), service=ServiceDistribution.exponential(0.5))
    return fast, slow


_MONO = {}


def _mono(name):
    if name not in _MONO:
        a, b = _monotone_pair(name)
        _MONO[name] = dominance_check(a, b, [1.0, 2.0, 5.0], 10_000, seed(f"criterion-9-{name}"))
    return _MONO[name]


@pytest.mark.parametrize("cond,quantity", [(c, q) for c in ("i", "ii", "iii") for q in ("N", "Q", "Lam")]
                         + [("iv", "N"), ("iv", "Lam")])
def test_criterion_09_parameter_monotonicity(cond, quantity):
    rows = _rows(_mono(cond), quantity)
    ok = all(r["passed"] for r in rows)
    record(f"CRITERION 9 monotonicity ({cond}) for {quantity} (excess/band) {_describe(rows)} ... {verdict(ok)}")
    assert ok


@pytest.mark.xfail(strict=True, reason="shorter services mean fewer particles in the system")
def test_criterion_09_parameter_monotonicity_iv_Q():
    rows = _rows(_mono("iv"), "Q")
    ok = all(r["passed"] for r in rows)
    record(f"CRITERION 9 monotonicity (iv) for Q (excess/band) {_describe(rows)} ... {verdict(ok)}"
           + ("" if ok else " [DEVIATION: with a zero kernel Q is M/M/inf and shorter services shrink it]"))
    assert ok


# ---------------------------------------------------------------------------
# criterion 10: heavy traffic

def _ladder_line(res):
    rows = res.statistics["ladder"]
    ks = ", ".join(f"{r['ks_distance']:.4f}" for r in rows)
    last = rows[-1]
    return (f"KS [{ks}], at rho=0.95 E={last['mean']:.4f}+-{last['se_mean']:.4f} (gamma {last['limit_mean']:.4f}), "
            f"E2={last['second_moment']:.4f}+-{last['se_second_moment']:.4f} (gamma {last['limit_second_moment']:.4f})")


@pytest.fixture(scope="module")
def delayed_ladder():
    return heavy_traffic_run([0.8, 0.9, 0.95], 10_000, seed("criterion-10-delayed"), mode="delayed")


@pytest.mark.xfail(strict=True, reason="the delayed stationary intensity is not the hawkes one; its limit variance is halved")
def test_criterion_10_heavy_traffic_delayed(delayed_ladder):
    res = delayed_ladder
    record(f"CRITERION 10 heavy traffic (delayed): {_ladder_line(res)} ... {verdict(res.passed)}"
           + ("" if res.passed else " [DEVIATION: exact limit Var (b2/2r) mu/(mu+r), not b2/2r]"))
    assert res.passed


def test_criterion_10_companion_delayed_matches_exact_moments(delayed_ladder):
    row = delayed_ladder.statistics["ladder"][-1]
    sm = stationary_moments(markov_model(r=row["r"], mode="delayed"), 2)
    e1 = (1 - 0.95) * sm[((0,), (1,))]
    e2 = (1 - 0.95) ** 2 * sm[((0,), (2,))]
    ok = abs(row["mean"] - e1) <= SE * row["se_mean"] and abs(row["second_moment"] - e2) <= SE * row["se_second_moment"]
    record(f"CRITERION 10 companion: delayed simulation vs exact moment system at rho=0.95: "
           f"E {row['mean']:.4f} vs {e1:.4f}, E2 {row['second_moment']:.4f} vs {e2:.4f} ... {verdict(ok)}")
    assert ok


def test_criterion_10_companion_hawkes_mode():
    res = heavy_traffic_run([0.8, 0.9, 0.95], 10_000, seed("criterion-10-hawkes"), mode="hawkes")
    rows = res.statistics["ladder"]
    ok = rows[0]["ks_distance"] > rows[-1]["ks_distance"] and rows[-1]["moments_within_se"]
    record(f"CRITERION 10 companion (hawkes excitation): {_ladder_line(res)}; strictly decreasing "
           f"{res.statistics['ks_decreasing']} ... {verdict(ok)}")
    assert ok


# ---------------------------------------------------------------------------

def test_criterion_11_tail_propagation():
    m = NetworkModel.univariate(1.0, Kernel.exponential(1.0), MarkDistribution.pareto(1.5, 0.2),
                                ServiceDistribution.exponential(1.0), mode="delayed")
    f = seed("criterion-11")
    q = sample_state(m, [20.0], 100_000, f.child("sample"), want=("Q",)).Q[:, 0, 0]
    res = tail_index_estimate(q, 0.002, f.child("bootstrap"))
    st = res.statistics
    ok = st["ci_low"] <= 1.5 <= st["ci_high"]
    record(f"CRITERION 11 tail propagation (soft): Hill {st['estimate']:.3f} on top k={st['k']} of {st['n']}, "
           f"95% CI [{st['ci_low']:.3f}, {st['ci_high']:.3f}] width {st['ci_width']:.3f} ... {verdict(ok)}")
    assert ok


def test_criterion_12_volterra_cross_check():
    m = markov_model()
    v = mean_queue_from_R1(m, 10.0)
    eq = solve_moments_transient(m, 1, [10.0]).get((1,), (0,))[-1]
    ok = abs(v - eq) < 1e-3
    record(f"CRITERION 12 Volterra cross-check: lambda0 int R1 = {v:.6f}, moment engine E[Q(10)] = {eq:.6f}, "
           f"gap {abs(v - eq):.1e} < 1e-3 ... {verdict(ok)}")
    assert ok
