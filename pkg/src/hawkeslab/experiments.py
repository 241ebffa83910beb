"""Monte Carlo experiments for scaling limits, orderings and tails.

Each experiment returns an :class:`ExperimentResult` carrying its statistics,
its full configuration (including the model and seed) and the thresholds used
for the verdict.  Thresholds live in ``data/acceptance.json``.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from importlib import resources
from typing import Optional

import numpy as np
from scipy import stats

from .cluster import sample_cluster_sizes, sample_state
from .cluster_stats import cluster_size_pmf
from .errors import AssumptionViolatedError, InsufficientSamplesError, ModelValidationError
from .model import ExcitationMode, Kernel, MarkDistribution, NetworkModel, ServiceDistribution
from .rng import as_factory
from .thinning import sample_markov_state


def load_thresholds() -> dict:
    """Statistical pass thresholds shared by all experiments."""
    text = resources.files("hawkeslab").joinpath("data/acceptance.json").read_text()
    return json.loads(text)


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return _jsonable(x.tolist())
    if isinstance(x, (np.bool_, bool)):
        return bool(x)
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, (np.floating, float)):
        x = float(x)
        return x if math.isfinite(x) else str(x)
    if isinstance(x, NetworkModel):
        from .io import model_to_dict
        return model_to_dict(x)
    return x


@dataclass
class ExperimentResult:
    name: str
    passed: Optional[bool]
    statistics: dict
    config: dict
    thresholds: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return _jsonable({"experiment": self.name, "passed": self.passed, "statistics": self.statistics,
                          "config": self.config, "thresholds": self.thresholds})


def _seed_of(rng):
    f = as_factory(rng)
    return {"seed": f.seed, "stream": [str(k) for k in f.prefix]}


# ---------------------------------------------------------------------------
# scaling limits
# ---------------------------------------------------------------------------

def _fclt_constants(model: NetworkModel, alpha: float):
    if model.d != 1:
        raise AssumptionViolatedError("FCLT experiments are univariate")
    mark = model.marks[0][0]
    if mark.kind != "deterministic":
        raise AssumptionViolatedError("FCLT centering assumes deterministic marks")
    kernel = model.kernels[0][0]
    norm = mark.value * kernel.l1 if not kernel.is_zero else 0.0
    if not norm < 1.0:
        raise AssumptionViolatedError(f"A1 fails: kernel mass {norm:.4g} >= 1")
    if not 0.0 <= alpha <= 0.5:
        raise AssumptionViolatedError("alpha must lie in [0, 1/2]")
    if not kernel.is_zero and not math.isfinite(kernel.t_moment(1.0 / (2.0 * (1.0 - alpha)))):
        raise AssumptionViolatedError("A2 fails: kernel moment of order 1/(2(1-alpha)) diverges")
    mean_J = model.services[0].mean
    if alpha == 0.5 and not math.isfinite(mean_J):
        raise AssumptionViolatedError("A3 fails: E[J] is infinite")
    lam0 = model.lambda0[0]
    mu = lam0 / (1.0 - norm)
    var = lam0 / (1.0 - norm) ** 3
    offset = -lam0 * mean_J * norm / (1.0 - norm) ** 2 if alpha == 0.5 else 0.0
    return norm, mu, var, offset


def stretch_services(model: NetworkModel, factor: float) -> NetworkModel:
    """Multiply every sojourn by ``factor`` (exponential rates are divided)."""
    services = tuple(s.scaled(factor) for s in model.services)
    return model.replace(services=services, mu=tuple(m / factor for m in model.mu),
                         mu_route=tuple(tuple(x / factor for x in row) for row in model.mu_route))


def fclt_run(model: NetworkModel, T: float, alpha: float, reps: int, v_grid, rng, *,
             threads: Optional[int] = None, epsilon: Optional[float] = None) -> ExperimentResult:
    """Empirical law of ``(N(Tv) - mu T v) / sqrt(T)`` with sojourns stretched by ``T**alpha``.

    ``mu = lambda0 / (1 - |h|)``.  The limit has variance ``lambda0 v / (1 - |h|)**3``;
    for ``alpha = 1/2`` its mean is ``-lambda0 E[J] |h| / (1 - |h|)**2`` on ``[epsilon, 1]``.
    """
    th = load_thresholds()
    eps = th["fclt_epsilon"] if epsilon is None else epsilon
    norm, mu, var1, offset = _fclt_constants(model, alpha)
    v = np.asarray(v_grid, dtype=float)
    stretched = stretch_services(model, T ** alpha)
    sample = sample_state(stretched, T * v, reps, rng, threads=threads, want=("N",))
    Y = (sample.N[:, :, 0] - mu * T * v[None, :]) / math.sqrt(T)
    mean = Y.mean(axis=0)
    var = Y.var(axis=0, ddof=1)
    se_mean = np.sqrt(var / reps)
    centred = (Y - mean) ** 2
    se_var = centred.std(axis=0, ddof=1) / math.sqrt(reps)
    target_var = var1 * v
    in_window = v >= eps if alpha == 0.5 else v > 0
    k = th["se_multiple"]
    mean_ok = np.abs(mean - offset) <= k * se_mean
    last = int(np.argmax(v)) if v.size else 0
    var_ok = abs(var[last] - target_var[last]) <= th["fclt_variance_rel_tol"] * target_var[last]
    # for alpha < 1/2 the limit mean is 0 but the finite-T bias is O(T**-0.5), so only
    # the variance enters the verdict
    passed = bool(var_ok and (alpha < 0.5 or np.all(mean_ok[in_window])))
    stats_ = {"v": v, "mean": mean, "variance": var, "se_mean": se_mean, "se_variance": se_var,
              "limit_mean": np.where(in_window, offset, np.nan), "limit_variance": target_var,
              "centering_rate": mu, "kernel_mass": norm, "mean_within_se": mean_ok,
              "variance_within_tolerance": var_ok}
    cfg = {"model": model, "T": T, "alpha": alpha, "reps": reps, "epsilon": eps, **_seed_of(rng)}
    return ExperimentResult("fclt", passed, stats_, cfg,
                            {"se_multiple": k, "fclt_variance_rel_tol": th["fclt_variance_rel_tol"]})


def flln_check(model: NetworkModel, T_ladder, reps: int, rng, *, v_points: int = 201,
               threads: Optional[int] = None) -> ExperimentResult:
    """``sup_v |N(Tv)/T - mu v|`` on a v-grid, median over replications, for each T.

    The supremum is taken over ``v_points`` equally spaced points of [0, 1].
    """
    norm, mu, _, _ = _fclt_constants(model, 0.0)
    v = np.linspace(0.0, 1.0, v_points)
    factory = as_factory(rng, "flln")
    medians = []
    for k, T in enumerate(T_ladder):
        if model.lambda0[0] == 0:
            medians.append(0.0)
            continue
        s = sample_state(model, T * v, reps, factory.child(k), threads=threads, want=("N",))
        dev = np.abs(s.N[:, :, 0] / T - mu * v[None, :]).max(axis=1)
        medians.append(float(np.median(dev)))
    medians = np.asarray(medians)
    decreasing = bool(np.all(np.diff(medians) < 0)) if len(medians) > 1 else True
    cfg = {"model": model, "T_ladder": list(T_ladder), "reps": reps, "v_points": v_points, **_seed_of(rng)}
    return ExperimentResult("flln", decreasing, {"T": list(T_ladder), "median_sup_deviation": medians,
                                                 "decreasing": decreasing, "centering_rate": mu}, cfg)


# ---------------------------------------------------------------------------
# orderings
# ---------------------------------------------------------------------------

def _ecdf(sorted_x: np.ndarray, pts: np.ndarray) -> np.ndarray:
    return np.searchsorted(sorted_x, pts, side="right") / len(sorted_x)


def ordering_band(a: np.ndarray, b: np.ndarray, rng: np.random.Generator, resamples: int = 200,
                  level: float = 0.99, max_points: int = 2000):
    """Largest excess ``max_x F_a(x) - F_b(x)`` and its bootstrap band.

    The band is the ``level`` quantile of the bootstrap distribution of
    ``max_x [(F*_a - F_a) - (F*_b - F_b)](x)``, i.e. of the excess produced
    by sampling noise alone when the two laws coincide.
    """
    a = np.sort(np.asarray(a, dtype=float))
    b = np.sort(np.asarray(b, dtype=float))
    pts = np.unique(np.concatenate([a, b]))
    if pts.size > max_points:
        pts = np.unique(np.quantile(pts, np.linspace(0, 1, max_points)))
    Fa, Fb = _ecdf(a, pts), _ecdf(b, pts)
    excess = float(np.max(Fa - Fb))
    boot = np.empty(resamples)
    for k in range(resamples):
        sa = np.sort(a[rng.integers(0, a.size, a.size)])
        sb = np.sort(b[rng.integers(0, b.size, b.size)])
        boot[k] = np.max((_ecdf(sa, pts) - Fa) - (_ecdf(sb, pts) - Fb))
    band = float(np.quantile(boot, level))
    return excess, band


def dominance_check(model_a: NetworkModel, model_b: NetworkModel, times, reps: int, rng, *,
                    quantities=("N", "Q", "Lam"), threads: Optional[int] = None,
                    resamples: Optional[int] = None, level: Optional[float] = None) -> ExperimentResult:
    """Test ``F_A <= F_B`` (A stochastically larger) for N, Q and the intensity at each time.

    A check passes when the largest excess ``F_A - F_B`` lies within the
    bootstrap band of sampling noise.
    """
    th = load_thresholds()
    resamples = th["bootstrap_resamples"] if resamples is None else resamples
    level = th["bootstrap_level"] if level is None else level
    factory = as_factory(rng, "dominance")
    times = np.asarray(times, dtype=float)
    sa = sample_state(model_a, times, reps, factory.child("A"), threads=threads)
    sb = sample_state(model_b, times, reps, factory.child("B"), threads=threads)
    boot = factory("bootstrap")
    rows = []
    for c, t in enumerate(times):
        for q in quantities:
            for i in range(model_a.d):
                xa = getattr(sa, q)[:, c, i]
                xb = getattr(sb, q)[:, c, i]
                excess, band = ordering_band(xa, xb, boot, resamples, level)
                rows.append({"t": float(t), "quantity": q, "coordinate": i, "max_excess": excess,
                             "band": band, "passed": excess <= band,
                             "mean_a": float(xa.mean()), "mean_b": float(xb.mean())})
    passed = all(r["passed"] for r in rows)
    cfg = {"model_a": model_a, "model_b": model_b, "times": times, "reps": reps,
           "quantities": list(quantities), **_seed_of(rng)}
    return ExperimentResult("dominance", passed, {"checks": rows}, cfg,
                            {"bootstrap_resamples": resamples, "bootstrap_level": level})


def _markov_rate(model: NetworkModel):
    kernel = model.kernels[0][0]
    if model.d != 1 or kernel.shape != "exponential":
        raise ModelValidationError("needs a univariate model with an exponential kernel")
    return kernel.rate, kernel.scale * model.marks[0][0].b1


def stationarity_equality_check(model: NetworkModel, t: float, reps: int, rng, *,
                                threads: Optional[int] = None) -> ExperimentResult:
    """Two-sample KS tests of Q(t) and the intensity at t, hawkes versus delayed excitation."""
    th = load_thresholds()
    r, b1 = _markov_rate(model)
    if b1 / r >= 1:
        raise AssumptionViolatedError("stationarity check needs b1 / r < 1")
    burn_in = th["burn_in_factor"] / (r - b1)
    factory = as_factory(rng, "stationarity")
    samples = {}
    for mode in (ExcitationMode.HAWKES, ExcitationMode.DELAYED):
        m = model.replace(mode=mode)
        s = sample_markov_state(m, [t], reps, factory.child(mode.value), threads=threads)
        samples[mode.value] = (s.Q[:, 0, 0], s.Lam[:, 0, 0])
    out = {"burn_in": burn_in, "past_burn_in": t >= burn_in}
    ok = True
    for k, name in enumerate(("Q", "Lam")):
        x, y = samples["hawkes"][k], samples["delayed"][k]
        p = float(stats.ks_2samp(x, y).pvalue)
        out[name] = {"ks_pvalue": p, "mean_hawkes": float(x.mean()), "mean_delayed": float(y.mean()),
                     "se_hawkes": float(x.std(ddof=1) / math.sqrt(reps)), "se_delayed": float(y.std(ddof=1) / math.sqrt(reps)),
                     "var_hawkes": float(x.var(ddof=1)), "var_delayed": float(y.var(ddof=1))}
        ok = ok and p > th["ks_p_min"]
    cfg = {"model": model, "t": t, "reps": reps, **_seed_of(rng)}
    return ExperimentResult("stationarity", ok, out, cfg, {"ks_p_min": th["ks_p_min"]})


def heavy_traffic_limit(lambda0: float, r: float, b2: float):
    """Shape and rate of the gamma law proposed for ``(1 - rho) Lambda``."""
    return 2.0 * r * lambda0 / b2, 2.0 * r / b2


def heavy_traffic_run(rhos, reps: int, rng, *, lambda0: float = 1.0, mark: MarkDistribution = None,
                      mu: float = 1.0, mode="delayed", burn_in_factor: Optional[float] = None,
                      threads: Optional[int] = None) -> ExperimentResult:
    """KS distance of ``(1 - rho) Lambda(t)`` to ``Gamma(2 r lambda0 / b2, rate 2 r / b2)``.

    For each load ``rho`` the kernel is ``exp(-r t)`` with ``r = b1 / rho`` and
    ``t = burn_in_factor / (r - b1)``.  Also reports the first two empirical
    moments against those of the gamma law.
    """
    th = load_thresholds()
    mark = mark or MarkDistribution.deterministic(1.0)
    factor = th["burn_in_factor"] if burn_in_factor is None else burn_in_factor
    b1, b2 = mark.b1, mark.b2
    factory = as_factory(rng, "heavy-traffic")
    k = th["se_multiple"]
    rows = []
    for idx, rho in enumerate(rhos):
        r = b1 / rho
        model = NetworkModel.univariate(lambda0, Kernel.exponential(r), mark,
                                        ServiceDistribution.exponential(mu), mode=mode)
        t = factor / (r - b1)
        s = sample_markov_state(model, [t], reps, factory.child(idx), threads=threads)
        X = (1.0 - rho) * s.Lam[:, 0, 0]
        shape, rate = heavy_traffic_limit(lambda0, r, b2)
        law = stats.gamma(shape, scale=1.0 / rate)
        m1, m2 = law.mean(), law.moment(2)
        e1, e2 = X.mean(), np.mean(X ** 2)
        se1 = X.std(ddof=1) / math.sqrt(reps)
        se2 = (X ** 2).std(ddof=1) / math.sqrt(reps)
        rows.append({"rho": rho, "r": r, "t": t, "ks_distance": float(stats.kstest(X, law.cdf).statistic),
                     "mean": e1, "se_mean": se1, "second_moment": e2, "se_second_moment": se2,
                     "limit_mean": m1, "limit_second_moment": m2,
                     "moments_within_se": bool(abs(e1 - m1) <= k * se1 and abs(e2 - m2) <= k * se2)})
    d = [row["ks_distance"] for row in rows]
    decreasing = bool(np.all(np.diff(d) < 0))
    passed = decreasing and rows[-1]["moments_within_se"]
    cfg = {"rhos": list(rhos), "reps": reps, "lambda0": lambda0, "mark": mark.kind, "b1": b1, "b2": b2,
           "mu": mu, "mode": str(ExcitationMode(mode).value), "burn_in_factor": factor, **_seed_of(rng)}
    return ExperimentResult("heavy-traffic", passed, {"ladder": rows, "ks_decreasing": decreasing}, cfg,
                            {"se_multiple": k})


# ---------------------------------------------------------------------------
# tails and cluster sizes
# ---------------------------------------------------------------------------

def hill_estimate(samples, k: int) -> float:
    """Hill estimator of the tail index from the ``k`` largest observations."""
    x = np.sort(np.asarray(samples, dtype=float))[::-1]
    if x[k] <= 0:
        raise ValueError("the (k+1)-th largest observation must be positive")
    return 1.0 / float(np.mean(np.log(x[:k])) - math.log(x[k]))


def tail_index_estimate(samples, k_fraction: float = 0.05, rng=0, *, resamples: int = 200,
                        level: Optional[float] = None) -> ExperimentResult:
    """Hill estimate over the top ``k_fraction`` of the sample with a percentile bootstrap CI.

    Only the upper order statistics enter, so zeros in the bulk are allowed.
    """
    th = load_thresholds()
    level = th["hill_ci_level"] if level is None else level
    x = np.asarray(samples, dtype=float)
    if x.size < th["hill_min_samples"]:
        raise InsufficientSamplesError(f"{x.size} samples < {th['hill_min_samples']}")
    if not 0.0 < k_fraction <= 0.2:
        raise ValueError("k_fraction must lie in (0, 0.2]")
    k = max(1, int(k_fraction * x.size))
    est = hill_estimate(x, k)
    g = as_factory(rng, "hill")(0)
    boot = np.array([hill_estimate(x[g.integers(0, x.size, x.size)], k) for _ in range(resamples)])
    lo, hi = np.quantile(boot, [(1 - level) / 2, (1 + level) / 2])
    stats_ = {"estimate": est, "ci_low": float(lo), "ci_high": float(hi), "ci_width": float(hi - lo), "k": k,
              "n": int(x.size)}
    cfg = {"k_fraction": k_fraction, "resamples": resamples, "level": level, **_seed_of(rng)}
    return ExperimentResult("tail", None, stats_, cfg, {"hill_ci_level": level})


def total_variation(counts: np.ndarray, pmf: np.ndarray) -> float:
    """TV distance between empirical frequencies and a pmf on ``1..len(pmf)`` (tail mass included)."""
    n = counts.sum()
    counts = np.pad(counts, (0, max(0, len(pmf) - len(counts))))
    emp = counts[: len(pmf)] / n
    tail_emp = counts[len(pmf):].sum() / n
    return 0.5 * (float(np.abs(emp - pmf).sum()) + abs(tail_emp - max(0.0, 1.0 - pmf.sum())))


def chi2_homogeneity(samples, min_expected: float = 5.0) -> float:
    """p-value of the chi-square homogeneity test across integer samples (sparse bins pooled)."""
    top = max(int(np.max(s)) for s in samples)
    table = np.array([np.bincount(np.asarray(s, dtype=np.int64), minlength=top + 1) for s in samples])
    table = table[:, table.sum(axis=0) > 0]
    # pool adjacent columns until every expected count is large enough
    total = table.sum()
    share = table.sum(axis=1, keepdims=True) / total
    cols = []
    acc = np.zeros(table.shape[0])
    for c in range(table.shape[1]):
        acc = acc + table[:, c]
        if (share[:, 0] * acc.sum()).min() >= min_expected:
            cols.append(acc)
            acc = np.zeros(table.shape[0])
    if acc.sum() > 0:
        if cols:
            cols[-1] = cols[-1] + acc
        else:
            cols.append(acc)
    pooled = np.array(cols).T
    if pooled.shape[1] < 2:
        return 1.0
    return float(stats.chi2_contingency(pooled)[1])


def cluster_size_agreement(models, n_clusters: int, rng, *, n_max: int = 200,
                           threads: Optional[int] = None) -> ExperimentResult:
    """Simulated cluster sizes of several univariate models against each other and the closed form.

    The closed form is taken from the first model, which must have a
    deterministic, exponential or gamma mark.
    """
    th = load_thresholds()
    factory = as_factory(rng, "cluster-agreement")
    first = models[0]
    rho = first.kernels[0][0].l1
    pmf = cluster_size_pmf(first.marks[0][0], rho, np.arange(1, n_max + 1))
    sizes = []
    tvs = []
    for k, m in enumerate(models):
        s = sample_cluster_sizes(m, 0, n_clusters, factory.child(k), threads=threads)
        sizes.append(s)
        tvs.append(total_variation(np.bincount(s)[1:], pmf))
    p = chi2_homogeneity(sizes)
    passed = bool(max(tvs) < th["tv_max"] and p > th["chi2_p_min"])
    cfg = {"models": list(models), "n_clusters": n_clusters, **_seed_of(rng)}
    return ExperimentResult("cluster-size", passed, {"tv": tvs, "chi2_pvalue": p,
                                                     "mean_size": [float(s.mean()) for s in sizes]},
                            cfg, {"tv_max": th["tv_max"], "chi2_p_min": th["chi2_p_min"]})
