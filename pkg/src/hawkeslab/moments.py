"""Moments and transforms of Markovian networks.

A network is Markovian when every kernel is ``h_ij(t) = b_ij exp(-r_i t)``
(decay rate depending on the target only) and services are exponential.
Then ``(Q, Lambda)`` is a Markov process and the mixed moments
``E[Qbar**q Lambda**g]`` (falling factorial in Q, raw in Lambda) of order
``|q| + |g| = n`` solve a linear ODE whose forcing involves only lower orders.
Kernel scales are folded into the marks, so ``B_ij`` below means
``b_ij * B_ij``.  Mark components are taken independent across targets.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import (
    MissingMarkMomentError,
    ModelValidationError,
    NonexponentialKernelError,
    RepeatedEigenvaluesError,
    StepUnderflowError,
    UnstableModelError,
)
from .model import ExcitationMode, NetworkModel, validate_network

DEFAULT_RK4_STEPS = 4096


# ---------------------------------------------------------------------------
# indices
# ---------------------------------------------------------------------------

def enumerate_indices(d: int, n: int) -> list:
    """All ``(q, g)`` pairs of d-vectors with ``|q| + |g| = n``, pure-Q first for d = 1."""
    out = []
    for parts in itertools.product(range(n + 1), repeat=2 * d):
        if sum(parts) == n:
            out.append((tuple(parts[:d]), tuple(parts[d:])))
    out.sort(key=lambda qg: (qg[1], qg[0]))
    return out


def index_key(q, g) -> str:
    return "(" + ",".join(map(str, q)) + "|" + ",".join(map(str, g)) + ")"


def parse_index_key(key: str):
    body = key.strip()[1:-1]
    left, right = body.split("|")
    return tuple(int(x) for x in left.split(",")), tuple(int(x) for x in right.split(","))


# ---------------------------------------------------------------------------
# Markovian parameters and generator terms
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MarkovParams:
    d: int
    lambda0: tuple
    r: tuple
    mu: tuple
    mu_route: tuple
    mode: ExcitationMode
    active: tuple  # active[k][j]: kernel k <- j nonzero
    mark_moments: tuple  # mark_moments[k][j][m] = E[(b_kj B_kj)**m]

    def joint_mark_moment(self, j: int, m) -> float:
        """``E[prod_k (b_kj B_kj)**m_k]`` for the marks emitted from coordinate j."""
        out = 1.0
        for k, mk in enumerate(m):
            if mk == 0:
                continue
            if not self.active[k][j]:
                return 0.0
            out *= self.mark_moments[k][j][mk]
        return out


def markov_params(model: NetworkModel, n: int) -> MarkovParams:
    """Extract rates and mark moments up to order ``n``; checks the Markov structure."""
    validate_network(model)
    if model.mode == ExcitationMode.EPHEMERAL:
        raise ModelValidationError("moment equations cover hawkes and delayed excitation")
    if not model.is_linear:
        raise ModelValidationError("moment equations need linear intensities")
    if any(s.kind != "exponential" for s in model.services):
        raise ModelValidationError("moment equations need exponential services")
    d = model.d
    r = []
    for i in range(d):
        rates = {k.rate for k in model.kernels[i] if not k.is_zero and k.shape == "exponential"}
        if any(not k.is_zero and k.shape != "exponential" for k in model.kernels[i]):
            raise NonexponentialKernelError(f"row {i} has a nonexponential kernel")
        if len(rates) > 1:
            raise NonexponentialKernelError(f"kernels into coordinate {i} must share one decay rate")
        r.append(rates.pop() if rates else 1.0)
    active = tuple(tuple(not model.kernels[k][j].is_zero for j in range(d)) for k in range(d))
    mm = []
    for k in range(d):
        row = []
        for j in range(d):
            kern = model.kernels[k][j]
            if kern.is_zero:
                row.append(tuple([1.0] + [0.0] * n))
                continue
            vals = [kern.scale ** m * model.marks[k][j].moment(m) for m in range(n + 1)]
            if not all(math.isfinite(v) for v in vals):
                raise MissingMarkMomentError(f"mark ({k},{j}) lacks a finite moment of order <= {n}")
            row.append(tuple(vals))
        mm.append(tuple(row))
    return MarkovParams(d, model.lambda0, tuple(r), model.mu, model.mu_route, model.mode, active, tuple(mm))


def _sub_multi(g):
    """All multi-indices l <= g with their multinomial weights prod C(g_k, l_k)."""
    for ell in itertools.product(*(range(x + 1) for x in g)):
        w = 1
        for a, b in zip(g, ell):
            w *= math.comb(a, b)
        yield ell, w


def generator_terms(q, g, P: MarkovParams) -> dict:
    """``d/dt E[Qbar^q Lam^g]`` as a linear combination ``{(q', g'): coef}``."""
    d = P.d
    q = tuple(q)
    g = tuple(g)
    out: dict = {}

    def add(qq, gg, c):
        if c == 0:
            return
        key = (tuple(qq), tuple(gg))
        out[key] = out.get(key, 0.0) + c

    def e(j):
        v = [0] * d
        v[j] = 1
        return v

    def plus(a, b, sign=1):
        return [x + sign * y for x, y in zip(a, b)]

    hawkes = P.mode == ExcitationMode.HAWKES
    for j in range(d):
        ej = e(j)
        # decay of the intensity towards its baseline
        if g[j] > 0:
            add(q, g, -g[j] * P.r[j])
            add(q, plus(g, ej, -1), g[j] * P.r[j] * P.lambda0[j])
        # departures from j at rate mu_j Q_j
        if P.mu[j] > 0:
            add(q, g, -q[j] * P.mu[j])
            if not hawkes:
                for ell, w in _sub_multi(g):
                    if ell == g:
                        continue
                    m = P.joint_mark_moment(j, [a - b for a, b in zip(g, ell)])
                    add(plus(q, ej), ell, P.mu[j] * w * m)
        # arrivals into j at rate Lambda_j
        if hawkes:
            for ell, w in _sub_multi(g):
                m = P.joint_mark_moment(j, [a - b for a, b in zip(g, ell)])
                if ell != g:
                    add(q, plus(list(ell), ej), w * m)
                if q[j] > 0:
                    add(plus(q, ej, -1), plus(list(ell), ej), q[j] * w * m)
        elif q[j] > 0:
            add(plus(q, ej, -1), plus(g, ej), q[j])
        # reroutes j -> i at rate mu_route[i][j] Q_j
        for i in range(d):
            rate = P.mu_route[i][j]
            if rate == 0 or i == j:
                continue
            add(q, g, -rate * q[j])
            if q[i] > 0:
                add(plus(plus(q, ej), e(i), -1), g, rate * q[i])
    return out


# ---------------------------------------------------------------------------
# assembled systems
# ---------------------------------------------------------------------------

def assemble_moment_system(model: NetworkModel, n: int):
    """Matrix ``A_n`` and forcing map for the order-n moment ODE ``X' = A_n X + C_n``.

    The forcing map takes a dict ``{(q, g): value}`` of lower-order moments
    (order 0 is the constant 1) and returns the vector ``C_n``.
    """
    P = markov_params(model, n)
    idx = enumerate_indices(P.d, n)
    pos = {k: a for a, k in enumerate(idx)}
    A = np.zeros((len(idx), len(idx)))
    lower_terms = []
    for a, (q, g) in enumerate(idx):
        lows = []
        for (qq, gg), c in generator_terms(q, g, P).items():
            if sum(qq) + sum(gg) == n:
                A[a, pos[(qq, gg)]] += c
            else:
                lows.append(((qq, gg), c))
        lower_terms.append(lows)
    zero = (tuple([0] * P.d), tuple([0] * P.d))

    def forcing(lower: dict) -> np.ndarray:
        out = np.zeros(len(idx))
        for a, lows in enumerate(lower_terms):
            for key, c in lows:
                out[a] += c * (1.0 if key == zero else lower[key])
        return out

    return A, forcing


def _stacked_system(model: NetworkModel, n_max: int):
    """Block lower-triangular generator over all orders ``0..n_max``."""
    P = markov_params(model, n_max)
    idx = [k for n in range(n_max + 1) for k in enumerate_indices(P.d, n)]
    pos = {k: a for a, k in enumerate(idx)}
    M = np.zeros((len(idx), len(idx)))
    for a, (q, g) in enumerate(idx):
        if sum(q) + sum(g) == 0:
            continue
        for key, c in generator_terms(q, g, P).items():
            M[a, pos[key]] += c
    x0 = np.array([0.0 if sum(q) else float(np.prod([l ** k for l, k in zip(P.lambda0, g)]))
                   for q, g in idx])
    return idx, M, x0


@dataclass
class MomentTable:
    """Mixed moments over time: ``values[:, a]`` is the series of index ``indices[a]``.

    Falling factorial in Q unless ``raw`` is set.
    """

    times: np.ndarray
    indices: list
    values: np.ndarray
    raw: bool = False

    def __post_init__(self):
        self._pos = {k: a for a, k in enumerate(self.indices)}

    def get(self, q, g) -> np.ndarray:
        return self.values[:, self._pos[(tuple(q), tuple(g))]]

    def order(self, n: int) -> dict:
        return {k: self.values[:, a] for a, k in enumerate(self.indices) if sum(k[0]) + sum(k[1]) == n}

    @property
    def n_max(self) -> int:
        return max(sum(q) + sum(g) for q, g in self.indices)

    def to_dict(self) -> dict:
        return {
            "times": self.times.tolist(),
            "kind": "raw" if self.raw else "falling_factorial",
            "moments": {index_key(q, g): self.values[:, a].tolist() for a, (q, g) in enumerate(self.indices)},
        }


def _rk4_propagator(M: np.ndarray, h: float) -> np.ndarray:
    hM = h * M
    I = np.eye(len(M))
    P = I.copy()
    term = I.copy()
    for k in range(1, 5):
        term = term @ hM / k
        P = P + term
    return P


def solve_moments_transient(model: NetworkModel, n_max: int, t_grid, steps: int = DEFAULT_RK4_STEPS) -> MomentTable:
    """All moments up to order ``n_max`` at the times in ``t_grid``.

    Orders are stacked into one block lower-triangular linear system, so
    every lower-order forcing is integrated with the same classical RK4 step
    (``max(t_grid) / steps``) instead of being interpolated.
    """
    t_grid = np.asarray(t_grid, dtype=float)
    if np.any(t_grid < 0) or np.any(np.diff(t_grid) < 0):
        raise ValueError("t_grid must be nonnegative and sorted")
    idx, M, x0 = _stacked_system(model, n_max)
    t_end = float(t_grid.max()) if t_grid.size else 0.0
    h = t_end / steps if t_end > 0 else 0.0
    if h > 0:
        spec = np.abs(np.linalg.eigvals(M)).max()
        if h * spec > 2.5:
            raise StepUnderflowError("RK4 step too large for the stiffest mode", 2.5 / spec)
    out = np.zeros((len(t_grid), len(idx)))
    cache = {}
    x = x0.copy()
    t = 0.0
    for a, target in enumerate(t_grid):
        gap = target - t
        if gap > 0:
            n_sub = max(1, int(math.ceil(gap / h - 1e-9)))
            hh = gap / n_sub
            key = round(hh, 15)
            if key not in cache:
                cache[key] = _rk4_propagator(M, hh)
            Pm = cache[key]
            for _ in range(n_sub):
                x = Pm @ x
            t = target
        out[a] = x
    return MomentTable(t_grid, idx, out)


def stationary_moments(model: NetworkModel, n_max: int) -> dict:
    """Long-run moments ``{(q, g): value}`` from the stacked system (requires stability)."""
    idx, M, _ = _stacked_system(model, n_max)
    # order 0 row is the constant; solve M[1:, 1:] x + M[1:, 0] = 0
    x = np.linalg.solve(M[1:, 1:], -M[1:, 0])
    if np.max(np.linalg.eigvals(M[1:, 1:]).real) >= 0:
        raise UnstableModelError("moment system has no attracting equilibrium")
    out = {idx[0]: 1.0}
    out.update({k: float(v) for k, v in zip(idx[1:], x)})
    return out


# ---------------------------------------------------------------------------
# univariate closed forms
# ---------------------------------------------------------------------------

def univariate_moment_matrix(n: int, mu: float, r: float, b1: float) -> np.ndarray:
    """Order-n matrix for ``(E[Qbar^n], E[Qbar^(n-1) Lam], ..., E[Lam^n])``."""
    A = np.zeros((n + 1, n + 1))
    for k in range(n + 1):
        A[k, k] = -(k * r + (n - k) * mu)
        if k < n:
            A[k, k + 1] = n - k
        if k > 0:
            A[k, k - 1] = k * mu * b1
    return A


def univariate_eigenvalues(n: int, mu: float, r: float, b1: float) -> np.ndarray:
    """Eigenvalues of the order-n univariate moment matrix, decreasing in k."""
    root = math.sqrt((mu - r) ** 2 + 4.0 * mu * b1)
    k = np.arange(n + 1)
    return -(n / 2.0) * (mu + r) + ((n - 2 * k) / 2.0) * root


def _projectors(A: np.ndarray, eigenvalues) -> list:
    lam = np.asarray(eigenvalues, dtype=float)
    if len(lam) > 1:
        gaps = np.abs(lam[:, None] - lam[None, :])[~np.eye(len(lam), dtype=bool)]
        if gaps.min() < 1e-9:
            raise RepeatedEigenvaluesError(f"eigenvalue gap {gaps.min():.3g} < 1e-9")
    n = len(lam)
    I = np.eye(A.shape[0])
    out = []
    for k in range(n):
        P = I.copy()
        for j in range(n):
            if j != k:
                P = P @ (A - lam[j] * I) / (lam[k] - lam[j])
        out.append(P)
    return out


def lagrange_sylvester_exp(A: np.ndarray, eigenvalues, t: float) -> np.ndarray:
    """``exp(A t)`` by Lagrange-Sylvester interpolation on distinct eigenvalues."""
    lam = np.asarray(eigenvalues, dtype=float)
    Ps = _projectors(np.asarray(A, dtype=float), lam)
    return sum(math.exp(l * t) * P for l, P in zip(lam, Ps))


def adaptive_simpson(f, a: float, b: float, tol: float = 1e-9, max_depth: int = 40):
    """Vector-valued adaptive Simpson quadrature with a max-norm error test."""
    fa, fb = f(a), f(b)
    m = 0.5 * (a + b)
    fm = f(m)
    whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb)

    def rec(a, b, fa, fm, fb, whole, tol, depth):
        m = 0.5 * (a + b)
        lm, rm = 0.5 * (a + m), 0.5 * (m + b)
        flm, frm = f(lm), f(rm)
        left = (m - a) / 6.0 * (fa + 4.0 * flm + fm)
        right = (b - m) / 6.0 * (fm + 4.0 * frm + fb)
        err = np.max(np.abs(left + right - whole))
        if depth >= max_depth or err <= 15.0 * tol:
            return left + right + (left + right - whole) / 15.0
        return (rec(a, m, fa, flm, fm, left, tol / 2.0, depth + 1)
                + rec(m, b, fm, frm, fb, right, tol / 2.0, depth + 1))

    if b <= a:
        return np.zeros_like(np.asarray(fa, dtype=float))
    return rec(a, b, fa, fm, fb, whole, tol, 0)


def _univariate_markov(model: NetworkModel):
    if model.d != 1:
        raise ModelValidationError("univariate formula needs d = 1")
    if model.mode != ExcitationMode.DELAYED:
        raise ModelValidationError("univariate closed forms are stated for delayed excitation")
    k = model.kernels[0][0]
    if k.is_zero:
        return model.mu[0], 1.0, 0.0
    if k.shape != "exponential":
        raise NonexponentialKernelError("univariate closed forms need an exponential kernel")
    return model.mu[0], k.rate, k.scale * model.marks[0][0].b1


class UnivariateTransient:
    """Closed-form transient moments of a univariate Markovian delayed model.

    Order 1 uses the spectral projectors of the order-1 matrix exactly; order
    n >= 2 adds the convolution of ``exp(A (t - s))`` with the lower-order
    forcing, integrated by adaptive Simpson.
    """

    def __init__(self, model: NetworkModel, tol: float = 1e-9):
        self.model = model
        self.tol = tol
        self.mu, self.r, self.b1 = _univariate_markov(model)
        self.lam0 = model.lambda0[0]
        self._sys = {}
        self._memo = {}

    def system(self, n: int):
        if n not in self._sys:
            A, forcing = assemble_moment_system(self.model, n)
            eig = univariate_eigenvalues(n, self.mu, self.r, self.b1)
            Ps = _projectors(A, eig)
            z0 = np.zeros(n + 1)
            z0[-1] = self.lam0 ** n
            self._sys[n] = (A, forcing, eig, Ps, z0)
        return self._sys[n]

    def _lower(self, n: int, s: float) -> dict:
        lower = {}
        for m in range(1, n):
            vals = self.Z(m, s)
            for (q, g), v in zip(enumerate_indices(1, m), vals):
                lower[(q, g)] = v
        return lower

    def Z(self, n: int, t: float) -> np.ndarray:
        key = (n, float(t))
        if key in self._memo:
            return self._memo[key]
        A, forcing, eig, Ps, z0 = self.system(n)
        out = sum(math.exp(l * t) * (P @ z0) for l, P in zip(eig, Ps))
        if n == 1:
            C = forcing({})
            for l, P in zip(eig, Ps):
                psi = t if abs(l) < 1e-14 else math.expm1(l * t) / l
                out = out + psi * (P @ C)
        else:
            def integrand(s):
                C = forcing(self._lower(n, s))
                return sum(math.exp(l * (t - s)) * (P @ C) for l, P in zip(eig, Ps))
            out = out + adaptive_simpson(integrand, 0.0, float(t), self.tol)
        self._memo[key] = out
        return out


def transient_Z_univariate(model: NetworkModel, n: int, t: float, tol: float = 1e-9) -> np.ndarray:
    """``(E[Qbar^n], E[Qbar^(n-1) Lam], ..., E[Lam^n])`` at time t in closed form."""
    return UnivariateTransient(model, tol).Z(n, t)


def stationary_mean(model: NetworkModel):
    """Long-run ``(E[Q], E[Lambda])`` of a univariate Markovian delayed model."""
    mu, r, b1 = _univariate_markov(model)
    if b1 / r >= 1.0:
        raise UnstableModelError(f"b1 / r = {b1 / r:.4g} >= 1")
    lam0 = model.lambda0[0]
    return r * lam0 / (mu * (r - b1)), r * lam0 / (r - b1)


# ---------------------------------------------------------------------------
# characteristics
# ---------------------------------------------------------------------------

def _characteristic_rhs(P: MarkovParams, model: NetworkModel):
    d = P.d
    r = np.asarray(P.r)
    mu = np.asarray(P.mu)
    route = np.asarray(P.mu_route)
    pairs = [(k, j) for j in range(d) for k in range(d) if P.active[k][j]]
    scales = {(k, j): model.kernels[k][j].scale for k, j in pairs}

    def beta(s):
        out = np.ones(d)
        for k, j in pairs:
            out[j] *= float(model.marks[k][j].laplace(scales[(k, j)] * s[k]))
        return out

    def rhs(y):
        s, z = y[:d], y[d:2 * d]
        ds = -r * s - z + 1.0
        dz = mu * (beta(s) - z) + route.T @ z - route.sum(axis=0) * z
        return np.concatenate([ds, dz, s])

    return rhs


def characteristics_transform(model: NetworkModel, t: float, z, s, steps: int = DEFAULT_RK4_STEPS) -> float:
    """``E[prod z_j**Q_j(t) exp(-s_j Lam_j(t))]`` along the characteristic curves.

    Delayed mode: integrates ``s' = -r s - z + 1``,
    ``z_j' = mu_j (beta_j(s) - z_j) + sum_i mu_route[i][j] (z_i - z_j)`` with RK4.
    """
    if model.mode != ExcitationMode.DELAYED:
        raise ModelValidationError("the characteristic system is stated for delayed excitation")
    P = markov_params(model, 1)
    d = P.d
    z = np.broadcast_to(np.asarray(z, dtype=float), (d,))
    s = np.broadcast_to(np.asarray(s, dtype=float), (d,))
    lam0 = np.asarray(P.lambda0)
    if t <= 0:
        return float(np.exp(-np.dot(lam0, s)))
    rhs = _characteristic_rhs(P, model)
    y = np.concatenate([s, z, np.zeros(d)])
    h = t / steps
    for _ in range(steps):
        k1 = rhs(y)
        k2 = rhs(y + 0.5 * h * k1)
        k3 = rhs(y + 0.5 * h * k2)
        k4 = rhs(y + h * k3)
        y = y + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
    s_t, integral = y[:d], y[2 * d:]
    return float(np.exp(-np.sum(lam0 * (s_t + np.asarray(P.r) * integral))))


# ---------------------------------------------------------------------------
# conversions
# ---------------------------------------------------------------------------

@lru_cache(maxsize=None)
def stirling2(n: int, k: int) -> int:
    """Stirling number of the second kind."""
    if n == k:
        return 1
    if k == 0 or k > n:
        return 0
    return k * stirling2(n - 1, k) + stirling2(n - 1, k - 1)


def factorial_to_raw(table: MomentTable) -> MomentTable:
    """Convert falling-factorial Q powers to raw powers (intensity powers unchanged)."""
    if table.raw:
        return table
    out = np.zeros_like(table.values)
    pos = {k: a for a, k in enumerate(table.indices)}
    for a, (q, g) in enumerate(table.indices):
        for ks in itertools.product(*(range(x + 1) for x in q)):
            w = 1
            for qq, kk in zip(q, ks):
                w *= stirling2(qq, kk)
            if w:
                out[:, a] += w * table.values[:, pos[(tuple(ks), g)]]
    return MomentTable(table.times, list(table.indices), out, raw=True)
