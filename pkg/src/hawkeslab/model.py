"""Domain types: kernels, marks, services, rate maps and the network model.

Everything here is immutable after construction so that models can be shared
freely between worker threads.
"""
from __future__ import annotations

import dataclasses
import enum
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import integrate, linalg, special, stats

from .errors import (
    DivergentIntegralError,
    InvalidKernelError,
    ModelValidationError,
    NonpositiveMarkError,
    ServiceRateMismatchError,
    UnreachableDepartureError,
)


# ---------------------------------------------------------------------------
# Kernels
# ---------------------------------------------------------------------------

KERNEL_SHAPES = ("exponential", "power_law", "piecewise_constant", "zero")


@dataclass(frozen=True)
class Kernel:
    """Deterministic excitation shape h(t), zero for t < 0.

    Use the constructors :meth:`exponential`, :meth:`power_law`,
    :meth:`piecewise_constant` and :meth:`zero` rather than the raw fields.

    * exponential: ``h(t) = scale * exp(-rate * t)``
    * power_law: ``h(t) = scale * (1 + t / cutoff) ** (-exponent)``
    * piecewise_constant: ``values[k]`` on ``[breakpoints[k], breakpoints[k+1])``,
      zero after the last breakpoint; ``breakpoints[0]`` must be 0.
    """

    shape: str
    rate: float = 0.0
    scale: float = 0.0
    exponent: float = 0.0
    cutoff: float = 0.0
    breakpoints: tuple = ()
    values: tuple = ()

    def __post_init__(self):
        if self.shape not in KERNEL_SHAPES:
            raise InvalidKernelError(f"unknown kernel shape {self.shape!r}")
        if self.shape == "exponential":
            if not (self.rate > 0 and math.isfinite(self.rate)):
                raise InvalidKernelError("exponential kernel needs rate > 0")
            if not (self.scale >= 0 and math.isfinite(self.scale)):
                raise InvalidKernelError("exponential kernel needs scale >= 0")
        elif self.shape == "power_law":
            if not (self.exponent > 0 and self.cutoff > 0 and self.scale >= 0):
                raise InvalidKernelError("power-law kernel needs exponent > 0, cutoff > 0, scale >= 0")
        elif self.shape == "piecewise_constant":
            bp = np.asarray(self.breakpoints, dtype=float)
            vals = np.asarray(self.values, dtype=float)
            if bp.ndim != 1 or len(bp) < 2 or len(vals) != len(bp) - 1:
                raise InvalidKernelError("piecewise-constant kernel needs len(values) == len(breakpoints) - 1 >= 1")
            if bp[0] != 0.0 or np.any(np.diff(bp) <= 0) or not np.all(np.isfinite(bp)):
                raise InvalidKernelError("breakpoints must start at 0 and increase strictly")
            if np.any(vals < 0) or not np.all(np.isfinite(vals)):
                raise InvalidKernelError("piecewise-constant values must be finite and >= 0")
            object.__setattr__(self, "breakpoints", tuple(float(x) for x in bp))
            object.__setattr__(self, "values", tuple(float(x) for x in vals))

    # constructors -----------------------------------------------------
    @classmethod
    def exponential(cls, rate: float, scale: float = 1.0) -> "Kernel":
        return cls("exponential", rate=float(rate), scale=float(scale))

    @classmethod
    def power_law(cls, exponent: float, scale: float, cutoff: float) -> "Kernel":
        return cls("power_law", exponent=float(exponent), scale=float(scale), cutoff=float(cutoff))

    @classmethod
    def piecewise_constant(cls, breakpoints: Sequence[float], values: Sequence[float]) -> "Kernel":
        return cls("piecewise_constant", breakpoints=tuple(breakpoints), values=tuple(values))

    @classmethod
    def zero(cls) -> "Kernel":
        return cls("zero")

    # evaluation -------------------------------------------------------
    @property
    def is_zero(self) -> bool:
        if self.shape == "zero":
            return True
        if self.shape == "piecewise_constant":
            return not any(self.values)
        return self.scale == 0.0

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        pos = t >= 0
        tt = np.where(pos, t, 0.0)
        if self.shape == "exponential":
            out = self.scale * np.exp(-self.rate * tt)
        elif self.shape == "power_law":
            out = self.scale * (1.0 + tt / self.cutoff) ** (-self.exponent)
        elif self.shape == "piecewise_constant":
            bp = np.asarray(self.breakpoints)
            vals = np.append(np.asarray(self.values), 0.0)
            out = vals[np.searchsorted(bp, tt, side="right") - 1]
        else:
            out = np.zeros_like(tt)
        return np.where(pos, out, 0.0)

    def integral(self, t):
        """Cumulative mass ``int_0^t h``; zero for t <= 0."""
        t = np.maximum(np.asarray(t, dtype=float), 0.0)
        if self.shape == "exponential":
            return self.scale * (-np.expm1(-self.rate * t)) / self.rate
        if self.shape == "power_law":
            p, c = self.exponent, self.cutoff
            if p == 1.0:
                return self.scale * c * np.log1p(t / c)
            return self.scale * c / (p - 1.0) * (1.0 - (1.0 + t / c) ** (1.0 - p))
        if self.shape == "piecewise_constant":
            bp = np.asarray(self.breakpoints)
            vals = np.asarray(self.values)
            cum = np.concatenate(([0.0], np.cumsum(vals * np.diff(bp))))
            k = np.clip(np.searchsorted(bp, t, side="right") - 1, 0, len(vals))
            vext = np.append(vals, 0.0)
            slope = vext[k]
            return cum[k] + np.where(slope > 0, slope * (t - bp[k]), 0.0)
        return np.zeros_like(t)

    def inverse_integral(self, y):
        """Smallest t with ``integral(t) == y``; requires ``0 <= y < l1``."""
        y = np.asarray(y, dtype=float)
        if self.shape == "exponential":
            return -np.log1p(-y * self.rate / self.scale) / self.rate
        if self.shape == "power_law":
            p, c = self.exponent, self.cutoff
            if p == 1.0:
                return c * np.expm1(y / (self.scale * c))
            m = self.scale * c / (p - 1.0)
            return c * ((1.0 - y / m) ** (1.0 / (1.0 - p)) - 1.0)
        if self.shape == "piecewise_constant":
            bp = np.asarray(self.breakpoints)
            vals = np.asarray(self.values)
            cum = np.concatenate(([0.0], np.cumsum(vals * np.diff(bp))))
            # first segment whose cumulative end exceeds y
            k = np.clip(np.searchsorted(cum, y, side="right") - 1, 0, len(vals) - 1)
            with np.errstate(divide="ignore", invalid="ignore"):
                off = np.where(vals[k] > 0, (y - cum[k]) / vals[k], 0.0)
            return bp[k] + off
        raise InvalidKernelError("zero kernel has no mass to invert")

    @property
    def l1(self) -> float:
        return kernel_l1(self)

    @property
    def sup(self) -> float:
        if self.shape == "piecewise_constant":
            return max(self.values)
        if self.shape == "zero":
            return 0.0
        return self.scale

    @property
    def is_nonincreasing(self) -> bool:
        if self.shape == "piecewise_constant":
            return all(a >= b for a, b in zip(self.values, self.values[1:]))
        return True

    def support_end(self) -> float:
        """Time after which h vanishes identically (``inf`` for unbounded support)."""
        if self.shape == "piecewise_constant":
            nz = [k for k, v in enumerate(self.values) if v > 0]
            return self.breakpoints[nz[-1] + 1] if nz else 0.0
        if self.is_zero:
            return 0.0
        return math.inf

    def t_moment(self, p: float) -> float:
        """``int_0^inf t**p h(t) dt`` (may be ``inf``)."""
        if self.is_zero:
            return 0.0
        if self.shape == "exponential":
            return self.scale * math.gamma(p + 1.0) / self.rate ** (p + 1.0)
        if self.shape == "piecewise_constant":
            bp = np.asarray(self.breakpoints)
            return float(np.sum(np.asarray(self.values) * (bp[1:] ** (p + 1) - bp[:-1] ** (p + 1)) / (p + 1)))
        if self.exponent - p <= 1.0:
            return math.inf
        val, _ = integrate.quad(lambda t: t ** p * float(self(t)), 0, np.inf, limit=200)
        return val


def kernel_l1(kernel: Kernel) -> float:
    """L1 norm of a kernel.

    Closed forms are used for every supported shape.  A power law with
    exponent ``p <= 1`` is not integrable.
    """
    if kernel.shape == "exponential":
        return kernel.scale / kernel.rate
    if kernel.shape == "power_law":
        if kernel.exponent <= 1.0:
            raise DivergentIntegralError(f"power-law kernel with exponent {kernel.exponent} <= 1 is not integrable")
        return kernel.scale * kernel.cutoff / (kernel.exponent - 1.0)
    if kernel.shape == "piecewise_constant":
        return float(np.dot(kernel.values, np.diff(kernel.breakpoints)))
    return 0.0


# ---------------------------------------------------------------------------
# Marks
# ---------------------------------------------------------------------------

MARK_KINDS = ("deterministic", "exponential", "gamma", "beta", "pareto")


def _upper_gamma(a: float, x):
    """Upper incomplete gamma Gamma(a, x) for any real a and x > 0."""
    x = np.asarray(x, dtype=float)
    if a > 0:
        return special.gammaincc(a, x) * special.gamma(a)
    if a == 0:
        return special.exp1(x)
    # Gamma(a, x) = (Gamma(a + 1, x) - x**a e**-x) / a
    return (_upper_gamma(a + 1.0, x) - x ** a * np.exp(-x)) / a


@dataclass(frozen=True)
class MarkDistribution:
    """Law of a positive excitation mark B."""

    kind: str
    value: float = 0.0
    rate: float = 0.0
    shape: float = 0.0
    a: float = 0.0
    b: float = 0.0
    alpha: float = 0.0
    scale: float = 0.0

    def __post_init__(self):
        k = self.kind
        if k not in MARK_KINDS:
            raise ModelValidationError(f"unknown mark kind {k!r}")
        if k == "deterministic" and not self.value > 0:
            raise NonpositiveMarkError(f"deterministic mark must be > 0, got {self.value}")
        if k == "exponential" and not self.rate > 0:
            raise ModelValidationError("exponential mark needs rate > 0")
        if k == "gamma" and not (self.shape > 0 and self.rate > 0):
            raise ModelValidationError("gamma mark needs shape > 0 and rate > 0")
        if k == "beta" and not (self.a > 0 and self.b > 0):
            raise ModelValidationError("beta mark needs a > 0 and b > 0")
        if k == "pareto" and not (self.alpha > 1 and self.scale > 0):
            raise ModelValidationError("pareto mark needs tail index > 1 and scale > 0")

    @classmethod
    def deterministic(cls, value: float = 1.0):
        return cls("deterministic", value=float(value))

    @classmethod
    def exponential(cls, rate: float):
        return cls("exponential", rate=float(rate))

    @classmethod
    def gamma(cls, shape: float, rate: float):
        return cls("gamma", shape=float(shape), rate=float(rate))

    @classmethod
    def beta(cls, a: float, b: float):
        return cls("beta", a=float(a), b=float(b))

    @classmethod
    def pareto(cls, alpha: float, scale: float):
        return cls("pareto", alpha=float(alpha), scale=float(scale))

    def moment(self, k: int) -> float:
        """Raw moment E[B**k] (``inf`` when it does not exist)."""
        if k == 0:
            return 1.0
        if self.kind == "deterministic":
            return self.value ** k
        if self.kind == "exponential":
            return math.factorial(k) / self.rate ** k
        if self.kind == "gamma":
            return math.exp(special.gammaln(self.shape + k) - special.gammaln(self.shape)) / self.rate ** k
        if self.kind == "beta":
            return float(np.prod([(self.a + i) / (self.a + self.b + i) for i in range(k)]))
        if k >= self.alpha:
            return math.inf
        return self.alpha * self.scale ** k / (self.alpha - k)

    @property
    def b1(self) -> float:
        return self.moment(1)

    @property
    def b2(self) -> float:
        return self.moment(2)

    def laplace(self, s):
        """E[exp(-s B)] for s >= 0."""
        s = np.asarray(s, dtype=float)
        if self.kind == "deterministic":
            return np.exp(-s * self.value)
        if self.kind == "exponential":
            return self.rate / (self.rate + s)
        if self.kind == "gamma":
            return (self.rate / (self.rate + s)) ** self.shape
        if self.kind == "beta":
            return special.hyp1f1(self.a, self.a + self.b, -s)
        x = s * self.scale
        out = np.ones_like(x)
        pos = x > 0
        xp = x[pos]
        out[pos] = self.alpha * xp ** self.alpha * _upper_gamma(-self.alpha, xp)
        return out

    def sample(self, rng: np.random.Generator, size) -> np.ndarray:
        if self.kind == "deterministic":
            return np.full(size, self.value)
        if self.kind == "exponential":
            return rng.exponential(1.0 / self.rate, size)
        if self.kind == "gamma":
            return rng.gamma(self.shape, 1.0 / self.rate, size)
        if self.kind == "beta":
            return rng.beta(self.a, self.b, size)
        # inverse transform keeps the support bounded below by ``scale``
        return self.scale * (1.0 - rng.random(size)) ** (-1.0 / self.alpha)


# ---------------------------------------------------------------------------
# Services
# ---------------------------------------------------------------------------

SERVICE_KINDS = ("exponential", "deterministic", "lognormal")


@dataclass(frozen=True)
class ServiceDistribution:
    """Law of a service requirement J >= 0."""

    kind: str
    rate: float = 0.0
    value: float = 0.0
    log_mean: float = 0.0
    log_sd: float = 0.0

    def __post_init__(self):
        if self.kind not in SERVICE_KINDS:
            raise ModelValidationError(f"unknown service kind {self.kind!r}")
        if self.kind == "exponential" and not (self.rate > 0 and math.isfinite(self.rate)):
            raise ModelValidationError("exponential service needs rate > 0")
        if self.kind == "deterministic" and not (self.value >= 0 and math.isfinite(self.value)):
            raise ModelValidationError("deterministic service needs value >= 0")
        if self.kind == "lognormal" and not self.log_sd > 0:
            raise ModelValidationError("lognormal service needs log_sd > 0")

    @classmethod
    def exponential(cls, rate: float):
        return cls("exponential", rate=float(rate))

    @classmethod
    def deterministic(cls, value: float):
        return cls("deterministic", value=float(value))

    @classmethod
    def lognormal(cls, log_mean: float, log_sd: float):
        return cls("lognormal", log_mean=float(log_mean), log_sd=float(log_sd))

    @property
    def mean(self) -> float:
        if self.kind == "exponential":
            return 1.0 / self.rate
        if self.kind == "deterministic":
            return self.value
        return math.exp(self.log_mean + 0.5 * self.log_sd ** 2)

    @property
    def is_continuous(self) -> bool:
        return self.kind != "deterministic"

    def scaled(self, factor: float) -> "ServiceDistribution":
        """Law of ``factor * J``."""
        if self.kind == "exponential":
            return ServiceDistribution.exponential(self.rate / factor)
        if self.kind == "deterministic":
            return ServiceDistribution.deterministic(self.value * factor)
        return ServiceDistribution.lognormal(self.log_mean + math.log(factor), self.log_sd)

    def survival(self, t):
        """P(J > t)."""
        t = np.asarray(t, dtype=float)
        if self.kind == "exponential":
            return np.where(t < 0, 1.0, np.exp(-self.rate * np.maximum(t, 0.0)))
        if self.kind == "deterministic":
            return (t < self.value).astype(float)
        return stats.lognorm.sf(t, self.log_sd, scale=math.exp(self.log_mean))

    def cdf(self, t):
        return 1.0 - self.survival(t)

    def pdf(self, t):
        t = np.asarray(t, dtype=float)
        if self.kind == "exponential":
            return np.where(t < 0, 0.0, self.rate * np.exp(-self.rate * np.maximum(t, 0.0)))
        if self.kind == "lognormal":
            return stats.lognorm.pdf(t, self.log_sd, scale=math.exp(self.log_mean))
        raise ValueError("deterministic service has no density")

    def quantile(self, p):
        p = np.asarray(p, dtype=float)
        if self.kind == "exponential":
            return -np.log1p(-p) / self.rate
        if self.kind == "deterministic":
            return np.full_like(p, self.value)
        return stats.lognorm.ppf(p, self.log_sd, scale=math.exp(self.log_mean))

    def sample(self, rng: np.random.Generator, size) -> np.ndarray:
        if self.kind == "exponential":
            return rng.exponential(1.0 / self.rate, size)
        if self.kind == "deterministic":
            return np.full(size, self.value)
        return np.exp(self.log_mean + self.log_sd * rng.standard_normal(size))


# ---------------------------------------------------------------------------
# Modes, rate maps, network
# ---------------------------------------------------------------------------

class ExcitationMode(str, enum.Enum):
    """Where a particle's excitation is anchored.

    hawkes: ``B h(t)`` from arrival; delayed: ``B h(t - J)`` after departure;
    ephemeral: ``B h(t)`` from arrival while the particle is present.
    """

    HAWKES = "hawkes"
    DELAYED = "delayed"
    EPHEMERAL = "ephemeral"


RATE_MAP_KINDS = ("linear", "clamp", "capped_excitation", "constant")


@dataclass(frozen=True)
class RateMap:
    """Nondecreasing Lipschitz map from accumulated excitation x to an intensity.

    With baseline ``b``: linear ``b + x``; clamp ``min(b + x, cap)``;
    capped_excitation ``b + min(x, cap)``; constant ``b``.
    """

    kind: str = "linear"
    cap: float = math.inf

    def __post_init__(self):
        if self.kind not in RATE_MAP_KINDS:
            raise ModelValidationError(f"unknown rate map {self.kind!r}")
        if self.kind in ("clamp", "capped_excitation") and not self.cap >= 0:
            raise ModelValidationError("rate-map cap must be >= 0")

    @property
    def lipschitz(self) -> float:
        return 0.0 if self.kind == "constant" else 1.0

    @property
    def is_linear(self) -> bool:
        return self.kind == "linear"

    def apply(self, baseline, x):
        if self.kind == "linear":
            return baseline + x
        if self.kind == "clamp":
            return np.minimum(baseline + x, self.cap)
        if self.kind == "capped_excitation":
            return baseline + np.minimum(x, self.cap)
        return baseline + 0.0 * np.asarray(x)


def _square(rows, d, name):
    rows = tuple(tuple(r) for r in rows)
    if len(rows) != d or any(len(r) != d for r in rows):
        raise ModelValidationError(f"{name} must be a {d}x{d} matrix")
    return rows


@dataclass(frozen=True)
class NetworkModel:
    """Network of infinite-server queues with sojourn-dependent excitation.

    ``kernels[i][j]`` and ``marks[i][j]`` describe the excitation that a
    particle of coordinate j (its arrival coordinate for hawkes/ephemeral mode,
    its exit coordinate for delayed mode) induces on coordinate i.
    ``mu_route[i][j]`` is the per-particle rate of rerouting from j to i.
    """

    d: int
    lambda0: tuple
    kernels: tuple
    marks: tuple
    services: tuple
    mu: tuple
    mu_route: tuple
    mode: ExcitationMode = ExcitationMode.DELAYED
    rate_maps: Optional[tuple] = None
    service_semantics: Optional[str] = None

    def __post_init__(self):
        d = int(self.d)
        if d < 1:
            raise ModelValidationError("d must be a positive integer")
        object.__setattr__(self, "d", d)
        lam = tuple(float(x) for x in self.lambda0)
        if len(lam) != d or any(not (x >= 0 and math.isfinite(x)) for x in lam):
            raise ModelValidationError("lambda0 must hold d nonnegative finite reals")
        object.__setattr__(self, "lambda0", lam)
        object.__setattr__(self, "kernels", _square(self.kernels, d, "kernels"))
        object.__setattr__(self, "marks", _square(self.marks, d, "marks"))
        svc = tuple(self.services)
        if len(svc) != d:
            raise ModelValidationError("services must hold d entries")
        object.__setattr__(self, "services", svc)
        mu = tuple(float(x) for x in self.mu)
        if len(mu) != d or any(not x >= 0 for x in mu):
            raise ModelValidationError("mu must hold d nonnegative rates")
        object.__setattr__(self, "mu", mu)
        route = tuple(tuple(float(x) for x in r) for r in _square(self.mu_route, d, "mu_route"))
        if any(x < 0 for r in route for x in r):
            raise ModelValidationError("mu_route must be nonnegative")
        route = tuple(tuple(0.0 if i == j else route[i][j] for j in range(d)) for i in range(d))
        object.__setattr__(self, "mu_route", route)
        object.__setattr__(self, "mode", ExcitationMode(self.mode))
        if self.rate_maps is not None:
            rm = tuple(self.rate_maps)
            if len(rm) != d:
                raise ModelValidationError("phi must hold d rate maps")
            object.__setattr__(self, "rate_maps", rm)
        if self.service_semantics not in (None, "rate", "scheduled"):
            raise ModelValidationError("service_semantics must be 'rate' or 'scheduled'")
        for row in self.kernels:
            for k in row:
                if not isinstance(k, Kernel):
                    raise InvalidKernelError("kernels must be Kernel instances")
        for row in self.marks:
            for m in row:
                if not isinstance(m, MarkDistribution):
                    raise ModelValidationError("marks must be MarkDistribution instances")

    # convenience ------------------------------------------------------
    @classmethod
    def univariate(cls, lambda0: float, kernel: Kernel, mark: MarkDistribution = None,
                   service: ServiceDistribution = None, mode="delayed", mu: float = None,
                   rate_map: RateMap = None) -> "NetworkModel":
        """Single-coordinate model; ``mu`` defaults to the exponential service rate."""
        mark = mark or MarkDistribution.deterministic(1.0)
        service = service or ServiceDistribution.exponential(1.0)
        if mu is None:
            if service.kind == "exponential":
                mu = service.rate
            else:
                mu = 1.0 / service.mean if service.mean > 0 else 1.0
        return cls(1, (lambda0,), ((kernel,),), ((mark,),), (service,), (mu,), ((0.0,),),
                   mode, None if rate_map is None else (rate_map,))

    def replace(self, **changes) -> "NetworkModel":
        return dataclasses.replace(self, **changes)

    @property
    def is_linear(self) -> bool:
        return self.rate_maps is None or all(r.is_linear for r in self.rate_maps)

    @property
    def has_routing(self) -> bool:
        return any(x > 0 for r in self.mu_route for x in r)

    @property
    def total_rates(self) -> np.ndarray:
        """Per-visit total leaving rate ``mu_j + sum_i mu_route[i][j]``."""
        return np.asarray(self.mu) + np.asarray(self.mu_route).sum(axis=0)

    @property
    def semantics(self) -> str:
        if self.service_semantics is not None:
            return self.service_semantics
        return "rate" if all(s.kind == "exponential" for s in self.services) else "scheduled"

    def lipschitz(self) -> np.ndarray:
        if self.rate_maps is None:
            return np.ones(self.d)
        return np.array([r.lipschitz for r in self.rate_maps])

    def exit_probabilities(self) -> np.ndarray:
        """``P[j, k]`` = probability that a particle entering j finally departs from k."""
        d = self.d
        tot = self.total_rates
        R = np.zeros((d, d))
        D = np.zeros((d, d))
        for j in range(d):
            if tot[j] > 0:
                D[j, j] = self.mu[j] / tot[j]
                for i in range(d):
                    R[j, i] = self.mu_route[i][j] / tot[j]
        return np.linalg.solve(np.eye(d) - R, D)

    def sojourn_survival(self, j: int, t):
        """P(total sojourn of a particle entering j exceeds t)."""
        t = np.asarray(t, dtype=float)
        if not self.has_routing:
            return self.services[j].survival(t)
        # routed coordinates have exponential visits: phase-type sojourn
        tot = self.total_rates
        S = np.diag(-tot) + np.asarray(self.mu_route)
        e = np.zeros(self.d)
        e[j] = 1.0
        flat = np.atleast_1d(t).ravel()
        out = np.array([np.sum(linalg.expm(S * max(x, 0.0)) @ e) for x in flat])
        return out.reshape(np.shape(t))

    def branching_matrix(self) -> np.ndarray:
        """Expected number of children in coordinate i per particle entering j.

        Entries are ``L_i * E[B_ij] * m_ij`` with ``m_ij = ||h_ij||_1`` for
        hawkes/delayed excitation and ``m_ij = E[int_0^J h_ij]`` for ephemeral
        excitation.  In delayed mode with routing the excitation is emitted from
        the exit coordinate, so the matrix is composed with exit probabilities.
        """
        d = self.d
        L = self.lipschitz()
        H = np.zeros((d, d))
        for i in range(d):
            for j in range(d):
                k = self.kernels[i][j]
                if k.is_zero:
                    continue
                if self.mode == ExcitationMode.EPHEMERAL:
                    end = k.support_end()
                    f = lambda u, k=k, j=j: float(k(u)) * float(self.sojourn_survival(j, u))
                    pts = list(k.breakpoints[1:-1]) if k.shape == "piecewise_constant" else None
                    if self.services[j].kind == "deterministic" and not self.has_routing:
                        end = min(end, self.services[j].value)
                        pts = [p for p in (pts or []) if p < end] or None
                    if math.isinf(end):
                        mass, _ = integrate.quad(f, 0, np.inf, limit=200)
                    else:
                        mass, _ = integrate.quad(f, 0, end, points=pts, limit=200)
                else:
                    mass = kernel_l1(k)
                H[i, j] = L[i] * self.marks[i][j].b1 * mass
        if self.mode == ExcitationMode.DELAYED and self.has_routing:
            H = H @ self.exit_probabilities().T
        return H


def spectral_radius(H: np.ndarray, tol: float = 1e-12, max_iter: int = 10_000) -> float:
    """Perron root of a nonnegative matrix by shifted power iteration.

    Iterating with ``H + I`` keeps the iterates nonnegative and avoids
    oscillation for periodic matrices.  For irreducible matrices the
    Collatz-Wielandt bounds ``min (Ax)_i / x_i <= rho <= max (Ax)_i / x_i``
    close and give the stopping rule.  For reducible matrices they need not
    close, and the growth factor ``max(Ax) / max(x)`` is used once it settles.
    """
    H = np.asarray(H, dtype=float)
    n = H.shape[0]
    if not np.any(H):
        return 0.0
    A = H + np.eye(n)
    x = np.ones(n)
    growth = np.inf
    for _ in range(max_iter):
        y = A @ x
        ratios = y / x
        lo, hi = ratios.min(), ratios.max()
        if hi - lo <= tol * max(1.0, hi):
            return float(0.5 * (lo + hi) - 1.0)
        prev, growth = growth, y.max()
        x = y / growth
        if abs(growth - prev) <= tol * growth:
            break
        # components decaying below underflow would break the ratio bounds
        x = np.maximum(x, 1e-300)
    return float(growth - 1.0)


def stability_check(model: NetworkModel) -> tuple[float, bool]:
    """Spectral radius of the branching matrix and whether it is below one."""
    validate_network(model)
    radius = spectral_radius(model.branching_matrix())
    return radius, radius < 1.0


def validate_network(model: NetworkModel) -> None:
    """Raise if some coordinate cannot reach an exit, or a component is invalid.

    Exponential services on a coordinate must have rate equal to the total
    leaving rate ``mu_j + sum_i mu_route[i][j]`` so that every engine sees the
    same sojourn law.
    """
    d = model.d
    for row in model.kernels:
        for k in row:
            kernel_l1(k)
            if not math.isfinite(k.sup):
                raise InvalidKernelError("kernel sup-norm must be finite")
    for row in model.marks:
        for m in row:
            if not (m.b1 > 0 and math.isfinite(m.b1)):
                raise NonpositiveMarkError("mark mean must be positive and finite")
    # coordinates that can reach an exit: reverse search from mu_j > 0
    good = {j for j in range(d) if model.mu[j] > 0}
    changed = True
    while changed:
        changed = False
        for j in range(d):
            if j in good:
                continue
            if any(model.mu_route[i][j] > 0 and i in good for i in range(d)):
                good.add(j)
                changed = True
    for j in range(d):
        if j not in good:
            raise UnreachableDepartureError(j)
    tot = model.total_rates
    for j, svc in enumerate(model.services):
        if svc.kind == "exponential" and abs(svc.rate - tot[j]) > 1e-9 * max(1.0, tot[j]):
            raise ServiceRateMismatchError(
                f"coordinate {j}: exponential service rate {svc.rate} differs from "
                f"total leaving rate {tot[j]}"
            )
        if svc.kind != "exponential" and model.has_routing:
            raise ModelValidationError(
                f"coordinate {j}: networks with rerouting require exponential services")
    if model.semantics == "rate" and any(s.kind != "exponential" for s in model.services):
        raise ModelValidationError("service_semantics 'rate' requires exponential services")
