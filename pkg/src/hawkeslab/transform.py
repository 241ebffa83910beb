"""Joint Z/Laplace transforms via the cluster fixed point, and Volterra solvers.

For a cluster rooted at age 0 in coordinate j, let ``T_j(u)`` be the joint
transform ``E[prod_i z_i**S^Q_i(u) exp(-s_i S^Lam_i(u))]`` of its population
and intensity contribution at age u.  These functions are the unique fixed
point of an operator ``phi`` built from the realized excitation of the root
and the transforms of its children, and

    E[z**Q(t) exp(-s.Lam(t))] = prod_j exp(-lambda_j0 (t + s_j - int_0^t T_j)).

All integrals are discretized on a uniform grid with the trapezoidal rule;
expectations over a continuous service law use Gauss-Legendre nodes placed
uniformly in probability (the quantile transform), which concentrates nodes
where the service density has mass.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import integrate, special

from .errors import GridMismatchError, ModelValidationError, NoConvergenceError, UnstableModelError
from .model import ExcitationMode, Kernel, NetworkModel, ServiceDistribution, spectral_radius

DEFAULT_STEPS = 2048
GL_NODES = 32


@dataclass
class TransformGrid:
    """Values of the cluster transforms on a uniform grid ``0 = u_0 < ... < u_K = t``."""

    grid: np.ndarray
    values: np.ndarray  # shape (K + 1, d)
    z: tuple
    s: tuple

    @property
    def step(self) -> float:
        return float(self.grid[1] - self.grid[0]) if len(self.grid) > 1 else 0.0

    @classmethod
    def constant(cls, t: float, d: int, z, s, steps: int = DEFAULT_STEPS, value: float = 1.0):
        grid = np.linspace(0.0, t, steps + 1)
        return cls(grid, np.full((steps + 1, d), float(value)), tuple(z), tuple(s))


def trapz_conv(f: np.ndarray, g: np.ndarray, step: float) -> np.ndarray:
    """Trapezoidal approximation of ``int_0^{u_k} f(v) g(u_k - v) dv`` for every grid k."""
    n = len(f)
    full = np.convolve(f, g)[:n]
    return step * (full - 0.5 * (f[0] * g + f * g[0]))


def _gl(n=GL_NODES):
    x, w = np.polynomial.legendre.leggauss(n)
    return 0.5 * (x + 1.0), 0.5 * w


class _Plan:
    """Quantities of ``phi`` that do not depend on the current iterate."""

    def __init__(self, model: NetworkModel, grid: np.ndarray):
        d = model.d
        self.model = model
        self.grid = grid
        self.K = len(grid) - 1
        self.step = float(grid[1] - grid[0])
        self.h = [[model.kernels[i][j](grid) for j in range(d)] for i in range(d)]
        self.surv = np.column_stack([s.survival(grid) for s in model.services])
        self.cdf = 1.0 - self.surv
        # service expectation nodes: lag positions u_k - w_l and weights
        x, w = _gl()
        self.nodes = []
        for j, svc in enumerate(model.services):
            if svc.kind == "deterministic":
                c = svc.value
                lag = grid - c
                valid = lag >= -1e-12 * max(1.0, c)
                self.nodes.append(("atom", np.maximum(lag, 0.0), valid))
            else:
                mass = self.cdf[:, j]
                p = mass[:, None] * x[None, :]
                wts = mass[:, None] * w[None, :]
                ws = svc.quantile(p)
                ws = np.minimum(ws, grid[:, None])
                self.nodes.append(("gl", ws, wts))

    def expect_over_service(self, j: int, func_of_lag):
        """``int_[0,u_k] f(u_k - w) dF_j(w)`` for each k, with f given on the grid."""
        kind, a, b = self.nodes[j]
        if kind == "atom":
            vals = np.interp(a, self.grid, func_of_lag)
            return np.where(b, vals, 0.0)
        lag = self.grid[:, None] - a
        vals = np.interp(lag.ravel(), self.grid, func_of_lag).reshape(lag.shape)
        return np.sum(vals * b, axis=1)


def _check_model(model: NetworkModel):
    if not model.is_linear:
        raise ModelValidationError("transforms are implemented for linear intensities")
    if model.has_routing:
        raise ModelValidationError("the cluster transform engine does not cover rerouting")


def _phi(plan: _Plan, J: np.ndarray, z, s) -> np.ndarray:
    model = plan.model
    d = model.d
    step = plan.step
    mode = model.mode
    one_minus = 1.0 - J
    out = np.empty_like(J)
    for j in range(d):
        if mode == ExcitationMode.EPHEMERAL:
            out[:, j] = _phi_ephemeral(plan, one_minus, z, s, j)
            continue
        # G_j(a): transform of the offspring of a root whose excitation started a ago
        G = np.ones(plan.K + 1)
        for m in range(d):
            k = model.kernels[m][j]
            if k.is_zero:
                continue
            h = plan.h[m][j]
            arg = s[m] * h + trapz_conv(h, one_minus[:, m], step)
            G *= model.marks[m][j].laplace(np.maximum(arg, 0.0))
        if mode == ExcitationMode.HAWKES:
            out[:, j] = (z[j] * plan.surv[:, j] + plan.cdf[:, j]) * G
        else:
            out[:, j] = z[j] * plan.surv[:, j] + plan.expect_over_service(j, G)
    return np.clip(out, 0.0, 1.0)


def _phi_ephemeral(plan: _Plan, one_minus: np.ndarray, z, s, j: int) -> np.ndarray:
    model = plan.model
    d = model.d
    step = plan.step
    grid = plan.grid
    K = plan.K
    # root still present at age u: excitation h on [0, u]
    G = np.ones(K + 1)
    targets = [m for m in range(d) if not model.kernels[m][j].is_zero]
    for m in targets:
        h = plan.h[m][j]
        arg = s[m] * h + trapz_conv(h, one_minus[:, m], step)
        G *= model.marks[m][j].laplace(np.maximum(arg, 0.0))
    present = z[j] * plan.surv[:, j] * G
    # root gone at age u (J <= u): excitation h restricted to [0, J)
    kind, a, b = plan.nodes[j]
    gone = np.zeros(K + 1)
    for k in range(K + 1):
        if kind == "atom":
            if not b[k]:
                continue
            w_pts = np.array([grid[k] - a[k]])
            wts = np.array([1.0])
        else:
            w_pts = a[k]
            wts = b[k]
            if not np.any(wts):
                continue
        prod = np.ones(len(w_pts))
        for m in targets:
            f = plan.h[m][j][: k + 1] * one_minus[k::-1, m]
            cum = np.concatenate(([0.0], np.cumsum(0.5 * (f[1:] + f[:-1]) * step)))
            C = np.interp(w_pts, grid[: k + 1], cum)
            prod *= model.marks[m][j].laplace(np.maximum(C, 0.0))
        gone[k] = np.dot(wts, prod)
    return present + gone


def phi_operator(J: TransformGrid, model: NetworkModel, z, s) -> TransformGrid:
    """One application of the cluster fixed-point operator on a grid."""
    _check_model(model)
    z = tuple(float(x) for x in np.broadcast_to(z, (model.d,)))
    s = tuple(float(x) for x in np.broadcast_to(s, (model.d,)))
    grid = np.asarray(J.grid, dtype=float)
    if J.values.shape != (len(grid), model.d):
        raise GridMismatchError("grid values do not match the model dimension")
    if len(grid) < 2 or not np.allclose(np.diff(grid), grid[1] - grid[0], rtol=1e-9, atol=0):
        raise GridMismatchError("transform grid must be uniform with at least two points")
    if (J.z, J.s) != (z, s) and (len(J.z), len(J.s)) != (0, 0):
        raise GridMismatchError("grid was computed for different transform arguments")
    plan = _Plan(model, grid)
    return TransformGrid(grid, _phi(plan, J.values, z, s), z, s)


@dataclass
class FixedPointResult:
    value: float
    iterations: int
    residual: float
    transforms: TransformGrid
    history: list = field(default_factory=list)


def solve_fixed_point(model: NetworkModel, t: float, z, s, tol: float = 1e-10, max_iter: int = 200,
                      steps: int = DEFAULT_STEPS, keep_history: bool = False) -> FixedPointResult:
    """Iterate ``phi`` from the constant 1 until the sup-grid change drops below ``tol``."""
    _check_model(model)
    radius = spectral_radius(model.branching_matrix())
    if radius >= 1.0:
        raise UnstableModelError(f"branching radius {radius:.4g} >= 1")
    d = model.d
    z = tuple(float(x) for x in np.broadcast_to(z, (d,)))
    s = tuple(float(x) for x in np.broadcast_to(s, (d,)))
    lam0 = np.asarray(model.lambda0)
    if t <= 0:
        grid = TransformGrid(np.zeros(1), np.asarray(z, dtype=float)[None, :], z, s)
        return FixedPointResult(float(np.exp(-np.dot(lam0, s))), 0, 0.0, grid)
    grid = np.linspace(0.0, t, steps + 1)
    plan = _Plan(model, grid)
    J = np.ones((steps + 1, d))
    history = [J.copy()] if keep_history else []
    residual = math.inf
    it = 0
    while it < max_iter:
        it += 1
        new = _phi(plan, J, z, s)
        residual = float(np.max(np.abs(new - J)))
        J = new
        if keep_history:
            history.append(J.copy())
        if residual < tol:
            break
    if residual >= tol:
        raise NoConvergenceError(f"fixed point not reached after {max_iter} iterations (change {residual:.3g})")
    integral = integrate.trapezoid(J, grid, axis=0)
    value = float(np.exp(-np.sum(lam0 * (t + np.asarray(s) - integral))))
    return FixedPointResult(value, it, residual, TransformGrid(grid, J, z, s), history)


def fixed_point_transform(model: NetworkModel, t: float, z, s, tol: float = 1e-10, max_iter: int = 200,
                          steps: int = DEFAULT_STEPS) -> float:
    """``E[prod z_j**Q_j(t) exp(-s_j Lam_j(t))]`` from the cluster fixed point."""
    return solve_fixed_point(model, t, z, s, tol, max_iter, steps).value


# ---------------------------------------------------------------------------
# service-smeared kernels and Volterra equations
# ---------------------------------------------------------------------------

def hbar(kernel: Kernel, service: ServiceDistribution, t: float) -> float:
    """``int_[0,t] h(t - w) dF(w)``: the kernel seen from the arrival of a delayed particle."""
    if t < 0:
        return 0.0
    if service.kind == "deterministic":
        return float(kernel(t - service.value)) if t >= service.value else 0.0
    if t == 0 or kernel.is_zero:
        return 0.0
    pts = None
    if kernel.shape == "piecewise_constant":
        pts = [t - b for b in kernel.breakpoints[1:] if 0 < t - b < t] or None
    val, _ = integrate.quad(lambda w: float(kernel(t - w)) * float(service.pdf(w)), 0.0, t,
                            points=pts, limit=200, epsabs=1e-13, epsrel=1e-11)
    return val


def hbar_grid(kernel: Kernel, service: ServiceDistribution, grid) -> np.ndarray:
    return np.array([hbar(kernel, service, float(u)) for u in np.asarray(grid, dtype=float)])


def _univariate(model: NetworkModel):
    if model.d != 1:
        raise ModelValidationError("Volterra solvers are univariate")
    return model.kernels[0][0], model.marks[0][0], model.services[0]


def effective_kernel(model: NetworkModel, grid) -> np.ndarray:
    """Mean offspring density per unit mark at each age of a univariate root.

    hawkes: h; delayed: the service-smeared kernel; ephemeral: h times the
    survival of the service.
    """
    kernel, _, service = _univariate(model)
    grid = np.asarray(grid, dtype=float)
    if model.mode == ExcitationMode.HAWKES:
        return kernel(grid)
    if model.mode == ExcitationMode.EPHEMERAL:
        return kernel(grid) * service.survival(grid)
    if service.kind == "exponential" and kernel.shape == "exponential":
        # closed form of the smeared exponential kernel
        r, mu, b = kernel.rate, service.rate, kernel.scale
        if abs(r - mu) < 1e-12:
            return b * mu * grid * np.exp(-mu * grid)
        return b * mu * (np.exp(-mu * grid) - np.exp(-r * grid)) / (r - mu)
    return hbar_grid(kernel, service, grid)


def volterra_step(kern: np.ndarray, forcing: np.ndarray, coef: float, step: float) -> np.ndarray:
    """Solve ``R = forcing + coef * (R * kern)`` by trapezoidal forward stepping."""
    n = len(forcing)
    R = np.empty(n)
    R[0] = forcing[0]
    denom = 1.0 - 0.5 * coef * step * kern[0]
    for k in range(1, n):
        # int_0^{u_k} R(u_k - v) kern(v) dv with the v = 0 term still unknown
        inner = np.dot(kern[1:k], R[k - 1:0:-1]) + 0.5 * kern[k] * R[0]
        R[k] = (forcing[k] + coef * step * inner) / denom
    return R


def volterra_solve_R1(model: NetworkModel, grid) -> np.ndarray:
    """Mean cluster population at each age: ``R1 = survival + b1 (R1 * k_eff)``."""
    kernel, mark, service = _univariate(model)
    rho = mark.b1 * kernel.l1
    if rho >= 1.0:
        raise UnstableModelError(f"b1 * ||h||_1 = {rho:.4g} >= 1")
    grid = np.asarray(grid, dtype=float)
    step = float(grid[1] - grid[0])
    return volterra_step(effective_kernel(model, grid), service.survival(grid), mark.b1, step)


def ralpha_forcing(model: NetworkModel, R1: np.ndarray, alpha: float, grid) -> np.ndarray:
    """``int_[0,u] ((h * R1)(u - w))**alpha dF(w)`` on the grid."""
    kernel, _, service = _univariate(model)
    grid = np.asarray(grid, dtype=float)
    step = float(grid[1] - grid[0])
    G = np.maximum(trapz_conv(kernel(grid), R1, step), 0.0) ** alpha
    plan = _Plan(model, grid)
    return plan.expect_over_service(0, G)


def volterra_solve_Ralpha(model: NetworkModel, R1, alpha: float, C: float, grid) -> np.ndarray:
    """Second-order term of ``1 - E[z**S(u)]`` for regularly varying marks.

    Solves ``R = b1 (R * hbar) + C Gamma(1 - alpha) F`` with ``F`` from
    :func:`ralpha_forcing`.  Delayed mode only.
    """
    kernel, mark, _ = _univariate(model)
    if model.mode != ExcitationMode.DELAYED:
        raise ModelValidationError("the second-order Volterra equation is stated for delayed excitation")
    if not 1.0 < alpha < 2.0:
        raise ValueError("alpha must lie in (1, 2)")
    rho = mark.b1 * kernel.l1
    if rho >= 1.0:
        raise UnstableModelError(f"b1 * ||h||_1 = {rho:.4g} >= 1")
    grid = np.asarray(grid, dtype=float)
    step = float(grid[1] - grid[0])
    if C == 0:
        return np.zeros(len(grid))
    forcing = C * special.gamma(1.0 - alpha) * ralpha_forcing(model, np.asarray(R1), alpha, grid)
    return volterra_step(effective_kernel(model, grid), forcing, mark.b1, step)


def mean_queue_from_R1(model: NetworkModel, t: float, steps: int = DEFAULT_STEPS) -> float:
    """``lambda0 * int_0^t R1``: the mean number in system at time t."""
    grid = np.linspace(0.0, t, steps + 1)
    R1 = volterra_solve_R1(model, grid)
    return float(model.lambda0[0] * integrate.trapezoid(R1, grid))
