"""Intensity-driven simulation of queueing networks with self-excitation.

The per-path engine (:func:`simulate_network`) runs competing exponential
clocks: arrivals are proposed at the intensity observed at the last event and
thinned, which is exact because realized kernels never increase between
events; departures and reroutes fire at rates proportional to queue lengths,
or at scheduled epochs when services are drawn at arrival.

:func:`sample_markov_state` advances many replications of a Markovian model
(exponential kernels and services) in lockstep and is the workhorse for large
Monte Carlo experiments.
"""
from __future__ import annotations

import heapq
import math
from typing import Optional

import numpy as np

from .cluster import StateSample, draw_marks
from .errors import KernelNotMonotoneError, ModelValidationError, NonexponentialKernelError
from .events import ARRIVAL, DEPARTURE, REROUTE, EventLog
from .model import ExcitationMode, NetworkModel, validate_network
from .rng import as_factory, map_blocks


# ---------------------------------------------------------------------------
# excitation state
# ---------------------------------------------------------------------------

class AnchorState:
    """Excitation anchors of a running path.

    Each anchor stores its epoch, source coordinate, mark vector and expiry
    (the owner's departure in ephemeral mode, ``inf`` otherwise).
    """

    def __init__(self, model: NetworkModel):
        self.model = model
        self.d = model.d
        self._t = []
        self._src = []
        self._marks = []
        self._expiry = []
        self._owner = []
        self._cache = None

    def add(self, t: float, source: int, marks: np.ndarray, owner: int = -1, expiry: float = math.inf):
        self._t.append(t)
        self._src.append(source)
        self._marks.append(np.asarray(marks, dtype=float))
        self._expiry.append(expiry)
        self._owner.append(owner)
        self._cache = None

    def expire(self, owner: int, t: float):
        for a, o in enumerate(self._owner):
            if o == owner and self._expiry[a] > t:
                self._expiry[a] = t
                self._cache = None

    def __len__(self):
        return len(self._t)

    def _arrays(self):
        if self._cache is None:
            self._cache = (np.asarray(self._t, dtype=float), np.asarray(self._src, dtype=np.int64),
                           np.asarray(self._marks, dtype=float).reshape(len(self._t), self.d),
                           np.asarray(self._expiry, dtype=float))
        return self._cache

    def excitation(self, t: float) -> np.ndarray:
        """Accumulated excitation ``x_i(t)`` for every target i."""
        x = np.zeros(self.d)
        if not self._t:
            return x
        times, src, marks, expiry = self._arrays()
        live = (times <= t) & (expiry > t)
        for j in range(self.d):
            s = live & (src == j)
            if not s.any():
                continue
            lag = t - times[s]
            for i in range(self.d):
                k = self.model.kernels[i][j]
                if not k.is_zero:
                    x[i] += float(np.dot(marks[s, i], k(lag)))
        return x

    def prune(self, t: float):
        """Drop anchors whose contribution vanished for good."""
        if not self._t:
            return
        times, src, marks, expiry = self._arrays()
        ends = np.array([max(self.model.kernels[i][j].support_end() for i in range(self.d))
                         for j in range(self.d)])
        dead = (expiry <= t) | (t - times >= ends[src])
        if dead.any():
            keep = np.flatnonzero(~dead)
            self._t = [self._t[a] for a in keep]
            self._src = [self._src[a] for a in keep]
            self._marks = [self._marks[a] for a in keep]
            self._expiry = [self._expiry[a] for a in keep]
            self._owner = [self._owner[a] for a in keep]
            self._cache = None


class ExponentialState:
    """Excitation for exponential kernels kept as decaying sums ``E[i, j]``."""

    def __init__(self, model: NetworkModel):
        d = model.d
        self.d = d
        self.rates = np.ones((d, d))
        self.scales = np.zeros((d, d))
        for i in range(d):
            for j in range(d):
                k = model.kernels[i][j]
                if not k.is_zero:
                    self.rates[i, j] = k.rate
                    self.scales[i, j] = k.scale
        self.E = np.zeros((d, d))
        self.t = 0.0

    def add(self, t: float, source: int, marks: np.ndarray, owner: int = -1, expiry: float = math.inf):
        self._advance(t)
        self.E[:, source] += self.scales[:, source] * marks

    def _advance(self, t: float):
        if t != self.t:
            self.E *= np.exp(-self.rates * (t - self.t))
            self.t = t

    def excitation(self, t: float) -> np.ndarray:
        self._advance(t)
        return self.E.sum(axis=1)

    def expire(self, owner, t):
        pass

    def prune(self, t):
        pass


def conditional_intensity(state, model: NetworkModel, t: float) -> np.ndarray:
    """Intensity vector at time ``t`` given the excitation anchors in ``state``."""
    x = state.excitation(t)
    lam0 = np.asarray(model.lambda0)
    if model.rate_maps is None:
        return lam0 + x
    return np.array([model.rate_maps[i].apply(lam0[i], x[i]) for i in range(model.d)], dtype=float)


def _fast_exponential(model: NetworkModel) -> bool:
    return model.mode != ExcitationMode.EPHEMERAL and all(
        k.is_zero or k.shape == "exponential" for row in model.kernels for k in row)


# ---------------------------------------------------------------------------
# per-path engine
# ---------------------------------------------------------------------------

def simulate_network(model: NetworkModel, horizon: float, rng, service_semantics: Optional[str] = None) -> EventLog:
    """Simulate one path on ``[0, horizon]`` by thinning with competing clocks.

    ``service_semantics`` overrides the model's choice: ``"rate"`` lets
    particles leave coordinate j at rate ``mu_j`` (and reroute at ``mu_route``),
    ``"scheduled"`` draws each visit length at entry and schedules its end.
    Only true departures install excitation in delayed mode.
    """
    validate_network(model)
    for row in model.kernels:
        for k in row:
            if not k.is_nonincreasing:
                raise KernelNotMonotoneError("thinning needs nonincreasing kernels")
    if isinstance(rng, np.random.Generator):
        g = rng
        seed = None
    else:
        factory = as_factory(rng, "thinning")
        g = factory(0)
        seed = factory.seed
    semantics = service_semantics or model.semantics
    if semantics == "rate" and any(s.kind != "exponential" for s in model.services):
        raise ModelValidationError("rate semantics requires exponential services")
    d = model.d
    mode = model.mode
    state = ExponentialState(model) if _fast_exponential(model) else AnchorState(model)
    tot = model.total_rates
    mu = np.asarray(model.mu)
    route = np.asarray(model.mu_route)
    # distribution of the outcome of a finished visit at j: reroute to i, or exit (index d)
    cum_out = np.cumsum(np.vstack([route, mu[None, :]]) / np.where(tot > 0, tot, 1.0)[None, :], axis=0)
    cum_out[-1] = 1.0

    members = [[] for _ in range(d)]  # particle ids present per coordinate (rate semantics)
    where = {}  # pid -> (coordinate, position in members)
    heap = []  # (visit end, pid) for scheduled semantics
    arrived = {}
    rec = {"time": [], "coord": [], "kind": [], "src": [], "mark": [], "service": [], "pid": []}
    nan_mark = np.full(d, np.nan)

    def record(t, c, kind, src, mark, service, pid):
        rec["time"].append(t)
        rec["coord"].append(c)
        rec["kind"].append(kind)
        rec["src"].append(src)
        rec["mark"].append(mark)
        rec["service"].append(service)
        rec["pid"].append(pid)

    def enter(pid, c, t):
        if semantics == "rate":
            where[pid] = (c, len(members[c]))
            members[c].append(pid)
        else:
            if model.has_routing:
                length = g.exponential() / tot[c]
            else:
                length = float(model.services[c].sample(g, 1)[0])
            heapq.heappush(heap, (t + length, pid, c))
            return length
        return math.nan

    def leave(pid):
        c, pos = where.pop(pid)
        last = members[c].pop()
        if last != pid:
            members[c][pos] = last
            where[last] = (c, pos)

    def finish_visit(pid, c, t):
        """Exit or reroute a particle whose visit at c just ended."""
        if model.has_routing:
            out = int((g.random() >= cum_out[:, c]).sum())
        else:
            out = d
        if out == d:
            marks = nan_mark
            if mode == ExcitationMode.DELAYED:
                marks = draw_marks(model, np.array([c]), g)[0]
                state.add(t, c, marks, owner=pid)
            elif mode == ExcitationMode.EPHEMERAL:
                state.expire(pid, t)
            record(t, c, DEPARTURE, c, marks, t - arrived[pid], pid)
        else:
            record(t, out, REROUTE, c, nan_mark, math.nan, pid)
            enter(pid, out, t)

    t = 0.0
    next_pid = 0
    n_events = 0
    lam0 = np.asarray(model.lambda0)
    while True:
        lam = conditional_intensity(state, model, t)
        if semantics == "rate":
            moves = tot * np.array([len(m) for m in members], dtype=float)
        else:
            moves = np.zeros(d)
        lam_sum = float(lam.sum())
        M = lam_sum + float(moves.sum())
        dt = g.exponential() / M if M > 0 else math.inf
        next_sched = heap[0][0] if heap else math.inf
        if t + dt >= min(next_sched, horizon):
            if next_sched <= horizon:
                t, pid, c = heapq.heappop(heap)
                finish_visit(pid, c, t)
                continue
            break
        t += dt
        u = g.random() * M
        if u < lam_sum:
            i = min(int(np.searchsorted(np.cumsum(lam), u, side="right")), d - 1)
            lam_new = conditional_intensity(state, model, t)[i]
            if g.random() * lam[i] >= lam_new:
                continue
            pid = next_pid
            next_pid += 1
            arrived[pid] = t
            marks = nan_mark
            if mode != ExcitationMode.DELAYED:
                marks = draw_marks(model, np.array([i]), g)[0]
            length = enter(pid, i, t)
            if mode != ExcitationMode.DELAYED:
                state.add(t, i, marks, owner=pid)
            record(t, i, ARRIVAL, i, marks, length if not model.has_routing else math.nan, pid)
        else:
            u -= lam_sum
            j = min(int(np.searchsorted(np.cumsum(moves), u, side="right")), d - 1)
            pid = members[j][int(g.integers(len(members[j])))]
            leave(pid)
            finish_visit(pid, j, t)
        n_events += 1
        if n_events % 256 == 0:
            state.prune(t)
    # fill in sojourns that became known at departure
    svc = np.asarray(rec["service"], dtype=float)
    kinds = np.asarray(rec["kind"], dtype=np.int8)
    pids = np.asarray(rec["pid"], dtype=np.int64)
    if kinds.size:
        dep = kinds == DEPARTURE
        total = dict(zip(pids[dep].tolist(), svc[dep].tolist()))
        miss = np.isnan(svc)
        svc[miss] = [total.get(p, math.nan) for p in pids[miss].tolist()]
    n = len(rec["time"])
    return EventLog.build(rec["time"], rec["coord"], kinds, rec["src"],
                          np.asarray(rec["mark"], dtype=float).reshape(n, d), svc, pids,
                          np.full(n, -1), model=model, horizon=horizon, seed=seed, d=d,
                          meta={"engine": "thinning", "service_semantics": semantics})


def simulate_nonlinear(model: NetworkModel, horizon: float, rng) -> EventLog:
    """Thinning simulation with the model's nonlinear rate maps.

    The bound at each step is the rate map applied to the excitation at the
    last event; it dominates later intensities because rate maps are
    nondecreasing and kernels nonincreasing.
    """
    if model.rate_maps is None:
        raise ModelValidationError("simulate_nonlinear needs rate maps (phi)")
    return simulate_network(model, horizon, rng)


def simulate_network_many(model: NetworkModel, horizon: float, reps: int, rng, *,
                          threads: Optional[int] = None, service_semantics: Optional[str] = None) -> list:
    """Independent thinning replications; replication k uses stream ("thinning", k)."""
    factory = as_factory(rng, "thinning-many")
    logs = map_blocks(lambda k: simulate_network(model, horizon, factory.child(k), service_semantics),
                      reps, threads)
    return logs


# ---------------------------------------------------------------------------
# lockstep Markov engine
# ---------------------------------------------------------------------------

MARKOV_BLOCK = 4096


def _markov_params(model: NetworkModel):
    if model.mode == ExcitationMode.EPHEMERAL:
        raise ModelValidationError("the lockstep Markov engine covers hawkes and delayed modes")
    if not model.is_linear:
        raise ModelValidationError("the lockstep Markov engine needs linear rate maps")
    if any(s.kind != "exponential" for s in model.services):
        raise ModelValidationError("the lockstep Markov engine needs exponential services")
    d = model.d
    rates = np.ones((d, d))
    scales = np.zeros((d, d))
    for i in range(d):
        for j in range(d):
            k = model.kernels[i][j]
            if k.is_zero:
                continue
            if k.shape != "exponential":
                raise NonexponentialKernelError("the lockstep Markov engine needs exponential kernels")
            rates[i, j] = k.rate
            scales[i, j] = k.scale
    return rates, scales


def _markov_block(model, times, nb, g, rates, scales):
    d = model.d
    T = len(times)
    hawkes = model.mode == ExcitationMode.HAWKES
    lam0 = np.asarray(model.lambda0)
    tot = model.total_rates
    mu = np.asarray(model.mu)
    route = np.asarray(model.mu_route)
    cum_out = np.cumsum(np.vstack([route, mu[None, :]]) / np.where(tot > 0, tot, 1.0)[None, :], axis=0)
    cum_out[-1] = 1.0
    outN = np.zeros((nb, T, d))
    outQ = np.zeros((nb, T, d))
    outL = np.zeros((nb, T, d))
    ids = np.arange(nb)
    t = np.zeros(nb)
    E = np.zeros((nb, d, d))
    Q = np.zeros((nb, d))
    N = np.zeros((nb, d))
    obs = np.zeros(nb, dtype=np.int64)
    # replications whose first observation time is 0 are recorded right away
    while True:
        first = times[obs] <= 0.0
        if not first.any():
            break
        idx = np.flatnonzero(first & (obs < T))
        if idx.size == 0:
            break
        outL[ids[idx], obs[idx]] = lam0
        obs[idx] += 1
        if np.all(obs >= T):
            break
    alive = obs < T
    ids, t, E, Q, N, obs = ids[alive], t[alive], E[alive], Q[alive], N[alive], obs[alive]
    excite_cols = [(k, np.flatnonzero(scales[:, k] > 0)) for k in range(d)]
    while ids.size:
        na = ids.size
        lam = lam0 + E.sum(axis=2)
        rates_all = np.concatenate([lam, Q * tot], axis=1)
        cum = np.cumsum(rates_all, axis=1)
        M = cum[:, -1]
        with np.errstate(divide="ignore"):
            dt = g.standard_exponential(na) / M
        tn = t + dt
        tob = times[obs]
        hit = tn >= tob
        tnew = np.where(hit, tob, tn)
        E *= np.exp(-rates[None, :, :] * (tnew - t)[:, None, None])
        t = tnew
        u = g.random(na) * M
        v = g.random(na)
        if hit.any():
            h = np.flatnonzero(hit)
            outQ[ids[h], obs[h]] = Q[h]
            outN[ids[h], obs[h]] = N[h]
            outL[ids[h], obs[h]] = lam0 + E[h].sum(axis=2)
            obs[h] += 1
        ev = ~hit
        cat = (u[:, None] >= cum).sum(axis=1)
        for i in range(d):
            a = np.flatnonzero(ev & (cat == i))
            if a.size == 0:
                continue
            lam_new = lam0[i] + E[a, i, :].sum(axis=1)
            acc = a[v[a] * lam[a, i] < lam_new]
            N[acc, i] += 1
            Q[acc, i] += 1
            if hawkes and acc.size:
                for k in excite_cols[i][1]:
                    E[acc, k, i] += scales[k, i] * model.marks[k][i].sample(g, acc.size)
        for j in range(d):
            a = np.flatnonzero(ev & (cat == d + j))
            if a.size == 0:
                continue
            if model.has_routing:
                out = (g.random(a.size)[:, None] >= cum_out[:, j][None, :]).sum(axis=1)
            else:
                out = np.full(a.size, d)
            Q[a, j] -= 1
            ex = a[out == d]
            if not hawkes and ex.size:
                for k in excite_cols[j][1]:
                    E[ex, k, j] += scales[k, j] * model.marks[k][j].sample(g, ex.size)
            for i in range(d):
                moved = a[out == i]
                Q[moved, i] += 1
        done = obs >= T
        if done.any():
            keep = ~done
            ids, t, E, Q, N, obs = ids[keep], t[keep], E[keep], Q[keep], N[keep], obs[keep]
    return outN, outQ, outL


def sample_markov_state(model: NetworkModel, times, reps: int, rng, *, threads: Optional[int] = None) -> StateSample:
    """N, Q and intensity at ``times`` for a Markovian model, many replications in lockstep.

    Requires exponential kernels and services; departures are rate-driven.
    """
    validate_network(model)
    rates, scales = _markov_params(model)
    times = np.asarray(times, dtype=float)
    if np.any(np.diff(times) < 0) or np.any(times < 0):
        raise ValueError("observation times must be nonnegative and sorted")
    factory = as_factory(rng, "markov-state")
    n_blocks = -(-reps // MARKOV_BLOCK)

    def run(b):
        nb = min(MARKOV_BLOCK, reps - b * MARKOV_BLOCK)
        return _markov_block(model, times, nb, factory(b), rates, scales)

    parts = map_blocks(run, n_blocks, threads)
    N, Q, L = (np.concatenate([p[k] for p in parts]) for k in range(3))
    return StateSample(times=times, N=N, Q=Q, Lam=L)
