"""Exact simulation through the branching (immigrant-offspring) construction.

Two entry points share the same law:

* :func:`simulate_cluster` grows one genealogy tree node by node and is meant
  for inspection and small experiments.
* The block engine (:func:`grow_population` and the samplers built on it)
  grows whole generations of many replications at once with array
  operations.  Each block of replications draws from its own keyed stream, so
  results do not depend on the number of threads.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple, Optional

import numpy as np

from .errors import GenerationCapExceeded, ModelValidationError
from .events import ARRIVAL, DEPARTURE, REROUTE, Event, EventLog, reconstruct_paths  # noqa: F401
from .model import ExcitationMode, Kernel, NetworkModel, spectral_radius, validate_network
from .rng import as_factory, map_blocks

DEFAULT_NODE_CAP = 10**6
TARGET_BLOCK_PARTICLES = 200_000
MAX_BLOCK_REPS = 4096


# ---------------------------------------------------------------------------
# single realized kernels
# ---------------------------------------------------------------------------

class RealizedKernel(NamedTuple):
    """Random excitation function of one particle towards one target."""

    mode: ExcitationMode
    mark: float
    service: float
    kernel: Kernel


def _window(realized: RealizedKernel, horizon: float):
    """(shift, length) of the interval where the realized kernel can be nonzero."""
    mode = ExcitationMode(realized.mode)
    if mode == ExcitationMode.DELAYED:
        return realized.service, horizon - realized.service
    if mode == ExcitationMode.EPHEMERAL:
        return 0.0, min(horizon, realized.service)
    return 0.0, horizon


def sample_offspring_times(realized: RealizedKernel, horizon: float, rng: np.random.Generator) -> np.ndarray:
    """Sorted epochs in ``[0, horizon]`` of a Poisson process with the realized intensity.

    Times are measured from the parent's birth.  Exponential kernels use exact
    inversion of the cumulative intensity; other shapes are thinned against
    ``mark * sup h`` on a finite window and fall back to inversion when the
    window is unbounded.
    """
    k = realized.kernel
    shift, length = _window(realized, horizon)
    if k.is_zero or length <= 0 or realized.mark <= 0:
        return np.zeros(0)
    if realized.mode == ExcitationMode.EPHEMERAL and length == realized.service:
        length_open = True  # excitation stops strictly before J
    else:
        length_open = False
    if k.shape == "exponential":
        total = realized.mark * float(k.integral(length))
        out = []
        acc = rng.exponential()
        while acc < total:
            out.append(acc)
            acc += rng.exponential()
        times = k.inverse_integral(np.asarray(out) / realized.mark)
    elif math.isfinite(length):
        bound = realized.mark * k.sup
        n = rng.poisson(bound * length)
        cand = np.sort(rng.random(n) * length)
        accept = rng.random(n) * bound < realized.mark * k(cand)
        times = cand[accept]
    else:
        total = realized.mark * k.l1
        n = rng.poisson(total)
        times = np.sort(k.inverse_integral(rng.random(n) * k.l1))
    if length_open:
        times = times[times < length]
    return shift + np.asarray(times, dtype=float)


# ---------------------------------------------------------------------------
# sojourns and marks for batches of particles
# ---------------------------------------------------------------------------

def draw_sojourns(model: NetworkModel, coords: np.ndarray, rng: np.random.Generator):
    """Total sojourn, exit coordinate and visit segments for new particles.

    Returns ``(J, exit_coord, segments)`` where ``segments`` is ``None`` without
    routing, else a tuple ``(particle_index, coord, offset_in, offset_out)``
    listing every visit relative to the particle's arrival.
    """
    n = len(coords)
    d = model.d
    if not model.has_routing:
        J = np.empty(n)
        for j in range(d):
            s = coords == j
            if s.any():
                J[s] = model.services[j].sample(rng, int(s.sum()))
        return J, coords.copy(), None
    tot = model.total_rates
    outcome_p = np.vstack([np.asarray(model.mu_route), np.asarray(model.mu)[None, :]]) / tot[None, :]
    cum = np.cumsum(outcome_p, axis=0)
    cum[-1] = 1.0
    elapsed = np.zeros(n)
    exit_c = np.empty(n, dtype=np.int64)
    cur = coords.astype(np.int64).copy()
    active = np.arange(n)
    seg = ([], [], [], [])
    while active.size:
        c = cur[active]
        visit = rng.exponential(1.0, active.size) / tot[c]
        u = rng.random(active.size)
        outcome = (u[:, None] >= cum[:, c].T).sum(axis=1)
        seg[0].append(active)
        seg[1].append(c)
        seg[2].append(elapsed[active].copy())
        elapsed[active] += visit
        seg[3].append(elapsed[active].copy())
        done = outcome == d
        exit_c[active[done]] = c[done]
        moved = active[~done]
        cur[moved] = outcome[~done]
        active = moved
    segments = tuple(np.concatenate(x) for x in seg)
    return elapsed, exit_c, segments


def draw_marks(model: NetworkModel, src: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Mark vectors ``B[:, i] ~ marks[i][src]`` for particles emitting from ``src``."""
    d = model.d
    out = np.zeros((len(src), d))
    for j in range(d):
        s = np.flatnonzero(src == j)
        if s.size == 0:
            continue
        for i in range(d):
            if model.kernels[i][j].is_zero:
                continue
            out[s, i] = model.marks[i][j].sample(rng, s.size)
    return out


# ---------------------------------------------------------------------------
# block engine
# ---------------------------------------------------------------------------

@dataclass
class Population:
    """All particles of a block of replications (or of a batch of clusters)."""

    rep: np.ndarray
    pid: np.ndarray
    parent: np.ndarray
    root: np.ndarray
    generation: np.ndarray
    coord: np.ndarray
    t_arr: np.ndarray
    t_exit: np.ndarray
    exit_coord: np.ndarray
    marks: np.ndarray
    segments: Optional[tuple] = None  # (particle row, coord, t_in, t_out)
    reroutes: Optional[tuple] = None  # (particle row, time, from, to)

    def __len__(self):
        return len(self.pid)

    def anchors(self, mode: ExcitationMode):
        """(anchor time, source coordinate, expiry) of every particle's excitation."""
        if mode == ExcitationMode.DELAYED:
            return self.t_exit, self.exit_coord, np.full(len(self), np.inf)
        if mode == ExcitationMode.EPHEMERAL:
            return self.t_arr, self.coord, self.t_exit
        return self.t_arr, self.coord, np.full(len(self), np.inf)


def _concat(parts, dtype=float):
    return np.concatenate(parts) if parts else np.zeros(0, dtype=dtype)


def grow_population(model: NetworkModel, root_coord, root_time, root_rep, horizon: float,
                    rng: np.random.Generator, node_cap: int = DEFAULT_NODE_CAP,
                    keep_marks: bool = True) -> Population:
    """Grow every cluster rooted at the given particles, generation by generation.

    Children born after ``horizon`` are never created (the Poisson mass is
    restricted to the part of each realized kernel inside the horizon).
    Raises :class:`GenerationCapExceeded` when a single cluster exceeds
    ``node_cap`` particles.
    """
    if not model.is_linear:
        raise ModelValidationError("the cluster construction needs linear rate maps")
    d = model.d
    mode = model.mode
    coord = np.asarray(root_coord, dtype=np.int64)
    t_arr = np.asarray(root_time, dtype=float)
    rep = np.asarray(root_rep, dtype=np.int64)
    n_roots = len(coord)
    root = np.arange(n_roots, dtype=np.int64)
    parent = np.full(n_roots, -1, dtype=np.int64)
    cols = {k: [] for k in ("rep", "pid", "parent", "root", "gen", "coord", "t_arr", "t_exit", "exit", "marks")}
    segs = ([], [], [], [])
    size = np.zeros(n_roots, dtype=np.int64)
    next_pid = 0
    gen = 0
    pairs = [(i, j, model.kernels[i][j]) for j in range(d) for i in range(d)
             if not model.kernels[i][j].is_zero]
    while coord.size:
        n = coord.size
        pid = np.arange(next_pid, next_pid + n, dtype=np.int64)
        next_pid += n
        J, exit_c, seg = draw_sojourns(model, coord, rng)
        t_exit = t_arr + J
        src = exit_c if mode == ExcitationMode.DELAYED else coord
        marks = draw_marks(model, src, rng)
        for key, val in (("rep", rep), ("pid", pid), ("parent", parent), ("root", root),
                         ("gen", np.full(n, gen, dtype=np.int64)), ("coord", coord),
                         ("t_arr", t_arr), ("t_exit", t_exit), ("exit", exit_c),
                         ("marks", marks if keep_marks else np.zeros((n, 0)))):
            cols[key].append(val)
        if seg is not None:
            segs[0].append(pid[seg[0]])
            segs[1].append(seg[1])
            segs[2].append(t_arr[seg[0]] + seg[2])
            segs[3].append(t_arr[seg[0]] + seg[3])
        size += np.bincount(root, minlength=n_roots)
        if size.max(initial=0) > node_cap:
            raise GenerationCapExceeded(
                f"a cluster exceeded {node_cap} particles; the model may be unstable")
        anchor = t_exit if mode == ExcitationMode.DELAYED else t_arr
        room = horizon - anchor
        kids = {k: [] for k in ("par", "coord", "t")}
        for i, j, k in pairs:
            sel = np.flatnonzero((src == j) & (room > 0))
            if sel.size == 0:
                continue
            w = room[sel]
            if mode == ExcitationMode.EPHEMERAL:
                w = np.minimum(w, J[sel])
            cap_mass = k.integral(w)
            cnt = rng.poisson(marks[sel, i] * cap_mass)
            total = int(cnt.sum())
            if total == 0:
                continue
            par = np.repeat(sel, cnt)
            off = k.inverse_integral(rng.random(total) * np.repeat(cap_mass, cnt))
            kids["par"].append(par)
            kids["coord"].append(np.full(total, i, dtype=np.int64))
            kids["t"].append(anchor[par] + off)
        if not kids["par"]:
            break
        par = np.concatenate(kids["par"])
        coord = np.concatenate(kids["coord"])
        t_arr = np.concatenate(kids["t"])
        order = np.lexsort((coord, t_arr, par))  # deterministic child order
        par, coord, t_arr = par[order], coord[order], t_arr[order]
        rep = rep[par]
        root = root[par]
        parent = pid[par]
        gen += 1
    pop = Population(
        rep=_concat(cols["rep"], np.int64), pid=_concat(cols["pid"], np.int64),
        parent=_concat(cols["parent"], np.int64), root=_concat(cols["root"], np.int64),
        generation=_concat(cols["gen"], np.int64), coord=_concat(cols["coord"], np.int64),
        t_arr=_concat(cols["t_arr"]), t_exit=_concat(cols["t_exit"]),
        exit_coord=_concat(cols["exit"], np.int64),
        marks=np.concatenate(cols["marks"]) if cols["marks"] else np.zeros((0, d)),
    )
    if model.has_routing and segs[0]:
        row_of = np.empty(next_pid, dtype=np.int64)
        row_of[pop.pid] = np.arange(len(pop))
        rows = row_of[np.concatenate(segs[0])]
        sc = np.concatenate(segs[1])
        tin = np.concatenate(segs[2])
        tout = np.concatenate(segs[3])
        pop.segments = (rows, sc, tin, tout)
        # a visit ending before the particle's exit is a reroute to the next visit
        order = np.lexsort((tin, rows))
        r_o, c_o, in_o, out_o = rows[order], sc[order], tin[order], tout[order]
        nxt = np.flatnonzero(r_o[1:] == r_o[:-1])
        pop.reroutes = (r_o[nxt], out_o[nxt], c_o[nxt], c_o[nxt + 1])
    return pop


def immigrants(model: NetworkModel, horizon: float, n_reps: int, rng: np.random.Generator):
    """Homogeneous Poisson immigrant streams on ``[0, horizon]`` for each replication."""
    coords, times, reps = [], [], []
    for j in range(model.d):
        lam = model.lambda0[j]
        if lam <= 0:
            continue
        cnt = rng.poisson(lam * horizon, n_reps)
        total = int(cnt.sum())
        coords.append(np.full(total, j, dtype=np.int64))
        times.append(rng.random(total) * horizon)
        reps.append(np.repeat(np.arange(n_reps, dtype=np.int64), cnt))
    if not coords:
        return np.zeros(0, dtype=np.int64), np.zeros(0), np.zeros(0, dtype=np.int64)
    return np.concatenate(coords), np.concatenate(times), np.concatenate(reps)


def expected_particles(model: NetworkModel, horizon: float) -> float:
    """Rough expected number of particles per replication up to ``horizon``."""
    H = model.branching_matrix()
    lam = np.asarray(model.lambda0)
    if spectral_radius(H) < 0.999:
        m = np.linalg.solve(np.eye(model.d) - H, lam)
    else:
        m = lam * 1e3
    return float(max(1.0, m.sum() * horizon))


def block_size(model: NetworkModel, horizon: float) -> int:
    """Replications per block; depends only on (model, horizon)."""
    per = expected_particles(model, horizon)
    b = int(2 ** math.floor(math.log2(max(1.0, TARGET_BLOCK_PARTICLES / per))))
    return int(min(MAX_BLOCK_REPS, max(1, b)))


# ---------------------------------------------------------------------------
# state sampling
# ---------------------------------------------------------------------------

@dataclass
class StateSample:
    """Values at fixed times for many replications; arrays have shape (reps, len(times), d)."""

    times: np.ndarray
    N: np.ndarray
    Q: np.ndarray
    Lam: np.ndarray

    @property
    def reps(self) -> int:
        return self.N.shape[0]


def population_state(pop: Population, model: NetworkModel, times, n_reps: int,
                     want=("N", "Q", "Lam")):
    """Evaluate N, Q and the intensity of each replication at the given times."""
    times = np.asarray(times, dtype=float)
    d = model.d
    shape = (n_reps, len(times), d)
    N = np.zeros(shape)
    Q = np.zeros(shape)
    Lam = np.zeros(shape)
    lam0 = np.asarray(model.lambda0)
    if "Lam" in want:
        Lam += lam0[None, None, :]
        anchor, src, expiry = pop.anchors(model.mode)
    for c, t in enumerate(times):
        for i in range(d):
            if "N" in want:
                s = (pop.coord == i) & (pop.t_arr <= t)
                N[:, c, i] = np.bincount(pop.rep[s], minlength=n_reps)
            if "Q" in want:
                if pop.segments is None:
                    s = (pop.coord == i) & (pop.t_arr <= t) & (pop.t_exit > t)
                    Q[:, c, i] = np.bincount(pop.rep[s], minlength=n_reps)
                else:
                    rows, sc, tin, tout = pop.segments
                    s = (sc == i) & (tin <= t) & (tout > t)
                    Q[:, c, i] = np.bincount(pop.rep[rows[s]], minlength=n_reps)
            if "Lam" in want:
                for j in range(d):
                    k = model.kernels[i][j]
                    if k.is_zero:
                        continue
                    s = np.flatnonzero((src == j) & (anchor <= t) & (expiry > t))
                    if s.size == 0:
                        continue
                    w = pop.marks[s, i] * k(t - anchor[s])
                    Lam[:, c, i] += np.bincount(pop.rep[s], weights=w, minlength=n_reps)
    return N, Q, Lam


def sample_state(model: NetworkModel, times, reps: int, rng, *, threads: Optional[int] = None,
                 want=("N", "Q", "Lam"), node_cap: int = DEFAULT_NODE_CAP) -> StateSample:
    """Sample N(t), Q(t) and the intensity at ``times`` for independent replications."""
    validate_network(model)
    times = np.asarray(times, dtype=float)
    horizon = float(times.max()) if times.size else 0.0
    factory = as_factory(rng, "cluster-state")
    bs = block_size(model, horizon)
    n_blocks = -(-reps // bs)

    def run(b):
        nb = min(bs, reps - b * bs)
        g = factory(b)
        c, t, r = immigrants(model, horizon, nb, g)
        pop = grow_population(model, c, t, r, horizon, g, node_cap=node_cap)
        return population_state(pop, model, times, nb, want)

    parts = map_blocks(run, n_blocks, threads)
    N, Q, Lam = (np.concatenate([p[k] for p in parts]) for k in range(3))
    return StateSample(times=times, N=N, Q=Q, Lam=Lam)


def sample_cluster_sizes(model: NetworkModel, coordinate: int, n_clusters: int, rng, *,
                         horizon: float = np.inf, threads: Optional[int] = None,
                         node_cap: int = DEFAULT_NODE_CAP) -> np.ndarray:
    """Total number of particles in independent clusters rooted in ``coordinate`` at time 0."""
    validate_network(model)
    factory = as_factory(rng, "cluster-sizes", coordinate)
    bs = 4096
    n_blocks = -(-n_clusters // bs)

    def run(b):
        nb = min(bs, n_clusters - b * bs)
        pop = grow_population(model, np.full(nb, coordinate), np.zeros(nb), np.arange(nb),
                              horizon, factory(b), node_cap=node_cap, keep_marks=True)
        return np.bincount(pop.root, minlength=nb)

    return np.concatenate(map_blocks(run, n_blocks, threads))


# ---------------------------------------------------------------------------
# event logs
# ---------------------------------------------------------------------------

def population_log(pop: Population, model: NetworkModel, horizon: float, rep: int = 0,
                   seed=None) -> EventLog:
    """Flatten one replication of a population into a sorted event log."""
    d = model.d
    s = np.flatnonzero(pop.rep == rep)
    mode = model.mode
    nan_marks = np.full((s.size, d), np.nan)
    arr_marks = nan_marks if mode == ExcitationMode.DELAYED else pop.marks[s]
    service = pop.t_exit[s] - pop.t_arr[s]
    cols = {
        "time": [pop.t_arr[s]], "coordinate": [pop.coord[s]], "kind": [np.full(s.size, ARRIVAL)],
        "source": [pop.coord[s]], "mark": [arr_marks], "service": [service],
        "pid": [pop.pid[s]], "parent": [pop.parent[s]],
    }
    dep = s[pop.t_exit[s] <= horizon]
    cols["time"].append(pop.t_exit[dep])
    cols["coordinate"].append(pop.exit_coord[dep])
    cols["kind"].append(np.full(dep.size, DEPARTURE))
    cols["source"].append(pop.exit_coord[dep])
    cols["mark"].append(pop.marks[dep] if mode == ExcitationMode.DELAYED else np.full((dep.size, d), np.nan))
    cols["service"].append(pop.t_exit[dep] - pop.t_arr[dep])
    cols["pid"].append(pop.pid[dep])
    cols["parent"].append(pop.parent[dep])
    if pop.reroutes is not None:
        rows, rt, rfrom, rto = pop.reroutes
        keep = (pop.rep[rows] == rep) & (rt <= horizon)
        rows, rt, rfrom, rto = rows[keep], rt[keep], rfrom[keep], rto[keep]
        cols["time"].append(rt)
        cols["coordinate"].append(rto)
        cols["kind"].append(np.full(rows.size, REROUTE))
        cols["source"].append(rfrom)
        cols["mark"].append(np.full((rows.size, d), np.nan))
        cols["service"].append(pop.t_exit[rows] - pop.t_arr[rows])
        cols["pid"].append(pop.pid[rows])
        cols["parent"].append(pop.parent[rows])
    cat = {k: np.concatenate(v) for k, v in cols.items()}
    return EventLog.build(cat["time"], cat["coordinate"], cat["kind"], cat["source"], cat["mark"],
                          cat["service"], cat["pid"], cat["parent"], model=model,
                          horizon=horizon, seed=seed, d=d, meta={"engine": "cluster"})


def simulate_paths(model: NetworkModel, horizon: float, rng, *, node_cap: int = DEFAULT_NODE_CAP) -> EventLog:
    """One replication on ``[0, horizon]`` as a time-sorted event log."""
    return simulate_paths_many(model, horizon, 1, rng, node_cap=node_cap)[0]


def simulate_paths_many(model: NetworkModel, horizon: float, reps: int, rng, *,
                        threads: Optional[int] = None, node_cap: int = DEFAULT_NODE_CAP) -> list:
    """Independent replications as event logs (identical for any thread count)."""
    validate_network(model)
    if not math.isfinite(horizon):
        raise ValueError("path simulation needs a finite horizon")
    factory = as_factory(rng, "cluster-paths")
    seed = factory.seed
    bs = block_size(model, horizon)
    n_blocks = -(-reps // bs)

    def run(b):
        nb = min(bs, reps - b * bs)
        g = factory(b)
        c, t, r = immigrants(model, horizon, nb, g)
        pop = grow_population(model, c, t, r, horizon, g, node_cap=node_cap)
        return [population_log(pop, model, horizon, rep=k, seed=seed) for k in range(nb)]

    return [log for part in map_blocks(run, n_blocks, threads) for log in part]


# ---------------------------------------------------------------------------
# explicit trees
# ---------------------------------------------------------------------------

@dataclass
class ClusterNode:
    """One particle of a genealogy tree together with its realized excitation."""

    event: Event
    service: float
    exit_coordinate: int
    marks: np.ndarray
    mode: ExcitationMode
    children: list = field(default_factory=list)

    @property
    def birth(self) -> float:
        return self.event.time

    @property
    def coordinate(self) -> int:
        return self.event.coordinate

    def iter_nodes(self):
        stack = [self]
        while stack:
            node = stack.pop()
            yield node
            stack.extend(reversed(node.children))

    def size(self) -> int:
        return sum(1 for _ in self.iter_nodes())

    def depth(self) -> int:
        best = 0
        stack = [(self, 0)]
        while stack:
            node, g = stack.pop()
            best = max(best, g)
            stack.extend((c, g + 1) for c in node.children)
        return best


def simulate_cluster(model: NetworkModel, coordinate: int, birth_time: float, horizon: float,
                     rng: np.random.Generator, node_cap: int = DEFAULT_NODE_CAP) -> ClusterNode:
    """Grow the cluster of a single particle born at ``birth_time`` up to ``horizon``."""
    if not model.is_linear:
        raise ModelValidationError("the cluster construction needs linear rate maps")
    d = model.d
    mode = model.mode
    counter = [0]

    def make(coord, t, parent):
        J, exit_c, _ = draw_sojourns(model, np.array([coord]), rng)
        src = exit_c if mode == ExcitationMode.DELAYED else np.array([coord])
        marks = draw_marks(model, src, rng)[0]
        pid = counter[0]
        counter[0] += 1
        ev = Event(time=float(t), coordinate=int(coord), kind="arrival",
                   mark=None if mode == ExcitationMode.DELAYED else marks.copy(),
                   service=float(J[0]), particle_id=pid, parent_id=parent)
        return ClusterNode(ev, float(J[0]), int(exit_c[0]), marks, mode)

    root = make(coordinate, birth_time, None)
    stack = [root]
    while stack:
        node = stack.pop()
        src = node.exit_coordinate if mode == ExcitationMode.DELAYED else node.coordinate
        for i in range(d):
            rk = RealizedKernel(mode, float(node.marks[i]), node.service, model.kernels[i][src])
            for off in sample_offspring_times(rk, horizon - node.birth, rng):
                if counter[0] >= node_cap:
                    raise GenerationCapExceeded(
                        f"cluster exceeded {node_cap} particles; the model may be unstable")
                child = make(i, node.birth + off, node.event.particle_id)
                node.children.append(child)
        node.children.sort(key=lambda c: (c.birth, c.event.particle_id))
        stack.extend(node.children)
    return root
