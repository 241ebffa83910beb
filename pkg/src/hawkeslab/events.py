"""Event logs and path reconstruction shared by both simulators."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator, Optional

import numpy as np

from .errors import UnsortedLogError
from .model import ExcitationMode, NetworkModel

ARRIVAL, DEPARTURE, REROUTE = 0, 1, 2
KIND_NAMES = {ARRIVAL: "arrival", DEPARTURE: "departure", REROUTE: "reroute"}


@dataclass(frozen=True)
class Event:
    time: float
    coordinate: int
    kind: str
    mark: Optional[np.ndarray]
    service: float
    particle_id: int
    parent_id: Optional[int] = None
    source: Optional[int] = None  # origin coordinate of a reroute


@dataclass
class EventLog:
    """Column-oriented, time-sorted record of arrivals, departures and reroutes.

    ``mark`` has one column per target coordinate and is NaN on events that
    install no excitation.  For reroutes ``coordinate`` is the destination and
    ``source`` the origin; for other events the two coincide.  ``service`` is
    the particle's total sojourn (NaN while unknown).  ``parent_id`` is -1 for
    immigrants and for logs without genealogy.
    """

    time: np.ndarray
    coordinate: np.ndarray
    kind: np.ndarray
    source: np.ndarray
    mark: np.ndarray
    service: np.ndarray
    particle_id: np.ndarray
    parent_id: np.ndarray
    model: Optional[NetworkModel] = None
    horizon: float = np.inf
    seed: Optional[int] = None
    meta: dict = field(default_factory=dict)

    @classmethod
    def build(cls, time, coordinate, kind, source, mark, service, particle_id, parent_id,
              model=None, horizon=np.inf, seed=None, d=None, meta=None) -> "EventLog":
        """Assemble a log from unsorted columns, ordering by (time, particle id)."""
        time = np.asarray(time, dtype=float)
        pid = np.asarray(particle_id, dtype=np.int64)
        order = np.lexsort((pid, time))
        if d is None:
            d = model.d if model is not None else 1
        mark = np.asarray(mark, dtype=float).reshape(len(time), d)
        return cls(
            time=time[order],
            coordinate=np.asarray(coordinate, dtype=np.int64)[order],
            kind=np.asarray(kind, dtype=np.int8)[order],
            source=np.asarray(source, dtype=np.int64)[order],
            mark=mark[order],
            service=np.asarray(service, dtype=float)[order],
            particle_id=pid[order],
            parent_id=np.asarray(parent_id, dtype=np.int64)[order],
            model=model, horizon=horizon, seed=seed, meta=dict(meta or {}),
        )

    @classmethod
    def empty(cls, d: int, model=None, horizon=np.inf, seed=None) -> "EventLog":
        z = np.zeros(0)
        zi = np.zeros(0, dtype=np.int64)
        return cls(z, zi, np.zeros(0, dtype=np.int8), zi, np.zeros((0, d)), z, zi, zi,
                   model=model, horizon=horizon, seed=seed)

    def __len__(self) -> int:
        return len(self.time)

    @property
    def d(self) -> int:
        return self.mark.shape[1]

    def is_sorted(self) -> bool:
        t = self.time
        if np.any(np.diff(t) < 0):
            return False
        same = np.diff(t) == 0
        return not np.any(same & (np.diff(self.particle_id) < 0))

    def events(self) -> Iterator[Event]:
        for k in range(len(self)):
            m = self.mark[k]
            yield Event(
                time=float(self.time[k]),
                coordinate=int(self.coordinate[k]),
                kind=KIND_NAMES[int(self.kind[k])],
                mark=None if np.all(np.isnan(m)) else m.copy(),
                service=float(self.service[k]),
                particle_id=int(self.particle_id[k]),
                parent_id=None if self.parent_id[k] < 0 else int(self.parent_id[k]),
                source=int(self.source[k]) if self.kind[k] == REROUTE else None,
            )

    def count(self, kind: int, coordinate: Optional[int] = None) -> int:
        sel = self.kind == kind
        if coordinate is not None:
            sel &= self.coordinate == coordinate
        return int(sel.sum())


@dataclass
class PathSample:
    """Q, N and intensity evaluated on a time grid; arrays have shape (len(grid), d)."""

    grid: np.ndarray
    Q: np.ndarray
    N: np.ndarray
    Lam: np.ndarray


def _anchors(log: EventLog, mode: ExcitationMode):
    """Excitation anchors (time, source coordinate, marks, expiry) of a log."""
    if mode == ExcitationMode.DELAYED:
        sel = log.kind == DEPARTURE
        expiry = np.full(int(sel.sum()), np.inf)
    else:
        sel = log.kind == ARRIVAL
        expiry = np.full(int(sel.sum()), np.inf)
        if mode == ExcitationMode.EPHEMERAL:
            dep = log.kind == DEPARTURE
            exit_time = dict(zip(log.particle_id[dep].tolist(), log.time[dep].tolist()))
            expiry = np.array([exit_time.get(p, np.inf) for p in log.particle_id[sel].tolist()])
    return log.time[sel], log.coordinate[sel], log.mark[sel], expiry


def excitation_at(model: NetworkModel, times, src, marks, expiry, grid) -> np.ndarray:
    """Accumulated excitation ``x_i(t)`` on ``grid`` from anchors; shape (len(grid), d)."""
    grid = np.asarray(grid, dtype=float)
    d = model.d
    out = np.zeros((len(grid), d))
    chunk = max(1, int(2_000_000 // max(1, len(times))))
    for j in range(d):
        sj = src == j
        if not np.any(sj):
            continue
        tj, mj, ej = times[sj], marks[sj], expiry[sj]
        for i in range(d):
            k = model.kernels[i][j]
            if k.is_zero:
                continue
            for a in range(0, len(grid), chunk):
                g = grid[a:a + chunk, None]
                lag = g - tj[None, :]
                w = np.where((lag >= 0) & (g < ej[None, :]), k(lag), 0.0)
                out[a:a + chunk, i] += w @ mj[:, i]
    return out


def reconstruct_paths(log: EventLog, model: NetworkModel, grid) -> PathSample:
    """Evaluate Q, N and the intensity on ``grid`` from an event log.

    Values are right-continuous: an event at time t is included at t.
    """
    if not log.is_sorted():
        raise UnsortedLogError("event log is not sorted by (time, particle id)")
    grid = np.asarray(grid, dtype=float)
    d = model.d
    Q = np.zeros((len(grid), d))
    N = np.zeros((len(grid), d))
    for j in range(d):
        arr = (log.kind == ARRIVAL) & (log.coordinate == j)
        N[:, j] = np.searchsorted(log.time[arr], grid, side="right")
        delta = np.zeros(len(log))
        delta[(log.kind != DEPARTURE) & (log.coordinate == j)] += 1.0
        delta[(log.kind == DEPARTURE) & (log.coordinate == j)] -= 1.0
        delta[(log.kind == REROUTE) & (log.source == j)] -= 1.0
        level = np.concatenate(([0.0], np.cumsum(delta)))
        Q[:, j] = level[np.searchsorted(log.time, grid, side="right")]
    t, src, marks, expiry = _anchors(log, model.mode)
    x = excitation_at(model, t, src, np.nan_to_num(marks), expiry, grid)
    lam0 = np.asarray(model.lambda0)
    if model.rate_maps is None:
        Lam = lam0[None, :] + x
    else:
        Lam = np.column_stack([model.rate_maps[i].apply(lam0[i], x[:, i]) for i in range(d)])
    return PathSample(grid=grid, Q=Q, N=N, Lam=Lam)
