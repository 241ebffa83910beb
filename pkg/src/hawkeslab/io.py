"""JSON model configs and CSV event logs."""
from __future__ import annotations

import csv
import io as _io
import json
import math
import os
import re
from importlib import resources
from pathlib import Path

import numpy as np

from .errors import ParseError
from .events import ARRIVAL, DEPARTURE, KIND_NAMES, REROUTE, EventLog
from .model import (ExcitationMode, Kernel, MarkDistribution, NetworkModel, RateMap,
                    ServiceDistribution, validate_network)

SCHEMA_VERSION = 1
EVENT_COLUMNS = ("time", "coordinate", "kind", "mark", "service", "particle_id", "parent_id")

_KERNEL_FIELDS = {
    "exponential": ("rate", "scale"),
    "power_law": ("exponent", "scale", "cutoff"),
    "piecewise_constant": ("breakpoints", "values"),
    "zero": (),
}
_MARK_FIELDS = {
    "deterministic": ("value",),
    "exponential": ("rate",),
    "gamma": ("shape", "rate"),
    "beta": ("a", "b"),
    "pareto": ("alpha", "scale"),
}
_SERVICE_FIELDS = {
    "exponential": ("rate",),
    "deterministic": ("value",),
    "lognormal": ("log_mean", "log_sd"),
}


class _Ctx:
    """Locates field names in the source text for error messages."""

    def __init__(self, text):
        self.text = text or ""

    def line_of(self, name):
        m = re.search(r'"%s"\s*:' % re.escape(name), self.text)
        if not m:
            return None
        return self.text.count("\n", 0, m.start()) + 1

    def error(self, message, field, key=None):
        return ParseError(message, field=field, line=self.line_of(key or field.split(".")[-1].split("[")[0]))


def _need(obj, key, path, ctx):
    if not isinstance(obj, dict):
        raise ctx.error(f"expected an object at {path}", path)
    if key not in obj:
        name = f"{path}.{key}" if path else key
        raise ctx.error(f"missing required field '{name}'", name, key=path.split(".")[-1].split("[")[0] or None)
    return obj[key]


def _number(x, path, ctx):
    if isinstance(x, bool) or not isinstance(x, (int, float)):
        if isinstance(x, str) and x in ("inf", "Infinity"):
            return math.inf
        raise ctx.error(f"expected a number at {path}", path)
    return float(x)


def _typed(spec, table, path, ctx, build):
    kind = _need(spec, "type", path, ctx)
    if kind not in table:
        raise ctx.error(f"unknown type '{kind}' at {path}", f"{path}.type", key="type")
    args = {}
    for name in table[kind]:
        if name in spec:
            v = spec[name]
            args[name] = [_number(a, f"{path}.{name}", ctx) for a in v] if isinstance(v, list) else _number(v, f"{path}.{name}", ctx)
    try:
        return build(kind, args)
    except ParseError:
        raise
    except (TypeError, ValueError) as exc:
        raise ctx.error(f"{path}: {exc}", path) from exc


def _kernel(kind, a):
    if kind == "exponential":
        return Kernel.exponential(a["rate"], a.get("scale", 1.0))
    if kind == "power_law":
        return Kernel.power_law(a["exponent"], a["scale"], a["cutoff"])
    if kind == "piecewise_constant":
        return Kernel.piecewise_constant(a["breakpoints"], a["values"])
    return Kernel.zero()


def _mark(kind, a):
    return getattr(MarkDistribution, kind)(**a)


def _service(kind, a):
    return getattr(ServiceDistribution, kind)(**a)


def _matrix(obj, name, d, ctx):
    rows = _need(obj, name, "", ctx)
    if not isinstance(rows, list) or len(rows) != d or any(not isinstance(r, list) or len(r) != d for r in rows):
        raise ctx.error(f"'{name}' must be a {d}x{d} nested list", name)
    return rows


def _vector(obj, name, d, ctx):
    v = _need(obj, name, "", ctx)
    if not isinstance(v, list) or len(v) != d:
        raise ctx.error(f"'{name}' must be a list of length {d}", name)
    return [_number(x, f"{name}[{k}]", ctx) for k, x in enumerate(v)]


def model_from_dict(obj: dict, text: str = None) -> NetworkModel:
    """Build and validate a model from its JSON object form."""
    ctx = _Ctx(text)
    d = _need(obj, "d", "", ctx)
    if isinstance(d, bool) or not isinstance(d, int) or d < 1:
        raise ctx.error("'d' must be a positive integer", "d")
    lam = _vector(obj, "lambda0", d, ctx)
    kernels = [[_typed(s, _KERNEL_FIELDS, f"kernels[{i}][{j}]", ctx, _kernel) for j, s in enumerate(row)]
               for i, row in enumerate(_matrix(obj, "kernels", d, ctx))]
    marks = [[_typed(s, _MARK_FIELDS, f"marks[{i}][{j}]", ctx, _mark) for j, s in enumerate(row)]
             for i, row in enumerate(_matrix(obj, "marks", d, ctx))]
    svc = _need(obj, "services", "", ctx)
    if not isinstance(svc, list) or len(svc) != d:
        raise ctx.error(f"'services' must be a list of length {d}", "services")
    services = [_typed(s, _SERVICE_FIELDS, f"services[{j}]", ctx, _service) for j, s in enumerate(svc)]
    mu = _vector(obj, "mu", d, ctx)
    if "mu_route" in obj:
        route = [[_number(x, f"mu_route[{i}][{j}]", ctx) for j, x in enumerate(row)]
                 for i, row in enumerate(_matrix(obj, "mu_route", d, ctx))]
    else:
        route = [[0.0] * d for _ in range(d)]
    mode = obj.get("mode", "delayed")
    if mode not in [m.value for m in ExcitationMode]:
        raise ctx.error(f"unknown mode '{mode}'", "mode")
    phi = obj.get("phi")
    rate_maps = None
    if phi is not None:
        if not isinstance(phi, list) or len(phi) != d:
            raise ctx.error(f"'phi' must be a list of length {d}", "phi")
        try:
            rate_maps = tuple(RateMap(p.get("kind", "linear"), _number(p.get("cap", math.inf), f"phi[{k}].cap", ctx))
                              for k, p in enumerate(phi))
        except ValueError as exc:
            raise ctx.error(str(exc), "phi") from exc
    model = NetworkModel(d, lam, kernels, marks, services, mu, route, mode, rate_maps,
                         obj.get("service_semantics"))
    validate_network(model)
    return model


def parse_model(source) -> NetworkModel:
    """Parse a model from a path, JSON text or an already decoded dict."""
    if isinstance(source, dict):
        return model_from_dict(source)
    text = None
    if isinstance(source, Path) or (isinstance(source, str) and not source.lstrip().startswith("{")
                                    and os.path.exists(source)):
        text = Path(source).read_text()
    elif isinstance(source, str):
        text = source
    else:
        raise ParseError("expected a path, JSON text or dict")
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"invalid JSON: {exc.msg}", line=exc.lineno) from exc
    return model_from_dict(obj, text)


def _kernel_dict(k: Kernel) -> dict:
    if k.is_zero:
        return {"type": "zero"}
    if k.shape == "exponential":
        return {"type": "exponential", "rate": k.rate, "scale": k.scale}
    if k.shape == "power_law":
        return {"type": "power_law", "exponent": k.exponent, "scale": k.scale, "cutoff": k.cutoff}
    return {"type": "piecewise_constant", "breakpoints": list(k.breakpoints), "values": list(k.values)}


def _dist_dict(m, table) -> dict:
    out = {"type": m.kind}
    for name in table[m.kind]:
        out[name] = getattr(m, name)
    return out


def model_to_dict(model: NetworkModel) -> dict:
    d = model.d
    out = {
        "d": d,
        "lambda0": list(model.lambda0),
        "kernels": [[_kernel_dict(model.kernels[i][j]) for j in range(d)] for i in range(d)],
        "marks": [[_dist_dict(model.marks[i][j], _MARK_FIELDS) for j in range(d)] for i in range(d)],
        "services": [_dist_dict(s, _SERVICE_FIELDS) for s in model.services],
        "mu": list(model.mu),
        "mu_route": [list(r) for r in model.mu_route],
        "mode": model.mode.value,
    }
    if model.rate_maps is not None:
        out["phi"] = [{"kind": p.kind} if math.isinf(p.cap) else {"kind": p.kind, "cap": p.cap}
                      for p in model.rate_maps]
    if model.service_semantics is not None:
        out["service_semantics"] = model.service_semantics
    return out


def dump_model(model: NetworkModel) -> str:
    return json.dumps(model_to_dict(model), indent=2, sort_keys=True) + "\n"


def builtin_config(name: str) -> str:
    """Text of a configuration shipped with the package (``figure1``, ``reference``)."""
    return resources.files("hawkeslab").joinpath(f"data/{name}.json").read_text()


# ---------------------------------------------------------------------------
# event logs
# ---------------------------------------------------------------------------

def _fmt(x: float) -> str:
    return "" if not np.isfinite(x) else repr(float(x))


def write_event_log(log: EventLog, target) -> None:
    """Write a log as CSV; reroutes appear as ``reroute(from,to)``, marks are ';'-joined."""
    own = isinstance(target, (str, Path))
    fh = open(target, "w", newline="") if own else target
    try:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(EVENT_COLUMNS)
        for k in range(len(log)):
            kind = int(log.kind[k])
            name = KIND_NAMES[kind]
            if kind == REROUTE:
                name = f"reroute({int(log.source[k])},{int(log.coordinate[k])})"
            m = log.mark[k]
            mark = "" if np.all(np.isnan(m)) else ";".join(_fmt(x) for x in m)
            w.writerow([repr(float(log.time[k])), int(log.coordinate[k]), name, mark, _fmt(log.service[k]),
                        int(log.particle_id[k]), int(log.parent_id[k])])
    finally:
        if own:
            fh.close()


_REROUTE = re.compile(r"reroute\((\d+),(\d+)\)")


def read_event_log(source, d: int = None, model: NetworkModel = None) -> EventLog:
    """Read a CSV event log written by :func:`write_event_log`."""
    own = isinstance(source, (str, Path))
    fh = open(source, newline="") if own else source
    try:
        r = csv.reader(fh)
        header = next(r)
        if tuple(header) != EVENT_COLUMNS:
            raise ParseError(f"unexpected header {header}", line=1)
        rows = list(r)
    finally:
        if own:
            fh.close()
    if d is None:
        d = model.d if model is not None else max([len(row[3].split(";")) for row in rows if row[3]] or [1])
    n = len(rows)
    time = np.empty(n)
    coord = np.empty(n, dtype=np.int64)
    src = np.empty(n, dtype=np.int64)
    kind = np.empty(n, dtype=np.int8)
    mark = np.full((n, d), np.nan)
    service = np.full(n, np.nan)
    pid = np.empty(n, dtype=np.int64)
    parent = np.empty(n, dtype=np.int64)
    names = {v: k for k, v in KIND_NAMES.items()}
    for a, row in enumerate(rows):
        try:
            time[a] = float(row[0])
            coord[a] = int(row[1])
            m = _REROUTE.fullmatch(row[2])
            if m:
                kind[a] = REROUTE
                src[a] = int(m.group(1))
            else:
                kind[a] = names[row[2]]
                src[a] = coord[a]
            if row[3]:
                mark[a] = [float(x) if x else np.nan for x in row[3].split(";")]
            if row[4]:
                service[a] = float(row[4])
            pid[a] = int(row[5])
            parent[a] = int(row[6])
        except (ValueError, KeyError, IndexError) as exc:
            raise ParseError(f"malformed event row: {exc}", line=a + 2) from exc
    return EventLog(time, coord, kind, src, mark, service, pid, parent, model=model)


def event_log_to_csv(log: EventLog) -> str:
    buf = _io.StringIO()
    write_event_log(log, buf)
    return buf.getvalue()
