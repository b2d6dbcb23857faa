"""Physical data model: heat network, electric network, generation units.

A NetworkModel is loaded from a canonical JSON file, fully validated, and
then treated as immutable. Everything downstream (formulation, solvers,
analysis) takes a validated model and never mutates it.

Unit conventions: power in MW, mass flow in kg/s, temperature in degC,
specific heat in MW*s/(kg*degC), reactance in per-unit on base_mva.
"""

from __future__ import annotations

import importlib.resources
import itertools
import json
from dataclasses import dataclass, field
from pathlib import Path

import jsonschema

from .errors import (
    EmptyRegion,
    ParseError,
    UnboundedRegion,
    UnitConventionError,
    ValidationError,
)

DEFAULT_SPECIFIC_HEAT = 4.182e-3  # water, MW*s/(kg*degC)

SOURCE = "source"
LOAD = "load"
JUNCTION = "junction"


@dataclass(frozen=True)
class HeatNode:
    id: str
    kind: str
    tau_min: float
    tau_max: float
    tau_source: float | None = None
    heat_load: tuple[float, ...] = ()


@dataclass(frozen=True)
class Pipe:
    id: str
    from_node: str
    to_node: str
    length: float
    heat_transfer_coeff: float
    m_min: float
    m_max: float
    m_nominal: float
    tau_pipe_min: float  # defaulted from downstream node when absent in file
    tau_pipe_max: float
    tau_window_explicit: bool = False


@dataclass(frozen=True)
class Bus:
    id: str
    p_load: tuple[float, ...] = ()


@dataclass(frozen=True)
class Line:
    id: str
    from_bus: str
    to_bus: str
    reactance: float
    p_max: float


@dataclass(frozen=True)
class HeatingBoiler:
    id: str
    node_id: str
    cost_c: float
    h_min: float
    h_max: float


@dataclass(frozen=True)
class ChpUnit:
    id: str
    bus_id: str
    node_id: str
    cost: tuple[float, float, float, float, float, float]  # c0..c5
    region: tuple[tuple[float, float, float], ...]  # rows a*P + b*H <= d


@dataclass(frozen=True)
class ThermalUnit:
    id: str
    bus_id: str
    cost_c1: float
    cost_c2: float
    p_min: float
    p_max: float


@dataclass(frozen=True)
class NetworkModel:
    name: str
    horizon_hours: int
    ambient_temp: float
    specific_heat: float
    base_power: float
    heat_nodes: tuple[HeatNode, ...]
    pipes: tuple[Pipe, ...]
    buses: tuple[Bus, ...]
    lines: tuple[Line, ...]
    units: tuple[object, ...]
    _node_index: dict = field(default_factory=dict, repr=False, compare=False)

    def node(self, node_id: str) -> HeatNode:
        return self._lookup("node")[node_id]

    def pipe(self, pipe_id: str) -> Pipe:
        return self._lookup("pipe")[pipe_id]

    def bus(self, bus_id: str) -> Bus:
        return self._lookup("bus")[bus_id]

    def _lookup(self, kind: str) -> dict:
        cache = self._node_index
        if not cache:
            cache["node"] = {n.id: n for n in self.heat_nodes}
            cache["pipe"] = {p.id: p for p in self.pipes}
            cache["bus"] = {b.id: b for b in self.buses}
        return cache[kind]

    @property
    def boilers(self) -> list[HeatingBoiler]:
        return [u for u in self.units if isinstance(u, HeatingBoiler)]

    @property
    def chps(self) -> list[ChpUnit]:
        return [u for u in self.units if isinstance(u, ChpUnit)]

    @property
    def thermal_units(self) -> list[ThermalUnit]:
        return [u for u in self.units if isinstance(u, ThermalUnit)]

    def units_at_node(self, node_id: str) -> list:
        out = [u for u in self.boilers if u.node_id == node_id]
        out += [u for u in self.chps if u.node_id == node_id]
        return out

    def units_at_bus(self, bus_id: str) -> list:
        out = [u for u in self.chps if u.bus_id == bus_id]
        out += [u for u in self.thermal_units if u.bus_id == bus_id]
        return out


def _schema() -> dict:
    text = importlib.resources.files("heatgrid").joinpath("network.schema.json").read_text()
    return json.loads(text)


def load_network(path: str | Path) -> NetworkModel:
    """Load and fully validate a network model from a JSON file."""
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ParseError(f"{path}: {exc}") from exc
    return network_from_dict(raw, name=path.stem)


def network_from_dict(raw: dict, name: str = "network") -> NetworkModel:
    """Build a validated NetworkModel from an already-parsed dict."""
    validator = jsonschema.Draft202012Validator(_schema())
    schema_errors = sorted(validator.iter_errors(raw), key=lambda e: list(e.absolute_path))
    if schema_errors:
        meta_missing = [
            e for e in schema_errors
            if list(e.absolute_path) == ["meta"] and "required" in e.message
        ]
        msgs = [f"{'/'.join(str(p) for p in e.absolute_path) or '<root>'}: {e.message}"
                for e in schema_errors]
        if meta_missing and len(meta_missing) == len(schema_errors):
            raise UnitConventionError("; ".join(msgs))
        raise ParseError("; ".join(msgs))

    meta = raw["meta"]
    T = meta["T"]
    tau_a = meta["tau_ambient"]
    c = meta.get("specific_heat", DEFAULT_SPECIFIC_HEAT)
    base = meta["base_mva"]
    heat_loads = raw["loads"]["heat"]
    power_loads = raw["loads"]["power"]

    defects: list[str] = []

    node_ids = [n["id"] for n in raw["heat_nodes"]]
    for dup in _dups(node_ids):
        defects.append(f"heat node {dup}: duplicate id")
    nodes = []
    for n in raw["heat_nodes"]:
        nid = n["id"]
        series = heat_loads.get(nid, [0.0] * T)
        if len(series) != T:
            defects.append(f"heat node {nid}: heat_load series length {len(series)} != T={T}")
            series = (list(series) + [0.0] * T)[:T]
        if any(v < 0 for v in series):
            defects.append(f"heat node {nid}: heat_load must be nonnegative")
        if n["kind"] != LOAD and any(v != 0 for v in series):
            defects.append(f"heat node {nid}: nonzero heat_load on kind={n['kind']}")
        if not n["tau_min"] < n["tau_max"]:
            defects.append(f"heat node {nid}: tau_min < tau_max violated")
        has_src_temp = "tau_source" in n
        if (n["kind"] == SOURCE) != has_src_temp:
            defects.append(f"heat node {nid}: tau_source present iff kind=source violated")
        if has_src_temp and not (n["tau_min"] <= n["tau_source"] <= n["tau_max"]):
            defects.append(f"heat node {nid}: tau_source outside [tau_min, tau_max]")
        nodes.append(HeatNode(
            id=nid, kind=n["kind"], tau_min=n["tau_min"], tau_max=n["tau_max"],
            tau_source=n.get("tau_source"), heat_load=tuple(float(v) for v in series),
        ))
    node_by_id = {n.id: n for n in nodes}
    for key in heat_loads:
        if key not in node_by_id:
            defects.append(f"loads.heat key {key}: no such heat node")

    pipe_ids = [p["id"] for p in raw["pipes"]]
    for dup in _dups(pipe_ids):
        defects.append(f"pipe {dup}: duplicate id")
    pipes = []
    for p in raw["pipes"]:
        pid = p["id"]
        for end in ("from", "to"):
            if p[end] not in node_by_id:
                defects.append(f"pipe {pid}: endpoint {p[end]} is not a heat node")
        if not 0 <= p["m_min"]:
            defects.append(f"pipe {pid}: m_min must be nonnegative")
        if not p["m_min"] < p["m_max"]:
            defects.append(f"pipe {pid}: m_min < m_max violated")
        if not p["m_min"] <= p["m_nominal"] <= p["m_max"]:
            defects.append(f"pipe {pid}: m_nominal outside [m_min, m_max]")
        if not p["length"] > 0:
            defects.append(f"pipe {pid}: length must be positive")
        down = node_by_id.get(p["to"])
        explicit = "tau_pipe_min" in p or "tau_pipe_max" in p
        tp_min = p.get("tau_pipe_min", down.tau_min if down else 0.0)
        tp_max = p.get("tau_pipe_max", down.tau_max if down else 1.0)
        if not tp_min < tp_max:
            defects.append(f"pipe {pid}: tau_pipe_min < tau_pipe_max violated")
        pipes.append(Pipe(
            id=pid, from_node=p["from"], to_node=p["to"], length=p["length"],
            heat_transfer_coeff=p["heat_transfer_coeff"],
            m_min=p["m_min"], m_max=p["m_max"], m_nominal=p["m_nominal"],
            tau_pipe_min=tp_min, tau_pipe_max=tp_max, tau_window_explicit=explicit,
        ))

    bus_ids = [b["id"] for b in raw["buses"]]
    for dup in _dups(bus_ids):
        defects.append(f"bus {dup}: duplicate id")
    buses = []
    for b in raw["buses"]:
        series = power_loads.get(b["id"], [0.0] * T)
        if len(series) != T:
            defects.append(f"bus {b['id']}: p_load series length {len(series)} != T={T}")
            series = (list(series) + [0.0] * T)[:T]
        buses.append(Bus(id=b["id"], p_load=tuple(float(v) for v in series)))
    bus_by_id = {b.id: b for b in buses}
    for key in power_loads:
        if key not in bus_by_id:
            defects.append(f"loads.power key {key}: no such bus")

    lines = []
    for i, ln in enumerate(raw["lines"]):
        lid = ln.get("id", f"{ln['from']}-{ln['to']}")
        for end in ("from", "to"):
            if ln[end] not in bus_by_id:
                defects.append(f"line {lid}: endpoint {ln[end]} is not a bus")
        if not ln["reactance"] > 0:
            defects.append(f"line {lid}: reactance must be positive")
        if not ln["p_max"] > 0:
            defects.append(f"line {lid}: p_max must be positive")
        lines.append(Line(id=lid, from_bus=ln["from"], to_bus=ln["to"],
                          reactance=ln["reactance"], p_max=ln["p_max"]))

    unit_ids = [u["id"] for u in raw["units"]]
    for dup in _dups(unit_ids):
        defects.append(f"unit {dup}: duplicate id")
    units: list[object] = []
    for u in raw["units"]:
        uid = u["id"]
        if u["type"] == "boiler":
            if u["node_id"] not in node_by_id:
                defects.append(f"unit {uid}: node {u['node_id']} does not exist")
            if not u["h_min"] <= u["h_max"]:
                defects.append(f"unit {uid}: h_min <= h_max violated")
            units.append(HeatingBoiler(id=uid, node_id=u["node_id"], cost_c=u["cost_c"],
                                       h_min=u["h_min"], h_max=u["h_max"]))
        elif u["type"] == "chp":
            if u["bus_id"] not in bus_by_id:
                defects.append(f"unit {uid}: bus {u['bus_id']} does not exist")
            if u["node_id"] not in node_by_id:
                defects.append(f"unit {uid}: node {u['node_id']} does not exist")
            cost = tuple(float(u["cost"][f"c{k}"]) for k in range(6))
            # 2x2 Hessian [[2c2, c5], [c5, 2c4]] must be PSD for a convex cost
            c2, c4, c5 = cost[2], cost[4], cost[5]
            if c2 < 0 or c4 < 0 or 4 * c2 * c4 - c5 * c5 < -1e-12:
                defects.append(f"unit {uid}: CHP cost Hessian not positive semidefinite")
            region = tuple((float(r["a"]), float(r["b"]), float(r["d"])) for r in u["region"])
            unit = ChpUnit(id=uid, bus_id=u["bus_id"], node_id=u["node_id"],
                           cost=cost, region=region)
            try:
                validate_chp_region(unit)
            except EmptyRegion:
                defects.append(f"unit {uid}: CHP operating region is empty")
            except UnboundedRegion:
                defects.append(f"unit {uid}: CHP operating region is unbounded")
            units.append(unit)
        else:
            if u["bus_id"] not in bus_by_id:
                defects.append(f"unit {uid}: bus {u['bus_id']} does not exist")
            if not u["p_min"] <= u["p_max"]:
                defects.append(f"unit {uid}: p_min <= p_max violated")
            units.append(ThermalUnit(id=uid, bus_id=u["bus_id"], cost_c1=u["cost_c1"],
                                     cost_c2=u["cost_c2"], p_min=u["p_min"], p_max=u["p_max"]))

    model = NetworkModel(
        name=meta.get("name", name), horizon_hours=T, ambient_temp=tau_a,
        specific_heat=c, base_power=base,
        heat_nodes=tuple(nodes), pipes=tuple(pipes), buses=tuple(buses),
        lines=tuple(lines), units=tuple(units),
    )

    defects += _structural_defects(model)
    if defects:
        raise ValidationError(defects)
    return model


def _dups(ids):
    seen, dups = set(), []
    for i in ids:
        if i in seen and i not in dups:
            dups.append(i)
        seen.add(i)
    return dups


def _structural_defects(model: NetworkModel) -> list[str]:
    defects = []
    node_ids = {n.id for n in model.heat_nodes}
    source_ids = {n.id for n in model.heat_nodes if n.kind == SOURCE}
    hosting = {u.node_id for u in model.boilers} | {u.node_id for u in model.chps}
    for sid in sorted(source_ids - hosting):
        defects.append(f"heat node {sid}: source hosts no CHP or boiler")

    if len(node_ids) > 1 and not _connected(
            node_ids, [(p.from_node, p.to_node) for p in model.pipes]):
        defects.append("heat network: graph is not connected")
    bus_ids = {b.id for b in model.buses}
    if len(bus_ids) > 1 and not _connected(
            bus_ids, [(l.from_bus, l.to_bus) for l in model.lines]):
        defects.append("power network: graph is not connected")
    return defects


def _connected(nodes: set[str], edges: list[tuple[str, str]]) -> bool:
    if not nodes:
        return True
    adj: dict[str, list[str]] = {n: [] for n in nodes}
    for a, b in edges:
        if a in adj and b in adj:
            adj[a].append(b)
            adj[b].append(a)
    start = next(iter(sorted(nodes)))
    seen = {start}
    stack = [start]
    while stack:
        for nb in adj[stack.pop()]:
            if nb not in seen:
                seen.add(nb)
                stack.append(nb)
    return seen == nodes


def derive_adjacency(model: NetworkModel) -> tuple[dict[str, list[str]], dict[str, list[str]]]:
    """In(i)/Out(i) pipe-id maps for the heat network.

    In(i) holds pipes with to=i, Out(i) pipes with from=i; every pipe
    appears in exactly one In set and one Out set.
    """
    in_map: dict[str, list[str]] = {n.id: [] for n in model.heat_nodes}
    out_map: dict[str, list[str]] = {n.id: [] for n in model.heat_nodes}
    for p in model.pipes:
        in_map[p.to_node].append(p.id)
        out_map[p.from_node].append(p.id)
    return in_map, out_map


def validate_chp_region(unit: ChpUnit) -> list[tuple[float, float]]:
    """Check the CHP polygon {A*P + B*H <= D, P >= 0, H >= 0}.

    Returns the polygon's extreme points. Raises EmptyRegion or
    UnboundedRegion on degenerate data.
    """
    rows = [(a, b, d) for a, b, d in unit.region]
    rows.append((-1.0, 0.0, 0.0))  # P >= 0
    rows.append((0.0, -1.0, 0.0))  # H >= 0
    tol = 1e-9

    vertices = []
    for (a1, b1, d1), (a2, b2, d2) in itertools.combinations(rows, 2):
        det = a1 * b2 - a2 * b1
        if abs(det) < 1e-12:
            continue
        p = (d1 * b2 - d2 * b1) / det
        h = (a1 * d2 - a2 * d1) / det
        if all(a * p + b * h <= d + tol * (1 + abs(d)) for a, b, d in rows):
            if not any(abs(p - vp) < 1e-7 and abs(h - vh) < 1e-7 for vp, vh in vertices):
                vertices.append((p, h))
    if not vertices:
        raise EmptyRegion(f"unit {unit.id}: operating region is empty")

    # Recession direction in the quadrant: d >= 0, region rows A*d <= 0.
    # The cone is polyhedral, so it is nonzero iff one of its generators is,
    # and generators lie on pairs of active cone rows (or the axes).
    cone_rows = [(a, b) for a, b, _ in rows]
    candidates = [(1.0, 0.0), (0.0, 1.0)]
    for (a1, b1), (a2, b2) in itertools.combinations(cone_rows, 2):
        det = a1 * b2 - a2 * b1
        if abs(det) < 1e-12:
            continue
        for rhs1, rhs2 in ((0.0, -1.0), (-1.0, 0.0)):
            dp = (rhs1 * b2 - rhs2 * b1) / det
            dh = (a1 * rhs2 - a2 * rhs1) / det
            candidates.append((dp, dh))
    for dp, dh in candidates:
        norm = max(abs(dp), abs(dh))
        if norm < tol:
            continue
        dp, dh = dp / norm, dh / norm
        if all(a * dp + b * dh <= tol for a, b in cone_rows):
            raise UnboundedRegion(
                f"unit {unit.id}: operating region unbounded along ({dp:.3g}, {dh:.3g})")
    return sorted(vertices)


def serialize(model: NetworkModel) -> dict:
    """Render a model back into the canonical file dict (round-trip safe)."""
    heat, power = {}, {}
    for n in model.heat_nodes:
        if any(v != 0 for v in n.heat_load):
            heat[n.id] = list(n.heat_load)
    for b in model.buses:
        if any(v != 0 for v in b.p_load):
            power[b.id] = list(b.p_load)

    def pipe_dict(p: Pipe) -> dict:
        d = {"id": p.id, "from": p.from_node, "to": p.to_node, "length": p.length,
             "heat_transfer_coeff": p.heat_transfer_coeff,
             "m_min": p.m_min, "m_max": p.m_max, "m_nominal": p.m_nominal}
        if p.tau_window_explicit:
            d["tau_pipe_min"] = p.tau_pipe_min
            d["tau_pipe_max"] = p.tau_pipe_max
        return d

    def unit_dict(u) -> dict:
        if isinstance(u, HeatingBoiler):
            return {"id": u.id, "type": "boiler", "node_id": u.node_id,
                    "cost_c": u.cost_c, "h_min": u.h_min, "h_max": u.h_max}
        if isinstance(u, ChpUnit):
            return {"id": u.id, "type": "chp", "bus_id": u.bus_id, "node_id": u.node_id,
                    "cost": {f"c{k}": u.cost[k] for k in range(6)},
                    "region": [{"a": a, "b": b, "d": d} for a, b, d in u.region]}
        return {"id": u.id, "type": "tu", "bus_id": u.bus_id,
                "cost_c1": u.cost_c1, "cost_c2": u.cost_c2,
                "p_min": u.p_min, "p_max": u.p_max}

    out = {
        "meta": {"name": model.name, "T": model.horizon_hours,
                 "tau_ambient": model.ambient_temp,
                 "specific_heat": model.specific_heat,
                 "base_mva": model.base_power},
        "heat_nodes": [
            {k: v for k, v in
             {"id": n.id, "kind": n.kind, "tau_min": n.tau_min,
              "tau_max": n.tau_max, "tau_source": n.tau_source}.items()
             if v is not None}
            for n in model.heat_nodes
        ],
        "pipes": [pipe_dict(p) for p in model.pipes],
        "buses": [{"id": b.id} for b in model.buses],
        "lines": [{"id": l.id, "from": l.from_bus, "to": l.to_bus,
                   "reactance": l.reactance, "p_max": l.p_max} for l in model.lines],
        "units": [unit_dict(u) for u in model.units],
        "loads": {"heat": heat, "power": power},
    }
    return out
