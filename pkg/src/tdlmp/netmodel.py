"""Radial feeder data model, per-unit conversion and feeder file ingestion.

Nodes are numbered 0..N with node 0 the substation (root).  Every non-root
node ``j`` has exactly one incoming line, stored at position ``j - 1`` of
``Feeder.lines``; all per-line arrays follow that ordering.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .thermal import ThermalParams

SQRT3 = math.sqrt(3.0)


class FeederError(ValueError):
    """Base class for invalid feeder descriptions."""


class SchemaError(FeederError):
    pass


class TreeError(FeederError):
    pass


class SeriesLengthError(FeederError):
    pass


@dataclass(frozen=True)
class PerUnitBase:
    s_base: float  # kVA
    v_base: dict  # level name -> kV line-to-line

    def __post_init__(self):
        if not self.s_base > 0:
            raise SchemaError(f"bases.s_base_kVA must be positive, got {self.s_base!r}")
        if not self.v_base:
            raise SchemaError("bases.levels must define at least one voltage level")
        for name, kv in self.v_base.items():
            if not kv > 0:
                raise SchemaError(f"bases.levels.{name} must be positive, got {kv!r}")

    def _level(self, level: str) -> float:
        try:
            return self.v_base[level]
        except KeyError:
            raise SchemaError(f"no base voltage for level {level!r}") from None

    def z_base(self, level: str) -> float:
        return self._level(level) ** 2 * 1000.0 / self.s_base

    def i_base(self, level: str) -> float:
        """Base current in A."""
        return self.s_base / (SQRT3 * self._level(level))


@dataclass(frozen=True, eq=False)
class LoadProfile:
    real_kw: np.ndarray
    power_factor: float = 1.0

    def __post_init__(self):
        if not 0 < self.power_factor <= 1:
            raise SchemaError(f"power factor must lie in (0, 1], got {self.power_factor!r}")
        if np.any(np.asarray(self.real_kw) < 0):
            raise SchemaError("load profile has negative entries")

    @property
    def reactive_kvar(self) -> np.ndarray:
        return np.asarray(self.real_kw) * math.tan(math.acos(self.power_factor))


@dataclass(frozen=True)
class Node:
    id: int
    parent: int | None
    voltage_min_sq: float
    voltage_max_sq: float
    level: str
    load_profile_id: str | None = None
    power_factor: float = 1.0
    load_scale: float = 1.0

    def __post_init__(self):
        if not 0 < self.voltage_min_sq < self.voltage_max_sq:
            raise SchemaError(f"node {self.id}: need 0 < vmin < vmax")


@dataclass(frozen=True)
class Line:
    from_node: int
    to_node: int
    resistance_pu: float
    reactance_pu: float
    ampacity_sq_pu: float
    transformer: str | None = None

    @property
    def is_transformer(self) -> bool:
        return self.transformer is not None

    def __post_init__(self):
        if self.resistance_pu < 0:
            raise SchemaError(f"line {self.from_node}->{self.to_node}: negative resistance")
        if not self.ampacity_sq_pu > 0:
            raise SchemaError(f"line {self.from_node}->{self.to_node}: ampacity must be positive")


def _frozen(a) -> np.ndarray:
    arr = np.array(a, dtype=float)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class Feeder:
    nodes: tuple
    lines: tuple
    base: PerUnitBase
    load_profiles: dict
    lmp: np.ndarray  # $/kWh
    q_price: np.ndarray  # $/kvarh
    ambient: np.ndarray  # °C
    irradiation: np.ndarray
    transformers: dict = field(default_factory=dict)  # name -> ThermalParams
    monitored: tuple = ()  # transformer names scored in LoL columns
    dt: float = 1.0
    v0: float = 1.0  # squared root voltage
    name: str = "feeder"
    extra_series: dict = field(default_factory=dict)

    @property
    def horizon(self) -> int:
        return len(self.lmp)

    @property
    def n_lines(self) -> int:
        return len(self.lines)

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    # array views (cached on first use; the dataclass is frozen)
    def _cache(self, key, fn):
        store = self.__dict__.setdefault("_arrays", {})
        if key not in store:
            store[key] = fn()
        return store[key]

    @property
    def parent(self) -> np.ndarray:
        return self._cache("parent", lambda: np.array([-1 if n.parent is None else n.parent for n in self.nodes]))

    @property
    def r(self) -> np.ndarray:
        return self._cache("r", lambda: _frozen([ln.resistance_pu for ln in self.lines]))

    @property
    def x(self) -> np.ndarray:
        return self._cache("x", lambda: _frozen([ln.reactance_pu for ln in self.lines]))

    @property
    def lmax(self) -> np.ndarray:
        return self._cache("lmax", lambda: _frozen([ln.ampacity_sq_pu for ln in self.lines]))

    @property
    def vmin(self) -> np.ndarray:
        return self._cache("vmin", lambda: _frozen([n.voltage_min_sq for n in self.nodes]))

    @property
    def vmax(self) -> np.ndarray:
        return self._cache("vmax", lambda: _frozen([n.voltage_max_sq for n in self.nodes]))

    @property
    def children(self) -> tuple:
        def build():
            ch = [[] for _ in self.nodes]
            for n in self.nodes[1:]:
                ch[n.parent].append(n.id)
            return tuple(tuple(c) for c in ch)
        return self._cache("children", build)

    @property
    def order(self) -> np.ndarray:
        """Nodes in breadth-first order from the root."""
        def build():
            out, frontier = [0], [0]
            while frontier:
                nxt = [c for i in frontier for c in self.children[i]]
                out.extend(nxt)
                frontier = nxt
            return np.array(out)
        return self._cache("order", build)

    @property
    def load_p(self) -> np.ndarray:
        """Fixed real consumption per node and period, pu (N+1, T)."""
        return self._cache("load_p", lambda: self._loads(reactive=False))

    @property
    def load_q(self) -> np.ndarray:
        return self._cache("load_q", lambda: self._loads(reactive=True))

    def _loads(self, reactive: bool) -> np.ndarray:
        out = np.zeros((self.n_nodes, self.horizon))
        for n in self.nodes:
            if n.load_profile_id is None:
                continue
            prof = LoadProfile(self.load_profiles[n.load_profile_id], n.power_factor)
            kw = prof.reactive_kvar if reactive else np.asarray(prof.real_kw)
            out[n.id] = n.load_scale * kw / self.base.s_base
        out.setflags(write=False)
        return out

    def transformer_lines(self) -> list[tuple[int, str]]:
        """(line index, transformer name) for every transformer line."""
        return [(k, ln.transformer) for k, ln in enumerate(self.lines) if ln.is_transformer]

    def line_of(self, node: int) -> int:
        if node <= 0 or node >= self.n_nodes:
            raise IndexError(f"node {node} has no incoming line")
        return node - 1


def validate_tree(parents: dict) -> None:
    """Check parent pointers form a tree rooted at node 0.

    ``parents`` maps node id -> parent id (None for the root).  Raises
    TreeError naming the first cycle or orphan found.
    """
    roots = [n for n, p in parents.items() if p is None]
    if roots != [0]:
        raise TreeError(f"exactly one root (node 0) required, found roots {roots}")
    for n, p in parents.items():
        if p is not None and p not in parents:
            raise TreeError(f"node {n} is an orphan: parent {p} does not exist")
    state = {0: True}
    for start in parents:
        path = []
        n = start
        while n not in state:
            if n in path:
                cyc = path[path.index(n):] + [n]
                raise TreeError(f"cycle in parent pointers: {' -> '.join(map(str, cyc))}")
            path.append(n)
            n = parents[n]
        for m in path:
            state[m] = True


def _req(doc: dict, key: str, where: str):
    if key not in doc:
        raise SchemaError(f"{where}: missing field {key!r}")
    return doc[key]


def _series(values, name: str, horizon: int) -> np.ndarray:
    arr = np.asarray(values, dtype=float)
    if arr.ndim != 1 or len(arr) != horizon:
        raise SeriesLengthError(f"series {name!r} has length {arr.size}, expected {horizon}")
    return arr


def to_per_unit(raw: dict) -> Feeder:
    """Build a validated per-unit Feeder from a physical-unit description."""
    bases = _req(raw, "bases", "feeder")
    base = PerUnitBase(float(_req(bases, "s_base_kVA", "bases")), {k: float(v) for k, v in _req(bases, "levels", "bases").items()})
    series = _req(raw, "series", "feeder")
    lmp_raw = _req(series, "lmp", "series")
    horizon = int(raw.get("horizon", len(lmp_raw)))
    if horizon <= 0:
        raise SchemaError("horizon must be positive")
    lmp = _series(lmp_raw, "lmp", horizon)
    if np.any(lmp <= 0):
        raise SchemaError("series.lmp must be strictly positive")
    q_price = _series(series["q_price"], "q_price", horizon) if "q_price" in series else 0.1 * lmp
    ambient = _series(_req(series, "ambient", "series"), "ambient", horizon)
    irradiation = _series(series.get("irradiation", [0.0] * horizon), "irradiation", horizon)
    if np.any(irradiation < 0) or np.any(irradiation > 1):
        raise SchemaError("series.irradiation must lie in [0, 1]")
    known = {"lmp", "q_price", "ambient", "irradiation"}
    extra = {k: _series(v, k, horizon) for k, v in series.items() if k not in known}

    profiles = {}
    for name, vals in raw.get("profiles", {}).items():
        arr = _series(vals, f"profiles.{name}", horizon)
        if np.any(arr < 0):
            raise SchemaError(f"profiles.{name} has negative entries")
        profiles[name] = _frozen(arr)

    node_docs = _req(raw, "nodes", "feeder")
    parents = {}
    for i, nd in enumerate(node_docs):
        nid = int(_req(nd, "id", f"nodes[{i}]"))
        if nid in parents:
            raise SchemaError(f"duplicate node id {nid}")
        parents[nid] = None if nd.get("parent") is None else int(nd["parent"])
    if sorted(parents) != list(range(len(parents))):
        raise SchemaError("node ids must be the contiguous range 0..N")
    validate_tree(parents)

    nodes = []
    for nd in sorted(node_docs, key=lambda d: int(d["id"])):
        where = f"nodes[id={nd['id']}]"
        level = _req(nd, "level", where)
        base._level(level)
        prof = nd.get("load_profile")
        if prof is not None and prof not in profiles:
            raise SchemaError(f"{where}: unknown load_profile {prof!r}")
        vmin, vmax = float(nd.get("vmin", 0.95)), float(nd.get("vmax", 1.05))
        nodes.append(Node(
            id=int(nd["id"]), parent=parents[int(nd["id"])], voltage_min_sq=vmin**2, voltage_max_sq=vmax**2,
            level=level, load_profile_id=prof, power_factor=float(nd.get("pf", 1.0)),
            load_scale=float(nd.get("scale", 1.0)),
        ))

    tx_docs = {}
    for i, td in enumerate(raw.get("transformers", [])):
        name = _req(td, "name", f"transformers[{i}]")
        if name in tx_docs:
            raise SchemaError(f"duplicate transformer name {name!r}")
        tx_docs[name] = td

    line_docs = _req(raw, "lines", "feeder")
    if len(line_docs) != len(nodes) - 1:
        raise TreeError(f"{len(nodes)} nodes require {len(nodes) - 1} lines, found {len(line_docs)}")
    by_to = {}
    for i, ld in enumerate(line_docs):
        where = f"lines[{i}]"
        fr, to = int(_req(ld, "from", where)), int(_req(ld, "to", where))
        if to in by_to:
            raise TreeError(f"node {to} has more than one incoming line")
        if to == 0 or to not in parents or parents[to] != fr:
            raise TreeError(f"{where}: line {fr}->{to} does not match parent pointer of node {to}")
        by_to[to] = ld

    transformers = {}
    lines = []
    for to in range(1, len(nodes)):
        ld = by_to[to]
        where = f"lines[to={to}]"
        level = nodes[to].level
        zb, ib = base.z_base(level), base.i_base(level)
        tx = ld.get("transformer")
        if tx is not None:
            if tx not in tx_docs:
                raise SchemaError(f"{where}: unknown transformer {tx!r}")
            if tx in transformers:
                raise SchemaError(f"transformer {tx!r} referenced by more than one line")
            td = tx_docs[tx]
            rated = float(_req(td, "rated_kVA", f"transformers[{tx}]"))
            transformers[tx] = ThermalParams(
                rated_current_sq=(rated / base.s_base) ** 2,
                loss_ratio=float(td.get("R", 5.0)),
                dtheta_to_rated=float(td.get("dtheta_TO_R", 55.0)),
                dtheta_h_rated=float(td.get("dtheta_H_R", 25.0)),
                tau_to=float(td.get("tau_TO_h", 3.0)),
                k11=float(td.get("k11", 1.0)),
                n=float(td.get("n", 0.8)),
                m=float(td.get("m", 0.8)),
                hourly_cost=float(td.get("cost_per_hour", 0.0)),
                rated_kva=rated,
                name=tx,
            )
        lines.append(Line(
            from_node=int(ld["from"]), to_node=to,
            resistance_pu=float(_req(ld, "r_ohm", where)) / zb,
            reactance_pu=float(_req(ld, "x_ohm", where)) / zb,
            ampacity_sq_pu=(float(_req(ld, "ampacity_A", where)) / ib) ** 2,
            transformer=tx,
        ))
    unused = set(tx_docs) - set(transformers)
    if unused:
        raise SchemaError(f"transformers not attached to any line: {sorted(unused)}")
    monitored = tuple(n for n in transformers if tx_docs[n].get("monitor", False)) or tuple(transformers)

    dt = float(raw.get("dt_h", 1.0))
    if dt <= 0:
        raise SchemaError("dt_h must be positive")
    return Feeder(
        nodes=tuple(nodes), lines=tuple(lines), base=base, load_profiles=profiles,
        lmp=_frozen(lmp), q_price=_frozen(q_price), ambient=_frozen(ambient), irradiation=_frozen(irradiation),
        transformers=transformers, monitored=monitored, dt=dt, v0=float(raw.get("v0", 1.0)) ** 2,
        name=str(raw.get("name", "feeder")), extra_series={k: _frozen(v) for k, v in extra.items()},
    )


def from_per_unit(feeder: Feeder) -> dict:
    """Inverse of ``to_per_unit`` for the network sections."""
    b = feeder.base
    nodes = []
    for n in feeder.nodes:
        nodes.append({
            "id": n.id, "parent": n.parent, "level": n.level,
            "vmin": math.sqrt(n.voltage_min_sq), "vmax": math.sqrt(n.voltage_max_sq),
            "load_profile": n.load_profile_id, "pf": n.power_factor, "scale": n.load_scale,
        })
    lines = []
    for ln in feeder.lines:
        level = feeder.nodes[ln.to_node].level
        lines.append({
            "from": ln.from_node, "to": ln.to_node,
            "r_ohm": ln.resistance_pu * b.z_base(level), "x_ohm": ln.reactance_pu * b.z_base(level),
            "ampacity_A": math.sqrt(ln.ampacity_sq_pu) * b.i_base(level), "transformer": ln.transformer,
        })
    txs = []
    for name, p in feeder.transformers.items():
        txs.append({
            "name": name, "rated_kVA": math.sqrt(p.rated_current_sq) * b.s_base, "R": p.loss_ratio,
            "dtheta_TO_R": p.dtheta_to_rated, "dtheta_H_R": p.dtheta_h_rated, "tau_TO_h": p.tau_to,
            "k11": p.k11, "n": p.n, "m": p.m, "cost_per_hour": p.hourly_cost, "monitor": name in feeder.monitored,
        })
    series = {
        "lmp": feeder.lmp.tolist(), "q_price": feeder.q_price.tolist(),
        "ambient": feeder.ambient.tolist(), "irradiation": feeder.irradiation.tolist(),
    }
    series.update({k: v.tolist() for k, v in feeder.extra_series.items()})
    return {
        "name": feeder.name, "horizon": feeder.horizon, "dt_h": feeder.dt, "v0": math.sqrt(feeder.v0),
        "bases": {"s_base_kVA": b.s_base, "levels": dict(b.v_base)},
        "nodes": nodes, "lines": lines, "transformers": txs,
        "profiles": {k: v.tolist() for k, v in feeder.load_profiles.items()},
        "series": series,
    }


def read_document(path) -> dict:
    path = Path(path)
    try:
        text = path.read_text()
    except FileNotFoundError:
        raise FileNotFoundError(f"feeder file not found: {path}") from None
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path}: not valid JSON ({exc})") from None


def load_feeder(path) -> Feeder:
    return to_per_unit(read_document(path))


def downstream_paths(feeder: Feeder) -> dict:
    """Map node -> tuple of line indices from the root down to that node."""
    paths = {0: ()}
    for j in feeder.order[1:]:
        j = int(j)
        paths[j] = paths[feeder.nodes[j].parent] + (j - 1,)
    return paths


def subtree_nodes(feeder: Feeder, node: int) -> list[int]:
    out, stack = [], [node]
    while stack:
        n = stack.pop()
        out.append(n)
        stack.extend(feeder.children[n])
    return sorted(out)
