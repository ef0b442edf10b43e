"""Experiment configuration: JSON ingestion, validation, derived lookups.

A config document (``"schema": 1``) describes the graph and swap rates, the
class alphabet, the external arrival table, service laws and disciplines per
(class, node), the class-transition table, truncation and observation depths,
horizons, copy counts, replica counts, seeds, and numeric bounds/tolerances.

Validation is all-at-once: every violated bound is collected and reported in
a single error, each message naming the bound it violates.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from . import queue_core as qc
from .errors import ParseError, SwapnetError, ValidationError
from .topology import Graph, build_graph

SCHEMA_VERSION = 1

_LAW_BUILDERS = {
    qc.EXPONENTIAL: lambda d: qc.exponential(float(d["rate"])),
    qc.ERLANG: lambda d: qc.erlang(int(d["shape"]), float(d["rate"])),
    qc.HYPEREXP: lambda d: qc.hyperexponential([float(w) for w in d["weights"]],
                                               [float(r) for r in d["rates"]]),
}


def _parse_law(d: dict) -> qc.ServiceLaw:
    fam = d.get("family")
    if fam not in _LAW_BUILDERS:
        raise ValueError(f"unknown service family {fam!r}")
    return _LAW_BUILDERS[fam](d)


def _parse_discipline(d: dict) -> qc.Discipline:
    return qc.Discipline(kind=d.get("kind", qc.FIFO),
                         priorities=d.get("priorities"),
                         preemptive=bool(d.get("preemptive", False)))


@dataclass
class PicardSettings:
    window: float = 0.25
    grid_dt: float = 0.05
    replicas: int = 2000
    min_replicas: int = 8
    tol: float = 0.02
    max_iter: int = 25
    lipschitz: float | None = None   # derived from rate bounds when unset
    rate_bound: float | None = None
    batches: int = 10


@dataclass
class ExperimentConfig:
    graph: Graph
    classes: tuple
    arrivals: dict                   # (class, node idx, dest idx) -> rate
    transitions: qc.ClassTransitionTable
    truncation: int = 10
    obs_depth: int = 4               # letters kept in a truncated descriptor
    obs_max_len: int = 20            # length cap of a truncated descriptor
    horizon: float = 5.0
    snapshot_times: tuple = ()
    n_list: tuple = (10, 100)
    n_seeds: int = 10
    base_seed: int = 2024
    ode_dt: float = 0.01
    leak_tol: float = 1e-4
    dimension_cap: int = 2_000_000
    event_budget: int = 50_000_000
    max_swap_rate: float = float("inf")
    max_degree: int | None = None
    max_arrival_rate: float = float("inf")
    max_hazard: float = float("inf")
    picard: PicardSettings = field(default_factory=PicardSettings)
    _services: dict = field(default_factory=dict)     # (class, node) -> law
    _service_default: qc.ServiceLaw | None = None
    _disciplines: dict = field(default_factory=dict)  # node -> Discipline
    _discipline_default: qc.Discipline = field(default_factory=qc.Discipline)
    raw: dict = field(default_factory=dict, repr=False)

    # -- derived accessors ----------------------------------------------------

    def service_law(self, klass: str, node: int) -> qc.ServiceLaw:
        law = self._services.get((klass, node), self._service_default)
        if law is None:
            raise ValidationError(f"no service law for class {klass!r} at node "
                                  f"{self.graph.names[node]!r}")
        return law

    def discipline(self, node: int) -> qc.Discipline:
        return self._disciplines.get(node, self._discipline_default)

    def hazard_bound(self) -> float:
        """Supremum of all service hazards across (class, node) pairs."""
        laws = set(self._services.values())
        if self._service_default is not None:
            laws.add(self._service_default)
        return max(law.hazard_bound() for law in laws)

    def arrival_rate_rows(self) -> dict:
        """Total external arrival rate per entry node."""
        rows = {v: 0.0 for v in range(self.graph.n_nodes)}
        for (_, v, _), r in self.arrivals.items():
            rows[v] += r
        return rows

    def total_swap_rate(self, v: int) -> float:
        return sum(self.graph.swap_rate(v, w) for w in self.graph.neighbors[v])


def load_config(path) -> ExperimentConfig:
    """Parse and validate a config file; raises with every violation listed."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ParseError(f"cannot read config {path}: {exc}") from exc
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"config {path} is not valid JSON: {exc}") from exc
    return config_from_dict(doc)


def config_from_dict(doc: dict) -> ExperimentConfig:
    violations = []
    if doc.get("schema") != SCHEMA_VERSION:
        violations.append(f"schema version must be {SCHEMA_VERSION}, "
                          f"got {doc.get('schema')!r}")

    bounds = doc.get("bounds", {})
    max_swap = float(bounds.get("max_swap_rate", float("inf")))
    max_degree = bounds.get("max_degree")
    max_arrival = float(bounds.get("max_arrival_rate", float("inf")))
    max_hazard = float(bounds.get("max_hazard", float("inf")))

    gdoc = doc.get("graph", {})
    graph = None
    try:
        graph = build_graph(gdoc.get("nodes", []), gdoc.get("edges", []),
                            gdoc.get("swap_rates"),
                            max_swap_rate=max_swap, max_degree=max_degree)
    except SwapnetError as exc:
        violations.append(f"graph: {exc} "
                          f"[{'swap-rate bound' if 'swap rate' in str(exc) else 'graph structure'}]")
    if graph is None:
        raise ValidationError(violations)

    classes = tuple(doc.get("classes", []))
    if not classes:
        violations.append("classes: alphabet must be nonempty")
    if len(set(classes)) != len(classes):
        violations.append("classes: duplicate symbols")

    def node_idx(name, where):
        if name not in graph.index:
            violations.append(f"{where}: unknown node {name!r}")
            return None
        return graph.index[name]

    arrivals = {}
    for row in doc.get("arrivals", []):
        k = row.get("class")
        if k not in classes:
            violations.append(f"arrivals: unknown class {k!r}")
            continue
        v = node_idx(row.get("node"), "arrivals")
        d = node_idx(row.get("dest"), "arrivals")
        rate = float(row.get("rate", 0.0))
        if rate < 0:
            violations.append(f"arrivals: negative rate {rate} for class {k!r}")
            continue
        if v is None or d is None:
            continue
        key = (k, v, d)
        if key in arrivals:
            violations.append(f"arrivals: duplicate entry for {row}")
        arrivals[key] = rate
    for v, total in _rows(arrivals, graph).items():
        if not total < max_arrival:
            violations.append(
                f"arrivals: total external rate {total} at node "
                f"{graph.names[v]!r} reaches the arrival-rate bound {max_arrival} "
                f"(must hold uniformly over nodes)")

    sdoc = doc.get("services", {})
    service_default = None
    services = {}
    try:
        if "default" in sdoc:
            service_default = _parse_law(sdoc["default"])
    except (ValueError, KeyError, TypeError) as exc:
        violations.append(f"services.default: {exc}")
    for row in sdoc.get("overrides", []):
        k = row.get("class")
        if k not in classes:
            violations.append(f"services: unknown class {k!r}")
            continue
        v = node_idx(row.get("node"), "services")
        if v is None:
            continue
        try:
            services[(k, v)] = _parse_law(row.get("law", {}))
        except (ValueError, KeyError, TypeError) as exc:
            violations.append(f"services override {row}: {exc}")
    if service_default is None and len(services) < len(classes) * graph.n_nodes:
        violations.append("services: no default law and overrides do not cover "
                          "every (class, node) pair")

    laws = set(services.values()) | ({service_default} if service_default else set())
    for law in laws:
        if not law.hazard_bound() < max_hazard:
            violations.append(f"services: hazard supremum {law.hazard_bound()} of "
                              f"{law.family} law reaches the hazard bound {max_hazard}")

    ddoc = doc.get("disciplines", {})
    try:
        discipline_default = _parse_discipline(ddoc.get("default", {}))
    except ValueError as exc:
        violations.append(f"disciplines.default: {exc}")
        discipline_default = qc.Discipline()
    disciplines = {}
    for row in ddoc.get("overrides", []):
        v = node_idx(row.get("node"), "disciplines")
        if v is None:
            continue
        try:
            disciplines[v] = _parse_discipline(row)
        except ValueError as exc:
            violations.append(f"disciplines override {row}: {exc}")
    for d in list(disciplines.values()) + [discipline_default]:
        if d.kind == qc.STATIC_PRIORITY and d.priorities:
            for k in d.priorities:
                if k not in classes:
                    violations.append(f"disciplines: priority rank for unknown "
                                      f"class {k!r}")

    tdoc = doc.get("class_transitions", {})
    entries = {}
    for row in tdoc.get("entries", []):
        k, knew = row.get("class"), row.get("new_class")
        v = node_idx(row.get("from"), "class_transitions")
        u = node_idx(row.get("to"), "class_transitions")
        if k not in classes or knew not in classes:
            violations.append(f"class_transitions: unknown class in {row}")
            continue
        if v is None or u is None:
            continue
        if graph.dist(v, u) != 1:
            violations.append(f"class_transitions: ({row.get('from')!r}, "
                              f"{row.get('to')!r}) is not an edge")
            continue
        entries[(k, v, u)] = knew
    transitions = qc.ClassTransitionTable(classes=classes, table=entries,
                                          identity=bool(tdoc.get("identity", True)))

    pdoc = doc.get("picard", {})
    picard = PicardSettings(
        window=float(pdoc.get("window", 0.25)),
        grid_dt=float(pdoc.get("grid_dt", 0.05)),
        replicas=int(pdoc.get("replicas", 2000)),
        min_replicas=int(pdoc.get("min_replicas", 8)),
        tol=float(pdoc.get("tol", 0.02)),
        max_iter=int(pdoc.get("max_iter", 25)),
        lipschitz=pdoc.get("lipschitz"),
        rate_bound=pdoc.get("rate_bound"),
        batches=int(pdoc.get("batches", 10)),
    )
    if picard.grid_dt <= 0 or picard.window <= 0:
        violations.append("picard: window and grid_dt must be positive")

    if violations:
        raise ValidationError(violations)

    cfg = ExperimentConfig(
        graph=graph,
        classes=classes,
        arrivals=arrivals,
        transitions=transitions,
        truncation=int(doc.get("truncation", 10)),
        obs_depth=int(doc.get("observation", {}).get("depth", 4)),
        obs_max_len=int(doc.get("observation", {}).get("max_length", 20)),
        horizon=float(doc.get("horizon", 5.0)),
        snapshot_times=tuple(float(t) for t in doc.get("snapshot_times", [])),
        n_list=tuple(int(n) for n in doc.get("n_list", [10, 100])),
        n_seeds=int(doc.get("n_seeds", 10)),
        base_seed=int(doc.get("base_seed", 2024)),
        ode_dt=float(doc.get("ode_dt", 0.01)),
        leak_tol=float(doc.get("leak_tol", 1e-4)),
        dimension_cap=int(doc.get("dimension_cap", 2_000_000)),
        event_budget=int(doc.get("event_budget", 50_000_000)),
        max_swap_rate=max_swap,
        max_degree=max_degree,
        max_arrival_rate=max_arrival,
        max_hazard=max_hazard,
        picard=picard,
        _services=services,
        _service_default=service_default,
        _disciplines=disciplines,
        _discipline_default=discipline_default,
        raw=doc,
    )
    return cfg


def _rows(arrivals: dict, graph: Graph) -> dict:
    rows = {v: 0.0 for v in range(graph.n_nodes)}
    for (_, v, _), r in arrivals.items():
        rows[v] += r
    return rows


def derive_seed(*parts) -> int:
    """Stable 63-bit seed from arbitrary labeled parts (hash-randomization proof)."""
    import hashlib

    blob = "\x1f".join(repr(p) for p in parts).encode()
    return int.from_bytes(hashlib.sha256(blob).digest()[:8], "big") >> 1
