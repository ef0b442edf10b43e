"""Exact event-driven simulator of the N-fold mean-field network.

The node set is the base graph crossed with copy indices 1..N.  Three event
streams compete: external arrivals (rate per copy from the arrival table),
service completions (scheduled through sampled total requirements), and
server swaps across base edges at rate beta/N per copy pair, aggregated to
N*beta per edge with a uniformly chosen pair.  A swap exchanges the two
queues verbatim, ages included.

One simulator instance is strictly single-threaded and, for a fixed
(config, N, seed), produces a bit-identical event trace.  Ages are advanced
lazily: only the in-service customer of a queue accrues age, so each server
keeps the clock value at which that age was last materialized.

Service requirements are redrawn from the law conditioned on the attained
age whenever the governing law can change (swap onto a different node,
resume after preemption); the age is the entire memory of the state, so this
is exact for every supported law family.
"""

from __future__ import annotations

import heapq
import math
import random
from bisect import bisect_left
from collections import Counter
from dataclasses import dataclass, field

from . import queue_core as qc
from .config import ExperimentConfig
from .errors import EventBudgetExceeded, InconsistentEvent, InvalidConfig
from .queue_core import Customer, QueueState

ARRIVAL = "arrival"
COMPLETION = "completion"
SWAP = "swap"


@dataclass(frozen=True)
class Event:
    kind: str
    time: float
    seq: int
    klass: str | None = None
    node: int | None = None
    dest: int | None = None
    copy: int | None = None
    node2: int | None = None
    copy2: int | None = None


class _Server:
    __slots__ = ("customers", "serving", "mark", "token")

    def __init__(self):
        self.customers = []     # list[Customer]
        self.serving = None     # index into customers
        self.mark = 0.0         # clock when the serving customer's age was exact
        self.token = 0          # invalidates stale heap entries


@dataclass
class EmpiricalMeasure:
    """Atomic measure at one base node: the N queue states, weight 1/N each."""

    node: int
    atoms: list

    @property
    def weight(self) -> float:
        return 1.0 / len(self.atoms)

    def descriptor_distribution(self, depth: int, max_len: int) -> dict:
        out = Counter(descriptor(q.word(), depth, max_len) for q in self.atoms)
        w = self.weight
        return {k: c * w for k, c in out.items()}


def descriptor(word, depth: int, max_len: int):
    """Truncated queue descriptor: length capped at ``max_len``, first
    ``depth`` letters kept."""
    return (min(len(word), max_len), word[:depth])


class NetworkState:
    """Full simulator state; mutated in place by :func:`apply_event`."""

    def __init__(self, cfg: ExperimentConfig, n_copies: int, seed: int):
        self.n = n_copies
        self.clock = 0.0
        self.rng = random.Random(seed)
        self.seq = 0
        self.servers = [[_Server() for _ in range(n_copies)]
                        for _ in range(cfg.graph.n_nodes)]
        self.heap = []          # (time, seq, node, copy, token)
        self.counts = Counter() # event totals by kind plus exits/transits
        self.in_system = 0
        self.trace = None       # set to a list to record (time, kind, ...) tuples

        items = sorted(cfg.arrivals.items())
        self._arr_items = [k for k, _ in items]
        self._arr_cum = []
        acc = 0.0
        for _, r in items:
            acc += r * n_copies
            self._arr_cum.append(acc)
        self._arr_total = acc

        edges = list(cfg.graph.edges)
        self._swap_edges = edges
        self._swap_cum = []
        acc = 0.0
        for e in edges:
            acc += cfg.graph.swap_rates[e] * n_copies
            self._swap_cum.append(acc)
        self._swap_total = acc

        self._next_arrival = None
        self._next_swap = None

        # per-node queue-length occupancy, time-weighted lazily
        self._len_counts = [Counter({0: n_copies}) for _ in range(cfg.graph.n_nodes)]
        self._len_acc = [Counter() for _ in range(cfg.graph.n_nodes)]
        self._len_mark = [0.0] * cfg.graph.n_nodes

    # -- deterministic scheduling ---------------------------------------------

    def _next_seq(self) -> int:
        self.seq += 1
        return self.seq

    def _draw_arrival(self):
        if self._arr_total <= 0:
            self._next_arrival = None
            return
        t = self.clock + self.rng.expovariate(self._arr_total)
        i = bisect_left(self._arr_cum, self.rng.random() * self._arr_total)
        i = min(i, len(self._arr_items) - 1)
        klass, v, dest = self._arr_items[i]
        k = self.rng.randrange(self.n)
        self._next_arrival = Event(ARRIVAL, t, self._next_seq(),
                                   klass=klass, node=v, dest=dest, copy=k)

    def _draw_swap(self):
        if self._swap_total <= 0:
            self._next_swap = None
            return
        t = self.clock + self.rng.expovariate(self._swap_total)
        i = bisect_left(self._swap_cum, self.rng.random() * self._swap_total)
        i = min(i, len(self._swap_edges) - 1)
        u, w = self._swap_edges[i]
        ku = self.rng.randrange(self.n)
        kw = self.rng.randrange(self.n)
        self._next_swap = Event(SWAP, t, self._next_seq(),
                                node=u, copy=ku, node2=w, copy2=kw)

    # -- age bookkeeping --------------------------------------------------------

    def _materialize(self, server: _Server):
        if server.serving is not None:
            c = server.customers[server.serving]
            c.age += self.clock - server.mark
        server.mark = self.clock

    def _touch_len(self, v: int):
        dt = self.clock - self._len_mark[v]
        if dt > 0.0:
            acc = self._len_acc[v]
            for l, c in self._len_counts[v].items():
                acc[l] += c * dt
        self._len_mark[v] = self.clock

    def _set_len(self, v: int, old: int, new: int):
        lc = self._len_counts[v]
        lc[old] -= 1
        if lc[old] == 0:
            del lc[old]
        lc[new] += 1

    def flush_occupancy(self):
        for v in range(len(self.servers)):
            self._touch_len(v)

    # -- queue views ------------------------------------------------------------

    def queue_state(self, v: int, k: int) -> QueueState:
        """Materialized copy of the queue at (v, k)."""
        srv = self.servers[v][k]
        out = [c.copy() for c in srv.customers]
        if srv.serving is not None:
            out[srv.serving].age += self.clock - srv.mark
        return QueueState(out, v)


def init_network(cfg: ExperimentConfig, n_copies: int, init=None,
                 seed: int = 0) -> NetworkState:
    """Fresh network at clock 0 with N i.i.d. initial queues per node.

    ``init`` is an optional per-node sampler ``init(node_index, rng) ->
    list[Customer]``; the default starts every queue empty.
    """
    if n_copies < 1:
        raise InvalidConfig(f"copy count must be >= 1, got {n_copies}")
    s = NetworkState(cfg, n_copies, seed)
    for v in range(cfg.graph.n_nodes):
        disc = cfg.discipline(v)
        for k in range(n_copies):
            srv = s.servers[v][k]
            if init is not None:
                srv.customers = [c.copy() for c in init(v, s.rng)]
                s.in_system += len(srv.customers)
                if srv.customers:
                    s._set_len(v, 0, len(srv.customers))
                    _start_service(s, cfg, v, k, disc)
    s._draw_arrival()
    s._draw_swap()
    return s


def _start_service(s: NetworkState, cfg: ExperimentConfig, v: int, k: int, disc):
    """(Re)anchor the server at (v, k) on the discipline's chosen customer."""
    srv = s.servers[v][k]
    if not srv.customers:
        srv.serving = None
        srv.token += 1
        return
    i = qc.select_in_service(QueueState(srv.customers, v), disc)
    c = srv.customers[i]
    srv.serving = i
    srv.mark = s.clock
    srv.token += 1
    law = cfg.service_law(c.klass, v)
    c.requirement = qc.sample_remaining(law, c.age, s.rng)
    t_done = s.clock + (c.requirement - c.age)
    heapq.heappush(s.heap, (t_done, s._next_seq(), v, k, srv.token))


def _peek_completion(s: NetworkState):
    while s.heap:
        t, seq, v, k, token = s.heap[0]
        if s.servers[v][k].token == token:
            return t, seq, v, k
        heapq.heappop(s.heap)
    return None


def next_event(s: NetworkState, cfg: ExperimentConfig):
    """Soonest pending event as (time increment, Event); (inf, None) if none.

    Pure peek: repeated calls without an intervening apply return the same
    event.  Exact ties resolve by scheduling order.
    """
    best = None
    for ev in (s._next_arrival, s._next_swap):
        if ev is not None and (best is None or (ev.time, ev.seq) < (best.time, best.seq)):
            best = ev
    comp = _peek_completion(s)
    if comp is not None:
        t, seq, v, k = comp
        if best is None or (t, seq) < (best.time, best.seq):
            best = Event(COMPLETION, t, seq, node=v, copy=k)
    if best is None:
        return math.inf, None
    return best.time - s.clock, best


def apply_event(s: NetworkState, e: Event, cfg: ExperimentConfig) -> NetworkState:
    """Advance the clock to the event and apply it; mutates and returns ``s``."""
    _, expect = next_event(s, cfg)
    if expect is None or expect.seq != e.seq or expect.kind != e.kind:
        raise InconsistentEvent(f"event {e} is not the pending event {expect}")
    s.clock = e.time
    if e.kind == ARRIVAL:
        _apply_arrival(s, cfg, e.klass, e.node, e.dest, e.copy)
        s._draw_arrival()
    elif e.kind == SWAP:
        _apply_swap(s, cfg, e.node, e.copy, e.node2, e.copy2)
        s._draw_swap()
    elif e.kind == COMPLETION:
        heapq.heappop(s.heap)
        _apply_completion(s, cfg, e.node, e.copy)
    else:
        raise InconsistentEvent(f"unknown event kind {e.kind!r}")
    s.counts[e.kind] += 1
    if s.trace is not None:
        s.trace.append((e.time, e.kind, e.klass, e.node, e.copy, e.dest,
                        e.node2, e.copy2))
    return s


def _admit(s: NetworkState, cfg: ExperimentConfig, v: int, k: int, c: Customer):
    """Join customer ``c`` to the queue at (v, k), preempting if the
    discipline says so."""
    srv = s.servers[v][k]
    disc = cfg.discipline(v)
    s._touch_len(v)
    s._set_len(v, len(srv.customers), len(srv.customers) + 1)
    srv.customers.append(c)
    s.in_system += 1
    if srv.serving is None:
        _start_service(s, cfg, v, k, disc)
        return
    preemptable = disc.kind == qc.LIFO_PREEMPT or (
        disc.kind == qc.STATIC_PRIORITY and disc.preemptive)
    if not preemptable:
        return
    s._materialize(srv)
    cur = srv.customers[srv.serving]
    i = qc.select_in_service(QueueState(srv.customers, v), disc)
    if srv.customers[i] is not cur:
        cur.requirement = None  # preempt-resume: age kept, demand redrawn later
        _start_service(s, cfg, v, k, disc)


def _apply_arrival(s, cfg, klass, v, dest, k):
    _admit(s, cfg, v, k, Customer(klass, dest, 0.0))
    s.counts["entries"] += 1


def _apply_completion(s, cfg, v, k):
    srv = s.servers[v][k]
    s._materialize(srv)
    served = srv.customers.pop(srv.serving)
    srv.serving = None
    s._touch_len(v)
    s._set_len(v, len(srv.customers) + 1, len(srv.customers))
    s.in_system -= 1
    _start_service(s, cfg, v, k, cfg.discipline(v))

    if cfg.graph.dist(v, served.dest) <= 1:
        s.counts["exits"] += 1
        return
    cands = qc.routing_candidates(cfg.graph, v, served.dest)
    w = cands[s.rng.randrange(len(cands))] if len(cands) > 1 else cands[0]
    k2 = s.rng.randrange(s.n)
    klass2 = qc.class_transition(cfg.transitions, served.klass, v, w)
    s.counts["transits"] += 1
    s.in_system -= 1  # _admit re-counts the moved customer
    _admit(s, cfg, w, k2, Customer(klass2, served.dest, 0.0))


def _apply_swap(s, cfg, u, ku, w, kw):
    a, b = s.servers[u][ku], s.servers[w][kw]
    s._materialize(a)
    s._materialize(b)
    s._touch_len(u)
    s._touch_len(w)
    la, lb = len(a.customers), len(b.customers)
    if la != lb:
        s._set_len(u, la, lb)
        s._set_len(w, lb, la)
    a.customers, b.customers = b.customers, a.customers
    # each queue is now governed by its new node's discipline and laws
    for srv, node, copy_idx in ((a, u, ku), (b, w, kw)):
        srv.serving = None
        _start_service(s, cfg, node, copy_idx, cfg.discipline(node))


@dataclass
class Snapshot:
    time: float
    histograms: list          # per node: {descriptor: probability}
    in_system: int
    counts: dict
    full_states: list | None = None  # per node: list[QueueState], if requested


@dataclass
class Trajectory:
    n_copies: int
    snapshots: list
    occupancy: list = field(default_factory=list)  # per node: {length: time share}
    elapsed: float = 0.0


def empirical_measure(s: NetworkState, v: int) -> EmpiricalMeasure:
    """The N atoms at node v, each with weight 1/N and materialized ages."""
    return EmpiricalMeasure(v, [s.queue_state(v, k) for k in range(s.n)])


def _snapshot(s: NetworkState, cfg: ExperimentConfig, keep_full: bool) -> Snapshot:
    hists = []
    fulls = [] if keep_full else None
    for v in range(cfg.graph.n_nodes):
        em = empirical_measure(s, v)
        hists.append(em.descriptor_distribution(cfg.obs_depth, cfg.obs_max_len))
        if keep_full:
            fulls.append(em.atoms)
    return Snapshot(s.clock, hists, s.in_system, dict(s.counts), fulls)


def run(s: NetworkState, cfg: ExperimentConfig, horizon: float,
        snapshot_times=(), keep_full: bool = False) -> Trajectory:
    """Drive the network to ``horizon``, snapshotting the empirical measures.

    A snapshot is always taken at the initial clock; further snapshots happen
    at the requested times (capped by the horizon).  Raises
    EventBudgetExceeded after ``cfg.event_budget`` events.
    """
    if horizon < 0:
        raise InvalidConfig(f"horizon must be >= 0, got {horizon}")
    end = s.clock + horizon
    marks = sorted({t for t in snapshot_times if s.clock < t <= end})
    want = set(marks)
    if not marks or marks[-1] < end:
        marks.append(end)
    traj = Trajectory(s.n, [_snapshot(s, cfg, keep_full)])
    budget = cfg.event_budget
    n_events = 0
    for t_mark in marks:
        while True:
            dt, ev = next_event(s, cfg)
            if ev is None or ev.time > t_mark:
                break
            apply_event(s, ev, cfg)
            n_events += 1
            if n_events > budget:
                raise EventBudgetExceeded(
                    f"{n_events} events before reaching t={t_mark}; "
                    "the system may be unstable")
        s.clock = t_mark
        if t_mark in want:
            traj.snapshots.append(_snapshot(s, cfg, keep_full))
    s.flush_occupancy()
    elapsed = s.clock
    traj.elapsed = elapsed
    for v in range(cfg.graph.n_nodes):
        total = elapsed * s.n
        occ = ({l: t / total for l, t in sorted(s._len_acc[v].items())}
               if total > 0 else {})
        traj.occupancy.append(occ)
    return traj
