"""Fixed-point solver for the limiting process with general service laws.

The unknown is the collection of internal (transit) arrival-rate functions on
a short window, represented as piecewise-linear values on a uniform grid.
One application of the solution operator simulates, per node, an ensemble of
independent replica queues driven by inhomogeneous Poisson arrivals with the
candidate rates (thinning against a per-cell envelope), general service
laws, and swap resampling: at rate beta the replica's whole state is
replaced by a uniform draw from the neighbor ensemble frozen at the current
grid cell's opening knot.  Departures are binned per (edge, class,
destination) and Lipschitz-projected, giving the realized departure-rate
functions; iterating to the fixed point yields the window's arrival rates
together with an ensemble that samples the evolving law.

Iterations reuse one seed per window (common random numbers), so the
empirical operator is a deterministic map and successive-iterate distances
measure its contraction directly; the Monte Carlo scale of the estimates is
still reported through batch means over replica sub-ensembles.
"""

from __future__ import annotations

import math
import random
from collections import Counter
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linprog
from scipy.sparse import coo_matrix

from . import queue_core as qc
from .config import ExperimentConfig, derive_seed
from .errors import (
    EnsembleTooSmall,
    GridMismatch,
    InvalidConfig,
    NoContraction,
    RateBoundExceeded,
)
from .finite_network import descriptor
from .queue_core import Customer, QueueState


@dataclass
class RateGrid:
    """Piecewise-linear rate functions on a uniform knot grid.

    ``series`` maps (source node, target node, class, destination) to the
    knot values of the corresponding arrival-rate function.  Entries whose
    target equals the destination are final-hop (network-leaving) flows; they
    are tracked like the others but never drive any queue.
    """

    knots: np.ndarray
    series: dict = field(default_factory=dict)

    @property
    def step(self) -> float:
        return float(self.knots[1] - self.knots[0])

    @property
    def n_cells(self) -> int:
        return len(self.knots) - 1

    def copy(self) -> "RateGrid":
        return RateGrid(self.knots.copy(),
                        {k: v.copy() for k, v in self.series.items()})

    def total_mass(self) -> float:
        """Integral of all series over the window (trapezoid, exact for PL)."""
        dt = self.step
        return float(sum((v[:-1] + v[1:]).sum() * dt / 2
                         for v in self.series.values()))


def zero_grid(t0: float, window: float, grid_dt: float) -> RateGrid:
    m = max(1, int(round(window / grid_dt)))
    return RateGrid(t0 + np.linspace(0.0, window, m + 1))


def validate_grid(grid: RateGrid, lipschitz: float, bound: float):
    dt = grid.step
    for key, vals in grid.series.items():
        if vals.min() < -1e-12:
            raise RateBoundExceeded(f"negative rate in series {key}")
        if vals.max() > bound * (1 + 1e-9):
            raise RateBoundExceeded(
                f"rate {vals.max():.4g} in series {key} exceeds bound {bound:.4g}")
        slopes = np.abs(np.diff(vals)) / dt
        if slopes.size and slopes.max() > lipschitz * (1 + 1e-6):
            raise RateBoundExceeded(
                f"slope {slopes.max():.4g} in series {key} exceeds the "
                f"Lipschitz constant {lipschitz:.4g}")


def rate_distance(a: RateGrid, b: RateGrid) -> float:
    """Exact L1 distance: sum over series of the integral of |a - b|."""
    if len(a.knots) != len(b.knots) or not np.allclose(a.knots, b.knots):
        raise GridMismatch("rate grids use different knots")
    dt = a.step
    total = 0.0
    zeros = np.zeros(len(a.knots))
    for key in set(a.series) | set(b.series):
        d = a.series.get(key, zeros) - b.series.get(key, zeros)
        lo, hi = d[:-1], d[1:]
        same = lo * hi >= 0.0
        seg = np.where(same, 0.5 * (np.abs(lo) + np.abs(hi)) * dt,
                       0.5 * (lo * lo + hi * hi)
                       / np.maximum(np.abs(lo) + np.abs(hi), 1e-300) * dt)
        total += float(seg.sum())
    return total


def lipschitz_project(raw: RateGrid, lipschitz: float,
                      bound: float = float("inf")) -> RateGrid:
    """L1-nearest grid function with slopes in [-L, L] and values in [0, bound].

    Solved exactly as a small linear program per series; idempotent on
    already-feasible inputs.
    """
    out = RateGrid(raw.knots.copy())
    c = lipschitz * raw.step
    for key, y in raw.series.items():
        out.series[key] = _project_series(np.asarray(y, dtype=float), c, bound)
    return out


def _project_series(y: np.ndarray, c: float, bound: float) -> np.ndarray:
    n = len(y)
    if n == 1:
        return np.clip(y, 0.0, bound)
    # variables: x (n), t (n); minimize sum t with |x - y| <= t, |dx| <= c
    cost = np.concatenate([np.zeros(n), np.ones(n)])
    rows, cols, vals, rhs = [], [], [], []

    def add(entries, b):
        r = len(rhs)
        for col, val in entries:
            rows.append(r)
            cols.append(col)
            vals.append(val)
        rhs.append(b)

    for i in range(n):
        add([(i, 1.0), (n + i, -1.0)], y[i])     # x - t <= y
        add([(i, -1.0), (n + i, -1.0)], -y[i])   # -x - t <= -y
    for i in range(n - 1):
        add([(i + 1, 1.0), (i, -1.0)], c)        # x[i+1] - x[i] <= c
        add([(i, 1.0), (i + 1, -1.0)], c)        # x[i] - x[i+1] <= c
    a_ub = coo_matrix((vals, (rows, cols)), shape=(len(rhs), 2 * n))
    ub = bound if math.isfinite(bound) else None
    res = linprog(cost, A_ub=a_ub, b_ub=rhs,
                  bounds=[(0.0, ub)] * n + [(0.0, None)] * n, method="highs")
    if not res.success:
        raise RateBoundExceeded(f"rate projection failed: {res.message}")
    return np.maximum(res.x[:n], 0.0)


# -- replica ensembles ----------------------------------------------------------


@dataclass
class NodeEnsemble:
    """Per node, R replica queues with full age information, on one clock."""

    clock: float
    queues: list  # queues[v] = list of QueueState

    @property
    def n_replicas(self) -> int:
        return len(self.queues[0]) if self.queues else 0

    def copy(self) -> "NodeEnsemble":
        return NodeEnsemble(self.clock,
                            [[q.copy() for q in qs] for qs in self.queues])

    def descriptor_distribution(self, v: int, depth: int, max_len: int) -> dict:
        out = Counter(descriptor(q.word(), depth, max_len) for q in self.queues[v])
        r = len(self.queues[v])
        return {k: c / r for k, c in out.items()}


def make_ensemble(cfg: ExperimentConfig, n_replicas: int, init=None,
                  seed: int = 0) -> NodeEnsemble:
    """Sample R i.i.d. initial queues per node (empty by default)."""
    rng = random.Random(seed)
    queues = []
    for v in range(cfg.graph.n_nodes):
        qs = []
        for _ in range(n_replicas):
            custs = [c.copy() for c in init(v, rng)] if init is not None else []
            qs.append(QueueState(custs, v))
        queues.append(qs)
    return NodeEnsemble(0.0, queues)


class _Replica:
    __slots__ = ("queue", "serving")

    def __init__(self, queue: QueueState):
        self.queue = queue
        self.serving = None


def _anchor(rep: _Replica, v: int, cfg: ExperimentConfig, rng):
    """Select the in-service customer and draw its conditional requirement."""
    custs = rep.queue.customers
    if not custs:
        rep.serving = None
        return
    i = qc.select_in_service(rep.queue, cfg.discipline(v))
    c = custs[i]
    rep.serving = i
    law = cfg.service_law(c.klass, v)
    c.requirement = qc.sample_remaining(law, c.age, rng)


def _admit(rep: _Replica, v: int, cfg: ExperimentConfig, c: Customer, rng):
    rep.queue.customers.append(c)
    disc = cfg.discipline(v)
    if rep.serving is None:
        _anchor(rep, v, cfg, rng)
        return
    preemptable = disc.kind == qc.LIFO_PREEMPT or (
        disc.kind == qc.STATIC_PRIORITY and disc.preemptive)
    if not preemptable:
        return
    cur = rep.queue.customers[rep.serving]
    i = qc.select_in_service(rep.queue, disc)
    if rep.queue.customers[i] is not cur:
        cur.requirement = None
        _anchor(rep, v, cfg, rng)


def _external_streams(cfg: ExperimentConfig, v: int):
    return [(k, dest, r) for (k, vv, dest), r in sorted(cfg.arrivals.items())
            if vv == v and r > 0.0]


def default_rate_bound(cfg: ExperimentConfig) -> float:
    """Largest possible arrival intensity into a node: external row total
    plus one hazard bound per neighbor."""
    if cfg.picard.rate_bound is not None:
        return float(cfg.picard.rate_bound)
    rows = cfg.arrival_rate_rows()
    c_ext = max(rows.values()) if rows else 0.0
    return c_ext + cfg.graph.max_degree() * cfg.hazard_bound()


def default_lipschitz(cfg: ExperimentConfig) -> float:
    if cfg.picard.lipschitz is not None:
        return float(cfg.picard.lipschitz)
    rows = cfg.arrival_rate_rows()
    c_ext = max(rows.values()) if rows else 0.0
    beta_tot = max((cfg.total_swap_rate(v) for v in range(cfg.graph.n_nodes)),
                   default=0.0)
    return 2.0 * cfg.hazard_bound() * (c_ext + beta_tot)


@dataclass
class WindowResult:
    departures: RateGrid
    raw_departures: RateGrid
    ensemble: NodeEnsemble
    noise_floor: float


def simulate_window(ensemble: NodeEnsemble, lam: RateGrid,
                    cfg: ExperimentConfig, seed: int) -> WindowResult:
    """One application of the solution operator over the grid's window.

    Returns the Lipschitz-projected departure rates, the raw binned rates,
    the final ensemble, and a batch-means estimate of the Monte Carlo scale
    of the departure-rate error (summed over series, integrated in time).
    """
    g = cfg.graph
    n_rep = ensemble.n_replicas
    if n_rep < cfg.picard.min_replicas:
        raise EnsembleTooSmall(f"{n_rep} replicas < configured floor "
                               f"{cfg.picard.min_replicas}")
    rng = random.Random(seed)
    knots = lam.knots
    m = lam.n_cells
    dtg = lam.step
    n_batches = min(cfg.picard.batches, n_rep)
    batch_of = [min(r * n_batches // n_rep, n_batches - 1) for r in range(n_rep)]

    reps = []
    for v in range(g.n_nodes):
        row = []
        for q in ensemble.queues[v]:
            rep = _Replica(QueueState([c.copy() for c in q.customers], v))
            _anchor(rep, v, cfg, rng)
            row.append(rep)
        reps.append(row)

    counts = {}
    batch_counts = {}

    def record(key, t, batch):
        j = min(int((t - knots[0]) / dtg), m - 1)
        if key not in counts:
            counts[key] = np.zeros(m)
            batch_counts[key] = np.zeros((n_batches, m))
        counts[key][j] += 1.0
        batch_counts[key][batch, j] += 1.0

    ext = [_external_streams(cfg, v) for v in range(g.n_nodes)]
    transit_keys = [[key for key in sorted(lam.series)
                     if key[1] == v and key[3] != v] for v in range(g.n_nodes)]
    swap_rates = [[(w, g.swap_rate(v, w)) for w in g.neighbors[v]
                   if g.swap_rate(v, w) > 0.0] for v in range(g.n_nodes)]
    swap_tot = [sum(r for _, r in sr) for sr in swap_rates]

    for cell in range(m):
        ta, tb = float(knots[cell]), float(knots[cell + 1])
        span = tb - ta

        # swap draws first, so the needed source replicas can be frozen at ta
        swap_events = [[() for _ in range(n_rep)] for _ in range(g.n_nodes)]
        snapshots = {}
        for v in range(g.n_nodes):
            if swap_tot[v] <= 0.0:
                continue
            for r_i in range(n_rep):
                k = _poisson(rng, swap_tot[v] * span)
                if k == 0:
                    continue
                evs = []
                for _ in range(k):
                    t = ta + rng.random() * span
                    u = rng.random() * swap_tot[v]
                    acc = 0.0
                    src_node = swap_rates[v][-1][0]
                    for w, rate in swap_rates[v]:
                        acc += rate
                        if u <= acc:
                            src_node = w
                            break
                    src_idx = rng.randrange(n_rep)
                    evs.append((t, src_node, src_idx))
                    snapshots[(src_node, src_idx)] = None
                evs.sort()
                swap_events[v][r_i] = tuple(evs)
        for key in snapshots:
            sv, si = key
            snapshots[key] = [c.copy() for c in reps[sv][si].queue.customers]

        for v in range(g.n_nodes):
            ext_v = ext[v]
            ext_tot = sum(r for _, _, r in ext_v)
            keys = transit_keys[v]
            caps = [max(lam.series[key][cell], lam.series[key][cell + 1])
                    for key in keys]
            envelope = ext_tot + sum(caps)
            cell_vals = [(lam.series[key][cell], lam.series[key][cell + 1])
                         for key in keys]
            for r_i in range(n_rep):
                rep = reps[v][r_i]
                events = []
                if envelope > 0.0:
                    k = _poisson(rng, envelope * span)
                    events.extend((ta + rng.random() * span, 0, 0, 0)
                                  for _ in range(k))
                events.extend((t, 1, sn, si)
                              for t, sn, si in swap_events[v][r_i])
                events.sort()
                _run_replica(rep, v, events, ta, tb, span, cfg, rng,
                             ext_v, ext_tot, keys, cell_vals, envelope,
                             snapshots, record, batch_of[r_i])

    final = NodeEnsemble(float(knots[-1]),
                         [[rep.queue for rep in row] for row in reps])

    raw = RateGrid(knots.copy())
    denom = n_rep * dtg
    for key, c in sorted(counts.items()):
        vals = np.empty(m + 1)
        vals[0] = c[0] / denom
        vals[-1] = c[-1] / denom
        if m > 1:
            vals[1:-1] = (c[:-1] + c[1:]) / (2 * denom)
        raw.series[key] = vals

    floor = 0.0
    for bc in batch_counts.values():
        means = bc * (n_batches / denom)          # per-batch rate estimates
        se = means.std(axis=0, ddof=1) / math.sqrt(n_batches)
        floor += float(se.sum()) * dtg

    projected = lipschitz_project(raw, default_lipschitz(cfg),
                                  default_rate_bound(cfg))
    return WindowResult(projected, raw, final, floor)


def _run_replica(rep, v, events, ta, tb, span, cfg, rng, ext_v, ext_tot, keys,
                 cell_vals, envelope, snapshots, record, batch):
    t = ta
    ei = 0
    n_ev = len(events)
    while True:
        if rep.serving is not None:
            c = rep.queue.customers[rep.serving]
            t_comp = t + (c.requirement - c.age)
        else:
            t_comp = math.inf
        t_next = events[ei][0] if ei < n_ev else tb
        if t_comp <= t_next:
            c.age = c.requirement
            t = t_comp
            _complete(rep, v, t, cfg, rng, record, batch)
            continue
        if t_next >= tb:
            if rep.serving is not None:
                rep.queue.customers[rep.serving].age += tb - t
            return
        if rep.serving is not None:
            rep.queue.customers[rep.serving].age += t_next - t
        t = t_next
        ev = events[ei]
        ei += 1
        if ev[1] == 0:
            frac = (t - ta) / span if span > 0.0 else 0.0
            vals = [a * (1.0 - frac) + b * frac for a, b in cell_vals]
            total = ext_tot + sum(vals)
            u = rng.random() * envelope
            if u >= total:
                continue
            acc = 0.0
            admitted = False
            for k, dest, r in ext_v:
                acc += r
                if u <= acc:
                    _admit(rep, v, cfg, Customer(k, dest, 0.0), rng)
                    admitted = True
                    break
            if not admitted:
                for key, val in zip(keys, vals):
                    acc += val
                    if u <= acc:
                        _admit(rep, v, cfg, Customer(key[2], key[3], 0.0), rng)
                        break
                else:
                    _admit(rep, v, cfg,
                           Customer(keys[-1][2], keys[-1][3], 0.0), rng)
        else:
            snap = snapshots[(ev[2], ev[3])]
            rep.queue.customers = [c2.copy() for c2 in snap]
            for c2 in rep.queue.customers:
                c2.requirement = None
            _anchor(rep, v, cfg, rng)


def _complete(rep, v, t, cfg, rng, record, batch):
    served = rep.queue.customers.pop(rep.serving)
    rep.serving = None
    g = cfg.graph
    d = g.dist(v, served.dest)
    if d == 0:
        record((v, v, served.klass, served.dest), t, batch)
    elif d == 1:
        k2 = qc.class_transition(cfg.transitions, served.klass, v, served.dest)
        record((v, served.dest, k2, served.dest), t, batch)
    else:
        cands = qc.routing_candidates(g, v, served.dest)
        w = cands[rng.randrange(len(cands))] if len(cands) > 1 else cands[0]
        k2 = qc.class_transition(cfg.transitions, served.klass, v, w)
        record((v, w, k2, served.dest), t, batch)
    _anchor(rep, v, cfg, rng)


def _poisson(rng, mean: float) -> int:
    if mean <= 0.0:
        return 0
    # inversion by sequential search; window cells keep the mean small
    l = math.exp(-mean)
    k, p = 0, 1.0
    while True:
        p *= rng.random()
        if p <= l:
            return k
        k += 1


# -- fixed-point iteration --------------------------------------------------------


def departure_rates(init, lam: RateGrid, cfg: ExperimentConfig,
                    n_replicas: int, seed: int) -> RateGrid:
    """The solution operator: candidate arrival rates in, departure rates out.

    ``init`` is a per-node initial sampler ``init(node, rng) ->
    list[Customer]`` (None for all-empty), or an existing NodeEnsemble.
    """
    validate_grid(lam, default_lipschitz(cfg), default_rate_bound(cfg))
    if isinstance(init, NodeEnsemble):
        ensemble = init
    else:
        ensemble = make_ensemble(cfg, n_replicas, init,
                                 derive_seed(seed, "ensemble-init"))
    return simulate_window(ensemble, lam, cfg,
                           derive_seed(seed, "window", float(lam.knots[0]))
                           ).departures


@dataclass
class PicardResult:
    fixed_point: RateGrid
    ensemble: NodeEnsemble
    distances: list
    noise_floor: float
    iterations: int
    residual: float
    t0: float
    window: float


def picard_solve(init, window: float, cfg: ExperimentConfig, seed: int,
                 n_replicas: int | None = None, tol: float | None = None,
                 max_iter: int | None = None, t0: float = 0.0) -> PicardResult:
    """Iterate the solution operator from the zero grid to its fixed point.

    The window must be short enough for contraction: hazard-bound * window
    and swap-rate * window are checked against the configured smallness.
    Distance ratios persistently at or above 1 while above the Monte Carlo
    noise floor raise NoContraction instead of returning garbage.
    """
    p = cfg.picard
    n_replicas = p.replicas if n_replicas is None else n_replicas
    tol = p.tol if tol is None else tol
    max_iter = p.max_iter if max_iter is None else max_iter
    fb = cfg.hazard_bound() * window
    bb = max((cfg.total_swap_rate(v) for v in range(cfg.graph.n_nodes)),
             default=0.0) * window
    if fb > p.smallness or bb > p.smallness:
        raise InvalidConfig(
            f"window too long for the contraction regime: hazard*window={fb:.3g}, "
            f"swap*window={bb:.3g}, allowed {p.smallness}")

    if isinstance(init, NodeEnsemble):
        base = init
        t0 = init.clock
    else:
        base = make_ensemble(cfg, n_replicas, init,
                             derive_seed(seed, "ensemble-init"))
        base.clock = t0
    window_seed = derive_seed(seed, "window", round(t0, 9))

    lam = zero_grid(t0, window, p.grid_dt)
    distances = []
    floor = 0.0
    result = None
    bad_streak = 0
    for it in range(1, max_iter + 1):
        result = simulate_window(base.copy(), lam, cfg, window_seed)
        b = result.departures
        floor = result.noise_floor
        d = rate_distance(lam, b)
        distances.append(d)
        lam = b
        if d < tol:
            break
        if len(distances) >= 2 and distances[-2] > floor:
            if d >= distances[-2]:
                bad_streak += 1
                if bad_streak >= 3:
                    raise NoContraction(
                        f"distance ratio >= 1 for {bad_streak} consecutive "
                        f"iterations above the noise floor {floor:.3g}; "
                        "shorten the window or add replicas")
            else:
                bad_streak = 0
    return PicardResult(fixed_point=lam, ensemble=result.ensemble,
                        distances=distances, noise_floor=floor,
                        iterations=len(distances), residual=distances[-1],
                        t0=t0, window=window)


def windowed_solve(init, horizon: float, window: float, cfg: ExperimentConfig,
                   seed: int, n_replicas: int | None = None,
                   tol: float | None = None) -> list:
    """Chain picard_solve over consecutive windows covering the horizon.

    The horizon must be an integer number of windows; each window starts from
    the previous window's final ensemble.
    """
    n_win = int(round(horizon / window))
    if abs(n_win * window - horizon) > 1e-9 or n_win < 1:
        raise InvalidConfig(f"horizon {horizon} is not a multiple of the "
                            f"window {window}")
    results = []
    state = init
    for j in range(n_win):
        try:
            res = picard_solve(state, window, cfg, seed,
                               n_replicas=n_replicas, tol=tol, t0=j * window)
        except NoContraction as exc:
            raise NoContraction(f"window {j} [{j * window}, {(j + 1) * window}]: "
                                f"{exc}") from exc
        results.append(res)
        state = res.ensemble
    return results
