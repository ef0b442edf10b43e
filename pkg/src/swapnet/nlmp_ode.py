"""Deterministic solver of the mean-field evolution for exponential services.

With exponential service laws the attained-service coordinate carries no
information (constant hazard), so each node's law is a probability vector
over queue words of bounded length.  Words are enumerated length-
lexicographically over the full (class x destination) letter alphabet; index
0 is the empty word.  Mass that would flow into words longer than the
truncation depth is diverted into an explicit per-node leak accumulator, so
the tracked-mass-plus-leak total is conserved exactly.

The nonlinearity enters only through the transit arrival rates, which are
linear functionals of the current measure; the drift is therefore quadratic
and the linearized (sensitivity) flow needs just one extra bilinear term.
Integration is classical fixed-step fourth-order Runge-Kutta.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import queue_core as qc
from .config import ExperimentConfig
from .errors import InvalidConfig, MassLeakExceeded, TruncationTooLarge
from .topology import routing_kernel_value


@dataclass(frozen=True)
class StateIndex:
    """Bijective enumeration of queue words of length <= L.

    ``letters`` are (class symbol, destination index) pairs in configuration
    order; a word maps to its index arithmetically (lengths first, then
    lexicographic), so both directions are O(length).
    """

    letters: tuple
    max_len: int
    offsets: tuple          # offsets[l] = index of the first word of length l
    n_states: int

    @property
    def n_letters(self) -> int:
        return len(self.letters)

    def letter_id(self, letter) -> int:
        return self.letters.index(letter)

    def index_of(self, word) -> int:
        l = len(word)
        if l > self.max_len:
            raise IndexError(f"word of length {l} exceeds truncation {self.max_len}")
        b = self.n_letters
        val = 0
        for letter in word:
            val = val * b + self.letters.index(letter)
        return self.offsets[l] + val

    def word_of(self, idx: int) -> tuple:
        if not 0 <= idx < self.n_states:
            raise IndexError(idx)
        l = 0
        while l + 1 <= self.max_len and self.offsets[l + 1] <= idx:
            l += 1
        val = idx - self.offsets[l]
        b = self.n_letters
        out = []
        for _ in range(l):
            out.append(self.letters[val % b])
            val //= b
        return tuple(reversed(out))


def enumerate_states(cfg: ExperimentConfig, max_len: int) -> StateIndex:
    """Enumerate words over the full class x node alphabet up to ``max_len``."""
    if max_len < 0:
        raise InvalidConfig(f"truncation depth must be >= 0, got {max_len}")
    letters = tuple((k, v) for k in cfg.classes for v in range(cfg.graph.n_nodes))
    b = len(letters)
    offsets = [0]
    for l in range(max_len + 1):
        offsets.append(offsets[-1] + b ** l)
    n_states = offsets[-1]
    if n_states > cfg.dimension_cap:
        raise TruncationTooLarge(
            f"{n_states} words at depth {max_len} exceed the dimension cap "
            f"{cfg.dimension_cap}")
    return StateIndex(letters=letters, max_len=max_len,
                      offsets=tuple(offsets[:-1]) + (n_states,), n_states=n_states)


@dataclass
class TruncatedMeasure:
    """Per-node probability vectors over a StateIndex plus leak mass."""

    vectors: list                  # one float64 array per node
    leak: np.ndarray               # per-node leaked mass
    time: float = 0.0

    def copy(self) -> "TruncatedMeasure":
        return TruncatedMeasure([x.copy() for x in self.vectors],
                                self.leak.copy(), self.time)

    def node_total(self, v: int) -> float:
        return float(self.vectors[v].sum() + self.leak[v])

    def check(self, tol: float = 1e-8):
        for v, x in enumerate(self.vectors):
            if x.min() < -1e-10:
                raise AssertionError(f"negative mass {x.min()} at node {v}")
            if abs(self.node_total(v) - 1.0) > tol:
                raise AssertionError(f"mass {self.node_total(v)} at node {v}")


@dataclass
class SensitivityVector:
    """Signed per-node perturbation vectors; total signed mass is zero."""

    vectors: list
    leak: np.ndarray
    time: float = 0.0

    def copy(self) -> "SensitivityVector":
        return SensitivityVector([x.copy() for x in self.vectors],
                                 self.leak.copy(), self.time)

    def norm_l1(self) -> float:
        return float(sum(np.abs(x).sum() for x in self.vectors)
                     + np.abs(self.leak).sum())


def point_mass_empty(system: "OdeSystem") -> TruncatedMeasure:
    vecs = []
    for _ in range(system.n_nodes):
        x = np.zeros(system.index.n_states)
        x[0] = 1.0
        vecs.append(x)
    return TruncatedMeasure(vecs, np.zeros(system.n_nodes))


class OdeSystem:
    """Compiled drift machinery for one config at one truncation depth."""

    def __init__(self, cfg: ExperimentConfig, max_len: int | None = None):
        self.cfg = cfg
        self.index = enumerate_states(cfg, cfg.truncation if max_len is None
                                      else max_len)
        g = cfg.graph
        self.n_nodes = g.n_nodes
        idx = self.index
        b = idx.n_letters
        L = idx.max_len
        n = idx.n_states
        self._block = [(idx.offsets[l], idx.offsets[l + 1]) for l in range(L + 1)]

        # serving letter and removal target per word, per discipline
        keys = {}
        self._node_disc = []
        for v in range(g.n_nodes):
            d = cfg.discipline(v)
            if d.kind == qc.STATIC_PRIORITY and not d.preemptive:
                raise InvalidConfig(
                    "non-preemptive priority service depends on attained ages and "
                    "is outside the word-enumeration solver; use the fixed-point "
                    "solver instead")
            key = (d.kind, None if d.priorities is None
                   else tuple(sorted(d.priorities.items())))
            self._node_disc.append(key)
            keys.setdefault(key, d)
        self._srv_letter = {}
        self._rm_target = {}
        for key, d in keys.items():
            self._srv_letter[key], self._rm_target[key] = self._compile_removals(d)

        # per-node service rate by serving letter, and routing coefficients
        self._rate_by_letter = np.zeros((g.n_nodes, b))
        for v in range(g.n_nodes):
            for li, (k, dest) in enumerate(idx.letters):
                law = cfg.service_law(k, v)
                if law.family != qc.EXPONENTIAL:
                    raise InvalidConfig(
                        f"word-enumeration solver needs exponential laws; class "
                        f"{k!r} at node {g.names[v]!r} has {law.family}")
                self._rate_by_letter[v, li] = law.rate

        # routes[v2] = list of (v, src letter id, dst letter id, kernel value)
        self._routes = [[] for _ in range(g.n_nodes)]
        for v in range(g.n_nodes):
            for li, (k, dest) in enumerate(idx.letters):
                if g.dist(v, dest) <= 1:
                    continue
                for v2 in g.neighbors[v]:
                    e = routing_kernel_value(g, v, dest, v2)
                    if e > 0.0:
                        k2 = qc.class_transition(cfg.transitions, k, v, v2)
                        l2 = idx.letters.index((k2, dest))
                        self._routes[v2].append((v, li, l2, e))

        self._lam = np.zeros((g.n_nodes, b))
        for (k, v, dest), r in cfg.arrivals.items():
            self._lam[v, idx.letters.index((k, dest))] += r

        self._beta = [[(w, g.swap_rate(v, w)) for w in g.neighbors[v]]
                      for v in range(g.n_nodes)]
        self.clamp_events = 0
        self.renorm_events = 0

    # -- compilation -----------------------------------------------------------

    def _compile_removals(self, d: qc.Discipline):
        idx = self.index
        b = idx.n_letters
        n = idx.n_states
        srv = np.zeros(n, dtype=np.int64)
        rm = np.zeros(n, dtype=np.int64)
        srv[0] = -1
        for l in range(1, idx.max_len + 1):
            lo, hi = self._block[l]
            val = np.arange(hi - lo, dtype=np.int64)
            if d.kind == qc.FIFO:
                top = b ** (l - 1)
                srv[lo:hi] = val // top
                rm[lo:hi] = self._block[l - 1][0] + val % top
            elif d.kind == qc.LIFO_PREEMPT:
                srv[lo:hi] = val % b
                rm[lo:hi] = self._block[l - 1][0] + val // b
            else:  # preemptive static priority: scan each word
                rank = [d.priorities[k] for k, _ in idx.letters]
                for off in range(hi - lo):
                    word = idx.word_of(lo + off)
                    pos = min(range(l), key=lambda i: (rank[idx.letters.index(word[i])], i))
                    srv[lo + off] = idx.letters.index(word[pos])
                    rm[lo + off] = idx.index_of(word[:pos] + word[pos + 1:])
        return srv, rm

    # -- rate functionals --------------------------------------------------------

    def _served_mass(self, vectors) -> np.ndarray:
        """served[v, letter] = service completion rate mass by serving letter."""
        b = self.index.n_letters
        out = np.zeros((self.n_nodes, b))
        for v in range(self.n_nodes):
            srv = self._srv_letter[self._node_disc[v]]
            flux = self._rate_by_letter[v][srv[1:]] * vectors[v][1:]
            out[v] = np.bincount(srv[1:], weights=flux, minlength=b)
        return out

    def transit_arrival_rates(self, vectors) -> np.ndarray:
        """rates[v2, letter] = transit arrival intensity into node v2."""
        served = self._served_mass(vectors)
        b = self.index.n_letters
        out = np.zeros((self.n_nodes, b))
        for v2 in range(self.n_nodes):
            for v, li, l2, e in self._routes[v2]:
                out[v2, l2] += e * served[v, li]
        return out

    def _flow(self, rates: np.ndarray, vectors):
        """Arrival + completion + swap flux of the master equation.

        ``rates[v, letter]`` are the per-letter arrival intensities (external
        plus transit); the flux is linear in both arguments, which is exactly
        what the sensitivity equation needs.
        """
        idx = self.index
        b = idx.n_letters
        L = idx.max_len
        out = [np.zeros_like(x) for x in vectors]
        leak = np.zeros(self.n_nodes)
        for v in range(self.n_nodes):
            x = vectors[v]
            dx = out[v]
            r_tot = float(rates[v].sum())
            if r_tot != 0.0:
                dx -= r_tot * x
                for l in range(L):
                    lo, hi = self._block[l]
                    lo2 = self._block[l + 1][0]
                    src = x[lo:hi]
                    for li in range(b):
                        r = rates[v, li]
                        if r != 0.0:
                            dx[lo2 + li: self._block[l + 1][1]: b] += r * src
                loL, hiL = self._block[L]
                leak[v] = r_tot * float(x[loL:hiL].sum())
            srv = self._srv_letter[self._node_disc[v]]
            rm = self._rm_target[self._node_disc[v]]
            flux = self._rate_by_letter[v][srv[1:]] * x[1:]
            dx[1:] -= flux
            dx += np.bincount(rm[1:], weights=flux, minlength=idx.n_states)
        return out, leak

    def drift(self, mu: TruncatedMeasure):
        """Right-hand side of the evolution at ``mu``; returns a signed
        measure-shaped object whose per-node mass (states + leak) sums to 0."""
        rates = self._lam + self.transit_arrival_rates(mu.vectors)
        dvec, dleak = self._flow(rates, mu.vectors)
        for v in range(self.n_nodes):
            for w, beta in self._beta[v]:
                if beta != 0.0:
                    dvec[v] += beta * (mu.vectors[w] - mu.vectors[v])
                    dleak[v] += beta * (mu.leak[w] - mu.leak[v])
        return TruncatedMeasure(dvec, dleak, mu.time)

    def _pair_rhs(self, mu: TruncatedMeasure, h: SensitivityVector):
        """Joint RHS of the state and its linearization.

        The arrival block is bilinear in (rates, measure); the product rule
        splits it into rates(mu) acting on h plus rates(h) acting on mu.  All
        other blocks are linear and act on h directly.
        """
        dmu = self.drift(mu)
        rates_mu = self._lam + self.transit_arrival_rates(mu.vectors)
        dh_vec, dh_leak = self._flow(rates_mu, h.vectors)
        rates_h = self.transit_arrival_rates(h.vectors)
        if np.any(rates_h):
            extra_vec, extra_leak = self._flow_rates_only(rates_h, mu.vectors)
            for v in range(self.n_nodes):
                dh_vec[v] += extra_vec[v]
            dh_leak += extra_leak
        for v in range(self.n_nodes):
            for w, beta in self._beta[v]:
                if beta != 0.0:
                    dh_vec[v] += beta * (h.vectors[w] - h.vectors[v])
                    dh_leak[v] += beta * (h.leak[w] - h.leak[v])
        return dmu, SensitivityVector(dh_vec, dh_leak, h.time)

    def _flow_rates_only(self, rates, vectors):
        """Arrival flux alone (no completions): used for the bilinear term."""
        idx = self.index
        b = idx.n_letters
        L = idx.max_len
        out = [np.zeros_like(x) for x in vectors]
        leak = np.zeros(self.n_nodes)
        for v in range(self.n_nodes):
            x = vectors[v]
            dx = out[v]
            r_tot = float(rates[v].sum())
            if r_tot == 0.0:
                continue
            dx -= r_tot * x
            for l in range(L):
                lo, hi = self._block[l]
                lo2 = self._block[l + 1][0]
                src = x[lo:hi]
                for li in range(b):
                    r = rates[v, li]
                    if r != 0.0:
                        dx[lo2 + li: self._block[l + 1][1]: b] += r * src
            loL, hiL = self._block[L]
            leak[v] = r_tot * float(x[loL:hiL].sum())
        return out, leak

    # -- integration -------------------------------------------------------------

    def _rk4_step(self, mu: TruncatedMeasure, dt: float) -> TruncatedMeasure:
        k1 = self.drift(mu)
        k2 = self.drift(_axpy(mu, k1, dt / 2))
        k3 = self.drift(_axpy(mu, k2, dt / 2))
        k4 = self.drift(_axpy(mu, k3, dt))
        out = mu.copy()
        for v in range(self.n_nodes):
            out.vectors[v] += dt / 6 * (k1.vectors[v] + 2 * k2.vectors[v]
                                        + 2 * k3.vectors[v] + k4.vectors[v])
        out.leak += dt / 6 * (k1.leak + 2 * k2.leak + 2 * k3.leak + k4.leak)
        out.time = mu.time + dt
        return out

    def _tidy(self, mu: TruncatedMeasure):
        for v in range(self.n_nodes):
            x = mu.vectors[v]
            neg = x < 0.0
            if neg.any():
                worst = float(x[neg].min())
                if worst < -1e-10:
                    self.clamp_events += 1
                x[neg] = 0.0
            total = mu.node_total(v)
            if abs(total - 1.0) > 1e-10:
                self.renorm_events += 1
                x /= total
                mu.leak[v] /= total
            if mu.leak[v] > self.cfg.leak_tol:
                raise MassLeakExceeded(
                    f"leak {mu.leak[v]:.3e} at node {self.cfg.graph.names[v]!r} "
                    f"exceeds {self.cfg.leak_tol:.1e}; increase the truncation depth")

    def integrate(self, mu0: TruncatedMeasure, horizon: float, dt: float,
                  snapshot_times=()) -> list:
        """Fixed-step RK4 trajectory; returns measures at the requested times.

        Snapshots are hit exactly (the step before each requested time is
        shortened); the final time ``mu0.time + horizon`` is always included.
        """
        if dt <= 0:
            raise InvalidConfig(f"dt must be positive, got {dt}")
        end = mu0.time + horizon
        marks = sorted({t for t in snapshot_times if mu0.time < t <= end})
        if not marks or marks[-1] < end:
            marks.append(end)
        mu = mu0.copy()
        out = []
        for t_mark in marks:
            while mu.time < t_mark - 1e-12:
                step = min(dt, t_mark - mu.time)
                mu = self._rk4_step(mu, step)
                self._tidy(mu)
            mu.time = t_mark
            out.append(mu.copy())
        return out

    def sensitivity(self, mu0: TruncatedMeasure, h0: SensitivityVector,
                    horizon: float, dt: float, snapshot_times=()) -> list:
        """Co-integrate the state and the linearized perturbation flow."""
        if dt <= 0:
            raise InvalidConfig(f"dt must be positive, got {dt}")
        total = sum(float(x.sum()) for x in h0.vectors) + float(h0.leak.sum())
        if abs(total) > 1e-8:
            raise InvalidConfig(f"perturbation must have zero total mass, "
                                f"got {total}")
        end = mu0.time + horizon
        marks = sorted({t for t in snapshot_times if mu0.time < t <= end})
        if not marks or marks[-1] < end:
            marks.append(end)
        mu, h = mu0.copy(), h0.copy()
        out = []
        for t_mark in marks:
            while mu.time < t_mark - 1e-12:
                step = min(dt, t_mark - mu.time)
                mu, h = self._rk4_pair_step(mu, h, step)
                self._tidy(mu)
            mu.time = h.time = t_mark
            out.append((mu.copy(), h.copy()))
        return out

    def _rk4_pair_step(self, mu, h, dt):
        k1m, k1h = self._pair_rhs(mu, h)
        k2m, k2h = self._pair_rhs(_axpy(mu, k1m, dt / 2), _saxpy(h, k1h, dt / 2))
        k3m, k3h = self._pair_rhs(_axpy(mu, k2m, dt / 2), _saxpy(h, k2h, dt / 2))
        k4m, k4h = self._pair_rhs(_axpy(mu, k3m, dt), _saxpy(h, k3h, dt))
        mu2, h2 = mu.copy(), h.copy()
        for v in range(self.n_nodes):
            mu2.vectors[v] += dt / 6 * (k1m.vectors[v] + 2 * k2m.vectors[v]
                                        + 2 * k3m.vectors[v] + k4m.vectors[v])
            h2.vectors[v] += dt / 6 * (k1h.vectors[v] + 2 * k2h.vectors[v]
                                       + 2 * k3h.vectors[v] + k4h.vectors[v])
        mu2.leak += dt / 6 * (k1m.leak + 2 * k2m.leak + 2 * k3m.leak + k4m.leak)
        h2.leak += dt / 6 * (k1h.leak + 2 * k2h.leak + 2 * k3h.leak + k4h.leak)
        mu2.time = h2.time = mu.time + dt
        return mu2, h2

    # -- views ---------------------------------------------------------------------

    def descriptor_distribution(self, mu: TruncatedMeasure, v: int,
                                depth: int, max_len: int) -> dict:
        """Aggregate a node marginal onto truncated descriptors; leak mass is
        reported under the key ``("leak",)``."""
        idx = self.index
        out = {}
        x = mu.vectors[v]
        for l in range(idx.max_len + 1):
            lo, hi = self._block[l]
            if l == 0:
                key = (0, ())
                out[key] = out.get(key, 0.0) + float(x[0])
                continue
            block = x[lo:hi]
            if block.max() == 0.0:
                continue
            b = idx.n_letters
            kept = min(depth, l)
            # group indices by their first `kept` letters
            group = np.arange(hi - lo, dtype=np.int64) // (b ** (l - kept))
            sums = np.bincount(group, weights=block, minlength=b ** kept)
            capped = min(l, max_len)
            for gid, mass in enumerate(sums):
                if mass <= 0.0:
                    continue
                letters = []
                g = gid
                for _ in range(kept):
                    letters.append(idx.letters[g % b])
                    g //= b
                key = (capped, tuple(reversed(letters)))
                out[key] = out.get(key, 0.0) + float(mass)
        if mu.leak[v] > 0.0:
            out[("leak",)] = float(mu.leak[v])
        return out


def _axpy(mu: TruncatedMeasure, d: TruncatedMeasure, a: float) -> TruncatedMeasure:
    return TruncatedMeasure([x + a * y for x, y in zip(mu.vectors, d.vectors)],
                            mu.leak + a * d.leak, mu.time + a)


def _saxpy(h: SensitivityVector, d: SensitivityVector, a: float) -> SensitivityVector:
    return SensitivityVector([x + a * y for x, y in zip(h.vectors, d.vectors)],
                             h.leak + a * d.leak, h.time + a)


# -- module-level operation wrappers ---------------------------------------------

def system_for(cfg: ExperimentConfig, max_len: int | None = None) -> OdeSystem:
    """Build (or reuse) the compiled system for a config."""
    key = cfg.truncation if max_len is None else max_len
    cache = getattr(cfg, "_ode_systems", None)
    if cache is None:
        cache = {}
        object.__setattr__(cfg, "_ode_systems", cache) if hasattr(cfg, "__slots__") \
            else setattr(cfg, "_ode_systems", cache)
    if key not in cache:
        cache[key] = OdeSystem(cfg, key)
    return cache[key]


def transit_rates(mu: TruncatedMeasure, cfg: ExperimentConfig) -> dict:
    """Transit arrival intensities as {(target node, class, dest): rate}."""
    system = system_for(cfg)
    rates = system.transit_arrival_rates(mu.vectors)
    out = {}
    for v2 in range(system.n_nodes):
        for li, (k, dest) in enumerate(system.index.letters):
            if rates[v2, li] != 0.0:
                out[(v2, k, dest)] = float(rates[v2, li])
    return out


def drift(mu: TruncatedMeasure, cfg: ExperimentConfig) -> TruncatedMeasure:
    return system_for(cfg).drift(mu)


def integrate(mu0: TruncatedMeasure, horizon: float, dt: float,
              cfg: ExperimentConfig, snapshot_times=()) -> list:
    return system_for(cfg).integrate(mu0, horizon, dt, snapshot_times)


def sensitivity(mu0: TruncatedMeasure, h0: SensitivityVector, horizon: float,
                dt: float, cfg: ExperimentConfig, snapshot_times=()) -> list:
    return system_for(cfg).sensitivity(mu0, h0, horizon, dt, snapshot_times)
