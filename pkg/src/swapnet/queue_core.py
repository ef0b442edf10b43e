"""Queue words, service disciplines, service-time laws, and the structural maps.

A queue state is an ordered word of customers (arrival order, oldest first);
each customer carries a class symbol, a fixed destination node, and the
attained service time ("age").  Three structural maps act on words: appending
a fresh arrival, deleting the customer in service, and moving a served
customer to a neighboring queue with its class rewritten and age reset.

Everything here is value-semantic: operations return new objects and all
randomness flows through explicit ``random.Random`` streams.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

from .errors import DestinationTooClose, EmptyQueue, MissingEntry, NonZeroAge
from .topology import Graph, routing_candidates

FIFO = "fifo"
LIFO_PREEMPT = "lifo-preempt"
STATIC_PRIORITY = "static-priority"


@dataclass
class Customer:
    """One queue entry: class symbol, fixed destination, attained service."""

    klass: str
    dest: int
    age: float = 0.0
    requirement: float | None = None  # sampled total demand, simulator path only

    def copy(self) -> "Customer":
        return Customer(self.klass, self.dest, self.age, self.requirement)


@dataclass
class QueueState:
    """Ordered queue word at a node; index 0 is the oldest arrival."""

    customers: list = field(default_factory=list)
    node: int = 0

    def __len__(self) -> int:
        return len(self.customers)

    def copy(self) -> "QueueState":
        return QueueState([c.copy() for c in self.customers], self.node)

    def word(self) -> tuple:
        """The (class, dest) letter sequence, ages dropped."""
        return tuple((c.klass, c.dest) for c in self.customers)


@dataclass(frozen=True)
class Discipline:
    """Service-order rule: which customer the single server works on.

    ``priorities`` maps class symbol to rank (lower rank served first) and is
    required for the static-priority kind.  Selection may depend only on the
    customer classes, their distances to the current node, and the ages (the
    ages distinguish the customer whose service is in progress under
    non-preemptive rules).
    """

    kind: str = FIFO
    priorities: dict | None = None
    preemptive: bool = False

    def __post_init__(self):
        if self.kind not in (FIFO, LIFO_PREEMPT, STATIC_PRIORITY):
            raise ValueError(f"unknown discipline kind {self.kind!r}")
        if self.kind == STATIC_PRIORITY and not self.priorities:
            raise ValueError("static-priority discipline needs a priority map")


def select_in_service(q: QueueState, d: Discipline, dist=None) -> int:
    """0-based index of the customer the server is working on.

    FIFO serves the head, LIFO (preempt-resume) the most recent arrival.
    Static priority serves the best rank; its non-preemptive variant sticks
    with a customer whose service already started (the unique one with
    positive age), and ties go to the earliest arrival.  ``dist`` is accepted
    so that distance-dependent rules can be added without changing call sites;
    the built-in rules do not consult it.
    """
    n = len(q.customers)
    if n == 0:
        raise EmptyQueue("cannot select a customer to serve in an empty queue")
    if d.kind == FIFO:
        return 0
    if d.kind == LIFO_PREEMPT:
        return n - 1
    if not d.preemptive:
        for i, c in enumerate(q.customers):
            if c.age > 0.0:
                return i
    best, best_rank = 0, None
    for i, c in enumerate(q.customers):
        try:
            rank = d.priorities[c.klass]
        except KeyError:
            raise MissingEntry(f"no priority rank for class {c.klass!r}") from None
        if best_rank is None or rank < best_rank:
            best, best_rank = i, rank
    return best


def append_arrival(q: QueueState, c: Customer) -> QueueState:
    """New word with ``c`` appended; existing customers untouched."""
    if c.age != 0.0:
        raise NonZeroAge(f"external arrival must have age 0, got {c.age}")
    return QueueState([x.copy() for x in q.customers] + [c.copy()], q.node)


def remove_in_service(q: QueueState, d: Discipline, dist=None):
    """Delete the in-service customer; returns (shorter word, removed customer)."""
    i = select_in_service(q, d, dist)
    rest = [c.copy() for j, c in enumerate(q.customers) if j != i]
    return QueueState(rest, q.node), q.customers[i].copy()


@dataclass
class TransferOutcome:
    """Result of a served customer leaving its node."""

    source: QueueState
    customer: Customer           # the customer as it left the source (pre-rewrite)
    exited: bool
    target_node: int | None = None
    target: QueueState | None = None
    moved: Customer | None = None  # rewritten customer appended at the target


def transfer(q_v: QueueState, q_targets, g: Graph, d: Discipline,
             tt: "ClassTransitionTable", rng) -> TransferOutcome:
    """Complete the in-service customer's service and move or expel it.

    At distance <= 1 from its destination the customer leaves the network.
    Otherwise a target node is drawn uniformly among the greedy candidates,
    and the customer joins ``q_targets[w]`` with age 0 and its class rewritten
    by the transition table for the traversed edge.
    """
    if not q_v.customers:
        raise EmptyQueue("transfer invoked on an empty queue")
    v = q_v.node
    shorter, served = remove_in_service(q_v, d)
    if g.dist(v, served.dest) <= 1:
        return TransferOutcome(shorter, served, exited=True)
    cands = routing_candidates(g, v, served.dest)
    w = cands[rng.randrange(len(cands))] if len(cands) > 1 else cands[0]
    moved = Customer(klass=class_transition(tt, served.klass, v, w),
                     dest=served.dest, age=0.0)
    target = append_arrival(q_targets[w], moved)
    return TransferOutcome(shorter, served, exited=False,
                           target_node=w, target=target, moved=moved)


# -- service-time laws ---------------------------------------------------------

EXPONENTIAL = "exponential"
HYPEREXP = "hyperexponential"
ERLANG = "erlang"


@dataclass(frozen=True)
class ServiceLaw:
    """A service-time distribution with an everywhere-finite hazard rate.

    Families: exponential(rate), hyperexponential(weights, rates), and
    erlang(shape, rate).  Deterministic service is deliberately unsupported
    (its hazard blows up); all three families have a bounded hazard with a
    limit at infinity, which downstream bounds rely on.
    """

    family: str
    rate: float = 0.0
    shape: int = 1
    weights: tuple = ()
    rates: tuple = ()

    def __post_init__(self):
        if self.family == EXPONENTIAL:
            if self.rate <= 0:
                raise ValueError("exponential law needs rate > 0")
        elif self.family == ERLANG:
            if self.rate <= 0 or self.shape < 1:
                raise ValueError("erlang law needs rate > 0 and shape >= 1")
        elif self.family == HYPEREXP:
            if len(self.weights) != len(self.rates) or not self.weights:
                raise ValueError("hyperexponential law needs matching weights/rates")
            if abs(sum(self.weights) - 1.0) > 1e-12:
                raise ValueError("hyperexponential weights must sum to 1")
            if any(w < 0 for w in self.weights) or any(r <= 0 for r in self.rates):
                raise ValueError("hyperexponential weights/rates must be positive")
        else:
            raise ValueError(f"unknown service family {self.family!r}")

    def mean(self) -> float:
        if self.family == EXPONENTIAL:
            return 1.0 / self.rate
        if self.family == ERLANG:
            return self.shape / self.rate
        return sum(w / r for w, r in zip(self.weights, self.rates))

    def hazard_bound(self) -> float:
        """Supremum of the hazard over all ages (finite for all families)."""
        if self.family == EXPONENTIAL:
            return self.rate
        if self.family == ERLANG:
            return self.rate  # hazard increases from 0 toward the stage rate
        return max(self.rates)


def exponential(rate: float) -> ServiceLaw:
    return ServiceLaw(EXPONENTIAL, rate=rate)


def erlang(shape: int, rate: float) -> ServiceLaw:
    return ServiceLaw(ERLANG, rate=rate, shape=shape)


def hyperexponential(weights, rates) -> ServiceLaw:
    return ServiceLaw(HYPEREXP, weights=tuple(weights), rates=tuple(rates))


def hazard_rate(law: ServiceLaw, age: float) -> float:
    """Instantaneous completion rate given attained service ``age``."""
    if age < 0:
        raise ValueError(f"age must be nonnegative, got {age}")
    if law.family == EXPONENTIAL:
        return law.rate
    if law.family == HYPEREXP:
        # density / survival, stabilized against underflow by factoring the
        # slowest branch out of both sums
        m = min(law.rates)
        num = sum(w * r * math.exp(-(r - m) * age) for w, r in zip(law.weights, law.rates))
        den = sum(w * math.exp(-(r - m) * age) for w, r in zip(law.weights, law.rates))
        return num / den
    # erlang(k, g): hazard = g (g*age)^(k-1)/(k-1)! / sum_{j<k} (g*age)^j/j!
    g, k = law.rate, law.shape
    x = g * age
    top = 1.0
    tot = 1.0
    term = 1.0
    for j in range(1, k):
        term *= x / j
        tot += term
        top = term
    return g * top / tot


def sample_requirement(law: ServiceLaw, rng) -> float:
    """One total-service-demand draw from the law."""
    if law.family == EXPONENTIAL:
        return rng.expovariate(law.rate)
    if law.family == ERLANG:
        return rng.gammavariate(law.shape, 1.0 / law.rate)
    u = rng.random()
    acc = 0.0
    for w, r in zip(law.weights, law.rates):
        acc += w
        if u <= acc:
            return rng.expovariate(r)
    return rng.expovariate(law.rates[-1])


def sample_remaining(law: ServiceLaw, age: float, rng) -> float:
    """Total requirement conditioned on exceeding ``age``.

    This is the conditional resampling used whenever the governing law of a
    partially served customer changes (server swap onto a new node, resume
    after preemption): the attained age is the whole memory of the state, so
    redrawing the requirement from the conditional law is exact.
    """
    if age < 0:
        raise ValueError(f"age must be nonnegative, got {age}")
    if age == 0.0:
        return sample_requirement(law, rng)
    if law.family == EXPONENTIAL:
        return age + rng.expovariate(law.rate)
    if law.family == HYPEREXP:
        # branch posterior given survival to `age`, then memoryless within branch
        m = min(law.rates)
        posts = [w * math.exp(-(r - m) * age) for w, r in zip(law.weights, law.rates)]
        tot = sum(posts)
        u = rng.random() * tot
        acc = 0.0
        for p, r in zip(posts, law.rates):
            acc += p
            if u <= acc:
                return age + rng.expovariate(r)
        return age + rng.expovariate(law.rates[-1])
    # erlang: completed-stage count given survival is a truncated Poisson
    g, k = law.rate, law.shape
    x = g * age
    term = 1.0
    cum = [1.0]
    for j in range(1, k):
        term *= x / j
        cum.append(cum[-1] + term)
    u = rng.random() * cum[-1]
    stage = k - 1
    for j in range(k):
        if u <= cum[j]:
            stage = j
            break
    return age + rng.gammavariate(k - stage, 1.0 / g)


# -- class transitions ---------------------------------------------------------

@dataclass(frozen=True)
class ClassTransitionTable:
    """Class rewriting map for customers hopping along an edge.

    ``table`` maps (class, from node, to node) to the new class; when
    ``identity`` is set, missing entries leave the class unchanged.
    """

    classes: tuple
    table: dict = field(default_factory=dict)
    identity: bool = True

    def __post_init__(self):
        for (k, _, _), knew in self.table.items():
            if k not in self.classes or knew not in self.classes:
                raise MissingEntry(f"transition {k!r}->{knew!r} uses unknown class")


def class_transition(tt: ClassTransitionTable, klass: str, v: int, u: int) -> str:
    key = (klass, v, u)
    if key in tt.table:
        return tt.table[key]
    if tt.identity:
        if klass not in tt.classes:
            raise MissingEntry(f"unknown class {klass!r}")
        return klass
    raise MissingEntry(f"no class transition for {key}")
