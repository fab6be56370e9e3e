"""Surrogate losses for stochastic computation graphs.

The construction is batched: partition ``i`` draws its sample set on plate
``part_i`` and everything downstream inherits that plate, so a single
expression holds every joint sample tuple.  Reducing plate ``part_i``
multiplies by the partition's weights and sums.

    inner_k = box(L_k) C + box(L_{k-1}) a_k
    S_i     = sum_{part_i} w_i inner_i
    inner_i = S_{i+1} + box(L_{i-1}) a_i

``L_i`` is the running sum of gradient functions.  The loss is ``S_1``.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from . import adcore as ad
from . import distributions as dists
from .adcore import Expression, Value
from .distributions import ProductOfIndependents
from .estimators import OUTCOME, BatchContext, EstimatorError, GradientEstimator, SampleBatch
from .scg import Graph, GraphError, Partitioning


class SurrogateError(ValueError):
    pass


def part_plate(i: int) -> str:
    return f"part_{i}"


def outcome_plate(i: int) -> str:
    return f"outcome_{i}"


# ---------------------------------------------------------------- proposers


class MonteCarloProposer:
    """Draws each partition's batch from its estimator; ``outer`` plates stay unreduced."""

    def __init__(self, rng=None, outer: Mapping[str, int] | None = None):
        self.rng = dists.make_rng(rng)
        self.outer = dict(outer or {})

    def __call__(self, i, est: GradientEstimator, dist, plate: str) -> SampleBatch:
        return est.propose(self.rng, dist, plate, self.outer or None)


class EnumeratingProposer:
    """Replaces sampling with the complete proposal outcome space.

    Partition ``i`` gets an ``outcome_i`` plate.  When earlier partitions
    left part plates behind, each of their elements draws independently, so
    the joint outcome over those elements is enumerated digit by digit.
    ``probs[i]`` holds the conditional outcome probabilities.
    """

    def __init__(self, cap: int = 200_000):
        self.cap = cap
        self.probs: list[Value] = []
        self.part_sizes: dict[str, int] = {}

    def __call__(self, i, est, dist, plate):
        out = est.enumerate(dist, plate)
        if out is None:
            raise SurrogateError(f"{est.name} has no enumerable proposal")
        batch, probs = out
        up = [p for p in self.part_sizes if p in probs.plates]
        joint = outcome_plate(i)
        n_out = probs.plate_sizes[OUTCOME]
        if not up:
            batch = _map_batch(batch, lambda v: _rename(v, OUTCOME, joint))
            probs = _rename(probs, OUTCOME, joint)
        else:
            n_elems = int(np.prod([self.part_sizes[p] for p in up]))
            if n_out**n_elems > self.cap:
                raise SurrogateError(f"joint outcome space {n_out}^{n_elems} exceeds the enumeration cap")
            digits = np.array(list(itertools.product(range(n_out), repeat=n_elems)))[:, ::-1]
            sizes = {p: self.part_sizes[p] for p in up}
            if any(isinstance(v, np.ndarray) and v.ndim for v in batch.extras.values()):
                raise SurrogateError(f"{est.name} cannot be enumerated downstream of a sampled partition")
            batch = _map_batch(batch, lambda v: _joint(v, up, sizes, digits, joint))
            pj = _joint(probs, up, sizes, digits, joint)
            axes = tuple(pj.plates.index(p) for p in up)
            probs = Value(np.prod(pj.data, axis=axes), tuple(p for p in pj.plates if p not in up))
        self.part_sizes[plate] = batch.plate_size
        self.probs.append(probs)
        return batch


def _rename(v: Value, old: str, new: str) -> Value:
    return Value(v.data, tuple(new if p == old else p for p in v.plates))


def _joint(v: Value, up, sizes, digits, joint) -> Value:
    if OUTCOME not in v.plates:
        return v
    rest = [p for p in v.plates if p != OUTCOME and p not in up]
    all_sizes = dict(v.plate_sizes)
    all_sizes.update(sizes)
    order = (OUTCOME,) + tuple(up) + tuple(rest)
    ev = v.data.ndim - len(v.plates)
    data = ad._align(v.data, v.plates, order, ev, all_sizes)
    data = np.broadcast_to(data, tuple(all_sizes[p] for p in order) + data.shape[len(order):])
    n_up = len(up)
    flat = data.reshape((data.shape[0], -1) + data.shape[1 + n_up:])
    elems = np.arange(flat.shape[1])
    picked = flat[digits, elems[None, :]]  # (joint, elems, ...)
    picked = picked.reshape((len(digits),) + tuple(sizes[p] for p in up) + picked.shape[2:])
    return Value(np.ascontiguousarray(picked), (joint,) + tuple(up) + tuple(rest))


def _map_batch(batch: SampleBatch, fn) -> SampleBatch:
    vals = tuple(fn(v) for v in batch.values) if isinstance(batch.values, tuple) else fn(batch.values)
    extras = {}
    for k, v in batch.extras.items():
        if isinstance(v, Value):
            extras[k] = fn(v)
        elif isinstance(v, Expression) and v.is_const():
            extras[k] = ad.const(fn(v.const_value()))
        else:
            extras[k] = v
    return SampleBatch(vals, batch.plate_name, batch.plate_size, extras)


# ---------------------------------------------------------------- construction


@dataclass
class SurrogateContext:
    graph: Graph
    cost: str
    partitioning: Partitioning
    estimators: Sequence[GradientEstimator]
    rng: object = None
    target: str | None = None
    outer: dict | None = None
    allow_bias: bool = False
    plates: list[str] = field(default_factory=list)
    dists: list = field(default_factory=list)
    batches: list[SampleBatch] = field(default_factory=list)
    weights: list = field(default_factory=list)
    grad_fns: list = field(default_factory=list)
    control_variates: list = field(default_factory=list)
    L: list = field(default_factory=list)
    cost_expr: Expression | None = None
    loss: Expression | None = None
    assignment: dict = field(default_factory=dict)
    outcome_probs: list[Value] | None = None

    def alt_form(self) -> Expression:
        return _alt_form(self)


def _plus(a, b):
    if a is None:
        return b
    if b is None:
        return a
    return a + b


def _times(a, b):
    if a is None:
        return b
    if b is None:
        return a
    return a * b


def _box(L):
    return None if L is None else ad.magic_box(L)


def _assign(assignment, part, values):
    if len(part) == 1:
        assignment[part[0]] = values
    else:
        for node, v in zip(part, values):
            assignment[node] = v


def _partition_dist(graph: Graph, part, assignment):
    parents = sorted({p for n in part for p in graph.nodes[n].parents})
    env = graph.forward(assignment, targets=parents)
    comps = [graph.distribution(n, env) for n in part]
    return comps[0] if len(comps) == 1 else ProductOfIndependents(comps)


def _cost_fn(graph, cost, part, assignment):
    def fn(values):
        a2 = dict(assignment)
        _assign(a2, part, values)
        return graph.forward(a2, targets=[cost])[cost]

    return fn


def _validate(graph, cost, partitioning, estimators):
    if partitioning.cost != cost:
        raise SurrogateError(f"partitioning belongs to {partitioning.cost!r}, not {cost!r}")
    if len(estimators) != len(partitioning):
        raise SurrogateError(f"{len(partitioning)} partitions but {len(estimators)} estimators")


def build_context(
    graph: Graph,
    cost: str,
    partitioning: Partitioning,
    estimators: Sequence[GradientEstimator],
    rng=None,
    *,
    proposer=None,
    outer=None,
    plates: Sequence[str] | None = None,
    shared_batches: Mapping[int, SampleBatch] | None = None,
    target: str | None = None,
    allow_bias: bool = False,
) -> SurrogateContext:
    _validate(graph, cost, partitioning, estimators)
    k = len(partitioning)
    plates = list(plates) if plates is not None else [part_plate(i + 1) for i in range(k)]
    proposer = proposer or MonteCarloProposer(rng, outer)
    shared = dict(shared_batches or {})
    ctx = SurrogateContext(graph, cost, partitioning, list(estimators), rng, target, dict(outer or {}) or None, allow_bias, plates)

    for i, (part, est) in enumerate(zip(partitioning, estimators)):
        dist = _partition_dist(graph, part, ctx.assignment)
        est.check(dist)
        if i in shared:
            batch = shared[i]
        else:
            batch = proposer(i + 1, est, dist, plates[i])
        if batch.plate_name != plates[i]:
            raise SurrogateError(f"batch plate {batch.plate_name!r} does not match {plates[i]!r}")
        _assign(ctx.assignment, part, batch.values)
        ctx.dists.append(dist)
        ctx.batches.append(batch)
    if isinstance(proposer, EnumeratingProposer):
        ctx.outcome_probs = proposer.probs

    C = graph.forward(ctx.assignment, targets=[cost])[cost]
    ctx.cost_expr = C
    L = None
    for dist, batch, est in zip(ctx.dists, ctx.batches, estimators):
        bctx = BatchContext(dist, batch)
        w, l = est.weight(bctx), est.grad_fn(bctx)
        ctx.weights.append(w)
        ctx.grad_fns.append(l)
        L = _plus(L, l)
        ctx.L.append(L)

    a_list = [None] * k
    inner = _times(_box(ctx.L[-1]), C) if k else C
    for i in range(k - 1, -1, -1):
        last = i == k - 1
        down = C if last else inner
        bctx = BatchContext(ctx.dists[i], ctx.batches[i], down, _cost_fn(graph, cost, partitioning.partitions[i], ctx.assignment) if last else None)
        L_prev = ctx.L[i - 1] if i > 0 else None
        try:
            a = estimators[i].control_variate(bctx, L_prev)
        except EstimatorError as exc:
            raise SurrogateError(f"partition {i + 1} of {cost!r}: {exc}") from exc
        a_list[i] = a
        if a is not None:
            inner = inner + _times(_box(L_prev), a)
        inner = _reduce(_times(ctx.weights[i], inner), plates[i], ctx.batches[i].plate_size)
    ctx.control_variates = a_list
    ctx.loss = inner
    return ctx


def _reduce(e: Expression, plate: str, size: int) -> Expression:
    if plate in e.plates:
        return ad.sum(e, plates=(plate,))
    return e * float(size)


def _alt_form(ctx: SurrogateContext) -> Expression:
    C = ctx.cost_expr
    total = C
    for i, a in enumerate(ctx.control_variates):
        L_prev = ctx.L[i - 1] if i > 0 else None
        l = ctx.grad_fns[i]
        term = a
        if l is not None:
            term = _plus(term, (ad.magic_box(l) - 1.0) * C)
        if term is not None:
            total = total + _times(_box(L_prev), term)
    W = None
    for w in ctx.weights:
        W = _times(W, w)
    total = _times(W, total)
    present = tuple(p for p in ctx.plates if p in total.plates)
    missing = 1.0
    for p, b in zip(ctx.plates, ctx.batches):
        if p not in total.plates:
            missing *= b.plate_size
    out = ad.sum(total, plates=present) if present else total
    return out * missing if missing != 1.0 else out


# ---------------------------------------------------------------- public API


def _check_orders(estimators, order, allow_bias):
    for est in estimators:
        est.check_order(order, allow_bias)


def surrogate_loss(graph, cost, partitioning, estimators, rng=None, *, order=None, allow_bias=False, **kw) -> Expression:
    """The surrogate loss expression for one cost node."""
    if order is not None:
        _check_orders(estimators, order, allow_bias)
    return build_context(graph, cost, partitioning, estimators, rng, allow_bias=allow_bias, **kw).loss


def surrogate_loss_alt_form(graph, cost, partitioning, estimators, rng=None, shared_batches=None, **kw) -> Expression:
    """Alternative form: sum over all tuples of prod(w) [C + sum_i box(L_{i-1})(a_i + (box(l_i) - 1) C)].

    It matches :func:`surrogate_loss` under evaluation of every derivative
    whenever each partition's weights sum to one under evaluation.
    """
    return build_context(graph, cost, partitioning, estimators, rng, shared_batches=shared_batches, **kw).alt_form()


def make_context(graph, cost, partitioning, estimators, rng=None, target=None, **kw) -> SurrogateContext:
    return build_context(graph, cost, partitioning, estimators, rng, target=target, **kw)


def estimate_gradient(context: SurrogateContext, order: int, target: str | None = None, allow_bias: bool | None = None, loss=None) -> Value:
    """Evaluate the ``order``-th derivative of the context's surrogate loss."""
    target = target or context.target
    if target is None:
        raise SurrogateError("no differentiation target given")
    allow = context.allow_bias if allow_bias is None else allow_bias
    _check_orders(context.estimators, order, allow)
    expr = context.loss if loss is None else loss
    return ad.evaluate(ad.differentiate(expr, target, order))


def enumerated_mean(graph, cost, partitioning, estimators, target, order, *, allow_bias=False, alt_form=False, cap=200_000) -> Value:
    """Exact expectation over all proposal outcomes of the order-``order`` estimate."""
    _check_orders(estimators, order, allow_bias)
    prop = EnumeratingProposer(cap)
    ctx = build_context(graph, cost, partitioning, estimators, proposer=prop, target=target, allow_bias=allow_bias)
    expr = ctx.alt_form() if alt_form else ctx.loss
    val = ad.evaluate(ad.differentiate(expr, target, order))
    return weighted_outcome_sum(val, ctx.outcome_probs)


def weighted_outcome_sum(val: Value, probs: Sequence[Value]) -> Value:
    """Weight per-outcome values by the joint outcome probabilities and sum the outcome plates."""
    e = ad.const(val)
    for p in probs:
        e = e * ad.const(p)
    out = [p for p in e.plates if p.startswith("outcome_")]
    return ad.evaluate(ad.sum(e, plates=out) if out else e)


# ---------------------------------------------------------------- literal reference


class CostCounter:
    """Counts cost-node evaluations made by the reference recursion."""

    def __init__(self):
        self.calls = 0


def surrogate_loss_reference(ctx: SurrogateContext, counter: CostCounter | None = None) -> Expression:
    """Per-tuple recursion over sample indices (tiny instances only).

    Weights, gradient functions and control variates come from ``ctx``; the
    cost is recomputed for each joint tuple, which makes the call count
    equal to the product of the batch sizes.
    """
    graph, cost, parts = ctx.graph, ctx.cost, ctx.partitioning.partitions
    k = len(parts)

    def pick(e, sel):
        if e is None:
            return None
        for plate, j in sel.items():
            if plate in e.plates:
                e = ad.select(e, plate, j)
        return e

    def pick_value(v, sel):
        if isinstance(v, tuple):
            return tuple(pick_value(x, sel) for x in v)
        for plate, j in sel.items():
            if plate in v.plates:
                ax = v.plates.index(plate)
                v = Value(np.take(v.data, j, axis=ax), v.plates[:ax] + v.plates[ax + 1:])
        return v

    def cost_at(sel):
        if counter is not None:
            counter.calls += 1
        a = {}
        for part, batch in zip(parts, ctx.batches):
            _assign(a, part, pick_value(batch.values, sel))
        return graph.forward(a, targets=[cost])[cost]

    def rec(i, sel, L_prev):
        total = None
        for j in range(ctx.batches[i].plate_size):
            s = dict(sel)
            s[ctx.plates[i]] = j
            L = _plus(L_prev, pick(ctx.grad_fns[i], s))
            inner = _times(_box(L), cost_at(s)) if i == k - 1 else rec(i + 1, s, L)
            a = pick(ctx.control_variates[i], s)
            if a is not None:
                inner = inner + _times(_box(L_prev), a)
            term = _times(pick(ctx.weights[i], s), inner)
            total = term if total is None else total + term
        return total

    return rec(0, {}, None)


# ---------------------------------------------------------------- several costs


class _BatchRegistry:
    """One batch (and plate name) per partition node set, shared across costs."""

    def __init__(self, graph, estimator_map, proposer):
        self.graph = graph
        self.estimator_map = estimator_map
        self.proposer = proposer
        self.batches: dict[tuple, SampleBatch] = {}
        self.plates: dict[tuple, str] = {}
        self.owner: dict[str, tuple] = {}

    def register(self, part: tuple):
        for n in part:
            prev = self.owner.get(n)
            if prev is not None and prev != part:
                raise SurrogateError(f"node {n!r} is partitioned as {prev} and as {part} by different costs")
            self.owner[n] = part
        if part not in self.plates:
            self.plates[part] = part_plate(len(self.plates) + 1)

    def estimator(self, part):
        est = self.estimator_map.get(part)
        if est is None and len(part) == 1:
            est = self.estimator_map.get(part[0])
        if est is None:
            raise SurrogateError(f"no estimator for partition {part}")
        return est

    def batch(self, part, dist):
        if part not in self.batches:
            est = self.estimator(part)
            self.batches[part] = self.proposer(len(self.batches) + 1, est, dist, self.plates[part])
        return self.batches[part]


def total_surrogate(graph: Graph, partition_map: Mapping[str, Partitioning], estimator_map: Mapping, rng=None, *, outer=None, proposer=None, contexts: list | None = None) -> Expression:
    """Sum of per-cost surrogate losses with one batch per shared partition.

    ``estimator_map`` is keyed by partition tuples (or node names for
    single-node partitions).
    """
    proposer = proposer or MonteCarloProposer(rng, outer)
    reg = _BatchRegistry(graph, dict(estimator_map), proposer)
    parts_per_cost = {}
    for cost in graph.costs:
        pt = partition_map.get(cost)
        if pt is None:
            pt = graph.partition_for_cost(cost)
        elif not isinstance(pt, Partitioning):
            pt = graph.partition_for_cost(cost, pt)
        for part in pt:
            reg.register(part)
        parts_per_cost[cost] = pt

    total = None
    for cost, pt in parts_per_cost.items():
        estimators = [reg.estimator(p) for p in pt]
        shared = {}
        assignment: dict = {}
        for i, part in enumerate(pt):
            dist = _partition_dist(graph, part, assignment)
            shared[i] = reg.batch(part, dist)
            _assign(assignment, part, shared[i].values)
        plates = [reg.plates[p] for p in pt]
        ctx = build_context(graph, cost, pt, estimators, shared_batches=shared, plates=plates)
        if contexts is not None:
            contexts.append(ctx)
        total = ctx.loss if total is None else total + ctx.loss
    if total is None:
        raise GraphError("graph has no cost nodes")
    return total
