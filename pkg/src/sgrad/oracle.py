"""Brute-force ground truth and executable estimator conditions.

Everything here avoids the surrogate machinery on purpose.  Expectations
are built by enumerating each stochastic ancestor on its own plate and
weighting the node by the product of probabilities.
"""
from __future__ import annotations

import copy
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from . import adcore as ad
from . import distributions as dists
from .adcore import Expression, Value
from .distributions import Bernoulli, Categorical, Distribution, Logistic, ProductOfIndependents
from .estimators import OUTCOME, BatchContext, GradientEstimator
from .scg import Graph

EXACT_TOL = 1e-10
MC_SIGMAS = 3.0
DEFAULT_TRIALS = 100_000
DEFAULT_CHUNK = 20_000
EXACT_TESTS = 20
MC_TESTS = 3
TEST = "test"
TRIAL = "trial"
SAMPLE = "s"


class OracleError(ValueError):
    pass


# ---------------------------------------------------------------- exact expectations


def exact_expectation(graph: Graph, node: str, cap: float = dists.DEFAULT_SUPPORT_CAP) -> Expression:
    anc = graph.stochastic_ancestors(node)
    assignment: dict = {}
    log_w = None
    plates = []
    total = 1
    for s in anc:
        env = graph.forward(assignment, targets=list(graph.nodes[s].parents))
        dist = graph.distribution(s, env)
        if not dist.finite:
            raise OracleError(f"{s!r} is not finite-discrete")
        total *= dist.support_size
        if total > cap:
            raise dists.SupportCapExceeded(f"joint support exceeds {cap:g}")
        plate = f"enum_{s}"
        vals = dist.support_values(plate)
        assignment[s] = vals
        lp = dist.log_prob(vals)
        log_w = lp if log_w is None else log_w + lp
        plates.append(plate)
    f = graph.forward(assignment, targets=[node])[node]
    if log_w is None:
        return f
    e = ad.exp(log_w) * f
    return ad.sum(e, plates=tuple(p for p in plates if p in e.plates))


def exact_gradient(graph: Graph, node: str, target: str, order: int) -> Value:
    return ad.evaluate(ad.differentiate(exact_expectation(graph, node), target, order))


# ---------------------------------------------------------------- test functions


@dataclass
class PolynomialTests:
    """Random cubic polynomials of a random projection, one per ``test`` plate entry."""

    coeffs: np.ndarray  # (n, 4), constant term first
    projections: list  # per value component, arrays (n,) + event shape

    @classmethod
    def draw(cls, rng, n: int, event_shapes, degree: int = 3, scale: float = 2.0):
        coeffs = rng.uniform(-scale, scale, size=(n, degree + 1))
        proj = [rng.uniform(-1.0, 1.0, size=(n,) + tuple(s)) for s in event_shapes]
        return cls(coeffs, proj)

    def __call__(self, values) -> Expression:
        comps = values if isinstance(values, tuple) else (values,)
        y = None
        for v, r in zip(comps, self.projections):
            e = v if isinstance(v, Expression) else ad.const(v)
            t = e * ad.const(r, (TEST,))
            nd = len(t.event_shape)
            t = ad.sum(t, axes=range(nd)) if nd else t
            y = t if y is None else y + t
        out = None
        power = None
        for d in range(self.coeffs.shape[1]):
            c = ad.const(self.coeffs[:, d], (TEST,))
            power = None if d == 0 else (y if power is None else power * y)
            term = c if power is None else c * power
            out = term if out is None else out + term
        return out


def _event_shapes(dist):
    if isinstance(dist, ProductOfIndependents):
        return [_value_event_shape(c) for c in dist.components]
    return [_value_event_shape(dist)]


def _value_event_shape(dist):
    if isinstance(dist, Categorical):
        return dist.probs.event_shape[:-1]
    return dist.event_shape


# ---------------------------------------------------------------- condition checks


@dataclass
class ConditionReport:
    estimator: str
    condition: int
    order: int
    mode: str  # exact | quadrature | monte-carlo | structural
    deviation: float
    threshold: float
    passed: bool
    size: int
    details: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        out = asdict(self)
        out["passed"] = bool(self.passed)
        return out


def _vars_in(dist: Distribution) -> dict[str, Expression]:
    out = {}
    for p in dist.parameters():
        for n in ad._topo(p):
            if n.op == "var":
                out[n.name] = n
    return out


def frozen(dist: Distribution) -> Distribution:
    """The same distribution with every parameter replaced by its evaluated constant."""
    if isinstance(dist, ProductOfIndependents):
        return ProductOfIndependents([frozen(c) for c in dist.components])
    if isinstance(dist, Bernoulli):
        if dist.logits is not None:
            return Bernoulli(logits=ad.const(ad.evaluate(dist.logits)))
        return Bernoulli(probs=ad.const(ad.evaluate(dist.probs)))
    if isinstance(dist, Categorical):
        return Categorical(ad.const(ad.evaluate(dist.probs)))
    if isinstance(dist, Logistic):
        return Logistic(ad.const(ad.evaluate(dist.loc)), ad.const(ad.evaluate(dist.scale)))
    raise OracleError(f"cannot freeze {type(dist).__name__}")


def _expression(est, dist, batch, condition, fn):
    ctx = BatchContext(dist, batch)
    w = est.weight(ctx)
    if condition == 1:
        l = est.grad_fn(ctx)
        e = fn(batch.values)
        if l is not None:
            e = ad.magic_box(l) * e
    elif condition == 2:
        ctx.cost = fn(batch.values)
        ctx.cost_fn = fn
        e = est.control_variate(ctx, None)
        if e is None:
            return None
    else:
        e = ad.const(1.0) if w is None else w
        w = None
    if w is not None:
        e = w * e
    if batch.plate_name in e.plates:
        return ad.sum(e, plates=(batch.plate_name,))
    return e * float(batch.plate_size)


def _truth(dist, fn, target, order, condition):
    if condition == 2:
        return 0.0
    if condition == 3:
        return 1.0 if order == 0 else 0.0
    vals = dist.support_values(SAMPLE)
    e = ad.sum(ad.exp(dist.log_prob(vals)) * fn(vals), plates=(SAMPLE,))
    return _flat(ad.evaluate(ad.differentiate(e, target, order)))


def _flat(val: Value, lead=()) -> np.ndarray:
    """Align to ``lead`` + remaining plates in sorted order and flatten the remainder."""
    rest = tuple(sorted(p for p in val.plates if p not in lead))
    data = val.aligned(tuple(lead) + rest)
    n_lead = [val.plate_sizes[p] for p in lead]
    return data.reshape(tuple(n_lead) + (-1,))


def check_condition(
    estimator: GradientEstimator,
    distribution,
    parent_values: dict | None = None,
    condition: int = 1,
    order: int = 0,
    test_fn=None,
    budget: int = 200_000,
    *,
    target: str | None = None,
    seed: int = 0,
    trials: int = DEFAULT_TRIALS,
    n_tests: int | None = None,
    mode: str = "auto",
    allow_bias: bool = False,
    chunk: int = DEFAULT_CHUNK,
) -> ConditionReport:
    """Check one of the four unbiasedness conditions for a single partition.

    Conditions 1-3 are checked exactly when the proposal can be enumerated
    (or integrated by quadrature) within ``budget``; otherwise by Monte
    Carlo with a 3-standard-error threshold.
    """
    if condition not in (1, 2, 3, 4):
        raise OracleError(f"unknown condition {condition}")
    estimator.check_order(order, allow_bias)
    dist = distribution() if callable(distribution) and not isinstance(distribution, Distribution) else distribution
    variables = _vars_in(dist)
    for name, val in (parent_values or {}).items():
        if name not in variables:
            raise OracleError(f"{name!r} is not a parameter of the distribution")
        variables[name].assign(val)
    if target is None:
        if len(variables) != 1:
            raise OracleError("give the differentiation target explicitly")
        target = next(iter(variables))
    estimator.check(dist)
    if condition == 4:
        return _condition4(estimator, dist, seed)

    rng = dists.RngStreams(seed)
    exact_ok = mode in ("auto", "exact")
    enum = estimator.enumerate(dist, SAMPLE) if exact_ok else None
    if enum is not None and enum[1].data.size > budget:
        enum = None
    if enum is None and mode == "exact":
        raise OracleError(f"{estimator.name}: proposal not enumerable within budget")
    if enum is not None:
        n_tests = n_tests or EXACT_TESTS
    else:
        n_tests = n_tests or MC_TESTS
    fn = test_fn or PolynomialTests.draw(rng.stream("tests"), n_tests, _event_shapes(dist))
    name = getattr(estimator, "name", "estimator")

    if enum is not None:
        batch, probs = enum
        e = _expression(estimator, dist, batch, condition, fn)
        if e is None:
            return ConditionReport(name, condition, order, "exact", 0.0, EXACT_TOL, True, 0, {"note": "no control variate"})
        val = ad.evaluate(ad.differentiate(e, target, order))
        mean = ad.evaluate(ad.sum(ad.const(val) * ad.const(probs), plates=(OUTCOME,)))
        truth = _truth(dist, fn, target, order, condition)
        got = _flat(mean)
        dev = float(np.max(np.abs(got - truth)))
        mode_name = estimator.enumerable_mode
        tol = _tolerance(estimator, dist, truth)
        return ConditionReport(name, condition, order, mode_name, dev, tol, dev <= tol, int(probs.plate_sizes[OUTCOME]))

    if not dist.finite and condition == 1:
        return _condition1_paired(estimator, dist, fn, target, order, trials, chunk, rng, name)
    sums = None
    sq = None
    n = 0
    for c in range(math.ceil(trials / chunk)):
        size = min(chunk, trials - c * chunk)
        batch = estimator.propose(rng.stream("trials", c), dist, SAMPLE, {TRIAL: size})
        e = _expression(estimator, dist, batch, condition, fn)
        if e is None:
            return ConditionReport(name, condition, order, "monte-carlo", 0.0, 0.0, True, 0, {"note": "no control variate"})
        val = ad.evaluate(ad.differentiate(e, target, order))
        per = _per_trial(val, size)
        sums = per.sum(axis=0) if sums is None else sums + per.sum(axis=0)
        sq = (per**2).sum(axis=0) if sq is None else sq + (per**2).sum(axis=0)
        n += size
    mean = sums / n
    var = np.maximum(sq / n - mean**2, 0.0) * n / max(n - 1, 1)
    se = np.sqrt(var / n)
    truth = _truth(dist, fn, target, order, condition)
    dev, thr, z = _worst(mean - truth, se)
    thr += _tolerance(estimator, dist, truth) - EXACT_TOL
    return ConditionReport(name, condition, order, "monte-carlo", dev, thr, dev <= thr, n, {"max_z": z, "stderr": se.reshape(-1).tolist()})


def _worst(diff, se):
    """Deviation and threshold of the test with the largest excess over its 3-sigma band."""
    diff = np.abs(np.broadcast_to(diff, np.shape(se))).reshape(-1)
    thr = MC_SIGMAS * se.reshape(-1) + EXACT_TOL
    i = int(np.argmax(diff - thr))
    z = float(np.max(diff / np.maximum(se.reshape(-1), 1e-300)))
    return float(diff[i]), float(thr[i]), z


def _per_trial(val: Value, size) -> np.ndarray:
    """(trials, tests, rest...) flattened to (trials, tests * rest)."""
    if TRIAL not in val.plates:
        flat = _flat(val)
        return np.broadcast_to(flat, (size, flat.size)).copy()
    return _flat(val, (TRIAL,))


def _condition1_paired(est, dist, fn, target, order, trials, chunk, rng, name):
    """Continuous proposals: compare against the pathwise estimate on the same draws."""
    sums = sq = None
    n = 0
    for c in range(math.ceil(trials / chunk)):
        size = min(chunk, trials - c * chunk)
        batch = est.propose(rng.stream("trials", c), dist, SAMPLE, {TRIAL: size})
        x_expr = batch.extras.get("x_expr")
        if x_expr is None:
            raise OracleError(f"{name}: no oracle for a continuous proposal without a reparameterised draw")
        e = _expression(est, dist, batch, 1, fn)
        ref = fn(x_expr)
        if SAMPLE in ref.plates:
            ref = ad.sum(ref, plates=(SAMPLE,))
        diff = ad.evaluate(ad.differentiate(e - ref, target, order))
        per = _per_trial(diff, size)
        sums = per.sum(axis=0) if sums is None else sums + per.sum(axis=0)
        sq = (per**2).sum(axis=0) if sq is None else sq + (per**2).sum(axis=0)
        n += size
    mean = sums / n
    se = np.sqrt(np.maximum(sq / n - mean**2, 0.0) / max(n - 1, 1))
    dev, thr, z = _worst(mean, se)
    return ConditionReport(name, 1, order, "monte-carlo", dev, thr, dev <= thr, n, {"reference": "pathwise", "max_z": z})


def _tolerance(est, dist, truth) -> float:
    if getattr(est, "name", "") == "spsa":
        c = est.step(ad.evaluate(dist.probs).data)
        return EXACT_TOL + 10.0 * c * c * max(1.0, float(np.max(np.abs(truth))))
    return EXACT_TOL


def _condition4(est, dist, seed) -> ConditionReport:
    structural = not any(ad.contains_op(p, "stop_grad") for p in dist.parameters())
    a = est.propose(dists.RngStreams(seed).stream("c4"), dist, SAMPLE)
    b = est.propose(dists.RngStreams(seed).stream("c4"), frozen(dist), SAMPLE)
    va = a.values if isinstance(a.values, tuple) else (a.values,)
    vb = b.values if isinstance(b.values, tuple) else (b.values,)
    dev = max(float(np.max(np.abs(x.data - y.data))) for x, y in zip(va, vb))
    passed = structural and dev == 0.0
    return ConditionReport(est.name, 4, 0, "structural", dev, 0.0, passed, a.plate_size, {"structural": structural})


# ---------------------------------------------------------------- bias / variance


@dataclass
class Statistics:
    estimates: np.ndarray
    mean: np.ndarray
    variance: np.ndarray
    stderr: np.ndarray
    exact: np.ndarray | None
    bias: np.ndarray | None
    trials: int
    wall_time: float

    def scalar(self) -> dict:
        """First component of each statistic, JSON-friendly."""
        f = lambda a: None if a is None else float(np.reshape(a, -1)[0])  # noqa: E731
        return {
            "mean": f(self.mean),
            "bias": "n/a" if self.bias is None else f(self.bias),
            "variance": f(self.variance),
            "stderr": f(self.stderr),
            "trials": self.trials,
            "wall_time": self.wall_time,
        }


def _chunk_estimates(graph, cost, partitioning, estimators, target, order, seed, index, size, allow_bias):
    from .surrogate import build_context, estimate_gradient

    ests = copy.deepcopy(list(estimators))
    rng = dists.RngStreams(seed).stream("bias_variance", index)
    ctx = build_context(graph, cost, partitioning, ests, rng, outer={TRIAL: size}, target=target, allow_bias=allow_bias)
    val = estimate_gradient(ctx, order)
    if TRIAL not in val.plates:
        flat = val.data.reshape(1, -1)
        return np.broadcast_to(flat, (size, flat.shape[1])).copy()
    rest = tuple(p for p in val.plates if p != TRIAL)
    return val.aligned((TRIAL,) + rest).reshape(size, -1)


def bias_variance(graph, cost, partitioning, estimators, target, order, trials, seed=0, *, threads=1, chunk=DEFAULT_CHUNK, allow_bias=False) -> Statistics:
    if trials < 2:
        raise OracleError("bias_variance needs at least two trials")
    for est in estimators:
        est.check_order(order, allow_bias)
    start = time.perf_counter()
    sizes = [min(chunk, trials - i * chunk) for i in range(math.ceil(trials / chunk))]
    args = [(graph, cost, partitioning, estimators, target, order, seed, i, s, allow_bias) for i, s in enumerate(sizes)]
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            parts = list(pool.map(lambda a: _chunk_estimates(*a), args))
    else:
        parts = [_chunk_estimates(*a) for a in args]
    est = np.concatenate(parts, axis=0)
    mean = est.mean(axis=0)
    var = est.var(axis=0, ddof=1)
    se = np.sqrt(var / trials)
    try:
        exact = exact_gradient(graph, cost, target, order).data.reshape(-1)
        bias = mean - exact
    except (OracleError, dists.DistributionError):
        exact = bias = None
    return Statistics(est, mean, var, se, exact, bias, trials, time.perf_counter() - start)
