"""Gradient estimators as (proposal, weight, gradient function, control variate).

Every estimator works on one partition at a time.  ``propose`` draws a
:class:`SampleBatch` whose values carry a new plate; ``weight``, ``grad_fn``
and ``control_variate`` map a :class:`BatchContext` to expressions on the same
plates.  ``None`` stands for the neutral element (weight one, zero gradient
function, no control variate).

``enumerate`` returns the complete outcome space of the proposal on an extra
``outcome`` plate together with the outcome probabilities, which lets the
oracle compute exact expectations over proposals.  It returns ``None`` when
the proposal is continuous and has no quadrature rule.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import adcore as ad
from . import distributions as dists
from .adcore import Expression, Value
from .distributions import Bernoulli, Categorical, Distribution, Logistic, ProductOfIndependents

OUTCOME = "outcome"
INF = math.inf


class EstimatorError(ValueError):
    pass


class BiasedOrderError(EstimatorError):
    """Raised when a derivative order exceeds an estimator's declared unbiased order."""


# ---------------------------------------------------------------- containers


@dataclass
class SampleBatch:
    values: object  # Value, or tuple of Values for product partitions
    plate_name: str
    plate_size: int
    extras: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.plate_size < 1:
            raise EstimatorError("a sample batch needs at least one value")


@dataclass
class BatchContext:
    """Everything a weight, gradient function or control variate may look at.

    ``cost`` is the per-sample downstream value (the cost itself for the last
    partition of a cost node, otherwise the inner estimate).  ``cost_fn``
    recomputes the cost with this partition's values replaced; it is only
    available when no later partition sits between this one and the cost.
    """

    dist: Distribution
    batch: SampleBatch
    cost: Expression | None = None
    cost_fn: Callable[[object], Expression] | None = None

    @property
    def values(self):
        return self.batch.values

    @property
    def plate(self) -> str:
        return self.batch.plate_name

    def require_cost_fn(self, who: str):
        if self.cost_fn is None:
            raise EstimatorError(f"{who} needs to re-evaluate the cost, so its partition must be the last one")
        return self.cost_fn


def _vmap(fn, values):
    if isinstance(values, tuple):
        return tuple(fn(v) for v in values)
    return fn(values)


def _lp(dist, values) -> Expression:
    return dist.log_prob(values)


def _check_finite(dist, who):
    if not dist.finite:
        raise EstimatorError(f"{who} needs a finite-discrete distribution")


def _gather_outcomes(dist, idx: np.ndarray, plate: str) -> object:
    """Support indices of shape (outcomes, plate) -> native values on (OUTCOME, plate)."""
    return dist.gather(Value(idx.astype(np.float64), (OUTCOME, plate)))


def _tuple_probs(table: Value, idx: np.ndarray) -> Value:
    """Product over the plate axis of table[..., idx[o, j]] -> plates table.plates + (OUTCOME,)."""
    t = table.data
    picked = t[..., idx]  # (..., outcomes, m)
    return Value(np.prod(picked, axis=-1), table.plates + (OUTCOME,))


def _constant_weight(m: int) -> Expression:
    return ad.const(1.0 / m)


def _magic_minus_one_times(l: Expression, b: Expression) -> Expression:
    """(1 - box(l)) * b, the standard baseline form."""
    return (1.0 - ad.magic_box(l)) * b


# ---------------------------------------------------------------- base class


class GradientEstimator:
    name = "estimator"
    unbiased_orders: float = INF
    cv_orders: float = INF
    enumerable_mode = "exact"

    def spec(self) -> dict:
        return {"kind": self.name}

    def check(self, dist: Distribution) -> None:
        """Raise if ``dist`` violates this estimator's preconditions."""

    def propose(self, rng, dist: Distribution, plate: str, outer=None) -> SampleBatch:
        raise NotImplementedError

    def enumerate(self, dist: Distribution, plate: str):
        return None

    def weight(self, ctx: BatchContext) -> Expression | None:
        return None

    def grad_fn(self, ctx: BatchContext) -> Expression | None:
        return None

    def control_variate(self, ctx: BatchContext, L: Expression | None = None) -> Expression | None:
        return None

    def check_order(self, order: int, allow_bias: bool = False) -> None:
        if order > self.unbiased_orders and not allow_bias:
            raise BiasedOrderError(
                f"{self.name} is unbiased up to order {self.unbiased_orders}; order {order} requested"
            )

    def __repr__(self):
        return f"{type(self).__name__}({self.spec()})"


# ---------------------------------------------------------------- enumeration


class Enumeration(GradientEstimator):
    name = "enumeration"

    def check(self, dist):
        _check_finite(dist, self.name)
        if dist.support_size > dists.DEFAULT_SUPPORT_CAP:
            raise dists.SupportCapExceeded("support too large to enumerate")

    def propose(self, rng, dist, plate, outer=None):
        self.check(dist)
        vals = dist.support_values(plate)
        return SampleBatch(vals, plate, dist.support_size)

    def enumerate(self, dist, plate):
        batch = self.propose(None, dist, plate)
        vals = _vmap(lambda v: Value(v.data[None], (OUTCOME,) + v.plates), batch.values)
        return SampleBatch(vals, plate, batch.plate_size), Value(np.ones(1), (OUTCOME,))

    def weight(self, ctx):
        return ad.exp(_lp(ctx.dist, ctx.values))


def make_enumeration() -> GradientEstimator:
    return Enumeration()


# ---------------------------------------------------------------- score function


BASELINES = ("none", "moving_average", "leave_one_out", "self_critic")


class ScoreFunction(GradientEstimator):
    name = "score"

    def __init__(self, m: int = 1, baseline: str = "none", decay: float = 0.95, weight_scale: float = 1.0):
        if m < 1:
            raise EstimatorError("m must be at least 1")
        if baseline not in BASELINES:
            raise EstimatorError(f"unknown baseline {baseline!r}")
        if baseline == "leave_one_out" and m < 2:
            raise EstimatorError("the leave-one-out baseline needs m >= 2")
        self.m = int(m)
        self.baseline = baseline
        self.decay = float(decay)
        self.weight_scale = float(weight_scale)
        self.state = 0.0

    def spec(self):
        out = {"kind": self.name, "m": self.m, "baseline": self.baseline}
        if self.baseline == "moving_average":
            out["decay"] = self.decay
        if self.weight_scale != 1.0:
            out["weight_scale"] = self.weight_scale
        return out

    def propose(self, rng, dist, plate, outer=None):
        return SampleBatch(dist.sample(rng, self.m, plate, outer), plate, self.m)

    def enumerate(self, dist, plate):
        if not dist.finite:
            return None
        S = dist.support_size
        idx = np.array(list(itertools.product(range(S), repeat=self.m)))
        vals = _gather_outcomes(dist, idx, plate)
        return SampleBatch(vals, plate, self.m), _tuple_probs(dist.probs_table(), idx)

    def weight(self, ctx):
        return ad.const(self.weight_scale / self.m)

    def grad_fn(self, ctx):
        return _lp(ctx.dist, ctx.values)

    def baseline_value(self, ctx) -> Expression | None:
        if self.baseline == "none":
            return None
        if self.baseline == "leave_one_out":
            c = ctx.cost
            if c is None:
                raise EstimatorError("leave-one-out baseline needs the per-sample cost")
            return ad.stop_grad((ad.sum(c, plates=(ctx.plate,)) - c) / float(self.m - 1))
        if self.baseline == "moving_average":
            b = ad.const(self.state)
            if ctx.cost is not None:
                self.state = self.decay * self.state + (1.0 - self.decay) * float(np.mean(ad.evaluate(ctx.cost).data))
            return b
        # self critic: cost at the argmax decode of the distribution
        fn = ctx.require_cost_fn("self-critic baseline")
        return ad.stop_grad(fn(argmax_decode(ctx.dist)))

    def control_variate(self, ctx, L=None):
        b = self.baseline_value(ctx)
        if b is None:
            return None
        return _magic_minus_one_times(self.grad_fn(ctx), b)


def argmax_decode(dist: Distribution):
    """Most probable support point per plate element; ties go to the lowest index."""
    _check_finite(dist, "argmax decoding")
    table = dist.probs_table()
    idx = np.argmax(table.data, axis=-1)  # argmax returns the first maximum
    return dist.gather(Value(idx.astype(np.float64), table.plates))


def make_score_function(m: int = 1, baseline: str = "none", decay: float = 0.95, **kw) -> GradientEstimator:
    return ScoreFunction(m, baseline, decay, **kw)


# ---------------------------------------------------------------- importance sampling


class ImportanceSampling(GradientEstimator):
    name = "importance"

    def __init__(self, proposal_builder: Callable[[Distribution], Distribution], m: int = 1, label: str = "custom"):
        self.proposal_builder = proposal_builder
        self.m = int(m)
        self.label = label

    def spec(self):
        return {"kind": self.name, "proposal": self.label, "m": self.m}

    def check(self, dist):
        q = self.proposal_builder(dist)
        if dist.finite and q.finite:
            tp, tq = dist.probs_table(), q.probs_table()
            if tp.data.shape[-1] != tq.data.shape[-1]:
                raise EstimatorError("proposal and target supports differ")
            p_b = np.broadcast_arrays(tp.data, tq.data)
            if np.any((p_b[0] > 0) & (p_b[1] <= 0)):
                raise EstimatorError("proposal assigns zero mass to part of the target support")

    def propose(self, rng, dist, plate, outer=None):
        q = self.proposal_builder(dist)
        vals = q.sample(rng, self.m, plate, outer)
        return SampleBatch(vals, plate, self.m, {"proposal": q})

    def enumerate(self, dist, plate):
        q = self.proposal_builder(dist)
        if not q.finite:
            return None
        S = q.support_size
        idx = np.array(list(itertools.product(range(S), repeat=self.m)))
        vals = _gather_outcomes(q, idx, plate)
        return SampleBatch(vals, plate, self.m, {"proposal": q}), _tuple_probs(q.probs_table(), idx)

    def weight(self, ctx):
        q = ctx.batch.extras.get("proposal") or self.proposal_builder(ctx.dist)
        log_q = ad.evaluate(q.log_prob(ctx.values))
        ratio = ad.exp(_lp(ctx.dist, ctx.values) - ad.const(log_q))
        return ad.stop_grad(ratio) * (1.0 / self.m)

    def grad_fn(self, ctx):
        return _lp(ctx.dist, ctx.values)


def make_importance_sampling(proposal_builder, m: int = 1, label: str = "custom") -> GradientEstimator:
    return ImportanceSampling(proposal_builder, m, label)


# ---------------------------------------------------------------- sum and sample


class SumAndSample(GradientEstimator):
    """Sum over a fixed set and sample the remaining budget from the complement.

    The summed entries use the differentiable mass as weight and no gradient
    function.  The sampled entries use the differentiable complement mass
    divided by the number of draws as weight and the score of the
    complement-conditional distribution as gradient function.
    """

    name = "sum_and_sample"

    def __init__(self, summed_set, k: int):
        self.summed = list(summed_set)
        self.k = int(k)
        if not self.summed:
            raise EstimatorError("the summed set must be non-empty")
        if self.k <= len(self.summed):
            raise EstimatorError("k must exceed the size of the summed set")

    def spec(self):
        return {"kind": self.name, "summed": self.summed, "k": self.k}

    def _indices(self, dist):
        _check_finite(dist, self.name)
        support = dist.support_list()
        pos = {v: i for i, v in enumerate(support)}
        try:
            idx = [pos[_hashable(x)] for x in self.summed]
        except KeyError as exc:
            raise EstimatorError(f"{exc.args[0]!r} is not in the support") from None
        if len(set(idx)) != len(idx):
            raise EstimatorError("the summed set has duplicates")
        if len(idx) >= len(support):
            raise EstimatorError("the summed set covers the full support; use enumeration instead")
        return np.array(idx)

    def _complement_table(self, dist):
        idx = self._indices(dist)
        table = dist.probs_table()
        comp = table.data.copy()
        comp[..., idx] = 0.0
        mass = comp.sum(axis=-1, keepdims=True)
        if np.any(mass <= 0):
            raise EstimatorError("the complement of the summed set has zero mass")
        return idx, Value(comp / mass, table.plates)

    def check(self, dist):
        self._complement_table(dist)

    @property
    def n_sampled(self):
        return self.k - len(self.summed)

    def propose(self, rng, dist, plate, outer=None):
        idx, comp = self._complement_table(dist)
        rng = dists.make_rng(rng)
        plates, sizes = dists._out_layout(comp.plates, comp.plate_sizes, outer)
        c = dists._expand(comp, plates, sizes, 1)
        lead = c.shape[:-1]
        cdf = np.cumsum(c, axis=-1)[..., None, :]
        u = rng.random(lead + (self.n_sampled, 1))
        drawn = np.minimum((u >= cdf).sum(axis=-1), c.shape[-1] - 1)
        fixed = np.broadcast_to(idx, lead + (len(idx),))
        all_idx = np.concatenate([fixed, drawn], axis=-1).astype(np.float64)
        vals = dist.gather(Value(all_idx, plates + (plate,)))
        return SampleBatch(vals, plate, self.k)

    def enumerate(self, dist, plate):
        idx, comp = self._complement_table(dist)
        support = [i for i in range(comp.data.shape[-1]) if i not in set(idx.tolist())]
        tuples = np.array(list(itertools.product(support, repeat=self.n_sampled)))
        full = np.concatenate([np.broadcast_to(idx, (len(tuples), len(idx))), tuples], axis=1)
        vals = _gather_outcomes(dist, full, plate)
        return SampleBatch(vals, plate, self.k), _tuple_probs(comp, tuples)

    def _masks(self, plate):
        h = len(self.summed)
        m_in = np.zeros(self.k)
        m_in[:h] = 1.0
        return ad.const(m_in, (plate,)), ad.const(1.0 - m_in, (plate,))

    def _out_mass(self, dist):
        summed = dist.gather(Value(self._indices(dist).astype(np.float64), ("_summed",)))
        inside = ad.sum(ad.exp(_lp(dist, summed)), plates=("_summed",))
        return 1.0 - inside

    def weight(self, ctx):
        m_in, m_out = self._masks(ctx.plate)
        p = ad.exp(_lp(ctx.dist, ctx.values))
        return m_in * p + m_out * (self._out_mass(ctx.dist) * (1.0 / self.n_sampled))

    def grad_fn(self, ctx):
        _, m_out = self._masks(ctx.plate)
        return m_out * (_lp(ctx.dist, ctx.values) - ad.log(self._out_mass(ctx.dist)))


def _hashable(x):
    if isinstance(x, list):
        return tuple(x)
    return x


def make_sum_and_sample(summed_set, k: int) -> GradientEstimator:
    return SumAndSample(summed_set, k)


# ---------------------------------------------------------------- unordered set


class UnorderedSet(GradientEstimator):
    """Ordered sample without replacement, reweighted as an unordered set.

    With ``baseline=True`` the leave-one-out style control variate is added.
    Its own-sample term enters with unit ratio, which keeps it mean-zero at
    first order; it is not claimed to be mean-zero beyond first order.
    """

    name = "unordered_set"

    def __init__(self, k: int, baseline: bool = True):
        if k < 1:
            raise EstimatorError("k must be at least 1")
        self.k = int(k)
        self.use_baseline = bool(baseline)
        self.cv_orders = 1 if baseline else INF
        self.unbiased_orders = 1 if baseline else INF

    def spec(self):
        return {"kind": self.name, "k": self.k, "baseline": self.use_baseline}

    def check(self, dist):
        _check_finite(dist, self.name)
        if self.k > dist.support_size:
            raise EstimatorError(f"k={self.k} exceeds the support size {dist.support_size}")

    def _with_probs(self, dist, idx: Value, plate):
        table = dist.probs_table()
        plates = idx.plates[:-1]
        sizes = idx.plate_sizes
        t = dists._expand(table, plates, sizes, 1)
        q = np.take_along_axis(t, idx.data.astype(int), axis=-1)
        pU, p1, p12 = dists.set_probabilities(q)
        return {"q": Value(q, idx.plates), "pU": pU, "p1": p1, "p12": p12, "index_plates": plates}

    def propose(self, rng, dist, plate, outer=None):
        self.check(dist)
        idx = dists.sample_without_replacement_indices(dist.probs_table(), rng, self.k, plate, outer)
        extras = self._with_probs(dist, idx, plate)
        return SampleBatch(dist.gather(idx), plate, self.k, extras)

    def enumerate(self, dist, plate):
        self.check(dist)
        S = dist.support_size
        perms = np.array(list(itertools.permutations(range(S), self.k)))
        table = dist.probs_table()
        t = table.data
        picked = t[..., perms]  # (..., outcomes, k)
        prob = np.ones(picked.shape[:-1])
        used = np.zeros(picked.shape[:-1])
        for j in range(self.k):
            prob = prob * picked[..., j] / (1.0 - used)
            used = used + picked[..., j]
        idx = Value(np.broadcast_to(perms, t.shape[:-1] + perms.shape).astype(np.float64), table.plates + (OUTCOME, plate))
        extras = self._with_probs(dist, idx, plate)
        vals = _gather_outcomes(dist, perms, plate)
        return SampleBatch(vals, plate, self.k, extras), Value(prob, table.plates + (OUTCOME,))

    def weight(self, ctx):
        ex = ctx.batch.extras
        w = ex["q"].data * ex["p1"] / ex["pU"][..., None]
        return ad.const(w, ex["q"].plates)

    def grad_fn(self, ctx):
        return _lp(ctx.dist, ctx.values)

    def control_variate(self, ctx, L=None):
        if not self.use_baseline or self.k < 2:
            return None
        if ctx.cost is None:
            raise EstimatorError("the unordered-set baseline needs the per-sample cost")
        ex = ctx.batch.extras
        q, p1, p12 = ex["q"].data, ex["p1"], ex["p12"]
        ratio = q[..., None, :] * p12 / p1[..., :, None]
        k = self.k
        diag = np.arange(k)
        ratio[..., diag, diag] = q  # own-sample term, unit conditional ratio
        plates = ex["q"].plates  # (..., plate)
        other = "_cv_other"
        R = ad.const(ratio, plates + (other,))  # axes (..., i=plate, j=other)
        f_other = ad.rename_plate(ad.stop_grad(ctx.cost), ctx.plate, other)
        b = ad.sum(R * f_other, plates=(other,))
        return _magic_minus_one_times(self.grad_fn(ctx), ad.stop_grad(b))


def make_unordered_set(k: int, baseline: bool = True) -> GradientEstimator:
    return UnorderedSet(k, baseline)


# ---------------------------------------------------------------- LAX / RELAX / REBAR


def bernoulli_relaxed_sampler(dist: Bernoulli, rng, n, plate, outer=None):
    """Relaxed sample z, its hard threshold x and the conditional relaxation z~.

    z = alpha + logit(u) with x = 1[z > 0];  z~ reuses the same x with a fresh
    uniform v mapped into the region consistent with x.  Both z and z~ depend
    on the logits pathwise.
    """
    rng = dists.make_rng(rng)
    theta = dist.probs
    alpha = dist.logits if dist.logits is not None else ad.log(theta) - ad.log(1.0 - theta)
    tv = ad.evaluate(theta)
    plates, sizes = dists._out_layout(tv.plates, tv.plate_sizes, outer)
    ev = dist.event_shape
    lead = tuple(sizes[p] for p in plates)
    u = rng.random(lead + (n,) + ev)
    v = rng.random(lead + (n,) + ev)
    out_plates = plates + (plate,)
    t_full = dists._expand(tv, plates, sizes, len(ev))
    t_full = t_full.reshape(t_full.shape[: len(plates)] + (1,) + ev)
    x = (u > 1.0 - t_full).astype(np.float64)
    uc = ad.const(u, out_plates)
    vc = ad.const(v, out_plates)
    xc = ad.const(x, out_plates)
    z = alpha + ad.log(uc) - ad.log(1.0 - uc)
    u_t = xc * ((1.0 - theta) + vc * theta) + (1.0 - xc) * (vc * (1.0 - theta))
    one_minus = xc * (theta * (1.0 - vc)) + (1.0 - xc) * (1.0 - vc * (1.0 - theta))
    z_tilde = alpha + ad.log(u_t) - ad.log(one_minus)
    return z, Value(x, out_plates), z_tilde


def logistic_reparam_sampler(dist: Logistic, rng, n, plate, outer=None):
    """Reparameterised logistic draw: returns (x expression, x value)."""
    rng = dists.make_rng(rng)
    loc, scale = ad.evaluate(dist.loc), ad.evaluate(dist.scale)
    plates, sizes = dists._out_layout(*ad._merge_plates([dist.loc, dist.scale]), outer)
    ev = dist.event_shape
    lead = tuple(sizes[p] for p in plates)
    u = rng.random(lead + (n,) + ev)
    eps = ad.const(np.log(u) - np.log1p(-u), plates + (plate,))
    x_expr = dist.loc + dist.scale * eps
    return x_expr, ad.evaluate(x_expr)


class Relax(GradientEstimator):
    """LAX and RELAX control variates on top of a single-sample score function.

    ``surrogate_fn`` maps a (plated) expression of relaxed values to a
    per-sample expression.  With ``rebar=True`` the surrogate is the cost
    itself evaluated at sigmoid(z / temperature).
    """

    name = "relax"

    def __init__(self, surrogate_fn=None, relaxed_sampler=None, variant: str = "relax", rebar: bool = False, temperature: float = 0.5, label: str = "custom", form: str = "any_order"):
        if variant not in ("lax", "relax"):
            raise EstimatorError(f"unknown variant {variant!r}")
        if form not in ("any_order", "literal"):
            raise EstimatorError(f"unknown form {form!r}")
        self.form = form
        if variant == "relax" and form == "literal":
            self.unbiased_orders = 1
            self.cv_orders = 1
        if variant == "relax" and relaxed_sampler is None:
            relaxed_sampler = bernoulli_relaxed_sampler
        if variant == "lax" and relaxed_sampler is None:
            relaxed_sampler = logistic_reparam_sampler
        if surrogate_fn is None and not rebar:
            raise EstimatorError("a surrogate function is required unless rebar=True")
        self.surrogate_fn = surrogate_fn
        self.sampler = relaxed_sampler
        self.variant = variant
        self.rebar = rebar
        self.temperature = float(temperature)
        self.label = label

    def spec(self):
        return {"kind": self.name, "variant": self.variant, "rebar": self.rebar, "surrogate": self.label, "form": self.form}

    def check(self, dist):
        if self.variant == "relax" and not isinstance(dist, Bernoulli):
            raise EstimatorError("RELAX is implemented for Bernoulli targets")
        if self.variant == "lax" and not isinstance(dist, Logistic):
            raise EstimatorError("LAX needs a reparameterisable (logistic) target")

    def propose(self, rng, dist, plate, outer=None):
        self.check(dist)
        if self.variant == "lax":
            x_expr, x = self.sampler(dist, rng, 1, plate, outer)
            return SampleBatch(x, plate, 1, {"x_expr": x_expr})
        z, x, z_tilde = self.sampler(dist, rng, 1, plate, outer)
        return SampleBatch(x, plate, 1, {"z": z, "z_tilde": z_tilde})

    def weight(self, ctx):
        return None

    def grad_fn(self, ctx):
        return _lp(ctx.dist, ctx.values)

    def _c(self, ctx, relaxed):
        if self.rebar:
            fn = ctx.require_cost_fn("REBAR")
            return fn(ad.sigmoid(relaxed * (1.0 / self.temperature)))
        return self.surrogate_fn(relaxed)

    def control_variate(self, ctx, L=None):
        box = ad.magic_box(self.grad_fn(ctx))
        ex = ctx.batch.extras
        if self.variant == "lax":
            c = self._c(ctx, ex["x_expr"])
            return c - box * ad.stop_grad(c)
        cz = self._c(ctx, ex["z"])
        czt = self._c(ctx, ex["z_tilde"])
        if self.form == "literal":
            return cz - ad.stop_grad(cz) - czt + (2.0 - box) * ad.stop_grad(czt)
        # box(l) c(z~) without a stop-grad keeps the cross terms of higher derivatives
        return cz - ad.stop_grad(cz) - box * czt + ad.stop_grad(czt)


def make_relax(surrogate_fn=None, relaxed_sampler=None, variant: str = "relax", rebar: bool = False, **kw) -> GradientEstimator:
    return Relax(surrogate_fn, relaxed_sampler, variant, rebar, **kw)


# ---------------------------------------------------------------- ARM


def _logistic_log_density(z: Expression, alpha: Expression) -> Expression:
    d = z - alpha
    return ad.neg(d) - 2.0 * ad.softplus(ad.neg(d))


class ARM(GradientEstimator):
    """Antithetic logistic estimator for Bernoulli variables given by logits."""

    name = "arm"
    unbiased_orders = 1
    cv_orders = 1
    enumerable_mode = "quadrature"

    def __init__(self, quadrature_points: int = 64):
        self.quadrature_points = int(quadrature_points)

    def check(self, dist):
        if not isinstance(dist, Bernoulli) or dist.logits is None:
            raise EstimatorError("ARM needs a Bernoulli distribution parameterised by logits")

    def propose(self, rng, dist, plate, outer=None):
        self.check(dist)
        rng = dists.make_rng(rng)
        a = ad.evaluate(dist.logits)
        plates, sizes = dists._out_layout(a.plates, a.plate_sizes, outer)
        ev = dist.event_shape
        lead = tuple(sizes[p] for p in plates)
        u = rng.random(lead + (1,) + ev)
        eps = np.log(u) - np.log1p(-u)
        return self._batch(dist, Value(eps, plates + (plate,)), plate)

    def _batch(self, dist, eps: Value, plate):
        a = ad.evaluate(dist.logits)
        nd = len(dist.event_shape)
        ad_ = ad._align(a.data, a.plates, eps.plates, nd, eps.plate_sizes)
        x = (ad_ + eps.data > 0).astype(np.float64)
        xt = (ad_ - eps.data > 0).astype(np.float64)
        z = ad_ + eps.data
        return SampleBatch(Value(x, eps.plates), plate, 1, {"eps": eps, "z": Value(z, eps.plates), "x_tilde": Value(xt, eps.plates)})

    def quadrature(self, dist, plate, n=None):
        """Piecewise Gauss-Legendre nodes over the logistic CDF, split where x or x~ flips."""
        self.check(dist)
        n = n or self.quadrature_points
        a = ad.evaluate(dist.logits)
        if a.plates:
            raise EstimatorError("quadrature needs unplated logits")
        alphas = a.data.reshape(-1)
        if alphas.size > 2:
            raise EstimatorError("quadrature is limited to two Bernoulli components")
        per_dim = []
        for al in alphas:
            cuts = sorted({0.0, 1.0, 1.0 / (1.0 + math.exp(al)), 1.0 / (1.0 + math.exp(-al))})
            segs = [(lo, hi) for lo, hi in zip(cuts[:-1], cuts[1:]) if hi - lo > 1e-15]
            k = max(2, n // len(segs))
            gx, gw = np.polynomial.legendre.leggauss(k)
            nodes, weights = [], []
            for lo, hi in segs:
                nodes.append(lo + (gx + 1.0) * (hi - lo) / 2.0)
                weights.append(gw * (hi - lo) / 2.0)
            u = np.concatenate(nodes)
            per_dim.append((np.log(u) - np.log1p(-u), np.concatenate(weights)))
        grids = list(itertools.product(*[range(len(w)) for _, w in per_dim]))
        eps = np.array([[per_dim[d][0][g[d]] for d in range(len(per_dim))] for g in grids])
        wts = np.array([math.prod(per_dim[d][1][g[d]] for d in range(len(per_dim))) for g in grids])
        eps = eps.reshape((len(grids), 1) + dist.event_shape)
        return self._batch(dist, Value(eps, (OUTCOME, plate)), plate), Value(wts, (OUTCOME,))

    def enumerate(self, dist, plate):
        return self.quadrature(dist, plate)

    def grad_fn(self, ctx):
        z = ad.const(ctx.batch.extras["z"])
        lq = _logistic_log_density(z, ctx.dist.logits)
        nd = len(lq.event_shape)
        return ad.sum(lq, axes=range(nd)) if nd else lq

    def control_variate(self, ctx, L=None):
        fn = ctx.require_cost_fn("ARM")
        f = ctx.cost
        f_t = fn(ctx.batch.extras["x_tilde"])
        b = ad.stop_grad((f + f_t) * 0.5)
        return _magic_minus_one_times(self.grad_fn(ctx), b)


def make_arm(quadrature_points: int = 64) -> GradientEstimator:
    return ARM(quadrature_points)


# ---------------------------------------------------------------- GO (discrete)


def class_probs(dist: Distribution) -> Expression:
    """Per-component class probabilities with the classes on the last axis."""
    if isinstance(dist, Categorical):
        return dist.probs
    if isinstance(dist, Bernoulli):
        p = ad.expand_last(dist.probs)
        return (1.0 - p) * np.array([1.0, 0.0]) + p * np.array([0.0, 1.0])
    raise EstimatorError("GO needs categorical or Bernoulli components")


class GODiscrete(GradientEstimator):
    """Single-sample score function plus the GO control variate (first order)."""

    name = "go"
    unbiased_orders = 1
    cv_orders = 1

    def check(self, dist):
        if not isinstance(dist, (Categorical, Bernoulli)):
            raise EstimatorError("GO needs a product of independent categorical components")

    def propose(self, rng, dist, plate, outer=None):
        self.check(dist)
        return SampleBatch(dist.sample(rng, 1, plate, outer), plate, 1)

    def enumerate(self, dist, plate):
        self.check(dist)
        S = dist.support_size
        idx = np.arange(S).reshape(S, 1)
        return SampleBatch(_gather_outcomes(dist, idx, plate), plate, 1), _tuple_probs(dist.probs_table(), idx)

    def grad_fn(self, ctx):
        return _lp(ctx.dist, ctx.values)

    def control_variate(self, ctx, L=None):
        fn = ctx.require_cost_fn("GO")
        dist = ctx.dist
        probs = class_probs(dist)  # (..., J..., K)
        K = probs.event_shape[-1]
        x = ctx.values
        xi = x.data.astype(int)
        comp_shape = dist.event_shape
        n_comp = int(np.prod(comp_shape, dtype=int))
        onehot = np.eye(K)[xi]
        cum_mask = (np.arange(K) <= xi[..., None]).astype(np.float64)
        P = ad.sum(probs * ad.const(cum_mask, x.plates), axes=(-1,))  # CDF at x_j
        p_at = ad.sum(probs * ad.const(onehot, x.plates), axes=(-1,))  # p_j(x_j)
        f = ctx.cost
        total = None
        for j in range(n_comp):
            sel = np.zeros(n_comp)
            sel[j] = 1.0
            sel = sel.reshape(comp_shape)
            below = (xi < K - 1).astype(np.float64)
            up = x.data + sel * below
            f_up = fn(Value(up, x.plates))
            mask = below * sel if comp_shape else below
            mask_c = ad.const(mask, x.plates)
            ratio = ad.stop_grad((f - f_up) / p_at) if not comp_shape else None
            if comp_shape:
                # pick component j of P and p_at via the selector
                Pj = ad.sum(P * sel, axes=range(len(comp_shape)))
                pj = ad.sum(p_at * sel, axes=range(len(comp_shape)))
                mj = ad.const((below * sel).reshape(below.shape).sum(axis=tuple(range(-len(comp_shape), 0))), x.plates)
                term = mj * ad.stop_grad((f - f_up) / pj) * (ad.magic_box(Pj) - 1.0)
            else:
                term = mask_c * ratio * (ad.magic_box(P) - 1.0)
            total = term if total is None else total + term
        score = ad.stop_grad(f) * (ad.magic_box(self.grad_fn(ctx)) - 1.0)
        return total - score


def make_go_discrete() -> GradientEstimator:
    return GODiscrete()


# ---------------------------------------------------------------- SPSA


class SPSA(GradientEstimator):
    """Simultaneous perturbation on the probability parameter of a Bernoulli.

    The plate holds one draw from p(theta + c eps) and one from
    p(theta - c eps).  Weights are self-normalised importance ratios with a
    factor one half, and the gradient functions cancel them so that the first
    derivative evaluates to the central difference.
    """

    name = "spsa"
    unbiased_orders = 1
    cv_orders = 1

    def __init__(self, c: float | None = None):
        if c is not None and c <= 0:
            raise EstimatorError("c must be positive")
        self.c = c

    def spec(self):
        return {"kind": self.name, "c": self.c}

    def check(self, dist):
        if not isinstance(dist, Bernoulli):
            raise EstimatorError("SPSA is implemented for Bernoulli probability parameters")

    def step(self, theta: np.ndarray) -> float:
        if self.c is not None:
            return float(self.c)
        return 0.1 * float(np.min(np.minimum(theta, 1.0 - theta)))

    def _perturbed(self, theta, c, eps):
        plus, minus = theta + c * eps, theta - c * eps
        if np.any(plus <= 0) or np.any(plus >= 1) or np.any(minus <= 0) or np.any(minus >= 1):
            raise EstimatorError("perturbation leaves the parameter domain (0, 1)")
        return plus, minus

    def _assemble(self, dist, x_plus, x_minus, eps, plus, minus, plates, plate, c):
        """Stack the two draws on the plate and record the proposal masses."""
        x = np.stack([x_plus, x_minus], axis=len(plates))
        q_plus = np.where(x_plus == 1, plus, 1 - plus)
        q_minus = np.where(x_minus == 1, minus, 1 - minus)
        ev_axes = tuple(range(len(plates), x_plus.ndim))
        qp = np.prod(q_plus, axis=ev_axes) if ev_axes else q_plus
        qm = np.prod(q_minus, axis=ev_axes) if ev_axes else q_minus
        q = np.stack([qp, qm], axis=len(plates))
        sign = np.array([1.0, -1.0])
        return SampleBatch(
            Value(x, plates + (plate,)),
            plate,
            2,
            {"q": Value(q, plates + (plate,)), "eps": Value(eps, plates), "sign": Value(sign, (plate,)), "c": c},
        )

    def propose(self, rng, dist, plate, outer=None):
        self.check(dist)
        rng = dists.make_rng(rng)
        tv = ad.evaluate(dist.probs)
        c = self.step(tv.data)
        plates, sizes = dists._out_layout(tv.plates, tv.plate_sizes, outer)
        ev = dist.event_shape
        theta = dists._expand(tv, plates, sizes, len(ev))
        eps = rng.choice(np.array([-1.0, 1.0]), size=theta.shape)
        plus, minus = self._perturbed(theta, c, eps)
        x_plus = (rng.random(theta.shape) < plus).astype(np.float64)
        x_minus = (rng.random(theta.shape) < minus).astype(np.float64)
        return self._assemble(dist, x_plus, x_minus, eps, plus, minus, plates, plate, c)

    def enumerate(self, dist, plate):
        self.check(dist)
        tv = ad.evaluate(dist.probs)
        if tv.plates:
            return None
        c = self.step(tv.data)
        ev = dist.event_shape
        d = int(np.prod(ev, dtype=int))
        theta = tv.data.reshape(-1)
        rows_eps, rows_xp, rows_xm, probs = [], [], [], []
        for eps in itertools.product((-1.0, 1.0), repeat=d):
            eps = np.array(eps)
            plus, minus = self._perturbed(theta, c, eps)
            for xp in itertools.product((0.0, 1.0), repeat=d):
                for xm in itertools.product((0.0, 1.0), repeat=d):
                    xp_a, xm_a = np.array(xp), np.array(xm)
                    pr = 0.5**d * np.prod(np.where(xp_a == 1, plus, 1 - plus)) * np.prod(np.where(xm_a == 1, minus, 1 - minus))
                    rows_eps.append(eps)
                    rows_xp.append(xp_a)
                    rows_xm.append(xm_a)
                    probs.append(pr)
        n = len(probs)
        shape = (n,) + ev
        E = np.array(rows_eps).reshape(shape)
        th = np.broadcast_to(theta.reshape(ev), shape)
        plus, minus = th + c * E, th - c * E
        batch = self._assemble(dist, np.array(rows_xp).reshape(shape), np.array(rows_xm).reshape(shape), E, plus, minus, (OUTCOME,), plate, c)
        return batch, Value(np.array(probs), (OUTCOME,))

    def weight(self, ctx):
        q = ctx.batch.extras["q"]
        p = ad.exp(_lp(ctx.dist, ctx.values))
        return ad.stop_grad(p) * ad.const(0.5 / q.data, q.plates)

    def grad_fn(self, ctx):
        ex = ctx.batch.extras
        c = ex["c"]
        q = ad.const(ex["q"])
        eps = ad.const(ex["eps"])
        sign = ad.const(ex["sign"])
        inv_p = ad.exp(ad.neg(_lp(ctx.dist, ctx.values)))
        theta = ctx.dist.probs
        per = theta * ad.stop_grad(q * inv_p * (1.0 / c)) * ad.pow(eps, -1.0)
        nd = len(per.event_shape)
        if nd:
            per = ad.sum(per, axes=range(nd))
        return sign * per


def make_spsa(c: float | None = None) -> GradientEstimator:
    return SPSA(c)


# ---------------------------------------------------------------- MVD


class MVD(GradientEstimator):
    """Measure-valued derivative with one draw from each weak-derivative part.

    Weights use the balance heuristic p / (p+ + p-), which keeps the zeroth
    order estimate unbiased when the two parts cover disjoint halves of the
    support; the gradient functions cancel the weights at first order.
    """

    name = "mvd"
    unbiased_orders = 1
    cv_orders = 1

    def check(self, dist):
        dists.weak_derivative(dist)

    def _batch(self, dist, xp: np.ndarray, xm: np.ndarray, plates, plate):
        tri = dists.weak_derivative(dist)
        x = np.stack([xp, xm], axis=len(plates))
        vals = Value(x, plates + (plate,))
        pp = _safe_prob(tri.positive_part, vals)
        pm = _safe_prob(tri.negative_part, vals)
        sign = np.array([1.0, -1.0])
        return SampleBatch(vals, plate, 2, {"mix": Value(pp + pm, vals.plates), "sign": Value(sign, (plate,)), "c": tri.constant})

    def propose(self, rng, dist, plate, outer=None):
        tri = dists.weak_derivative(dist)
        rng = dists.make_rng(rng)
        xp = tri.positive_part.sample(rng, 1, "_p", outer)
        xm = tri.negative_part.sample(rng, 1, "_p", outer)
        plates = tuple(p for p in xp.plates if p != "_p")
        xp_d = np.take(xp.data, 0, axis=len(plates))
        xm_d = np.take(xm.data, 0, axis=len(plates))
        return self._batch(dist, xp_d, xm_d, plates, plate)

    def enumerate(self, dist, plate):
        tri = dists.weak_derivative(dist)
        sup = np.array(tri.positive_part.support_list(), dtype=np.float64)
        tp = _safe_prob(tri.positive_part, Value(sup))
        tm = _safe_prob(tri.negative_part, Value(sup))
        rows, probs = [], []
        for i, a in enumerate(sup):
            for j, b in enumerate(sup):
                pr = tp[i] * tm[j]
                if pr > 0:
                    rows.append((a, b))
                    probs.append(pr)
        arr = np.array(rows)
        return self._batch(dist, arr[:, 0], arr[:, 1], (OUTCOME,), plate), Value(np.array(probs), (OUTCOME,))

    def weight(self, ctx):
        mix = ctx.batch.extras["mix"]
        p = ad.exp(_lp(ctx.dist, ctx.values))
        return ad.stop_grad(p) * ad.const(1.0 / mix.data, mix.plates)

    def grad_fn(self, ctx):
        ex = ctx.batch.extras
        inv_p = ad.exp(ad.neg(_lp(ctx.dist, ctx.values)))
        scale = ad.stop_grad(ad.const(ex["mix"]) * inv_p * ex["c"])
        return ad.const(ex["sign"]) * ctx.dist.probs * scale


def _safe_prob(dist: Distribution, vals: Value) -> np.ndarray:
    """Numeric probability of each value, zero outside the support."""
    if not isinstance(dist, Bernoulli) or dist.event_shape != ():
        raise EstimatorError("weak-derivative parts are only evaluated for scalar Bernoulli")
    p = ad.evaluate(dist.probs).data
    return np.where(vals.data == 1, p, 1.0 - p)


def make_mvd() -> GradientEstimator:
    return MVD()


# ---------------------------------------------------------------- registry


def _bernoulli_proposal(probs):
    def build(dist):
        if isinstance(dist, Bernoulli):
            return Bernoulli(probs=np.broadcast_to(np.asarray(probs, float), dist.event_shape).copy())
        raise EstimatorError("bernoulli proposal needs a Bernoulli target")

    return build


def _uniform_proposal(dist):
    if isinstance(dist, Categorical):
        K = dist.num_classes
        return Categorical(np.full(dist.probs.event_shape, 1.0 / K))
    if isinstance(dist, Bernoulli):
        return Bernoulli(probs=np.full(dist.event_shape, 0.5))
    raise EstimatorError("uniform proposal needs a categorical or Bernoulli target")


def _quadratic_surrogate(a=1.0, b=0.5):
    def c(z):
        out = (z * z) * a + z * b
        nd = len(out.event_shape)
        return ad.sum(out, axes=range(nd)) if nd else out

    return c


def make_estimator(spec: dict) -> GradientEstimator:
    """Build an estimator from a JSON-style spec (see schemas/config.schema.json)."""
    if not isinstance(spec, dict) or "kind" not in spec:
        raise EstimatorError(f"bad estimator spec {spec!r}")
    kind = spec["kind"]
    if kind == "enumeration":
        return make_enumeration()
    if kind == "score":
        return make_score_function(spec.get("m", 1), spec.get("baseline", "none"), spec.get("decay", 0.95), weight_scale=spec.get("weight_scale", 1.0))
    if kind == "importance":
        prop = spec.get("proposal", "uniform")
        if prop == "uniform":
            return make_importance_sampling(_uniform_proposal, spec.get("m", 1), "uniform")
        if isinstance(prop, dict) and prop.get("type") == "bernoulli":
            return make_importance_sampling(_bernoulli_proposal(prop["probs"]), spec.get("m", 1), f"bernoulli({prop['probs']})")
        raise EstimatorError(f"unknown proposal {prop!r}")
    if kind == "sum_and_sample":
        return make_sum_and_sample([_hashable(x) for x in spec["summed"]], spec["k"])
    if kind == "unordered_set":
        return make_unordered_set(spec["k"], spec.get("baseline", True))
    if kind == "relax":
        variant = spec.get("variant", "relax")
        quad = spec.get("surrogate", {"a": 1.0, "b": 0.5})
        fn = None if spec.get("rebar") else _quadratic_surrogate(quad.get("a", 1.0), quad.get("b", 0.5))
        return make_relax(
            fn, None, variant, bool(spec.get("rebar", False)),
            label=f"quadratic({quad.get('a', 1.0)},{quad.get('b', 0.5)})", form=spec.get("form", "any_order"),
        )
    if kind == "arm":
        return make_arm(spec.get("quadrature_points", 64))
    if kind == "go":
        return make_go_discrete()
    if kind == "spsa":
        return make_spsa(spec.get("c"))
    if kind == "mvd":
        return make_mvd()
    raise EstimatorError(f"unknown estimator kind {kind!r}")


def parse_short_name(label: str) -> dict:
    """Translate labels such as ``score@1``, ``scoreLOO@5`` or ``unordered@3``."""
    base, _, m = label.partition("@")
    m = int(m) if m else 1
    table = {
        "enumeration": {"kind": "enumeration"},
        "score": {"kind": "score", "m": m, "baseline": "none"},
        "scoreLOO": {"kind": "score", "m": m, "baseline": "leave_one_out"},
        "scoreMA": {"kind": "score", "m": m, "baseline": "moving_average"},
        "scoreSC": {"kind": "score", "m": m, "baseline": "self_critic"},
        "unordered": {"kind": "unordered_set", "k": m},
        "arm": {"kind": "arm"},
        "go": {"kind": "go"},
        "mvd": {"kind": "mvd"},
        "spsa": {"kind": "spsa"},
        "relax": {"kind": "relax", "variant": "relax"},
        "rebar": {"kind": "relax", "variant": "relax", "rebar": True},
        "importance": {"kind": "importance", "proposal": "uniform", "m": m},
    }
    if base not in table:
        raise EstimatorError(f"unknown estimator label {label!r}")
    return table[base]
