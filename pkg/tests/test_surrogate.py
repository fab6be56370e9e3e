import numpy as np
import pytest

from sgrad import adcore as ad
from sgrad import estimators as E
from sgrad import problems as P
from sgrad.distributions import Bernoulli, RngStreams
from sgrad.oracle import exact_expectation, exact_gradient
from sgrad.scg import Graph
from sgrad.surrogate import (
    CostCounter,
    SurrogateError,
    build_context,
    enumerated_mean,
    estimate_gradient,
    make_context,
    surrogate_loss,
    surrogate_loss_reference,
    surrogate_loss_alt_form,
    total_surrogate,
)


@pytest.fixture
def chain():
    spec = P.categorical_chain()
    return spec.graph, spec.graph.partition_for_cost("c")


@pytest.mark.parametrize("order", [0, 1, 2])
def test_all_enumeration_is_exact(chain, order):
    g, part = chain
    loss = surrogate_loss(g, "c", part, [E.make_enumeration(), E.make_enumeration()])
    got = ad.evaluate(ad.differentiate(loss, "t", order)).item()
    assert got == pytest.approx(exact_gradient(g, "c", "t", order).item(), abs=1e-12)


def test_order0_enumeration_equals_expectation(chain):
    g, part = chain
    loss = surrogate_loss(g, "c", part, [E.make_enumeration(), E.make_enumeration()])
    want = ad.evaluate(exact_expectation(g, "c")).item()
    assert ad.evaluate(loss).item() == pytest.approx(want, abs=1e-14)


def test_single_sample_score_mean_is_exact():
    spec = P.bernoulli_line(0.6)
    g = spec.graph
    got = enumerated_mean(g, "f", g.partition_for_cost("f"), [E.make_score_function(1)], "theta", 1)
    assert got.item() == pytest.approx(1.0, abs=1e-15)


@pytest.mark.parametrize("stack", ["score", "mixed", "loo"])
@pytest.mark.parametrize("order", [0, 1, 2])
def test_enumerated_mean_matches_oracle(chain, stack, order):
    g, part = chain
    ests = {
        "score": [E.make_score_function(2), E.make_score_function(1)],
        "mixed": [E.make_enumeration(), E.make_score_function(2)],
        "loo": [E.make_score_function(2, "leave_one_out"), E.make_score_function(2, "leave_one_out")],
    }[stack]
    got = enumerated_mean(g, "c", part, ests, "t", order)
    assert got.item() == pytest.approx(exact_gradient(g, "c", "t", order).item(), abs=1e-10)


@pytest.mark.parametrize("order", [0, 1, 2, 3])
def test_alt_form_matches_primary(order):
    rng = np.random.default_rng(order)
    for _ in range(5):
        spec = P.random_two_partition_graph(rng)
        g = spec.graph
        part = g.partition_for_cost("c")
        ests = [E.make_score_function(2, "leave_one_out"), E.make_score_function(3)]
        ctx = make_context(g, "c", part, ests, RngStreams(1).stream("t2"), target="t")
        a = estimate_gradient(ctx, order).item()
        b = estimate_gradient(ctx, order, loss=ctx.alt_form()).item()
        assert a == pytest.approx(b, rel=1e-8, abs=1e-12)


def test_alt_form_separate_builder_with_shared_batches(chain):
    g, part = chain
    ests = [E.make_score_function(2), E.make_score_function(2)]
    ctx = build_context(g, "c", part, ests, RngStreams(0).stream("s"))
    shared = dict(enumerate(ctx.batches))
    t2 = surrogate_loss_alt_form(g, "c", part, ests, shared_batches=shared)
    for k in range(3):
        a = ad.evaluate(ad.differentiate(ctx.loss, "t", k)).item()
        b = ad.evaluate(ad.differentiate(t2, "t", k)).item()
        assert a == pytest.approx(b, rel=1e-8, abs=1e-12)


def test_reference_matches_batched_and_counts_costs(chain):
    g, part = chain
    ests = [E.make_score_function(2, "leave_one_out"), E.make_score_function(3)]
    ctx = build_context(g, "c", part, ests, RngStreams(4).stream("ref"))
    counter = CostCounter()
    ref = surrogate_loss_reference(ctx, counter)
    assert counter.calls == 2 * 3
    for k in range(3):
        a = ad.evaluate(ad.differentiate(ctx.loss, "t", k)).item()
        b = ad.evaluate(ad.differentiate(ref, "t", k)).item()
        assert a == pytest.approx(b, rel=1e-10, abs=1e-12)


def test_plates_follow_partitions(chain):
    g, part = chain
    ctx = build_context(g, "c", part, [E.make_score_function(2), E.make_score_function(3)], 0)
    assert ctx.plates == ["part_1", "part_2"]
    assert set(ctx.cost_expr.plates) == {"part_1", "part_2"}
    assert ad.evaluate(ctx.cost_expr).data.shape == (2, 3)


def test_biased_orders_are_refused():
    spec = P.bernoulli_line()
    g = spec.graph
    arm_graph = Graph()
    arm_graph.add_parameter("a", 0.2)
    arm_graph.add_stochastic("x", ["a"], lambda a: Bernoulli(logits=a))
    arm_graph.add_cost("f", ["x"], lambda x: x * 2.0)
    ctx = make_context(arm_graph, "f", arm_graph.partition_for_cost("f"), [E.make_arm()], 0, target="a")
    with pytest.raises(E.BiasedOrderError):
        estimate_gradient(ctx, 2)
    assert np.isfinite(estimate_gradient(ctx, 2, allow_bias=True).item())
    with pytest.raises(E.BiasedOrderError):
        surrogate_loss(g, "f", g.partition_for_cost("f"), [E.make_mvd()], order=2)


def test_estimator_count_must_match(chain):
    g, part = chain
    with pytest.raises((SurrogateError, E.EstimatorError)):
        surrogate_loss(g, "c", part, [E.make_enumeration()])


def test_toy_vae_total_surrogate_matches_oracle():
    vae = P.toy_vae(0)
    g = vae.spec.graph
    loss = total_surrogate(g, vae.partitions, {"x": E.make_enumeration(), "z": E.make_enumeration()})
    for name in ("phi", "theta"):
        got = ad.jacobian(loss, g.parameter(name))
        want = sum(ad.jacobian(exact_expectation(g, c), g.parameter(name)) for c in ("kld", "rec"))
        assert np.allclose(got, want, atol=1e-10)
    kld = exact_expectation(g, "kld")
    assert np.all(ad.jacobian(kld, g.parameter("theta")) == 0.0)


def test_total_surrogate_shares_batches():
    vae = P.toy_vae(0)
    g = vae.spec.graph
    contexts = []
    total_surrogate(g, vae.partitions, {"x": E.make_score_function(3), "z": E.make_score_function(2)}, 0, contexts=contexts)
    kld_ctx, rec_ctx = contexts
    assert kld_ctx.batches[0] is rec_ctx.batches[0]
    assert kld_ctx.plates[0] == rec_ctx.plates[0]


def test_total_surrogate_rejects_conflicting_partitions():
    g = Graph()
    g.add_parameter("t", 0.3)
    g.add_stochastic("a", ["t"], lambda t: Bernoulli(probs=t))
    g.add_stochastic("b", ["t"], lambda t: Bernoulli(probs=t))
    g.add_cost("c1", ["a", "b"], lambda a, b: a + b)
    g.add_cost("c2", ["a"], lambda a: a * 1.0)
    parts = {"c1": [["a", "b"]], "c2": [["a"]]}
    with pytest.raises(SurrogateError):
        total_surrogate(g, parts, {("a", "b"): E.make_enumeration(), "a": E.make_enumeration()})
