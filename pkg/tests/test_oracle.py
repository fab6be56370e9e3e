import numpy as np
import pytest

from sgrad import adcore as ad
from sgrad import estimators as E
from sgrad import problems as P
from sgrad.distributions import Bernoulli, Categorical
from sgrad.oracle import (
    OracleError,
    PolynomialTests,
    bias_variance,
    check_condition,
    exact_expectation,
    exact_gradient,
)
from sgrad.scg import Graph


def bern(t0=0.6):
    return Bernoulli(probs=ad.var("theta", t0))


def identity(x):
    return ad._wrap(x) * 1.0


# exact expectations -----------------------------------------------------


def test_two_class_latent_hand_enumeration():
    g = Graph()
    g.add_parameter("phi", 0.4)
    g.add_stochastic("z", ["phi"], lambda p: Categorical(ad.softmax(ad.const(np.array([0.0, 1.0])) * p)))
    g.add_cost("rec", ["z"], lambda z: z * 3.0 - 1.0)
    p1 = np.exp(0.4) / (1 + np.exp(0.4))
    assert ad.evaluate(exact_expectation(g, "rec")).item() == pytest.approx((1 - p1) * -1.0 + p1 * 2.0, abs=1e-14)


def test_gradient_matches_finite_differences():
    h = 1e-5
    g0 = exact_gradient(P.categorical_chain(0.4).graph, "c", "t", 1).item()
    up = ad.evaluate(exact_expectation(P.categorical_chain(0.4 + h).graph, "c")).item()
    down = ad.evaluate(exact_expectation(P.categorical_chain(0.4 - h).graph, "c")).item()
    assert g0 == pytest.approx((up - down) / (2 * h), abs=1e-6)


def test_expectation_without_stochastic_ancestors():
    g = Graph()
    g.add_parameter("t", 2.0)
    g.add_cost("c", ["t"], lambda t: t * t)
    assert exact_gradient(g, "c", "t", 1).item() == 4.0


def test_polynomial_tests_shape():
    fn = PolynomialTests.draw(np.random.default_rng(0), 20, [()])
    v = ad.evaluate(fn(ad.const(np.array([0.0, 1.0]), ("s",))))
    assert set(v.plates) == {"test", "s"}
    assert np.all(np.abs(fn.coeffs) <= 2.0)


# conditions -------------------------------------------------------------


@pytest.mark.parametrize("order", [0, 1, 2])
def test_score_m2_condition1_exact(order):
    rep = check_condition(E.make_score_function(2), bern(), condition=1, order=order)
    assert rep.passed and rep.deviation <= 1e-10
    assert rep.size == 4 and rep.mode == "exact"


@pytest.mark.parametrize("order", [0, 1, 2])
def test_loo_condition2_exact(order):
    rep = check_condition(E.make_score_function(2, "leave_one_out"), bern(), condition=2, order=order)
    assert rep.passed and rep.deviation <= 1e-10


@pytest.mark.parametrize("order", [0, 1, 2, 3])
def test_condition3_for_constant_weights(order):
    rep = check_condition(E.make_score_function(3), bern(), condition=3, order=order)
    assert rep.passed


def test_doubled_weight_fails_by_expected_value():
    rep = check_condition(E.make_score_function(2, weight_scale=2.0), bern(), condition=1, order=0, test_fn=identity)
    assert not rep.passed
    assert rep.deviation == pytest.approx(0.6, abs=1e-12)


def test_condition4_structural_and_numeric():
    assert check_condition(E.make_score_function(2), bern(), condition=4).passed
    t = ad.var("theta", 0.6)
    leaky = Bernoulli(probs=ad.stop_grad(t) * 0.5 + t * 0.5)
    rep = check_condition(E.make_score_function(2), leaky, condition=4)
    assert not rep.passed and rep.details["structural"] is False


def test_monte_carlo_mode_for_relax():
    est = E.make_relax(E._quadratic_surrogate(), None, "relax")
    rep = check_condition(est, bern(0.4), condition=2, order=1, mode="monte-carlo", trials=100_000)
    assert rep.mode == "monte-carlo" and rep.passed


def test_relax_literal_form_is_first_order_only():
    est = E.make_relax(E._quadratic_surrogate(), None, "relax", form="literal")
    rep = check_condition(est, bern(0.4), condition=2, order=2, mode="monte-carlo", trials=50_000, allow_bias=True)
    assert not rep.passed
    fixed = E.make_relax(E._quadratic_surrogate(), None, "relax")
    assert check_condition(fixed, bern(0.4), condition=2, order=2, mode="monte-carlo", trials=50_000).passed


def test_arm_order2_fails_on_quadrature():
    rep = check_condition(E.make_arm(), Bernoulli(logits=ad.var("a", 0.3)), condition=2, order=2, allow_bias=True)
    assert rep.mode == "quadrature" and not rep.passed
    with pytest.raises(E.BiasedOrderError):
        check_condition(E.make_arm(), Bernoulli(logits=ad.var("a", 0.3)), condition=2, order=2)


def test_exact_mode_requires_enumerable_proposal():
    with pytest.raises(OracleError):
        check_condition(E.make_score_function(3), Categorical(ad.softmax(ad.var("t", np.zeros(4)))), condition=1, mode="exact", budget=10, target="t")


def test_unknown_parameter_rejected():
    with pytest.raises(OracleError):
        check_condition(E.make_enumeration(), bern(), {"nope": 1.0})


# bias / variance --------------------------------------------------------


def test_score_closed_form_variance():
    spec = P.bernoulli_line(0.6)
    g = spec.graph
    stats = bias_variance(g, "f", g.partition_for_cost("f"), [E.make_score_function(1)], "theta", 1, 100_000, seed=3)
    x = stats.estimates[:, 0]
    n = len(x)
    mu4 = np.mean((x - x.mean()) ** 4)
    se_var = np.sqrt((mu4 - stats.variance[0] ** 2) / n)
    assert abs(stats.variance[0] - 2 / 3) <= 3 * se_var
    assert abs(stats.bias[0]) <= 3 * stats.stderr[0]


def test_enumeration_bias_and_variance_zero():
    spec = P.categorical_chain()
    g = spec.graph
    part = g.partition_for_cost("c")
    stats = bias_variance(g, "c", part, [E.make_enumeration(), E.make_enumeration()], "t", 2, 10)
    assert abs(stats.bias[0]) <= 1e-10 and stats.variance[0] <= 1e-20


def test_bias_variance_thread_independent():
    spec = P.bernoulli_line()
    g = spec.graph
    part = g.partition_for_cost("f")
    a = bias_variance(g, "f", part, [E.make_score_function(5, "leave_one_out")], "theta", 1, 5000, seed=1, chunk=1000)
    b = bias_variance(g, "f", part, [E.make_score_function(5, "leave_one_out")], "theta", 1, 5000, seed=1, chunk=1000, threads=4)
    assert np.array_equal(a.estimates, b.estimates)
