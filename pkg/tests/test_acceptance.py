"""Acceptance criteria, one printed PASS/FAIL line each.

Run under pytest (lines are printed with capture disabled) or directly with
``python3 tests/test_acceptance.py``.
"""
import sys
import time
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from sgrad import adcore as ad  # noqa: E402
from sgrad import cli  # noqa: E402
from sgrad import estimators as E  # noqa: E402
from sgrad import oracle as O  # noqa: E402
from sgrad import problems as P  # noqa: E402
from sgrad.distributions import Bernoulli, RngStreams  # noqa: E402
from sgrad.surrogate import enumerated_mean, estimate_gradient, make_context  # noqa: E402
from sgrad.vae import train  # noqa: E402
from _dags import close, random_dag  # noqa: E402


def _line(n, ok, detail):
    return f"criterion {n}: {'PASS' if ok else 'FAIL'} - {detail}"


def criterion_1():
    start = time.perf_counter()
    theta = ad.var("theta", 0.3)
    rng = np.random.default_rng(2024)
    worst = 0.0
    for _ in range(500):
        e, f = random_dag(rng, theta), random_dag(rng, theta)
        box = ad.evaluate(ad.magic_box(e)).item()
        lhs = ad.evaluate(ad.differentiate(ad.magic_box(e) * f, theta)).item()
        rhs = ad.evaluate(ad.differentiate(e, theta)).item() * ad.evaluate(f).item() + ad.evaluate(ad.differentiate(f, theta)).item()
        worst = max(worst, abs(box - 1.0), abs(lhs - rhs) / max(1.0, abs(rhs)))
    ok_identity = worst <= 1e-12
    bad = 0
    for _ in range(100):
        l1, l2, f = (random_dag(rng, theta) for _ in range(3))
        for k in range(4):
            a = ad.evaluate(ad.differentiate(ad.magic_box(l1 + l2) * f, theta, k)).item()
            b = ad.evaluate(ad.differentiate(ad.magic_box(l1) * ad.magic_box(l2) * f, theta, k)).item()
            bad += not close(a, b, rel=1e-8)
    took = time.perf_counter() - start
    ok = ok_identity and bad == 0 and took < 10
    return ok, f"operator identities worst {worst:.1e} on 500 DAGs; sum/product mismatches {bad}/400; {took:.1f}s"


def criterion_2():
    start = time.perf_counter()
    code, report = cli.cmd_check({}, 0, 1)
    took = time.perf_counter() - start
    fails = [r for r in report["results"] if not r["passed"]]
    names = sorted({r["estimator"] for r in report["results"]})
    ok = code == 0 and took < 300
    return ok, f"{len(report['results'])} checks over {len(names)} estimator setups, {len(fails)} failures; {took:.1f}s"


def criterion_3():
    spec = P.categorical_chain()
    g = spec.graph
    part = g.partition_for_cost("c")
    stacks = {
        "enumeration": lambda: [E.make_enumeration(), E.make_enumeration()],
        "score": lambda: [E.make_score_function(2), E.make_score_function(2)],
        "scoreLOO": lambda: [E.make_score_function(2, "leave_one_out"), E.make_score_function(3, "leave_one_out")],
        "mixed": lambda: [E.make_enumeration(), E.make_score_function(2)],
    }
    worst = 0.0
    for build in stacks.values():
        for order in (0, 1, 2):
            got = enumerated_mean(g, "c", part, build(), "t", order).item()
            want = O.exact_gradient(g, "c", "t", order).item()
            worst = max(worst, abs(got - want))
    return worst <= 1e-10, f"max |enumerated mean - oracle| = {worst:.1e} over {len(stacks)} stacks x orders 0-2"


def criterion_4():
    rng = np.random.default_rng(4)
    choices = [
        lambda: E.make_score_function(2),
        lambda: E.make_score_function(3, "leave_one_out"),
        lambda: E.make_enumeration(),
        lambda: E.make_score_function(2, "self_critic"),
    ]
    worst = 0.0
    for i in range(50):
        spec = P.random_two_partition_graph(rng, int(rng.integers(2, 5)), int(rng.integers(2, 5)))
        g = spec.graph
        part = g.partition_for_cost("c")
        ests = [choices[rng.integers(len(choices) - 1)](), choices[rng.integers(len(choices))]()]
        ctx = make_context(g, "c", part, ests, RngStreams(i).stream("t2"), target="t")
        t2 = ctx.alt_form()
        for order in range(4):
            a = estimate_gradient(ctx, order).item()
            b = estimate_gradient(ctx, order, loss=t2).item()
            worst = max(worst, abs(a - b) / max(1.0, abs(a)))
    return worst <= 1e-8, f"max relative difference {worst:.1e} on 50 graphs, orders 0-3"


def criterion_5():
    g = P.bernoulli_line().graph
    part = g.partition_for_cost("f")
    n = 10_000
    plain = O.bias_variance(g, "f", part, [E.make_score_function(5)], "theta", 1, n, seed=5)
    loo = O.bias_variance(g, "f", part, [E.make_score_function(5, "leave_one_out")], "theta", 1, n, seed=5)
    a, b = plain.estimates[:, 0], loo.estimates[:, 0]
    ratio = b.var(ddof=1) / a.var(ddof=1)
    u = (b - b.mean()) ** 2 - (a - a.mean()) ** 2
    diff, se = u.mean(), u.std(ddof=1) / np.sqrt(n)
    exact = _exact_variance(E.make_score_function(5, "leave_one_out")) / _exact_variance(E.make_score_function(5))
    significant = diff + 3 * se < 0
    soft = ratio < 0.5
    detail = (
        f"paired ratio {ratio:.3f} (variance difference {diff:.4f} +- {se:.4f}); exact ratio {exact:.4f}; "
        f"hard '<1' significant: {significant}; soft '<0.5': {soft}"
    )
    return significant and soft, detail


def _exact_variance(est):
    from sgrad.surrogate import EnumeratingProposer, build_context

    g = P.bernoulli_line().graph
    ctx = build_context(g, "f", g.partition_for_cost("f"), [est], proposer=EnumeratingProposer(10**6), target="theta")
    v = ad.evaluate(ad.differentiate(ctx.loss, "theta", 1)).aligned(("outcome_1",))
    p = ctx.outcome_probs[0].aligned(("outcome_1",))
    m = (v * p).sum()
    return float((p * (v - m) ** 2).sum())


def criterion_6():
    rep = O.check_condition(E.make_arm(), Bernoulli(logits=ad.var("a", 0.3)), condition=2, order=2, allow_bias=True)
    ok = rep.mode == "quadrature" and not rep.passed and rep.deviation > rep.threshold
    return ok, f"ARM condition 2 at order 2: deviation {rep.deviation:.3g} vs threshold {rep.threshold:.1e} (expected failure {'seen' if ok else 'missing'})"


def criterion_7():
    start = time.perf_counter()
    log = train(E.make_enumeration(), epochs=50, lr=0.05, seed=0)
    proxies = [r.elbo_proxy for r in log]
    rise = max(b - a for a, b in zip(proxies, proxies[1:]))
    gaps = []
    for seed in range(5):
        enum = train(E.make_enumeration(), epochs=200, lr=0.05, seed=seed)[-1].elbo_proxy
        loo = train(E.make_score_function(5, "leave_one_out"), epochs=200, lr=0.05, seed=seed)[-1].elbo_proxy
        gaps.append(abs(loo - enum) / abs(enum))
    med = float(np.median(gaps))
    took = time.perf_counter() - start
    ok = rise <= 1e-9 and med <= 0.05 and took < 120
    return ok, f"enumeration proxy {proxies[0]:.4f} -> {proxies[-1]:.4f}, largest step rise {rise:.1e}; scoreLOO@5 median gap {100 * med:.3f}%; {took:.1f}s"


def criterion_8():
    g = P.bernoulli_line(0.6).graph
    stats = O.bias_variance(g, "f", g.partition_for_cost("f"), [E.make_score_function(1)], "theta", 1, 100_000, seed=8)
    x = stats.estimates[:, 0]
    var = float(stats.variance[0])
    mu4 = np.mean((x - x.mean()) ** 4)
    se = float(np.sqrt((mu4 - var**2) / len(x)))
    ok = abs(var - 2 / 3) <= 3 * se
    return ok, f"empirical variance {var:.4f} vs 2/3, |diff| {abs(var - 2 / 3):.4f} <= 3 se {3 * se:.4f}: {ok}"


CRITERIA = [criterion_1, criterion_2, criterion_3, criterion_4, criterion_5, criterion_6, criterion_7, criterion_8]


@pytest.mark.parametrize("n", range(1, len(CRITERIA) + 1))
def test_criterion(n, capsys):
    ok, detail = CRITERIA[n - 1]()
    with capsys.disabled():
        print("\n" + _line(n, ok, detail))
    assert ok, detail


if __name__ == "__main__":
    results = []
    for i, fn in enumerate(CRITERIA, 1):
        ok, detail = fn()
        results.append(ok)
        print(_line(i, ok, detail), flush=True)
    sys.exit(0 if all(results) else 1)
