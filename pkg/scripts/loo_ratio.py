"""Exact variance ratio of the leave-one-out baseline against no baseline.

Variances come from enumerating every m-tuple, so no sampling noise is
involved.  For f(x) = x the LOO estimate equals the sample variance over
theta(1 - theta), which has exactly the no-baseline variance at theta = 0.6
and m = 5.
"""
import argparse

import numpy as np

from sgrad import adcore as ad
from sgrad import estimators as E
from sgrad import problems as P
from sgrad.surrogate import EnumeratingProposer, build_context


def exact_variance(theta, est):
    g = P.bernoulli_line(theta).graph
    ctx = build_context(g, "f", g.partition_for_cost("f"), [est], proposer=EnumeratingProposer(10**6), target="theta")
    v = ad.evaluate(ad.differentiate(ctx.loss, "theta", 1)).aligned(("outcome_1",))
    p = ctx.outcome_probs[0].aligned(("outcome_1",))
    m = (v * p).sum()
    return float((p * (v - m) ** 2).sum())


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--m", type=int, nargs="+", default=[2, 3, 5, 8])
    args = ap.parse_args()
    thetas = np.round(np.arange(0.1, 0.95, 0.1), 2)
    print("theta " + " ".join(f"m={m:<6d}" for m in args.m))
    for t in thetas:
        ratios = [exact_variance(t, E.make_score_function(m, "leave_one_out")) / exact_variance(t, E.make_score_function(m)) for m in args.m]
        print(f"{t:5.2f} " + " ".join(f"{r:8.4f}" for r in ratios))


if __name__ == "__main__":
    main()
