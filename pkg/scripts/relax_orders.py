"""Condition-2 deviations of the two RELAX control-variate forms at orders 1-3."""
import argparse

from sgrad import adcore as ad
from sgrad import estimators as E
from sgrad.distributions import Bernoulli
from sgrad.oracle import check_condition


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--trials", type=int, default=100_000)
    ap.add_argument("--theta", type=float, default=0.6)
    args = ap.parse_args()
    for form in ("any_order", "literal"):
        est = E.make_relax(E._quadratic_surrogate(), None, "relax", form=form)
        for order in (1, 2, 3):
            rep = check_condition(
                est, Bernoulli(probs=ad.var("theta", args.theta)), condition=2, order=order,
                mode="monte-carlo", trials=args.trials, allow_bias=True,
            )
            print(f"{form:9s} order {order}: deviation {rep.deviation:9.4g}  threshold {rep.threshold:9.4g}  {'ok' if rep.passed else 'FAIL'}")


if __name__ == "__main__":
    main()
