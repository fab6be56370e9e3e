"""Command line: ``sgrad check|bench|vae``.

Exit codes: 0 when everything passes, 1 when a check fails, 2 for usage
or configuration errors.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import math
import sys
from concurrent.futures import ThreadPoolExecutor
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np

from . import __version__
from . import adcore as ad
from . import estimators as E
from . import oracle as O
from . import problems as P
from .distributions import Bernoulli, Categorical, DistributionError, Logistic
from .scg import GraphError
from .surrogate import SurrogateError

SCHEMA_VERSION = 1
EXIT_OK, EXIT_FAIL, EXIT_CONFIG = 0, 1, 2
MAX_CHECK_ORDER = 3


class ConfigError(Exception):
    pass


def load_schema(name: str) -> dict:
    return json.loads(resources.files("sgrad").joinpath("schemas", f"{name}.schema.json").read_text())


def validate_config(cfg: dict) -> None:
    try:
        jsonschema.validate(cfg, load_schema("config"))
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"invalid config at {where}: {exc.message}") from None


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()[:16]


def metadata(cfg: dict, seed: int, threads: int) -> dict:
    return {"seed": seed, "version": __version__, "config_hash": config_hash(cfg), "threads": threads}


# ---------------------------------------------------------------- estimators


def estimator_from(entry) -> E.GradientEstimator:
    spec = E.parse_short_name(entry) if isinstance(entry, str) else entry
    return E.make_estimator(spec)


def estimator_label(entry) -> str:
    if isinstance(entry, str):
        return entry
    if "partitions" in entry:
        return entry.get("name") or "+".join(estimator_label(p) for p in entry["partitions"])
    return json.dumps(entry, sort_keys=True)


def estimator_stack(entry, n_parts: int) -> list[E.GradientEstimator]:
    if isinstance(entry, dict) and "partitions" in entry:
        if len(entry["partitions"]) != n_parts:
            raise ConfigError(f"{estimator_label(entry)}: {len(entry['partitions'])} estimators for {n_parts} partitions")
        return [estimator_from(e) for e in entry["partitions"]]
    return [estimator_from(entry) for _ in range(n_parts)]


# ---------------------------------------------------------------- check


def build_distribution(spec: dict):
    kind = spec["type"]
    theta = ad.var("theta", spec.get("theta", 0.6))
    if kind == "bernoulli":
        shape = tuple(spec.get("shape", ()))
        scale = np.linspace(1.0, 0.5, int(np.prod(shape))).reshape(shape) if shape else 1.0
        if spec.get("param", "probs") == "logits":
            return Bernoulli(logits=theta * scale)
        return Bernoulli(probs=theta * scale)
    if kind == "categorical":
        direction = np.asarray(spec.get("direction", [1.0, -0.5, 0.3, 0.2]), dtype=np.float64)
        return Categorical(ad.softmax(theta * direction))
    if kind == "logistic":
        return Logistic(theta, spec.get("scale", 1.0))
    raise ConfigError(f"unknown distribution {kind!r}")


def default_orders(est: E.GradientEstimator, condition: int) -> list[int]:
    top = est.unbiased_orders
    if condition == 2:
        top = min(top, est.cv_orders)
    return list(range(int(min(top, MAX_CHECK_ORDER)) + 1))


DEFAULT_SUITE = [
    {"estimator": "enumeration", "distribution": {"type": "categorical"}},
    {"estimator": {"kind": "score", "m": 2}, "distribution": {"type": "bernoulli"}},
    {"estimator": {"kind": "score", "m": 3, "baseline": "leave_one_out"}, "distribution": {"type": "categorical", "direction": [1.0, -0.5, 0.3]}},
    {"estimator": {"kind": "importance", "proposal": "uniform", "m": 2}, "distribution": {"type": "categorical"}},
    {"estimator": {"kind": "sum_and_sample", "summed": [1], "k": 3}, "distribution": {"type": "categorical"}},
    {"estimator": {"kind": "unordered_set", "k": 3}, "distribution": {"type": "categorical", "theta": 0.5}},
    {"estimator": {"kind": "unordered_set", "k": 2, "baseline": False}, "distribution": {"type": "categorical", "theta": 0.5}},
    {"estimator": "go", "distribution": {"type": "categorical"}},
    {"estimator": "mvd", "distribution": {"type": "bernoulli", "theta": 0.3}},
    {"estimator": "spsa", "distribution": {"type": "bernoulli", "theta": 0.5, "shape": [2]}},
    {"estimator": "arm", "distribution": {"type": "bernoulli", "param": "logits", "theta": 0.3}},
    {"estimator": {"kind": "relax", "variant": "relax"}, "distribution": {"type": "bernoulli"}, "mode": "monte-carlo"},
]


def _run_check(job):
    est, dist_spec, cond, order, mode, allow_bias, seed, trials = job
    dist = build_distribution(dist_spec)
    return O.check_condition(est, dist, None, cond, order, seed=seed, trials=trials, mode=mode, allow_bias=allow_bias)


def cmd_check(cfg: dict, seed: int, threads: int) -> tuple[int, dict]:
    checks = cfg.get("checks") or (DEFAULT_SUITE if cfg.get("suite", "default") == "default" else [])
    if not checks:
        raise ConfigError("no checks configured")
    trials = cfg.get("trials", O.DEFAULT_TRIALS)
    jobs, labels, expected = [], [], []
    for chk in checks:
        est = estimator_from(chk["estimator"])
        allow = chk.get("allow_bias", cfg.get("allow_bias", False))
        dist = build_distribution(chk["distribution"])
        try:
            est.check(dist)
        except (E.EstimatorError, DistributionError) as exc:
            raise ConfigError(f"{estimator_label(chk['estimator'])}: {exc}") from None
        for cond in chk.get("conditions", [1, 2, 3, 4]):
            orders = chk.get("orders") or cfg.get("orders") or default_orders(est, cond)
            for order in orders:
                try:
                    est.check_order(order, allow)
                except E.BiasedOrderError as exc:
                    raise ConfigError(str(exc)) from None
                jobs.append((est, chk["distribution"], cond, order, chk.get("mode", "auto"), allow, seed, trials))
                labels.append(estimator_label(chk["estimator"]))
                expected.append(bool(chk.get("expect_fail", False)))
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            reports = list(pool.map(_run_check, jobs))
    else:
        reports = [_run_check(j) for j in jobs]
    results = []
    ok = True
    for rep, label, xfail in zip(reports, labels, expected):
        row = rep.to_json()
        row["estimator"] = label
        row["expected_failure"] = xfail
        results.append(row)
        if rep.passed == xfail:
            ok = False
    report = {"schema_version": SCHEMA_VERSION, "command": "check", "metadata": metadata(cfg, seed, threads), "passed": ok, "results": results}
    return (EXIT_OK if ok else EXIT_FAIL), report


# ---------------------------------------------------------------- bench


def cmd_bench(cfg: dict, seed: int, threads: int) -> tuple[int, dict]:
    problems = cfg.get("problems") or ([cfg["problem"]] if "problem" in cfg else [])
    if not problems:
        raise ConfigError("no problem configured")
    entries = cfg.get("estimators")
    if not entries:
        raise ConfigError("the estimator list is empty")
    orders = cfg.get("orders", [1])
    trials = cfg.get("trials", 10_000)
    if trials < 2:
        raise ConfigError("bench needs at least two trials")
    rows = []
    for pname in problems:
        if pname == "toy-vae":
            raise ConfigError("toy-vae is run by the vae command")
        try:
            spec = P.get_problem(pname)
        except (KeyError, OSError, json.JSONDecodeError, GraphError) as exc:
            raise ConfigError(f"problem {pname!r}: {exc}") from None
        costs = spec.graph.costs
        cost = cfg.get("cost") or (costs[0] if len(costs) == 1 else None)
        if cost is None:
            raise ConfigError("graph has several cost nodes; set 'cost'")
        parts = spec.partitioning(cost)
        for entry in entries:
            for order in orders:
                ests = estimator_stack(entry, len(parts))
                for e in ests:
                    try:
                        e.check_order(order, cfg.get("allow_bias", False))
                    except E.BiasedOrderError as exc:
                        raise ConfigError(str(exc)) from None
                stats = O.bias_variance(spec.graph, cost, parts, ests, spec.target, order, trials, seed, threads=threads, allow_bias=cfg.get("allow_bias", False))
                s = stats.scalar()
                rows.append({"problem": pname, "estimator": estimator_label(entry), "order": order, **{k: s[k] for k in ("mean", "bias", "variance", "stderr", "wall_time")}})
    report = {"schema_version": SCHEMA_VERSION, "command": "bench", "metadata": metadata(cfg, seed, threads), "rows": rows}
    return EXIT_OK, report


# ---------------------------------------------------------------- vae


def cmd_vae(cfg: dict, seed: int, threads: int) -> tuple[int, dict]:
    from .vae import train

    est = estimator_from(cfg.get("estimator", "enumeration"))
    try:
        est.check_order(1)
    except E.BiasedOrderError as exc:
        raise ConfigError(str(exc)) from None
    log = train(est, epochs=cfg.get("epochs", 50), lr=cfg.get("lr", 0.05), seed=seed)
    epochs = [{"epoch": r.epoch, "elbo_proxy": r.elbo_proxy, "kld": r.kld, "rec": r.rec, "wall_time": r.wall_time} for r in log]
    report = {"schema_version": SCHEMA_VERSION, "command": "vae", "metadata": metadata(cfg, seed, threads), "epochs": epochs}
    return EXIT_OK, report


# ---------------------------------------------------------------- output


CSV_COLUMNS = {
    "check": ["estimator", "condition", "order", "mode", "deviation", "threshold", "passed", "expected_failure", "size"],
    "bench": ["problem", "estimator", "order", "mean", "bias", "variance", "stderr", "wall_time"],
    "vae": ["epoch", "elbo_proxy", "kld", "rec", "wall_time"],
}


def render(report: dict, fmt: str) -> str:
    if fmt == "json":
        return json.dumps(report, indent=2, sort_keys=True) + "\n"
    key = {"check": "results", "bench": "rows", "vae": "epochs"}[report["command"]]
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=CSV_COLUMNS[report["command"]], extrasaction="ignore", lineterminator="\n")
    buf.write(f"# schema_version={SCHEMA_VERSION} seed={report['metadata']['seed']} config_hash={report['metadata']['config_hash']}\n")
    w.writeheader()
    for row in report[key]:
        w.writerow(row)
    return buf.getvalue()


COMMANDS = {"check": cmd_check, "bench": cmd_bench, "vae": cmd_vae}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sgrad", description="Surrogate-loss gradient estimation: checks, benchmarks and a toy VAE.")
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", type=Path, help="JSON config (check runs the default suite without one)")
    p.add_argument("--out", type=Path)
    p.add_argument("--seed", type=int)
    p.add_argument("--threads", type=int)
    p.add_argument("--format", choices=["csv", "json"])
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    try:
        cfg = json.loads(args.config.read_text()) if args.config else {}
        if not isinstance(cfg, dict):
            raise ConfigError("config must be a JSON object")
        validate_config(cfg)
        if args.command != "check" and not args.config:
            raise ConfigError(f"{args.command} needs --config")
        seed = args.seed if args.seed is not None else cfg.get("seed", 0)
        threads = args.threads if args.threads is not None else cfg.get("threads", 1)
        if threads < 1:
            raise ConfigError("threads must be positive")
        fmt = args.format or cfg.get("format", "json")
        out = args.out or (Path(cfg["out"]) if "out" in cfg else None)
        code, report = COMMANDS[args.command](cfg, seed, threads)
    except (ConfigError, E.EstimatorError, SurrogateError, OSError, json.JSONDecodeError, DistributionError, GraphError) as exc:
        print(f"sgrad: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    text = render(report, fmt)
    if out:
        out.write_text(text)
    else:
        sys.stdout.write(text)
    if args.command == "check":
        failed = [r for r in report["results"] if r["passed"] == r["expected_failure"]]
        for r in failed:
            print(f"FAIL {r['estimator']} condition {r['condition']} order {r['order']}: deviation {r['deviation']:.3g} > {r['threshold']:.3g}", file=sys.stderr)
    return code


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
