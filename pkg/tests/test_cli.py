import json

import jsonschema
import pytest

from sgrad import cli


def run(tmp_path, command, cfg=None, *extra):
    argv = [command, "--out", str(tmp_path / "out.txt")]
    if cfg is not None:
        path = tmp_path / "cfg.json"
        path.write_text(json.dumps(cfg))
        argv += ["--config", str(path)]
    code = cli.main(argv + list(extra))
    out = tmp_path / "out.txt"
    return code, (out.read_text() if out.exists() else None)


def test_default_suite_passes(tmp_path):
    code, text = run(tmp_path, "check")
    assert code == 0
    report = json.loads(text)
    jsonschema.validate(report, cli.load_schema("report"))
    assert report["passed"] and len(report["results"]) > 50


def test_broken_weight_fails(tmp_path):
    cfg = {"checks": [{"estimator": {"kind": "score", "m": 2, "weight_scale": 2.0}, "distribution": {"type": "bernoulli"}, "conditions": [1], "orders": [0]}]}
    code, text = run(tmp_path, "check", cfg)
    assert code == 1
    assert json.loads(text)["results"][0]["passed"] is False


def test_arm_order_two_is_config_error(tmp_path):
    cfg = {"checks": [{"estimator": "arm", "distribution": {"type": "bernoulli", "param": "logits"}, "orders": [2]}]}
    assert run(tmp_path, "check", cfg)[0] == 2


def test_expected_failure_counts_as_pass(tmp_path):
    cfg = {
        "checks": [
            {
                "estimator": "arm",
                "distribution": {"type": "bernoulli", "param": "logits", "theta": 0.3},
                "conditions": [2],
                "orders": [2],
                "allow_bias": True,
                "expect_fail": True,
            }
        ]
    }
    assert run(tmp_path, "check", cfg)[0] == 0


def test_bench_bernoulli_line(tmp_path):
    cfg = {"problem": "bernoulli-line", "estimators": ["score@1", "scoreLOO@5", "enumeration"], "orders": [1], "trials": 4000}
    code, text = run(tmp_path, "bench", cfg)
    assert code == 0
    report = json.loads(text)
    jsonschema.validate(report, cli.load_schema("report"))
    rows = {r["estimator"]: r for r in report["rows"]}
    assert len(report["rows"]) == 3
    assert rows["enumeration"]["bias"] == 0.0 and rows["enumeration"]["variance"] == 0.0
    assert rows["scoreLOO@5"]["variance"] < rows["score@1"]["variance"]


def test_bench_chain_order_two(tmp_path):
    cfg = {"problem": "categorical-chain", "estimators": ["enumeration"], "orders": [2], "trials": 10}
    code, text = run(tmp_path, "bench", cfg)
    assert code == 0
    assert abs(json.loads(text)["rows"][0]["bias"]) <= 1e-10


def test_bench_mixed_stack(tmp_path):
    cfg = {"problem": "categorical-chain", "estimators": [{"partitions": ["enumeration", "score@2"]}], "orders": [0, 1], "trials": 200}
    code, text = run(tmp_path, "bench", cfg)
    assert code == 0 and len(json.loads(text)["rows"]) == 2


def test_bench_errors(tmp_path):
    assert run(tmp_path, "bench", {"problem": "bernoulli-line", "estimators": []})[0] == 2
    assert run(tmp_path, "bench", {"problem": "nope", "estimators": ["score@1"]})[0] == 2
    assert run(tmp_path, "bench", {"problem": "bernoulli-line", "estimators": ["mvd"], "orders": [2]})[0] == 2
    assert run(tmp_path, "bench", {"problem": "bernoulli-line", "estimators": ["score@1"], "trials": 0})[0] == 2
    # self-critic needs the cost directly downstream, so it cannot sit on the first of two partitions
    assert run(tmp_path, "bench", {"problem": "categorical-chain", "estimators": ["scoreSC@2"], "trials": 10})[0] == 2


def test_bench_is_deterministic_and_csv(tmp_path):
    cfg = {"problem": "bernoulli-line", "estimators": ["score@2"], "orders": [0, 1], "trials": 500, "seed": 5}
    _, a = run(tmp_path, "bench", cfg, "--format", "csv")
    _, b = run(tmp_path, "bench", cfg, "--format", "csv")
    strip = lambda t: [l.rsplit(",", 1)[0] for l in t.splitlines()]  # noqa: E731 - drop wall time
    assert strip(a) == strip(b)
    lines = a.splitlines()
    assert lines[0].startswith("# schema_version=1")
    assert lines[1] == "problem,estimator,order,mean,bias,variance,stderr,wall_time"
    assert len(lines) == 4


def test_user_graph(tmp_path):
    graph = {
        "target": "t",
        "nodes": [
            {"name": "t", "kind": "parameter", "value": 0.3},
            {"name": "x", "kind": "stochastic", "parents": ["t"], "distribution": {"type": "bernoulli", "probs": "t"}},
            {"name": "f", "kind": "cost", "parents": ["x"], "fn": {"op": "mul", "args": ["x", 2.0]}},
        ],
    }
    gpath = tmp_path / "graph.json"
    gpath.write_text(json.dumps(graph))
    code, text = run(tmp_path, "bench", {"problem": str(gpath), "estimators": ["enumeration"], "trials": 10})
    assert code == 0
    assert json.loads(text)["rows"][0]["mean"] == pytest.approx(2.0)


def test_vae_command(tmp_path):
    code, text = run(tmp_path, "vae", {"estimator": "enumeration", "epochs": 3}, "--format", "csv")
    assert code == 0
    assert text.splitlines()[1] == "epoch,elbo_proxy,kld,rec,wall_time"
    assert len(text.splitlines()) == 2 + 4


def test_invalid_configs(tmp_path):
    assert run(tmp_path, "check", {"trials": 0})[0] == 2
    assert run(tmp_path, "check", {"bogus": 1})[0] == 2
    assert run(tmp_path, "bench")[0] == 2
    assert cli.main(["frobnicate"]) == 2
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert cli.main(["check", "--config", str(bad)]) == 2
