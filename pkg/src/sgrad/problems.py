"""Built-in benchmark problems and the toy discrete VAE."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import adcore as ad
from . import distributions as dists
from .distributions import Bernoulli, Categorical
from .scg import Graph, GraphSpec, _table, graph_from_json


def bernoulli_line(theta: float = 0.6) -> GraphSpec:
    """x ~ Bernoulli(theta), cost f(x) = x."""
    g = Graph()
    g.add_parameter("theta", theta)
    g.add_stochastic("x", ["theta"], lambda t: Bernoulli(probs=t))
    g.add_cost("f", ["x"], lambda x: x * 1.0)
    return GraphSpec(g, "theta")


CHAIN_TRANSITION = np.array([[0.2, 0.3, 0.5], [0.6, 0.1, 0.3], [0.1, 0.1, 0.8]])
CHAIN_COST = np.array([[1.0, 2.0, 3.0], [0.0, -1.0, 2.0], [4.0, 1.0, -2.0]])


def categorical_chain(t: float = 0.4, cost_table=None) -> GraphSpec:
    """x ~ Cat(softmax(t a)), z ~ Cat(softmax(log T[x] + t b)), cost F[x, z] t^2.

    The parameter enters both distributions and the cost, so every
    derivative order mixes score and pathwise terms.
    """
    F = CHAIN_COST if cost_table is None else np.asarray(cost_table, dtype=np.float64)
    a = np.array([1.0, -1.0, 0.5])
    b = np.array([0.3, 0.0, -0.2])
    g = Graph()
    g.add_parameter("t", t)
    g.add_stochastic("x", ["t"], lambda t_: Categorical(ad.softmax(t_ * a)))

    def z_dist(x, t_):
        rows = _table({"x": x}, ["x"], CHAIN_TRANSITION)
        return Categorical(ad.softmax(ad.log(rows) + t_ * b))

    g.add_stochastic("z", ["x", "t"], z_dist)
    g.add_cost("c", ["x", "z", "t"], lambda x, z, t_: _table({"x": x, "z": z}, ["x", "z"], F) * (t_ * t_))
    return GraphSpec(g, "t")


def random_two_partition_graph(rng: np.random.Generator, k1: int = 3, k2: int = 3) -> GraphSpec:
    """Random x -> z chain with a random cost table and random parameter couplings."""
    a = rng.normal(size=k1)
    b = rng.normal(size=k2)
    T = rng.dirichlet(np.ones(k2), size=k1)
    F = rng.normal(size=(k1, k2))
    t0 = float(rng.uniform(-1.0, 1.0))
    g = Graph()
    g.add_parameter("t", t0)
    g.add_stochastic("x", ["t"], lambda t_: Categorical(ad.softmax(t_ * a)))
    g.add_stochastic("z", ["x", "t"], lambda x, t_: Categorical(ad.softmax(ad.log(_table({"x": x}, ["x"], T)) + t_ * b)))
    g.add_cost("c", ["x", "z", "t"], lambda x, z, t_: _table({"x": x, "z": z}, ["x", "z"], F) * ad.exp(t_ * 0.5))
    return GraphSpec(g, "t")


# ---------------------------------------------------------------- toy VAE

N_INPUT = 6
N_LATENT = 4
N_PATTERNS = 64


def vae_dataset(seed: int = 0) -> np.ndarray:
    """64 binary patterns: four prototypes with 10% bit flips."""
    rng = dists.RngStreams(seed).stream("vae-data")
    protos = rng.random((N_LATENT, N_INPUT)) < 0.5
    idx = rng.integers(0, N_LATENT, N_PATTERNS)
    flips = rng.random((N_PATTERNS, N_INPUT)) < 0.1
    return (protos[idx] ^ flips).astype(np.float64)


@dataclass
class ToyVAE:
    spec: GraphSpec
    data: np.ndarray
    phi: ad.Expression
    theta: ad.Expression
    costs: tuple = ("kld", "rec")
    partitions: dict = field(default_factory=dict)


def _bernoulli_kl_to_half(q):
    terms = q * ad.log(q * 2.0) + (1.0 - q) * ad.log((1.0 - q) * 2.0)
    return ad.sum(terms, axes=(-1,))


def toy_vae(seed: int = 0, data_seed: int = 0, init_scale: float = 0.1) -> ToyVAE:
    data = vae_dataset(data_seed)
    aug = np.concatenate([data, np.ones((N_PATTERNS, 1))], axis=1)
    rng = dists.RngStreams(seed).stream("vae-init")
    g = Graph()
    g.add_parameter("phi", rng.normal(0.0, init_scale, (N_LATENT, N_INPUT + 1)))
    g.add_parameter("theta", rng.normal(0.0, init_scale, (N_INPUT, N_LATENT + 1)))
    g.add_stochastic("x", [], lambda: Categorical(np.full(N_PATTERNS, 1.0 / N_PATTERNS)))
    g.add_deterministic("x_aug", ["x"], lambda x: _table({"x": x}, ["x"], aug))
    g.add_deterministic("x_bits", ["x"], lambda x: _table({"x": x}, ["x"], data))
    g.add_deterministic("q_z", ["x_aug", "phi"], lambda xa, w: ad.sigmoid(ad.sum(w * xa, axes=(-1,))))
    g.add_stochastic("z", ["q_z"], lambda q: Bernoulli(probs=q))
    pad = np.zeros((N_LATENT, N_LATENT + 1))
    pad[:, :N_LATENT] = np.eye(N_LATENT)
    bias = np.zeros(N_LATENT + 1)
    bias[-1] = 1.0

    def logits(z, th):
        z_aug = ad.sum(ad.expand_last(z) * pad, axes=(0,)) + bias
        return ad.sum(th * z_aug, axes=(-1,))

    g.add_deterministic("logits", ["z", "theta"], logits)
    g.add_cost("kld", ["q_z"], _bernoulli_kl_to_half)

    def rec(xb, a):
        nll = xb * ad.softplus(ad.neg(a)) + (1.0 - xb) * ad.softplus(a)
        return ad.sum(nll, axes=(-1,))

    g.add_cost("rec", ["x_bits", "logits"], rec)
    parts = {"kld": g.partition_for_cost("kld", [["x"]]), "rec": g.partition_for_cost("rec", [["x"], ["z"]])}
    return ToyVAE(GraphSpec(g, "phi"), data, g.parameter("phi"), g.parameter("theta"), partitions=parts)


def load_user_graph(path) -> GraphSpec:
    doc = json.loads(Path(path).read_text())
    g = graph_from_json(doc)
    return GraphSpec(g, doc["target"], doc.get("groupings", {}))


BUILTIN = {
    "bernoulli-line": bernoulli_line,
    "categorical-chain": categorical_chain,
}


def get_problem(name: str) -> GraphSpec:
    if name in BUILTIN:
        return BUILTIN[name]()
    if name.endswith(".json"):
        return load_user_graph(name)
    raise KeyError(f"unknown problem {name!r}")
