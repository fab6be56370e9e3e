"""Gradient-descent training of the toy discrete VAE."""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import adcore as ad
from . import distributions as dists
from .estimators import GradientEstimator, make_enumeration
from .oracle import exact_expectation
from .problems import ToyVAE, toy_vae
from .surrogate import total_surrogate


@dataclass
class EpochLog:
    epoch: int
    elbo_proxy: float
    kld: float
    rec: float
    wall_time: float


def elbo_proxy(vae: ToyVAE) -> tuple[float, float]:
    """Exact expected KLD and reconstruction costs at the current parameters."""
    g = vae.spec.graph
    kld = ad.evaluate(exact_expectation(g, "kld")).item()
    rec = ad.evaluate(exact_expectation(g, "rec")).item()
    return kld, rec


def gradients(vae: ToyVAE, estimator: GradientEstimator, rng) -> dict[str, np.ndarray]:
    g = vae.spec.graph
    loss = total_surrogate(g, vae.partitions, {"x": make_enumeration(), "z": estimator}, rng)
    return {name: ad.jacobian(loss, g.parameter(name)) for name in ("phi", "theta")}


def train(estimator: GradientEstimator, epochs: int = 50, lr: float = 0.05, seed: int = 0, vae: ToyVAE | None = None) -> list[EpochLog]:
    """Full-batch gradient descent; epoch 0 is the initial state."""
    estimator.check_order(1)
    vae = vae or toy_vae(seed)
    streams = dists.RngStreams(seed)
    start = time.perf_counter()
    kld, rec = elbo_proxy(vae)
    log = [EpochLog(0, kld + rec, kld, rec, 0.0)]
    for epoch in range(1, epochs + 1):
        grads = gradients(vae, estimator, streams.stream("vae-train", epoch))
        for name, grad in grads.items():
            var = vae.spec.graph.parameter(name)
            var.assign(var.attrs["value"] - lr * grad)
        kld, rec = elbo_proxy(vae)
        log.append(EpochLog(epoch, kld + rec, kld, rec, time.perf_counter() - start))
    return log
