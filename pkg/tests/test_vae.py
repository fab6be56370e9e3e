import numpy as np

from sgrad import adcore as ad
from sgrad import estimators as E
from sgrad import problems as P
from sgrad.distributions import RngStreams
from sgrad.vae import elbo_proxy, gradients, train


def test_enumeration_gradients_match_finite_differences():
    vae = P.toy_vae(1)
    grads = gradients(vae, E.make_enumeration(), RngStreams(0).stream("g"))
    var = vae.spec.graph.parameter("theta")
    base = var.attrs["value"].copy()
    h = 1e-6
    for idx in [(0, 0), (2, 4), (5, 1)]:
        up = base.copy()
        up[idx] += h
        var.assign(up)
        f_up = sum(elbo_proxy(vae))
        down = base.copy()
        down[idx] -= h
        var.assign(down)
        f_down = sum(elbo_proxy(vae))
        var.assign(base)
        assert abs(grads["theta"][idx] - (f_up - f_down) / (2 * h)) < 1e-6


def test_kld_has_no_decoder_gradient():
    vae = P.toy_vae(0)
    from sgrad.oracle import exact_expectation

    kld = exact_expectation(vae.spec.graph, "kld")
    assert np.all(ad.jacobian(kld, vae.theta) == 0.0)


def test_enumeration_training_is_monotone():
    log = train(E.make_enumeration(), epochs=10, seed=2)
    proxies = [r.elbo_proxy for r in log]
    assert all(b <= a + 1e-9 for a, b in zip(proxies, proxies[1:]))
    assert log[0].epoch == 0 and len(log) == 11


def test_dataset_is_deterministic():
    assert np.array_equal(P.vae_dataset(3), P.vae_dataset(3))
    assert P.vae_dataset(0).shape == (64, 6)
