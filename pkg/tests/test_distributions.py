import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sgrad import adcore as ad
from sgrad import distributions as D


def test_bernoulli_empirical_mean():
    draws = D.sample_iid(D.Bernoulli(probs=0.6), D.RngStreams(0).stream("t"), 100_000)
    assert abs(np.mean(draws) - 0.6) < 0.01


def test_bernoulli_log_prob_gradient():
    t = ad.var("t", 0.6)
    d = D.Bernoulli(probs=t)
    assert ad.evaluate(ad.differentiate(d.log_prob(1.0), t)).item() == pytest.approx(1 / 0.6)
    assert ad.evaluate(ad.differentiate(d.log_prob(0.0), t)).item() == pytest.approx(-1 / 0.4)


def test_categorical_probs_table_normalised():
    d = D.Categorical(ad.softmax(ad.const(np.array([0.1, 2.0, -1.0]))))
    assert d.probs_table().data.sum() == pytest.approx(1.0, abs=1e-12)
    assert D.enumerate_support(d) == [0, 1, 2]


def test_support_cap():
    with pytest.raises(D.SupportCapExceeded):
        D.enumerate_support(D.Categorical(np.full(10, 0.1)), cap=5)


def test_without_replacement_ordered_frequencies():
    n = 100_000
    idx = D.sample_without_replacement_indices(ad.Value(np.array([0.5, 0.3, 0.2])), D.RngStreams(1).stream("swor"), 2, "s", outer={"n": n})
    pairs = idx.aligned(("n", "s"))
    assert abs(np.mean((pairs[:, 0] == 0) & (pairs[:, 1] == 1)) - 0.3) < 0.01
    assert abs(np.mean((pairs[:, 0] == 1) & (pairs[:, 1] == 0)) - 3 / 14) < 0.01


def test_without_replacement_list_api():
    draws = D.sample_without_replacement(D.Categorical(np.array([0.5, 0.3, 0.2])), 3, 3)
    assert sorted(draws) == [0, 1, 2]


def test_without_replacement_never_repeats():
    idx = D.sample_without_replacement_indices(ad.Value(np.array([0.7, 0.2, 0.1, 0.0])), 0, 3, "s")
    assert len(set(idx.data.tolist())) == 3
    assert 3 not in idx.data


def test_unordered_set_probability_example():
    d = D.Categorical(np.array([0.5, 0.3, 0.2]))
    pU, given_first, _ = D.unordered_set_probabilities(d, [0, 1])
    assert pU == pytest.approx(0.3 + 3 / 14, abs=1e-12)
    assert given_first[0] == pytest.approx(0.3 / 0.5)


def _perm_prob(q):
    total = 0.0
    for perm in itertools.permutations(range(len(q))):
        p, used = 1.0, 0.0
        for j in perm:
            p *= q[j] / (1 - used)
            used += q[j]
        total += p
    return total


@settings(max_examples=30, deadline=None)
@given(k=st.integers(2, 5), seed=st.integers(0, 10_000))
def test_set_probability_bruteforce_matches_recursive(k, seed):
    p = np.random.default_rng(seed).dirichlet(np.ones(7))
    q = p[:k]
    a = D.set_probabilities_bruteforce(q)
    b = D.set_probabilities_recursive(q)
    for x, y in zip(a, b):
        assert np.allclose(x, y, atol=1e-12)
    assert a[0] == pytest.approx(_perm_prob(q), abs=1e-12)


def test_full_support_set_has_probability_one():
    q = np.array([0.1, 0.2, 0.3, 0.4])
    assert D.set_probabilities(q)[0] == pytest.approx(1.0, abs=1e-12)


def test_duplicate_set_rejected():
    with pytest.raises(D.DistributionError):
        D.unordered_set_probabilities(D.Categorical(np.array([0.5, 0.5])), [0, 0])


def test_weak_derivative_bernoulli():
    w = D.weak_derivative(D.Bernoulli(probs=0.3))
    assert w.constant == 1.0
    assert w.positive_part.probs_table().data.tolist() == [0.0, 1.0]
    assert w.negative_part.probs_table().data.tolist() == [1.0, 0.0]
    with pytest.raises(D.DistributionError):
        D.weak_derivative(D.Categorical(np.array([0.5, 0.5])))


def test_rng_streams_are_reproducible_and_independent():
    s = D.RngStreams(7)
    assert s.stream("a", 1).random() == s.stream("a", 1).random()
    assert s.stream("a", 1).random() != s.stream("a", 2).random()


def test_plated_sampling_layout():
    probs = ad.const(np.array([0.1, 0.9]), ("i",))
    v = D.Bernoulli(probs=probs).sample(0, 5, "s", outer={"o": 3})
    assert set(v.plates) == {"i", "s", "o"}
    assert v.plate_sizes["s"] == 5 and v.plate_sizes["o"] == 3


def test_invalid_parameters():
    with pytest.raises(D.DistributionError):
        D.Bernoulli(probs=1.5)
    with pytest.raises(D.DistributionError):
        D.Bernoulli()
