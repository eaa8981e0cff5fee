import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hiergen.sampling import (SamplerConfig, cluster_distribution, cluster_sample, draw, sample,
                              truncated_distribution, truncated_sample)
from hiergen.tokenizer import Codebook


def clustered(cluster_of):
    cluster_of = np.asarray(cluster_of)
    return Codebook(1, np.zeros((len(cluster_of), 3)), cluster_of, int(cluster_of.max()) + 1)


ABC = clustered([0, 0, 0, 1, 2, 2])
PROBS = np.array([0.2, 0.2, 0.2, 0.25, 0.1, 0.05])


def test_top_two_renormalizes():
    d = truncated_distribution([0.5, 0.3, 0.2], SamplerConfig(mode="topk", k=2))
    np.testing.assert_allclose(d, [0.625, 0.375, 0.0])


def test_full_k_and_full_p_keep_everything():
    p = np.array([0.1, 0.4, 0.3, 0.2])
    np.testing.assert_allclose(truncated_distribution(p, SamplerConfig(mode="topk", k=4)), p)
    np.testing.assert_allclose(truncated_distribution(p, SamplerConfig(mode="topp", p=1.0)), p)


def test_top_p_smallest_prefix():
    d = truncated_distribution([0.1, 0.4, 0.3, 0.2], SamplerConfig(mode="topp", p=0.7))
    np.testing.assert_allclose(d, [0, 4 / 7, 3 / 7, 0])


def test_cluster_top_one_repairs_incomplete_truncation():
    d = cluster_distribution(PROBS, ABC, SamplerConfig(k=1))
    np.testing.assert_allclose(d, [1 / 3, 1 / 3, 1 / 3, 0, 0, 0])
    plain = truncated_distribution(PROBS, SamplerConfig(mode="topk", k=1))
    np.testing.assert_allclose(plain, [0, 0, 0, 1, 0, 0])


def test_cluster_sums():
    d = cluster_distribution(PROBS, ABC, SamplerConfig(k=2))
    np.testing.assert_allclose(d, np.r_[PROBS[:4], 0, 0] / 0.85)


@pytest.mark.parametrize("k", [1, 2, 3, 5])
def test_singleton_clusters_equal_plain_top_k(k):
    rng = np.random.default_rng(k)
    cb = clustered(np.arange(12))
    for seed in range(20):
        p = rng.dirichlet(np.ones(12))
        a = cluster_sample(p, cb, SamplerConfig(k=k, seed=seed))
        b = truncated_sample(p, SamplerConfig(mode="topk", k=k, seed=seed))
        assert a == b


def test_all_zero_probs_rejected():
    with pytest.raises(ValueError):
        truncated_sample(np.zeros(4), SamplerConfig(mode="topk"))
    with pytest.raises(ValueError):
        cluster_sample(np.zeros(6), ABC, SamplerConfig())


def test_unnormalized_and_bad_config_rejected():
    with pytest.raises(ValueError):
        truncated_sample([0.5, 0.6], SamplerConfig(mode="topk"))
    for bad in (dict(k=0), dict(p=0.0), dict(mode="beam"), dict(temperature=-1)):
        with pytest.raises(ValueError):
            SamplerConfig(**bad)


def test_missing_partition_rejected():
    with pytest.raises(ValueError):
        sample(PROBS, SamplerConfig(), Codebook(1, np.zeros((6, 3))))


@st.composite
def cluster_cases(draw_):
    v = draw_(st.integers(2, 30))
    n_c = draw_(st.integers(1, v))
    cluster_of = np.array(draw_(st.lists(st.integers(0, n_c - 1), min_size=v, max_size=v)))
    weights = np.array(draw_(st.lists(st.floats(0.0, 1.0, allow_subnormal=False), min_size=v, max_size=v)))
    if weights.sum() == 0:
        weights[0] = 1.0
    k = draw_(st.integers(1, n_c))
    return cluster_of, weights / weights.sum(), k


@settings(max_examples=1000, deadline=None)
@given(cluster_cases())
def test_kept_set_is_a_union_of_whole_clusters(case):
    cluster_of, p, k = case
    d = cluster_distribution(p, cluster_of, SamplerConfig(k=k))
    kept = d > 0
    for c in np.unique(cluster_of):
        members = (cluster_of == c) & (p > 0)
        assert kept[members].all() or not kept[members].any()
    # conditional fidelity: inside a kept cluster the ratios are untouched
    for c in np.unique(cluster_of[kept]):
        members = (cluster_of == c) & (p > 0)
        np.testing.assert_allclose(d[members] / d[members].sum(), p[members] / p[members].sum(), rtol=1e-12)


def test_temperature_zero_is_argmax_of_best_cluster():
    rng = np.random.default_rng(3)
    cb = clustered(rng.integers(0, 5, 40))
    for _ in range(50):
        p = rng.dirichlet(np.ones(40) * 0.3)
        best = int(np.argmax(np.bincount(cb.cluster_of, weights=p, minlength=5)))
        members = np.flatnonzero(cb.cluster_of == best)
        want = int(members[np.argmax(p[members])])
        assert {cluster_sample(p, cb, SamplerConfig(temperature=0.0, k=3, seed=s)) for s in range(5)} == {want}


def test_small_temperature_approaches_argmax():
    d = cluster_distribution(PROBS, ABC, SamplerConfig(temperature=0.02, k=3))
    assert d[:3].sum() > 0.999 and np.argmax(d) in (0, 1, 2)


def test_draw_is_inverse_cdf_and_seeded():
    dist = np.array([0.0, 0.5, 0.0, 0.5])
    assert draw(dist, np.random.default_rng(0)) in (1, 3)
    a = [sample(PROBS, SamplerConfig(seed=4), ABC) for _ in range(3)]
    assert len(set(a)) == 1


def test_empirical_frequencies_follow_the_distribution():
    rng = np.random.default_rng(0)
    cfg = SamplerConfig(k=2)
    counts = np.bincount([cluster_sample(PROBS, ABC, cfg, rng) for _ in range(20000)], minlength=6)
    want = cluster_distribution(PROBS, ABC, cfg)
    assert np.abs(counts / 20000 - want).max() < 0.015
