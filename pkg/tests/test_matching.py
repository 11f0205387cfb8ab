import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import random_bank
from cmetrack import oracle
from cmetrack.matching import (
    compute_affinity,
    normalize_features,
    posterior,
    retrieve_scores,
    similarity_maps,
    topk_average,
    topk_average_rows,
)
from cmetrack.types import ContractError, FeatureMap, MemoryBank, ScoreMaps, make_rng


def _instance(seed):
    rng = make_rng(seed)
    h, w = rng.integers(1, 9, size=2)
    c = int(rng.integers(1, 17))
    n = int(rng.integers(1, 65))
    return FeatureMap(rng.standard_normal((h, w, c))), random_bank(rng, n, c), int(rng.integers(1, 6))


def test_normalize_3_4_5():
    out = normalize_features(FeatureMap(np.array([[[3.0, 4.0]]])))
    np.testing.assert_allclose(out.data[0, 0], [0.6, 0.8], atol=1e-15)


def test_normalize_zero_pixel_stays_zero():
    out = normalize_features(FeatureMap(np.zeros((1, 2, 3))))
    assert not out.data.any()


def test_normalize_unit_norms():
    out = normalize_features(FeatureMap.random(0, 4, 4, 8))
    np.testing.assert_allclose(np.linalg.norm(out.flat(), axis=1), 1.0, atol=1e-12)


def test_self_match_diagonal():
    q = normalize_features(FeatureMap.random(1, 3, 3, 4))
    bank = MemoryBank(q.flat(), np.ones(9), np.zeros(9))
    np.testing.assert_allclose(np.diag(compute_affinity(q, bank)), 1.0, atol=1e-12)


def test_orthogonal_entry_is_zero():
    q = FeatureMap(np.array([[[1.0, 0.0]]]))
    bank = MemoryBank(np.array([[0.0, 1.0]]), [1.0], [0.0])
    assert compute_affinity(q, bank)[0, 0] == 0.0


def test_affinity_channel_mismatch():
    with pytest.raises(ContractError):
        compute_affinity(FeatureMap.random(0, 2, 2, 3), MemoryBank(np.ones((1, 4)) / 2, [1.0], [0.0]))


def test_affinity_matches_triple_loop_oracle():
    for seed in range(200):
        fm, bank, _ = _instance(seed)
        q = normalize_features(fm)
        got = compute_affinity(q, bank)
        want = np.array(oracle.naive_affinity(q, bank))
        assert np.max(np.abs(got - want)) <= 1e-10


def test_retrieve_identity_and_zero_values(rng):
    bank = random_bank(rng, 5, 3)
    a = rng.uniform(-1, 1, (4, 5))
    ones = MemoryBank(bank.keys, np.ones(5), np.zeros(5))
    s_f, s_b = retrieve_scores(a, ones)
    np.testing.assert_array_equal(s_f, a)
    assert not s_b.any()


def test_retrieve_matches_oracle():
    for seed in range(50):
        rng = make_rng(seed)
        bank = random_bank(rng, 7, 3)
        a = rng.uniform(-1, 1, (5, 7))
        s_f, s_b = retrieve_scores(a, bank)
        o_f, o_b = oracle.naive_retrieve(a.tolist(), bank.fg, bank.bg)
        assert np.max(np.abs(s_f - np.array(o_f))) <= 1e-10
        assert np.max(np.abs(s_b - np.array(o_b))) <= 1e-10


def test_topk_average_examples():
    v = [0.9, 0.1, 0.8, 0.7]
    assert topk_average(v, 3) == pytest.approx(0.8, abs=1e-15)
    assert topk_average(v, 1) == 0.9
    assert topk_average(v, 4) == pytest.approx(np.mean(v), abs=1e-15)
    assert topk_average(v, 10) == pytest.approx(np.mean(v), abs=1e-15)  # K clamped to len(v)


def test_topk_empty_is_an_error():
    with pytest.raises(ContractError):
        topk_average([], 3)


def test_topk_matches_sort_oracle():
    for seed in range(200):
        rng = make_rng(seed)
        v = rng.standard_normal(int(rng.integers(1, 65)))
        k = int(rng.integers(1, 8))
        assert abs(topk_average(v, k) - oracle.naive_topk(v, k)) <= 1e-10


def test_default_topk_is_three():
    from cmetrack.types import CmeConfig

    assert CmeConfig().topk == 3


def test_single_entry_bank():
    fm = FeatureMap.random(3, 2, 3, 4)
    rng = make_rng(3)
    bank = random_bank(rng, 1, 4)
    q = normalize_features(fm)
    maps = similarity_maps(q, bank, 3)
    a = compute_affinity(q, bank)[:, 0]
    np.testing.assert_allclose(maps.fg.ravel(), a * bank.fg[0], atol=1e-15)


def test_similarity_matches_naive_pipeline():
    for seed in range(200):
        fm, bank, k = _instance(seed)
        maps = similarity_maps(normalize_features(fm), bank, k)
        s_f, s_b = oracle.naive_similarity(fm, bank, k)
        assert np.max(np.abs(maps.fg.ravel() - s_f)) <= 1e-10
        assert np.max(np.abs(maps.bg.ravel() - s_b)) <= 1e-10


def test_posterior_examples():
    p = posterior(ScoreMaps(np.array([[0.3, 20.0]]), np.array([[0.3, 0.0]])))
    assert p.data[0, 0] == 0.5
    assert p.data[0, 1] >= 1 - 1e-8


def test_posterior_matches_two_way_softmax():
    rng = make_rng(9)
    for _ in range(20):
        sf, sb = rng.uniform(-1, 1, (2, 4, 5))
        got = posterior(ScoreMaps(sf, sb)).data.ravel()
        want = oracle.naive_posterior(sf.ravel(), sb.ravel())
        assert np.max(np.abs(got - want)) <= 1e-12


def test_zero_query_pixel_gives_half():
    data = FeatureMap.random(2, 2, 2, 3).data
    data[0, 0] = 0.0
    q = normalize_features(FeatureMap(data))
    p = posterior(similarity_maps(q, random_bank(make_rng(0), 6, 3), 3))
    assert p.data[0, 0] == 0.5


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 10_000), k=st.integers(1, 6))
def test_bank_permutation_invariance(seed, k):
    fm, bank, _ = _instance(seed)
    q = normalize_features(fm)
    perm = make_rng(seed + 1).permutation(len(bank))
    shuffled = MemoryBank(bank.keys[perm], bank.fg[perm], bank.bg[perm])
    a, b = similarity_maps(q, bank, k), similarity_maps(q, shuffled, k)
    assert np.max(np.abs(a.fg - b.fg)) <= 1e-12
    assert np.max(np.abs(posterior(a).data - posterior(b).data)) <= 1e-12


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_posterior_in_open_unit_interval(seed):
    fm, bank, k = _instance(seed)
    p = posterior(similarity_maps(normalize_features(fm), bank, k)).data
    assert np.all((p > 0) & (p < 1))
    fg_bg = p + (1.0 - p)
    assert np.all(fg_bg == 1.0)


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 10_000), bump=st.floats(0.0, 1.0))
def test_raising_a_foreground_value_never_lowers_scores(seed, bump):
    fm, bank, k = _instance(seed)
    q = normalize_features(fm)
    j = int(make_rng(seed).integers(len(bank)))
    fg = bank.fg.copy()
    fg[j] = fg[j] + bump * (1.0 - fg[j])
    raised = MemoryBank(bank.keys, fg, 1.0 - fg)
    before = similarity_maps(q, bank, k).fg.ravel()
    after = similarity_maps(q, raised, k).fg.ravel()
    positive = compute_affinity(q, bank)[:, j] > 0
    assert np.all(after[positive] >= before[positive] - 1e-15)


def test_topk_rows_rejects_bad_k():
    with pytest.raises(ContractError):
        topk_average_rows(np.ones((1, 3)), 0)
