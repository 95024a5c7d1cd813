import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from oracles import oracle_ap, oracle_rerank, random_instance
from vcam.attention import ContractViolation
from vcam.data import SampleRecord
from vcam.evaluation import (EvalProtocol, ParameterError, compute_cmc_map, evaluate_features,
                             k_reciprocal_rerank, load_embeddings, pairwise_distances, rerank_base_distances,
                             save_embeddings, track_compress)


# ---- distances --------------------------------------------------------------------------------------

def test_pairwise_distances_cases():
    x = np.array([[1.0, 2.0, 3.0]])
    assert pairwise_distances(x, x)[0, 0] == pytest.approx(0.0, abs=1e-7)
    e = np.eye(2)
    assert pairwise_distances(e[:1], e[1:])[0, 0] == pytest.approx(math.sqrt(2), abs=1e-12)
    rng = np.random.default_rng(0)
    q, g = rng.normal(size=(3, 2)), rng.normal(size=(2, 2))
    d = pairwise_distances(q, g, normalize=False)
    for i in range(3):
        for j in range(2):
            assert d[i, j] == pytest.approx(math.dist(q[i], g[j]), abs=1e-12)
    with pytest.raises(ContractViolation):
        pairwise_distances(q, np.zeros((2, 3)))


# ---- CMC / mAP ----------------------------------------------------------------------------------------

def test_hand_ap():
    # positives at ranks 1 and 3
    d = np.array([[0.1, 0.2, 0.3, 0.4]])
    rep = compute_cmc_map(d, [1], [1, 2, 1, 3], [0], [1, 1, 1, 1])
    assert abs(rep.mAP - (1 + 2 / 3) / 2) <= 1e-12
    assert rep.cmc[0] == 1.0


def test_perfect_ranking():
    d = np.array([[0.0, 1.0, 2.0], [2.0, 0.0, 1.0]])
    rep = compute_cmc_map(d, [0, 1], [0, 1, 2], [0, 0], [1, 1, 1])
    assert rep.mAP == 1.0 and rep.rank1 == 1.0


def test_same_camera_exclusion():
    d = np.array([[0.0, 1.0]])
    rep = compute_cmc_map(d, [5], [5, 5], [0], [0, 1])
    assert rep.rank1 == 1.0 and rep.mAP == 1.0
    rep = compute_cmc_map(d, [5], [5, 5], [0], [0, 1], exclude_same_camera=False)
    assert rep.mAP == 1.0


def test_no_valid_query():
    with pytest.raises(ContractViolation):
        compute_cmc_map(np.zeros((1, 2)), [1], [2, 3], [0], [0, 0])


def test_matches_oracle_on_random_instances():
    rng = np.random.default_rng(2024)
    for _ in range(50):
        d, qi, gi, qc, gc = random_instance(rng)
        aps, truncs, firsts = oracle_ap(d.tolist(), qi, gi, qc, gc, max_rank=10)
        rep = compute_cmc_map(d, qi, gi, qc, gc, max_rank=10)
        assert abs(rep.mAP - np.mean(aps)) <= 1e-9
        assert abs(rep.truncated_mAP - np.mean(truncs)) <= 1e-9
        for k in range(10):
            assert abs(rep.cmc[k] - np.mean([f <= k + 1 for f in firsts])) <= 1e-9
        assert rep.num_valid_queries == len(aps)


def test_tie_break_by_gallery_index():
    d = np.zeros((1, 3))
    rep = compute_cmc_map(d, [1], [2, 1, 1], [0], [1, 1, 1])
    assert rep.mAP == pytest.approx((1 / 2 + 2 / 3) / 2)


@given(st.integers(0, 10_000))
def test_truncation_at_gallery_size_is_exact(seed):
    d, qi, gi, qc, gc = random_instance(np.random.default_rng(seed), 5, 12, 4, 3)
    try:
        rep = compute_cmc_map(d, qi, gi, qc, gc, max_rank=12)
    except ContractViolation:
        return
    assert rep.truncated_mAP == rep.mAP


@given(st.integers(0, 10_000))
def test_gallery_permutation_invariance(seed):
    rng = np.random.default_rng(seed)
    d, qi, gi, qc, gc = random_instance(rng, 5, 15, 4, 3)
    perm = rng.permutation(15)
    try:
        a = compute_cmc_map(d, qi, gi, qc, gc)
    except ContractViolation:
        return
    b = compute_cmc_map(d[:, perm], qi, gi[perm], qc, gc[perm])
    assert a.mAP == pytest.approx(b.mAP, abs=1e-12)
    assert a.cmc == b.cmc


@given(st.integers(0, 10_000))
def test_cmc_monotone(seed):
    d, qi, gi, qc, gc = random_instance(np.random.default_rng(seed), 6, 20, 5, 3)
    try:
        rep = compute_cmc_map(d, qi, gi, qc, gc)
    except ContractViolation:
        return
    assert all(a <= b for a, b in zip(rep.cmc, rep.cmc[1:]))


def test_report_fields(tmp_path):
    rng = np.random.default_rng(0)
    d, qi, gi, qc, gc = random_instance(rng)
    rep = compute_cmc_map(d, qi, gi, qc, gc, max_rank=100)
    out = rep.to_dict()
    assert "rank100_mAP" in out and out["protocol"]["exclude_same_camera"] is True
    rep.save(tmp_path / "r.json")
    assert (tmp_path / "r.json").read_text().startswith("{")


# ---- track compression ------------------------------------------------------------------------------

def test_track_compress_cases():
    u, v = np.array([1.0, 2.0]), np.array([3.0, 6.0])
    out = track_compress(np.stack([u, v, u]), [7, 7, 9])
    np.testing.assert_array_equal(out[0], (u + v) / 2)
    np.testing.assert_array_equal(out[1], (u + v) / 2)
    np.testing.assert_array_equal(out[2], u)
    same = np.array([[0.1, 0.7]] * 3)
    np.testing.assert_array_equal(track_compress(same, [1, 1, 1]), same)
    with pytest.raises(ContractViolation):
        track_compress(same, [1, 1])


@given(st.integers(0, 10_000))
def test_track_compress_idempotent_and_constant(seed):
    rng = np.random.default_rng(seed)
    g = rng.normal(size=(25, 4))
    tracks = rng.integers(0, 6, 25)
    once = track_compress(g, tracks)
    assert np.array_equal(track_compress(once, tracks), once)
    for t in np.unique(tracks):
        rows = once[tracks == t]
        assert np.all(rows == rows[0])


# ---- re-ranking ---------------------------------------------------------------------------------------

def test_rerank_matches_direct_reimplementation():
    rng = np.random.default_rng(99)
    for trial in range(20):
        nq = int(rng.integers(3, 8))
        ng = int(rng.integers(10, 30 - nq))
        q, g = rng.normal(size=(nq, 5)), rng.normal(size=(ng, 5))
        k1 = int(rng.integers(3, 8))
        k2 = int(rng.integers(1, k1))
        lam = float(rng.random())
        got = k_reciprocal_rerank(q, g, k1, k2, lam)
        np.testing.assert_allclose(got, oracle_rerank(q, g, k1, k2, lam), rtol=0, atol=1e-9)


def test_rerank_lambda_one_is_identity():
    rng = np.random.default_rng(5)
    q, g = rng.normal(size=(4, 6)), rng.normal(size=(20, 6))
    out = k_reciprocal_rerank(q, g, 6, 3, 1.0)
    assert np.array_equal(out, rerank_base_distances(q, g)[:4, 4:])
    # same ranking as plain normalized euclidean distances
    plain = pairwise_distances(q, g)
    assert np.array_equal(np.argsort(out, axis=1, kind="stable"), np.argsort(plain, axis=1, kind="stable"))


def test_rerank_preserves_cluster_order():
    rng = np.random.default_rng(1)
    centers = np.array([[10.0, 0, 0], [0, 10.0, 0]])
    g = np.concatenate([centers[0] + rng.normal(0, 0.3, (8, 3)), centers[1] + rng.normal(0, 0.3, (8, 3))])
    q = centers + rng.normal(0, 0.3, (2, 3))
    out = k_reciprocal_rerank(q, g, 5, 2, 0.3)
    assert np.all(np.argsort(out[0])[:8] < 8)
    assert np.all(np.argsort(out[1])[:8] >= 8)


@pytest.mark.parametrize("k1, k2, lam", [(3, 3, 0.3), (3, 0, 0.3), (50, 2, 0.3), (5, 2, 1.5)])
def test_rerank_parameter_errors(k1, k2, lam):
    with pytest.raises(ParameterError):
        k_reciprocal_rerank(np.ones((2, 3)), np.eye(3)[[0, 1, 2, 0, 1, 2]] + 0.1, k1, k2, lam)


def test_evaluate_features_rerank_lambda_one_matches_raw():
    rng = np.random.default_rng(3)
    q, g = rng.normal(size=(8, 5)), rng.normal(size=(40, 5))
    qi, gi = rng.integers(0, 5, 8), rng.integers(0, 5, 40)
    qc, gc = rng.integers(0, 3, 8), rng.integers(0, 3, 40)
    raw = evaluate_features(q, g, qi, gi, qc, gc)
    rr = evaluate_features(q, g, qi, gi, qc, gc, protocol=EvalProtocol(rerank=True, lambda_value=1.0))
    assert raw.mAP == rr.mAP and raw.cmc == rr.cmc
    assert rr.protocol["rerank"] is True and rr.protocol["k1"] == 8


def test_embeddings_round_trip(tmp_path):
    feats = np.random.default_rng(0).normal(size=(3, 4))
    recs = [SampleRecord(f"images/q/{i}.png", i, 1, 10 + i, 0.0, 1.0, 5.0, "query") for i in range(3)]
    save_embeddings(tmp_path / "e.f64", feats, recs)
    back, samples = load_embeddings(tmp_path / "e.f64")
    assert np.array_equal(back, feats)
    assert [s["id"] for s in samples] == [0, 1, 2] and samples[2]["track"] == 12
