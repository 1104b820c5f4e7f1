import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lpntk.analysis import (AnalysisError, DifficultyRecord, FpcResult, Relationship, RelationshipConfig,
                            batch_forgetting, classify_relationship, cluster_size_histogram, detect_forgetting,
                            difficulty_control_sets, difficulty_correlation, eligible_slots, find_redundant,
                            forgetting_deltas, forgetting_flips, fpc, learning_difficulty, load_clusters,
                            permutation_baseline, predict_forgetting, prune_count, prune_pipeline,
                            save_clusters, score_predictions, select_from_largest_cluster, write_difficulty_csv,
                            write_report_csv)
from lpntk.kernel import KernelMatrix, entk_block, lpntk_from_block
from lpntk.model import NetworkSpec, TrainLog, init_params, logit_jacobian
from lpntk.numerics import make_rng
from oracles import random_symmetric, reference_fpc

HAND = np.array([[4.0, 3.0, 0.0], [3.0, 4.0, 0.0], [0.0, 0.0, 9.0]])


def ten_sample_kernel():
    """Samples 0,1,3..6 form a tight group, 7..9 are isolated and 2 is redundant."""
    K = np.zeros((10, 10))
    group = [0, 1, 3, 4, 5, 6]
    K[np.ix_(group, group)] = 5.0
    K[np.diag_indices(10)] = 10.0
    K[2, 2] = 1.0
    K[0, 2] = K[2, 0] = 2.0
    return K


class TestRelationship:
    def test_identical(self):
        v = np.array([1.0, 2.0])
        assert classify_relationship(v, v) is Relationship.INTERCHANGEABLE

    def test_orthogonal(self):
        assert classify_relationship([1.0, 0.0], [0.0, 3.0]) is Relationship.UNRELATED

    def test_opposite(self):
        assert classify_relationship([1.0, 2.0], [-1.0, -2.0]) is Relationship.CONTRADICTORY

    def test_zero_vector(self):
        assert classify_relationship([0.0, 0.0], [1.0, 0.0]) is Relationship.UNRELATED

    def test_mixed(self):
        # r1 = 1/4, r2 = 1: neither threshold nor the zero band holds for both
        assert classify_relationship([1.0, 0.0], [1.0, np.sqrt(3.0)]) is Relationship.MIXED

    @pytest.mark.parametrize("kw", [{"t_pos": 0.5}, {"t_neg": -0.4}, {"zero_band": -1.0}])
    def test_invalid_config(self, kw):
        with pytest.raises(AnalysisError):
            RelationshipConfig(**kw)

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_symmetric_verdicts(self, seed):
        rng = make_rng(seed)
        a = rng.standard_normal(3)
        b = a * rng.uniform(-2, 2) + 0.3 * rng.standard_normal(3)
        ab, ba = classify_relationship(a, b), classify_relationship(b, a)
        if Relationship.INTERCHANGEABLE in (ab, ba) or Relationship.CONTRADICTORY in (ab, ba):
            assert ab is ba


class TestFpc:
    def test_hand_trace(self):
        r = fpc(HAND, 2)
        assert r.centroids == [2, 0] and r.members == [[], [1]]
        assert cluster_size_histogram(r) == [2, 1]

    def test_one_cluster(self):
        M = np.eye(7) + 0.1
        r = fpc(M, 1)
        assert cluster_size_histogram(r) == [7] and r.cluster(0) == list(range(7))

    def test_every_sample_a_centroid(self):
        r = fpc(HAND, 3)
        assert sorted(r.centroids) == [0, 1, 2] and all(not m for m in r.members)

    @pytest.mark.parametrize("M", [0, 4])
    def test_out_of_range(self, M):
        with pytest.raises(AnalysisError):
            fpc(HAND, M)

    def test_accepts_kernel_matrix(self):
        assert fpc(KernelMatrix.from_dense(HAND), 2).centroids == [2, 0]

    @settings(max_examples=150, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.integers(1, 16), st.booleans())
    def test_matches_reference_and_partitions(self, seed, n, integer):
        rng = make_rng(seed)
        K = random_symmetric(rng, n, integer)
        M = int(rng.integers(1, n + 1))
        r = fpc(K, M)
        c, L = reference_fpc(K.tolist(), M)
        assert r.centroids == c and r.members == L
        everything = sorted(r.centroids + [i for m in r.members for i in m])
        assert everything == list(range(n))
        assert (r.labels(n) >= 0).all()

    def test_cluster_file_round_trip(self, tmp_path):
        r = fpc(HAND, 2)
        save_clusters(tmp_path / "c.json", r, "ab" * 32)
        back, fp = load_clusters(tmp_path / "c.json")
        assert back == r and fp == "ab" * 32
        assert set(json.loads((tmp_path / "c.json").read_text())) == {"centroids", "clusters",
                                                                       "kernel_fingerprint"}


class TestRedundant:
    def test_hand(self):
        assert find_redundant(np.array([[1.0, 2.0], [2.0, 5.0]])).tolist() == [0]

    def test_diagonal_dominant(self):
        assert find_redundant(np.array([[5.0, 1.0], [1.0, 5.0]])).size == 0

    def test_ties_are_not_redundant(self):
        assert find_redundant(np.array([[3.0, 3.0], [3.0, 3.0]])).size == 0

    def test_single_sample(self):
        assert find_redundant(np.array([[1.0]])).size == 0

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_isolated_sample_never_redundant(self, seed):
        rng = make_rng(seed)
        K = random_symmetric(rng, 6, False)
        K[0, 1:] = K[1:, 0] = 0.0
        K[0, 0] = 1.0
        assert 0 not in find_redundant(K)


class TestPrune:
    @pytest.mark.parametrize("frac, size, expected", [(0.0, 10, 0), (0.1, 5, 1), (0.25, 10, 3), (0.5, 6, 3),
                                                      (1.0, 6, 6), (0.1, 0, 0), (0.01, 3, 1)])
    def test_count(self, frac, size, expected):
        assert prune_count(frac, size) == expected

    def test_count_range(self):
        with pytest.raises(AnalysisError):
            prune_count(1.5, 3)

    def test_ten_sample_trace(self):
        K = ten_sample_kernel()
        res = prune_pipeline(10, K, 4, 0.5, make_rng(0))
        assert res.redundant.tolist() == [2]
        assert res.largest_cluster.tolist() == [0, 1, 3, 4, 5, 6]
        expected = np.sort(make_rng(0).choice(np.array([0, 1, 3, 4, 5, 6]), size=3, replace=False))
        assert res.removed_from_cluster.tolist() == expected.tolist()
        assert res.retained.size == 6
        assert set(res.retained) == set(range(10)) - {2} - set(expected.tolist())

    def test_frac_zero(self):
        res = prune_pipeline(10, ten_sample_kernel(), 4, 0.0, make_rng(0))
        assert res.retained.tolist() == [0, 1, 3, 4, 5, 6, 7, 8, 9]

    def test_frac_one(self):
        res = prune_pipeline(10, ten_sample_kernel(), 4, 1.0, make_rng(0))
        assert res.retained.tolist() == [7, 8, 9]

    def test_deterministic(self):
        a = prune_pipeline(10, ten_sample_kernel(), 4, 0.5, make_rng(3))
        b = prune_pipeline(10, ten_sample_kernel(), 4, 0.5, make_rng(3))
        assert a.retained.tolist() == b.retained.tolist()

    def test_size_mismatch(self):
        with pytest.raises(AnalysisError):
            prune_pipeline(3, np.eye(4), 1, 0.1, make_rng(0))


class TestSelectLargest:
    def test_whole_cluster(self):
        sel = select_from_largest_cluster(ten_sample_kernel(), 5, 6, make_rng(0))
        assert sel.tolist() == [0, 1, 3, 4, 5, 6]

    def test_exact_cluster(self):
        assert select_from_largest_cluster(HAND, 2, 2, make_rng(0)).tolist() == [0, 1]

    def test_zero_budget(self):
        assert select_from_largest_cluster(HAND, 2, 0, make_rng(0)).size == 0

    def test_overflow_to_next_cluster(self):
        assert select_from_largest_cluster(HAND, 2, 3, make_rng(0)).tolist() == [0, 1, 2]

    def test_budget_too_large(self):
        with pytest.raises(AnalysisError):
            select_from_largest_cluster(HAND, 2, 4, make_rng(0))


def log_with_losses(L):
    L = np.asarray(L, dtype=float)
    return TrainLog(np.arange(L.shape[1]), np.zeros(L.shape[1], int), L)


class TestDifficulty:
    def test_constant(self):
        assert learning_difficulty(log_with_losses([[0.5]] * 4))[0].difficulty == 2.0

    def test_sum(self):
        assert learning_difficulty(log_with_losses([[1.0], [0.5], [0.25]]))[0].difficulty == 1.75

    def test_recomputation(self):
        L = make_rng(0).random((6, 9))
        recs = learning_difficulty(log_with_losses(L))
        for r in recs:
            total = 0.0
            for e in range(6):
                total += L[e, r.sample_id]
            assert r.difficulty == pytest.approx(total, rel=1e-15)

    def test_monotone_in_epochs(self):
        L = make_rng(1).random((5, 4))
        prev = np.zeros(4)
        for e in range(6):
            cur = np.array([r.difficulty for r in learning_difficulty(log_with_losses(L), e)])
            assert (cur >= prev).all()
            prev = cur

    def test_incomplete_log(self):
        tlog = TrainLog(np.arange(3), np.zeros(3, int), np.zeros((2, 2)))
        with pytest.raises(AnalysisError):
            learning_difficulty(tlog)

    def test_correlation_self(self):
        recs = learning_difficulty(log_with_losses(make_rng(2).random((3, 5))))
        assert difficulty_correlation(recs, recs) == pytest.approx(1.0)

    def test_correlation_id_mismatch(self):
        a = [DifficultyRecord(0, 1.0), DifficultyRecord(1, 2.0)]
        b = [DifficultyRecord(0, 1.0), DifficultyRecord(2, 2.0)]
        with pytest.raises(AnalysisError):
            difficulty_correlation(a, b)

    def test_csv(self, tmp_path):
        write_difficulty_csv(tmp_path / "d.csv", [DifficultyRecord(3, 0.25)])
        assert (tmp_path / "d.csv").read_text().splitlines() == ["sample_id,difficulty", "3,0.25"]


class TestControlSets:
    K5 = np.array([[9.0, 5.0, 1.0, 3.0, -2.0],
                   [5.0, 9.0, 0.0, 0.0, 0.0],
                   [1.0, 0.0, 9.0, 0.0, 0.0],
                   [3.0, 0.0, 0.0, 9.0, 0.0],
                   [-2.0, 0.0, 0.0, 0.0, 9.0]])
    R5 = FpcResult([0, 4], [[1, 2, 3], []])

    def test_manual_sort(self):
        easy, hard, medium = difficulty_control_sets(self.K5, self.R5, 0, 1)
        assert (easy.tolist(), hard.tolist(), medium.tolist()) == ([1], [4], [2])

    def test_zero(self):
        assert all(s.size == 0 for s in difficulty_control_sets(self.K5, self.R5, 0, 0))

    def test_pool_too_small(self):
        with pytest.raises(AnalysisError):
            difficulty_control_sets(self.K5, self.R5, 0, 2)

    def test_target_must_be_head_centroid(self):
        with pytest.raises(AnalysisError):
            difficulty_control_sets(self.K5, self.R5, 4, 1)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_disjoint_and_sorted_by_similarity(self, seed):
        rng = make_rng(seed)
        n = 30
        F = rng.standard_normal((n, 4))
        K = F @ F.T
        r = fpc(K, 3)
        head = r.largest()
        m = min(len(r.members[head]) // 2, n - r.sizes[head])
        target = r.centroids[head]
        easy, hard, medium = difficulty_control_sets(K, r, target, m)
        assert not (set(easy) & set(hard) or set(easy) & set(medium) or set(hard) & set(medium))
        if m:
            assert K[target, easy].min() >= K[target, medium].max()
            assert set(easy) | set(medium) <= set(r.members[head])


def prediction_log(rows, labels):
    rows = np.asarray(rows)
    return TrainLog(np.arange(rows.shape[1]), np.asarray(labels), np.zeros((0, rows.shape[1])),
                    iter_predictions=list(rows))


class TestForgetting:
    def test_single_event(self):
        ev = detect_forgetting(prediction_log([[0], [1]], [0]))
        assert [(e.sample_id, e.iteration, e.previous, e.new) for e in ev] == [(0, 1, 0, 1)]

    def test_always_correct(self):
        assert detect_forgetting(prediction_log([[0], [0], [0]], [0])) == []

    def test_only_at_correct_to_wrong(self):
        ev = detect_forgetting(prediction_log([[1], [0], [1]], [0]))
        assert [e.iteration for e in ev] == [2]

    def test_event_invariants(self):
        rows = make_rng(0).integers(0, 3, size=(20, 6))
        labels = np.array([0, 1, 2, 0, 1, 2])
        for e in detect_forgetting(prediction_log(rows, labels)):
            assert e.previous == labels[e.sample_id] != e.new

    def test_batch_forgetting_and_slots(self):
        tlog = prediction_log([[0, 0, 1], [0, 0, 0], [1, 0, 0]], [0, 0, 0])
        tlog.iter_batches = [np.array([0, 1, 2])]
        assert batch_forgetting(tlog, 0) == {(0, 0)}
        assert eligible_slots(tlog, 0) == [(0, 0), (1, 0), (2, 0)]

    def test_hand_flip(self):
        assert forgetting_flips([0.55, 0.45], 0, [-0.2, 0.2]).tolist() == [True]

    def test_argmax_preserved(self):
        assert forgetting_flips([0.8, 0.2], 0, [-0.1, 0.1]).tolist() == [False]

    def test_wrong_before_is_not_forgetting(self):
        assert forgetting_flips([0.4, 0.6], 0, [-0.3, 0.3]).tolist() == [False]

    def test_deltas_match_block_oracle(self):
        spec = NetworkSpec((3, 5, 3), "tanh")
        rng = make_rng(4)
        params = init_params(spec, rng)
        X_t, X_t1 = rng.random((4, 3)), rng.random((5, 3))
        y_t, y_t1 = rng.integers(0, 3, 4), rng.integers(0, 3, 5)
        dq = forgetting_deltas(X_t, y_t, X_t1, y_t1, params, spec, 0.01)
        for i in range(4):
            J_i = logit_jacobian(params, spec, X_t[i])
            acc = sum(lpntk_from_block(entk_block(J_i, logit_jacobian(params, spec, X_t1[j])),
                                       int(y_t[i]), int(y_t1[j]), variant=True) for j in range(5))
            s = -np.ones(3)
            s[y_t[i]] = 2.0
            np.testing.assert_allclose(dq[i], 0.01 * acc * s, rtol=1e-10, atol=1e-14)

    def test_zero_scale_predicts_nothing(self):
        spec = NetworkSpec((3, 5, 2))
        rng = make_rng(5)
        params = init_params(spec, rng)
        X = rng.random((6, 3))
        y = rng.integers(0, 2, 6)
        assert not predict_forgetting(X, y, X, y, params, spec, 0.0).any()


class TestScoring:
    def test_perfect(self):
        r = score_predictions({(1, 2), (3, 4)}, {(1, 2), (3, 4)})
        assert (r.precision, r.recall, r.f1) == (1.0, 1.0, 1.0)

    def test_halves(self):
        r = score_predictions({(0, 0), (1, 0)}, {(0, 0), (2, 0)})
        assert (r.tp, r.fp, r.fn) == (1, 1, 1) and (r.precision, r.recall, r.f1) == (0.5, 0.5, 0.5)

    def test_empty_flags(self):
        r = score_predictions(set(), set())
        assert r.f1 == 0.0 and r.undefined_precision and r.undefined_recall

    @settings(max_examples=100, deadline=None)
    @given(st.sets(st.integers(0, 20)), st.sets(st.integers(0, 20)))
    def test_bounds_and_harmonic_mean(self, pred, actual):
        r = score_predictions(pred, actual)
        assert 0 <= r.precision <= 1 and 0 <= r.recall <= 1 and 0 <= r.f1 <= 1
        if r.precision + r.recall:
            assert r.f1 == pytest.approx(2 * r.precision * r.recall / (r.precision + r.recall))

    def test_baseline_uses_count_and_slots(self):
        slots = [(i, 0) for i in range(10)]
        r = permutation_baseline(4, slots, set(slots), make_rng(0))
        assert r.tp == 4 and r.fp == 0
        assert permutation_baseline(0, slots, set(), make_rng(0)).tp == 0

    def test_report_csv(self, tmp_path):
        write_report_csv(tmp_path / "r.csv", score_predictions({(0, 0)}, {(0, 0)}))
        assert (tmp_path / "r.csv").read_text().splitlines() == ["tp,fp,fn,precision,recall,f1",
                                                                 "1,0,0,1.0,1.0,1.0"]
