from __future__ import annotations

import math

import numpy as np
import pytest

from debias_bound.metrics import (
    MetricsReport,
    auc,
    candidates,
    cumulative_hits,
    dataset_popularity_report,
    evaluate,
    per_user_auc,
    popular_items,
    popularity_report,
    rank_items,
    topk_metrics,
)
from debias_bound.models import DataIntegrityError, Dataset, Regime

SCORES = np.array([[0.9, 0.1, 0.5, 0.5], [0.2, 0.8, 0.3, 0.1]])
INV_LOG3 = 1.0 / np.log2(3)


class MatrixScorer:
    """固定のスコア行列を返すモデル。"""

    def __init__(self, scores: np.ndarray) -> None:
        self.scores = scores

    def predict(self, users: np.ndarray, items: np.ndarray) -> np.ndarray:
        return self.scores[users, items]


@pytest.fixture
def train() -> Dataset:
    return Dataset(np.array([0, 1]), np.array([1, 3]), np.array([0, 1]), 2, 4, Regime.NON_RANDOMIZED)


@pytest.fixture
def held_out() -> Dataset:
    return Dataset(
        np.array([0, 0, 0, 1, 1]),
        np.array([0, 2, 3, 1, 2]),
        np.array([1, 0, 1, 0, 1]),
        2,
        4,
        Regime.TEST,
    )


class TestRanking:
    def test_tie_broken_by_item_id(self) -> None:
        ranked = rank_items(np.array([0.5, 0.9, 0.5, 0.1]), np.array([7, 3, 2, 5]))
        np.testing.assert_array_equal(ranked, [3, 2, 7, 5])

    def test_candidates_exclude_training_items(self, train: Dataset) -> None:
        np.testing.assert_array_equal(candidates(0, [train], 4), [0, 2, 3])
        np.testing.assert_array_equal(candidates(1, [train], 4), [0, 1, 2])


class TestAuc:
    def test_global_auc_counts_ties_as_half(self, held_out: Dataset) -> None:
        scores = MatrixScorer(SCORES).predict(held_out.users, held_out.items)
        assert auc(scores, held_out.labels) == pytest.approx(2.5 / 6)

    def test_single_class(self) -> None:
        with pytest.raises(ValueError, match="正例と負例"):
            auc(np.array([0.1, 0.2]), np.array([1, 1]))

    def test_per_user(self, held_out: Dataset) -> None:
        assert per_user_auc(MatrixScorer(SCORES), held_out) == pytest.approx((0.75 + 0.0) / 2)


class TestTopK:
    def test_hand_computed(self) -> None:
        rankings = [
            (np.array([0, 2, 3]), np.array([0, 3])),
            (np.array([1, 2, 0]), np.array([2])),
        ]
        precision, recall, ndcg, n = topk_metrics(rankings, ks=(1, 2))
        assert n == 2
        assert precision == pytest.approx({1: 0.5, 2: 0.5})
        assert recall == pytest.approx({1: 0.25, 2: 0.75})
        assert ndcg == pytest.approx((1.5 / (1 + INV_LOG3) + INV_LOG3) / 2)

    def test_ndcg_cutoff(self) -> None:
        rankings = [(np.array([0, 2, 3]), np.array([0, 3])), (np.array([1, 2, 0]), np.array([2]))]
        _, _, ndcg, _ = topk_metrics(rankings, ks=(1,), ndcg_cutoff=1)
        assert ndcg == pytest.approx(0.5)

    def test_users_without_positives_are_skipped(self) -> None:
        rankings = [(np.array([0, 1]), np.array([1])), (np.array([0, 1]), np.zeros(0, np.int64))]
        precision, _, ndcg, n = topk_metrics(rankings, ks=(1,))
        assert n == 1
        assert precision[1] == 0.0
        assert ndcg == pytest.approx(INV_LOG3)

    def test_no_users(self) -> None:
        assert topk_metrics([], ks=(5,)) == ({5: 0.0}, {5: 0.0}, 0.0, 0)


class TestEvaluate:
    def test_report(self, train: Dataset, held_out: Dataset) -> None:
        report = evaluate(MatrixScorer(SCORES), held_out, [train], ks=(1, 2))
        assert report.auc == pytest.approx(2.5 / 6)
        assert report.ndcg == pytest.approx((1.5 / (1 + INV_LOG3) + INV_LOG3) / 2)
        assert report.precision_at == pytest.approx({1: 0.5, 2: 0.5})
        assert report.n_users_evaluated == 2

    def test_per_user_flag(self, train: Dataset, held_out: Dataset) -> None:
        report = evaluate(MatrixScorer(SCORES), held_out, [train], per_user=True)
        assert report.auc == pytest.approx(0.375)

    def test_to_row(self) -> None:
        report = MetricsReport(0.7, 0.4, {5: 0.2}, {5: 0.3}, 10)
        assert report.to_row() == {"auc": 0.7, "ndcg": 0.4, "p@5": 0.2, "r@5": 0.3, "n_users": 10}


class TestPopularity:
    def test_popular_items_tie_by_id(self, train: Dataset) -> None:
        np.testing.assert_array_equal(popular_items(train), [1])
        np.testing.assert_array_equal(popular_items(train, fraction=0.5), [1, 3])

    def test_model_report(self, train: Dataset, held_out: Dataset) -> None:
        report = popularity_report(MatrixScorer(SCORES), train, held_out, list_length=2)
        assert report.rec_share == pytest.approx({"popular": 0.25, "unpopular": 0.75})
        assert report.hit_share == pytest.approx({"popular": 0.0, "unpopular": 1.0})
        assert report.utility == pytest.approx({"popular": 0.0, "unpopular": 1 / 0.75})
        assert [row["group"] for row in report.to_rows()] == ["popular", "unpopular"]

    def test_dataset_report(self, held_out: Dataset) -> None:
        report = dataset_popularity_report(held_out, np.array([1]))
        assert report.rec_share["popular"] == pytest.approx(0.2)
        assert report.hit_share["popular"] == 0.0


class TestCumulativeHits:
    def test_curve(self, train: Dataset, held_out: Dataset) -> None:
        curve = cumulative_hits(MatrixScorer(SCORES), held_out, [train], k=2)
        np.testing.assert_allclose(curve, [0.5, 1.0])

    def test_empty_test_set(self, train: Dataset) -> None:
        empty = Dataset.empty(2, 4, Regime.TEST)
        curve = cumulative_hits(MatrixScorer(SCORES), empty, [train])
        np.testing.assert_array_equal(curve, [0.0, 0.0])


def _naive_auc(scores: np.ndarray, labels: np.ndarray) -> float:
    """正例・負例の全ペアを数える AUC（同点は 1/2）。"""
    wins = 0.0
    pairs = 0
    for sp, lp in zip(scores, labels):
        for sn, ln in zip(scores, labels):
            if lp == 1 and ln == 0:
                pairs += 1
                wins += 1.0 if sp > sn else 0.5 if sp == sn else 0.0
    return wins / pairs


def _naive_ndcg(ranked: np.ndarray, positives: np.ndarray, cutoff: int | None) -> float:
    depth = len(ranked) if cutoff is None else min(cutoff, len(ranked))
    gain = 0.0
    for i in range(depth):
        if ranked[i] in positives:
            gain += 1.0 / math.log2(i + 2)
    n_pos = sum(1 for item in ranked if item in positives)
    ideal = sum(1.0 / math.log2(i + 2) for i in range(min(n_pos, depth)))
    return gain / ideal if ideal else 0.0


class TestAgainstBruteForce:
    """候補 8 件以下のランダムな 10⁴ ケースで総当たりの定義と一致する。"""

    N_CASES = 10_000

    def test_auc(self) -> None:
        rng = np.random.default_rng(0)
        for _ in range(self.N_CASES):
            n = int(rng.integers(2, 9))
            labels = rng.integers(0, 2, size=n)
            labels[rng.choice(n, size=2, replace=False)] = [0, 1]
            # 同点が頻繁に出るよう粗い格子から引く
            scores = rng.integers(0, 4, size=n) / 4.0
            assert abs(auc(scores, labels) - _naive_auc(scores, labels)) <= 1e-12

    def test_topk_and_ndcg(self) -> None:
        rng = np.random.default_rng(1)
        ks = (1, 3, 5)
        for _ in range(self.N_CASES):
            n = int(rng.integers(1, 9))
            ranked = rng.permutation(20)[:n]
            n_pos = int(rng.integers(1, n + 1))
            positives = rng.choice(ranked, size=n_pos, replace=False)
            cutoff = None if rng.random() < 0.5 else int(rng.integers(1, 9))
            p, r, ndcg, users = topk_metrics([(ranked, positives)], ks=ks, ndcg_cutoff=cutoff)
            assert users == 1
            for k in ks:
                hits = sum(1 for item in ranked[:k] if item in positives)
                assert abs(p[k] - hits / k) <= 1e-12
                assert abs(r[k] - hits / n_pos) <= 1e-12
            assert abs(ndcg - _naive_ndcg(ranked, positives, cutoff)) <= 1e-12

    def test_single_class_is_a_data_error(self) -> None:
        with pytest.raises(DataIntegrityError):
            auc(np.array([0.1, 0.2]), np.array([1, 1]))
