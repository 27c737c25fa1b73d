"""評価指標（AUC / nDCG / P@K / R@K）と人気度・累積ヒットの分析。

ランキングはスコアの降順、同点はアイテムIDの昇順で決める。
"""

from __future__ import annotations

from collections.abc import Iterator, Sequence
from dataclasses import dataclass, field
from typing import Protocol

import numpy as np
import scipy.sparse as sp
from sklearn.metrics import roc_auc_score

from debias_bound.models import DataIntegrityError, Dataset

DEFAULT_KS = (5, 10)
POPULAR_FRACTION = 0.2
GROUPS = ("popular", "unpopular")


class Scorer(Protocol):
    """(user, item) 配列に対してスコアを返すもの（FactorModel など）。"""

    def predict(self, users: np.ndarray, items: np.ndarray) -> np.ndarray: ...


@dataclass(frozen=True)
class MetricsReport:
    auc: float
    ndcg: float
    precision_at: dict[int, float] = field(default_factory=dict)
    recall_at: dict[int, float] = field(default_factory=dict)
    n_users_evaluated: int = 0

    def to_row(self) -> dict[str, float | int]:
        row: dict[str, float | int] = {"auc": self.auc, "ndcg": self.ndcg}
        for k in sorted(self.precision_at):
            row[f"p@{k}"] = self.precision_at[k]
            row[f"r@{k}"] = self.recall_at[k]
        row["n_users"] = self.n_users_evaluated
        return row


@dataclass(frozen=True)
class PopularityReport:
    """人気アイテム群（学習データ頻度の上位 20%）と不人気群の推薦・ヒットの内訳。"""

    popular_items: np.ndarray
    rec_share: dict[str, float]
    hit_share: dict[str, float]
    utility: dict[str, float]

    def to_rows(self) -> list[dict[str, object]]:
        return [
            {
                "group": g,
                "rec_share": self.rec_share[g],
                "hit_share": self.hit_share[g],
                "utility": self.utility[g],
            }
            for g in GROUPS
        ]


# ---------------------------------------------------------------------------
# 候補集合とランキング
# ---------------------------------------------------------------------------


def _seen_matrix(train_sets: Sequence[Dataset], n_users: int, n_items: int) -> sp.csr_matrix:
    users = np.concatenate([d.users for d in train_sets]) if train_sets else np.zeros(0, np.int64)
    items = np.concatenate([d.items for d in train_sets]) if train_sets else np.zeros(0, np.int64)
    seen = sp.csr_matrix(
        (np.ones(len(users), dtype=bool), (users, items)), shape=(n_users, n_items)
    )
    seen.sum_duplicates()
    return seen


def _candidates_from(seen: sp.csr_matrix, user: int) -> np.ndarray:
    mask = np.ones(seen.shape[1], dtype=bool)
    mask[seen.indices[seen.indptr[user] : seen.indptr[user + 1]]] = False
    return np.flatnonzero(mask)


def candidates(user: int, train_sets: Sequence[Dataset], n_items: int) -> np.ndarray:
    """学習データのいずれにも現れないアイテム（昇順）。"""
    mask = np.ones(n_items, dtype=bool)
    for d in train_sets:
        mask[d.items[d.users == user]] = False
    return np.flatnonzero(mask)


def rank_items(scores: np.ndarray, items: np.ndarray) -> np.ndarray:
    """スコア降順・同点はアイテムID昇順に並べたアイテム配列。"""
    return items[np.lexsort((items, -scores))]


def _rankings(
    model: Scorer, users: np.ndarray, seen: sp.csr_matrix
) -> Iterator[tuple[int, np.ndarray]]:
    for u in users:
        cand = _candidates_from(seen, int(u))
        if cand.size == 0:
            continue
        scores = model.predict(np.full(cand.size, u, dtype=np.int64), cand)
        yield int(u), rank_items(scores, cand)


def _test_positives(test: Dataset) -> dict[int, np.ndarray]:
    pos = test.labels == 1
    users, items = test.users[pos], test.items[pos]
    order = np.argsort(users, kind="stable")
    users, items = users[order], items[order]
    uniq, starts = np.unique(users, return_index=True)
    return {int(u): chunk for u, chunk in zip(uniq, np.split(items, starts[1:]))}


# ---------------------------------------------------------------------------
# 指標
# ---------------------------------------------------------------------------


def auc(scores: np.ndarray, labels: np.ndarray) -> float:
    """大域 AUC（同点は 1/2 として数える）。"""
    labels = np.asarray(labels)
    if np.unique(labels).size < 2:
        raise DataIntegrityError("AUC の計算には正例と負例の両方が必要です")
    return float(roc_auc_score(labels, np.asarray(scores, dtype=float)))


def per_user_auc(model: Scorer, test: Dataset) -> float:
    """正例と負例の両方を持つユーザごとの AUC の平均。"""
    values = []
    for u in np.unique(test.users):
        mask = test.users == u
        labels = test.labels[mask]
        if np.unique(labels).size < 2:
            continue
        values.append(auc(model.predict(test.users[mask], test.items[mask]), labels))
    if not values:
        raise DataIntegrityError("正例と負例の両方を持つユーザがいません")
    return float(np.mean(values))


def dcg(hits: np.ndarray) -> float:
    """順位順に並んだ 0/1 の利得から DCG = Σ 1/log₂(rank + 1) を計算する。"""
    ranks = np.flatnonzero(hits) + 1
    return float(np.sum(1.0 / np.log2(ranks + 1)))


def topk_metrics(
    rankings: Sequence[tuple[np.ndarray, np.ndarray]],
    ks: Sequence[int] = DEFAULT_KS,
    ndcg_cutoff: int | None = None,
) -> tuple[dict[int, float], dict[int, float], float, int]:
    """ユーザごとの (ランキング, テスト正例) から P@K, R@K, nDCG を平均する。

    テスト正例が無いユーザと候補が空のユーザは平均から除く。
    nDCG の理想値は候補に含まれる正例数で計算する。

    Returns:
        (P@K, R@K, nDCG, 評価したユーザ数)
    """
    precision = {k: 0.0 for k in ks}
    recall = {k: 0.0 for k in ks}
    ndcg_sum = 0.0
    n = 0
    for ranked, positives in rankings:
        if len(positives) == 0 or len(ranked) == 0:
            continue
        n += 1
        hits = np.isin(ranked, positives)
        for k in ks:
            h = int(hits[:k].sum())
            precision[k] += h / k
            recall[k] += h / len(positives)
        cut = hits if ndcg_cutoff is None else hits[:ndcg_cutoff]
        n_ideal = int(hits.sum()) if ndcg_cutoff is None else min(int(hits.sum()), ndcg_cutoff)
        if n_ideal:
            ndcg_sum += dcg(cut) / dcg(np.ones(n_ideal, dtype=bool))
    if n == 0:
        return precision, recall, 0.0, 0
    return (
        {k: v / n for k, v in precision.items()},
        {k: v / n for k, v in recall.items()},
        ndcg_sum / n,
        n,
    )


def evaluate(
    model: Scorer,
    test: Dataset,
    train_sets: Sequence[Dataset],
    ks: Sequence[int] = DEFAULT_KS,
    ndcg_cutoff: int | None = None,
    per_user: bool = False,
) -> MetricsReport:
    """テストデータに対する全指標をまとめて計算する。

    AUC はテストの全インタラクションで大域的に計算する（per_user=True でユーザ平均）。
    ランキング指標は学習データに現れないアイテムを候補とする。
    """
    if per_user:
        auc_value = per_user_auc(model, test)
    else:
        auc_value = auc(model.predict(test.users, test.items), test.labels)

    positives = _test_positives(test)
    seen = _seen_matrix(train_sets, test.n_users, test.n_items)
    users = np.array(sorted(positives), dtype=np.int64)
    rankings = [(ranked, positives[u]) for u, ranked in _rankings(model, users, seen)]
    precision, recall, ndcg, n = topk_metrics(rankings, ks, ndcg_cutoff)
    return MetricsReport(auc_value, ndcg, precision, recall, n)


# ---------------------------------------------------------------------------
# 人気度分析
# ---------------------------------------------------------------------------


def popular_items(train: Dataset, fraction: float = POPULAR_FRACTION) -> np.ndarray:
    """学習データでの出現頻度の上位 fraction のアイテム（同数はID昇順）。"""
    freq = np.bincount(train.items, minlength=train.n_items)
    n_popular = int(np.ceil(fraction * train.n_items))
    order = np.lexsort((np.arange(train.n_items), -freq))
    return np.sort(order[:n_popular])


def _shares(
    slots_popular: int, slots_total: int, hits_popular: int, hits_total: int, popular: np.ndarray
) -> PopularityReport:
    rec = {
        "popular": slots_popular / slots_total if slots_total else 0.0,
        "unpopular": (slots_total - slots_popular) / slots_total if slots_total else 0.0,
    }
    hit = {
        "popular": hits_popular / hits_total if hits_total else 0.0,
        "unpopular": (hits_total - hits_popular) / hits_total if hits_total else 0.0,
    }
    utility = {g: hit[g] / rec[g] if rec[g] > 0 else 0.0 for g in GROUPS}
    return PopularityReport(popular, rec, hit, utility)


def popularity_report(
    model: Scorer,
    train: Dataset,
    test: Dataset,
    list_length: int = 10,
    train_sets: Sequence[Dataset] | None = None,
) -> PopularityReport:
    """各ユーザの上位 list_length 件の推薦を人気群/不人気群に分けて集計する。

    utility = ヒットの割合 / 推薦枠の割合（群ごと）。
    """
    popular = popular_items(train)
    is_popular = np.zeros(train.n_items, dtype=bool)
    is_popular[popular] = True
    positives = _test_positives(test)
    seen = _seen_matrix(train_sets if train_sets is not None else [train], test.n_users, test.n_items)

    slots_total = slots_popular = hits_total = hits_popular = 0
    for u, ranked in _rankings(model, np.unique(test.users), seen):
        top = ranked[:list_length]
        slots_total += top.size
        slots_popular += int(is_popular[top].sum())
        hit = top[np.isin(top, positives.get(u, np.zeros(0, np.int64)))]
        hits_total += hit.size
        hits_popular += int(is_popular[hit].sum())
    return _shares(slots_popular, slots_total, hits_popular, hits_total, popular)


def dataset_popularity_report(dataset: Dataset, popular: np.ndarray) -> PopularityReport:
    """ログ自体を推薦枠とみなした内訳（露出 = 枠、正例 = ヒット）。"""
    is_popular = np.zeros(dataset.n_items, dtype=bool)
    is_popular[popular] = True
    on_popular = is_popular[dataset.items]
    positive = dataset.labels == 1
    return _shares(
        int(on_popular.sum()),
        len(dataset),
        int((on_popular & positive).sum()),
        int(positive.sum()),
        popular,
    )


def cumulative_hits(
    model: Scorer,
    test: Dataset,
    train_sets: Sequence[Dataset],
    k: int = 10,
) -> np.ndarray:
    """ユーザID昇順に、上位 k 件のヒット確率 (hits@k / k) を累積した曲線。

    テスト正例の無いユーザの寄与は 0。長さは n_users。
    """
    positives = _test_positives(test)
    seen = _seen_matrix(train_sets, test.n_users, test.n_items)
    per_user = np.zeros(test.n_users)
    users = np.array(sorted(positives), dtype=np.int64)
    for u, ranked in _rankings(model, users, seen):
        per_user[u] = np.isin(ranked[:k], positives[u]).sum() / k
    return np.cumsum(per_user)
