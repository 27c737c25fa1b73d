from __future__ import annotations

from collections.abc import Iterator
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

UNSET_LABEL = -1


class DataIntegrityError(ValueError):
    """データの整合性エラー（重複ペア・範囲外ID・不正ラベル・空や次元の合わないデータ）。"""


class Regime(Enum):
    """データセットの出自（収集方策・用途）。"""

    NON_RANDOMIZED = "non_randomized"  # S_c: 確率的推薦方策 π_c 下のログ
    RANDOMIZED = "randomized"  # S_t: 一様方策 π_t 下のログ
    VALIDATION = "validation"
    TEST = "test"
    AUXILIARY = "auxiliary"  # S_a: 未観測ペアからのサンプル（ラベルなし）


@dataclass(frozen=True)
class Interaction:
    """1件のフィードバック (user, item, label)。"""

    user: int
    item: int
    label: int | None


@dataclass(frozen=True)
class Dataset:
    """Interaction の不変コレクション。

    内部では列指向の配列 (users, items, labels) として保持する。
    AUXILIARY のデータセットはラベルを持たず、labels は全て UNSET_LABEL。
    """

    users: np.ndarray
    items: np.ndarray
    labels: np.ndarray
    n_users: int
    n_items: int
    regime: Regime

    def __post_init__(self) -> None:
        users = np.array(self.users, dtype=np.int64).reshape(-1)
        items = np.array(self.items, dtype=np.int64).reshape(-1)
        labels = np.array(self.labels, dtype=np.int64).reshape(-1)
        if not (len(users) == len(items) == len(labels)):
            raise DataIntegrityError("users / items / labels の長さが一致しません")
        if self.n_users <= 0 or self.n_items <= 0:
            raise DataIntegrityError("n_users と n_items は正の整数で指定してください")
        if len(users) > 0:
            if users.min() < 0 or users.max() >= self.n_users:
                raise DataIntegrityError(f"ユーザIDが範囲外です（n_users={self.n_users}）")
            if items.min() < 0 or items.max() >= self.n_items:
                raise DataIntegrityError(f"アイテムIDが範囲外です（n_items={self.n_items}）")
        if self.regime is Regime.AUXILIARY:
            if np.any(labels != UNSET_LABEL):
                raise DataIntegrityError("AUXILIARY データセットはラベルを持てません")
        elif np.any((labels != 0) & (labels != 1)):
            raise DataIntegrityError("ラベルは 0 または 1 で指定してください")

        keys = users * self.n_items + items
        if len(np.unique(keys)) != len(keys):
            raise DataIntegrityError("同一の (user, item) ペアが重複しています")

        for name, arr in (("users", users), ("items", items), ("labels", labels)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    # ------------------------------------------------------------------
    # 生成
    # ------------------------------------------------------------------

    @classmethod
    def empty(cls, n_users: int, n_items: int, regime: Regime) -> Dataset:
        none = np.zeros(0, dtype=np.int64)
        return cls(none, none, none, n_users, n_items, regime)

    @classmethod
    def from_interactions(
        cls,
        interactions: list[Interaction],
        n_users: int,
        n_items: int,
        regime: Regime,
    ) -> Dataset:
        return cls(
            users=np.array([x.user for x in interactions], dtype=np.int64),
            items=np.array([x.item for x in interactions], dtype=np.int64),
            labels=np.array(
                [UNSET_LABEL if x.label is None else x.label for x in interactions],
                dtype=np.int64,
            ),
            n_users=n_users,
            n_items=n_items,
            regime=regime,
        )

    # ------------------------------------------------------------------
    # 参照
    # ------------------------------------------------------------------

    def __len__(self) -> int:
        return len(self.users)

    def __iter__(self) -> Iterator[Interaction]:
        return iter(self.interactions)

    @property
    def interactions(self) -> list[Interaction]:
        return [
            Interaction(int(u), int(i), None if lab == UNSET_LABEL else int(lab))
            for u, i, lab in zip(self.users, self.items, self.labels)
        ]

    @property
    def d_size(self) -> int:
        """|D| = n_users × n_items。"""
        return self.n_users * self.n_items

    @property
    def pair_keys(self) -> np.ndarray:
        """(user, item) を user * n_items + item に平坦化したキー。"""
        return self.users * self.n_items + self.items

    @property
    def n_positive(self) -> int:
        return int(np.sum(self.labels == 1))

    @property
    def n_negative(self) -> int:
        return int(np.sum(self.labels == 0))

    @property
    def positive_rate(self) -> float:
        return self.n_positive / len(self) if len(self) else 0.0

    @property
    def positive_negative_ratio(self) -> float:
        """正例数 / 負例数（負例が無い場合は inf）。"""
        return self.n_positive / self.n_negative if self.n_negative else float("inf")

    # ------------------------------------------------------------------
    # 変換（常に新しい Dataset を返す）
    # ------------------------------------------------------------------

    def subset(self, indices: np.ndarray, regime: Regime | None = None) -> Dataset:
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(
            self.users[idx],
            self.items[idx],
            self.labels[idx],
            self.n_users,
            self.n_items,
            self.regime if regime is None else regime,
        )

    def with_regime(self, regime: Regime) -> Dataset:
        return Dataset(self.users, self.items, self.labels, self.n_users, self.n_items, regime)

    def resized(self, n_users: int, n_items: int) -> Dataset:
        """ID 空間を拡張したコピーを返す（共有インデックスで複数ファイルを読む場合）。"""
        return Dataset(self.users, self.items, self.labels, n_users, n_items, self.regime)

    def union(self, other: Dataset, regime: Regime | None = None) -> Dataset:
        if (self.n_users, self.n_items) != (other.n_users, other.n_items):
            raise DataIntegrityError("次元の異なるデータセットは結合できません")
        return Dataset(
            np.concatenate([self.users, other.users]),
            np.concatenate([self.items, other.items]),
            np.concatenate([self.labels, other.labels]),
            self.n_users,
            self.n_items,
            self.regime if regime is None else regime,
        )

    def observed_mask(self) -> np.ndarray:
        """n_users × n_items の観測マスク（合成世界の規模でのみ使用）。"""
        mask = np.zeros((self.n_users, self.n_items), dtype=bool)
        mask[self.users, self.items] = True
        return mask


@dataclass(frozen=True)
class WorldSpec:
    """合成フィードバック世界の生成パラメータ。"""

    n_users: int = 500
    n_items: int = 200
    rank_true: int = 8
    popularity_skew: float = 1.5  # α: π_c の人気アイテムへの露出集中度
    positivity_boost: float = 3.0  # π_c が高スコアアイテムを過剰露出する倍率
    impressions_c: int = 40_000
    impressions_t: int = 20_000  # ランダム化ログ全体（学習/検証/テストに分割される）
    seed: int = 0
    preference_offset: float = -1.5  # 選好ロジットのオフセット（正例率を決める）
    factor_scale: float = 1.5

    def __post_init__(self) -> None:
        for name in ("n_users", "n_items", "rank_true", "impressions_c", "impressions_t"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} は正の整数で指定してください")
        if self.popularity_skew < 0:
            raise ValueError("popularity_skew は 0 以上で指定してください")
        if self.positivity_boost < 1:
            raise ValueError("positivity_boost は 1 以上で指定してください")
        if self.impressions_t > self.impressions_c:
            raise ValueError("impressions_t は impressions_c 以下で指定してください")
        if self.impressions_c > self.n_users * self.n_items:
            raise ValueError("impressions_c が |D| を超えています")


@dataclass(frozen=True)
class SyntheticWorld:
    """真のフィードバック行列 R^c / R^t と2つの収集方策を全て保持する合成世界。"""

    r_c: np.ndarray
    r_t: np.ndarray
    exposure_c: np.ndarray
    exposure_t: float
    preference: np.ndarray
    spec: WorldSpec = field(default_factory=WorldSpec)

    def __post_init__(self) -> None:
        if self.r_c.shape != self.r_t.shape:
            raise DataIntegrityError("r_c と r_t の形状が一致しません")
        for name in ("r_c", "r_t"):
            arr = getattr(self, name)
            if np.any((arr != 0) & (arr != 1)):
                raise DataIntegrityError(f"{name} の要素は 0/1 である必要があります")
        for name in ("r_c", "r_t", "exposure_c", "preference"):
            getattr(self, name).setflags(write=False)

    @property
    def n_users(self) -> int:
        return int(self.r_c.shape[0])

    @property
    def n_items(self) -> int:
        return int(self.r_c.shape[1])

    @property
    def d_size(self) -> int:
        return self.n_users * self.n_items
