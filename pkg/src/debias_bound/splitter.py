"""データセットの分割・サブサンプリング・未観測ペアのサンプリング。

全ての関数は呼び出し側が渡す seed から numpy Generator を作り、
グローバルな乱数状態には触れない。
"""

from __future__ import annotations

import numpy as np

from debias_bound.models import UNSET_LABEL, DataIntegrityError, Dataset, Regime

RANDOMIZED_RATIOS = (0.1, 0.1, 0.8)
GENERAL_RATIOS = (0.5, 0.2, 0.3)


class SamplingError(Exception):
    """要求された件数をサンプリングできない。"""


def split_randomized(
    d: Dataset,
    ratios: tuple[float, float, float] = RANDOMIZED_RATIOS,
    seed: int = 0,
) -> tuple[Dataset, Dataset, Dataset]:
    """ランダム化データを学習/検証/テストに分割する。"""
    if d.regime is not Regime.RANDOMIZED:
        raise DataIntegrityError(f"ランダム化データではありません: {d.regime.value}")
    return _partition(d, ratios, seed, (Regime.RANDOMIZED, Regime.VALIDATION, Regime.TEST))


def split_general(
    s_c: Dataset,
    seed: int = 0,
    ratios: tuple[float, float, float] = GENERAL_RATIOS,
) -> tuple[Dataset, Dataset, Dataset]:
    """非ランダム化データを 5:2:3 で学習/検証/テストに分割する（一般評価用）。"""
    return _partition(s_c, ratios, seed, (Regime.NON_RANDOMIZED, Regime.VALIDATION, Regime.TEST))


def _partition(
    d: Dataset,
    ratios: tuple[float, float, float],
    seed: int,
    regimes: tuple[Regime, Regime, Regime],
) -> tuple[Dataset, Dataset, Dataset]:
    if len(d) == 0:
        raise DataIntegrityError("空のデータセットは分割できません")
    if len(ratios) != 3 or any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"分割比率は合計 1 の3要素で指定してください: {ratios}")

    n = len(d)
    n_train = int(round(ratios[0] * n))
    n_val = min(int(round(ratios[1] * n)), n - n_train)
    perm = np.random.default_rng(seed).permutation(n)
    return (
        d.subset(perm[:n_train], regimes[0]),
        d.subset(perm[n_train : n_train + n_val], regimes[1]),
        d.subset(perm[n_train + n_val :], regimes[2]),
    )


def remove_overlap(s_c: Dataset, s_t: Dataset) -> Dataset:
    """S_t に現れる (user, item) ペアを S_c から取り除く（残りの順序は保持）。"""
    if (s_c.n_users, s_c.n_items) != (s_t.n_users, s_t.n_items):
        raise DataIntegrityError("S_c と S_t の次元が一致しません")
    keep = ~np.isin(s_c.pair_keys, s_t.pair_keys)
    return s_c.subset(np.flatnonzero(keep))


def subsample_positive_ratio(s_c: Dataset, ratio: float, total: int, seed: int = 0) -> Dataset:
    """正例比率が ratio となるよう total 件を非復元抽出する。"""
    if not 0.0 <= ratio <= 1.0:
        raise ValueError("ratio は 0〜1 で指定してください")
    n_pos = int(round(total * ratio))
    n_neg = total - n_pos
    pos = np.flatnonzero(s_c.labels == 1)
    neg = np.flatnonzero(s_c.labels == 0)
    shortfall = []
    if len(pos) < n_pos:
        shortfall.append(f"正例が {n_pos - len(pos)} 件不足（要求 {n_pos}, 保有 {len(pos)}）")
    if len(neg) < n_neg:
        shortfall.append(f"負例が {n_neg - len(neg)} 件不足（要求 {n_neg}, 保有 {len(neg)}）")
    if shortfall:
        raise SamplingError("; ".join(shortfall))

    rng = np.random.default_rng(seed)
    chosen = np.concatenate(
        [rng.choice(pos, size=n_pos, replace=False), rng.choice(neg, size=n_neg, replace=False)]
    )
    return s_c.subset(rng.permutation(chosen))


def subsample_fraction(d: Dataset, fraction: float, seed: int = 0) -> Dataset:
    """round(fraction × |d|) 件を一様に非復元抽出する。"""
    if not 0.0 < fraction <= 1.0:
        raise ValueError("fraction は 0 より大きく 1 以下で指定してください")
    n = int(round(fraction * len(d)))
    perm = np.random.default_rng(seed).permutation(len(d))
    return d.subset(perm[:n])


def sample_unobserved(s_c: Dataset, s_t: Dataset, n: int, seed: int = 0) -> Dataset:
    """S_c にも S_t にも含まれないペアから n 件を一様に非復元抽出する。

    未観測集合 S_u は実体化せず、棄却サンプリングで取り出す。
    要求件数が未観測ペア数の半分を超える場合のみ補集合を列挙する。
    """
    if (s_c.n_users, s_c.n_items) != (s_t.n_users, s_t.n_items):
        raise DataIntegrityError("S_c と S_t の次元が一致しません")
    d_size = s_c.d_size
    observed = np.union1d(s_c.pair_keys, s_t.pair_keys)
    available = d_size - len(observed)
    if n < 0 or n > available:
        raise SamplingError(f"未観測ペアは {available} 件しかありません（要求 {n} 件）")

    rng = np.random.default_rng(seed)
    if n == 0:
        keys = np.zeros(0, dtype=np.int64)
    elif 2 * n > available:
        complement = np.setdiff1d(np.arange(d_size, dtype=np.int64), observed, assume_unique=True)
        keys = rng.choice(complement, size=n, replace=False)
    else:
        keys = _rejection_sample(rng, d_size, observed, n)

    users, items = np.divmod(keys, s_c.n_items)
    return Dataset(
        users=users,
        items=items,
        labels=np.full(n, UNSET_LABEL, dtype=np.int64),
        n_users=s_c.n_users,
        n_items=s_c.n_items,
        regime=Regime.AUXILIARY,
    )


def _rejection_sample(
    rng: np.random.Generator, d_size: int, observed: np.ndarray, n: int
) -> np.ndarray:
    """observed（ソート済み）に含まれないキーを重複なく n 件集める。"""
    picked = np.zeros(0, dtype=np.int64)
    while len(picked) < n:
        draw = rng.integers(0, d_size, size=2 * (n - len(picked)) + 16)
        if len(observed):
            pos = np.minimum(np.searchsorted(observed, draw), len(observed) - 1)
            draw = draw[observed[pos] != draw]
        candidates = np.concatenate([picked, draw])
        _, first = np.unique(candidates, return_index=True)
        picked = candidates[np.sort(first)]
    return picked[:n]
