"""合成フィードバック世界の生成と、2つの収集方策によるログ取得。

真の選好から R^t（一様方策下の完全フィードバック）と R^c（推薦方策下の
完全フィードバック）を生成し、π_c の露出確率には人気バイアスと
モデル由来の高スコア過剰露出を掛け合わせる。全ての行列を保持するため、
理想損失や上界の各項（反実仮想の項を含む）が厳密に計算できる。
"""

from __future__ import annotations

import logging
from dataclasses import asdict, fields
from enum import Enum
from pathlib import Path

import numpy as np
from scipy.special import expit

from debias_bound.models import Dataset, Regime, SyntheticWorld, WorldSpec

_logger = logging.getLogger(__name__)

META_FILE = "world.meta"
MATRIX_FILES = ("r_c", "r_t", "preference", "exposure_c")


class Policy(Enum):
    """ログ収集方策。"""

    STOCHASTIC = "stochastic"  # π_c
    UNIFORM = "uniform"  # π_t


def generate_world(spec: WorldSpec) -> SyntheticWorld:
    """WorldSpec から合成世界を生成する（seed に対して決定的）。"""
    rng = np.random.default_rng(spec.seed)
    scale = spec.factor_scale / np.sqrt(spec.rank_true)
    user_factors = rng.normal(0.0, scale, size=(spec.n_users, spec.rank_true))
    item_factors = rng.normal(0.0, scale, size=(spec.n_items, spec.rank_true))
    # アイテムごとの人気の偏り（ロングテール）
    item_effect = rng.normal(0.0, 1.0, size=spec.n_items)
    logits = user_factors @ item_factors.T + item_effect[None, :] + spec.preference_offset
    preference = expit(logits)

    # R^c と R^t は共通の一様乱数で結合し、boost=1 のとき完全に一致させる
    uniforms = rng.random(size=preference.shape)
    boosted = _boost_odds(preference, spec.positivity_boost)
    r_t = (uniforms < preference).astype(np.int64)
    r_c = (uniforms < boosted).astype(np.int64)

    popularity = (r_c.sum(axis=0) + 1.0) / (spec.n_users + 2.0)
    weights = popularity[None, :] ** spec.popularity_skew * spec.positivity_boost**preference
    budget = spec.impressions_c / spec.n_users
    exposure_c = _capped_row_probabilities(weights, budget)
    exposure_t = spec.impressions_t / (spec.n_users * spec.n_items)

    _logger.info(
        "world generated: %dx%d, P(r_t=1)=%.4f, P(r_c=1)=%.4f",
        spec.n_users,
        spec.n_items,
        r_t.mean(),
        r_c.mean(),
    )
    return SyntheticWorld(
        r_c=r_c,
        r_t=r_t,
        exposure_c=exposure_c,
        exposure_t=exposure_t,
        preference=preference,
        spec=spec,
    )


def _boost_odds(p: np.ndarray, boost: float) -> np.ndarray:
    """オッズを boost 倍した確率を返す。"""
    return p * boost / (p * boost + (1.0 - p))


def _capped_row_probabilities(weights: np.ndarray, budget: float) -> np.ndarray:
    """各行の和が budget となるよう重みを正規化し、1 を超える要素は 1 に切り詰める。

    切り詰めた分の予算は残りの要素に比例配分し直す。
    """
    n_rows, n_cols = weights.shape
    if budget > n_cols:
        raise ValueError("ユーザあたりの露出数がアイテム数を超えています")
    probs = np.zeros_like(weights, dtype=float)
    free = np.ones_like(weights, dtype=bool)
    for _ in range(n_cols + 1):
        remaining = budget - np.sum(~free, axis=1)
        w = np.where(free, weights, 0.0)
        total = w.sum(axis=1)
        scaled = w * (remaining / np.where(total > 0, total, 1.0))[:, None]
        over = free & (scaled > 1.0)
        if not over.any():
            probs = np.where(free, scaled, 1.0)
            break
        free &= ~over
    return probs


def log_feedback(world: SyntheticWorld, policy: Policy, n_impressions: int, seed: int = 0) -> Dataset:
    """方策に従って (user, item) ペアを非復元抽出し、対応する真のラベルを付けて返す。

    STOCHASTIC は exposure_c に比例した重み付き非復元抽出（指数キー法）、
    UNIFORM は |D| からの一様非復元抽出。
    """
    d_size = world.d_size
    if n_impressions < 0 or n_impressions > d_size:
        raise ValueError(f"n_impressions は 0〜|D|={d_size} で指定してください")

    rng = np.random.default_rng(seed)
    if n_impressions == 0:
        keys = np.zeros(0, dtype=np.int64)
    elif policy is Policy.UNIFORM:
        keys = rng.choice(d_size, size=n_impressions, replace=False)
    else:
        weights = world.exposure_c.reshape(-1)
        with np.errstate(divide="ignore"):
            scores = np.log(rng.random(d_size)) / weights
        keys = np.argpartition(-scores, n_impressions - 1)[:n_impressions]
    keys = np.sort(keys)

    users, items = np.divmod(keys, world.n_items)
    if policy is Policy.UNIFORM:
        labels, regime = world.r_t[users, items], Regime.RANDOMIZED
    else:
        labels, regime = world.r_c[users, items], Regime.NON_RANDOMIZED
    return Dataset(users, items, labels, world.n_users, world.n_items, regime)


# ---------------------------------------------------------------------------
# 保存・読み込み
# ---------------------------------------------------------------------------


def save_world(world: SyntheticWorld, directory: str | Path) -> Path:
    """合成世界をディレクトリに書き出す（同じ世界なら毎回バイト単位で同一）。"""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)

    meta = {**asdict(world.spec), "exposure_t": repr(world.exposure_t)}
    (directory / META_FILE).write_text(
        "".join(f"{k}={v}\n" for k, v in meta.items()), encoding="utf-8"
    )
    for name in MATRIX_FILES:
        arr = getattr(world, name)
        fmt = "%d" if arr.dtype.kind in "iu" else "%.17g"
        np.savetxt(directory / f"{name}.csv", arr, fmt=fmt, delimiter=",")
    return directory


def load_world(directory: str | Path) -> SyntheticWorld:
    directory = Path(directory)
    meta_path = directory / META_FILE
    if not meta_path.exists():
        raise FileNotFoundError(f"{META_FILE} が見つかりません: {directory}")

    meta: dict[str, str] = {}
    for line in meta_path.read_text(encoding="utf-8").splitlines():
        if line.strip() and not line.startswith("#"):
            key, _, value = line.partition("=")
            meta[key.strip()] = value.strip()

    spec_kwargs: dict[str, object] = {}
    for f in fields(WorldSpec):
        if f.name in meta:
            cast = float if f.type == "float" else int
            spec_kwargs[f.name] = cast(meta[f.name])
    spec = WorldSpec(**spec_kwargs)  # type: ignore[arg-type]

    arrays = {
        name: np.loadtxt(directory / f"{name}.csv", delimiter=",", ndmin=2)
        for name in MATRIX_FILES
    }
    return SyntheticWorld(
        r_c=arrays["r_c"].astype(np.int64),
        r_t=arrays["r_t"].astype(np.int64),
        exposure_c=arrays["exposure_c"],
        exposure_t=float(meta["exposure_t"]),
        preference=arrays["preference"],
        spec=spec,
    )
