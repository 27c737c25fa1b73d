"""合成世界上での理想損失と上界の各項の厳密計算、および不等式の検証。

部分損失 L^{S*} は分母 |D|、平均損失 L_{|S_t|}^{S_t} は分母 |S_t|。
S_u（未観測ペア）は D から S_c と S_t を除いた集合として扱う。
"""

from __future__ import annotations

import math
from collections.abc import Sequence
from dataclasses import asdict, dataclass

import numpy as np

from debias_bound.factor_model import FactorModel
from debias_bound.losses import ConstraintKind, LossKind, as_target, eval_loss, max_value
from debias_bound.models import DataIntegrityError, Dataset, SyntheticWorld

TOLERANCE = 1e-9
DEFAULT_RESAMPLES = 100


@dataclass(frozen=True)
class BoundConfig:
    """Δ（損失の上界）・|H|（仮説数）・η（失敗確率）。"""

    delta: float = 1.0
    hypothesis_count: int = 1
    eta: float = 0.05

    def __post_init__(self) -> None:
        if self.delta <= 0:
            raise ValueError("delta は正の値で指定してください")
        if self.hypothesis_count < 1:
            raise ValueError("hypothesis_count は 1 以上で指定してください")
        if not 0.0 < self.eta < 1.0:
            raise ValueError("eta は 0 より大きく 1 未満で指定してください")

    @classmethod
    def for_loss(cls, loss: LossKind, hypothesis_count: int = 1, eta: float = 0.05) -> BoundConfig:
        return cls(max_value(loss), hypothesis_count, eta)


@dataclass(frozen=True)
class PropositionTerms:
    """決定的な上界の5項（4番目は S_u 上の反実仮想の項）。"""

    term_a: float
    term_b: float
    term_c: float
    term_unobserved: float
    term_d: float

    @property
    def total(self) -> float:
        return self.term_a + self.term_b + self.term_c + self.term_unobserved + self.term_d


@dataclass(frozen=True)
class BoundReport:
    variant: ConstraintKind
    lhs_ideal: float
    term_a: float
    term_b: float
    term_c: float
    term_d: float
    term_e: float
    bias_term: float
    bias_realized: float
    confidence_term: float
    rhs_total: float
    holds: bool
    holds_without_bias: bool
    hypothesis_count: int = 1

    def to_row(self) -> dict[str, object]:
        row = asdict(self)
        row["variant"] = self.variant.value
        return row


# ---------------------------------------------------------------------------
# 行列レベルの計算
# ---------------------------------------------------------------------------


def _masks(world: SyntheticWorld, s_c: Dataset, s_t: Dataset) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    shape = (world.n_users, world.n_items)
    for d in (s_c, s_t):
        if (d.n_users, d.n_items) != shape:
            raise DataIntegrityError("データセットと世界の次元が一致しません")
    mask_c = s_c.observed_mask()
    mask_t = s_t.observed_mask()
    if np.any(mask_c & mask_t):
        raise DataIntegrityError("S_c と S_t が重複しています（先に重複除去してください）")
    return mask_c, mask_t, ~(mask_c | mask_t)


def _check_model(world: SyntheticWorld, model: FactorModel) -> None:
    if (model.n_users, model.n_items) != (world.n_users, world.n_items):
        raise ValueError("モデルと世界の次元が一致しません")


def _partial(losses: np.ndarray, mask: np.ndarray, d_size: int) -> float:
    return float(losses[mask].sum() / d_size)


def _counterfactual_losses(
    variant: ConstraintKind, world: SyntheticWorld, pred_c: np.ndarray, pred_t: np.ndarray, loss: LossKind
) -> np.ndarray:
    """S_u 上で置き換えの対象となる損失（全ペア分の行列）。"""
    if variant is ConstraintKind.TRIANGLE:
        return eval_loss(loss, world.r_t, pred_t)
    return eval_loss(loss, world.r_t - pred_t, pred_c)


def ideal_loss(world: SyntheticWorld, model_c: FactorModel, loss: LossKind) -> float:
    """(1/|D|) Σ_D ℓ(R^t, R̂^c)。"""
    _check_model(world, model_c)
    return float(np.mean(eval_loss(loss, world.r_t, model_c.predict_matrix())))


def proposition_terms(
    variant: ConstraintKind,
    world: SyntheticWorld,
    model_c: FactorModel,
    model_t: FactorModel,
    s_c: Dataset,
    s_t: Dataset,
    loss: LossKind,
) -> PropositionTerms:
    """三角不等式版／分離可能性版の決定的な上界の5項を計算する。

    三角不等式版:
        L^{S_t}(R^t, R̂^c), L^{S_c}(R^t, R^c), L^{S_c}(R^c, R̂^c), L^{S_u}(R^t, R̂^t), L^{S_u}(R̂^t, R̂^c)
    分離可能性版:
        L^{S_t}(R^t, R̂^c), L^{S_c}(R^t − R^c, R̂^c), L^{S_c}(R^c, R̂^c), L^{S_u}(R^t − R̂^t, R̂^c), L^{S_u}(R̂^t, R̂^c)
    """
    _check_model(world, model_c)
    _check_model(world, model_t)
    mask_c, mask_t, mask_u = _masks(world, s_c, s_t)
    d_size = world.d_size
    pred_c = model_c.predict_matrix()
    pred_t = model_t.predict_matrix()

    if variant is ConstraintKind.TRIANGLE:
        b = eval_loss(loss, world.r_t, world.r_c)
    else:
        b = eval_loss(loss, world.r_t - world.r_c, pred_c)
    return PropositionTerms(
        term_a=_partial(eval_loss(loss, world.r_t, pred_c), mask_t, d_size),
        term_b=_partial(b, mask_c, d_size),
        term_c=_partial(eval_loss(loss, world.r_c, pred_c), mask_c, d_size),
        term_unobserved=_partial(_counterfactual_losses(variant, world, pred_c, pred_t, loss), mask_u, d_size),
        term_d=_partial(eval_loss(loss, as_target(loss, pred_t), pred_c), mask_u, d_size),
    )


def hoeffding_term(cfg: BoundConfig, s_t_size: int, d_size: int) -> float:
    """Δ/|S_t| · sqrt(|D|/2 · log(2|H|/η))。"""
    if s_t_size < 1:
        raise ValueError("|S_t| は 1 以上で指定してください")
    return cfg.delta / s_t_size * math.sqrt(d_size / 2.0 * math.log(2.0 * cfg.hypothesis_count / cfg.eta))


def _resampled_mean(losses: np.ndarray, size: int, n_draws: int, seed: int) -> float:
    flat = losses.reshape(-1)
    rng = np.random.default_rng(seed)
    draws = [flat[rng.choice(flat.size, size=size, replace=False)].mean() for _ in range(n_draws)]
    return float(np.mean(draws))


def estimate_expected_st_loss(
    variant: ConstraintKind,
    world: SyntheticWorld,
    model_c: FactorModel,
    model_t: FactorModel,
    s_t_size: int,
    loss: LossKind,
    n_draws: int = DEFAULT_RESAMPLES,
    seed: int = 0,
) -> float:
    """E[L_{|S_t|}^{S_t}] を、D から |S_t| 件を一様抽出し直す n_draws 回の平均で推定する。"""
    if not 1 <= s_t_size <= world.d_size:
        raise ValueError("s_t_size は 1〜|D| で指定してください")
    losses = _counterfactual_losses(variant, world, model_c.predict_matrix(), model_t.predict_matrix(), loss)
    return _resampled_mean(losses, s_t_size, n_draws, seed)


def theorem_report(
    variant: ConstraintKind,
    world: SyntheticWorld,
    model_c: FactorModel,
    model_t: FactorModel,
    s_c: Dataset,
    s_t: Dataset,
    loss: LossKind,
    cfg: BoundConfig,
    n_draws: int = DEFAULT_RESAMPLES,
    seed: int = 0,
) -> BoundReport:
    """確率的な上界の各項をまとめ、理想損失が上界以下かを判定する。

    bias_term は E[L_{|S_t|}^{S_t}] を再抽出平均で推定した値、
    bias_realized は実際の S_t での平均損失を使った値。
    """
    if len(s_t) == 0:
        raise DataIntegrityError("S_t が空です")
    terms = proposition_terms(variant, world, model_c, model_t, s_c, s_t, loss)
    lhs = ideal_loss(world, model_c, loss)
    pred_c = model_c.predict_matrix()
    pred_t = model_t.predict_matrix()

    counterfactual = _counterfactual_losses(variant, world, pred_c, pred_t, loss)
    term_e = float(counterfactual[s_t.users, s_t.items].mean())
    expected = _resampled_mean(counterfactual, len(s_t), n_draws, seed)
    bias_term = terms.term_unobserved - expected
    bias_realized = terms.term_unobserved - term_e
    confidence = hoeffding_term(cfg, len(s_t), world.d_size)

    without_bias = terms.term_a + terms.term_b + terms.term_c + terms.term_d + term_e + confidence
    rhs_total = without_bias + bias_term
    return BoundReport(
        variant=variant,
        lhs_ideal=lhs,
        term_a=terms.term_a,
        term_b=terms.term_b,
        term_c=terms.term_c,
        term_d=terms.term_d,
        term_e=term_e,
        bias_term=bias_term,
        bias_realized=bias_realized,
        confidence_term=confidence,
        rhs_total=rhs_total,
        holds=lhs <= rhs_total + TOLERANCE,
        holds_without_bias=lhs <= without_bias + TOLERANCE,
        hypothesis_count=cfg.hypothesis_count,
    )


def coverage(reports: Sequence[BoundReport]) -> dict[str, float]:
    """上界が成り立った試行の割合（bias 項あり／なし）。"""
    if not reports:
        raise ValueError("レポートがありません")
    n = len(reports)
    return {
        "n_trials": n,
        "coverage": sum(r.holds for r in reports) / n,
        "coverage_without_bias": sum(r.holds_without_bias for r in reports) / n,
    }
