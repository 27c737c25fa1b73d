"""8つの学習目的関数（Naive / Unif / Combine / IPS / CausE / Bridge / DUB-TI / DUB-SEP）。

各項は重み付きの寄与として報告され、目的関数値はそれらの和に一致する。
勾配は M_c と M_t それぞれについて、更新対象となる項だけを集めて返す。

項の名前:
    supervised  ベースラインの平均損失
    ips         IPS 重み付き損失
    term_a      L^{S_t}(R^t, R̂^c)
    term_c      L^{S_c}(R^c, R̂^c)
    term_d      γ · L^{S_u}(R̂^t, R̂^c)（S_a で推定）
    term_e1     L_{|S_t|}^{S_t}(R^t, R̂^t)
    term_e2     L_{|S_t|}^{S_t}(R^t − R̂^t, R̂^c)
    reg_c       λ_c Reg(W_c)
    reg_t       λ_t Reg(W_t)
    param_align γ_tc ‖W_t − W_c‖_F
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from debias_bound.factor_model import (
    FactorModel,
    Gradient,
    add_gradients,
    param_distance,
    param_distance_gradient,
    regularization_gradient,
    regularization_value,
    scale_gradient,
    weighted_loss_gradient,
    zero_gradient,
)
from debias_bound.losses import BCE, LossKind, as_target
from debias_bound.models import Dataset


class ObjectiveError(Exception):
    """目的関数の組み立てに必要な入力が揃っていない。"""


class Method(Enum):
    NAIVE = "naive"
    UNIF = "unif"
    COMBINE = "combine"
    IPS = "ips"
    CAUSE = "cause"
    BRIDGE = "bridge"
    DUB_TI = "dub-ti"
    DUB_SEP = "dub-sep"

    @property
    def is_baseline(self) -> bool:
        """単一データでの事前学習そのものが結果となる手法。"""
        return self in (Method.NAIVE, Method.UNIF, Method.COMBINE)

    @property
    def uses_model_t(self) -> bool:
        return self in (Method.CAUSE, Method.BRIDGE, Method.DUB_TI, Method.DUB_SEP)

    @property
    def trains_model_t(self) -> bool:
        return self in (Method.CAUSE, Method.BRIDGE, Method.DUB_TI)

    @property
    def uses_gamma(self) -> bool:
        return self in (Method.BRIDGE, Method.DUB_TI, Method.DUB_SEP)

    @property
    def uses_auxiliary(self) -> bool:
        return self.uses_gamma


DROPPABLE_TERMS = frozenset({"a", "d", "e1", "e2"})
ALIGNMENT_MODES = ("scaled", "mean")


@dataclass(frozen=True)
class MethodConfig:
    """手法と重み（γ, λ_c, λ_t, γ_tc）の設定。"""

    method: Method = Method.DUB_SEP
    gamma: float = 1e-3
    lambda_c: float = 1e-4
    lambda_t: float = 1e-4
    gamma_tc: float = 1e-3
    loss: LossKind = BCE
    propensity_floor: float = 0.01
    drop_terms: frozenset[str] = field(default_factory=frozenset)
    alignment: str = "scaled"  # term (d) の重み: |S_u|/|D| 倍 ("scaled") か S_a の平均 ("mean")

    def __post_init__(self) -> None:
        for name in ("gamma", "lambda_c", "lambda_t", "gamma_tc"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} は 0 以上で指定してください")
        if not 0.0 < self.propensity_floor <= 1.0:
            raise ValueError("propensity_floor は 0 より大きく 1 以下で指定してください")
        unknown = set(self.drop_terms) - DROPPABLE_TERMS
        if unknown:
            raise ValueError(f"除外できない項です: {sorted(unknown)}（{sorted(DROPPABLE_TERMS)} から選択）")
        if self.alignment not in ALIGNMENT_MODES:
            raise ValueError(f"alignment は {ALIGNMENT_MODES} のいずれかで指定してください")
        object.__setattr__(self, "drop_terms", frozenset(self.drop_terms))

    def replace(self, **changes: object) -> MethodConfig:
        return dataclasses.replace(self, **changes)  # type: ignore[arg-type]

    @property
    def samples_auxiliary(self) -> bool:
        """term (d) が目的関数に寄与する（S_a のサンプリングが必要）か。"""
        return self.method.uses_auxiliary and self.gamma > 0 and "d" not in self.drop_terms

    @property
    def label(self) -> str:
        """結果ファイル用の名前（アブレーション時は除外した項を付ける）。"""
        if not self.drop_terms:
            return self.method.value
        return f"{self.method.value}-wo-" + "-".join(sorted(self.drop_terms))


@dataclass(frozen=True)
class Batch:
    """ミニバッチと、その母集団（バッチが推定する集合）の大きさ。"""

    users: np.ndarray
    items: np.ndarray
    labels: np.ndarray
    population: int

    @classmethod
    def from_dataset(
        cls, d: Dataset, indices: np.ndarray | None = None, population: int | None = None
    ) -> Batch:
        """d（または d の一部）からバッチを作る。population の既定値は |d|。"""
        population = len(d) if population is None else population
        if indices is None:
            return cls(d.users, d.items, d.labels, population)
        return cls(d.users[indices], d.items[indices], d.labels[indices], population)

    @classmethod
    def empty(cls) -> Batch:
        none = np.zeros(0, dtype=np.int64)
        return cls(none, none, none, 0)

    def __len__(self) -> int:
        return len(self.users)


@dataclass(frozen=True)
class Batches:
    """1 ステップで使う S_c / S_t / S_a のバッチ。"""

    c: Batch
    t: Batch = field(default_factory=Batch.empty)
    a: Batch = field(default_factory=Batch.empty)


@dataclass
class ObjectiveTerms:
    values: dict[str, float]
    grad_c: Gradient
    grad_t: Gradient | None = None

    @property
    def objective(self) -> float:
        return float(sum(self.values.values()))


def naive_bayes_propensity(
    s_c: Dataset, s_t: Dataset, d_size: int, floor: float = 0.01
) -> tuple[float, float]:
    """ナイーブベイズ推定による傾向スコア (p_0, p_1)。

    p_y = P(Y=y | O=1) · P(O=1) / P(Y=y)
    P(Y=y | O=1) は S_c のラベル頻度、P(O=1) = |S_c| / |D|、P(Y=y) は S_t のラベル頻度。
    """
    if len(s_c) == 0 or len(s_t) == 0:
        raise ObjectiveError("傾向スコアの推定には S_c と S_t の両方が必要です")
    p_obs = len(s_c) / d_size
    result = []
    for y in (0, 1):
        prior = float(np.mean(s_t.labels == y))
        if prior == 0.0:
            raise ObjectiveError(f"S_t にラベル {y} が存在しないため P(Y={y}) が 0 になります")
        likelihood = float(np.mean(s_c.labels == y))
        result.append(max(likelihood * p_obs / prior, floor))
    return result[0], result[1]


# ---------------------------------------------------------------------------
# 項の計算
# ---------------------------------------------------------------------------


def _population_weight(batch: Batch, d_size: int) -> float:
    """L^{S*}（分母 |D|）をバッチから推定するときの 1 例あたりの重み。"""
    return batch.population / (len(batch) * d_size)


def _term(
    model: FactorModel, batch: Batch, targets: np.ndarray, weight: np.ndarray | float, loss: LossKind
) -> tuple[float, Gradient]:
    if len(batch) == 0:
        return 0.0, zero_gradient(model)
    return weighted_loss_gradient(model, batch.users, batch.items, targets, weight, loss)


def _touched(*batches: Batch) -> tuple[np.ndarray, np.ndarray]:
    users = np.concatenate([b.users for b in batches])
    items = np.concatenate([b.items for b in batches])
    return users, items


class _Accumulator:
    """項の値と、M_c / M_t への勾配を集める。"""

    def __init__(self, model_c: FactorModel, model_t: FactorModel | None, drop: frozenset[str]) -> None:
        self.values: dict[str, float] = {}
        self.grad_c = zero_gradient(model_c)
        self.grad_t = zero_gradient(model_t) if model_t is not None else None
        self.drop = drop

    def add(self, name: str, value: float, grad: Gradient | None = None, to_t: bool = False) -> None:
        if name.removeprefix("term_") in self.drop:
            self.values[name] = 0.0
            return
        self.values[name] = value
        if grad is None:
            return
        if to_t:
            assert self.grad_t is not None
            self.grad_t = add_gradients(self.grad_t, grad)
        else:
            self.grad_c = add_gradients(self.grad_c, grad)

    def result(self) -> ObjectiveTerms:
        return ObjectiveTerms(self.values, self.grad_c, self.grad_t)


def objective_terms(
    cfg: MethodConfig,
    model_c: FactorModel,
    model_t: FactorModel | None,
    batches: Batches,
    d_size: int,
    propensity: tuple[float, float] | None = None,
) -> ObjectiveTerms:
    """手法ごとの目的関数の各項と勾配を計算する。

    M_t の予測をターゲットとして使う項（term_d, term_e2）では、その予測を定数として扱う。

    Args:
        cfg: 手法の設定
        model_c: 推薦モデル M_c
        model_t: 補助モデル M_t（CausE / Bridge / DUB では必須）
        batches: S_c / S_t / S_a のバッチ
        d_size: |D|
        propensity: IPS 用の (p_0, p_1)

    Raises:
        ObjectiveError: 必要なモデル・傾向スコアが無い
    """
    method = cfg.method
    loss = cfg.loss
    if method.uses_model_t and model_t is None:
        raise ObjectiveError(f"{method.value} には M_t が必要です")
    acc = _Accumulator(model_c, model_t if method.trains_model_t else None, cfg.drop_terms)
    b_c, b_t, b_a = batches.c, batches.t, batches.a

    if method.is_baseline:
        if len(b_c):
            acc.add("supervised", *_term(model_c, b_c, b_c.labels, 1.0 / len(b_c), loss))
        else:
            acc.add("supervised", 0.0)
        _add_reg(acc, "reg_c", model_c, cfg.lambda_c, b_c)
        return acc.result()

    if method is Method.IPS:
        if propensity is None:
            raise ObjectiveError("IPS には傾向スコアが必要です")
        if len(b_c):
            inv = 1.0 / np.where(b_c.labels == 1, propensity[1], propensity[0])
            weight = inv * _population_weight(b_c, d_size)
            acc.add("ips", *_term(model_c, b_c, b_c.labels, weight, loss))
        else:
            acc.add("ips", 0.0)
        _add_reg(acc, "reg_c", model_c, cfg.lambda_c, b_c)
        return acc.result()

    assert model_t is not None
    c_batches = [b_c]

    # term (c): 全ての2段階手法に共通
    if len(b_c):
        acc.add("term_c", *_term(model_c, b_c, b_c.labels, _population_weight(b_c, d_size), loss))
    else:
        acc.add("term_c", 0.0)

    if method in (Method.DUB_TI, Method.DUB_SEP):
        if len(b_t) and "a" not in cfg.drop_terms:
            acc.add("term_a", *_term(model_c, b_t, b_t.labels, _population_weight(b_t, d_size), loss))
            c_batches.append(b_t)
        else:
            acc.add("term_a", 0.0)

    if method.trains_model_t:
        # term (e.1) は M_t のみを更新する
        if len(b_t) and "e1" not in cfg.drop_terms:
            acc.add("term_e1", *_term(model_t, b_t, b_t.labels, 1.0 / len(b_t), loss), to_t=True)
        else:
            acc.add("term_e1", 0.0)
        _add_reg(acc, "reg_t", model_t, cfg.lambda_t, b_t, to_t=True)

    if method is Method.DUB_SEP:
        if len(b_t) and "e2" not in cfg.drop_terms:
            residual = b_t.labels - model_t.predict(b_t.users, b_t.items)
            acc.add("term_e2", *_term(model_c, b_t, residual, 1.0 / len(b_t), loss))
            c_batches.append(b_t)
        else:
            acc.add("term_e2", 0.0)

    if method.uses_gamma:
        if len(b_a) and cfg.gamma > 0 and "d" not in cfg.drop_terms:
            targets = as_target(loss, model_t.predict(b_a.users, b_a.items))
            scale = _population_weight(b_a, d_size) if cfg.alignment == "scaled" else 1.0 / len(b_a)
            acc.add("term_d", *_term(model_c, b_a, targets, cfg.gamma * scale, loss))
            c_batches.append(b_a)
        else:
            acc.add("term_d", 0.0)

    if method is Method.CAUSE:
        dist = param_distance(model_c, model_t)
        acc.add("param_align", cfg.gamma_tc * dist)
        if cfg.gamma_tc > 0:
            g = scale_gradient(param_distance_gradient(model_c, model_t), cfg.gamma_tc)
            acc.grad_c = add_gradients(acc.grad_c, g)
            assert acc.grad_t is not None
            acc.grad_t = add_gradients(acc.grad_t, scale_gradient(g, -1.0))

    _add_reg(acc, "reg_c", model_c, cfg.lambda_c, *c_batches)
    return acc.result()


def _add_reg(
    acc: _Accumulator, name: str, model: FactorModel, lam: float, *batches: Batch, to_t: bool = False
) -> None:
    users, items = _touched(*batches)
    if users.size == 0:
        acc.add(name, 0.0)
        return
    acc.add(
        name,
        regularization_value(model, lam, users, items),
        regularization_gradient(model, lam, users, items),
        to_t=to_t,
    )
