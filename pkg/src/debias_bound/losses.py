"""点単位の損失関数と、上界の前提（三角不等式・分離可能性）の数値チェッカー。

全ての関数は numpy 配列をそのまま受け付ける（スカラーも可）。
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from enum import Enum

import numpy as np


class LossDomainError(Exception):
    """損失関数の定義域外の入力（0-1 損失に非二値ラベルなど）。"""


class LossVariant(Enum):
    BCE = "bce"
    L1 = "l1"
    MSE = "mse"
    ZERO_ONE = "zero_one"


class ConstraintKind(Enum):
    TRIANGLE = "triangle"
    SEPARABILITY = "separability"


@dataclass(frozen=True)
class LossKind:
    """損失の種類と BCE 用の確率の下限 clamp_eps。"""

    variant: LossVariant = LossVariant.BCE
    clamp_eps: float = 1e-7

    def __post_init__(self) -> None:
        if not 0.0 < self.clamp_eps < 0.5:
            raise ValueError("clamp_eps は 0 より大きく 0.5 未満で指定してください")

    @classmethod
    def parse(cls, name: str, clamp_eps: float = 1e-7) -> LossKind:
        try:
            return cls(LossVariant(name), clamp_eps)
        except ValueError as e:
            choices = ", ".join(v.value for v in LossVariant)
            raise ValueError(f"未知の損失関数です: {name}（{choices} から選択）") from e


BCE = LossKind(LossVariant.BCE)
L1 = LossKind(LossVariant.L1)
MSE = LossKind(LossVariant.MSE)
ZERO_ONE = LossKind(LossVariant.ZERO_ONE)


def _hard(yhat: np.ndarray) -> np.ndarray:
    return (yhat >= 0.5).astype(float)


def _require_binary(y: np.ndarray) -> None:
    if np.any((y != 0) & (y != 1)):
        raise LossDomainError("0-1 損失のラベルは 0 または 1 である必要があります")


def eval_loss(k: LossKind, y: np.ndarray | float, yhat: np.ndarray | float) -> np.ndarray:
    """ℓ(y, ŷ) を要素ごとに計算する。

    BCE は ŷ のみを [clamp_eps, 1 − clamp_eps] に切り詰め、y は任意の実数を
    そのまま式に代入する（一般化ターゲット R^t − R̂^t に対応）。
    """
    y = np.asarray(y, dtype=float)
    yhat = np.asarray(yhat, dtype=float)
    match k.variant:
        case LossVariant.BCE:
            p = np.clip(yhat, k.clamp_eps, 1.0 - k.clamp_eps)
            return -(y * np.log(p) + (1.0 - y) * np.log1p(-p))
        case LossVariant.L1:
            return np.abs(y - yhat)
        case LossVariant.MSE:
            return (y - yhat) ** 2
        case LossVariant.ZERO_ONE:
            _require_binary(y)
            return (_hard(yhat) != y).astype(float)
    raise AssertionError(k.variant)


def as_target(k: LossKind, values: np.ndarray) -> np.ndarray:
    """予測値をラベルとして使うときの変換（0-1 損失のみ二値化する）。"""
    values = np.asarray(values, dtype=float)
    if k.variant is LossVariant.ZERO_ONE:
        return _hard(values)
    return values


def max_value(k: LossKind) -> float:
    """損失の上界 Δ。"""
    if k.variant is LossVariant.BCE:
        return float(-np.log(k.clamp_eps))
    return 1.0


def partial_loss(
    k: LossKind, targets: np.ndarray, preds: np.ndarray, denominator: int | float
) -> float:
    """L^{S*}: 損失の総和を denominator で割った値。

    denominator = |D| で部分損失、denominator = 件数 で平均損失になる。
    """
    targets = np.asarray(targets, dtype=float)
    if denominator <= 0:
        raise ValueError("denominator は正の値で指定してください")
    if denominator < targets.size:
        raise ValueError(f"denominator ({denominator}) が件数 ({targets.size}) より小さい")
    if targets.size == 0:
        return 0.0
    return float(np.sum(eval_loss(k, targets, preds)) / denominator)


def logit_gradient(k: LossKind, y: np.ndarray, yhat: np.ndarray) -> np.ndarray:
    """ŷ = σ(z) のときの ∂ℓ/∂z。

    BCE は切り詰めの有無にかかわらず ŷ − y とする（一般化ターゲットでも同形）。
    """
    y = np.asarray(y, dtype=float)
    yhat = np.asarray(yhat, dtype=float)
    match k.variant:
        case LossVariant.BCE:
            return yhat - y
        case LossVariant.L1:
            return np.sign(yhat - y) * yhat * (1.0 - yhat)
        case LossVariant.MSE:
            return 2.0 * (yhat - y) * yhat * (1.0 - yhat)
        case LossVariant.ZERO_ONE:
            raise LossDomainError("0-1 損失は微分できないため学習には使えません")
    raise AssertionError(k.variant)


# ---------------------------------------------------------------------------
# 前提のチェック
# ---------------------------------------------------------------------------


def triangle_gap(k: LossKind, a: np.ndarray, b: np.ndarray, c: np.ndarray) -> np.ndarray:
    """ℓ(c, a) − [ℓ(b, a) + ℓ(c, b)]。正なら三角不等式に違反している。

    b は中間要素で、左の位置ではラベルとして使う。
    """
    return eval_loss(k, c, a) - (eval_loss(k, as_target(k, b), a) + eval_loss(k, c, b))


def separability_gap(k: LossKind, a: np.ndarray, b: np.ndarray, c: np.ndarray) -> np.ndarray:
    """ℓ(c, a) − [ℓ(b, a) + ℓ(c − b, a)]。正なら分離可能性に違反している。"""
    c = np.asarray(c, dtype=float)
    b = np.asarray(b, dtype=float)
    return eval_loss(k, c, a) - (eval_loss(k, b, a) + eval_loss(k, c - b, a))


@dataclass(frozen=True)
class Violation:
    a: float
    b: float
    c: float
    lhs: float
    rhs: float
    gap: float


@dataclass(frozen=True)
class ConstraintReport:
    kind: ConstraintKind
    loss: LossVariant
    n_samples: int
    n_violations: int
    worst_violation: Violation | None

    def __post_init__(self) -> None:
        if self.n_violations > self.n_samples:
            raise ValueError("n_violations が n_samples を超えています")
        if (self.worst_violation is not None) != (self.n_violations > 0):
            raise ValueError("worst_violation は違反がある場合のみ設定してください")

    def to_dict(self) -> dict[str, object]:
        return {
            "kind": self.kind.value,
            "loss": self.loss.value,
            "n_samples": self.n_samples,
            "n_violations": self.n_violations,
            "worst_violation": None if self.worst_violation is None else asdict(self.worst_violation),
        }


TOLERANCE = 1e-9


def check_triangle(k: LossKind, n_samples: int = 1_000_000, seed: int = 0) -> ConstraintReport:
    """ℓ(c,a) ≤ ℓ(b,a) + ℓ(c,b) を (予測 a, 中間 b, ラベル c) の乱択三つ組で検査する。"""
    rng = np.random.default_rng(seed)
    a = rng.uniform(k.clamp_eps, 1.0 - k.clamp_eps, n_samples)
    b = rng.uniform(k.clamp_eps, 1.0 - k.clamp_eps, n_samples)
    c = rng.integers(0, 2, n_samples).astype(float)
    gap = triangle_gap(k, a, b, c)
    return _report(ConstraintKind.TRIANGLE, k, a, b, c, gap, lhs=eval_loss(k, c, a))


def check_separability(k: LossKind, n_samples: int = 1_000_000, seed: int = 0) -> ConstraintReport:
    """ℓ(c,a) ≤ ℓ(b,a) + ℓ(c−b,a) を検査する（b, c は [−1, 1] の一般化ターゲット）。"""
    rng = np.random.default_rng(seed)
    a = rng.uniform(k.clamp_eps, 1.0 - k.clamp_eps, n_samples)
    if k.variant is LossVariant.ZERO_ONE:
        b = rng.integers(0, 2, n_samples).astype(float)
        c = np.maximum(b, rng.integers(0, 2, n_samples))
    else:
        b = rng.uniform(-1.0, 1.0, n_samples)
        c = rng.uniform(-1.0, 1.0, n_samples)
    gap = separability_gap(k, a, b, c)
    return _report(ConstraintKind.SEPARABILITY, k, a, b, c, gap, lhs=eval_loss(k, c, a))


def _report(
    kind: ConstraintKind,
    k: LossKind,
    a: np.ndarray,
    b: np.ndarray,
    c: np.ndarray,
    gap: np.ndarray,
    lhs: np.ndarray,
) -> ConstraintReport:
    violated = gap > TOLERANCE
    n_violations = int(np.sum(violated))
    worst = None
    if n_violations:
        i = int(np.argmax(gap))
        worst = Violation(
            a=float(a[i]),
            b=float(b[i]),
            c=float(c[i]),
            lhs=float(lhs[i]),
            rhs=float(lhs[i] - gap[i]),
            gap=float(gap[i]),
        )
    return ConstraintReport(kind, k.variant, len(gap), n_violations, worst)
