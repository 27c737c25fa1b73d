"""バイアス付き行列分解モデル（シグモイド出力）と Adam 最適化。

勾配は全て numpy で手計算する。パラメータは名前付きブロックの辞書として
扱い、勾配・Adam のモーメントも同じキーを持つ辞書で表す。
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import expit

from debias_bound.losses import LossKind, eval_loss, logit_gradient
from debias_bound.models import DataIntegrityError

BLOCKS = ("user_factors", "item_factors", "user_bias", "item_bias", "global_bias")

Gradient = dict[str, np.ndarray]


class NumericalError(Exception):
    """勾配またはパラメータに NaN / Inf が現れた。"""


@dataclass
class FactorModel:
    """R̂[u, i] = σ(P[u]·Q[i] + b_u[u] + b_i[i] + b_0) を返す行列分解モデル。"""

    user_factors: np.ndarray
    item_factors: np.ndarray
    user_bias: np.ndarray
    item_bias: np.ndarray
    global_bias: np.ndarray  # 形状 (1,)
    clamp_eps: float = 1e-7

    @classmethod
    def zeros(cls, n_users: int, n_items: int, rank: int, clamp_eps: float = 1e-7) -> FactorModel:
        return cls(
            user_factors=np.zeros((n_users, rank)),
            item_factors=np.zeros((n_items, rank)),
            user_bias=np.zeros(n_users),
            item_bias=np.zeros(n_items),
            global_bias=np.zeros(1),
            clamp_eps=clamp_eps,
        )

    @property
    def n_users(self) -> int:
        return int(self.user_factors.shape[0])

    @property
    def n_items(self) -> int:
        return int(self.item_factors.shape[0])

    @property
    def rank(self) -> int:
        return int(self.user_factors.shape[1])

    def blocks(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in BLOCKS}

    def copy(self) -> FactorModel:
        return FactorModel(**{k: v.copy() for k, v in self.blocks().items()}, clamp_eps=self.clamp_eps)

    def _check_indices(self, users: np.ndarray, items: np.ndarray) -> None:
        if users.size and (users.min() < 0 or users.max() >= self.n_users):
            raise IndexError(f"ユーザIDが範囲外です（n_users={self.n_users}）")
        if items.size and (items.min() < 0 or items.max() >= self.n_items):
            raise IndexError(f"アイテムIDが範囲外です（n_items={self.n_items}）")

    def logits(self, users: np.ndarray, items: np.ndarray) -> np.ndarray:
        users = np.asarray(users, dtype=np.int64)
        items = np.asarray(items, dtype=np.int64)
        self._check_indices(users, items)
        dot = np.einsum("nk,nk->n", self.user_factors[users], self.item_factors[items])
        return dot + self.user_bias[users] + self.item_bias[items] + self.global_bias[0]

    def predict(self, users: np.ndarray, items: np.ndarray) -> np.ndarray:
        """予測確率を [clamp_eps, 1 − clamp_eps] に切り詰めて返す。"""
        return np.clip(expit(self.logits(users, items)), self.clamp_eps, 1.0 - self.clamp_eps)

    def predict_matrix(self) -> np.ndarray:
        """全ペアの予測行列 R̂（合成世界の規模でのみ使用）。"""
        z = (
            self.user_factors @ self.item_factors.T
            + self.user_bias[:, None]
            + self.item_bias[None, :]
            + self.global_bias[0]
        )
        return np.clip(expit(z), self.clamp_eps, 1.0 - self.clamp_eps)


def init_model(
    n_users: int,
    n_items: int,
    rank: int,
    seed: int = 0,
    scale: float = 0.01,
    clamp_eps: float = 1e-7,
) -> FactorModel:
    """因子を N(0, scale²) で初期化し、バイアスは 0 とする。"""
    if rank <= 0:
        raise ValueError("rank は正の整数で指定してください")
    rng = np.random.default_rng(seed)
    model = FactorModel.zeros(n_users, n_items, rank, clamp_eps)
    model.user_factors = rng.normal(0.0, scale, size=(n_users, rank))
    model.item_factors = rng.normal(0.0, scale, size=(n_items, rank))
    return model


# ---------------------------------------------------------------------------
# 勾配
# ---------------------------------------------------------------------------


def zero_gradient(model: FactorModel) -> Gradient:
    return {k: np.zeros_like(v) for k, v in model.blocks().items()}


def add_gradients(*grads: Gradient) -> Gradient:
    total = {k: v.copy() for k, v in grads[0].items()}
    for g in grads[1:]:
        for k, v in g.items():
            total[k] += v
    return total


def scale_gradient(grad: Gradient, factor: float) -> Gradient:
    return {k: factor * v for k, v in grad.items()}


def backprop_logits(
    model: FactorModel, users: np.ndarray, items: np.ndarray, dz: np.ndarray
) -> Gradient:
    """∂J/∂z（各例のロジット勾配）を連鎖律で各パラメータブロックに戻す。"""
    users = np.asarray(users, dtype=np.int64)
    items = np.asarray(items, dtype=np.int64)
    grad = zero_gradient(model)
    if users.size == 0:
        return grad
    np.add.at(grad["user_factors"], users, dz[:, None] * model.item_factors[items])
    np.add.at(grad["item_factors"], items, dz[:, None] * model.user_factors[users])
    np.add.at(grad["user_bias"], users, dz)
    np.add.at(grad["item_bias"], items, dz)
    grad["global_bias"][0] = dz.sum()
    return grad


def weighted_loss_gradient(
    model: FactorModel,
    users: np.ndarray,
    items: np.ndarray,
    targets: np.ndarray,
    weights: np.ndarray | float,
    loss: LossKind,
) -> tuple[float, Gradient]:
    """Σ w·ℓ(y, R̂[u,i]) の値と勾配を返す。"""
    preds = model.predict(users, items)
    w = np.broadcast_to(np.asarray(weights, dtype=float), preds.shape)
    value = float(np.sum(w * eval_loss(loss, targets, preds)))
    dz = w * logit_gradient(loss, targets, preds)
    return value, backprop_logits(model, users, items, dz)


def _touched(model: FactorModel, users: np.ndarray | None, items: np.ndarray | None) -> dict[str, np.ndarray | slice]:
    """L2 正則化の対象となる行（None は全行）。"""
    u: np.ndarray | slice = slice(None) if users is None else np.unique(users)
    i: np.ndarray | slice = slice(None) if items is None else np.unique(items)
    return {"user_factors": u, "user_bias": u, "item_factors": i, "item_bias": i, "global_bias": slice(None)}


def regularization_value(
    model: FactorModel,
    lam: float,
    users: np.ndarray | None = None,
    items: np.ndarray | None = None,
) -> float:
    """λ × 全パラメータブロックの二乗フロベニウスノルム。

    users / items を渡すと、その行だけを対象とした疎な正則化になる。
    """
    if lam < 0:
        raise ValueError("λ は 0 以上で指定してください")
    rows = _touched(model, users, items)
    return lam * float(sum(np.sum(block[rows[name]] ** 2) for name, block in model.blocks().items()))


def regularization_gradient(
    model: FactorModel,
    lam: float,
    users: np.ndarray | None = None,
    items: np.ndarray | None = None,
) -> Gradient:
    """regularization_value の勾配 2λθ（対象行のみ）。正則化項は λ‖θ‖²（λ/2‖θ‖² ではない）。"""
    grad = zero_gradient(model)
    if lam == 0:
        return grad
    for name, rows in _touched(model, users, items).items():
        block = getattr(model, name)
        grad[name][rows] = 2.0 * lam * block[rows]
    return grad


# ---------------------------------------------------------------------------
# パラメータ間の距離（CausE）
# ---------------------------------------------------------------------------


def _check_same_shape(m1: FactorModel, m2: FactorModel) -> None:
    for name in BLOCKS:
        a, b = getattr(m1, name), getattr(m2, name)
        if a.shape != b.shape:
            raise ValueError(f"{name} の形状が一致しません: {a.shape} != {b.shape}")


def param_distance(m1: FactorModel, m2: FactorModel) -> float:
    """全ブロックの差をまとめたフロベニウスノルム ‖W_1 − W_2‖_F。"""
    _check_same_shape(m1, m2)
    return float(
        np.sqrt(sum(np.sum((getattr(m1, n) - getattr(m2, n)) ** 2) for n in BLOCKS))
    )


def param_distance_gradient(m1: FactorModel, m2: FactorModel) -> Gradient:
    """∂‖W_1 − W_2‖_F / ∂W_1 = (W_1 − W_2) / ‖W_1 − W_2‖_F（距離 0 では 0）。

    W_2 側の勾配は符号を反転したものになる。
    """
    dist = param_distance(m1, m2)
    if dist == 0.0:
        return zero_gradient(m1)
    return {n: (getattr(m1, n) - getattr(m2, n)) / dist for n in BLOCKS}


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    """Adam のモーメント推定とステップ数。"""

    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0
    first_moment: dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.learning_rate <= 0:
            raise ValueError("learning_rate は正の値で指定してください")

    def apply(self, model: FactorModel, grad: Gradient) -> None:
        """バイアス補正付きの Adam 更新を model に対してその場で行う。"""
        self.step_count += 1
        bc1 = 1.0 - self.beta1**self.step_count
        bc2 = 1.0 - self.beta2**self.step_count
        step_size = self.learning_rate / bc1

        for name in BLOCKS:
            g = grad[name]
            param = getattr(model, name)
            if name not in self.first_moment:
                self.first_moment[name] = np.zeros_like(param)
                self.second_moment[name] = np.zeros_like(param)
            m = self.first_moment[name]
            v = self.second_moment[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            param -= step_size * m / (np.sqrt(v / bc2) + self.epsilon)


def apply_gradient(model: FactorModel, opt: AdamState, grad: Gradient) -> None:
    """有限性を確認してから Adam 更新を適用する。"""
    for name, g in grad.items():
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"勾配 {name} に NaN/Inf が含まれています（step={opt.step_count}）")
    opt.apply(model, grad)
    for name, block in model.blocks().items():
        if not np.all(np.isfinite(block)):
            raise NumericalError(f"パラメータ {name} が発散しました（step={opt.step_count}）")


def grad_step(
    model: FactorModel,
    opt: AdamState,
    users: np.ndarray,
    items: np.ndarray,
    targets: np.ndarray,
    weights: np.ndarray | float,
    loss: LossKind,
    l2: float,
) -> tuple[float, float]:
    """1 バッチ分の Σ w·ℓ + λ·Reg（触れた行のみ）を計算し、1 ステップ更新する。

    Returns:
        更新前のパラメータでの (損失項, 正則化項)。
    """
    value, grad = weighted_loss_gradient(model, users, items, targets, weights, loss)
    reg = regularization_value(model, l2, users, items)
    grad = add_gradients(grad, regularization_gradient(model, l2, users, items))
    if not np.isfinite(value + reg):
        raise NumericalError(f"目的関数値が有限ではありません: {value + reg}")
    apply_gradient(model, opt, grad)
    return value, reg


# ---------------------------------------------------------------------------
# チェックポイント
# ---------------------------------------------------------------------------


def save_model(model: FactorModel, directory: str | Path, seed: int | None = None) -> Path:
    """`meta`（key=value）とブロックごとの `.npy` を書き出す。"""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    meta = {
        "n_users": model.n_users,
        "n_items": model.n_items,
        "rank": model.rank,
        "clamp_eps": repr(model.clamp_eps),
    }
    if seed is not None:
        meta["seed"] = seed
    (directory / "meta").write_text("".join(f"{k}={v}\n" for k, v in meta.items()), encoding="utf-8")
    for name, block in model.blocks().items():
        np.save(directory / f"{name}.npy", block, allow_pickle=False)
    return directory


def load_model(directory: str | Path) -> FactorModel:
    directory = Path(directory)
    meta_path = directory / "meta"
    if not meta_path.exists():
        raise FileNotFoundError(f"meta が見つかりません: {directory}")
    meta = dict(
        line.split("=", 1) for line in meta_path.read_text(encoding="utf-8").splitlines() if "=" in line
    )
    blocks = {name: np.load(directory / f"{name}.npy", allow_pickle=False) for name in BLOCKS}
    model = FactorModel(**blocks, clamp_eps=float(meta["clamp_eps"]))
    if (model.n_users, model.n_items, model.rank) != (
        int(meta["n_users"]),
        int(meta["n_items"]),
        int(meta["rank"]),
    ):
        raise DataIntegrityError(f"meta とパラメータの形状が一致しません: {directory}")
    return model
