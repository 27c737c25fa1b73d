"""事前学習・2段階学習（M_c / M_t）・早期終了・グリッドサーチ。"""

from __future__ import annotations

import itertools
import logging
import math
from collections.abc import Callable, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from debias_bound.factor_model import (
    AdamState,
    FactorModel,
    apply_gradient,
    grad_step,
    init_model,
    regularization_value,
)
from debias_bound.losses import LossKind, partial_loss
from debias_bound.metrics import auc, evaluate
from debias_bound.models import DataIntegrityError, Dataset
from debias_bound.objectives import (
    Batch,
    Batches,
    Method,
    MethodConfig,
    naive_bayes_propensity,
    objective_terms,
)
from debias_bound.splitter import sample_unobserved

_logger = logging.getLogger(__name__)

ValidationScore = Callable[[FactorModel], float]


@dataclass(frozen=True)
class TrainConfig:
    rank: int = 50
    learning_rate: float = 1e-3
    max_epochs: int = 50
    patience: int = 5
    batch_size: int = 1024
    pretrain_epochs: int = 50
    seed: int = 0
    init_scale: float = 0.01

    def __post_init__(self) -> None:
        if self.rank <= 0:
            raise ValueError("rank は正の整数で指定してください")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate は正の値で指定してください")
        if self.patience < 1:
            raise ValueError("patience は 1 以上で指定してください")
        if self.batch_size < 1:
            raise ValueError("batch_size は 1 以上で指定してください")
        if self.max_epochs < 0 or self.pretrain_epochs < 0:
            raise ValueError("エポック数は 0 以上で指定してください")


@dataclass(frozen=True)
class EpochRecord:
    """1 エポック分の記録（項の値はエポック内のバッチ平均）。"""

    epoch: int
    terms: dict[str, float]
    val_score: float

    @property
    def objective(self) -> float:
        return float(sum(self.terms.values()))

    def to_row(self) -> dict[str, float | int]:
        return {"epoch": self.epoch, **self.terms, "objective": self.objective, "val_score": self.val_score}


@dataclass
class TrainResult:
    model_c: FactorModel
    model_t: FactorModel | None
    history: list[EpochRecord]
    best_epoch: int

    @property
    def best_score(self) -> float:
        return self.history[self.best_epoch].val_score

    @property
    def snapshot_count(self) -> int:
        """評価したモデルのスナップショット数（有限仮説空間の大きさ |H| の既定値）。"""
        return len(self.history)


def auc_scorer(s_va: Dataset) -> ValidationScore:
    """検証データでの大域 AUC。"""
    if len(s_va) == 0:
        raise DataIntegrityError("早期終了には空でない検証データが必要です")

    def score(model: FactorModel) -> float:
        return auc(model.predict(s_va.users, s_va.items), s_va.labels)

    return score


def ndcg_scorer(s_va: Dataset, train_sets: Sequence[Dataset]) -> ValidationScore:
    """検証データでの nDCG（一般評価モードの基準指標）。"""

    def score(model: FactorModel) -> float:
        return evaluate(model, s_va, train_sets).ndcg

    return score


class _EarlyStopping:
    """検証スコアが patience エポック改善しなければ止める。最良時のモデルを保持する。"""

    def __init__(self, patience: int) -> None:
        self.patience = patience
        self.best_score = -math.inf
        self.best_epoch = 0
        self.best_models: tuple[FactorModel, FactorModel | None] | None = None
        self.waited = 0

    def update(self, epoch: int, score: float, model_c: FactorModel, model_t: FactorModel | None) -> bool:
        """記録を更新し、停止すべきなら True を返す。"""
        if score > self.best_score:
            self.best_score = score
            self.best_epoch = epoch
            self.best_models = (model_c.copy(), model_t.copy() if model_t is not None else None)
            self.waited = 0
            return False
        self.waited += 1
        return self.waited >= self.patience


def _mean_terms(totals: dict[str, float], n_batches: int) -> dict[str, float]:
    return {k: v / n_batches for k, v in totals.items()}


# ---------------------------------------------------------------------------
# 事前学習
# ---------------------------------------------------------------------------


def pretrain(
    dataset: Dataset,
    train_cfg: TrainConfig,
    loss: LossKind,
    scorer: ValidationScore,
    lam: float = 0.0,
) -> TrainResult:
    """平均損失 + λ Reg を最小化し、検証スコアで早期終了する。

    Naive / Unif / Combine の各ベースラインは学習データを変えてこれを呼ぶだけ。
    """
    if len(dataset) == 0:
        raise DataIntegrityError("空のデータセットでは学習できません")
    init_seq, shuffle_seq = np.random.SeedSequence(train_cfg.seed).spawn(2)
    rng = np.random.default_rng(shuffle_seq)
    model = init_model(
        dataset.n_users,
        dataset.n_items,
        train_cfg.rank,
        seed=int(init_seq.generate_state(1)[0]),
        scale=train_cfg.init_scale,
    )
    opt = AdamState(learning_rate=train_cfg.learning_rate)

    initial = {
        "supervised": partial_loss(loss, dataset.labels, model.predict(dataset.users, dataset.items), len(dataset)),
        "reg_c": regularization_value(model, lam, dataset.users, dataset.items),
    }
    history = [EpochRecord(0, initial, scorer(model))]
    stopper = _EarlyStopping(train_cfg.patience)
    stopper.update(0, history[0].val_score, model, None)

    n = len(dataset)
    bs = train_cfg.batch_size
    for epoch in range(1, train_cfg.pretrain_epochs + 1):
        perm = rng.permutation(n)
        totals = {"supervised": 0.0, "reg_c": 0.0}
        n_batches = 0
        for start in range(0, n, bs):
            idx = perm[start : start + bs]
            value, reg = grad_step(
                model,
                opt,
                dataset.users[idx],
                dataset.items[idx],
                dataset.labels[idx],
                1.0 / len(idx),
                loss,
                lam,
            )
            totals["supervised"] += value
            totals["reg_c"] += reg
            n_batches += 1
        record = EpochRecord(epoch, _mean_terms(totals, n_batches), scorer(model))
        history.append(record)
        _logger.debug("pretrain epoch %d: objective=%.6f val=%.4f", epoch, record.objective, record.val_score)
        if stopper.update(epoch, record.val_score, model, None):
            _logger.info("pretrain: early stopping at epoch %d (best %d)", epoch, stopper.best_epoch)
            break

    assert stopper.best_models is not None
    return TrainResult(stopper.best_models[0], None, history, stopper.best_epoch)


# ---------------------------------------------------------------------------
# 学習
# ---------------------------------------------------------------------------


def train(
    method_cfg: MethodConfig,
    train_cfg: TrainConfig,
    s_c: Dataset,
    s_t: Dataset,
    s_va: Dataset,
    scorer: ValidationScore | None = None,
) -> TrainResult:
    """手法に応じて学習し、検証スコア最良のスナップショットを返す。

    2段階の手法は M_c を S_c で、M_t を S_t で事前学習したのち、
    毎エポック S_a を |S_c| 件サンプリングして目的関数を最小化する。
    """
    scorer = scorer if scorer is not None else auc_scorer(s_va)
    method = method_cfg.method
    loss = method_cfg.loss
    _logger.info("train %s (rank=%d, seed=%d)", method_cfg.label, train_cfg.rank, train_cfg.seed)

    if method is Method.NAIVE:
        return pretrain(s_c, train_cfg, loss, scorer, method_cfg.lambda_c)
    if method is Method.UNIF:
        return pretrain(s_t, train_cfg, loss, scorer, method_cfg.lambda_c)
    if method is Method.COMBINE:
        return pretrain(s_c.union(s_t), train_cfg, loss, scorer, method_cfg.lambda_c)

    t_seq, loop_seq, init_seq = np.random.SeedSequence(train_cfg.seed).spawn(3)
    propensity: tuple[float, float] | None = None
    model_t: FactorModel | None = None
    if method is Method.IPS:
        propensity = naive_bayes_propensity(s_c, s_t, s_c.d_size, method_cfg.propensity_floor)
        _logger.info("naive-Bayes propensity: p0=%.5f p1=%.5f", *propensity)
        model_c = init_model(
            s_c.n_users,
            s_c.n_items,
            train_cfg.rank,
            seed=int(init_seq.generate_state(1)[0]),
            scale=train_cfg.init_scale,
        )
    else:
        model_c = pretrain(s_c, train_cfg, loss, scorer, method_cfg.lambda_c).model_c
        t_cfg = replace(train_cfg, seed=int(t_seq.generate_state(1)[0]))
        model_t = pretrain(s_t, t_cfg, loss, scorer, method_cfg.lambda_t).model_c

    return _joint_phase(method_cfg, train_cfg, model_c, model_t, s_c, s_t, scorer, propensity, loop_seq)


def _joint_phase(
    method_cfg: MethodConfig,
    train_cfg: TrainConfig,
    model_c: FactorModel,
    model_t: FactorModel | None,
    s_c: Dataset,
    s_t: Dataset,
    scorer: ValidationScore,
    propensity: tuple[float, float] | None,
    seed_seq: np.random.SeedSequence,
) -> TrainResult:
    method = method_cfg.method
    rng = np.random.default_rng(seed_seq)
    d_size = s_c.d_size
    opt_c = AdamState(learning_rate=train_cfg.learning_rate)
    opt_t = AdamState(learning_rate=train_cfg.learning_rate) if method.trains_model_t else None
    use_t = method is not Method.IPS and len(s_t) > 0
    n_unobserved = d_size - len(np.union1d(s_c.pair_keys, s_t.pair_keys))

    def draw_auxiliary() -> Dataset | None:
        if not method_cfg.samples_auxiliary:
            return None
        n = min(len(s_c), n_unobserved)
        return sample_unobserved(s_c, s_t, n, seed=int(rng.integers(0, 2**31 - 1)))

    def aux_batch(s_a: Dataset | None, idx: np.ndarray | None) -> Batch:
        if s_a is None or len(s_a) == 0:
            return Batch.empty()
        return Batch.from_dataset(s_a, idx, population=n_unobserved)

    # エポック 0: 更新前の全データでの値
    s_a = draw_auxiliary()
    full = Batches(
        c=Batch.from_dataset(s_c),
        t=Batch.from_dataset(s_t) if use_t else Batch.empty(),
        a=aux_batch(s_a, None),
    )
    initial = objective_terms(method_cfg, model_c, model_t, full, d_size, propensity)
    history = [EpochRecord(0, initial.values, scorer(model_c))]
    stopper = _EarlyStopping(train_cfg.patience)
    stopper.update(0, history[0].val_score, model_c, model_t)

    n_c = len(s_c)
    bs = train_cfg.batch_size
    n_batches = max(1, math.ceil(n_c / bs))
    bs_t = min(bs, len(s_t)) if use_t else 0
    t_order = rng.permutation(len(s_t))
    t_pos = 0

    for epoch in range(1, train_cfg.max_epochs + 1):
        if epoch > 1:
            s_a = draw_auxiliary()
        perm = rng.permutation(n_c)
        a_perm = rng.permutation(len(s_a)) if s_a is not None else None
        totals: dict[str, float] = {}
        for b in range(n_batches):
            idx_c = perm[b * bs : (b + 1) * bs]
            if use_t:
                if t_pos + bs_t > len(t_order):
                    t_order = rng.permutation(len(s_t))
                    t_pos = 0
                idx_t = t_order[t_pos : t_pos + bs_t]
                t_pos += bs_t
                b_t = Batch.from_dataset(s_t, idx_t)
            else:
                b_t = Batch.empty()
            idx_a = a_perm[b * bs : (b + 1) * bs] if a_perm is not None else None
            batches = Batches(c=Batch.from_dataset(s_c, idx_c), t=b_t, a=aux_batch(s_a, idx_a))

            terms = objective_terms(method_cfg, model_c, model_t, batches, d_size, propensity)
            apply_gradient(model_c, opt_c, terms.grad_c)
            if terms.grad_t is not None and opt_t is not None and model_t is not None:
                apply_gradient(model_t, opt_t, terms.grad_t)
            for k, v in terms.values.items():
                totals[k] = totals.get(k, 0.0) + v

        record = EpochRecord(epoch, _mean_terms(totals, n_batches), scorer(model_c))
        history.append(record)
        _logger.info(
            "%s epoch %d: objective=%.6f val=%.4f",
            method_cfg.label,
            epoch,
            record.objective,
            record.val_score,
        )
        _logger.debug("terms: %s", record.terms)
        if stopper.update(epoch, record.val_score, model_c, model_t):
            _logger.info("early stopping at epoch %d (best %d)", epoch, stopper.best_epoch)
            break

    assert stopper.best_models is not None
    best_c, best_t = stopper.best_models
    return TrainResult(best_c, best_t, history, stopper.best_epoch)


# ---------------------------------------------------------------------------
# グリッドサーチ
# ---------------------------------------------------------------------------

DEFAULT_RANKS = (50, 100, 200)
DEFAULT_LAMBDAS = (1e-5, 1e-4, 1e-3, 1e-2, 1e-1)
DEFAULT_GAMMAS = (1e-5, 1e-4, 1e-3, 1e-2, 1e-1)


@dataclass(frozen=True)
class GridSpec:
    ranks: tuple[int, ...] = DEFAULT_RANKS
    lambdas: tuple[float, ...] = DEFAULT_LAMBDAS
    gammas: tuple[float, ...] = DEFAULT_GAMMAS

    def __post_init__(self) -> None:
        if not (self.ranks and self.lambdas and self.gammas):
            raise ValueError("グリッドは空にできません")

    def cells(self, template: MethodConfig, train_cfg: TrainConfig) -> list[tuple[MethodConfig, TrainConfig]]:
        """グリッドの全セル（rank → λ → γ の順）。γ を使わない手法では γ 軸を潰す。"""
        method = template.method
        if method.uses_gamma or method is Method.CAUSE:
            gammas: Sequence[float | None] = self.gammas
        else:
            gammas = (None,)
        cells = []
        for idx, (rank, lam, gamma) in enumerate(itertools.product(self.ranks, self.lambdas, gammas)):
            cfg = template.replace(lambda_c=lam, lambda_t=lam)
            if gamma is not None:
                cfg = cfg.replace(gamma_tc=gamma) if method is Method.CAUSE else cfg.replace(gamma=gamma)
            cell_seed = int(np.random.SeedSequence([train_cfg.seed, idx]).generate_state(1)[0])
            cells.append((cfg, replace(train_cfg, rank=rank, seed=cell_seed)))
        return cells


@dataclass
class GridCell:
    method_cfg: MethodConfig
    train_cfg: TrainConfig
    score: float
    result: TrainResult = field(repr=False)


@dataclass
class GridResult:
    best: GridCell
    cells: list[GridCell]


def grid_search(
    template: MethodConfig,
    train_cfg: TrainConfig,
    grid: GridSpec,
    s_c: Dataset,
    s_t: Dataset,
    s_va: Dataset,
    scorer: ValidationScore | None = None,
    jobs: int = 1,
) -> GridResult:
    """全セルを学習し、検証スコア最大のセルを返す（同点はグリッド順で先のセル）。

    各セルのシードは (基準シード, セル番号) から導出するため、並列実行しても結果は変わらない。
    """
    scorer = scorer if scorer is not None else auc_scorer(s_va)
    cells = grid.cells(template, train_cfg)
    _logger.info("grid search %s: %d cells", template.label, len(cells))

    def run(cell: tuple[MethodConfig, TrainConfig]) -> GridCell:
        m_cfg, t_cfg = cell
        result = train(m_cfg, t_cfg, s_c, s_t, s_va, scorer)
        return GridCell(m_cfg, t_cfg, result.best_score, result)

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(run, cells))
    else:
        results = [run(c) for c in cells]

    best = results[0]
    for cell in results[1:]:
        if cell.score > best.score:
            best = cell
    return GridResult(best, results)
