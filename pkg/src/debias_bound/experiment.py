"""実験パイプライン（データ準備・学習・評価・結果ファイルの書き出し）。

main.py の各サブコマンドから呼ばれる。結果行は必ず手法・シード・設定ハッシュを持ち、
同じ設定を再実行すれば同じ値が得られる。
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import os
import threading
from collections.abc import Iterable, Sequence
from dataclasses import asdict, dataclass, fields, is_dataclass, replace
from enum import Enum
from pathlib import Path

import numpy as np

from debias_bound.bounds import BoundReport, coverage, theorem_report
from debias_bound.config import AppConfig
from debias_bound.factor_model import init_model, load_model, save_model
from debias_bound.losses import (
    BCE,
    L1,
    MSE,
    ZERO_ONE,
    ConstraintKind,
    LossKind,
    check_separability,
    check_triangle,
)
from debias_bound.metrics import (
    cumulative_hits,
    dataset_popularity_report,
    evaluate,
    popularity_report,
)
from debias_bound.models import DataIntegrityError, Dataset, SyntheticWorld, WorldSpec
from debias_bound.objectives import Method, MethodConfig
from debias_bound.rating_parser import load_rating_pair
from debias_bound.splitter import (
    remove_overlap,
    split_general,
    split_randomized,
    subsample_fraction,
    subsample_positive_ratio,
)
from debias_bound.trainer import (
    TrainConfig,
    TrainResult,
    auc_scorer,
    grid_search,
    ndcg_scorer,
    train,
)
from debias_bound.world import Policy, generate_world, load_world, log_feedback, save_world

_logger = logging.getLogger(__name__)

OUTPUT_ENV = "DEBIAS_OUTPUT_DIR"

RESULT_FIELDS = (
    "method",
    "seed",
    "config_hash",
    "mode",
    "factor",
    "level",
    "rank",
    "gamma",
    "lambda_c",
    "lambda_t",
    "gamma_tc",
    "best_epoch",
    "val_score",
    "auc",
    "ndcg",
)


def result_fields(ks: Sequence[int]) -> list[str]:
    """results.csv の列（P@K と R@K は K ごとに並べる）。"""
    topk = [f"{m}@{k}" for k in sorted(ks) for m in ("p", "r")]
    return [*RESULT_FIELDS, *topk, "n_users"]


def resolve_output_dir(cli_value: str | None, app: AppConfig) -> Path:
    """出力先: --output > 環境変数 DEBIAS_OUTPUT_DIR > 設定ファイル。"""
    if cli_value:
        return Path(cli_value)
    env = os.environ.get(OUTPUT_ENV)
    if env:
        return Path(env)
    return Path(app.experiment.output_dir)


def _jsonable(value: object) -> object:
    if is_dataclass(value) and not isinstance(value, type):
        return {k: _jsonable(v) for k, v in asdict(value).items()}
    if isinstance(value, Enum):
        return value.value
    if isinstance(value, (set, frozenset)):
        return sorted(_jsonable(v) for v in value)  # type: ignore[type-var]
    if isinstance(value, dict):
        return {str(k): _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    return value


def config_hash(*parts: object) -> str:
    """設定オブジェクトの JSON 表現から作る 12 桁の識別子。"""
    payload = json.dumps([_jsonable(p) for p in parts], sort_keys=True, default=str)
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()[:12]


class ResultWriter:
    """CSV への追記をロックで直列化する。"""

    def __init__(self, path: Path, fields: Sequence[str]) -> None:
        self.path = path
        self.fields = list(fields)
        self._lock = threading.Lock()

    def append(self, row: dict[str, object]) -> None:
        with self._lock:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            new_file = not self.path.exists()
            with self.path.open("a", encoding="utf-8", newline="") as f:
                writer = csv.DictWriter(f, fieldnames=self.fields, extrasaction="ignore", restval="")
                if new_file:
                    writer.writeheader()
                writer.writerow(row)


def write_csv(path: Path, rows: Iterable[dict[str, object]]) -> Path:
    rows = list(rows)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="") as f:
        if rows:
            writer = csv.DictWriter(f, fieldnames=list(rows[0]))
            writer.writeheader()
            writer.writerows(rows)
    return path


# ---------------------------------------------------------------------------
# データ
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DataBundle:
    """1 回の実行で使うデータ一式（S_c と S_t は重複除去済み）。"""

    s_c: Dataset
    s_t: Dataset
    s_va: Dataset
    s_te: Dataset
    world: SyntheticWorld | None = None
    source: str = "synthetic"

    @property
    def identity(self) -> object:
        """設定ハッシュに含めるデータの識別情報。"""
        return self.world.spec if self.world is not None else self.source


def synthetic_bundle(world: SyntheticWorld, seed: int) -> DataBundle:
    """世界から S_c とランダム化ログを取り、ランダム化ログを 10/10/80 に分割する。"""
    spec = world.spec
    log_c, log_t, split = np.random.SeedSequence([spec.seed, seed]).generate_state(3)
    s_c = log_feedback(world, Policy.STOCHASTIC, spec.impressions_c, int(log_c))
    randomized = log_feedback(world, Policy.UNIFORM, spec.impressions_t, int(log_t))
    s_t, s_va, s_te = split_randomized(randomized, seed=int(split))
    return DataBundle(remove_overlap(s_c, s_t), s_t, s_va, s_te, world, "synthetic")


def file_bundle(
    train_path: str, randomized_path: str, threshold: float, seed: int, binary: bool = False
) -> DataBundle:
    s_c, randomized = load_rating_pair(train_path, randomized_path, threshold, binary)
    _logger.info(
        "loaded %d + %d interactions, |D|=%d, P/N(S_c)=%.4f",
        len(s_c),
        len(randomized),
        s_c.d_size,
        s_c.positive_negative_ratio,
    )
    s_t, s_va, s_te = split_randomized(randomized, seed=seed)
    labels = "binary" if binary else threshold
    source = f"files:{train_path}:{randomized_path}:{labels}"
    return DataBundle(remove_overlap(s_c, s_t), s_t, s_va, s_te, None, source)


def run_generate(spec: WorldSpec, out_dir: Path) -> Path:
    """合成世界を生成して保存する。同じ設定なら同じバイト列になる。"""
    return save_world(generate_world(spec), out_dir)


def load_world_for(app: AppConfig) -> SyntheticWorld:
    if app.data.world_dir:
        return load_world(app.data.world_dir)
    return generate_world(app.world_spec())


def build_bundle(app: AppConfig, seed: int, world: SyntheticWorld | None = None) -> DataBundle:
    if app.data.source == "files":
        if not app.data.train_path or not app.data.randomized_path:
            raise FileNotFoundError("data.train_path と data.randomized_path を指定してください")
        return file_bundle(
            app.data.train_path,
            app.data.randomized_path,
            app.data.threshold,
            seed,
            binary=app.data.format == "binary",
        )
    return synthetic_bundle(world if world is not None else load_world_for(app), seed)


# ---------------------------------------------------------------------------
# 学習と評価
# ---------------------------------------------------------------------------


def _result_row(
    method_cfg: MethodConfig,
    train_cfg: TrainConfig,
    seed: int,
    h: str,
    result: TrainResult,
    metrics: dict[str, float | int],
    **extra: object,
) -> dict[str, object]:
    return {
        "method": method_cfg.label,
        "seed": seed,
        "config_hash": h,
        "rank": train_cfg.rank,
        "gamma": method_cfg.gamma,
        "lambda_c": method_cfg.lambda_c,
        "lambda_t": method_cfg.lambda_t,
        "gamma_tc": method_cfg.gamma_tc,
        "best_epoch": result.best_epoch,
        "val_score": result.best_score,
        **metrics,
        **extra,
    }


TRAIN_BOUND_FIELDS = (
    "method",
    "seed",
    "config_hash",
    *(f.name for f in fields(BoundReport)),
)


def trained_bound_report(app: AppConfig, bundle: DataBundle, result: TrainResult, seed: int) -> BoundReport | None:
    """学習した M_c / M_t の対で上界を評価する。

    真の行列が必要なので合成データのみ。|H| は設定で指定がなければ
    学習中に評価したスナップショット数を使う。
    """
    if bundle.world is None or result.model_t is None:
        return None
    loss = app.bound_loss()
    return theorem_report(
        ConstraintKind(app.bounds.variant),
        bundle.world,
        result.model_c,
        result.model_t,
        bundle.s_c,
        bundle.s_t,
        loss,
        app.bound_config(loss, default_count=result.snapshot_count),
        n_draws=app.bounds.resamples,
        seed=seed,
    )


def write_history(out_dir: Path, label: str, seed: int, h: str, result: TrainResult) -> Path:
    rows = [r.to_row() for r in result.history]
    return write_csv(out_dir / "history" / f"{label}_{seed}_{h}.csv", rows)


def run_method(
    app: AppConfig,
    method_cfg: MethodConfig,
    train_cfg: TrainConfig,
    bundle: DataBundle,
    seed: int,
    out_dir: Path,
    writer: ResultWriter,
    save: bool = False,
    bounds_writer: ResultWriter | None = None,
    **extra: object,
) -> dict[str, object]:
    """1 手法を学習し、テストデータで評価して結果行と履歴を書き出す。"""
    h = config_hash(method_cfg, train_cfg, bundle.identity, extra)
    result = train(method_cfg, train_cfg, bundle.s_c, bundle.s_t, bundle.s_va)
    report = evaluate(
        result.model_c,
        bundle.s_te,
        [bundle.s_c, bundle.s_t],
        ks=app.experiment.ks,
        ndcg_cutoff=app.experiment.ndcg_cutoff,
        per_user=app.experiment.per_user_auc,
    )
    write_history(out_dir, method_cfg.label, seed, h, result)
    if save:
        model_dir = out_dir / "models" / f"{method_cfg.label}_{seed}_{h}"
        save_model(result.model_c, model_dir / "model_c", seed=seed)
        if result.model_t is not None:
            save_model(result.model_t, model_dir / "model_t", seed=seed)
    row = _result_row(method_cfg, train_cfg, seed, h, result, report.to_row(), mode="train", **extra)
    writer.append(row)
    if bounds_writer is not None:
        bound = trained_bound_report(app, bundle, result, seed)
        if bound is None:
            _logger.info("%s: M_t を持たないため上界を評価しません", method_cfg.label)
        else:
            bounds_writer.append({"method": method_cfg.label, "seed": seed, "config_hash": h, **bound.to_row()})
    _logger.info("%s seed=%d: test AUC=%.4f nDCG=%.4f", method_cfg.label, seed, report.auc, report.ndcg)
    return row


def run_train(
    app: AppConfig,
    methods: Sequence[MethodConfig],
    seeds: Sequence[int],
    out_dir: Path,
    save: bool = False,
    bounds: bool = False,
) -> list[dict[str, object]]:
    """各シード・各手法を学習する。bounds が真なら train_bounds.csv に上界も書き出す。"""
    writer = ResultWriter(out_dir / "results.csv", result_fields(app.experiment.ks))
    bounds_writer = ResultWriter(out_dir / "train_bounds.csv", TRAIN_BOUND_FIELDS) if bounds else None
    world = load_world_for(app) if app.data.source == "synthetic" else None
    rows = []
    for seed in seeds:
        bundle = build_bundle(app, seed, world)
        for method_cfg in methods:
            rows.append(
                run_method(app, method_cfg, app.train_config(seed), bundle, seed, out_dir, writer, save, bounds_writer)
            )
    return rows


def run_grid(
    app: AppConfig,
    methods: Sequence[MethodConfig],
    seeds: Sequence[int],
    out_dir: Path,
) -> list[dict[str, object]]:
    """グリッドサーチで最良セルを選び、テストデータで評価する。全セルの検証値は grid.csv へ。"""
    writer = ResultWriter(out_dir / "results.csv", result_fields(app.experiment.ks))
    grid_rows: list[dict[str, object]] = []
    world = load_world_for(app) if app.data.source == "synthetic" else None
    rows = []
    for seed in seeds:
        bundle = build_bundle(app, seed, world)
        scorer = (
            ndcg_scorer(bundle.s_va, [bundle.s_c, bundle.s_t])
            if app.grid.metric == "ndcg"
            else auc_scorer(bundle.s_va)
        )
        for template in methods:
            found = grid_search(
                template,
                app.train_config(seed),
                app.grid_spec(),
                bundle.s_c,
                bundle.s_t,
                bundle.s_va,
                scorer=scorer,
                jobs=app.grid.jobs,
            )
            for cell in found.cells:
                grid_rows.append(
                    {
                        "method": template.label,
                        "seed": seed,
                        "rank": cell.train_cfg.rank,
                        "lambda": cell.method_cfg.lambda_c,
                        "gamma": cell.method_cfg.gamma_tc
                        if template.method is Method.CAUSE
                        else cell.method_cfg.gamma,
                        "score": cell.score,
                    }
                )
            best = found.best
            report = evaluate(
                best.result.model_c,
                bundle.s_te,
                [bundle.s_c, bundle.s_t],
                ks=app.experiment.ks,
                ndcg_cutoff=app.experiment.ndcg_cutoff,
                per_user=app.experiment.per_user_auc,
            )
            h = config_hash(best.method_cfg, best.train_cfg, bundle.identity)
            write_history(out_dir, best.method_cfg.label, seed, h, best.result)
            row = _result_row(
                best.method_cfg, best.train_cfg, seed, h, best.result, report.to_row(), mode="grid"
            )
            writer.append(row)
            rows.append(row)
    write_csv(out_dir / "grid.csv", grid_rows)
    return rows


def ablation_variants(base: MethodConfig) -> list[MethodConfig]:
    """全項 → term (e) を除外 → term (a) と (e) を除外 の3通り。"""
    e_term = "e2" if base.method is Method.DUB_SEP else "e1"
    return [
        base.replace(drop_terms=frozenset()),
        base.replace(drop_terms=frozenset({e_term})),
        base.replace(drop_terms=frozenset({"a", e_term})),
    ]


def run_ablation(
    app: AppConfig,
    base: MethodConfig,
    seeds: Sequence[int],
    out_dir: Path,
    drops: Sequence[frozenset[str]] | None = None,
) -> list[dict[str, object]]:
    """全項の学習と、指定した項を除いた学習を同じシードで並べて実行する。

    drops を省略すると ablation_variants の3通り。
    """
    variants = (
        [base.replace(drop_terms=frozenset(d)) for d in drops] if drops is not None else ablation_variants(base)
    )
    writer = ResultWriter(out_dir / "results.csv", result_fields(app.experiment.ks))
    world = load_world_for(app) if app.data.source == "synthetic" else None
    rows = []
    for seed in seeds:
        bundle = build_bundle(app, seed, world)
        for cfg in variants:
            level = ",".join(sorted(cfg.drop_terms)) or "none"
            rows.append(
                run_method(
                    app, cfg, app.train_config(seed), bundle, seed, out_dir, writer,
                    factor="dropped", level=level,
                )
            )
    return rows


def run_sweep(
    app: AppConfig,
    methods: Sequence[MethodConfig],
    seeds: Sequence[int],
    out_dir: Path,
) -> list[dict[str, object]]:
    """S_c の正例比率と S_t の割合を変えて学習・評価する。"""
    writer = ResultWriter(out_dir / "results.csv", result_fields(app.experiment.ks))
    world = load_world_for(app) if app.data.source == "synthetic" else None
    ratios = app.sweep.positive_ratios
    rows = []
    for seed in seeds:
        bundle = build_bundle(app, seed, world)
        total = app.sweep.total or feasible_total(bundle.s_c, ratios)
        for ratio in ratios:
            s_c = subsample_positive_ratio(bundle.s_c, ratio, total, seed)
            swept = replace(bundle, s_c=s_c)
            for method_cfg in methods:
                rows.append(
                    run_method(
                        app, method_cfg, app.train_config(seed), swept, seed, out_dir, writer,
                        factor="positive_ratio", level=ratio,
                    )
                )
        for fraction in app.sweep.st_fractions:
            s_t = subsample_fraction(bundle.s_t, fraction, seed)
            swept = replace(bundle, s_t=s_t)
            for method_cfg in methods:
                rows.append(
                    run_method(
                        app, method_cfg, app.train_config(seed), swept, seed, out_dir, writer,
                        factor="st_fraction", level=fraction,
                    )
                )
    return rows


def feasible_total(s_c: Dataset, ratios: Sequence[float]) -> int:
    """全ての正例比率で抽出できる最大の標本数。"""
    limits = []
    for r in ratios:
        if r > 0:
            limits.append(s_c.n_positive / r)
        if r < 1:
            limits.append(s_c.n_negative / (1.0 - r))
    return int(np.floor(min(limits)))


def run_general_eval(
    app: AppConfig,
    methods: Sequence[MethodConfig],
    seeds: Sequence[int],
    out_dir: Path,
) -> list[dict[str, object]]:
    """非ランダム化データを 5:2:3 に分け、検証・テストとも非一様データで評価する。

    検証の基準指標は nDCG。ユーザID順の累積ヒット曲線を cumulative_hits.csv に書き出す。
    """
    writer = ResultWriter(out_dir / "results.csv", result_fields(app.experiment.ks))
    world = load_world_for(app) if app.data.source == "synthetic" else None
    rows = []
    curves: list[dict[str, object]] = []
    for seed in seeds:
        bundle = build_bundle(app, seed, world)
        c_train, c_val, c_test = split_general(bundle.s_c, seed=seed)
        train_sets = [c_train, bundle.s_t]
        scorer = ndcg_scorer(c_val, train_sets)
        for method_cfg in methods:
            train_cfg = app.train_config(seed)
            h = config_hash(method_cfg, train_cfg, bundle.identity, "general")
            result = train(method_cfg, train_cfg, c_train, bundle.s_t, c_val, scorer=scorer)
            report = evaluate(
                result.model_c,
                c_test,
                train_sets,
                ks=app.experiment.ks,
                ndcg_cutoff=app.experiment.ndcg_cutoff,
                per_user=app.experiment.per_user_auc,
            )
            write_history(out_dir, method_cfg.label, seed, h, result)
            row = _result_row(method_cfg, train_cfg, seed, h, result, report.to_row(), mode="general")
            writer.append(row)
            rows.append(row)
            curve = cumulative_hits(result.model_c, c_test, train_sets, k=max(app.experiment.ks))
            curves.extend(
                {"method": method_cfg.label, "seed": seed, "users": u + 1, "cumulative_hit": float(v)}
                for u, v in enumerate(curve)
            )
    write_csv(out_dir / "cumulative_hits.csv", curves)
    return rows


def run_evaluate(app: AppConfig, model_dir: Path, seed: int, out_dir: Path) -> dict[str, object]:
    """保存済みモデルをテストデータで評価し、人気度分析と累積ヒット曲線も書き出す。"""
    model = load_model(model_dir)
    bundle = build_bundle(app, seed)
    if (model.n_users, model.n_items) != (bundle.s_te.n_users, bundle.s_te.n_items):
        raise DataIntegrityError("モデルとデータの次元が一致しません")
    train_sets = [bundle.s_c, bundle.s_t]
    report = evaluate(
        model,
        bundle.s_te,
        train_sets,
        ks=app.experiment.ks,
        ndcg_cutoff=app.experiment.ndcg_cutoff,
        per_user=app.experiment.per_user_auc,
    )
    h = config_hash(str(model_dir), bundle.identity, seed)
    label = model_label(model_dir)
    row: dict[str, object] = {
        "method": label,
        "seed": seed,
        "config_hash": h,
        "mode": "evaluate",
        "rank": model.rank,
        **report.to_row(),
    }
    ResultWriter(out_dir / "results.csv", result_fields(app.experiment.ks)).append(row)

    pop = popularity_report(model, bundle.s_c, bundle.s_te, max(app.experiment.ks), train_sets)
    logged = dataset_popularity_report(bundle.s_t, pop.popular_items)
    pop_rows = [{"source": "model", **r} for r in pop.to_rows()]
    pop_rows += [{"source": "randomized_log", **r} for r in logged.to_rows()]
    write_csv(out_dir / "popularity.csv", pop_rows)

    curve = cumulative_hits(model, bundle.s_te, train_sets, k=max(app.experiment.ks))
    write_csv(
        out_dir / "cumulative_hits.csv",
        (
            {"method": label, "seed": seed, "users": u + 1, "cumulative_hit": float(v)}
            for u, v in enumerate(curve)
        ),
    )
    return row


def model_label(model_dir: Path) -> str:
    """`train --save-model` の出力 (<label>_<seed>_<hash>/model_c) なら親ディレクトリ名を使う。"""
    if model_dir.name in ("model_c", "model_t"):
        return f"{model_dir.parent.name}/{model_dir.name}"
    return model_dir.name


# ---------------------------------------------------------------------------
# 上界の検証
# ---------------------------------------------------------------------------

PREMISE_LOSSES: tuple[tuple[str, LossKind], ...] = (("l1", L1), ("zero_one", ZERO_ONE), ("bce", BCE), ("mse", MSE))


def check_premises(n_samples: int, seed: int = 0) -> list[dict[str, object]]:
    """各損失について三角不等式と分離可能性の検査結果をまとめる。"""
    reports = []
    for _, loss in PREMISE_LOSSES:
        reports.append(check_triangle(loss, n_samples, seed).to_dict())
        reports.append(check_separability(loss, n_samples, seed).to_dict())
    return reports


def verify_trial(app: AppConfig, variant: ConstraintKind, loss: LossKind, trial_seed: int) -> BoundReport:
    """小さな合成世界とランダムなモデル対で上界を1回検証する。"""
    b = app.bounds
    world = generate_world(app.bounds_world_spec(trial_seed))
    c_seed, t_seed, mc_seed, mt_seed, rs_seed = np.random.SeedSequence(trial_seed).generate_state(5)
    s_c = log_feedback(world, Policy.STOCHASTIC, b.impressions_c, int(c_seed))
    s_t = log_feedback(world, Policy.UNIFORM, b.impressions_t, int(t_seed))
    s_c = remove_overlap(s_c, s_t)
    rank = world.spec.rank_true
    model_c = init_model(world.n_users, world.n_items, rank, seed=int(mc_seed), scale=b.model_scale)
    model_t = init_model(world.n_users, world.n_items, rank, seed=int(mt_seed), scale=b.model_scale)
    return theorem_report(
        variant,
        world,
        model_c,
        model_t,
        s_c,
        s_t,
        loss,
        app.bound_config(loss),
        n_draws=b.resamples,
        seed=int(rs_seed),
    )


def run_verify_bounds(app: AppConfig, seed: int, out_dir: Path) -> dict[str, float]:
    """損失の前提を premises.json に、試行ごとの上界を bounds.csv に書き出し、被覆率を返す。"""
    b = app.bounds
    premises = check_premises(b.premise_samples, seed)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "premises.json").write_text(json.dumps(premises, indent=2, ensure_ascii=False), encoding="utf-8")

    variant = ConstraintKind(b.variant)
    loss = app.bound_loss()
    trial_seeds = np.random.SeedSequence(seed).generate_state(b.trials)
    reports = []
    rows = []
    for i, trial_seed in enumerate(trial_seeds):
        report = verify_trial(app, variant, loss, int(trial_seed))
        reports.append(report)
        rows.append({"trial": i, **report.to_row()})
    write_csv(out_dir / "bounds.csv", rows)
    summary = coverage(reports)
    (out_dir / "bounds_coverage.json").write_text(json.dumps(summary, indent=2), encoding="utf-8")
    _logger.info("bound coverage: %s", summary)
    return summary
