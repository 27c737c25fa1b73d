"""設定ファイルの読み込みと設定値の管理。

TOML 形式の設定ファイルを読み込み、AppConfig として返す。
設定ファイルが存在しない場合はデフォルト値を使用する。
不正な値はメッセージを標準エラーに出して終了コード 2 で終了する。
"""

from __future__ import annotations

import sys

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib
from collections.abc import Callable
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import NoReturn, TypeVar

from debias_bound.bounds import BoundConfig
from debias_bound.losses import LossKind
from debias_bound.models import WorldSpec
from debias_bound.objectives import ALIGNMENT_MODES, DROPPABLE_TERMS, Method, MethodConfig
from debias_bound.trainer import GridSpec, TrainConfig

CONFIG_EXIT_CODE = 2

T = TypeVar("T")


@dataclass
class WorldConfig:
    """合成世界の生成パラメータ。"""

    n_users: int = 500
    n_items: int = 200
    rank_true: int = 8
    popularity_skew: float = 1.5
    positivity_boost: float = 3.0
    impressions_c: int = 40_000
    impressions_t: int = 20_000    # ランダム化ログ全体（10/10/80 に分割）
    seed: int = 0
    preference_offset: float = -1.5
    factor_scale: float = 1.5


@dataclass
class DataConfig:
    """データの入手元。source = "synthetic" なら合成世界、"files" なら評価ファイル。"""

    source: str = "synthetic"
    world_dir: str | None = None         # 保存済みの合成世界（省略時は [world] から生成）
    train_path: str | None = None        # 非ランダム化ログ（user, item, rating）
    randomized_path: str | None = None   # ランダム化ログ（user, item, rating）
    threshold: float = 3.0               # rating > threshold を正例とする
    format: str = "explicit"             # "explicit"（評価値）または "binary"（0/1 ラベル）


@dataclass
class TrainSection:
    rank: int = 50
    learning_rate: float = 1e-3
    max_epochs: int = 50
    patience: int = 5
    batch_size: int = 1024
    pretrain_epochs: int = 50
    init_scale: float = 0.01


@dataclass
class MethodSection:
    name: str = "dub-sep"
    gamma: float = 1e-3
    lambda_c: float = 1e-4
    lambda_t: float = 1e-4
    gamma_tc: float = 1e-3
    loss: str = "bce"
    clamp_eps: float = 1e-7
    propensity_floor: float = 0.01
    alignment: str = "scaled"
    drop_terms: list[str] = field(default_factory=list)


@dataclass
class GridConfig:
    ranks: list[int] = field(default_factory=lambda: [50, 100, 200])
    lambdas: list[float] = field(default_factory=lambda: [1e-5, 1e-4, 1e-3, 1e-2, 1e-1])
    gammas: list[float] = field(default_factory=lambda: [1e-5, 1e-4, 1e-3, 1e-2, 1e-1])
    metric: str = "auc"
    jobs: int = 1


@dataclass
class SweepConfig:
    positive_ratios: list[float] = field(default_factory=lambda: [0.1, 0.3, 0.5, 0.7])
    st_fractions: list[float] = field(default_factory=lambda: [0.1, 0.3, 0.5, 0.7])
    total: int | None = None   # 正例比率スイープの標本数（省略時は全比率で取れる最大数）


@dataclass
class BoundsSection:
    """上界検証の試行設定（小さな合成世界を試行ごとに作り直す）。"""

    variant: str = "triangle"
    loss: str = "l1"
    eta: float = 0.05
    hypothesis_count: int | None = None  # 省略時は学習したモデルのスナップショット数（ランダムなモデルでは 1）
    trials: int = 200
    resamples: int = 100
    premise_samples: int = 1_000_000
    n_users: int = 100
    n_items: int = 60
    impressions_c: int = 1_500
    impressions_t: int = 300
    model_scale: float = 1.0


@dataclass
class ExperimentConfig:
    methods: list[str] = field(default_factory=lambda: ["naive", "bridge", "dub-sep"])
    seeds: list[int] = field(default_factory=lambda: [0])
    output_dir: str = "output"
    ks: list[int] = field(default_factory=lambda: [5, 10])
    ndcg_cutoff: int | None = None
    per_user_auc: bool = False


@dataclass
class AppConfig:
    """アプリケーション全体の設定。"""

    world: WorldConfig = field(default_factory=WorldConfig)
    data: DataConfig = field(default_factory=DataConfig)
    train: TrainSection = field(default_factory=TrainSection)
    method: MethodSection = field(default_factory=MethodSection)
    grid: GridConfig = field(default_factory=GridConfig)
    sweep: SweepConfig = field(default_factory=SweepConfig)
    bounds: BoundsSection = field(default_factory=BoundsSection)
    experiment: ExperimentConfig = field(default_factory=ExperimentConfig)

    # ------------------------------------------------------------------
    # 実行時オブジェクトへの変換
    # ------------------------------------------------------------------

    def world_spec(self) -> WorldSpec:
        w = self.world
        return _checked(
            lambda: WorldSpec(
                n_users=w.n_users,
                n_items=w.n_items,
                rank_true=w.rank_true,
                popularity_skew=w.popularity_skew,
                positivity_boost=w.positivity_boost,
                impressions_c=w.impressions_c,
                impressions_t=w.impressions_t,
                seed=w.seed,
                preference_offset=w.preference_offset,
                factor_scale=w.factor_scale,
            ),
            "world",
        )

    def train_config(self, seed: int) -> TrainConfig:
        t = self.train
        return _checked(
            lambda: TrainConfig(
                rank=t.rank,
                learning_rate=t.learning_rate,
                max_epochs=t.max_epochs,
                patience=t.patience,
                batch_size=t.batch_size,
                pretrain_epochs=t.pretrain_epochs,
                seed=seed,
                init_scale=t.init_scale,
            ),
            "train",
        )

    def method_config(self, name: str | None = None) -> MethodConfig:
        m = self.method
        return _checked(
            lambda: MethodConfig(
                method=Method(name if name is not None else m.name),
                gamma=m.gamma,
                lambda_c=m.lambda_c,
                lambda_t=m.lambda_t,
                gamma_tc=m.gamma_tc,
                loss=LossKind.parse(m.loss, m.clamp_eps),
                propensity_floor=m.propensity_floor,
                drop_terms=frozenset(m.drop_terms),
                alignment=m.alignment,
            ),
            "method",
        )

    def grid_spec(self) -> GridSpec:
        g = self.grid
        return _checked(lambda: GridSpec(tuple(g.ranks), tuple(g.lambdas), tuple(g.gammas)), "grid")

    def bound_config(self, loss: LossKind, default_count: int = 1) -> BoundConfig:
        """|H| は設定・フラグで指定がなければ default_count を使う。"""
        b = self.bounds
        count = b.hypothesis_count if b.hypothesis_count is not None else default_count
        return _checked(lambda: BoundConfig.for_loss(loss, count, b.eta), "bounds")

    def bound_loss(self) -> LossKind:
        return _checked(lambda: LossKind.parse(self.bounds.loss, self.method.clamp_eps), "bounds")

    def bounds_world_spec(self, trial_seed: int) -> WorldSpec:
        """上界検証用の小さな世界。件数以外は [world] の設定を使う。"""
        b = self.bounds
        base = self.world_spec()
        return _checked(
            lambda: replace(
                base,
                n_users=b.n_users,
                n_items=b.n_items,
                impressions_c=b.impressions_c,
                impressions_t=b.impressions_t,
                seed=trial_seed,
            ),
            "bounds",
        )


def _fail(message: str) -> NoReturn:
    print(f"設定エラー: {message}", file=sys.stderr)
    sys.exit(CONFIG_EXIT_CODE)


def _checked(build: Callable[[], T], section: str) -> T:
    """実行時オブジェクトの検証エラーを設定エラーとして報告する。"""
    try:
        return build()
    except ValueError as e:
        _fail(f"[{section}] {e}")


# ---------------------------------------------------------------------------
# バリデーション
# ---------------------------------------------------------------------------

_WORLD_INT_KEYS = ("n_users", "n_items", "rank_true", "impressions_c", "impressions_t", "seed")
_WORLD_FLOAT_KEYS = ("popularity_skew", "positivity_boost", "preference_offset", "factor_scale")

_DATA_STR_KEYS = ("source", "format")
_DATA_OPT_STR_KEYS = ("world_dir", "train_path", "randomized_path")
_DATA_FLOAT_KEYS = ("threshold",)

_TRAIN_INT_KEYS = ("rank", "max_epochs", "patience", "batch_size", "pretrain_epochs")
_TRAIN_FLOAT_KEYS = ("learning_rate", "init_scale")

_METHOD_STR_KEYS = ("name", "loss", "alignment")
_METHOD_FLOAT_KEYS = ("gamma", "lambda_c", "lambda_t", "gamma_tc", "clamp_eps", "propensity_floor")

_GRID_STR_KEYS = ("metric",)
_GRID_INT_KEYS = ("jobs",)

_BOUNDS_STR_KEYS = ("variant", "loss")
_BOUNDS_INT_KEYS = (
    "hypothesis_count",
    "trials",
    "resamples",
    "premise_samples",
    "n_users",
    "n_items",
    "impressions_c",
    "impressions_t",
)
_BOUNDS_FLOAT_KEYS = ("eta", "model_scale")

_EXPERIMENT_STR_KEYS = ("output_dir",)


def _is_int(value: object) -> bool:
    return isinstance(value, int) and not isinstance(value, bool)


def _is_number(value: object) -> bool:
    return isinstance(value, (int, float)) and not isinstance(value, bool)


def _apply_scalars(
    cfg: object,
    data: dict[str, object],
    section: str,
    int_keys: tuple[str, ...] = (),
    float_keys: tuple[str, ...] = (),
    str_keys: tuple[str, ...] = (),
    opt_str_keys: tuple[str, ...] = (),
) -> None:
    for key in int_keys:
        if key in data:
            val = data[key]
            if not _is_int(val):
                _fail(f"{section}.{key} は整数で指定してください")
            setattr(cfg, key, val)
    for key in float_keys:
        if key in data:
            val = data[key]
            if not _is_number(val):
                _fail(f"{section}.{key} は数値で指定してください")
            setattr(cfg, key, float(val))  # type: ignore[arg-type]
    for key in str_keys + opt_str_keys:
        if key in data:
            val = data[key]
            if not isinstance(val, str):
                _fail(f"{section}.{key} は文字列で指定してください")
            setattr(cfg, key, val)


def _int_list(value: object, key: str) -> list[int]:
    if not isinstance(value, list) or not value or not all(_is_int(v) for v in value):
        _fail(f"{key} は空でない整数の配列で指定してください")
    return [int(v) for v in value]


def _float_list(value: object, key: str) -> list[float]:
    if not isinstance(value, list) or not value or not all(_is_number(v) for v in value):
        _fail(f"{key} は空でない数値の配列で指定してください")
    return [float(v) for v in value]


def _str_list(value: object, key: str) -> list[str]:
    if not isinstance(value, list) or not all(isinstance(v, str) for v in value):
        _fail(f"{key} は文字列の配列で指定してください")
    return [str(v) for v in value]


def _build_world(data: dict[str, object]) -> WorldConfig:
    cfg = WorldConfig()
    _apply_scalars(cfg, data, "world", _WORLD_INT_KEYS, _WORLD_FLOAT_KEYS)
    return cfg


def _build_data(data: dict[str, object]) -> DataConfig:
    cfg = DataConfig()
    _apply_scalars(
        cfg, data, "data", float_keys=_DATA_FLOAT_KEYS, str_keys=_DATA_STR_KEYS, opt_str_keys=_DATA_OPT_STR_KEYS
    )
    if cfg.source not in ("synthetic", "files"):
        _fail('data.source は "synthetic" または "files" で指定してください')
    if cfg.format not in ("explicit", "binary"):
        _fail('data.format は "explicit" または "binary" で指定してください')
    if cfg.threshold <= 0:
        _fail("data.threshold は正の値で指定してください")
    return cfg


def _build_train(data: dict[str, object]) -> TrainSection:
    cfg = TrainSection()
    _apply_scalars(cfg, data, "train", _TRAIN_INT_KEYS, _TRAIN_FLOAT_KEYS)
    return cfg


def _build_method(data: dict[str, object]) -> MethodSection:
    cfg = MethodSection()
    _apply_scalars(cfg, data, "method", float_keys=_METHOD_FLOAT_KEYS, str_keys=_METHOD_STR_KEYS)
    if "drop_terms" in data:
        cfg.drop_terms = _str_list(data["drop_terms"], "method.drop_terms")
    choices = [m.value for m in Method]
    if cfg.name not in choices:
        _fail(f"method.name は {choices} のいずれかで指定してください")
    if cfg.alignment not in ALIGNMENT_MODES:
        _fail(f"method.alignment は {list(ALIGNMENT_MODES)} のいずれかで指定してください")
    unknown = set(cfg.drop_terms) - DROPPABLE_TERMS
    if unknown:
        _fail(f"method.drop_terms に未知の項があります: {sorted(unknown)}")
    return cfg


def _build_grid(data: dict[str, object]) -> GridConfig:
    cfg = GridConfig()
    _apply_scalars(cfg, data, "grid", int_keys=_GRID_INT_KEYS, str_keys=_GRID_STR_KEYS)
    if "ranks" in data:
        cfg.ranks = _int_list(data["ranks"], "grid.ranks")
    if "lambdas" in data:
        cfg.lambdas = _float_list(data["lambdas"], "grid.lambdas")
    if "gammas" in data:
        cfg.gammas = _float_list(data["gammas"], "grid.gammas")
    if cfg.metric not in ("auc", "ndcg"):
        _fail('grid.metric は "auc" または "ndcg" で指定してください')
    if cfg.jobs < 1:
        _fail("grid.jobs は 1 以上で指定してください")
    return cfg


def _build_sweep(data: dict[str, object]) -> SweepConfig:
    cfg = SweepConfig()
    if "positive_ratios" in data:
        cfg.positive_ratios = _float_list(data["positive_ratios"], "sweep.positive_ratios")
    if "st_fractions" in data:
        cfg.st_fractions = _float_list(data["st_fractions"], "sweep.st_fractions")
    if "total" in data:
        val = data["total"]
        if not _is_int(val) or val <= 0:  # type: ignore[operator]
            _fail("sweep.total は正の整数で指定してください")
        cfg.total = int(val)  # type: ignore[arg-type]
    if any(not 0.0 <= r <= 1.0 for r in cfg.positive_ratios):
        _fail("sweep.positive_ratios は 0〜1 で指定してください")
    if any(not 0.0 < f <= 1.0 for f in cfg.st_fractions):
        _fail("sweep.st_fractions は 0 より大きく 1 以下で指定してください")
    return cfg


def _build_bounds(data: dict[str, object]) -> BoundsSection:
    cfg = BoundsSection()
    _apply_scalars(cfg, data, "bounds", _BOUNDS_INT_KEYS, _BOUNDS_FLOAT_KEYS, _BOUNDS_STR_KEYS)
    if cfg.variant not in ("triangle", "separability"):
        _fail('bounds.variant は "triangle" または "separability" で指定してください')
    if cfg.trials < 1 or cfg.resamples < 1:
        _fail("bounds.trials と bounds.resamples は 1 以上で指定してください")
    if cfg.hypothesis_count is not None and cfg.hypothesis_count < 1:
        _fail("bounds.hypothesis_count は 1 以上で指定してください")
    _checked(lambda: LossKind.parse(cfg.loss), "bounds")
    _checked(
        lambda: WorldSpec(
            n_users=cfg.n_users,
            n_items=cfg.n_items,
            impressions_c=cfg.impressions_c,
            impressions_t=cfg.impressions_t,
        ),
        "bounds",
    )
    return cfg


def _build_experiment(data: dict[str, object]) -> ExperimentConfig:
    cfg = ExperimentConfig()
    _apply_scalars(cfg, data, "experiment", str_keys=_EXPERIMENT_STR_KEYS)
    if "methods" in data:
        cfg.methods = _str_list(data["methods"], "experiment.methods")
        choices = [m.value for m in Method]
        for name in cfg.methods:
            if name not in choices:
                _fail(f"experiment.methods の {name!r} は {choices} のいずれかで指定してください")
    if "seeds" in data:
        cfg.seeds = _int_list(data["seeds"], "experiment.seeds")
    if "ks" in data:
        cfg.ks = _int_list(data["ks"], "experiment.ks")
    if "ndcg_cutoff" in data:
        val = data["ndcg_cutoff"]
        if not _is_int(val) or val < 1:  # type: ignore[operator]
            _fail("experiment.ndcg_cutoff は 1 以上の整数で指定してください")
        cfg.ndcg_cutoff = int(val)  # type: ignore[arg-type]
    if "per_user_auc" in data:
        val = data["per_user_auc"]
        if not isinstance(val, bool):
            _fail("experiment.per_user_auc は true / false で指定してください")
        cfg.per_user_auc = val
    return cfg


_BUILDERS = {
    "world": _build_world,
    "data": _build_data,
    "train": _build_train,
    "method": _build_method,
    "grid": _build_grid,
    "sweep": _build_sweep,
    "bounds": _build_bounds,
    "experiment": _build_experiment,
}


# ---------------------------------------------------------------------------
# ロード
# ---------------------------------------------------------------------------


def load_config(path: Path | None) -> AppConfig:
    """設定ファイルを読み込んで AppConfig を返す。

    Args:
        path: 設定ファイルのパス。None の場合はカレントディレクトリの
              config.toml を探索し、存在しなければデフォルト値を使用する。

    Returns:
        AppConfig オブジェクト。
    """
    config_path = path if path is not None else Path("config.toml")

    if not config_path.exists():
        return AppConfig()

    try:
        with open(config_path, "rb") as f:
            data = tomllib.load(f)
    except tomllib.TOMLDecodeError as e:
        _fail(f"{config_path} を TOML として読み込めません: {e}")

    app_config = AppConfig()
    for section, build in _BUILDERS.items():
        value = data.get(section)
        if value is None:
            continue
        if not isinstance(value, dict):
            _fail(f"[{section}] はテーブルで指定してください")
        setattr(app_config, section, build(value))
    return app_config
