import logging
from collections.abc import Iterator, Sequence
from contextlib import contextmanager
from pathlib import Path

import click

from debias_bound import experiment
from debias_bound.config import AppConfig, load_config
from debias_bound.factor_model import NumericalError
from debias_bound.losses import LossDomainError
from debias_bound.models import DataIntegrityError
from debias_bound.objectives import DROPPABLE_TERMS, Method, MethodConfig, ObjectiveError
from debias_bound.rating_parser import RatingParseError
from debias_bound.splitter import SamplingError

CONFIG_ERROR = 2
DATA_ERROR = 3
NUMERICAL_ERROR = 4

_METHOD_CHOICES = [m.value for m in Method]

_CONFIG_OPTION = click.option(
    "--config",
    "config_path",
    type=click.Path(exists=True, file_okay=True, dir_okay=False, readable=True),
    default=None,
    help="設定ファイルのパス（省略時はカレントディレクトリの config.toml を自動検索）",
)
_OUTPUT_OPTION = click.option(
    "--output",
    "output",
    default=None,
    help=f"出力ディレクトリ（省略時は環境変数 {experiment.OUTPUT_ENV}、なければ設定ファイルの値）",
)
_SEED_OPTION = click.option(
    "--seed", "seeds", type=int, multiple=True, help="シード（複数指定可、省略時は設定ファイルの値）"
)
_METHOD_OPTION = click.option(
    "--method",
    "methods",
    type=click.Choice(_METHOD_CHOICES),
    multiple=True,
    help="学習する手法（複数指定可、省略時は設定ファイルの値）",
)


class ExitError(click.ClickException):
    """終了コードを持つ ClickException。"""

    def __init__(self, message: str, exit_code: int) -> None:
        super().__init__(message)
        self.exit_code = exit_code


@contextmanager
def _errors() -> Iterator[None]:
    """モジュール固有の例外を終了コード付きのエラーに変換する。"""
    try:
        yield
    except (NumericalError, LossDomainError) as e:
        raise ExitError(f"数値エラー: {e}", NUMERICAL_ERROR)
    except (
        RatingParseError,
        DataIntegrityError,
        SamplingError,
        ObjectiveError,
        FileNotFoundError,
    ) as e:
        raise ExitError(f"データエラー: {e}", DATA_ERROR)


def _float_list(ctx: click.Context, param: click.Parameter, value: str | None) -> list[float] | None:
    if value is None:
        return None
    try:
        return [float(v) for v in value.split(",") if v.strip()]
    except ValueError:
        raise click.BadParameter("カンマ区切りの数値で指定してください")


def _load(config_path: str | None) -> AppConfig:
    return load_config(Path(config_path) if config_path else None)


def _override(section: object, **values: object) -> None:
    """指定されたフラグだけ設定値を上書きする。"""
    for key, value in values.items():
        if value is not None:
            setattr(section, key, value)


def _seeds(app: AppConfig, seeds: Sequence[int]) -> list[int]:
    return list(seeds) if seeds else list(app.experiment.seeds)


def _method_configs(app: AppConfig, methods: Sequence[str]) -> list[MethodConfig]:
    names = list(methods) if methods else list(app.experiment.methods)
    return [app.method_config(name) for name in names]


def _echo_rows(rows: Sequence[dict[str, object]]) -> None:
    for row in rows:
        level = f" {row['factor']}={row['level']}" if row.get("factor") else ""
        click.echo(
            f"{row['method']} seed={row['seed']}{level}: "
            f"AUC={row['auc']:.4f} nDCG={row['ndcg']:.4f} (config {row['config_hash']})"
        )


@click.group()
@click.option("-v", "--verbose", count=True, help="ログを表示する（-vv でデバッグ出力）")
def cli(verbose: int) -> None:
    """ランダム化データを用いたバイアス除去推薦の実験CLI"""
    if verbose:
        logging.basicConfig(
            level=logging.DEBUG if verbose > 1 else logging.INFO,
            format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        )


@cli.command()
@click.option("--users", type=int, default=None, help="ユーザ数")
@click.option("--items", type=int, default=None, help="アイテム数")
@click.option("--impressions-c", type=int, default=None, help="非ランダム化ログの件数")
@click.option("--impressions-t", type=int, default=None, help="ランダム化ログの件数")
@click.option("--seed", type=int, default=None, help="世界のシード")
@_OUTPUT_OPTION
@_CONFIG_OPTION
def generate(
    users: int | None,
    items: int | None,
    impressions_c: int | None,
    impressions_t: int | None,
    seed: int | None,
    output: str | None,
    config_path: str | None,
) -> None:
    """合成世界（真の嗜好と露出）を生成してディレクトリに保存する"""
    app = _load(config_path)
    _override(
        app.world,
        n_users=users,
        n_items=items,
        impressions_c=impressions_c,
        impressions_t=impressions_t,
        seed=seed,
    )
    spec = app.world_spec()
    with _errors():
        result = experiment.run_generate(spec, experiment.resolve_output_dir(output, app) / "world")
    click.echo(f"出力しました: {result}")


@cli.command()
@_METHOD_OPTION
@click.option("--gamma", type=float, default=None, help="term (d) の重み γ")
@click.option("--lambda", "lam", type=float, default=None, help="正則化係数（λ_c と λ_t の両方）")
@click.option("--rank", type=int, default=None, help="潜在次元数")
@click.option("--loss", type=click.Choice(["bce", "l1", "mse"]), default=None, help="学習に使う損失")
@click.option("--world-dir", default=None, help="保存済みの合成世界ディレクトリ")
@click.option("--save-model", is_flag=True, default=False, help="学習したモデルを保存する")
@click.option("--bounds", "with_bounds", is_flag=True, default=False, help="学習したモデルで上界も評価する（合成データのみ）")
@click.option("--hypothesis-count", type=int, default=None, help="仮説数 |H|（省略時はスナップショット数）")
@_SEED_OPTION
@_OUTPUT_OPTION
@_CONFIG_OPTION
def train(
    methods: tuple[str, ...],
    gamma: float | None,
    lam: float | None,
    rank: int | None,
    loss: str | None,
    world_dir: str | None,
    save_model: bool,
    with_bounds: bool,
    hypothesis_count: int | None,
    seeds: tuple[int, ...],
    output: str | None,
    config_path: str | None,
) -> None:
    """手法を学習してテストデータで評価する"""
    app = _load(config_path)
    _override(app.method, gamma=gamma, lambda_c=lam, lambda_t=lam, loss=loss)
    _override(app.train, rank=rank)
    _override(app.data, world_dir=world_dir)
    _override(app.bounds, hypothesis_count=hypothesis_count)
    if with_bounds and app.data.source != "synthetic":
        raise click.BadParameter("上界の評価には真の行列が必要なため合成データでのみ使えます", param_hint="--bounds")
    if app.bounds.hypothesis_count is not None and app.bounds.hypothesis_count < 1:
        raise click.BadParameter("1 以上で指定してください", param_hint="--hypothesis-count")
    configs = _method_configs(app, methods)
    out_dir = experiment.resolve_output_dir(output, app)
    with _errors():
        rows = experiment.run_train(app, configs, _seeds(app, seeds), out_dir, save=save_model, bounds=with_bounds)
    _echo_rows(rows)
    click.echo(f"出力しました: {out_dir / 'results.csv'}")
    if with_bounds:
        click.echo(f"出力しました: {out_dir / 'train_bounds.csv'}")


@cli.command()
@_METHOD_OPTION
@click.option("--jobs", type=int, default=None, help="並列に学習するセル数")
@click.option("--metric", type=click.Choice(["auc", "ndcg"]), default=None, help="セル選択の基準指標")
@_SEED_OPTION
@_OUTPUT_OPTION
@_CONFIG_OPTION
def grid(
    methods: tuple[str, ...],
    jobs: int | None,
    metric: str | None,
    seeds: tuple[int, ...],
    output: str | None,
    config_path: str | None,
) -> None:
    """ハイパーパラメータのグリッドサーチを行い、最良セルを評価する"""
    app = _load(config_path)
    _override(app.grid, jobs=jobs, metric=metric)
    configs = _method_configs(app, methods)
    out_dir = experiment.resolve_output_dir(output, app)
    with _errors():
        rows = experiment.run_grid(app, configs, _seeds(app, seeds), out_dir)
    _echo_rows(rows)
    click.echo(f"出力しました: {out_dir / 'grid.csv'}")


@cli.command()
@click.option(
    "--method",
    "method",
    type=click.Choice(["dub-ti", "dub-sep"]),
    default="dub-sep",
    help="アブレーションを行う手法",
)
@click.option(
    "--drop",
    "drops",
    multiple=True,
    help="除外する項（カンマ区切り、複数指定で複数の設定を比較。省略時は全項・term (e) なし・(a) と (e) なし）",
)
@_SEED_OPTION
@_OUTPUT_OPTION
@_CONFIG_OPTION
def ablate(
    method: str,
    drops: tuple[str, ...],
    seeds: tuple[int, ...],
    output: str | None,
    config_path: str | None,
) -> None:
    """目的関数の項を除いた学習を比較する"""
    app = _load(config_path)
    base = app.method_config(method).replace(drop_terms=frozenset())
    parsed: list[frozenset[str]] | None = None
    if drops:
        parsed = [frozenset(t.strip() for t in d.split(",") if t.strip()) for d in drops]
        for terms in parsed:
            unknown = terms - DROPPABLE_TERMS
            if unknown:
                raise click.BadParameter(
                    f"除外できない項です: {sorted(unknown)}（{sorted(DROPPABLE_TERMS)} から選択）",
                    param_hint="--drop",
                )
        parsed = [frozenset(), *(t for t in parsed if t)]
    out_dir = experiment.resolve_output_dir(output, app)
    with _errors():
        rows = experiment.run_ablation(app, base, _seeds(app, seeds), out_dir, parsed)
    _echo_rows(rows)
    click.echo(f"出力しました: {out_dir / 'results.csv'}")


@cli.command()
@_METHOD_OPTION
@click.option(
    "--positive-ratios", callback=_float_list, default=None, help="S_c の正例比率（カンマ区切り）"
)
@click.option("--st-fractions", callback=_float_list, default=None, help="S_t の割合（カンマ区切り）")
@_SEED_OPTION
@_OUTPUT_OPTION
@_CONFIG_OPTION
def sweep(
    methods: tuple[str, ...],
    positive_ratios: list[float] | None,
    st_fractions: list[float] | None,
    seeds: tuple[int, ...],
    output: str | None,
    config_path: str | None,
) -> None:
    """S_c の正例比率と S_t の量を変えて学習・評価する"""
    app = _load(config_path)
    _override(app.sweep, positive_ratios=positive_ratios, st_fractions=st_fractions)
    if any(not 0.0 <= r <= 1.0 for r in app.sweep.positive_ratios):
        raise click.BadParameter("正例比率は 0〜1 で指定してください", param_hint="--positive-ratios")
    if any(not 0.0 < f <= 1.0 for f in app.sweep.st_fractions):
        raise click.BadParameter("S_t の割合は 0 より大きく 1 以下で指定してください", param_hint="--st-fractions")
    configs = _method_configs(app, methods)
    out_dir = experiment.resolve_output_dir(output, app)
    with _errors():
        rows = experiment.run_sweep(app, configs, _seeds(app, seeds), out_dir)
    _echo_rows(rows)
    click.echo(f"出力しました: {out_dir / 'results.csv'}")


@cli.command(name="verify-bounds")
@click.option("--variant", type=click.Choice(["triangle", "separability"]), default=None, help="上界の種類")
@click.option(
    "--loss", type=click.Choice(["l1", "zero_one", "bce", "mse"]), default=None, help="上界を評価する損失"
)
@click.option("--trials", type=int, default=None, help="試行回数")
@click.option("--hypothesis-count", type=int, default=None, help="仮説数 |H|")
@click.option("--seed", type=int, default=0, help="試行列のシード")
@_OUTPUT_OPTION
@_CONFIG_OPTION
def verify_bounds(
    variant: str | None,
    loss: str | None,
    trials: int | None,
    hypothesis_count: int | None,
    seed: int,
    output: str | None,
    config_path: str | None,
) -> None:
    """損失の前提（三角不等式・分離可能性）と汎化誤差上界を数値的に検証する"""
    app = _load(config_path)
    _override(app.bounds, variant=variant, loss=loss, trials=trials, hypothesis_count=hypothesis_count)
    if app.bounds.trials < 1:
        raise click.BadParameter("1 以上で指定してください", param_hint="--trials")
    out_dir = experiment.resolve_output_dir(output, app)
    with _errors():
        summary = experiment.run_verify_bounds(app, seed, out_dir)
    click.echo(
        f"coverage={summary['coverage']:.4f} "
        f"coverage_without_bias={summary['coverage_without_bias']:.4f} "
        f"(n_trials={summary['n_trials']})"
    )
    click.echo(f"出力しました: {out_dir / 'bounds.csv'}")


@cli.command()
@click.option(
    "--model-dir",
    required=True,
    type=click.Path(exists=True, file_okay=False, dir_okay=True),
    help="保存済みモデルのディレクトリ",
)
@click.option("--seed", type=int, default=0, help="データ分割のシード（学習時と同じ値）")
@_OUTPUT_OPTION
@_CONFIG_OPTION
def evaluate(model_dir: str, seed: int, output: str | None, config_path: str | None) -> None:
    """保存済みモデルを評価し、人気度分析と累積ヒット曲線を出力する"""
    app = _load(config_path)
    out_dir = experiment.resolve_output_dir(output, app)
    with _errors():
        row = experiment.run_evaluate(app, Path(model_dir), seed, out_dir)
    _echo_rows([row])
    click.echo(f"出力しました: {out_dir / 'popularity.csv'}")


@cli.command(name="general-eval")
@_METHOD_OPTION
@_SEED_OPTION
@_OUTPUT_OPTION
@_CONFIG_OPTION
def general_eval(
    methods: tuple[str, ...],
    seeds: tuple[int, ...],
    output: str | None,
    config_path: str | None,
) -> None:
    """非ランダム化データを 5:2:3 に分けて評価する（検証は nDCG）"""
    app = _load(config_path)
    configs = _method_configs(app, methods)
    out_dir = experiment.resolve_output_dir(output, app)
    with _errors():
        rows = experiment.run_general_eval(app, configs, _seeds(app, seeds), out_dir)
    _echo_rows(rows)
    click.echo(f"出力しました: {out_dir / 'cumulative_hits.csv'}")
