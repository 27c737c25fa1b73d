from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from debias_bound.models import DataIntegrityError, Dataset, Regime


class RatingParseError(Exception):
    """評価ファイル読み込み時のエラー。"""


@dataclass
class IdIndex:
    """元のユーザ/アイテムIDを 0 始まりの連番に振り直すための対応表。

    複数ファイルを同じ ID 空間で読む場合は同じ IdIndex を渡す。
    """

    users: dict[str, int] = field(default_factory=dict)
    items: dict[str, int] = field(default_factory=dict)

    def user(self, raw: str) -> int:
        return self.users.setdefault(raw, len(self.users))

    def item(self, raw: str) -> int:
        return self.items.setdefault(raw, len(self.items))

    @property
    def n_users(self) -> int:
        return len(self.users)

    @property
    def n_items(self) -> int:
        return len(self.items)


def load_explicit_ratings(
    path: str | Path,
    threshold: float,
    regime: Regime = Regime.NON_RANDOMIZED,
    index: IdIndex | None = None,
) -> Dataset:
    """`user, item, rating` 形式のファイルを読み込み、閾値で二値化する。

    rating > threshold を正例 (1)、それ以外を負例 (0) とする。

    Args:
        path: 入力ファイルのパス（タブ区切りまたはカンマ区切り、`#` 始まりはコメント）
        threshold: 二値化の閾値 ε (> 0)
        regime: 返す Dataset の種別
        index: ID の対応表（省略時は新規作成）

    Raises:
        RatingParseError: 行の形式が不正
        DataIntegrityError: 同一ペアの重複
    """
    if threshold <= 0:
        raise ValueError("threshold は正の値で指定してください")
    rows = _read_rows(path)
    index = index if index is not None else IdIndex()

    parsed: list[tuple[str, str, int]] = []
    for line_no, row in rows:
        try:
            rating = float(row[2])
        except ValueError as e:
            raise RatingParseError(f"{line_no}行目: 評価値が数値ではありません: {row[2]!r}") from e
        parsed.append((row[0], row[1], 1 if rating > threshold else 0))
    return _build_dataset(parsed, rows, index, regime)


def load_binary_feedback(
    path: str | Path,
    regime: Regime = Regime.NON_RANDOMIZED,
    index: IdIndex | None = None,
) -> Dataset:
    """`user, item, label` 形式（label は 0/1）のファイルを読み込む。"""
    rows = _read_rows(path)
    index = index if index is not None else IdIndex()

    parsed: list[tuple[str, str, int]] = []
    for line_no, row in rows:
        if row[2] not in ("0", "1"):
            raise RatingParseError(f"{line_no}行目: ラベルは 0 または 1 で指定してください: {row[2]!r}")
        parsed.append((row[0], row[1], int(row[2])))
    return _build_dataset(parsed, rows, index, regime)


def load_rating_pair(
    train_path: str | Path,
    randomized_path: str | Path,
    threshold: float,
    binary: bool = False,
) -> tuple[Dataset, Dataset]:
    """非ランダム化ログとランダム化ログを共通の ID 空間で読み込む。

    binary=True のときは3列目を 0/1 のラベルとして読み、threshold は使わない。

    Returns:
        (S_c, ランダム化データ全体) のタプル。両者の n_users / n_items は一致する。
    """
    index = IdIndex()
    if binary:
        s_c = load_binary_feedback(train_path, Regime.NON_RANDOMIZED, index)
        randomized = load_binary_feedback(randomized_path, Regime.RANDOMIZED, index)
    else:
        s_c = load_explicit_ratings(train_path, threshold, Regime.NON_RANDOMIZED, index)
        randomized = load_explicit_ratings(randomized_path, threshold, Regime.RANDOMIZED, index)
    return (
        s_c.resized(index.n_users, index.n_items),
        randomized.resized(index.n_users, index.n_items),
    )


def _read_rows(path: str | Path) -> list[tuple[int, list[str]]]:
    """コメント・空行を除いた (行番号, 3列) のリストを返す。"""
    path = Path(path)
    if not path.exists():
        raise RatingParseError(f"ファイルが見つかりません: {path}")

    rows: list[tuple[int, list[str]]] = []
    with path.open(encoding="utf-8", newline="") as f:
        data_lines = [
            (n, line)
            for n, line in enumerate(f, start=1)
            if line.strip() and not line.lstrip().startswith("#")
        ]
    if not data_lines:
        raise RatingParseError(f"データ行がありません: {path}")

    delimiter = "\t" if "\t" in data_lines[0][1] else ","
    reader = csv.reader((line for _, line in data_lines), delimiter=delimiter)
    for (line_no, _), row in zip(data_lines, reader):
        row = [cell.strip() for cell in row]
        if len(row) != 3 or not all(row):
            raise RatingParseError(f"{line_no}行目: 3列 (user, item, value) で指定してください")
        rows.append((line_no, row))
    return rows


def _build_dataset(
    parsed: list[tuple[str, str, int]],
    rows: list[tuple[int, list[str]]],
    index: IdIndex,
    regime: Regime,
) -> Dataset:
    users: list[int] = []
    items: list[int] = []
    labels: list[int] = []
    seen: dict[tuple[int, int], int] = {}

    for (line_no, _), (raw_user, raw_item, label) in zip(rows, parsed):
        u = index.user(raw_user)
        i = index.item(raw_item)
        if (u, i) in seen:
            raise DataIntegrityError(
                f"{line_no}行目: ペア ({raw_user}, {raw_item}) が重複しています"
                f"（最初の出現: {seen[(u, i)]}行目）"
            )
        seen[(u, i)] = line_no
        users.append(u)
        items.append(i)
        labels.append(label)

    return Dataset(
        users=np.array(users, dtype=np.int64),
        items=np.array(items, dtype=np.int64),
        labels=np.array(labels, dtype=np.int64),
        n_users=max(index.n_users, 1),
        n_items=max(index.n_items, 1),
        regime=regime,
    )
