from __future__ import annotations

from pathlib import Path

import numpy as np
import pytest

from debias_bound.models import Regime, WorldSpec
from debias_bound.world import (
    META_FILE,
    MATRIX_FILES,
    Policy,
    generate_world,
    load_world,
    log_feedback,
    save_world,
)

SMALL = WorldSpec(n_users=30, n_items=20, rank_true=4, impressions_c=200, impressions_t=100, seed=3)


class TestGenerateWorld:
    def test_shapes_and_domains(self) -> None:
        world = generate_world(SMALL)
        assert world.r_c.shape == (30, 20)
        assert world.d_size == 600
        assert set(np.unique(world.r_t)) <= {0, 1}
        assert np.all((world.preference > 0) & (world.preference < 1))

    def test_deterministic(self) -> None:
        a = generate_world(SMALL)
        b = generate_world(SMALL)
        np.testing.assert_array_equal(a.r_c, b.r_c)
        np.testing.assert_array_equal(a.exposure_c, b.exposure_c)

    def test_boost_inflates_positives(self) -> None:
        """推薦方策下の正例は一様方策下の正例を包含する。"""
        world = generate_world(SMALL)
        assert np.all(world.r_c >= world.r_t)
        assert world.r_c.sum() > world.r_t.sum()

    def test_no_boost_makes_matrices_equal(self) -> None:
        world = generate_world(WorldSpec(n_users=10, n_items=10, impressions_c=20, impressions_t=10, positivity_boost=1.0))
        np.testing.assert_array_equal(world.r_c, world.r_t)

    def test_exposure_budget(self) -> None:
        """各ユーザの露出確率の和は impressions_c / n_users、各要素は 1 以下。"""
        world = generate_world(SMALL)
        np.testing.assert_allclose(world.exposure_c.sum(axis=1), 200 / 30)
        assert world.exposure_c.max() <= 1.0 + 1e-12
        assert world.exposure_t == pytest.approx(100 / 600)

    def test_popularity_bias(self) -> None:
        """π_c は正例の多いアイテムほど多く露出する。"""
        world = generate_world(WorldSpec(n_users=200, n_items=50, impressions_c=2000, impressions_t=500, seed=1))
        item_exposure = world.exposure_c.sum(axis=0)
        popularity = world.r_c.sum(axis=0)
        assert np.corrcoef(item_exposure, popularity)[0, 1] > 0.5


class TestLogFeedback:
    def test_uniform_labels_from_r_t(self) -> None:
        world = generate_world(SMALL)
        d = log_feedback(world, Policy.UNIFORM, 100, seed=0)
        assert len(d) == 100
        assert d.regime is Regime.RANDOMIZED
        np.testing.assert_array_equal(d.labels, world.r_t[d.users, d.items])

    def test_stochastic_labels_from_r_c(self) -> None:
        world = generate_world(SMALL)
        d = log_feedback(world, Policy.STOCHASTIC, 200, seed=0)
        assert d.regime is Regime.NON_RANDOMIZED
        np.testing.assert_array_equal(d.labels, world.r_c[d.users, d.items])

    def test_keys_sorted_and_unique(self) -> None:
        world = generate_world(SMALL)
        d = log_feedback(world, Policy.STOCHASTIC, 150, seed=2)
        keys = d.pair_keys
        assert np.all(np.diff(keys) > 0)

    def test_stochastic_prefers_exposed_pairs(self) -> None:
        world = generate_world(SMALL)
        d = log_feedback(world, Policy.STOCHASTIC, 200, seed=4)
        logged = world.exposure_c[d.users, d.items].mean()
        assert logged > world.exposure_c.mean()

    def test_zero_and_full(self) -> None:
        world = generate_world(SMALL)
        assert len(log_feedback(world, Policy.UNIFORM, 0)) == 0
        assert len(log_feedback(world, Policy.UNIFORM, world.d_size)) == world.d_size

    def test_out_of_range(self) -> None:
        world = generate_world(SMALL)
        with pytest.raises(ValueError):
            log_feedback(world, Policy.UNIFORM, world.d_size + 1)


class TestWorldIO:
    def test_round_trip(self, tmp_path: Path) -> None:
        world = generate_world(SMALL)
        save_world(world, tmp_path / "w")
        loaded = load_world(tmp_path / "w")
        assert loaded.spec == world.spec
        np.testing.assert_array_equal(loaded.r_c, world.r_c)
        np.testing.assert_array_equal(loaded.r_t, world.r_t)
        np.testing.assert_array_equal(loaded.preference, world.preference)
        np.testing.assert_array_equal(loaded.exposure_c, world.exposure_c)
        assert loaded.exposure_t == world.exposure_t

    def test_rewrite_is_byte_identical(self, tmp_path: Path) -> None:
        save_world(generate_world(SMALL), tmp_path / "a")
        save_world(generate_world(SMALL), tmp_path / "b")
        for name in (META_FILE, *(f"{m}.csv" for m in MATRIX_FILES)):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_missing_meta(self, tmp_path: Path) -> None:
        with pytest.raises(FileNotFoundError):
            load_world(tmp_path)
