from __future__ import annotations

import math

import numpy as np
import pytest

from debias_bound.losses import (
    BCE,
    L1,
    MSE,
    ZERO_ONE,
    ConstraintKind,
    ConstraintReport,
    LossDomainError,
    LossKind,
    LossVariant,
    Violation,
    as_target,
    check_separability,
    check_triangle,
    eval_loss,
    logit_gradient,
    max_value,
    partial_loss,
    separability_gap,
    triangle_gap,
)


class TestEvalLoss:
    def test_bce_formula(self) -> None:
        assert eval_loss(BCE, 1.0, 0.9) == pytest.approx(-math.log(0.9))
        assert eval_loss(BCE, 0.0, 0.9) == pytest.approx(-math.log(0.1))

    def test_bce_generalized_target(self) -> None:
        """y が [0,1] 外でも式をそのまま評価する（y は切り詰めない）。"""
        y, p = -0.5, 0.3
        expected = -(y * math.log(p) + (1 - y) * math.log(1 - p))
        assert eval_loss(BCE, y, p) == pytest.approx(expected)

    def test_bce_clamps_prediction(self) -> None:
        assert np.isfinite(eval_loss(BCE, 1.0, 0.0))
        assert eval_loss(BCE, 1.0, 0.0) == pytest.approx(-math.log(1e-7))

    def test_l1_mse(self) -> None:
        assert eval_loss(L1, 1.0, 0.25) == pytest.approx(0.75)
        assert eval_loss(MSE, 1.0, 0.25) == pytest.approx(0.5625)

    def test_zero_one(self) -> None:
        np.testing.assert_array_equal(
            eval_loss(ZERO_ONE, np.array([1, 1, 0, 0]), np.array([0.7, 0.2, 0.5, 0.1])),
            [0, 1, 1, 0],
        )

    def test_zero_one_rejects_non_binary(self) -> None:
        with pytest.raises(LossDomainError):
            eval_loss(ZERO_ONE, 0.5, 0.5)

    def test_zero_at_equal_binary_inputs(self) -> None:
        y = np.array([0.0, 1.0])
        for k in (L1, MSE, ZERO_ONE):
            np.testing.assert_array_equal(eval_loss(k, y, y), [0.0, 0.0])

    def test_bce_minimized_at_target(self) -> None:
        """y ∈ (0,1) に対し BCE(y, ŷ) はグリッド上で ŷ = y で最小。"""
        grid = np.linspace(0.01, 0.99, 99)
        for y in (0.2, 0.5, 0.8):
            values = eval_loss(BCE, y, grid)
            assert grid[np.argmin(values)] == pytest.approx(y)


class TestLossKind:
    def test_parse(self) -> None:
        assert LossKind.parse("l1") == L1
        assert LossKind.parse("bce", 1e-5).clamp_eps == 1e-5

    def test_parse_unknown(self) -> None:
        with pytest.raises(ValueError, match="未知の損失"):
            LossKind.parse("hinge")

    def test_clamp_eps_range(self) -> None:
        with pytest.raises(ValueError):
            LossKind(LossVariant.BCE, 0.0)

    def test_max_value(self) -> None:
        assert max_value(ZERO_ONE) == 1.0
        assert max_value(L1) == 1.0
        assert max_value(MSE) == 1.0
        assert max_value(BCE) == pytest.approx(-math.log(1e-7))

    def test_as_target(self) -> None:
        values = np.array([0.2, 0.6])
        np.testing.assert_array_equal(as_target(ZERO_ONE, values), [0.0, 1.0])
        np.testing.assert_array_equal(as_target(BCE, values), values)


class TestPartialLoss:
    def test_denominator_d(self) -> None:
        value = partial_loss(L1, np.array([1, 0]), np.array([0.5, 0.5]), 10)
        assert value == pytest.approx(0.1)

    def test_average_loss(self) -> None:
        value = partial_loss(L1, np.array([1, 0]), np.array([0.5, 0.5]), 2)
        assert value == pytest.approx(0.5)

    def test_empty(self) -> None:
        assert partial_loss(BCE, np.zeros(0), np.zeros(0), 5) == 0.0

    def test_bad_denominator(self) -> None:
        with pytest.raises(ValueError):
            partial_loss(L1, np.array([1.0]), np.array([0.5]), 0)
        with pytest.raises(ValueError, match="件数"):
            partial_loss(L1, np.array([1.0, 0.0]), np.array([0.5, 0.5]), 1)


class TestLogitGradient:
    @pytest.mark.parametrize("k", [BCE, L1, MSE])
    def test_matches_finite_difference(self, k: LossKind) -> None:
        z = np.array([-1.3, 0.2, 0.9])
        y = np.array([1.0, 0.0, 0.3])
        h = 1e-6

        def f(logit: np.ndarray) -> np.ndarray:
            return eval_loss(k, y, 1.0 / (1.0 + np.exp(-logit)))

        numeric = (f(z + h) - f(z - h)) / (2 * h)
        analytic = logit_gradient(k, y, 1.0 / (1.0 + np.exp(-z)))
        np.testing.assert_allclose(analytic, numeric, rtol=1e-5, atol=1e-8)

    def test_zero_one_not_differentiable(self) -> None:
        with pytest.raises(LossDomainError):
            logit_gradient(ZERO_ONE, np.array([1.0]), np.array([0.5]))


class TestGaps:
    def test_bce_triangle_counterexample(self) -> None:
        """予測 0.1・中間 0.9・ラベル 1 で BCE は三角不等式を破る。"""
        gap = triangle_gap(BCE, np.array(0.1), np.array(0.9), np.array(1.0))
        assert float(gap) == pytest.approx(0.11436, abs=1e-4)

    def test_l1_separability_counterexample(self) -> None:
        gap = separability_gap(L1, np.array(0.5), np.array(0.5), np.array(1.0))
        assert float(gap) == pytest.approx(0.5)

    def test_bce_separability_gap_is_log_complement(self) -> None:
        """BCE は y について線形なので差は ln(1 − a) に等しい。"""
        a = np.array([0.1, 0.5, 0.9])
        gap = separability_gap(BCE, a, np.array([0.3, -0.7, 1.0]), np.array([-1.0, 0.2, 0.4]))
        np.testing.assert_allclose(gap, np.log1p(-a))


class TestCheckers:
    def test_triangle_l1_and_zero_one_hold(self) -> None:
        for k in (L1, ZERO_ONE):
            report = check_triangle(k, 200_000, seed=0)
            assert report.n_violations == 0
            assert report.worst_violation is None

    @pytest.mark.slow
    @pytest.mark.parametrize("k", [L1, ZERO_ONE])
    def test_triangle_holds_at_full_size(self, k: LossKind) -> None:
        report = check_triangle(k, 1_000_000, seed=7)
        assert report.n_samples == 1_000_000
        assert report.n_violations == 0

    def test_triangle_bce_violated(self) -> None:
        report = check_triangle(BCE, 100_000, seed=0)
        assert report.kind is ConstraintKind.TRIANGLE
        assert report.n_violations > 0
        assert report.worst_violation is not None
        assert report.worst_violation.gap > 0
        assert report.worst_violation.lhs - report.worst_violation.rhs == pytest.approx(
            report.worst_violation.gap
        )

    def test_separability_bce_holds(self) -> None:
        report = check_separability(BCE, 1_000_000, seed=0)
        assert report.n_samples == 1_000_000
        assert report.n_violations == 0

    def test_separability_zero_one_holds(self) -> None:
        assert check_separability(ZERO_ONE, 100_000, seed=1).n_violations == 0

    def test_separability_l1_violated(self) -> None:
        assert check_separability(L1, 100_000, seed=0).n_violations > 0

    def test_deterministic(self) -> None:
        assert check_triangle(BCE, 10_000, seed=4) == check_triangle(BCE, 10_000, seed=4)

    def test_to_dict(self) -> None:
        report = check_triangle(L1, 1000, seed=0)
        assert report.to_dict() == {
            "kind": "triangle",
            "loss": "l1",
            "n_samples": 1000,
            "n_violations": 0,
            "worst_violation": None,
        }

    def test_report_validation(self) -> None:
        with pytest.raises(ValueError):
            ConstraintReport(ConstraintKind.TRIANGLE, LossVariant.L1, 1, 2, Violation(0, 0, 0, 0, 0, 0))
        with pytest.raises(ValueError):
            ConstraintReport(ConstraintKind.TRIANGLE, LossVariant.L1, 10, 0, Violation(0, 0, 0, 0, 0, 0))
