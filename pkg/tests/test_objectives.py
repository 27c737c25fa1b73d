from __future__ import annotations

from collections.abc import Callable

import numpy as np
import pytest

from debias_bound.factor_model import BLOCKS, FactorModel, init_model, param_distance, regularization_value
from debias_bound.losses import BCE, L1, eval_loss, partial_loss
from debias_bound.models import UNSET_LABEL, Dataset, Regime
from debias_bound.objectives import (
    Batch,
    Batches,
    Method,
    MethodConfig,
    ObjectiveError,
    naive_bayes_propensity,
    objective_terms,
)

D_SIZE = 20


def _s_c() -> Dataset:
    return Dataset(
        np.array([0, 0, 1, 2, 3]),
        np.array([0, 1, 2, 3, 4]),
        np.array([1, 0, 1, 0, 1]),
        4,
        5,
        Regime.NON_RANDOMIZED,
    )


def _s_t() -> Dataset:
    return Dataset(np.array([1, 2, 3]), np.array([0, 1, 2]), np.array([1, 0, 0]), 4, 5, Regime.RANDOMIZED)


def _s_a() -> Dataset:
    return Dataset(
        np.array([0, 1, 2]), np.array([2, 3, 4]), np.full(3, UNSET_LABEL), 4, 5, Regime.AUXILIARY
    )


def _batches() -> Batches:
    return Batches(
        c=Batch.from_dataset(_s_c()),
        t=Batch.from_dataset(_s_t()),
        a=Batch.from_dataset(_s_a(), population=12),
    )


def _models() -> tuple[FactorModel, FactorModel]:
    return init_model(4, 5, 2, seed=1, scale=0.5), init_model(4, 5, 2, seed=2, scale=0.5)


def _fd_check(
    model: FactorModel, value_fn: Callable[[], float], analytic: dict[str, np.ndarray], h: float = 1e-6
) -> None:
    for name in BLOCKS:
        block = getattr(model, name)
        numeric = np.zeros_like(block)
        for idx in np.ndindex(block.shape):
            orig = block[idx]
            block[idx] = orig + h
            up = value_fn()
            block[idx] = orig - h
            down = value_fn()
            block[idx] = orig
            numeric[idx] = (up - down) / (2 * h)
        np.testing.assert_allclose(analytic[name], numeric, rtol=1e-4, atol=1e-7, err_msg=name)


class TestMethodConfig:
    def test_label(self) -> None:
        assert MethodConfig(Method.DUB_SEP).label == "dub-sep"
        cfg = MethodConfig(Method.DUB_SEP, drop_terms=frozenset({"e2", "a"}))
        assert cfg.label == "dub-sep-wo-a-e2"

    def test_unknown_drop_term(self) -> None:
        with pytest.raises(ValueError, match="除外できない"):
            MethodConfig(drop_terms=frozenset({"b"}))

    def test_negative_weight(self) -> None:
        with pytest.raises(ValueError, match="gamma"):
            MethodConfig(gamma=-1.0)

    def test_alignment_mode(self) -> None:
        with pytest.raises(ValueError, match="alignment"):
            MethodConfig(alignment="sum")

    def test_method_flags(self) -> None:
        assert Method.DUB_TI.trains_model_t
        assert not Method.DUB_SEP.trains_model_t
        assert Method.DUB_SEP.uses_model_t
        assert not Method.CAUSE.uses_gamma
        assert Method.COMBINE.is_baseline

    def test_samples_auxiliary(self) -> None:
        assert MethodConfig(Method.BRIDGE, gamma=0.1).samples_auxiliary
        assert not MethodConfig(Method.BRIDGE, gamma=0.0).samples_auxiliary
        assert not MethodConfig(Method.DUB_SEP, drop_terms=frozenset({"d"})).samples_auxiliary
        assert not MethodConfig(Method.CAUSE).samples_auxiliary


class TestNaiveBayesPropensity:
    def test_hand_computed(self) -> None:
        """P(Y=1|O=1)=0.6, P(O=1)=0.25, P(Y=1)=1/3。"""
        p0, p1 = naive_bayes_propensity(_s_c(), _s_t(), D_SIZE)
        assert p1 == pytest.approx(0.45)
        assert p0 == pytest.approx(0.15)

    def test_floor(self) -> None:
        p0, _ = naive_bayes_propensity(_s_c(), _s_t(), 10_000, floor=0.01)
        assert p0 == 0.01

    def test_missing_label_in_s_t(self) -> None:
        s_t = Dataset(np.array([1]), np.array([0]), np.array([1]), 4, 5, Regime.RANDOMIZED)
        with pytest.raises(ObjectiveError, match="ラベル 0"):
            naive_bayes_propensity(_s_c(), s_t, D_SIZE)


class TestBaselines:
    def test_supervised_is_mean_loss(self) -> None:
        model_c, _ = _models()
        s_c = _s_c()
        cfg = MethodConfig(Method.NAIVE, lambda_c=0.01)
        terms = objective_terms(cfg, model_c, None, Batches(c=Batch.from_dataset(s_c)), D_SIZE)
        preds = model_c.predict(s_c.users, s_c.items)
        assert terms.values["supervised"] == pytest.approx(partial_loss(BCE, s_c.labels, preds, len(s_c)))
        assert terms.values["reg_c"] == pytest.approx(regularization_value(model_c, 0.01, s_c.users, s_c.items))
        assert terms.objective == pytest.approx(terms.values["supervised"] + terms.values["reg_c"])
        assert terms.grad_t is None

    def test_ips_weights(self) -> None:
        model_c, _ = _models()
        s_c = _s_c()
        propensity = (0.15, 0.45)
        cfg = MethodConfig(Method.IPS, lambda_c=0.0)
        terms = objective_terms(cfg, model_c, None, Batches(c=Batch.from_dataset(s_c)), D_SIZE, propensity)
        losses = eval_loss(BCE, s_c.labels, model_c.predict(s_c.users, s_c.items))
        inv = np.where(s_c.labels == 1, 1 / 0.45, 1 / 0.15)
        assert terms.values["ips"] == pytest.approx(float(np.sum(inv * losses)) / D_SIZE)

    def test_ips_requires_propensity(self) -> None:
        model_c, _ = _models()
        with pytest.raises(ObjectiveError):
            objective_terms(MethodConfig(Method.IPS), model_c, None, _batches(), D_SIZE)


class TestTwoPhaseTerms:
    def test_missing_model_t(self) -> None:
        model_c, _ = _models()
        with pytest.raises(ObjectiveError, match="M_t"):
            objective_terms(MethodConfig(Method.BRIDGE), model_c, None, _batches(), D_SIZE)

    def test_dub_sep_hand_oracle(self) -> None:
        """全バッチのとき各項は部分損失・平均損失の定義に一致する。"""
        model_c, model_t = _models()
        s_c, s_t, s_a = _s_c(), _s_t(), _s_a()
        cfg = MethodConfig(Method.DUB_SEP, gamma=0.5, lambda_c=0.0, loss=L1)
        terms = objective_terms(cfg, model_c, model_t, _batches(), D_SIZE)

        pred_c_on_c = model_c.predict(s_c.users, s_c.items)
        pred_c_on_t = model_c.predict(s_t.users, s_t.items)
        pred_t_on_t = model_t.predict(s_t.users, s_t.items)
        pred_c_on_a = model_c.predict(s_a.users, s_a.items)
        pred_t_on_a = model_t.predict(s_a.users, s_a.items)

        v = terms.values
        assert v["term_c"] == pytest.approx(partial_loss(L1, s_c.labels, pred_c_on_c, D_SIZE))
        assert v["term_a"] == pytest.approx(partial_loss(L1, s_t.labels, pred_c_on_t, D_SIZE))
        assert v["term_e2"] == pytest.approx(
            partial_loss(L1, s_t.labels - pred_t_on_t, pred_c_on_t, len(s_t))
        )
        # S_a（3件）で |S_u| = 12 の部分損失を推定する
        expected_d = 0.5 * 12 / (3 * D_SIZE) * float(np.sum(eval_loss(L1, pred_t_on_a, pred_c_on_a)))
        assert v["term_d"] == pytest.approx(expected_d)
        assert "term_e1" not in v
        assert terms.grad_t is None

    def test_mean_alignment(self) -> None:
        model_c, model_t = _models()
        s_a = _s_a()
        cfg = MethodConfig(Method.BRIDGE, gamma=2.0, alignment="mean", loss=L1)
        terms = objective_terms(cfg, model_c, model_t, _batches(), D_SIZE)
        losses = eval_loss(L1, model_t.predict(s_a.users, s_a.items), model_c.predict(s_a.users, s_a.items))
        assert terms.values["term_d"] == pytest.approx(2.0 * float(np.mean(losses)))

    def test_dub_ti_terms(self) -> None:
        model_c, model_t = _models()
        s_t = _s_t()
        cfg = MethodConfig(Method.DUB_TI, lambda_t=0.0)
        terms = objective_terms(cfg, model_c, model_t, _batches(), D_SIZE)
        expected = partial_loss(BCE, s_t.labels, model_t.predict(s_t.users, s_t.items), len(s_t))
        assert terms.values["term_e1"] == pytest.approx(expected)
        assert "term_e2" not in terms.values
        assert terms.grad_t is not None

    def test_degenerates_to_term_c(self) -> None:
        """γ=0 かつ S_t バッチが空なら term (c) と正則化だけが残る。"""
        model_c, model_t = _models()
        s_c = _s_c()
        cfg = MethodConfig(Method.DUB_SEP, gamma=0.0, lambda_c=0.01)
        batches = Batches(c=Batch.from_dataset(s_c), a=Batch.from_dataset(_s_a(), population=12))
        terms = objective_terms(cfg, model_c, model_t, batches, D_SIZE)
        nonzero = {k for k, v in terms.values.items() if v != 0.0}
        assert nonzero == {"term_c", "reg_c"}
        assert terms.values["reg_c"] == pytest.approx(
            regularization_value(model_c, 0.01, s_c.users, s_c.items)
        )

    @pytest.mark.parametrize("drop", [frozenset({"a", "e2"}), frozenset({"d"})])
    def test_dropped_terms_are_zero(self, drop: frozenset[str]) -> None:
        model_c, model_t = _models()
        cfg = MethodConfig(Method.DUB_SEP, gamma=0.5, drop_terms=drop)
        terms = objective_terms(cfg, model_c, model_t, _batches(), D_SIZE)
        for name in drop:
            assert terms.values[f"term_{name}"] == 0.0
        assert terms.values["term_c"] > 0.0

    def test_dropping_e2_changes_only_that_term(self) -> None:
        """e2 を除くと目的関数値は term (e.2) の分だけ小さくなる。"""
        model_c, model_t = _models()
        full = objective_terms(
            MethodConfig(Method.DUB_SEP, gamma=0.0, lambda_c=0.0), model_c, model_t, _batches(), D_SIZE
        )
        without = objective_terms(
            MethodConfig(Method.DUB_SEP, gamma=0.0, lambda_c=0.0, drop_terms=frozenset({"e2"})),
            model_c,
            model_t,
            _batches(),
            D_SIZE,
        )
        assert full.objective - without.objective == pytest.approx(full.values["term_e2"])

    def test_cause_param_align(self) -> None:
        model_c, model_t = _models()
        cfg = MethodConfig(Method.CAUSE, gamma_tc=0.2, lambda_c=0.0, lambda_t=0.0)
        terms = objective_terms(cfg, model_c, model_t, _batches(), D_SIZE)
        assert terms.values["param_align"] == pytest.approx(0.2 * param_distance(model_c, model_t))
        assert "term_d" not in terms.values
        assert terms.grad_t is not None

    def test_bridge_without_gamma_equals_cause_without_alignment(self) -> None:
        """γ=0 の Bridge と γ_tc=0 の CausE は同じ目的関数・同じ勾配になる。"""
        model_c, model_t = _models()
        bridge = objective_terms(
            MethodConfig(Method.BRIDGE, gamma=0.0, lambda_c=0.01, lambda_t=0.02), model_c, model_t, _batches(), D_SIZE
        )
        cause = objective_terms(
            MethodConfig(Method.CAUSE, gamma_tc=0.0, lambda_c=0.01, lambda_t=0.02), model_c, model_t, _batches(), D_SIZE
        )
        assert bridge.objective == pytest.approx(cause.objective, abs=1e-15)
        assert bridge.grad_t is not None and cause.grad_t is not None
        for name in BLOCKS:
            np.testing.assert_array_equal(bridge.grad_c[name], cause.grad_c[name])
            np.testing.assert_array_equal(bridge.grad_t[name], cause.grad_t[name])


class TestGradientsMatchFiniteDifference:
    @pytest.mark.parametrize("method", [Method.DUB_SEP, Method.DUB_TI, Method.BRIDGE, Method.CAUSE])
    def test_grad_c(self, method: Method) -> None:
        """M_c の勾配は M_c に依存する項の和の中心差分と一致する（M_t の予測は定数）。"""
        model_c, model_t = _models()
        cfg = MethodConfig(method, gamma=0.3, lambda_c=0.05, lambda_t=0.05, gamma_tc=0.1)
        batches = _batches()
        c_terms = ("term_a", "term_c", "term_d", "term_e2", "reg_c", "param_align")

        def value() -> float:
            v = objective_terms(cfg, model_c, model_t, batches, D_SIZE).values
            return sum(v.get(k, 0.0) for k in c_terms)

        analytic = objective_terms(cfg, model_c, model_t, batches, D_SIZE).grad_c
        _fd_check(model_c, value, analytic)

    def test_grad_t_dub_ti(self) -> None:
        model_c, model_t = _models()
        cfg = MethodConfig(Method.DUB_TI, gamma=0.3, lambda_t=0.05)
        batches = _batches()

        def value() -> float:
            v = objective_terms(cfg, model_c, model_t, batches, D_SIZE).values
            return v["term_e1"] + v["reg_t"]

        grad_t = objective_terms(cfg, model_c, model_t, batches, D_SIZE).grad_t
        assert grad_t is not None
        _fd_check(model_t, value, grad_t)

    def test_grad_t_cause(self) -> None:
        model_c, model_t = _models()
        cfg = MethodConfig(Method.CAUSE, gamma_tc=0.1, lambda_t=0.05)
        batches = _batches()

        def value() -> float:
            v = objective_terms(cfg, model_c, model_t, batches, D_SIZE).values
            return v["term_e1"] + v["reg_t"] + v["param_align"]

        grad_t = objective_terms(cfg, model_c, model_t, batches, D_SIZE).grad_t
        assert grad_t is not None
        _fd_check(model_t, value, grad_t)
