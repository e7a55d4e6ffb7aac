import math

import numpy as np
import pytest
from gradcheck import SHAPE, check_all, random_batch, random_params

from numgate.losses import (
    LossConfig,
    Strategy,
    bce_from_probs,
    build_positive_set,
    compute_losses,
    contrastive_loss_from_scores,
    prop_targets,
    retrieval_loss_from_scores,
    unit_classes,
)
from numgate.quantity import Cmp, NumericalCondition, Quantity


def test_retrieval_hand_value():
    # one query, two candidates: -log softmax(0.5, 0.3)[0] at tau 1
    assert retrieval_loss_from_scores([[0.5, 0.3]], 1.0) == pytest.approx(math.log1p(math.exp(-0.2)), abs=1e-15)


def test_retrieval_temperature():
    loss = retrieval_loss_from_scores([[1.0, 0.98]], 0.02)
    assert loss == pytest.approx(math.log1p(math.exp(-1.0)), abs=1e-12)


def test_contrastive_multi_positive():
    # positives at columns 0 and 2: mean of their negative log-probabilities
    S = np.array([[1.0, 0.0, 0.5, -1.0]])
    P = np.array([[True, False, True, False]])
    z = np.log(np.exp(S[0]).sum())
    assert contrastive_loss_from_scores(S, P, 1.0) == pytest.approx(-((1.0 - z) + (0.5 - z)) / 2, abs=1e-12)


def test_contrastive_skips_queries_without_positives():
    S = np.array([[1.0, 0.0], [0.3, 0.2]])
    P = np.array([[True, False], [False, False]])
    assert contrastive_loss_from_scores(S, P, 1.0) == pytest.approx(math.log1p(math.exp(-1.0)))


def test_bce():
    assert bce_from_probs([0.9, 0.2], [1, 0]) == pytest.approx(-(math.log(0.9) + math.log(0.8)) / 2)


class TestPositiveSets:
    COND = NumericalCondition(500.0, Cmp.GT, "GB")
    DOCS = [Quantity(1.0, "TB"), Quantity(256.0, "GB"), Quantity(600.0, "MBPS"), None, Quantity(800.0, "MB")]

    def test_unit_only(self):
        assert build_positive_set(self.COND, self.DOCS, Strategy.UNIT_ONLY).tolist() == [True, True, False, False, True]

    def test_numeric_only(self):
        got = build_positive_set(self.COND, self.DOCS, Strategy.NUMERIC_ONLY)
        assert got.tolist() == [True, False, False, False, False]

    def test_joint_is_intersection(self):
        got = build_positive_set(self.COND, self.DOCS, "joint")
        assert got.tolist() == [True, False, False, False, False]

    def test_separate_returns_both(self):
        unit, numeric = build_positive_set(self.COND, self.DOCS, Strategy.SEPARATE)
        assert unit.sum() == 3 and numeric.sum() == 1


def test_prop_targets():
    unit, mant, expo, cmp = prop_targets(NumericalCondition(1.5e9, Cmp.LT, "USD"))
    assert unit_classes()[unit] == "USD"
    assert (mant, expo, cmp) == (pytest.approx(1.5), 9.0, 2)


def test_loss_config_validation():
    with pytest.raises(ValueError):
        LossConfig(tau_ret=0.0)
    with pytest.raises(ValueError):
        LossConfig(lambda_det=-1.0)


class TestComputeLosses:
    @pytest.fixture()
    def setup(self):
        rng = np.random.default_rng(11)
        return random_params(rng), random_batch(rng)

    def test_parts_consistent(self, setup):
        params, batch = setup
        cfg = LossConfig()
        res = compute_losses(params, batch, cfg)
        p = res.parts
        assert res.total == pytest.approx(p["ret"] + 0.05 * (p["cont"] + p["det"] + p["prop"]))
        assert p["ret"] == pytest.approx(retrieval_loss_from_scores(res.scores, cfg.tau_ret))
        assert p["prop"] == pytest.approx(p["unit"] + p["mant"] + p["expo"] + p["cond"])

    def test_gradient_layout(self, setup):
        params, batch = setup
        res = compute_losses(params, batch)
        assert res.grad.vector.shape == params.vector.shape
        assert np.all(np.isfinite(res.grad.vector))

    def test_ablation_leaves_heads_untouched(self, setup):
        params, batch = setup
        cfg = LossConfig(gate_enabled=False, lambda_cont=0, lambda_det=0, lambda_prop=0)
        g = compute_losses(params, batch, cfg).grad
        for name in ("det", "gate", "unit", "mant", "expo", "cond"):
            assert not g[f"{name}.W1"].any()

    @pytest.mark.parametrize("strategy", list(Strategy))
    def test_gradients_match_finite_differences(self, setup, strategy):
        params, batch = setup
        worst = check_all(params, batch, LossConfig(strategy=strategy))
        assert max(worst.values()) < 1e-5, worst

    def test_detector_routing_gradients(self, setup):
        params, batch = setup
        worst = check_all(params, batch, LossConfig(teacher_forcing=False, gate_tau=0.3))
        assert max(worst.values()) < 1e-5, worst


def test_shape_matches_unit_table():
    assert SHAPE.n_unit_classes == len(unit_classes())
