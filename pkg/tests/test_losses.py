import math

import numpy as np
import pytest

from fuselab import tensor as T
from fuselab.errors import ContractError, DegenerateInputError
from fuselab.losses import LmclParams, bce_loss, cosine_logits, lmcl_loss, softmax_cross_entropy
from fuselab.tensor import Tensor

from helpers import gradcheck, leaf


class TestBceLoss:
    def test_half_probability(self):
        probs = Tensor([[0.5, 0.5]])
        assert abs(bce_loss(probs, [1]).item() - math.log(2.0)) <= 1e-12

    def test_certain_correct_prediction(self):
        probs = Tensor([[0.0, 1.0]])
        # p is clamped to 1 - 1e-12 before the log
        assert abs(bce_loss(probs, [1]).item()) <= 1e-11

    def test_batch_mean(self):
        probs = Tensor([[0.5, 0.5], [1.0, 0.0]])
        got = bce_loss(probs, [1, 0]).item()
        assert abs(got - 0.346574) <= 1e-6
        assert abs(got - math.log(2.0) / 2) <= 1e-11

    def test_label_outside_01_rejected(self):
        with pytest.raises(ContractError):
            bce_loss(Tensor([[0.5, 0.5]]), [2])

    def test_nonnegative_and_zero_iff_certain(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            p1 = rng.uniform(1e-6, 1 - 1e-6, size=8)
            probs = Tensor(np.stack([1 - p1, p1], axis=1))
            labels = list(rng.integers(0, 2, size=8))
            val = bce_loss(probs, labels).item()
            assert val >= 0.0
        certain = Tensor(np.array([[1.0, 0.0], [0.0, 1.0]]))
        assert bce_loss(certain, [0, 1]).item() <= 1e-11

    def test_clamp_avoids_infinity(self):
        val = bce_loss(Tensor([[1.0, 0.0]]), [1]).item()
        assert math.isfinite(val)
        assert abs(val - -math.log(1e-12)) <= 1e-6

    def test_gradcheck(self):
        rng = np.random.default_rng(1)
        logits = leaf(rng, (6, 2), lo=-2, hi=2)
        labels = list(rng.integers(0, 2, size=6))

        def loss():
            return bce_loss(T.softmax(logits), labels)

        gradcheck(loss, [logits])


class TestLmclLoss:
    def test_aligned_feature_hand_value(self):
        # feature on its own anchor (cos=1), other anchor orthogonal (cos=0)
        params = LmclParams(s=2.0, m=0.5, class_weights=Tensor([[1.0, 0.0], [0.0, 1.0]]))
        features = Tensor([[3.0, 0.0]])  # scale must not matter
        got = lmcl_loss(features, params, [0]).item()
        assert abs(got - math.log(1.0 + math.exp(-1.0))) <= 1e-12
        assert abs(got - 0.313262) <= 1e-6

    def test_equal_cosines_hand_value(self):
        # both anchors at 45 degrees from the feature: cos is equal for both classes
        params = LmclParams(s=4.0, m=0.25, class_weights=Tensor([[1.0, 1.0], [1.0, -1.0]]))
        features = Tensor([[1.0, 0.0]])
        got = lmcl_loss(features, params, [1]).item()
        assert abs(got - math.log(1.0 + math.e)) <= 1e-12
        assert abs(got - 1.313262) <= 1e-6

    def test_zero_margin_reduces_to_softmax_cross_entropy(self):
        rng = np.random.default_rng(2)
        for trial in range(10):
            n, d, k = 5, 7, 2
            feats = rng.standard_normal((n, d))
            anchors = rng.standard_normal((k, d))
            labels = list(rng.integers(0, k, size=n))
            params = LmclParams(s=rng.uniform(1, 40), m=0.0, class_weights=Tensor(anchors))
            got = lmcl_loss(Tensor(feats), params, labels).item()
            want = softmax_cross_entropy(cosine_logits(Tensor(feats), params), labels).item()
            assert abs(got - want) <= 1e-12

    def test_invariant_under_positive_feature_rescaling(self):
        rng = np.random.default_rng(3)
        feats = rng.standard_normal((4, 6))
        params = LmclParams(s=30.0, m=0.35, class_weights=Tensor(rng.standard_normal((2, 6))))
        labels = [0, 1, 1, 0]
        base = lmcl_loss(Tensor(feats), params, labels).item()
        for c in (1e-3, 0.5, 7.0, 1e3):
            scaled = lmcl_loss(Tensor(feats * c), params, labels).item()
            assert abs(scaled - base) <= 1e-9

    def test_zero_norm_feature_rejected(self):
        params = LmclParams(s=30.0, m=0.35, class_weights=Tensor(np.eye(2)))
        with pytest.raises(DegenerateInputError):
            lmcl_loss(Tensor(np.zeros((1, 2))), params, [0])

    def test_zero_norm_anchor_rejected(self):
        params = LmclParams(s=30.0, m=0.35, class_weights=Tensor([[1.0, 0.0], [0.0, 0.0]]))
        with pytest.raises(DegenerateInputError):
            lmcl_loss(Tensor([[1.0, 1.0]]), params, [0])

    def test_invalid_hyperparameters_rejected(self):
        with pytest.raises(ContractError):
            LmclParams(s=-1.0, m=0.35, class_weights=Tensor(np.eye(2)))
        with pytest.raises(ContractError):
            LmclParams(s=30.0, m=1.0, class_weights=Tensor(np.eye(2)))

    def test_gradcheck_features_and_anchors(self):
        rng = np.random.default_rng(4)
        feats = leaf(rng, (5, 6), lo=0.5, hi=2.0)
        anchors = leaf(rng, (2, 6), lo=0.5, hi=2.0)
        labels = list(rng.integers(0, 2, size=5))

        def loss():
            return lmcl_loss(feats, LmclParams(s=8.0, m=0.2, class_weights=anchors), labels)

        gradcheck(loss, [feats, anchors])
