import itertools
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from fedalign.encoder import ClassDescription, EncoderConfig, EncoderState, build_encoder, make_descriptions
from fedalign.exceptions import ConfigError, ParameterError, ShapeError
from fedalign.lora import LayerWeights
from fedalign.numerics import Rng
from fedalign.objectives import (
    AdamState,
    CEStats,
    ObjectiveConfig,
    adam_step,
    cross_entropy,
    local_loss,
    local_objective,
    orthogonality_penalty,
    predict_probs,
    text_features,
    text_objective,
)

from conftest import local_objective_instance, max_rel_error, numeric_grads, tiny_encoder, unit_rows


def probs_oracle(z, text, tau):
    sims = [sum(a * b for a, b in zip(z, t)) / (math.sqrt(sum(a * a for a in z)) * math.sqrt(sum(b * b for b in t)))
            for t in text]
    e = [math.exp(s / tau) for s in sims]
    return [v / sum(e) for v in e]


class TestPredictProbs:
    def test_single_class(self):
        assert predict_probs(np.array([1.0, 0.0]), np.array([[0.0, 1.0]])).tolist() == [1.0]

    def test_identical_text(self):
        t = np.tile(unit_rows(Rng(0), 1, 5), (4, 1))
        np.testing.assert_allclose(predict_probs(unit_rows(Rng(1), 1, 5)[0], t), [0.25] * 4, atol=1e-15)

    def test_oracle(self):
        rng = Rng(2)
        z, text = unit_rows(rng, 1, 6)[0], unit_rows(rng, 5, 6)
        np.testing.assert_allclose(predict_probs(z, text), probs_oracle(z, text, 2.66), rtol=1e-12)

    def test_batch_sums_to_one(self):
        rng = Rng(3)
        p = predict_probs(unit_rows(rng, 7, 4), unit_rows(rng, 3, 4))
        np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)

    @given(st.integers(0, 10**6), st.permutations(range(4)))
    def test_class_order_equivariance(self, seed, perm):
        rng = Rng(seed)
        z, text = unit_rows(rng, 3, 5), unit_rows(rng, 4, 5)
        perm = list(perm)
        np.testing.assert_allclose(predict_probs(z, text[perm]), predict_probs(z, text)[:, perm], atol=1e-14)

    def test_tau_default(self):
        assert ObjectiveConfig().tau == 2.66
        assert ObjectiveConfig().mu == 0.1


class TestCrossEntropy:
    def test_perfect(self):
        assert cross_entropy(np.eye(3), [0, 1, 2]) == 0.0

    def test_uniform(self):
        assert cross_entropy(np.full((4, 5), 0.2), [0, 1, 2, 3]) == pytest.approx(math.log(5), abs=1e-14)

    def test_loop_oracle(self):
        rng = Rng(4)
        p = rng.uniform(size=(6, 3))
        p /= p.sum(axis=1, keepdims=True)
        y = [0, 2, 1, 1, 0, 2]
        expected = -sum(math.log(p[i, y[i]]) for i in range(6)) / 6
        assert cross_entropy(p, y) == pytest.approx(expected, rel=1e-14)

    def test_floor(self):
        before = CEStats.floor_hits
        loss = cross_entropy(np.array([[1.0, 0.0]]), [1])
        assert loss == pytest.approx(-math.log(1e-30))
        assert CEStats.floor_hits == before + 1

    def test_shape_error(self):
        with pytest.raises(ShapeError):
            cross_entropy(np.eye(2), [0])


class TestOrthogonality:
    def test_one_sample(self):
        assert orthogonality_penalty(np.array([[0.6, 0.8]]), [3]) == pytest.approx(0.0, abs=1e-15)

    def test_orthogonal_means(self):
        assert orthogonality_penalty(np.eye(2), [0, 1]) == 0.0

    def test_identical_means(self):
        assert orthogonality_penalty(np.array([[1.0, 0.0], [1.0, 0.0]]), [0, 1]) == pytest.approx(math.sqrt(2))

    def test_identity_size_is_distinct_labels(self):
        feats = np.array([[1.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
        assert orthogonality_penalty(feats, [0, 0, 7]) == 0.0

    @given(st.integers(1, 4), st.integers(0, 10**6))
    def test_zero_on_orthonormal_means(self, c, seed):
        d = 4
        q, _ = np.linalg.qr(Rng(seed).normal(size=(d, d)))
        rows = q[:c]
        feats = np.repeat(rows, 2, axis=0)
        labels = np.repeat(np.arange(c), 2)
        assert orthogonality_penalty(feats, labels) == pytest.approx(0.0, abs=1e-12)

    @given(st.integers(2, 4), st.integers(0, 10**6))
    def test_positive_when_not_orthonormal(self, c, seed):
        # two unit features of the same class that disagree give a mean of norm < 1
        feats = unit_rows(Rng(seed), 2 * c, 4)
        labels = np.repeat(np.arange(c), 2)
        means = np.stack([feats[labels == k].mean(axis=0) for k in range(c)])
        off = np.linalg.norm(means @ means.T - np.eye(c))
        assert orthogonality_penalty(feats, labels) == pytest.approx(off, abs=1e-12)
        if off > 1e-9:
            assert orthogonality_penalty(feats, labels) > 0


class TestLocalObjective:
    def test_mu_zero_is_ce(self):
        enc, x, y, text, _ = local_objective_instance(0)
        loss, _, aux = local_objective(x, y, enc, text, ObjectiveConfig(mu=0.0))
        assert loss == cross_entropy(aux["probs"], y)

    def test_includes_penalty(self):
        enc, x, y, text, cfg = local_objective_instance(1)
        loss, _, aux = local_objective(x, y, enc, text, cfg)
        assert loss == pytest.approx(aux["ce"] + 0.1 * orthogonality_penalty(aux["embeddings"], y), abs=1e-14)
        assert loss == pytest.approx(local_loss(x, y, enc, text, cfg), abs=1e-14)

    @pytest.mark.parametrize("seed", range(4))
    def test_gradients(self, seed):
        enc, x, y, text, cfg = local_objective_instance(seed)
        _, grads, _ = local_objective(x, y, enc, text, cfg)
        numeric = numeric_grads(lambda: local_loss(x, y, enc, text, cfg), enc)
        assert max_rel_error(grads, numeric) < 1e-4

    def test_missing_text_feature(self):
        enc, x, y, text, cfg = local_objective_instance(0)
        with pytest.raises(ParameterError):
            local_objective(x, y + 5, enc, text, cfg)

    def test_decreases_with_defaults(self):
        cfg = EncoderConfig()
        root = Rng(21)
        enc = build_encoder(cfg, root.split("backbone"), root.split("lora"))
        rng = root.split("batch")
        centers = rng.normal(0.0, 3.0, size=(4, cfg.d_in))
        y = np.repeat(np.arange(4), 16)
        x = centers[y] + rng.normal(size=(64, cfg.d_in))
        text = unit_rows(rng, 4, cfg.d_embed)
        state = AdamState()
        losses = []
        for _ in range(50):
            loss, grads, _ = local_objective(x, y, enc, text, ObjectiveConfig())
            losses.append(loss)
            adam_step(enc.params(), grads, state)
            enc.touch()
        assert all(b <= a + 1e-6 for a, b in zip(losses[5:], losses[6:]))
        assert losses[-1] < losses[0]


def identity_text_encoder(d):
    cfg = EncoderConfig(num_blocks=1, d_in=d, d_hidden=d, d_embed=d, activation="identity",
                        lora_start=1, rank=1)
    return EncoderState(cfg, [LayerWeights(np.eye(d))], np.eye(d))


class TestTextObjective:
    def test_closed_form(self):
        C = 4
        descs = [ClassDescription(c, "ST", [np.eye(C)[c]]) for c in range(C)]
        enc = identity_text_encoder(C)
        loss, grads, _ = text_objective(np.eye(C)[[2]], [2], enc, descs, ObjectiveConfig(tau=1.0, mu=0.0))
        assert loss == pytest.approx(-math.log(math.e / (math.e + C - 1)), abs=1e-14)
        assert grads == []

    def test_zero_init_is_zero_shot(self):
        cfg = EncoderConfig(num_blocks=3, d_in=8, d_hidden=8, d_embed=8, lora_start=1, rank=2)
        enc = build_encoder(cfg, Rng(0).split("b"), Rng(0).split("l"))
        frozen = build_encoder(cfg, Rng(0).split("b"))
        descs = make_descriptions(3, "GT", 3, 8, Rng(1))
        feats = unit_rows(Rng(2), 5, 8)
        y = np.array([0, 1, 2, 0, 1])
        ocfg = ObjectiveConfig(mu=0.0)
        loss, _, _ = text_objective(feats, y, enc, descs, ocfg)
        t0 = text_features(frozen, descs)
        assert np.array_equal(text_features(enc, descs), t0)
        assert loss == cross_entropy(predict_probs(feats, t0, ocfg), y)

    @pytest.mark.parametrize("seed", range(3))
    def test_gradients(self, seed):
        enc = tiny_encoder(seed, lora_start=1)
        descs = make_descriptions(3, "GT", 3, 8, Rng(seed).split("d"))
        feats = unit_rows(Rng(seed).split("f"), 6, 8)
        y = np.arange(6) % 3
        ocfg = ObjectiveConfig(mu=0.0)
        _, grads, _ = text_objective(feats, y, enc, descs, ocfg)
        numeric = numeric_grads(lambda: text_objective(feats, y, enc, descs, ocfg)[0], enc)
        assert max_rel_error(grads, numeric) < 1e-4

    def test_unknown_label(self):
        enc = tiny_encoder(0)
        descs = make_descriptions(2, "ST", 1, 8, Rng(0))
        with pytest.raises(ConfigError):
            text_objective(unit_rows(Rng(1), 1, 8), [5], enc, descs, ObjectiveConfig())


class TestAdam:
    def test_lr_zero(self):
        p = [Rng(0).normal(size=(2, 3))]
        before = p[0].copy()
        adam_step(p, [np.ones((2, 3))], AdamState(lr=0.0))
        assert np.array_equal(p[0], before)

    def test_first_step_closed_form(self):
        g = np.array([[0.5, -2.0, 1e-3]])
        p = [np.zeros_like(g)]
        adam_step(p, [g], AdamState(lr=1e-3))
        # after bias correction m_hat = g and v_hat = g**2
        expected = -1e-3 * g / (np.abs(g) + 1e-8)
        np.testing.assert_allclose(p[0], expected, rtol=1e-12)

    def test_determinism(self):
        def run():
            rng = Rng(5)
            p = [rng.normal(size=(3,)), rng.normal(size=(2, 2))]
            st_ = AdamState()
            for _ in range(10):
                adam_step(p, [rng.normal(size=(3,)), rng.normal(size=(2, 2))], st_)
            return p
        a, b = run(), run()
        assert all(np.array_equal(x, y) for x, y in zip(a, b))

    def test_mismatch(self):
        with pytest.raises(ShapeError):
            adam_step([np.zeros(2)], [np.zeros(2), np.zeros(2)], AdamState())
        with pytest.raises(ShapeError):
            adam_step([np.zeros(2)], [np.zeros(3)], AdamState())

    def test_constants(self):
        s = AdamState()
        assert (s.lr, s.beta1, s.beta2, s.eps) == (1e-3, 0.9, 0.999, 1e-8)
