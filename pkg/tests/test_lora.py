import math
import struct

import numpy as np
import pytest
from hypothesis import given, strategies as st

from fedalign.exceptions import FormatError, ParameterError, ShapeError
from fedalign.lora import (
    DenseDelta,
    LayerWeights,
    LoraDelta,
    compose_weight,
    deserialize_delta,
    effective_delta,
    factored_average,
    init_lora,
    linear_combine,
    lora_param_count,
    serialize_delta,
    stack_param_count,
    total_delta,
)
from fedalign.numerics import Rng


class TestInit:
    def test_fresh_delta_is_zero(self):
        d = init_lora(6, 5, 3, 0.25, Rng(0))
        assert np.array_equal(effective_delta(d).w, np.zeros((6, 5)))

    def test_shapes(self):
        d = init_lora(4, 4, 2, 0.25, Rng(0))
        assert d.a.shape == (2, 4) and d.b.shape == (4, 2)

    def test_same_stream_same_a(self):
        assert np.array_equal(init_lora(4, 7, 2, 0.25, Rng(5).split("x")).a,
                              init_lora(4, 7, 2, 0.25, Rng(5).split("x")).a)

    def test_kaiming_bound(self):
        d = init_lora(8, 24, 4, 0.25, Rng(1))
        assert np.abs(d.a).max() <= math.sqrt(6 / 24)

    def test_bad_rank(self):
        with pytest.raises(ParameterError):
            init_lora(3, 5, 4, 0.25, Rng(0))

    def test_bad_gamma(self):
        with pytest.raises(ParameterError):
            LoraDelta(np.ones((1, 2)), np.ones((2, 1)), gamma=0.0)


class TestEffectiveAndCompose:
    def test_rank1_quarter(self):
        d = LoraDelta(a=np.array([[1.0, 0.0, 0.0]]), b=np.array([[1.0], [0.0]]), gamma=0.25)
        expected = np.zeros((2, 3))
        expected[0, 0] = 0.25
        assert np.array_equal(effective_delta(d).w, expected)

    def test_random_oracle(self):
        rng = Rng(2)
        a, b = rng.normal(size=(3, 5)), rng.normal(size=(4, 3))
        w = effective_delta(LoraDelta(a, b, 0.25)).w
        for i in range(4):
            for j in range(5):
                assert w[i, j] == pytest.approx(0.25 * sum(b[i, k] * a[k, j] for k in range(3)), abs=1e-13)

    def test_fresh_layer_is_w0(self):
        w0 = Rng(3).normal(size=(4, 4))
        layer = LayerWeights(w0, lora=init_lora(4, 4, 2, 0.25, Rng(4)))
        assert np.array_equal(compose_weight(layer), w0)

    def test_offset_only(self):
        rng = Rng(5)
        w0, off = rng.normal(size=(3, 2)), rng.normal(size=(3, 2))
        assert np.array_equal(compose_weight(LayerWeights(w0, DenseDelta(off))), w0 + off)

    def test_naive_sum_oracle(self):
        rng = Rng(6)
        w0, off = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
        lora = LoraDelta(rng.normal(size=(2, 4)), rng.normal(size=(3, 2)), 0.25)
        layer = LayerWeights(w0, DenseDelta(off), lora)
        naive = [[w0[i][j] + off[i][j] + 0.25 * sum(lora.b[i][k] * lora.a[k][j] for k in range(2))
                  for j in range(4)] for i in range(3)]
        np.testing.assert_allclose(compose_weight(layer), naive, rtol=0, atol=1e-13)
        np.testing.assert_allclose(total_delta(layer).w, compose_weight(layer) - w0, atol=1e-14)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            LayerWeights(np.ones((2, 2)), DenseDelta(np.ones((3, 2))))


class TestLinearCombine:
    def _deltas(self, seed, k=3, shape=(3, 2)):
        rng = Rng(seed)
        return [DenseDelta(rng.normal(size=shape)) for _ in range(k)]

    def test_one_hot(self):
        ds = self._deltas(0)
        assert np.array_equal(linear_combine(ds, [0.0, 1.0, 0.0]).w, ds[1].w)

    def test_uniform_mean(self):
        ds = self._deltas(1, k=4)
        np.testing.assert_allclose(linear_combine(ds, [0.25] * 4).w,
                                   np.mean([d.w for d in ds], axis=0), atol=1e-15)

    def test_scalar_loop_oracle(self):
        ds = self._deltas(2, k=5)
        c = Rng(3).uniform(size=5)
        out = linear_combine(ds, c).w
        for i in range(3):
            for j in range(2):
                assert out[i, j] == pytest.approx(sum(c[k] * ds[k].w[i, j] for k in range(5)), abs=1e-14)

    def test_length_mismatch(self):
        with pytest.raises(ShapeError):
            linear_combine(self._deltas(0), [1.0, 0.0])

    @given(st.integers(1, 5), st.integers(0, 10**6))
    def test_additive_composability(self, k, seed):
        rng = Rng(seed)
        w0 = rng.normal(size=(3, 4))
        ds = [DenseDelta(rng.normal(size=(3, 4))) for _ in range(k)]
        c = rng.uniform(size=k)
        c /= c.sum()
        composed = compose_weight(LayerWeights(w0, linear_combine(ds, c)))
        separate = linear_combine([DenseDelta(compose_weight(LayerWeights(w0, d))) for d in ds], c).w
        np.testing.assert_allclose(composed, separate, atol=1e-12)

    def test_factored_average_is_biased(self):
        rng = Rng(4)
        ds = [LoraDelta(rng.normal(size=(2, 4)), rng.normal(size=(3, 2)), 0.25) for _ in range(2)]
        exact = linear_combine([effective_delta(d) for d in ds], [0.5, 0.5]).w
        approx = effective_delta(factored_average(ds, [0.5, 0.5])).w
        assert not np.allclose(exact, approx)


class TestCounts:
    def test_512(self):
        assert lora_param_count(512, 512, 4) == 4096

    def test_linear_in_rank(self):
        assert lora_param_count(30, 17, 6) == 2 * lora_param_count(30, 17, 3)

    def test_stack(self):
        assert stack_param_count([(512, 512)] * 12, 4, 2) == 40960

    @given(st.integers(1, 64), st.integers(1, 64), st.integers(1, 16))
    def test_formula(self, d1, d2, r):
        assert lora_param_count(d1, d2, r) == r * (d1 + d2)

    def test_monotone_trends(self):
        shapes = [(32, 16)] + [(32, 32)] * 11
        by_l = [stack_param_count(shapes, 4, l) for l in range(12)]
        assert all(a > b for a, b in zip(by_l, by_l[1:]))
        by_r = [stack_param_count(shapes, r, 2) for r in range(1, 9)]
        assert all(a < b for a, b in zip(by_r, by_r[1:]))


class TestSerialization:
    def test_round_trip_lora(self):
        rng = Rng(7)
        d = LoraDelta(rng.normal(size=(3, 5)), rng.normal(size=(4, 3)), 0.25)
        back = deserialize_delta(serialize_delta(d))
        assert isinstance(back, LoraDelta)
        assert np.array_equal(back.a, d.a) and np.array_equal(back.b, d.b) and back.gamma == 0.25

    def test_round_trip_dense(self):
        d = DenseDelta(Rng(8).normal(size=(2, 6)))
        back = deserialize_delta(serialize_delta(d))
        assert isinstance(back, DenseDelta) and np.array_equal(back.w, d.w)

    def test_layout(self):
        blob = serialize_delta(DenseDelta(np.array([[1.5, -2.0]])))
        assert blob[:4] == b"FALD"
        assert struct.unpack_from("<HH", blob, 4) == (1, 1)
        assert struct.unpack_from("<II", blob, 8) == (1, 2)
        assert struct.unpack_from("<dd", blob, 16) == (1.5, -2.0)
        assert struct.unpack_from("<d", blob, 32) == (1.0,)
        assert len(blob) == 40

    @given(st.integers(1, 6), st.integers(1, 6), st.integers(0, 10**6))
    def test_round_trip_property(self, d1, d2, seed):
        w = Rng(seed).normal(size=(d1, d2)) * 1e3
        assert np.array_equal(deserialize_delta(serialize_delta(DenseDelta(w))).w, w)

    def test_truncated(self):
        blob = serialize_delta(DenseDelta(np.ones((3, 3))))
        for cut in (2, 10, len(blob) - 9, len(blob) - 1):
            with pytest.raises(FormatError):
                deserialize_delta(blob[:cut])

    def test_header_dims_mismatch(self):
        blob = bytearray(serialize_delta(DenseDelta(np.ones((3, 3)))))
        struct.pack_into("<II", blob, 8, 2, 3)
        with pytest.raises(FormatError):
            deserialize_delta(bytes(blob))

    def test_bad_magic(self):
        blob = b"XXXX" + serialize_delta(DenseDelta(np.ones((1, 1))))[4:]
        with pytest.raises(FormatError):
            deserialize_delta(blob)
