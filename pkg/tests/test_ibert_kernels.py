import math

import numpy as np
import pytest

from galasim.ibert import oracle
from galasim.ibert.kernels import (ConfigFault, attention_dot_product, linear,
                                   min_padding, softmax_matmul)
from galasim.ibert.nonlinear import (LN_MID_SCALE, SOFTMAX_OUT_SCALE, gelu_int,
                                     layernorm_int, residual_add, softmax_int)
from galasim.ibert.quant import AccTensor, QuantTensor, requantize

RNG = np.random.default_rng(7)


def rand_q(rows, cols, scale=0.02, rng=RNG):
    return QuantTensor(rng.integers(-128, 128, size=(rows, cols)).astype(np.int8),
                       scale)


class TestLinear:
    def test_hand_example(self):
        x = QuantTensor(np.array([[1, 2]], dtype=np.int8), 1.0)
        w = QuantTensor(np.array([[3], [4]], dtype=np.int8), 1.0)
        out = linear(x, w, np.array([5], dtype=np.int64))
        assert out.data.tolist() == [[16]]

    def test_against_triple_loop_oracle(self):
        for _ in range(25):
            m, h, hp = (int(RNG.integers(1, 17)), int(RNG.integers(1, 65)),
                        int(RNG.integers(1, 33)))
            x, w = rand_q(m, h), rand_q(h, hp, 0.01)
            bias = RNG.integers(-1000, 1000, size=hp)
            got = linear(x, w, bias).data.tolist()
            want = oracle.oracle_linear(x.data.tolist(), w.data.tolist(), bias.tolist())
            assert got == want

    def test_column_partition_concatenates(self):
        x, w = rand_q(6, 32), rand_q(32, 24, 0.01)
        bias = RNG.integers(-99, 99, size=24)
        whole = linear(x, w, bias)
        parts = []
        for lo, hi in ((0, 8), (8, 16), (16, 24)):
            sub = QuantTensor(w.data[:, lo:hi], w.scale)
            parts.append(linear(x, sub, bias[lo:hi]).data)
        assert np.concatenate(parts, axis=1).tolist() == whole.data.tolist()

    def test_row_partition_accumulates(self):
        # splitting the inner dimension and summing partials equals the whole
        x, w = rand_q(4, 32), rand_q(32, 8, 0.01)
        zeros = np.zeros(8, dtype=np.int64)
        whole = linear(x, w, zeros).data
        p1 = linear(QuantTensor(x.data[:, :16], x.scale),
                    QuantTensor(w.data[:16], w.scale), zeros).data
        p2 = linear(QuantTensor(x.data[:, 16:], x.scale),
                    QuantTensor(w.data[16:], w.scale), zeros).data
        assert (p1 + p2).tolist() == whole.tolist()

    def test_dimension_mismatch_rejected(self):
        with pytest.raises(ConfigFault):
            linear(rand_q(2, 3), rand_q(4, 5), np.zeros(5, dtype=np.int64))


class TestMinPadding:
    def test_formula_over_full_grid(self):
        for m in range(1, 257):
            for pe in range(1, 33):
                assert min_padding(m, pe) == pe * math.ceil(m / pe)

    def test_spec_values(self):
        assert min_padding(8, 12) == 12
        assert min_padding(128, 12) == 132

    def test_bad_pe_count(self):
        with pytest.raises(ConfigFault):
            min_padding(4, 0)


class TestAttentionDotProduct:
    def test_padding_is_internal_only(self):
        q, k = rand_q(8, 16), rand_q(8, 16)
        out = attention_dot_product(q, k, num_pe=12)
        assert out.data.shape == (8, 8)

    def test_against_oracle(self):
        for m in (1, 5, 16):
            q, k = rand_q(m, 8), rand_q(m, 8)
            got = attention_dot_product(q, k, num_pe=12).data.tolist()
            want = oracle.oracle_dot_product(q.data.tolist(), k.data.tolist())
            assert got == want

    def test_row_streaming_equals_matrix(self):
        q, k = rand_q(9, 8), rand_q(9, 8)
        whole = attention_dot_product(q, k, 4).data
        rows = [attention_dot_product(q.row(r), k, 4).data[0] for r in range(9)]
        assert np.stack(rows).tolist() == whole.tolist()


class TestSoftmaxMatmul:
    def test_against_oracle(self):
        for m in (1, 7, 12):
            p, v = rand_q(m, m, 0.005), rand_q(m, 6)
            got = softmax_matmul(p, v, num_pe=5).data.tolist()
            want = oracle.oracle_matmul(p.data.tolist(), v.data.tolist())
            assert got == want

    def test_n_partition_then_gather(self):
        p, v = rand_q(10, 10, 0.005), rand_q(10, 12)
        whole = softmax_matmul(p, v, 4).data
        parts = [softmax_matmul(p, QuantTensor(v.data[:, lo:lo + 4], v.scale), 4).data
                 for lo in (0, 4, 8)]
        assert np.concatenate(parts, axis=1).tolist() == whole.tolist()

    def test_row_streaming_equals_matrix(self):
        p, v = rand_q(6, 6, 0.005), rand_q(6, 4)
        whole = softmax_matmul(p, v, 3).data
        rows = [softmax_matmul(p.row(r), v, 3).data[0] for r in range(6)]
        assert np.stack(rows).tolist() == whole.tolist()


class TestSoftmaxInt:
    def test_constant_row_is_uniform(self):
        s = AccTensor(np.full((3, 8), 1234, dtype=np.int32), 5e-5)
        out = softmax_int(s)
        assert out.scale == SOFTMAX_OUT_SCALE
        for row in out.data:
            assert len(set(row.tolist())) == 1
        # uniform probability 1/8 at scale 2**-7 is exactly 16
        assert out.data[0, 0] == 16

    def test_dominant_logit_saturates(self):
        row = np.zeros((1, 8), dtype=np.int32)
        row[0, 3] = 2_000_000   # gap >> scale
        out = softmax_int(AccTensor(row, 5e-5))
        assert out.data[0, 3] == 127
        assert out.data[0, :3].max() == 0

    def test_against_oracle(self):
        for _ in range(40):
            m = int(RNG.integers(1, 13))
            s_in = float(10.0 ** RNG.uniform(-5, -1))
            x = RNG.integers(-2_000_000, 2_000_000, size=(m, m))
            got = softmax_int(AccTensor(x, s_in)).data.tolist()
            want = oracle.oracle_softmax(x.tolist(), s_in)
            assert got == want

    def test_rows_sum_to_one_within_quantization(self):
        for _ in range(10):
            m = int(RNG.integers(2, 17))
            x = RNG.integers(-40000, 40000, size=(m, m))
            out = softmax_int(AccTensor(x, 1e-4))
            sums = out.dequantize().sum(axis=1)
            bound = m * SOFTMAX_OUT_SCALE
            assert np.all(np.abs(sums - 1.0) <= bound)

    def test_tracks_float_softmax(self):
        x = RNG.integers(-60000, 60000, size=(6, 10))
        s_in = 5e-5
        got = softmax_int(AccTensor(x, s_in)).dequantize()
        z = x * s_in
        ref = np.exp(z - z.max(axis=1, keepdims=True))
        ref /= ref.sum(axis=1, keepdims=True)
        assert np.abs(got - ref).max() < 0.02


class TestGeluInt:
    def test_zero_maps_to_zero(self):
        acc = AccTensor(np.zeros((1, 4), dtype=np.int32), 1e-4)
        assert not gelu_int(acc, 0.02).data.any()

    def test_against_oracle(self):
        for _ in range(40):
            rows, cols = int(RNG.integers(1, 9)), int(RNG.integers(1, 17))
            s_in = float(10.0 ** RNG.uniform(-6, -2))
            s_out = float(10.0 ** RNG.uniform(-3, -1))
            x = RNG.integers(-2**24, 2**24, size=(rows, cols))
            got = gelu_int(AccTensor(x, s_in), s_out).data.tolist()
            want = oracle.oracle_gelu(x.tolist(), s_in, s_out)
            assert got == want

    def test_tracks_float_gelu(self):
        x = RNG.integers(-50000, 50000, size=(4, 32))
        s_in, s_out = 1e-4, 0.05
        got = gelu_int(AccTensor(x, s_in), s_out).dequantize()
        z = x * s_in
        ref = z * 0.5 * (1.0 + np.vectorize(math.erf)(z / math.sqrt(2)))
        assert np.abs(got - ref).max() < max(0.02, 2 * s_out)


class TestLayerNormInt:
    def affine(self, cols, rng=RNG):
        gamma = rng.integers(64, 128, size=cols).astype(np.int8)
        gamma_scale = 0.01
        beta = rng.integers(-20000, 20000, size=cols).astype(np.int32)
        return gamma, gamma_scale, beta

    def test_constant_row_normalizes_to_zero_pre_affine(self):
        cols = 16
        gamma, gs, _ = self.affine(cols)
        beta = np.zeros(cols, dtype=np.int32)
        x = AccTensor(np.full((2, cols), 777, dtype=np.int32), 1e-3)
        out = layernorm_int(x, gamma, gs, beta, 0.02)
        assert not out.data.any()

    def test_zero_variance_has_no_division_fault(self):
        cols = 8
        gamma, gs, beta = self.affine(cols)
        x = AccTensor(np.zeros((1, cols), dtype=np.int32), 1e-3)
        out = layernorm_int(x, gamma, gs, beta, 0.02)
        want = np.clip(np.round(beta * (LN_MID_SCALE * gs) / 0.02), -128, 127)
        assert np.abs(out.data - want).max() <= 1

    def test_against_oracle(self):
        for _ in range(40):
            rows, cols = int(RNG.integers(1, 9)), int(RNG.integers(2, 33))
            gamma, gs, beta = self.affine(cols)
            x = RNG.integers(-30000, 30000, size=(rows, cols))
            s_out = float(10.0 ** RNG.uniform(-2, -1))
            got = layernorm_int(AccTensor(x, 1e-3), gamma, gs, beta, s_out).data.tolist()
            want = oracle.oracle_layernorm(x.tolist(), gamma.tolist(), gs,
                                           beta.tolist(), s_out)
            assert got == want

    def test_tracks_float_layernorm(self):
        cols = 64
        gamma = np.full(cols, 100, dtype=np.int8)
        gs = 0.01
        beta = np.zeros(cols, dtype=np.int32)
        x = RNG.integers(-30000, 30000, size=(3, cols))
        out = layernorm_int(AccTensor(x, 1e-3), gamma, gs, beta, 0.05).dequantize()
        z = x.astype(np.float64)
        ref = (z - z.mean(axis=1, keepdims=True)) / z.std(axis=1, keepdims=True)
        assert np.abs(out - ref).max() < 0.1

    def test_preserves_shape(self):
        gamma, gs, beta = self.affine(24)
        x = AccTensor(RNG.integers(-100, 100, size=(5, 24)), 1e-3)
        assert layernorm_int(x, gamma, gs, beta, 0.02).data.shape == (5, 24)


class TestResidualAdd:
    def test_against_oracle(self):
        for _ in range(30):
            rows, cols = int(RNG.integers(1, 7)), int(RNG.integers(1, 17))
            a, b = rand_q(rows, cols, 0.015), rand_q(rows, cols, 0.04)
            common = 0.0005
            got = residual_add(a, b, common).data.tolist()
            want = oracle.oracle_residual_add(a.data.tolist(), a.scale,
                                              b.data.tolist(), b.scale, common)
            assert got == want

    def test_is_approximately_a_sum(self):
        a, b = rand_q(3, 5, 0.02), rand_q(3, 5, 0.02)
        out = residual_add(a, b, 0.001)
        ref = a.dequantize() + b.dequantize()
        assert np.abs(out.dequantize() - ref).max() < 0.002
