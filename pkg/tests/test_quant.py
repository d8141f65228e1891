import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from galasim.ibert import oracle
from galasim.ibert.quant import (AccTensor, ArithmeticFault, QuantTensor,
                                 fixed_point_multiplier, requantize,
                                 rescale_int, rshift_round_half_even)

RNG = np.random.default_rng(0xC0FFEE)


class TestRounding:
    @settings(max_examples=400, deadline=None)
    @given(v=st.integers(-2**62, 2**62), e=st.integers(0, 40))
    def test_half_even_matches_fraction_model(self, v, e):
        from fractions import Fraction
        got = rshift_round_half_even(v, e)
        exact = Fraction(v, 1 << e)
        lo = math.floor(exact)
        frac = exact - lo
        if frac > Fraction(1, 2) or (frac == Fraction(1, 2) and lo % 2):
            lo += 1
        assert got == lo

    def test_negative_shift_is_multiply(self):
        assert rshift_round_half_even(5, -3) == 40


class TestRequantize:
    def test_zero_maps_to_zero_for_any_scale(self):
        for s in (1e-9, 1e-3, 1.0, 37.5):
            acc = AccTensor(np.zeros((2, 3), dtype=np.int32), s)
            assert not requantize(acc, 0.01).data.any()

    def test_saturation_clamps(self):
        acc = AccTensor(np.array([[2**30, -(2**30)]], dtype=np.int64), 1.0)
        q = requantize(acc, 1.0)
        assert q.data.tolist() == [[127, -128]]

    def test_matches_scalar_oracle_on_random_batches(self):
        for _ in range(300):
            rows, cols = int(RNG.integers(1, 9)), int(RNG.integers(1, 17))
            mag = int(RNG.integers(1, 2**30))
            x = RNG.integers(-mag, mag, size=(rows, cols))
            s_in = float(10.0 ** RNG.uniform(-9, 1))
            s_out = float(10.0 ** RNG.uniform(-4, 1))
            acc = AccTensor(x, s_in)
            got = requantize(acc, s_out).data.tolist()
            want = oracle.oracle_requantize(x.tolist(), s_in, s_out)
            assert got == want

    def test_multiplier_agrees_with_oracle(self):
        for ratio in (1e-9, 0.3, 1.0, 256.0, 1e7):
            assert fixed_point_multiplier(ratio) == oracle.oracle_multiplier(ratio)

    def test_bad_scale_rejected(self):
        acc = AccTensor(np.zeros((1, 1), dtype=np.int32), 1.0)
        with pytest.raises(ArithmeticFault):
            requantize(acc, 0.0)


class TestTensors:
    def test_out_of_range_int8_rejected(self):
        with pytest.raises(ArithmeticFault):
            QuantTensor(np.array([[300]]), 1.0)

    def test_acc_overflow_is_a_defect(self):
        with pytest.raises(ArithmeticFault):
            AccTensor(np.array([[2**31]], dtype=np.int64), 1.0)

    def test_scale_must_be_positive(self):
        with pytest.raises(ArithmeticFault):
            QuantTensor(np.zeros((1, 1), dtype=np.int8), -1.0)


class TestRescaleWide:
    def test_large_shift_pre_shifts_instead_of_overflowing(self):
        # ratio so small that e > 37; values wide enough to overflow without it
        vals = np.array([[2**42, -(2**42)]], dtype=np.int64)
        ratio = 1e-7
        got = rescale_int(vals, ratio)
        want = [oracle.oracle_rescale(2**42, ratio),
                oracle.oracle_rescale(-(2**42), ratio)]
        assert got.ravel().tolist() == want
