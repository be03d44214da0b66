import math

import numpy as np
import pytest
from helpers import ref_backward, ref_code, ref_normalizer
from hypothesis import given, settings
from hypothesis import strategies as st

from metaquant import tensor as T
from metaquant.errors import NumericError, ParameterError, ShapeError
from metaquant.quantizer import (
    ASYMMETRIC,
    ASYMMETRIC_ROUND,
    CLIP_SHARED,
    MODES,
    SYMMETRIC,
    clip_codes,
    clip_quant_forward,
    code_range,
    derive_codes,
    derive_lower_bit_codes,
    init_scale,
    max_level,
    quant_backward,
    quant_forward,
    quantize,
)
from metaquant.tensor import Tensor

F32 = np.float32


class TestMaxLevel:
    def test_values(self):
        assert max_level(4) == 7
        assert max_level(3) == 3
        assert max_level(2) == 1
        assert max_level(1) == 1

    @pytest.mark.parametrize("b", [0, 5, -1, 2.0, True])
    def test_out_of_range(self, b):
        with pytest.raises(ParameterError):
            max_level(b)

    def test_code_ranges(self):
        assert code_range(3, SYMMETRIC) == (-3, 3)
        assert code_range(3, ASYMMETRIC) == (-4, 3)
        assert code_range(1, ASYMMETRIC) == (-1, 1)


class TestForwardExamples:
    def test_interior(self):
        xt, c = quant_forward(np.array([3.7], F32), 1.0, 4)
        assert c[0] == 3 and xt[0] == 3.0

    def test_saturation(self):
        xt, c = quant_forward(np.array([100.0], F32), 1.0, 2)
        assert c[0] == 1 and xt[0] == 1.0

    def test_sign(self):
        xt, c = quant_forward(np.array([-0.2], F32), 0.5, 1)
        assert c[0] == -1 and xt[0] == -0.5

    def test_sign_of_zero_is_positive(self):
        _, c = quant_forward(np.array([0.0, -0.0], F32), 1.0, 1)
        assert list(c) == [1, 1]

    def test_ternary_and_binary_codebooks(self):
        x = np.linspace(-5, 5, 1001).astype(F32)
        assert set(quant_forward(x, 0.7, 2)[1]) == {-1, 0, 1}
        assert set(quant_forward(x, 0.7, 1)[1]) == {-1, 1}

    def test_round_mode_half_up(self):
        _, c = quant_forward(np.array([0.5, -0.5, 1.49, -1.5], F32), 1.0, 3, ASYMMETRIC_ROUND)
        assert list(c) == [1, 0, 1, -1]

    def test_bad_scale(self):
        with pytest.raises(ParameterError):
            quant_forward(np.ones(3, F32), 0.0, 2)
        with pytest.raises(ParameterError):
            quant_forward(np.ones(3, F32), -1.0, 2)

    def test_non_finite(self):
        with pytest.raises(NumericError):
            quant_forward(np.array([np.nan], F32), 1.0, 2)
        with pytest.raises(NumericError):
            quant_forward(np.array([np.inf], F32), 1.0, 2)

    def test_unknown_mode(self):
        with pytest.raises(ParameterError):
            quant_forward(np.ones(2, F32), 1.0, 2, "bogus")


class TestForwardOracle:
    @pytest.mark.parametrize("mode", MODES)
    @pytest.mark.parametrize("alpha", [0.3, 1.0, 2.7])
    def test_grid_matches_scalar_reference(self, mode, alpha):
        x = (np.arange(-1000, 1001) / 100.0).astype(F32)
        for b in (1, 2, 3, 4):
            xt, codes = quant_forward(x, alpha, b, mode)
            ref = np.array([ref_code(v, alpha, b, mode) for v in x])
            assert np.array_equal(codes, ref), (mode, alpha, b)
            assert np.array_equal(xt, ref.astype(F32) * F32(alpha))


class TestForwardProperties:
    @settings(max_examples=60, deadline=None)
    @given(
        st.lists(st.floats(-1e6, 1e6, allow_nan=False, width=32), min_size=1, max_size=50),
        st.floats(1e-3, 100.0),
        st.integers(1, 4),
        st.sampled_from(MODES),
    )
    def test_range_and_monotonicity(self, xs, alpha, b, mode):
        x = np.sort(np.array(xs, dtype=F32))
        xt, codes = quant_forward(x, alpha, b, mode)
        lo, hi = code_range(b, SYMMETRIC if mode == CLIP_SHARED else mode)
        assert codes.min() >= lo and codes.max() <= hi
        if b == 1:
            assert 0 not in codes
        assert np.all(np.diff(xt) >= 0)

    @pytest.mark.parametrize("b", [2, 3, 4])
    def test_idempotent_on_lattice(self, b):
        alpha = F32(0.25)
        m = max_level(b)
        lattice = (np.arange(-m, m + 1) * alpha).astype(F32)
        xt, _ = quant_forward(lattice, alpha, b)
        assert np.array_equal(xt, lattice)


class TestBackward:
    @pytest.mark.parametrize("mode", MODES)
    @pytest.mark.parametrize("b", [1, 2, 3, 4])
    def test_matches_scalar_surrogate(self, mode, b):
        rng = np.random.default_rng(b * 7 + MODES.index(mode))
        alpha = 0.8
        x = (rng.standard_normal(1000) * 4).astype(F32)
        up = rng.standard_normal(1000).astype(F32)
        dx, da = quant_backward(up, x, alpha, b, mode)
        ref = [ref_backward(float(u), v, alpha, b, mode, x.size) for u, v in zip(up, x)]
        ref_dx = np.array([r[0] for r in ref])
        ref_da = math.fsum(r[1] for r in ref) * ref_normalizer(x.size, b, mode)
        np.testing.assert_allclose(dx, ref_dx, rtol=0, atol=1e-6)
        assert abs(da - ref_da) <= 1e-6 * max(1.0, abs(ref_da))

    def test_pass_through_inside(self):
        x = np.array([0.5, -2.3, 6.9], F32)
        up = np.array([1.5, -2.0, 3.0], F32)
        dx, _ = quant_backward(up, x, 1.0, 4)
        assert np.array_equal(dx, up)

    def test_saturation_branch(self):
        m, alpha = 7, 1.0
        x = np.array([m + 5.0], F32)
        dx, da = quant_backward(np.array([2.0], F32), x, alpha, 4)
        assert dx[0] == 0
        assert da == pytest.approx(2.0 * m / math.sqrt(1 * m))

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            quant_backward(np.ones(3, F32), np.ones(4, F32), 1.0, 2)

    def test_tape_op_agrees_with_functional(self):
        rng = np.random.default_rng(3)
        x = Tensor(rng.standard_normal((4, 5)) * 3, requires_grad=True)
        a = Tensor(F32(0.6), requires_grad=True)
        up = rng.standard_normal((4, 5)).astype(F32)
        out = quantize(x, a, 3)
        T.backward(out, up)
        T.get_tape().clear()
        dx, da = quant_backward(up, x.data, 0.6, 3)
        np.testing.assert_allclose(x.grad, dx, atol=1e-7)
        assert float(a.grad) == pytest.approx(da, rel=1e-5)


class TestClipAndNesting:
    def test_clip_examples(self):
        assert clip_codes(np.array([7]), 2)[0] == 1
        assert clip_codes(np.array([-3]), 3)[0] == -3

    def test_clip_grid(self):
        codes = np.arange(-7, 8)
        for b in (1, 2, 3, 4):
            out = clip_codes(codes, b)
            m = max_level(b)
            if b == 1:
                ref = np.where(codes >= 0, 1, -1)
            else:
                ref = np.clip(codes, -m, m)
            assert np.array_equal(out, ref)

    def test_clip_quant_forward(self):
        out = clip_quant_forward(np.array([7, -5, 2]), 0.5, 2)
        np.testing.assert_array_equal(out, [0.5, -0.5, 0.5])
        with pytest.raises(ParameterError):
            clip_quant_forward(np.array([1]), 1.0, 5, n=4)

    def test_derive_examples(self):
        assert derive_lower_bit_codes(np.array([6]), 4)[0] == 3
        assert derive_lower_bit_codes(np.array([-7]), 4)[0] == -3

    def test_derive_refuses_untied(self):
        with pytest.raises(ParameterError, match="tied"):
            derive_lower_bit_codes(np.array([1]), 4, tie_scales=False)

    def test_derive_refuses_round(self):
        with pytest.raises(ParameterError):
            derive_lower_bit_codes(np.array([1]), 4, mode=ASYMMETRIC_ROUND)

    @pytest.mark.parametrize("mode", [SYMMETRIC, ASYMMETRIC])
    def test_nesting_on_dense_grid(self, mode):
        x = (np.arange(-4000, 4001) / 300.0).astype(F32)
        alpha4 = F32(0.37)
        _, c4 = quant_forward(x, alpha4, 4, mode)
        codes = c4
        for b in (3, 2, 1):
            codes = derive_lower_bit_codes(codes, b + 1, True, mode)
            _, direct = quant_forward(x, alpha4 * F32(2 ** (4 - b)), b, mode)
            assert np.array_equal(codes, direct), b
            assert np.array_equal(derive_codes(c4, b, 4, mode), direct)


class TestInitScale:
    def test_formula(self):
        x = np.array([1.0, -3.0, 2.0], F32)
        assert init_scale(x, 3) == pytest.approx(2 * 2.0 / math.sqrt(3))
        assert init_scale(x, 1) == pytest.approx(4.0)

    def test_zero_input_is_floored(self):
        assert init_scale(np.zeros(4, F32), 2) > 0
