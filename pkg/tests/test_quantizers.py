"""Uniform and logarithmic quantizer correctness.

Hand-derived cases evaluate the quantizer definitions directly; property
loops use seeded random samples.
"""

import math

import numpy as np
import pytest

from vitpq import quantizers as Q
from vitpq.errors import CalibrationError, ContractError, DomainError


class TestUniformCalibrate:
    def test_grid_0_to_100(self):
        samples = np.arange(101, dtype=np.float64)
        qp = Q.uniform_calibrate(samples, bits=2, percentile=100.0)
        np.testing.assert_allclose(qp.scale, 100.0 / 3.0)
        assert qp.zero_point == 0

    def test_constant_zero_gets_scale_floor_and_exact_roundtrip(self):
        qp = Q.uniform_calibrate(np.zeros(16), bits=4)
        assert qp.scale == Q.SCALE_FLOOR
        np.testing.assert_array_equal(Q.fake_quant(np.zeros(16), qp), np.zeros(16))

    @pytest.mark.parametrize("c", [3.25, -1.5, 1e-9])
    @pytest.mark.parametrize("bits", [1, 2, 4, 8])
    def test_constant_samples_roundtrip_within_half_step(self, c, bits):
        qp = Q.uniform_calibrate(np.full(8, c), bits=bits)
        err = abs(float(Q.fake_quant(np.array([c]), qp)[0]) - c)
        assert err <= float(qp.scale) / 2.0

    def test_p100_is_min_max(self):
        samples = np.array([-3.0, -1.0, 0.5, 7.0])
        qp = Q.uniform_calibrate(samples, bits=4, percentile=100.0)
        np.testing.assert_allclose(qp.scale, 10.0 / 15.0)

    def test_percentile_tail_symmetric(self):
        # 10001 points spaced 0.01: the 99th percentile interpolates to 49.0
        samples = np.linspace(-50.0, 50.0, 10001)
        qp = Q.uniform_calibrate(samples, bits=8, percentile=99.0)
        np.testing.assert_allclose(qp.scale, 2 * 49.0 / 255.0, rtol=1e-12)

    def test_empty_samples_rejected(self):
        with pytest.raises(CalibrationError):
            Q.uniform_calibrate(np.zeros((0,)), bits=4)

    def test_zero_point_always_in_code_range(self):
        rng = np.random.default_rng(7)
        for _ in range(200):
            lo = rng.uniform(-100, 100)
            width = rng.uniform(0, 50)
            samples = rng.uniform(lo, lo + width, size=64)
            for bits in (2, 4, 8):
                qp = Q.uniform_calibrate(samples, bits=bits)
                assert 0 <= int(qp.zero_point) <= qp.qmax

    def test_per_channel_granularity(self):
        batch = np.stack([np.linspace(0, 3, 7), np.linspace(0, 30, 7)], axis=-1)
        qp = Q.uniform_calibrate(batch, bits=2, granularity=Q.PER_CHANNEL)
        np.testing.assert_allclose(qp.scale, [1.0, 10.0])


class TestUniformQuantDequant:
    def _qp(self, s=1.0, z=1, bits=2):
        return Q.QuantParams(Q.UNIFORM, bits, Q.PER_LAYER, np.asarray(s), np.asarray(z))

    def test_hand_case(self):
        q = Q.uniform_quant(np.array([-1.0, 0.5, 2.0]), self._qp())
        np.testing.assert_array_equal(q, [0, 2, 3])

    def test_lattice_points_fixed(self):
        qp = self._qp(s=0.37, z=2, bits=3)
        k = np.arange(0, qp.qmax + 1)
        x = 0.37 * (k - 2)
        np.testing.assert_array_equal(Q.uniform_quant(x, qp), k)

    def test_saturation(self):
        assert Q.uniform_quant(np.array([1e9]), self._qp())[0] == 3

    def test_dequant_hand_case(self):
        out = Q.uniform_dequant(np.array([0, 2, 3]), self._qp())
        np.testing.assert_array_equal(out, [-1.0, 1.0, 2.0])

    def test_dequant_zero_code_zero_zp(self):
        qp = Q.QuantParams(Q.UNIFORM, 2, Q.PER_LAYER, np.asarray(1.0), np.asarray(0))
        assert Q.uniform_dequant(np.array([0]), qp)[0] == 0.0

    def test_dequant_out_of_range_rejected(self):
        with pytest.raises(ContractError):
            Q.uniform_dequant(np.array([4]), self._qp())

    def test_roundtrip_bound_inside_range(self):
        rng = np.random.default_rng(11)
        for _ in range(50):
            samples = rng.uniform(-5, 5, size=256)
            qp = Q.uniform_calibrate(samples, bits=4)
            lo = float(qp.scale * (0 - qp.zero_point))
            hi = float(qp.scale * (qp.qmax - qp.zero_point))
            x = rng.uniform(lo, hi, size=512)
            err = np.abs(Q.fake_quant(x, qp) - x)
            assert err.max() <= float(qp.scale) / 2.0 + 1e-15

    def test_monotone(self):
        rng = np.random.default_rng(13)
        qp = Q.uniform_calibrate(rng.uniform(-3, 3, 128), bits=3)
        x = np.sort(rng.uniform(-6, 6, 500))
        fq = Q.fake_quant(x, qp)
        assert np.all(np.diff(fq) >= 0)


class TestLogQuantizers:
    def test_scale_input_maps_to_zero_code(self):
        for scheme in (Q.LOG2, Q.LOGSQRT2):
            qp = Q.QuantParams(scheme, 4, Q.PER_LAYER, np.asarray(0.7))
            assert Q.log_quant(np.array([0.7]), qp)[0] == 0

    def test_log2_hand_case(self):
        qp = Q.QuantParams(Q.LOG2, 2, Q.PER_LAYER, np.asarray(1.0))
        # -log2(0.3) = 1.737 -> 2
        assert Q.log_quant(np.array([0.3]), qp)[0] == 2

    def test_logsqrt2_hand_case(self):
        qp = Q.QuantParams(Q.LOGSQRT2, 3, Q.PER_LAYER, np.asarray(1.0))
        # -2*log2(0.3) = 3.474 -> 3
        assert Q.log_quant(np.array([0.3]), qp)[0] == 3

    def test_zero_maps_to_largest_code(self):
        qp = Q.QuantParams(Q.LOGSQRT2, 4, Q.PER_LAYER, np.asarray(1.0))
        assert Q.log_quant(np.array([0.0]), qp)[0] == qp.qmax

    def test_negative_rejected(self):
        qp = Q.QuantParams(Q.LOG2, 4, Q.PER_LAYER, np.asarray(1.0))
        with pytest.raises(DomainError):
            Q.log_quant(np.array([-0.1]), qp)

    def test_dequant_values(self):
        qp2 = Q.QuantParams(Q.LOG2, 4, Q.PER_LAYER, np.asarray(1.0))
        assert Q.log_dequant(np.array([0]), qp2)[0] == 1.0
        assert Q.log_dequant(np.array([2]), qp2)[0] == 0.25
        qps = Q.QuantParams(Q.LOGSQRT2, 4, Q.PER_LAYER, np.asarray(1.0))
        np.testing.assert_allclose(Q.log_dequant(np.array([3]), qps)[0], 2 ** -1.5)
        np.testing.assert_allclose(Q.log_dequant(np.array([3]), qps)[0], 0.353553, atol=1e-6)


class TestTwoScaleDecomposition:
    def test_even_case(self):
        k, parity = Q.logsqrt2_to_log2(np.array([2]), 1.0)
        assert k[0] == 1 and parity[0] == 0
        assert Q.two_scale_dequant(k, parity, 1.0)[0] == 0.5

    def test_odd_case(self):
        k, parity = Q.logsqrt2_to_log2(np.array([3]), 1.0)
        assert k[0] == 1 and parity[0] == 1
        np.testing.assert_allclose(Q.two_scale_dequant(k, parity, 1.0)[0], math.sqrt(2.0) ** -3,
                                   rtol=1e-15)

    @pytest.mark.parametrize("bits", range(1, 9))
    def test_identity_exhaustive_over_codes(self, bits):
        scale = 0.8125
        qp = Q.QuantParams(Q.LOGSQRT2, bits, Q.PER_LAYER, np.asarray(scale))
        q = np.arange(0, qp.qmax + 1)
        direct = Q.log_dequant(q, qp)
        k, parity = Q.logsqrt2_to_log2(q, scale)
        two_scale = Q.two_scale_dequant(k, parity, scale)
        rel = np.abs(two_scale - direct) / direct
        assert rel.max() <= 1e-15


class TestFakeQuant:
    def test_high_precision_recovers_input(self):
        rng = np.random.default_rng(3)
        x = rng.uniform(-4, 4, 256)
        qp = Q.uniform_calibrate(x, bits=32, percentile=100.0)
        np.testing.assert_allclose(Q.fake_quant(x, qp), x, atol=1e-6)

    def test_idempotent(self):
        rng = np.random.default_rng(5)
        x = rng.uniform(-4, 4, 256)
        qp = Q.uniform_calibrate(x, bits=3)
        once = Q.fake_quant(x, qp)
        np.testing.assert_array_equal(Q.fake_quant(once, qp), once)

    def test_log_idempotent(self):
        rng = np.random.default_rng(6)
        x = rng.uniform(0, 1, 256)
        qp = Q.log_calibrate(x, bits=4)
        once = Q.fake_quant(x, qp)
        np.testing.assert_array_equal(Q.fake_quant(once, qp), once)

    def test_hand_composition(self):
        qp = Q.QuantParams(Q.UNIFORM, 2, Q.PER_LAYER, np.asarray(1.0), np.asarray(1))
        out = Q.fake_quant(np.array([-1.0, 0.5, 2.0]), qp)
        np.testing.assert_array_equal(out, [-1.0, 1.0, 2.0])

    def test_constant_tensor_roundtrips_at_any_bits(self):
        for bits in (1, 2, 3, 8):
            for c in (0.0, 0.6, -2.5):
                qp = Q.uniform_calibrate(np.full(10, c), bits=bits)
                np.testing.assert_allclose(Q.fake_quant(np.full(10, c), qp), c, atol=1e-12)

    def test_mse_never_increases_with_bits(self):
        # mean-squared error is non-increasing in bits on a fixed sample set
        rng = np.random.default_rng(17)
        x = rng.uniform(-3, 3, 4096)
        lo, hi = x.min(), x.max()
        prev = np.inf
        for bits in range(2, 10):
            qp = Q.range_to_uniform_params(np.asarray(lo), np.asarray(hi), bits, Q.PER_LAYER)
            mse = float(np.mean((Q.fake_quant(x, qp) - x) ** 2))
            assert mse <= prev + 1e-18
            prev = mse
