import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from qrec import quant
from qrec.quant import Granularity, QuantSpec

B4 = QuantSpec(4)
B8 = QuantSpec(8)


def brute_force_maxabs(values):
    # independent linear-scan oracle
    worst = 0.0
    for v in values:
        if abs(float(v)) > worst:
            worst = abs(float(v))
    return worst


class TestQuantSpec:
    def test_qmax(self):
        assert QuantSpec(2).qmax == 1
        assert B4.qmax == 7
        assert B8.qmax == 127
        assert QuantSpec(16).qmax == 32767

    @pytest.mark.parametrize("bits", [1, 3, 5, 32, 0])
    def test_invalid_bits(self, bits):
        with pytest.raises(ValueError):
            QuantSpec(bits)

    def test_invalid_period(self):
        with pytest.raises(ValueError):
            QuantSpec(4, update_period=0)


class TestComputeScale:
    def test_simple(self):
        s = quant.compute_scale([-1.0, 0.5, 0.25], B4)
        assert s == pytest.approx(1.0 / 7, rel=1e-6)

    def test_all_zero(self):
        assert quant.compute_scale([0.0, 0.0, 0.0], B8) == pytest.approx(1.0 / 127)

    def test_against_linear_scan(self):
        rng = np.random.default_rng(3)
        values = rng.uniform(-1, 1, size=10_000).astype(np.float32)
        s = quant.compute_scale(values, B8)
        assert float(s) == np.float32(brute_force_maxabs(values) / 127)

    def test_empty(self):
        with pytest.raises(ValueError, match="empty tensor"):
            quant.compute_scale([], B4)

    def test_non_finite(self):
        with pytest.raises(ValueError, match="non-finite"):
            quant.compute_scale([1.0, float("nan")], B4)
        with pytest.raises(ValueError, match="non-finite"):
            quant.compute_scale([1.0, float("inf")], B4)


class TestQuantize:
    def test_half_rounds_away(self):
        assert quant.quantize(np.array([0.5]), 1.0 / 7, B4)[0] == 4

    def test_zero(self):
        assert quant.quantize(np.array([0.0]), 0.3, B4)[0] == 0

    def test_endpoint(self):
        assert quant.quantize(np.array([-1.0]), 1.0 / 7, B4)[0] == -7

    def test_clamps(self):
        assert quant.quantize(np.array([100.0, -100.0]), 1.0 / 7, B4).tolist() == [7, -7]

    def test_dequantize(self):
        out = quant.dequantize(np.array([4]), 1.0 / 7)
        assert out[0] == pytest.approx(4 / 7)
        assert quant.dequantize(np.array([0]), 0.5)[0] == 0.0

    def test_requantize_fixed_point(self):
        # deq(quant(deq(q))) == deq(q): dequantized codes are a fixed point
        rng = np.random.default_rng(5)
        q = rng.integers(-127, 128, size=4096).astype(np.int32)
        s = np.float32(0.0137)
        v = quant.dequantize(q, s)
        again = quant.dequantize(quant.quantize(v, s, B8), s)
        assert np.array_equal(v, again)

    @given(st.lists(st.floats(-100, 100, width=32), min_size=1, max_size=64))
    @settings(max_examples=200, deadline=None)
    def test_odd_symmetry(self, values):
        v = np.array(values, dtype=np.float32)
        s = 0.037
        assert np.array_equal(
            quant.quantize(-v, s, B4), -quant.quantize(v, s, B4)
        )

    def test_bad_scale(self):
        with pytest.raises(ValueError):
            quant.quantize(np.array([1.0]), 0.0, B4)


class TestFakeQuantize:
    def test_round_trip_bound(self):
        rng = np.random.default_rng(11)
        v = rng.uniform(-1, 1, size=100_000).astype(np.float32)
        s = quant.compute_scale(v, B4)
        err = np.abs(quant.fake_quantize(v, s, B4) - v)
        assert float(err.max()) <= float(s) / 2 + 1e-9

    def test_grid_identity(self):
        s = np.float32(0.125)
        grid = np.arange(-7, 8, dtype=np.float32) * s
        assert np.array_equal(quant.fake_quantize(grid, s, B4), grid)

    def test_idempotent_bit_exact(self):
        rng = np.random.default_rng(7)
        v = rng.normal(0, 0.3, size=50_000).astype(np.float32)
        s = quant.compute_scale(v, B4)
        once = quant.fake_quantize(v, s, B4)
        twice = quant.fake_quantize(once, s, B4)
        assert once.tobytes() == twice.tobytes()

    def test_ste_backward_identity(self):
        g = np.array([1.0, -2.0])
        assert np.array_equal(quant.ste_backward(g), g)
        z = np.zeros(3)
        assert np.array_equal(quant.ste_backward(z), z)


class TestPerChannelScales:
    def test_two_by_two(self):
        w = np.array([[1.0, -2.0], [0.5, 0.25]], dtype=np.float32)
        s = quant.per_channel_scales(w, B4)
        assert s[0] == pytest.approx(2 / 7)
        assert s[1] == pytest.approx(0.5 / 7)

    def test_zero_row(self):
        w = np.array([[0.0, 0.0], [1.0, 0.0]], dtype=np.float32)
        s = quant.per_channel_scales(w, B4)
        assert s[0] == pytest.approx(1 / 7)

    def test_against_row_oracle(self):
        rng = np.random.default_rng(13)
        w = rng.normal(0, 1, size=(64, 32)).astype(np.float32)
        s = quant.per_channel_scales(w, B4)
        for i in range(64):
            assert float(s[i]) == np.float32(brute_force_maxabs(w[i]) / 7)


class TestPackInt4:
    def test_layout(self):
        assert quant.pack_int4(np.array([-7, 7])) == bytes([0xF1])

    def test_odd_padding(self):
        assert quant.pack_int4(np.array([0])) == bytes([0x08])

    def test_round_trip(self):
        rng = np.random.default_rng(17)
        codes = rng.integers(-7, 8, size=10_001).astype(np.int32)
        packed = quant.pack_int4(codes)
        assert len(packed) == (codes.size + 1) // 2
        assert np.array_equal(quant.unpack_int4(packed, codes.size), codes)

    def test_even_bijection(self):
        rng = np.random.default_rng(19)
        codes = rng.integers(-7, 8, size=2048).astype(np.int32)
        assert np.array_equal(quant.unpack_int4(quant.pack_int4(codes), 2048), codes)

    def test_out_of_range(self):
        with pytest.raises(ValueError, match="code out of range"):
            quant.pack_int4(np.array([8]))
        with pytest.raises(ValueError, match="code out of range"):
            quant.pack_int4(np.array([-8]))

    def test_bad_count(self):
        with pytest.raises(ValueError):
            quant.unpack_int4(b"\x00", 3)


def test_granularity_enum_values():
    assert {g.value for g in Granularity} == {"table", "channel", "tensor"}
