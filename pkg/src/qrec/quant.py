"""Symmetric uniform quantization primitives.

Conventions used throughout the package:

* codes live in the restricted symmetric range [-qmax, +qmax] with
  qmax = 2^(b-1) - 1, so zero maps to code 0 and the 4-bit packing offset
  is trivial;
* rounding is half-away-from-zero, which keeps quantize an odd function;
* scales are positive float32; an all-zero input gets scale 1/qmax so the
  codes stay all-zero without dividing by zero;
* the straight-through backward is the unconditional identity: weights that
  drift outside a frozen clip range between scale refreshes still receive
  gradient.
"""

import enum
from dataclasses import dataclass

import numpy as np

from . import kernels

VALID_BITS = (2, 4, 8, 16)


class Granularity(enum.Enum):
    PER_TABLE = "table"
    PER_CHANNEL = "channel"
    PER_TENSOR = "tensor"


@dataclass(frozen=True)
class QuantSpec:
    """Bit-width, scale granularity, and scale refresh period."""

    bits: int
    granularity: Granularity = Granularity.PER_TENSOR
    update_period: int = 1

    def __post_init__(self):
        if self.bits not in VALID_BITS:
            raise ValueError(f"unsupported bit-width {self.bits}; expected one of {VALID_BITS}")
        if self.update_period < 1:
            raise ValueError("update period must be >= 1")

    @property
    def qmax(self) -> int:
        return 2 ** (self.bits - 1) - 1


def _as_f32(values) -> np.ndarray:
    return np.ascontiguousarray(values, dtype=np.float32)


def compute_scale(values, spec: QuantSpec) -> np.float32:
    """Scale = maxabs / qmax over the whole input; 1/qmax if all zero.

    Raises ValueError("empty tensor") / ValueError("non-finite weight").
    """
    v = _as_f32(values)
    if v.size == 0:
        raise ValueError("empty tensor")
    if not np.isfinite(v).all():
        raise ValueError("non-finite weight")
    m = kernels.maxabs(v)
    if m == 0.0:
        return np.float32(1.0 / spec.qmax)
    return np.float32(np.float64(m) / np.float64(spec.qmax))


def quantize(values, scale, spec: QuantSpec) -> np.ndarray:
    """Integer codes clamp(round-half-away-from-zero(v/s), -qmax, +qmax)."""
    s = float(scale)
    if not (s > 0.0 and np.isfinite(s)):
        raise ValueError("scale must be positive and finite")
    return kernels.quantize(_as_f32(values), s, spec.qmax)


def dequantize(codes, scale) -> np.ndarray:
    return kernels.dequantize(np.ascontiguousarray(codes, dtype=np.int32), float(scale))


def fake_quantize(values, scale, spec: QuantSpec) -> np.ndarray:
    """dequantize(quantize(v, s), s): the forward-pass shadow of v."""
    s = float(scale)
    if not (s > 0.0 and np.isfinite(s)):
        raise ValueError("scale must be positive and finite")
    return kernels.fake_quantize(_as_f32(values), s, spec.qmax)


def ste_backward(upstream_grad) -> np.ndarray:
    """Straight-through estimator: gradients pass through unchanged."""
    return np.asarray(upstream_grad)


def per_channel_scales(weight_matrix, spec: QuantSpec) -> np.ndarray:
    """One scale per output row of a 2-D weight matrix."""
    w = _as_f32(weight_matrix)
    if w.ndim != 2:
        raise ValueError("expected a 2-D weight matrix")
    if w.size == 0:
        raise ValueError("empty tensor")
    if not np.isfinite(w).all():
        raise ValueError("non-finite weight")
    m = kernels.row_maxabs(w).astype(np.float64)
    m[m == 0.0] = 1.0  # all-zero rows fall back to scale 1/qmax
    return (m / np.float64(spec.qmax)).astype(np.float32)


def fake_quantize_per_channel(weight_matrix, scales, spec: QuantSpec) -> np.ndarray:
    """Fake-quantize each row with its own scale (channel-wise MLP mode)."""
    return kernels.fake_quantize_rows(_as_f32(weight_matrix), _as_f32(scales), spec.qmax)


INT4_SPEC = QuantSpec(bits=4)


def pack_int4(codes) -> bytes:
    """Two codes per byte, offset binary (nibble = code + 8).

    Element 2i occupies the low nibble of byte i, element 2i+1 the high
    nibble; an odd count pads the final high nibble with 0x0.
    """
    q = np.ascontiguousarray(codes, dtype=np.int32).ravel()
    if q.size and (q.max() > 7 or q.min() < -7):
        raise ValueError("code out of range")
    return kernels.pack_int4(q)


def unpack_int4(data: bytes, count: int) -> np.ndarray:
    """Inverse of pack_int4 for the first ``count`` codes."""
    if count < 0 or count > 2 * len(data):
        raise ValueError("count does not match buffer size")
    return kernels.unpack_int4(data, count)
