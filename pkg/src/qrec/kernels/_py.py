"""Pure numpy implementation of the hot kernels.

This is the reference backend: the compiled extension in ``_ext.pyx`` must
produce bit-identical outputs for every function here.  To make that hold,
all rounding arithmetic is done element-wise in float64 (exact widening from
float32), and sum-pooling accumulates in float32 in listed-index order via
``np.add.at`` (an unbuffered, in-order scatter-add).
"""

import numpy as np

BACKEND_NAME = "numpy"


def maxabs(values):
    """Largest absolute value of a float32 array (exact, order-free)."""
    if values.size == 0:
        return np.float32(0.0)
    return np.float32(np.max(np.abs(values)))


def row_maxabs(matrix):
    """Per-row largest absolute value of a 2-D float32 array."""
    return np.max(np.abs(matrix), axis=1).astype(np.float32)


def quantize(values, scale, qmax):
    """Symmetric uniform codes: clamp(round-half-away-from-zero(v/s), +-qmax)."""
    x = values.astype(np.float64) / np.float64(scale)
    mag = np.floor(np.abs(x) + 0.5)
    np.minimum(mag, float(qmax), out=mag)
    return np.where(x < 0.0, -mag, mag).astype(np.int32)


def dequantize(codes, scale):
    return (codes.astype(np.float64) * np.float64(scale)).astype(np.float32)


def fake_quantize(values, scale, qmax):
    """dequantize(quantize(v)) fused; float32 in, float32 out."""
    x = values.astype(np.float64) / np.float64(scale)
    mag = np.floor(np.abs(x) + 0.5)
    np.minimum(mag, float(qmax), out=mag)
    q = np.where((x < 0.0) & (mag > 0.0), -mag, mag)  # avoid -0.0 outputs
    return (q * np.float64(scale)).astype(np.float32)


def fake_quantize_rows(matrix, scales, qmax):
    """Fake-quantize each row of a 2-D float32 array with its own scale."""
    s = scales.astype(np.float64)[:, None]
    x = matrix.astype(np.float64) / s
    mag = np.floor(np.abs(x) + 0.5)
    np.minimum(mag, float(qmax), out=mag)
    q = np.where((x < 0.0) & (mag > 0.0), -mag, mag)  # avoid -0.0 outputs
    return (q * s).astype(np.float32)


def embedding_bag_fq(weight, indices, offsets, scale, qmax):
    """Gather rows, fake-quantize them, and sum-pool per bag.

    ``offsets`` has length B+1; bag b covers indices[offsets[b]:offsets[b+1]].
    Accumulation is float32 in listed order, matching the compiled kernel.
    """
    n_bags = offsets.shape[0] - 1
    out = np.zeros((n_bags, weight.shape[1]), dtype=np.float32)
    if indices.shape[0] == 0:
        return out
    rows = fake_quantize(weight[indices], scale, qmax)
    counts = np.diff(offsets)
    bag_ids = np.repeat(np.arange(n_bags, dtype=np.int64), counts)
    np.add.at(out, bag_ids, rows)
    return out


def embedding_bag(weight, indices, offsets):
    """Sum-pool gathered rows without quantization (FP32 bypass path)."""
    n_bags = offsets.shape[0] - 1
    out = np.zeros((n_bags, weight.shape[1]), dtype=weight.dtype)
    if indices.shape[0] == 0:
        return out
    counts = np.diff(offsets)
    bag_ids = np.repeat(np.arange(n_bags, dtype=np.int64), counts)
    np.add.at(out, bag_ids, weight[indices])
    return out


def pack_int4(codes):
    """Pack codes in [-7, 7] two per byte: nibble = code + 8, element 2i in
    the low nibble of byte i; an odd tail pads the final high nibble with 0."""
    nib = (codes.astype(np.int64) + 8).astype(np.uint8)
    if nib.shape[0] % 2:
        nib = np.concatenate([nib, np.zeros(1, dtype=np.uint8)])
    return (nib[0::2] | (nib[1::2] << 4)).tobytes()


def unpack_int4(data, count):
    """Invert ``pack_int4``; ``count`` drops the padding nibble."""
    raw = np.frombuffer(data, dtype=np.uint8)
    nib = np.empty(raw.shape[0] * 2, dtype=np.uint8)
    nib[0::2] = raw & 0x0F
    nib[1::2] = raw >> 4
    return nib[:count].astype(np.int32) - 8
