"""Bit-packed 4-bit model container.

Layout (little-endian throughout):

    magic   b"DQRM"
    u32     format version (currently 1)
    u32     dense_in, u32 embed_dim, u32 num_tables
    u32     bottom width count, then that many u32 widths (input included)
    u32     top width count, then that many u32 widths (input derived)
    u32     mlp granularity (0 = channel, 1 = matrix)
    u64     rows, once per table
    tables  f32 scale + ceil(rows*dim/2) packed nibble bytes, per table
    layers  f32 channel scales (out, or 1 when matrix-wise),
            ceil(out*in/2) packed nibble bytes, f32 biases (out), per layer

Weights are stored as 4-bit codes regardless of the training bit-width; a
model trained at 4 bits round-trips with a bit-identical forward pass.
"""

import struct

import numpy as np

from . import quant
from .model import Model, ModelConfig
from .quant import QuantSpec

MAGIC = b"DQRM"
VERSION = 1
_INT4 = QuantSpec(bits=4)


class ModelFormatError(ValueError):
    pass


def _table_codes(table, emb_bits):
    if emb_bits == 4 and table.scale is not None:
        scale = np.float32(table.scale)
    else:
        scale = quant.compute_scale(table.weight, _INT4)
    codes = quant.quantize(table.weight, scale, _INT4)
    return scale, codes


def _layer_codes(layer, mlp_bits, granularity):
    reuse = mlp_bits == 4 and layer.scales is not None
    if granularity == "channel":
        scales = (
            np.asarray(layer.scales, dtype=np.float32)
            if reuse
            else quant.per_channel_scales(layer.weight, _INT4)
        )
        codes = np.vstack(
            [
                quant.quantize(layer.weight[i], float(scales[i]), _INT4)
                for i in range(layer.weight.shape[0])
            ]
        )
    else:
        scales = (
            np.asarray(layer.scales, dtype=np.float32)
            if reuse
            else np.asarray([quant.compute_scale(layer.weight, _INT4)], dtype=np.float32)
        )
        codes = quant.quantize(layer.weight, float(scales[0]), _INT4)
    return scales, codes


def export_model(model: Model, path):
    cfg = model.config
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<III", cfg.dense_in, cfg.embed_dim, cfg.num_tables))
        fh.write(struct.pack("<I", len(cfg.bottom_arch)))
        fh.write(struct.pack(f"<{len(cfg.bottom_arch)}I", *cfg.bottom_arch))
        fh.write(struct.pack("<I", len(cfg.top_arch)))
        fh.write(struct.pack(f"<{len(cfg.top_arch)}I", *cfg.top_arch))
        fh.write(struct.pack("<I", 0 if cfg.mlp_granularity == "channel" else 1))
        fh.write(struct.pack(f"<{cfg.num_tables}Q", *cfg.table_rows))
        for table in model.tables:
            scale, codes = _table_codes(table, cfg.emb_bits)
            fh.write(struct.pack("<f", float(scale)))
            fh.write(quant.pack_int4(codes.ravel()))
        for layer in model.dense_layers():
            scales, codes = _layer_codes(layer, cfg.mlp_bits, cfg.mlp_granularity)
            fh.write(scales.astype("<f4").tobytes())
            fh.write(quant.pack_int4(codes.ravel()))
            fh.write(layer.bias.astype("<f4").tobytes())


def _read_exact(fh, n):
    data = fh.read(n)
    if len(data) != n:
        raise ModelFormatError("truncated file")
    return data


def _read_u32s(fh, n):
    return struct.unpack(f"<{n}I", _read_exact(fh, 4 * n))


def import_model(path) -> Model:
    """Rebuild a 4-bit model whose forward pass replays the stored codes."""
    with open(path, "rb") as fh:
        if _read_exact(fh, 4) != MAGIC:
            raise ModelFormatError("bad magic")
        (version,) = _read_u32s(fh, 1)
        if version != VERSION:
            raise ModelFormatError(f"unsupported version {version}")
        dense_in, embed_dim, num_tables = _read_u32s(fh, 3)
        (n_bot,) = _read_u32s(fh, 1)
        bottom_arch = _read_u32s(fh, n_bot)
        (n_top,) = _read_u32s(fh, 1)
        top_arch = _read_u32s(fh, n_top)
        (gran,) = _read_u32s(fh, 1)
        table_rows = struct.unpack(
            f"<{num_tables}Q", _read_exact(fh, 8 * num_tables)
        )
        config = ModelConfig(
            table_rows=table_rows,
            embed_dim=embed_dim,
            dense_in=dense_in,
            bottom_arch=bottom_arch,
            top_arch=top_arch,
            emb_bits=4,
            mlp_bits=4,
            mlp_granularity="channel" if gran == 0 else "matrix",
        )
        model = Model(config, seed=0)
        for table in model.tables:
            (scale,) = struct.unpack("<f", _read_exact(fh, 4))
            if not scale > 0:
                raise ModelFormatError("non-positive scale")
            count = table.rows * table.dim
            codes = quant.unpack_int4(_read_exact(fh, (count + 1) // 2), count)
            table.weight = quant.dequantize(codes, scale).reshape(table.rows, table.dim)
            table.scale = np.float32(scale)
            table.scale_iter = 0
        for layer in model.dense_layers():
            out_dim, in_dim = layer.weight.shape
            n_scales = out_dim if config.mlp_granularity == "channel" else 1
            scales = np.frombuffer(_read_exact(fh, 4 * n_scales), dtype="<f4").copy()
            if not (scales > 0).all():
                raise ModelFormatError("non-positive scale")
            count = out_dim * in_dim
            codes = quant.unpack_int4(_read_exact(fh, (count + 1) // 2), count)
            if config.mlp_granularity == "channel":
                layer.weight = np.vstack(
                    [
                        quant.dequantize(
                            codes.reshape(out_dim, in_dim)[i], float(scales[i])
                        )
                        for i in range(out_dim)
                    ]
                )
            else:
                layer.weight = quant.dequantize(codes, float(scales[0])).reshape(
                    out_dim, in_dim
                )
            layer.scales = scales
            layer.scale_iter = 0
            layer.bias = np.frombuffer(_read_exact(fh, 4 * out_dim), dtype="<f4").copy()
        if fh.read(1):
            raise ModelFormatError("trailing bytes")
    return model


def export_size(config: ModelConfig) -> int:
    """Exact on-disk size in bytes, computed without building the model."""
    size = 4 + 4  # magic + version
    size += 12  # dense_in, embed_dim, num_tables
    size += 4 + 4 * len(config.bottom_arch)
    size += 4 + 4 * len(config.top_arch)
    size += 4  # granularity
    size += 8 * config.num_tables
    for rows in config.table_rows:
        size += 4 + (rows * config.embed_dim + 1) // 2
    for in_dim, out_dim in config.layer_shapes():
        n_scales = out_dim if config.mlp_granularity == "channel" else 1
        size += 4 * n_scales + (out_dim * in_dim + 1) // 2 + 4 * out_dim
    return size
