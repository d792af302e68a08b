"""Deterministic in-process data-parallel training simulation.

N replicas each process a shard of the global batch; gradients are exchanged
through a simulated two-phase allreduce: first the per-tensor quantization
scales are unified (max across nodes, so no element can clip), then the
integer-quantized gradients are summed in a wide accumulator at a logical
destination in ascending rank order.  Embedding gradients travel as
(indices, value rows) sparse messages, which is lossless; optional error
compensation carries each node's quantization residual into its next
iteration.  Every reduction has a fixed order, so a run is bit-reproducible
and all replicas stay identical.
"""

import math
from dataclasses import dataclass

import numpy as np

from . import quant
from .model import Model, SparseGradient, sgd_step_dense, sgd_step_sparse
from .quant import Granularity, QuantSpec

GRAD_BITS = (8, 16, 32)
EC_MODES = ("none", "mlp", "all")


class ReplicaDriftError(RuntimeError):
    pass


@dataclass
class DpConfig:
    nodes: int = 1
    grad_bits: int = 32  # 32 bypasses gradient quantization
    ec_mode: str = "none"
    sparse_emb: bool = True
    index_bytes: int = 8

    def __post_init__(self):
        if self.nodes < 1:
            raise ValueError("node count must be >= 1")
        if self.grad_bits not in GRAD_BITS:
            raise ValueError(f"grad_bits must be one of {GRAD_BITS}")
        if self.ec_mode not in EC_MODES:
            raise ValueError(f"ec_mode must be one of {EC_MODES}")
        if self.index_bytes not in (4, 8):
            raise ValueError("index_bytes must be 4 or 8")

    @property
    def grad_spec(self):
        if self.grad_bits == 32:
            return None
        return QuantSpec(self.grad_bits, Granularity.PER_TENSOR, 1)


@dataclass
class CommRecord:
    """Per-iteration transmitted bytes, split by message category."""

    dense_grad_bytes: int = 0
    sparse_index_bytes: int = 0
    sparse_value_bytes: int = 0
    scale_bytes: int = 0

    @property
    def phase1_bytes(self) -> int:
        return self.scale_bytes

    @property
    def phase2_bytes(self) -> int:
        return self.dense_grad_bytes + self.sparse_index_bytes + self.sparse_value_bytes

    @property
    def total_bytes(self) -> int:
        return self.phase1_bytes + self.phase2_bytes

    def to_dict(self) -> dict:
        return {
            "dense_grad_bytes": self.dense_grad_bytes,
            "sparse_index_bytes": self.sparse_index_bytes,
            "sparse_value_bytes": self.sparse_value_bytes,
            "scale_bytes": self.scale_bytes,
            "phase1_bytes": self.phase1_bytes,
            "phase2_bytes": self.phase2_bytes,
            "total_bytes": self.total_bytes,
        }


@dataclass
class DenseMessage:
    payload: np.ndarray  # float values (grad_bits=32) or integer codes
    grad_bits: int
    scale: float | None


@dataclass
class SparseMessage:
    indices: np.ndarray
    payload: np.ndarray  # (n, d) float values or integer codes
    grad_bits: int
    scale: float | None


_VALUE_BYTES = {32: 4, 16: 2, 8: 1}
_CODE_DTYPE = {16: "<i2", 8: "<i1"}


def account_bytes(messages, cfg: DpConfig) -> CommRecord:
    """Closed-form byte counts; equals len(encode_message(m)) summed, exactly."""
    rec = CommRecord()
    for msg in messages:
        bpe = _VALUE_BYTES[msg.grad_bits]
        if isinstance(msg, DenseMessage):
            rec.dense_grad_bytes += bpe * msg.payload.size
            if msg.grad_bits != 32:
                rec.scale_bytes += 4
        else:
            rec.sparse_index_bytes += cfg.index_bytes * msg.indices.shape[0]
            rec.sparse_value_bytes += bpe * msg.payload.size
            if msg.grad_bits != 32:
                rec.scale_bytes += 4
    return rec


def encode_message(msg, cfg: DpConfig) -> bytes:
    """Reference wire encoding used to validate account_bytes."""
    import struct

    parts = []
    if isinstance(msg, SparseMessage):
        idx_dtype = "<u4" if cfg.index_bytes == 4 else "<u8"
        parts.append(np.ascontiguousarray(msg.indices).astype(idx_dtype).tobytes())
    if msg.grad_bits == 32:
        parts.append(np.ascontiguousarray(msg.payload).astype("<f4").tobytes())
    else:
        parts.append(struct.pack("<f", float(msg.scale)))
        parts.append(
            np.ascontiguousarray(msg.payload).astype(_CODE_DTYPE[msg.grad_bits]).tobytes()
        )
    return b"".join(parts)


# -- collective primitives ---------------------------------------------------


def coalesce_sparse(table_id, raw_indices, raw_rows, dim, dtype=np.float32):
    """Sorted-unique sparse gradient; duplicate rows pre-summed."""
    return SparseGradient.from_raw(table_id, raw_indices, raw_rows, dim, dtype)


def unify_scales(local_scales) -> np.float32:
    """Phase-1 reduction: max over nodes, so every local value is covered."""
    scales = [float(s) for s in local_scales if s is not None]
    if not scales:
        raise ValueError("no scales to unify")
    return np.float32(max(scales))


def ec_correct(grad, buffer) -> np.ndarray:
    if grad.shape != buffer.shape:
        raise ValueError("error buffer shape mismatch")
    return grad + buffer


def ec_update(corrected, transmitted_dequantized, buffer):
    """buffer <- corrected - transmitted (the residual carried forward)."""
    if corrected.shape != buffer.shape or transmitted_dequantized.shape != buffer.shape:
        raise ValueError("error buffer shape mismatch")
    np.subtract(corrected, transmitted_dequantized, out=buffer)


def quantize_grad(values, s_unified, spec: QuantSpec):
    """Integer codes plus a flag telling whether anything clipped."""
    codes = quant.quantize(values, s_unified, spec)
    clipped = False
    if values.size:
        worst = np.float64(np.max(np.abs(values))) / np.float64(s_unified)
        clipped = bool(math.floor(worst + 0.5) > spec.qmax)
    return codes, clipped


def allreduce_sum_dense(per_node_codes) -> np.ndarray:
    """Sum integer codes across nodes in ascending rank order, widened to
    int64 so no intermediate overflows the code range."""
    acc = np.zeros(per_node_codes[0].shape, dtype=np.int64)
    for codes in per_node_codes:
        acc += codes
    return acc


def allreduce_mean_dense_f64(per_node_values) -> np.ndarray:
    """FP32-bypass reduction: float64 accumulate in rank order, then /N."""
    acc = np.zeros(per_node_values[0].shape, dtype=np.float64)
    for values in per_node_values:
        acc += values
    return acc / len(per_node_values)


def allreduce_union_sparse(per_node_indices, per_node_payloads, dim, accum_dtype):
    """Merge sparse messages: union of indices, collisions summed in a wide
    accumulator, nodes folded in ascending rank order."""
    nonempty = [idx for idx in per_node_indices if idx.size]
    if not nonempty:
        return np.zeros(0, dtype=np.int64), np.zeros((0, dim), dtype=accum_dtype)
    union = np.unique(np.concatenate(nonempty))
    acc = np.zeros((union.shape[0], dim), dtype=accum_dtype)
    for idx, payload in zip(per_node_indices, per_node_payloads):
        if idx.size:
            pos = np.searchsorted(union, idx)
            np.add.at(acc, pos, payload.astype(accum_dtype))
    return union, acc


def dequant_average(sums, s_unified, n_nodes: int, out_dtype=np.float32) -> np.ndarray:
    """Averaged gradient: integer sums x unified scale / N."""
    return ((sums.astype(np.float64) * np.float64(s_unified)) / n_nodes).astype(out_dtype)


# -- node state and the full DP step -----------------------------------------


def _flatten_dense(dense_grads):
    flat = []
    for g_w, g_b in dense_grads:
        flat.append(g_w)
        flat.append(g_b)
    return flat


class NodeState:
    """One replica: its model plus (when enabled) error-feedback residuals."""

    def __init__(self, model: Model, cfg: DpConfig):
        self.model = model
        self.ec_dense = None
        self.ec_tables = None
        if cfg.grad_bits != 32 and cfg.ec_mode in ("mlp", "all"):
            self.ec_dense = []
            for layer in model.dense_layers():
                self.ec_dense.append(np.zeros_like(layer.weight))
                self.ec_dense.append(np.zeros_like(layer.bias))
        if cfg.grad_bits != 32 and cfg.ec_mode == "all":
            self.ec_tables = [np.zeros_like(t.weight) for t in model.tables]


def make_nodes(model: Model, cfg: DpConfig):
    """N identical replicas of a model (the model itself becomes rank 0)."""
    return [NodeState(model if r == 0 else model.clone(), cfg) for r in range(cfg.nodes)]


@dataclass
class DpStepStats:
    losses: list
    record: CommRecord
    clipped: bool = False
    scale_updates: int = 0


def run_dp_step(nodes, global_batch, cfg: DpConfig, iteration: int, lr: float) -> DpStepStats:
    """One synchronous data-parallel step across all replicas.

    Splits the global batch by rank, runs local forward/backward, unifies
    gradient scales (phase 1), sums quantized gradients (phase 2), applies
    the identical averaged update everywhere, and returns per-node losses
    plus the byte accounting for rank 0's transmitted messages.
    """
    n = len(nodes)
    if n != cfg.nodes:
        raise ValueError("node list does not match config")
    if len({node.model.parameter_checksum() for node in nodes}) != 1:
        raise ReplicaDriftError("replica drift")
    batch_size = global_batch.num_samples
    if batch_size % n:
        raise ValueError("global batch size must be divisible by the node count")
    shard = batch_size // n

    losses = []
    node_dense = []
    node_sparse = []
    scale_updates = 0
    for rank, node in enumerate(nodes):
        scale_updates += node.model.refresh_scales(iteration)
        piece = global_batch.slice(rank * shard, (rank + 1) * shard)
        logits, cache = node.model.forward(piece, with_cache=True)
        loss, dgrads, sgrads = node.model.loss_and_backward(piece, logits, cache)
        losses.append(loss)
        node_dense.append(_flatten_dense(dgrads))
        node_sparse.append(sgrads)

    model0 = nodes[0].model
    gspec = cfg.grad_spec
    messages = []
    clipped = False
    n_mlp = 2 * len(model0.dense_layers())

    # dense tensor set: MLP weights and biases, plus scattered table
    # gradients when sparse messaging is off
    if not cfg.sparse_emb:
        for t, table in enumerate(model0.tables):
            for rank in range(n):
                node_dense[rank].append(node_sparse[rank][t].to_dense(table.rows))

    def ec_buffer(node, k):
        if k < n_mlp:
            return None if node.ec_dense is None else node.ec_dense[k]
        return None if node.ec_tables is None else node.ec_tables[k - n_mlp]

    dense_updates = []
    for k in range(len(node_dense[0])):
        per_node = [node_dense[rank][k] for rank in range(n)]
        if gspec is None:
            avg = allreduce_mean_dense_f64(per_node).astype(model0.dtype)
            messages.append(DenseMessage(per_node[0], 32, None))
        else:
            corrected = []
            for rank in range(n):
                buf = ec_buffer(nodes[rank], k)
                corrected.append(
                    ec_correct(per_node[rank], buf) if buf is not None else per_node[rank]
                )
            s_u = unify_scales([quant.compute_scale(c, gspec) for c in corrected])
            per_codes = []
            for rank in range(n):
                codes, clip = quantize_grad(corrected[rank], s_u, gspec)
                clipped = clipped or clip
                per_codes.append(codes)
                buf = ec_buffer(nodes[rank], k)
                if buf is not None:
                    ec_update(corrected[rank], quant.dequantize(codes, s_u), buf)
            sums = allreduce_sum_dense(per_codes)
            avg = dequant_average(sums, s_u, n, model0.dtype)
            messages.append(DenseMessage(per_codes[0], cfg.grad_bits, float(s_u)))
        dense_updates.append(avg)

    sparse_updates = []
    if cfg.sparse_emb:
        for t in range(model0.config.num_tables):
            per_idx = [node_sparse[rank][t].indices for rank in range(n)]
            per_val = [node_sparse[rank][t].values for rank in range(n)]
            dim = model0.config.embed_dim
            if gspec is None:
                union, acc = allreduce_union_sparse(per_idx, per_val, dim, np.float64)
                rows = (acc / n).astype(model0.dtype)
                messages.append(SparseMessage(per_idx[0], per_val[0], 32, None))
            else:
                corrected = []
                local_scales = []
                for rank in range(n):
                    vals = per_val[rank]
                    if nodes[rank].ec_tables is not None and per_idx[rank].size:
                        vals = vals + nodes[rank].ec_tables[t][per_idx[rank]]
                    corrected.append(vals)
                    local_scales.append(
                        quant.compute_scale(vals, gspec) if vals.size else None
                    )
                if all(s is None for s in local_scales):
                    union = np.zeros(0, dtype=np.int64)
                    rows = np.zeros((0, dim), dtype=model0.dtype)
                    messages.append(
                        SparseMessage(per_idx[0], per_val[0], cfg.grad_bits, 1.0)
                    )
                else:
                    s_u = unify_scales(local_scales)
                    per_codes = []
                    for rank in range(n):
                        if corrected[rank].size:
                            codes, clip = quantize_grad(corrected[rank], s_u, gspec)
                            clipped = clipped or clip
                        else:
                            codes = np.zeros((0, dim), dtype=np.int32)
                        per_codes.append(codes)
                        if nodes[rank].ec_tables is not None and per_idx[rank].size:
                            nodes[rank].ec_tables[t][per_idx[rank]] = corrected[
                                rank
                            ] - quant.dequantize(codes, s_u)
                    union, sums = allreduce_union_sparse(per_idx, per_codes, dim, np.int64)
                    rows = dequant_average(sums, s_u, n, model0.dtype)
                    messages.append(
                        SparseMessage(per_idx[0], per_codes[0], cfg.grad_bits, float(s_u))
                    )
            sparse_updates.append(SparseGradient(t, union, rows))

    # identical averaged update on every replica
    for node in nodes:
        layers = node.model.dense_layers()
        for i, layer in enumerate(layers):
            sgd_step_dense(layer, dense_updates[2 * i], dense_updates[2 * i + 1], lr)
        for j, avg in enumerate(dense_updates[n_mlp:]):
            table = node.model.tables[j]
            table.weight -= (lr * avg).astype(table.weight.dtype, copy=False)
        for sgrad in sparse_updates:
            sgd_step_sparse(node.model.tables[sgrad.table_id], sgrad, lr)

    if len({node.model.parameter_checksum() for node in nodes}) != 1:
        raise ReplicaDriftError("replica drift")

    return DpStepStats(
        losses=losses,
        record=account_bytes(messages, cfg),
        clipped=clipped,
        scale_updates=scale_updates,
    )


# -- single-process simulated data parallelism --------------------------------


class _GroupBuffers:
    """Gradient accumulators for one update group of microbatches.

    When gradient quantization is on, the per-tensor scales computed on the
    group's first microbatch are reused for the whole group (the simulation
    performs a single scale exchange per group), so later microbatches may
    clip; that is inherent to the scheme, not a bug.
    """

    def __init__(self, model: Model, cfg: DpConfig):
        self.cfg = cfg
        self.quantized = cfg.grad_bits != 32
        acc_dtype = np.int64 if self.quantized else np.float64
        self.dense_acc = []
        for layer in model.dense_layers():
            self.dense_acc.append(np.zeros_like(layer.weight, dtype=acc_dtype))
            self.dense_acc.append(np.zeros_like(layer.bias, dtype=acc_dtype))
        self.dense_scales = [None] * len(self.dense_acc)
        self.sparse_parts = [[] for _ in model.tables]
        self.table_scales = [None] * len(model.tables)
        self.count = 0
        self.clears = 0

    def zero(self):
        for acc in self.dense_acc:
            acc[...] = 0
        self.dense_scales = [None] * len(self.dense_acc)
        self.sparse_parts = [[] for _ in self.sparse_parts]
        self.table_scales = [None] * len(self.table_scales)
        self.count = 0
        self.clears += 1

    def accumulate(self, flat_dense, sparse_grads, gspec, ec_dense, ec_tables):
        clipped = False
        for k, grad in enumerate(flat_dense):
            if not self.quantized:
                self.dense_acc[k] += grad
                continue
            corrected = ec_correct(grad, ec_dense[k]) if ec_dense is not None else grad
            if self.dense_scales[k] is None:  # first microbatch defines the scale
                self.dense_scales[k] = float(quant.compute_scale(corrected, gspec))
            codes, clip = quantize_grad(corrected, self.dense_scales[k], gspec)
            clipped = clipped or clip
            self.dense_acc[k] += codes
            if ec_dense is not None:
                ec_update(corrected, quant.dequantize(codes, self.dense_scales[k]), ec_dense[k])
        for t, sgrad in enumerate(sparse_grads):
            if not self.quantized:
                self.sparse_parts[t].append((sgrad.indices, sgrad.values))
                continue
            vals = sgrad.values
            if ec_tables is not None and sgrad.indices.size:
                vals = vals + ec_tables[t][sgrad.indices]
            if vals.size:
                if self.table_scales[t] is None:
                    self.table_scales[t] = float(quant.compute_scale(vals, gspec))
                codes, clip = quantize_grad(vals, self.table_scales[t], gspec)
                clipped = clipped or clip
                if ec_tables is not None and sgrad.indices.size:
                    ec_tables[t][sgrad.indices] = vals - quant.dequantize(
                        codes, self.table_scales[t]
                    )
            else:
                codes = np.zeros((0, vals.shape[1] if vals.ndim == 2 else 0), np.int32)
            self.sparse_parts[t].append((sgrad.indices, codes))
        self.count += 1
        return clipped

    def apply(self, model: Model, lr: float):
        n = self.count
        layers = model.dense_layers()
        for i, layer in enumerate(layers):
            g_w = self._dense_mean(2 * i, n, model.dtype)
            g_b = self._dense_mean(2 * i + 1, n, model.dtype)
            sgd_step_dense(layer, g_w, g_b, lr)
        dim = model.config.embed_dim
        for t, parts in enumerate(self.sparse_parts):
            idx_list = [p[0] for p in parts]
            val_list = [p[1] for p in parts]
            if self.quantized:
                union, sums = allreduce_union_sparse(idx_list, val_list, dim, np.int64)
                scale = self.table_scales[t] if self.table_scales[t] is not None else 1.0
                rows = dequant_average(sums, scale, n, model.dtype)
            else:
                union, acc = allreduce_union_sparse(idx_list, val_list, dim, np.float64)
                rows = (acc / n).astype(model.dtype)
            sgd_step_sparse(model.tables[t], SparseGradient(t, union, rows), lr)

    def _dense_mean(self, k, n, dtype):
        if self.quantized:
            scale = self.dense_scales[k] if self.dense_scales[k] is not None else 1.0
            return dequant_average(self.dense_acc[k], scale, n, dtype)
        return (self.dense_acc[k] / n).astype(dtype)


def run_simulated_dp(
    model: Model,
    cfg: DpConfig,
    batches,
    lr: float,
    start_iteration: int = 0,
    on_step=None,
):
    """Single-replica simulation of N-node data parallelism (one machine).

    Gradients from ``cfg.nodes`` consecutive microbatches accumulate in a
    buffer; the weights update once per group with the buffer mean, and the
    buffer is cleared exactly once before the next group starts.  With
    gradient quantization on, each tensor reuses the scale computed on the
    group's first microbatch.  Error compensation, when enabled, runs
    sequentially against a single residual set.
    """
    n = cfg.nodes
    gspec = cfg.grad_spec
    buffers = _GroupBuffers(model, cfg)
    ec_dense = None
    ec_tables = None
    if gspec is not None and cfg.ec_mode in ("mlp", "all"):
        ec_dense = []
        for layer in model.dense_layers():
            ec_dense.append(np.zeros_like(layer.weight))
            ec_dense.append(np.zeros_like(layer.bias))
    if gspec is not None and cfg.ec_mode == "all":
        ec_tables = [np.zeros_like(t.weight) for t in model.tables]

    buffer_clean = False
    for j, batch in enumerate(batches):
        model.refresh_scales(start_iteration + j)
        if buffer_clean:
            buffers.zero()
            buffer_clean = False
        logits, cache = model.forward(batch, with_cache=True)
        loss, dgrads, sgrads = model.loss_and_backward(batch, logits, cache)
        buffers.accumulate(_flatten_dense(dgrads), sgrads, gspec, ec_dense, ec_tables)
        if buffers.count == n:
            buffers.apply(model, lr)
            buffer_clean = True
        if on_step is not None:
            on_step(j, loss, buffers)
    if 0 < buffers.count < n:
        buffers.apply(model, lr)  # trailing partial group flushes with its true size
    return model
