"""CTR model: quantized embedding bags + quantized MLPs + dot interaction.

Training keeps full-precision master weights and fake-quantizes them in the
forward pass (shadow-copy discipline: quantized values are never written
back into the masters).  Embedding tables carry one frozen scale each,
refreshed every ``period`` iterations by a full-table traversal; MLP layers
carry per-output-channel scales refreshed on the same period.  The backward
pass is explicit, with straight-through gradients across fake quantization.
"""

import hashlib
import math
from dataclasses import dataclass

import numpy as np

from . import kernels, quant
from .quant import Granularity, QuantSpec


class DivergedError(RuntimeError):
    """Raised when the training loss stops being finite."""


@dataclass
class ModelConfig:
    table_rows: tuple
    embed_dim: int = 16
    dense_in: int = 13
    bottom_arch: tuple = (13, 512, 256, 64, 16)
    top_arch: tuple = (512, 256, 1)
    emb_bits: int = 4
    mlp_bits: int = 4
    mlp_granularity: str = "channel"  # "channel" | "matrix"
    act_bits: int = 32
    period: int = 200
    lr: float = 0.1
    pretrain_epochs: int = 0

    def __post_init__(self):
        self.table_rows = tuple(int(r) for r in self.table_rows)
        self.bottom_arch = tuple(int(w) for w in self.bottom_arch)
        self.top_arch = tuple(int(w) for w in self.top_arch)
        if not self.table_rows or any(r < 1 for r in self.table_rows):
            raise ValueError("table_rows must be positive")
        if self.bottom_arch[0] != self.dense_in:
            raise ValueError("bottom arch must start at the dense input width")
        if self.bottom_arch[-1] != self.embed_dim:
            raise ValueError("bottom arch must end at the embedding dimension")
        if self.top_arch[-1] != 1:
            raise ValueError("top arch must end at a single logit")
        for bits in (self.emb_bits, self.mlp_bits, self.act_bits):
            if bits != 32 and bits not in quant.VALID_BITS:
                raise ValueError(f"unsupported bit-width {bits}")
        if self.mlp_granularity not in ("channel", "matrix"):
            raise ValueError("mlp_granularity must be 'channel' or 'matrix'")
        if self.period < 1:
            raise ValueError("period must be >= 1")
        if self.pretrain_epochs < 0:
            raise ValueError("pretrain_epochs must be >= 0")

    @property
    def num_tables(self) -> int:
        return len(self.table_rows)

    @property
    def num_interactions(self) -> int:
        k = self.num_tables + 1
        return k * (k - 1) // 2

    @property
    def top_in(self) -> int:
        return self.embed_dim + self.num_interactions

    @property
    def qat_from_scratch(self) -> bool:
        return self.pretrain_epochs == 0

    def parameter_count(self) -> int:
        """Total trainable scalars: embedding weights + MLP weights + biases."""
        total = sum(r * self.embed_dim for r in self.table_rows)
        total += self.mlp_parameter_count()
        return total

    def mlp_parameter_count(self) -> int:
        count = 0
        for in_dim, out_dim in self.layer_shapes():
            count += in_dim * out_dim + out_dim
        return count

    def layer_shapes(self):
        """(in_dim, out_dim) for every dense layer, bottom first."""
        shapes = []
        for i in range(len(self.bottom_arch) - 1):
            shapes.append((self.bottom_arch[i], self.bottom_arch[i + 1]))
        widths = (self.top_in,) + self.top_arch
        for i in range(len(widths) - 1):
            shapes.append((widths[i], widths[i + 1]))
        return shapes


@dataclass
class Batch:
    """One minibatch: dense features, per-table index bags, labels.

    ``offsets[t]`` has length B+1; sample b of table t uses
    ``indices[t][offsets[t][b]:offsets[t][b+1]]`` (CSR layout).
    """

    dense: np.ndarray
    indices: list
    offsets: list
    labels: np.ndarray

    @property
    def num_samples(self) -> int:
        return self.dense.shape[0]

    def slice(self, lo: int, hi: int) -> "Batch":
        idx, offs = [], []
        for t in range(len(self.indices)):
            start = int(self.offsets[t][lo])
            stop = int(self.offsets[t][hi])
            idx.append(self.indices[t][start:stop])
            offs.append(self.offsets[t][lo : hi + 1] - start)
        return Batch(self.dense[lo:hi], idx, offs, self.labels[lo:hi])


@dataclass
class SparseGradient:
    """Embedding-table gradient as (sorted unique row ids, value rows)."""

    table_id: int
    indices: np.ndarray  # (n,) int64, strictly increasing
    values: np.ndarray  # (n, d)

    @classmethod
    def from_raw(cls, table_id, raw_indices, raw_rows, dim, dtype=np.float32):
        """Coalesce per-sample rows: sort, deduplicate, sum duplicates."""
        raw_indices = np.asarray(raw_indices, dtype=np.int64)
        if raw_indices.size == 0:
            return cls(table_id, raw_indices, np.zeros((0, dim), dtype=dtype))
        uniq, inverse = np.unique(raw_indices, return_inverse=True)
        vals = np.zeros((uniq.shape[0], dim), dtype=dtype)
        np.add.at(vals, inverse, np.asarray(raw_rows, dtype=dtype))
        return cls(table_id, uniq, vals)

    def to_dense(self, rows: int) -> np.ndarray:
        out = np.zeros((rows, self.values.shape[1]), dtype=self.values.dtype)
        out[self.indices] = self.values
        return out


class EmbeddingTable:
    def __init__(self, rows, dim, rng, dtype=np.float32):
        bound = 1.0 / math.sqrt(rows)
        self.weight = rng.uniform(-bound, bound, size=(rows, dim)).astype(dtype)
        self.scale = None
        self.scale_iter = -1

    @property
    def rows(self) -> int:
        return self.weight.shape[0]

    @property
    def dim(self) -> int:
        return self.weight.shape[1]

    def maybe_update_scale(self, iteration: int, spec: QuantSpec) -> bool:
        """Refresh the frozen per-table scale when the period elapses.

        The recompute traverses the entire table; between refreshes the scale
        bytes stay untouched.  An uninitialized scale always refreshes.
        """
        if self.scale is not None and iteration % spec.update_period != 0:
            return False
        self.scale = quant.compute_scale(self.weight, spec)
        self.scale_iter = iteration
        return True

    def forward_bag(self, indices, offsets, spec) -> np.ndarray:
        """Sum-pooled bag lookup, fake-quantizing only the gathered rows.

        Never materializes a quantized copy of the full table; bit-identical
        to quantizing the whole table first and then gathering.
        """
        if indices.size and (indices.min() < 0 or indices.max() >= self.rows):
            raise IndexError("index out of range")
        if spec is None:
            return kernels.embedding_bag(self.weight, indices, offsets)
        return kernels.embedding_bag_fq(
            self.weight, indices, offsets, float(self.scale), spec.qmax
        )


class DenseLayer:
    def __init__(self, in_dim, out_dim, relu, rng, dtype=np.float32):
        std = math.sqrt(2.0 / (in_dim + out_dim))
        self.weight = rng.normal(0.0, std, size=(out_dim, in_dim)).astype(dtype)
        self.bias = np.zeros(out_dim, dtype=dtype)
        self.relu = relu
        self.scales = None
        self.scale_iter = -1

    def maybe_update_scales(self, iteration, spec, granularity) -> bool:
        if self.scales is not None and iteration % spec.update_period != 0:
            return False
        if granularity == "channel":
            self.scales = quant.per_channel_scales(self.weight, spec)
        else:
            self.scales = np.asarray([quant.compute_scale(self.weight, spec)], dtype=np.float32)
        self.scale_iter = iteration
        return True

    def effective_weight(self, spec, granularity) -> np.ndarray:
        """The weight the forward pass sees: fake-quantized unless bypassed."""
        if spec is None:
            return self.weight
        if granularity == "channel":
            return quant.fake_quantize_per_channel(self.weight, self.scales, spec)
        return quant.fake_quantize(self.weight, float(self.scales[0]), spec)


def interaction(z: np.ndarray, emb_outputs: list) -> np.ndarray:
    """Dense vector + all pairwise dot products of the stacked features.

    Stacks [z, e_1, .., e_k-1], takes the strictly-lower-triangle dot
    products in row-major (i > j) order, and concatenates them after z.
    """
    stacked = np.stack([z] + list(emb_outputs), axis=1)
    return _interaction_from_stack(z, stacked)[0]


def _interaction_from_stack(z, stacked):
    k = stacked.shape[1]
    ti, tj = np.tril_indices(k, -1)
    gram = np.matmul(stacked, stacked.transpose(0, 2, 1))
    pairs = gram[:, ti, tj]
    return np.concatenate([z, pairs], axis=1), (ti, tj)


def _interaction_backward(g_feat, stacked, tri, dim):
    """Split upstream feature grad into dz and per-input stack grads."""
    ti, tj = tri
    batch, k, _ = stacked.shape
    g_pairs = g_feat[:, dim:]
    gram_grad = np.zeros((batch, k, k), dtype=stacked.dtype)
    gram_grad[:, ti, tj] = g_pairs
    gram_grad += gram_grad.transpose(0, 2, 1)
    d_stack = np.matmul(gram_grad, stacked)
    d_stack[:, 0, :] += g_feat[:, :dim]
    return d_stack


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


BCE_EPS = 1e-7


class Model:
    """Full network with explicit forward/backward and SGD updates."""

    def __init__(self, config: ModelConfig, seed: int = 0, dtype=np.float32):
        self.config = config
        self.dtype = np.dtype(dtype)
        if self.dtype == np.float64 and (
            config.emb_bits != 32 or config.mlp_bits != 32 or config.act_bits != 32
        ):
            raise ValueError("float64 mode requires all bit-widths = 32 (bypass)")
        rng = np.random.default_rng(seed)
        self.tables = [
            EmbeddingTable(r, config.embed_dim, rng, self.dtype) for r in config.table_rows
        ]
        self.bottom = []
        self.top = []
        shapes = config.layer_shapes()
        n_bot = len(config.bottom_arch) - 1
        for i, (in_dim, out_dim) in enumerate(shapes):
            relu = i < n_bot or i < len(shapes) - 1
            layer = DenseLayer(in_dim, out_dim, relu, rng, self.dtype)
            (self.bottom if i < n_bot else self.top).append(layer)
        self.quant_enabled = True
        self._tri = np.tril_indices(config.num_tables + 1, -1)

    # -- quantization state ------------------------------------------------

    @property
    def emb_spec(self):
        if not self.quant_enabled or self.config.emb_bits == 32:
            return None
        return QuantSpec(
            self.config.emb_bits, Granularity.PER_TABLE, self.config.period
        )

    @property
    def mlp_spec(self):
        if not self.quant_enabled or self.config.mlp_bits == 32:
            return None
        gran = (
            Granularity.PER_CHANNEL
            if self.config.mlp_granularity == "channel"
            else Granularity.PER_TENSOR
        )
        return QuantSpec(self.config.mlp_bits, gran, self.config.period)

    @property
    def act_spec(self):
        if not self.quant_enabled or self.config.act_bits == 32:
            return None
        return QuantSpec(self.config.act_bits, Granularity.PER_TENSOR, 1)

    def dense_layers(self) -> list:
        return self.bottom + self.top

    def refresh_scales(self, iteration: int) -> int:
        """Periodic scale maintenance; call once per training iteration."""
        updated = 0
        espec = self.emb_spec
        if espec is not None:
            for table in self.tables:
                updated += table.maybe_update_scale(iteration, espec)
        mspec = self.mlp_spec
        if mspec is not None:
            for layer in self.dense_layers():
                updated += layer.maybe_update_scales(
                    iteration, mspec, self.config.mlp_granularity
                )
        return updated

    # -- forward / backward --------------------------------------------------

    def _mlp_chain(self, layers, x, spec, act_spec):
        cache = []
        a = x
        for layer in layers:
            w_hat = layer.effective_weight(spec, self.config.mlp_granularity)
            pre = a @ w_hat.T + layer.bias
            out = np.maximum(pre, 0.0) if layer.relu else pre
            if act_spec is not None and layer.relu:
                # dynamic per-tensor activation scale; STE makes backward a no-op
                s = quant.compute_scale(out, act_spec)
                out = quant.fake_quantize(out, s, act_spec)
            cache.append((a, w_hat, pre > 0 if layer.relu else None))
            a = out
        return a, cache

    def forward(self, batch: Batch, with_cache: bool = False):
        """Logits for a batch; scales must already be refreshed this iter."""
        x = np.ascontiguousarray(batch.dense, dtype=self.dtype)
        act_spec = self.act_spec
        z, bot_cache = self._mlp_chain(self.bottom, x, self.mlp_spec, act_spec)
        espec = self.emb_spec
        emb = [
            t.forward_bag(batch.indices[i], batch.offsets[i], espec)
            for i, t in enumerate(self.tables)
        ]
        stacked = np.stack([z] + emb, axis=1).astype(self.dtype, copy=False)
        feat, tri = _interaction_from_stack(z, stacked)
        out, top_cache = self._mlp_chain(self.top, feat, self.mlp_spec, act_spec)
        logits = out[:, 0]
        if not with_cache:
            return logits
        return logits, {"bot": bot_cache, "top": top_cache, "stacked": stacked, "tri": tri}

    def _mlp_backward(self, layers, cache, g):
        grads = []
        for layer, (x_in, w_hat, mask) in zip(reversed(layers), reversed(cache)):
            if mask is not None:
                g = g * mask
            grads.append((g.T @ x_in, g.sum(axis=0)))
            g = g @ w_hat
        grads.reverse()
        return grads, g

    def loss_and_backward(self, batch: Batch, logits, cache):
        """Mean BCE loss plus gradients for every parameter.

        Dense-layer gradients are taken w.r.t. the fake-quantized weights and
        passed straight through to the masters; embedding gradients come back
        as one coalesced sparse message per table.
        """
        y = np.ascontiguousarray(batch.labels, dtype=self.dtype)
        n = logits.shape[0]
        p = _sigmoid(logits)
        pc = np.clip(p, BCE_EPS, 1.0 - BCE_EPS)
        loss = float(-np.mean(y * np.log(pc) + (1.0 - y) * np.log1p(-pc)))
        if not math.isfinite(loss):
            raise DivergedError("diverged")

        g = ((p - y) / n)[:, None].astype(self.dtype, copy=False)
        top_grads, g_feat = self._mlp_backward(self.top, cache["top"], g)
        d_stack = _interaction_backward(
            g_feat, cache["stacked"], cache["tri"], self.config.embed_dim
        )
        sparse_grads = []
        for t in range(self.config.num_tables):
            counts = np.diff(batch.offsets[t])
            rows = np.repeat(d_stack[:, t + 1, :], counts, axis=0)
            sparse_grads.append(
                SparseGradient.from_raw(
                    t, batch.indices[t], rows, self.config.embed_dim, self.dtype
                )
            )
        bot_grads, _ = self._mlp_backward(self.bottom, cache["bot"], d_stack[:, 0, :])
        return loss, bot_grads + top_grads, sparse_grads

    # -- updates ---------------------------------------------------------------

    def apply_dense_grads(self, dense_grads, lr: float):
        for layer, (g_w, g_b) in zip(self.dense_layers(), dense_grads):
            sgd_step_dense(layer, g_w, g_b, lr)

    def apply_sparse_grads(self, sparse_grads, lr: float):
        for sgrad in sparse_grads:
            sgd_step_sparse(self.tables[sgrad.table_id], sgrad, lr)

    def train_step(self, batch: Batch, iteration: int, lr: float):
        """Single-replica step: refresh scales, forward, backward, SGD."""
        updated = self.refresh_scales(iteration)
        logits, cache = self.forward(batch, with_cache=True)
        loss, dense_grads, sparse_grads = self.loss_and_backward(batch, logits, cache)
        self.apply_dense_grads(dense_grads, lr)
        self.apply_sparse_grads(sparse_grads, lr)
        return loss, updated

    def predict(self, batch: Batch) -> np.ndarray:
        """Click probabilities (sigmoid of the logits); no state mutation."""
        return _sigmoid(self.forward(batch))

    # -- bookkeeping -------------------------------------------------------------

    def parameter_checksum(self) -> str:
        h = hashlib.blake2b(digest_size=16)
        for table in self.tables:
            h.update(table.weight.tobytes())
        for layer in self.dense_layers():
            h.update(layer.weight.tobytes())
            h.update(layer.bias.tobytes())
        return h.hexdigest()

    def clone(self) -> "Model":
        other = Model.__new__(Model)
        other.config = self.config
        other.dtype = self.dtype
        other.quant_enabled = self.quant_enabled
        other._tri = self._tri
        other.tables = []
        for t in self.tables:
            nt = EmbeddingTable.__new__(EmbeddingTable)
            nt.weight = t.weight.copy()
            nt.scale = t.scale
            nt.scale_iter = t.scale_iter
            other.tables.append(nt)
        other.bottom, other.top = [], []
        n_bot = len(self.bottom)
        for i, layer in enumerate(self.dense_layers()):
            nl = DenseLayer.__new__(DenseLayer)
            nl.weight = layer.weight.copy()
            nl.bias = layer.bias.copy()
            nl.relu = layer.relu
            nl.scales = None if layer.scales is None else layer.scales.copy()
            nl.scale_iter = layer.scale_iter
            (other.bottom if i < n_bot else other.top).append(nl)
        return other


def sgd_step_dense(layer: DenseLayer, g_weight, g_bias, lr: float):
    layer.weight -= (lr * g_weight).astype(layer.weight.dtype, copy=False)
    layer.bias -= (lr * g_bias).astype(layer.bias.dtype, copy=False)


def sgd_step_sparse(table: EmbeddingTable, sgrad: SparseGradient, lr: float):
    """Update only the rows named in the sparse gradient."""
    if sgrad.indices.size == 0:
        return
    table.weight[sgrad.indices] -= (lr * sgrad.values).astype(table.weight.dtype, copy=False)


def weight_histogram(table: EmbeddingTable, num_bins: int, value_range, spec=None):
    """Equal-width bin counts for master and fake-quantized table weights.

    Out-of-range values clamp into the end bins, so counts always sum to
    rows x dim.  Returns (edges, master_counts, quantized_counts); the
    quantized counts are None when quantization is bypassed.
    """
    lo, hi = float(value_range[0]), float(value_range[1])
    if not lo < hi:
        raise ValueError("empty histogram range")
    edges = np.linspace(lo, hi, num_bins + 1)
    master = np.histogram(np.clip(table.weight, lo, hi), bins=edges)[0]
    quantized = None
    if spec is not None and table.scale is not None:
        fq = quant.fake_quantize(table.weight, float(table.scale), spec)
        quantized = np.histogram(np.clip(fq, lo, hi), bins=edges)[0]
    return edges, master, quantized


def format_histogram(edges, counts) -> str:
    """One "bin_low bin_high count" line per bin."""
    lines = [
        f"{edges[i]:.9g} {edges[i + 1]:.9g} {int(counts[i])}" for i in range(len(counts))
    ]
    return "\n".join(lines) + "\n"
