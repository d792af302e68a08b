"""Criteo-format ingestion, feature transforms, and a synthetic generator.

A record is one tab-separated line: label, 13 integer count fields, 26
hex-string categorical fields (40 columns total); any field may be empty.
Categoricals map to embedding rows by 64-bit FNV-1a modulo the table size,
which trades collisions for not needing a vocabulary pass.
"""

import gzip
import math
from dataclasses import dataclass

import numpy as np

from .model import Batch

NUM_DENSE = 13
NUM_CATEGORICAL = 26

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
_U64 = 0xFFFFFFFFFFFFFFFF


class MalformedRecordError(ValueError):
    pass


@dataclass
class RawRecord:
    label: int
    dense: list  # 13 entries, int or None when missing
    cats: list  # 26 entries, str or None when missing


def parse_criteo_line(text: str, line_no: int = 0) -> RawRecord:
    fields = text.rstrip("\n").split("\t")
    if len(fields) != 1 + NUM_DENSE + NUM_CATEGORICAL:
        raise MalformedRecordError(
            f"malformed record at line {line_no}: expected 40 fields, got {len(fields)}"
        )
    label = int(fields[0])
    dense = [int(f) if f != "" else None for f in fields[1 : 1 + NUM_DENSE]]
    cats = [f if f != "" else None for f in fields[1 + NUM_DENSE :]]
    return RawRecord(label, dense, cats)


def read_criteo(path):
    """Parsed records from a TSV file; .gz paths are decompressed on the fly."""
    opener = gzip.open if str(path).endswith(".gz") else open
    with opener(path, "rt") as fh:
        for line_no, line in enumerate(fh, start=1):
            if line.strip() == "":
                continue
            yield parse_criteo_line(line, line_no)


def dense_transform(raw_dense) -> np.ndarray:
    """Count features -> log(1 + max(x, 0)); missing -> 0."""
    out = np.zeros(len(raw_dense), dtype=np.float32)
    for j, v in enumerate(raw_dense):
        if v is not None and v > 0:
            out[j] = math.log1p(v)
    return out


def fnv1a64(data: bytes) -> int:
    h = FNV_OFFSET
    for b in data:
        h = ((h ^ b) * FNV_PRIME) & _U64
    return h


def hash_categorical(value, table_rows: int) -> int:
    """Stable embedding row for a categorical token; missing -> row 0."""
    if value is None or value == "":
        return 0
    return fnv1a64(value.encode("utf-8")) % table_rows


class Featurizer:
    """Maps raw records onto a model's input layout.

    Consumes the first len(table_rows) categorical columns; extra columns in
    the record (e.g. Criteo's full 26 on a smaller model) are ignored.
    """

    def __init__(self, table_rows):
        self.table_rows = tuple(int(r) for r in table_rows)

    def transform(self, record: RawRecord):
        dense = dense_transform(record.dense)
        idx = np.asarray(
            [
                hash_categorical(record.cats[t], rows)
                for t, rows in enumerate(self.table_rows)
            ],
            dtype=np.int64,
        )
        return dense, idx, float(record.label)


@dataclass
class SynthSpec:
    """Reproducible desk-scale stand-in for the public CTR datasets."""

    num_samples: int
    table_rows: tuple
    skew: float = 1.05  # Zipf exponent; 0 = uniform
    noise: float = 0.1  # label flip probability
    seed: int = 0

    def __post_init__(self):
        self.table_rows = tuple(int(r) for r in self.table_rows)
        if self.num_samples < 0:
            raise ValueError("num_samples must be >= 0")
        if not self.table_rows:
            raise ValueError("table_rows must be nonempty")
        if not 0.0 <= self.noise <= 1.0:
            raise ValueError("noise must be in [0, 1]")
        if self.skew < 0.0:
            raise ValueError("skew must be >= 0")


def _zipf_cdf(rows: int, skew: float) -> np.ndarray:
    weights = (np.arange(1, rows + 1, dtype=np.float64)) ** (-skew)
    cdf = np.cumsum(weights)
    return cdf / cdf[-1]


class _PlantedLabeler:
    """Hidden scoring model the generator labels samples with: per-table
    effects on the hashed index, a dense-count term, and one pairwise
    interaction between the first two tables."""

    def __init__(self, spec: SynthSpec, rng):
        self.table_effects = [
            rng.normal(0.0, 1.0, size=rows) for rows in spec.table_rows
        ]
        self.dense_coef = rng.normal(0.0, 0.4, size=NUM_DENSE)
        self.pair_coef = 1.0 if len(spec.table_rows) >= 2 else 0.0
        n_tables = len(spec.table_rows)
        self.table_scale = 1.2 / math.sqrt(n_tables)

    def logit(self, hashed_idx, dense_logs) -> float:
        s = self.table_scale * sum(
            eff[i] for eff, i in zip(self.table_effects, hashed_idx)
        )
        s += float(self.dense_coef @ dense_logs) * 0.3
        if self.pair_coef:
            s += (
                self.pair_coef
                * self.table_effects[0][hashed_idx[0]]
                * self.table_effects[1][hashed_idx[1]]
                * 0.5
            )
        return s


def generate_synthetic(spec: SynthSpec):
    """Deterministic record stream: Zipf-skewed categoricals, Poisson counts,
    labels drawn from a fixed hidden model and flipped at the noise rate."""
    ss = np.random.SeedSequence(spec.seed)
    plant_rng, sample_rng = (np.random.default_rng(s) for s in ss.spawn(2))

    n_tables = len(spec.table_rows)
    hashed_lookup = [
        np.asarray(
            [hash_categorical(f"{k:08x}", rows) for k in range(rows)], dtype=np.int64
        )
        for rows in spec.table_rows
    ]
    labeler = _PlantedLabeler(spec, plant_rng)
    cdfs = [_zipf_cdf(rows, spec.skew) for rows in spec.table_rows]

    for _ in range(spec.num_samples):
        ranks = [
            int(np.searchsorted(cdfs[t], sample_rng.random(), side="right"))
            for t in range(n_tables)
        ]
        counts = sample_rng.poisson(3.0, size=NUM_DENSE)
        missing_dense = sample_rng.random(NUM_DENSE) < 0.05
        dense = [None if missing_dense[j] else int(counts[j]) for j in range(NUM_DENSE)]
        dense_logs = dense_transform(dense)

        hashed = [hashed_lookup[t][ranks[t]] for t in range(n_tables)]
        p = 1.0 / (1.0 + math.exp(-labeler.logit(hashed, dense_logs)))
        label = int(sample_rng.random() < p)
        if sample_rng.random() < spec.noise:
            label = 1 - label

        cats = [f"{ranks[t]:08x}" for t in range(n_tables)]
        cats += [None] * (NUM_CATEGORICAL - n_tables)
        yield RawRecord(label, dense, cats[:NUM_CATEGORICAL])


def record_to_line(record: RawRecord) -> str:
    fields = [str(record.label)]
    fields += ["" if v is None else str(v) for v in record.dense]
    fields += ["" if c is None else c for c in record.cats]
    return "\t".join(fields)


def write_criteo(records, path):
    count = 0
    with open(path, "w") as fh:
        for record in records:
            fh.write(record_to_line(record) + "\n")
            count += 1
    return count


def make_batches(samples, batch_size: int, drop_last: bool = False):
    """Group featurized (dense, indices, label) samples into Batch objects.

    Order-preserving; index bags are single-hot (one index per table per
    sample), which is what both Criteo traffic and the generator produce.
    """
    if batch_size < 1:
        raise ValueError("batch size must be >= 1")
    pending = []
    for sample in samples:
        pending.append(sample)
        if len(pending) == batch_size:
            yield _build_batch(pending)
            pending = []
    if pending and not drop_last:
        yield _build_batch(pending)


def _build_batch(samples) -> Batch:
    b = len(samples)
    dense = np.stack([s[0] for s in samples]).astype(np.float32)
    idx_matrix = np.stack([s[1] for s in samples])  # (B, n_tables)
    labels = np.asarray([s[2] for s in samples], dtype=np.float32)
    offsets = np.arange(b + 1, dtype=np.int64)
    indices = [np.ascontiguousarray(idx_matrix[:, t]) for t in range(idx_matrix.shape[1])]
    return Batch(dense, indices, [offsets] * idx_matrix.shape[1], labels)


def load_batches(path, table_rows, batch_size: int, drop_last: bool = False):
    feat = Featurizer(table_rows)
    return make_batches(
        (feat.transform(r) for r in read_criteo(path)), batch_size, drop_last
    )


def synthetic_batches(spec: SynthSpec, batch_size: int, drop_last: bool = False):
    feat = Featurizer(spec.table_rows)
    return make_batches(
        (feat.transform(r) for r in generate_synthetic(spec)), batch_size, drop_last
    )
