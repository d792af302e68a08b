"""Run configuration: plain key=value files with CLI override precedence.

The fully resolved configuration is embedded in every run's metrics-log
header, so a run is reproducible from its log alone.
"""

import dataclasses
from dataclasses import dataclass

from .comm import DpConfig
from .data import SynthSpec
from .model import ModelConfig

# mlperf-style Criteo Kaggle shape: 26 tables, the standard per-table
# cardinalities, 16-wide embeddings
KAGGLE_TABLE_ROWS = (
    1460, 583, 10131227, 2202608, 305, 24, 12517, 633, 3, 93145, 5683,
    8351593, 3194, 27, 14992, 5461306, 10, 5652, 2173, 4, 7046547, 18, 15,
    286181, 105, 142572,
)

ARCH_PRESETS = {
    "kaggle": dict(
        table_rows=KAGGLE_TABLE_ROWS,
        embed_dim=16,
        bottom_arch=(13, 512, 256, 64, 16),
        top_arch=(512, 256, 1),
    ),
    "tiny": dict(
        table_rows=(100,) * 8,
        embed_dim=8,
        bottom_arch=(13, 32, 8),
        top_arch=(16, 1),
    ),
}


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    # model shape
    arch: str = ""  # optional preset (kaggle, tiny); explicit keys override it
    table_rows: tuple = (100,) * 8
    embed_dim: int = 8
    dense_in: int = 13
    bottom_arch: tuple = (13, 32, 8)
    top_arch: tuple = (16, 1)
    # quantization
    emb_bits: int = 4
    mlp_bits: int = 4
    mlp_granularity: str = "channel"
    act_bits: int = 32
    period: int = 200
    # optimization
    lr: float = 0.1
    pretrain_epochs: int = 0
    epochs: int = 1
    batch_size: int = 128
    shuffle: bool = False
    # parallelism
    mode: str = "single"  # single | dp | simulated
    nodes: int = 1
    grad_bits: int = 32
    ec: str = "none"
    sparse_emb: bool = True
    index_bytes: int = 8
    # run control
    seed: int = 0
    eval_every: int = 0  # 0 = once per epoch
    out: str = "runs/out"
    # data
    data: str = "synth"  # TSV path or the literal "synth"
    test_data: str = ""  # TSV path; empty = synthetic test split
    synth_samples: int = 8192
    synth_test_samples: int = 2048
    synth_skew: float = 1.05
    synth_noise: float = 0.1

    def validate(self):
        if self.mode not in ("single", "dp", "simulated"):
            raise ConfigError(f"unknown mode {self.mode!r}")
        if self.epochs < 0 or self.batch_size < 1 or self.nodes < 1:
            raise ConfigError("epochs, batch_size, and nodes must be positive")
        if self.mode in ("dp", "simulated") and self.batch_size % self.nodes:
            raise ConfigError("batch_size must be divisible by nodes in dp/simulated mode")
        try:
            self.model_config()
            self.dp_config()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        return self

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            table_rows=self.table_rows,
            embed_dim=self.embed_dim,
            dense_in=self.dense_in,
            bottom_arch=self.bottom_arch,
            top_arch=self.top_arch,
            emb_bits=self.emb_bits,
            mlp_bits=self.mlp_bits,
            mlp_granularity=self.mlp_granularity,
            act_bits=self.act_bits,
            period=self.period,
            lr=self.lr,
            pretrain_epochs=self.pretrain_epochs,
        )

    def dp_config(self) -> DpConfig:
        return DpConfig(
            nodes=self.nodes,
            grad_bits=self.grad_bits,
            ec_mode=self.ec,
            sparse_emb=self.sparse_emb,
            index_bytes=self.index_bytes,
        )

    def synth_spec(self, test: bool = False) -> SynthSpec:
        # disjoint deterministic streams for the train and test splits
        return SynthSpec(
            num_samples=self.synth_test_samples if test else self.synth_samples,
            table_rows=self.table_rows,
            skew=self.synth_skew,
            noise=self.synth_noise,
            seed=self.seed + 1000003 if test else self.seed,
        )

    def resolved(self) -> dict:
        out = dataclasses.asdict(self)
        for key, value in out.items():
            if isinstance(value, tuple):
                out[key] = list(value)
        return out


_BOOL_WORDS = {"1": True, "0": False, "true": True, "false": False, "on": True, "off": False}


def _parse_value(name: str, text: str, target_type):
    text = text.strip()
    try:
        if target_type is bool:
            return _BOOL_WORDS[text.lower()]
        if target_type is int:
            return int(text)
        if target_type is float:
            return float(text)
        if target_type is tuple:
            sep = "-" if "-" in text and "," not in text else ","
            return tuple(int(p) for p in text.split(sep) if p != "")
        return text
    except (ValueError, KeyError) as exc:
        raise ConfigError(f"bad value for {name}: {text!r}") from exc


def parse_config_file(path) -> dict:
    """key=value lines; '#' starts a comment, blank lines ignored."""
    values = {}
    with open(path) as fh:
        for line_no, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{line_no}: expected key=value")
            key, text = line.split("=", 1)
            values[key.strip()] = text.strip()
    return values


def build_run_config(file_values: dict | None = None, overrides: dict | None = None) -> RunConfig:
    """Defaults < preset < config file < CLI overrides."""
    fields = {f.name: f.type for f in dataclasses.fields(RunConfig)}
    types = {
        name: (tuple if "tuple" in str(tp) else
               bool if "bool" in str(tp) else
               int if "int" in str(tp) else
               float if "float" in str(tp) else str)
        for name, tp in fields.items()
    }
    raw: dict = {}
    for source in (file_values or {}, overrides or {}):
        for key, value in source.items():
            if key not in fields:
                raise ConfigError(f"unknown config key: {key}")
            if value is None:
                continue
            raw[key] = value

    merged: dict = {}
    arch = raw.get("arch", "")
    if isinstance(arch, str) and arch:
        if arch not in ARCH_PRESETS:
            raise ConfigError(f"unknown arch preset: {arch}")
        merged.update(ARCH_PRESETS[arch])
        merged["arch"] = arch
    for key, value in raw.items():
        merged[key] = _parse_value(key, value, types[key]) if isinstance(value, str) else value
    return RunConfig(**merged).validate()
