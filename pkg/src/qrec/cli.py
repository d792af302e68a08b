"""Command-line operator surface.

Subcommands: train, eval, export, inspect, synth, comm-report.
Exit codes: 0 success, 2 config error, 3 data error, 4 divergence.
Set QREC_LOG_LEVEL=debug for verbose progress on stderr.
"""

import argparse
import json
import logging
import math
import os
import sys
from pathlib import Path

import numpy as np

from . import comm, data, kernels, metrics, modelio
from .config import ConfigError, RunConfig, build_run_config, parse_config_file
from .data import MalformedRecordError, SynthSpec
from .metrics import EvalAccumulator, MetricsLogger
from .model import DivergedError, Model, format_histogram, weight_histogram
from .modelio import ModelFormatError

log = logging.getLogger("qrec")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_DIVERGED = 4


def _load_samples(cfg: RunConfig, test: bool):
    """Featurized (dense, indices, label) sample list for a split."""
    path = cfg.test_data if test else cfg.data
    feat = data.Featurizer(cfg.table_rows)
    if (not test and path == "synth") or (test and path == ""):
        records = data.generate_synthetic(cfg.synth_spec(test=test))
    else:
        records = data.read_criteo(path)
    return [feat.transform(r) for r in records]


def _batch_list(samples, batch_size, drop_last):
    return list(data.make_batches(samples, batch_size, drop_last=drop_last))


def _evaluate(model: Model, batches) -> dict:
    acc = EvalAccumulator()
    for batch in batches:
        scores = model.predict(batch)
        p = np.clip(scores, 1e-7, 1 - 1e-7)
        y = batch.labels.astype(np.float64)
        loss_sum = float(-(y * np.log(p) + (1 - y) * np.log1p(-p)).sum())
        acc.add(scores, batch.labels, loss_sum, batch.num_samples)
    try:
        auc = acc.roc_auc()
    except ValueError:
        auc = None
    return {"test_acc": acc.accuracy(), "test_auc": auc, "test_loss": acc.mean_loss()}


def _train_accuracy(model: Model, batches) -> float:
    acc = EvalAccumulator()
    for batch in batches:
        acc.add(model.predict(batch), batch.labels)
    return acc.accuracy()


def run_training(cfg: RunConfig):
    """Full training run; returns (model, summary dict)."""
    out_dir = Path(cfg.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    model_cfg = cfg.model_config()
    dp_cfg = cfg.dp_config()
    model = Model(model_cfg, seed=cfg.seed)
    model.quant_enabled = model_cfg.pretrain_epochs == 0

    train_samples = _load_samples(cfg, test=False)
    test_samples = _load_samples(cfg, test=True)
    drop_last = cfg.mode in ("dp", "simulated")
    test_batches = _batch_list(test_samples, cfg.batch_size, drop_last=False)
    shuffle_rng = np.random.default_rng(cfg.seed + 7) if cfg.shuffle else None

    nodes = comm.make_nodes(model, dp_cfg) if cfg.mode == "dp" else None
    summary = {}
    with MetricsLogger(out_dir / "metrics.jsonl") as logger:
        logger.log(
            "header",
            config=cfg.resolved(),
            kernel_backend=kernels.BACKEND,
            parameter_count=model_cfg.parameter_count(),
        )
        iteration = 0
        for epoch in range(cfg.epochs):
            if not model.quant_enabled and epoch >= model_cfg.pretrain_epochs:
                model.quant_enabled = True
                if nodes:
                    for node in nodes:
                        node.model.quant_enabled = True
                logger.log("note", iteration=iteration, epoch=epoch, event="quantization enabled")
            order = train_samples
            if shuffle_rng is not None:
                perm = shuffle_rng.permutation(len(train_samples))
                order = [train_samples[i] for i in perm]
            batches = _batch_list(order, cfg.batch_size, drop_last)
            if cfg.mode == "simulated":
                micro = []
                for b in batches:
                    shard = cfg.batch_size // cfg.nodes
                    micro.extend(b.slice(i * shard, (i + 1) * shard) for i in range(cfg.nodes))

                def on_step(j, loss, buffers, epoch=epoch):
                    logger.log(
                        "train",
                        iteration=j,
                        epoch=epoch,
                        train_loss=loss,
                        group_size=buffers.count,
                    )

                comm.run_simulated_dp(
                    model, dp_cfg, micro, cfg.lr, start_iteration=iteration, on_step=on_step
                )
                iteration += len(micro)
            else:
                for batch in batches:
                    if nodes:
                        stats = comm.run_dp_step(nodes, batch, dp_cfg, iteration, cfg.lr)
                        loss = sum(stats.losses) / len(stats.losses)
                        logger.log(
                            "train",
                            iteration=iteration,
                            epoch=epoch,
                            train_loss=loss,
                            scale_updates=stats.scale_updates,
                            comm=stats.record.to_dict(),
                        )
                    else:
                        loss, updated = model.train_step(batch, iteration, cfg.lr)
                        logger.log(
                            "train",
                            iteration=iteration,
                            epoch=epoch,
                            train_loss=loss,
                            scale_updates=updated,
                        )
                    iteration += 1
                    if cfg.eval_every and iteration % cfg.eval_every == 0:
                        eval_model = nodes[0].model if nodes else model
                        logger.log("eval", iteration=iteration, epoch=epoch, **_evaluate(eval_model, test_batches))
            eval_model = nodes[0].model if nodes else model
            result = _evaluate(eval_model, test_batches)
            logger.log("eval", iteration=iteration, epoch=epoch, **result)
            log.info("epoch %d: %s", epoch, result)
            summary = result
        eval_model = nodes[0].model if nodes else model
        model_path = out_dir / "model.dqrm"
        modelio.export_model(eval_model, model_path)
        logger.log("export", iteration=iteration, path=str(model_path))
    summary["iterations"] = iteration
    return (nodes[0].model if nodes else model), summary


def cmd_train(args) -> int:
    cfg = _config_from_args(args)
    _, summary = run_training(cfg)
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


def cmd_eval(args) -> int:
    model = modelio.import_model(args.model)
    feat = data.Featurizer(model.config.table_rows)
    if args.data == "synth":
        spec = SynthSpec(
            num_samples=args.synth_samples,
            table_rows=model.config.table_rows,
            skew=args.synth_skew,
            noise=args.synth_noise,
            seed=args.seed,
        )
        records = data.generate_synthetic(spec)
    else:
        records = data.read_criteo(args.data)
    samples = [feat.transform(r) for r in records]
    batches = _batch_list(samples, args.batch_size, drop_last=False)
    result = _evaluate(model, batches)
    print(json.dumps(result, sort_keys=True))
    return EXIT_OK


def cmd_export(args) -> int:
    model = modelio.import_model(args.model)
    modelio.export_model(model, args.out)
    print(json.dumps({"out": args.out, "bytes": os.path.getsize(args.out)}))
    return EXIT_OK


def cmd_inspect(args) -> int:
    model = modelio.import_model(args.model)
    cfg = model.config
    if args.histogram is None:
        info = {
            "num_tables": cfg.num_tables,
            "table_rows": list(cfg.table_rows),
            "embed_dim": cfg.embed_dim,
            "bottom_arch": list(cfg.bottom_arch),
            "top_arch": list(cfg.top_arch),
            "mlp_granularity": cfg.mlp_granularity,
            "file_bytes": os.path.getsize(args.model),
            "parameter_count": cfg.parameter_count(),
        }
        print(json.dumps(info, sort_keys=True))
        return EXIT_OK
    table = model.tables[args.histogram]
    if args.range:
        lo, hi = (float(p) for p in args.range.split(","))
    else:
        bound = float(np.max(np.abs(table.weight))) or 1.0
        lo, hi = -bound, bound
    edges, master, quantized = weight_histogram(
        table, args.bins, (lo, hi), spec=model.emb_spec
    )
    sys.stdout.write("# master\n")
    sys.stdout.write(format_histogram(edges, master))
    if quantized is not None:
        sys.stdout.write("# quantized\n")
        sys.stdout.write(format_histogram(edges, quantized))
    return EXIT_OK


def cmd_synth(args) -> int:
    spec = SynthSpec(
        num_samples=args.samples,
        table_rows=tuple(int(r) for r in args.rows.split(",")),
        skew=args.skew,
        noise=args.noise,
        seed=args.seed,
    )
    count = data.write_criteo(data.generate_synthetic(spec), args.out)
    print(json.dumps({"out": args.out, "records": count}))
    return EXIT_OK


def comm_report(cfg: RunConfig) -> dict:
    """Closed-form per-iteration byte table across compression settings."""
    model_cfg = cfg.model_config()
    dp_cfg = cfg.dp_config()
    mlp_params = model_cfg.mlp_parameter_count()
    emb_params = sum(r * model_cfg.embed_dim for r in model_cfg.table_rows)
    n_mlp_tensors = 2 * len(model_cfg.layer_shapes())
    local_batch = max(1, cfg.batch_size // max(1, cfg.nodes))
    touched = [min(local_batch, r) for r in model_cfg.table_rows]

    def sparse_bytes(bits):
        per_value = {32: 4, 16: 2, 8: 1}[bits]
        idx = sum(dp_cfg.index_bytes * n for n in touched)
        values = sum(per_value * n * model_cfg.embed_dim for n in touched)
        scales = 0 if bits == 32 else 4 * len(touched)
        return idx, values, scales

    def mlp_bytes(bits):
        per_value = {32: 4, 16: 2, 8: 1}[bits]
        scales = 0 if bits == 32 else 4 * n_mlp_tensors
        return per_value * mlp_params, scales

    settings = {}
    settings["uncompressed"] = {"total_bytes": 4 * (mlp_params + emb_params)}
    for bits, name in ((32, "sparse_fp32"), (16, "sparse_int16"), (8, "sparse_int8")):
        mlp_v, mlp_s = mlp_bytes(bits)
        idx, values, scales = sparse_bytes(bits)
        settings[name] = {
            "mlp_value_bytes": mlp_v,
            "sparse_index_bytes": idx,
            "sparse_value_bytes": values,
            "scale_bytes": mlp_s + scales,
            "total_bytes": mlp_v + mlp_s + idx + values + scales,
        }
    return {
        "mlp_parameter_count": mlp_params,
        "embedding_weight_count": emb_params,
        "assumed_unique_rows_per_table": touched,
        "per_iteration": settings,
        "model_bytes_fp32": 4 * (mlp_params + emb_params),
        "model_bytes_int4_export": modelio.export_size(model_cfg),
    }


def cmd_comm_report(args) -> int:
    cfg = _config_from_args(args)
    print(json.dumps(comm_report(cfg), indent=2, sort_keys=True))
    return EXIT_OK


_TRAIN_KEYS = [f for f in RunConfig.__dataclass_fields__]


def _config_from_args(args) -> RunConfig:
    file_values = parse_config_file(args.config) if getattr(args, "config", None) else {}
    overrides = {}
    for key in _TRAIN_KEYS:
        value = getattr(args, key, None)
        if value is not None:
            overrides[key] = value
    return build_run_config(file_values, overrides)


def _add_config_flags(parser):
    parser.add_argument("--config", help="key=value config file")
    for key in _TRAIN_KEYS:
        flag = "--" + key.replace("_", "-")
        parser.add_argument(flag, dest=key, default=None, help=argparse.SUPPRESS)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="qrec",
        description="Quantization-aware CTR model training and the "
        "data-parallel gradient-compression simulator",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="run a training experiment")
    _add_config_flags(p_train)
    p_train.set_defaults(func=cmd_train)

    p_eval = sub.add_parser("eval", help="evaluate an exported model")
    p_eval.add_argument("--model", required=True)
    p_eval.add_argument("--data", default="synth", help="TSV path or 'synth'")
    p_eval.add_argument("--batch-size", type=int, default=256, dest="batch_size")
    p_eval.add_argument("--synth-samples", type=int, default=2048, dest="synth_samples")
    p_eval.add_argument("--synth-skew", type=float, default=1.05, dest="synth_skew")
    p_eval.add_argument("--synth-noise", type=float, default=0.1, dest="synth_noise")
    p_eval.add_argument("--seed", type=int, default=0)
    p_eval.set_defaults(func=cmd_eval)

    p_export = sub.add_parser("export", help="re-export a model container")
    p_export.add_argument("--model", required=True)
    p_export.add_argument("--out", required=True)
    p_export.set_defaults(func=cmd_export)

    p_inspect = sub.add_parser("inspect", help="print model info or weight histograms")
    p_inspect.add_argument("--model", required=True)
    p_inspect.add_argument("--histogram", type=int, default=None, help="table id")
    p_inspect.add_argument("--bins", type=int, default=32)
    p_inspect.add_argument("--range", default=None, help="lo,hi (default: symmetric maxabs)")
    p_inspect.set_defaults(func=cmd_inspect)

    p_synth = sub.add_parser("synth", help="write a synthetic Criteo-layout TSV")
    p_synth.add_argument("--out", required=True)
    p_synth.add_argument("--samples", type=int, default=10000)
    p_synth.add_argument("--rows", default="1000,1000,1000,1000", help="table rows, comma-separated")
    p_synth.add_argument("--skew", type=float, default=1.05)
    p_synth.add_argument("--noise", type=float, default=0.1)
    p_synth.add_argument("--seed", type=int, default=0)
    p_synth.set_defaults(func=cmd_synth)

    p_report = sub.add_parser("comm-report", help="closed-form communication byte table")
    _add_config_flags(p_report)
    p_report.set_defaults(func=cmd_comm_report)

    return parser


def main(argv=None) -> int:
    logging.basicConfig(
        stream=sys.stderr,
        level=os.environ.get("QREC_LOG_LEVEL", "WARNING").upper(),
        format="%(levelname)s %(name)s: %(message)s",
    )
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except DivergedError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (MalformedRecordError, ModelFormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (ConfigError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
