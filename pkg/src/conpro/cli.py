"""Command-line surface: gen-data, train, eval, embed, plot.

Every command resolves one flat config (defaults < file < CONPRO_SEED
< --set), writes its artifacts under the output directory, and drops a
`<command>.manifest.json` next to them recording the resolved config,
seed, tool version, and artifact list. With identical inputs and seed
every artifact is byte-identical across runs; only the manifest's
wall-time field varies.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time

import numpy as np

from . import __version__
from .config import RunConfig, parse_config
from .data import generate_synthetic, load_dataset, save_dataset, split_by_subject
from .evaluation import embedding_table, evaluate_model
from .plots import confusion_heatmap, severity_scatter, training_curves
from .trainer import Trainer, load_checkpoint, model_from_checkpoint, save_checkpoint


def _fmt(value: float) -> str:
    return "%.9g" % value


def _fill_paths(cfg: RunConfig) -> None:
    """Default artifact paths live under out_dir unless set explicitly."""
    if not cfg.data_path:
        cfg.data_path = os.path.join(cfg.out_dir, "dataset.cpds")
    if not cfg.checkpoint_path:
        cfg.checkpoint_path = os.path.join(cfg.out_dir, "checkpoint.cpk")
    if not cfg.embedding_path:
        cfg.embedding_path = os.path.join(cfg.out_dir, "embeddings.csv")


def _check_dims(ckpt_input_dim: int, data_dim: int) -> None:
    if ckpt_input_dim != data_dim:
        raise ValueError(
            f"dimension mismatch: checkpoint expects input_dim={ckpt_input_dim} "
            f"but the dataset has {data_dim} features"
        )


def cmd_gen_data(cfg: RunConfig) -> list[str]:
    ds = generate_synthetic(cfg.gen_config())
    save_dataset(ds, cfg.data_path)
    return [cfg.data_path]


def cmd_train(cfg: RunConfig) -> list[str]:
    ds = load_dataset(cfg.data_path)
    resume = load_checkpoint(cfg.resume_from) if cfg.resume_from else None
    trainer = Trainer(cfg.train_config(), ds, cfg.split_spec(), resume=resume)
    ckpt, records = trainer.train()
    save_checkpoint(cfg.checkpoint_path, ckpt)
    log_path = os.path.join(cfg.out_dir, "train_log.csv")
    with open(log_path, "w") as fh:
        fh.write("epoch,phase,loss,pref_acc\n")
        for r in records:
            fh.write(f"{r.epoch},{r.phase},{_fmt(r.loss)},{_fmt(r.pref_acc)}\n")
    artifacts = [cfg.checkpoint_path, log_path]
    if records:
        curves_path = os.path.join(cfg.out_dir, "train_curves.svg")
        training_curves(records, curves_path)
        artifacts.append(curves_path)
    return artifacts


def cmd_eval(cfg: RunConfig) -> list[str]:
    ckpt = load_checkpoint(cfg.checkpoint_path)
    ds = load_dataset(cfg.data_path)
    _check_dims(ckpt.dims().input_dim, ds.n_features)
    params = model_from_checkpoint(ckpt)
    splits = split_by_subject(ds, cfg.split_spec())
    report = evaluate_model(params, splits, cfg.probe_config())

    metrics_path = os.path.join(cfg.out_dir, "metrics.csv")
    with open(metrics_path, "w") as fh:
        fh.write("metric,value\n")
        for name, value in report.rows():
            fh.write(f"{name},{_fmt(value)}\n")
            print(f"{name} = {_fmt(value)}")

    confusion_path = os.path.join(cfg.out_dir, "confusion.csv")
    with open(confusion_path, "w") as fh:
        for row in report.confusion:
            fh.write(",".join(str(int(v)) for v in row) + "\n")

    heatmap_path = os.path.join(cfg.out_dir, "confusion.svg")
    confusion_heatmap(report.confusion, heatmap_path)
    return [metrics_path, confusion_path, heatmap_path]


def cmd_embed(cfg: RunConfig) -> list[str]:
    ckpt = load_checkpoint(cfg.checkpoint_path)
    ds = load_dataset(cfg.data_path)
    _check_dims(ckpt.dims().input_dim, ds.n_features)
    params = model_from_checkpoint(ckpt)
    splits = split_by_subject(ds, cfg.split_spec())
    table = embedding_table(params, splits.test)

    z_dim = table.embeddings.shape[1]
    header = "subject_id,severity,dist_to_anchor,pc1,pc2," + ",".join(
        f"z{j}" for j in range(z_dim)
    )
    with open(cfg.embedding_path, "w") as fh:
        fh.write(header + "\n")
        for i in range(table.subject_ids.shape[0]):
            cells = [
                str(int(table.subject_ids[i])),
                str(int(table.severities[i])),
                _fmt(table.dist_to_anchor[i]),
                _fmt(table.coords[i, 0]),
                _fmt(table.coords[i, 1]),
            ]
            cells.extend(_fmt(v) for v in table.embeddings[i])
            fh.write(",".join(cells) + "\n")
    return [cfg.embedding_path]


_EMBED_HEADER_PREFIX = ["subject_id", "severity", "dist_to_anchor", "pc1", "pc2"]


def cmd_plot(cfg: RunConfig) -> list[str]:
    path = cfg.embedding_path
    with open(path, "r") as fh:
        lines = [ln.rstrip("\n") for ln in fh if ln.strip()]
    if not lines:
        raise ValueError(f"embedding CSV {path!r} is empty")
    header = lines[0].split(",")
    if header[: len(_EMBED_HEADER_PREFIX)] != _EMBED_HEADER_PREFIX:
        raise ValueError(
            f"malformed embedding CSV header in {path!r}: expected it to start with "
            + ",".join(_EMBED_HEADER_PREFIX)
        )
    body = lines[1:]
    if not body:
        raise ValueError(f"embedding CSV {path!r} has no data rows")
    severities = []
    coords = []
    for idx, line in enumerate(body, start=2):
        cells = line.split(",")
        if len(cells) < len(_EMBED_HEADER_PREFIX):
            raise ValueError(f"embedding CSV row {idx} has too few columns")
        try:
            severities.append(int(cells[1]))
            coords.append((float(cells[3]), float(cells[4])))
        except ValueError:
            raise ValueError(f"embedding CSV row {idx} is not numeric") from None
    scatter_path = os.path.join(cfg.out_dir, "scatter.svg")
    severity_scatter(
        np.array(coords, dtype=np.float64),
        np.array(severities, dtype=np.int64),
        scatter_path,
    )
    return [scatter_path]


_COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "embed": cmd_embed,
    "plot": cmd_plot,
}


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="conpro",
        description="severity-ordered representation learning on synthetic data",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in _COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", default=None, help="key = value config file")
        p.add_argument(
            "--set",
            dest="overrides",
            action="append",
            default=[],
            metavar="KEY=VALUE",
            help="override one config key (repeatable)",
        )
        p.add_argument("--out", default=None, help="output directory")
    return parser


def _write_manifest(cfg: RunConfig, command: str, artifacts: list[str], wall: float) -> str:
    manifest = {
        "command": command,
        "config": cfg.resolved(),
        "seed": cfg.seed,
        "artifacts": sorted(artifacts),
        "tool_version": __version__,
        "wall_time_s": round(wall, 3),
    }
    path = os.path.join(cfg.out_dir, f"{command}.manifest.json")
    with open(path, "w") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=2)
        fh.write("\n")
    return path


def main(argv: list[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    started = time.perf_counter()
    try:
        cfg = parse_config(args.config, args.overrides)
        if args.out is not None:
            cfg.out_dir = args.out
        _fill_paths(cfg)
        os.makedirs(cfg.out_dir, exist_ok=True)
        artifacts = _COMMANDS[args.command](cfg)
        _write_manifest(cfg, args.command, artifacts, time.perf_counter() - started)
    except Exception as exc:  # surface one clean line, fail the run
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
