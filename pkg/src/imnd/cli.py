"""Command-line entry point: ``imnd <command> [options]``.

Exit codes: 0 success, 1 runtime failure, 2 configuration error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from . import dataset, eval_report, meta_trainer, plotting
from .config import load_config, toy_pack_path
from .dataset import ConfigError, ParseError, make_meta_splits, resolve_sequence, split_meta_task
from .denoiser import MODES, load_checkpoint, save_checkpoint
from .imu_model import synth_domain
from .nn_core import FormatError

log = logging.getLogger("imnd")


class RuntimeFailure(RuntimeError):
    pass


def _config(args):
    overrides = {}
    if getattr(args, "seed", None) is not None:
        overrides["run.seed"] = args.seed
    if getattr(args, "mode", None) is not None:
        overrides["run.mode"] = args.mode
    if getattr(args, "threads", None) is not None:
        overrides["run.threads"] = args.threads
    path = args.config
    if path == "toy":
        path = toy_pack_path()
    cfg = load_config(path, overrides)
    if getattr(args, "out", None):
        cfg.out = Path(args.out)
    torch.set_num_threads(cfg.threads)
    return cfg


def _data_dir(cfg):
    if cfg.data_dir is None and cfg.domains:
        return cfg.out / "data"
    return cfg.resolved_data_dir()


def _splits(cfg):
    return make_meta_splits(cfg.train_names, cfg.test_names, _data_dir(cfg), cfg.support_seconds)


def _checkpoint_path(cfg, args):
    if getattr(args, "checkpoint", None):
        return Path(args.checkpoint)
    return cfg.out / f"checkpoint_{cfg.train.mode}.imnd"


def _load(path):
    if not Path(path).is_file():
        raise RuntimeFailure(f"checkpoint not found: {path}")
    try:
        return load_checkpoint(path)
    except FormatError as exc:
        raise RuntimeFailure(f"{path}: {exc}") from exc


# ---------------------------------------------------------------------------
# commands


def cmd_simulate(cfg, args):
    if not cfg.domains:
        raise ConfigError("no [domain ...] sections to simulate")
    out = Path(args.out) / "data" if args.out else _data_dir(cfg)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {"domains": []}
    for spec in cfg.domains:
        _, seq = synth_domain(spec)
        dataset.write_canonical(seq, out / f"{spec.name}.csv")
        manifest["domains"].append({"name": spec.name, "profile": spec.profile, "seed": spec.seed,
                                    "duration": spec.duration, "rate": spec.rate, "samples": len(seq)})
        log.info("wrote %s (%d samples)", out / f"{spec.name}.csv", len(seq))
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    print(out)
    return 0


def cmd_ingest(cfg, args):
    parser = {"euroc": dataset.parse_euroc, "tumvi": dataset.parse_tumvi}[args.format]
    seq = parser(args.src, tag=args.name)
    out = Path(args.out) if args.out else _data_dir(cfg)
    path = out / f"{args.name or seq.domain_tag}.csv"
    dataset.write_canonical(seq, path)
    print(path)
    return 0


def cmd_train(cfg, args):
    if args.dry_run:
        sys.stdout.write(cfg.to_text())
        return 0
    train_tasks, _ = _splits(cfg)
    cfg.out.mkdir(parents=True, exist_ok=True)

    def progress(it, rows):
        if it % 20 == 0:
            log.info("iter %d  loss %s", it, " ".join(f"{r[2]:.4g}" for r in rows))

    result = meta_trainer.train(cfg.train, train_tasks, cfg.loss, cfg.arch, progress=progress)
    ck = _checkpoint_path(cfg, args)
    save_checkpoint(result.params, ck, cfg.loss, extra={"train": _train_meta(cfg),
                                                       "domains": [t.domain_tag for t in train_tasks]})
    (cfg.out / f"train_log_{cfg.train.mode}.csv").write_text(result.log_csv())
    (cfg.out / "resolved_config.ini").write_text(cfg.to_text())
    print(ck)
    return 0


def _train_meta(cfg):
    from dataclasses import asdict
    return asdict(cfg.train)


def _train_cfg_from(meta, cfg):
    """Training settings stored in a checkpoint, falling back to the run config."""
    stored = meta.get("train")
    return meta_trainer.TrainConfig(**stored) if stored else cfg.train


def cmd_adapt(cfg, args):
    params, loss_cfg, meta = _load(_checkpoint_path(cfg, args))
    tcfg = _train_cfg_from(meta, cfg)
    seq = resolve_sequence(args.sequence, _data_dir(cfg))
    task = split_meta_task(seq, cfg.support_seconds)
    adapted = meta_trainer.few_shot_adapt(params, task.support, loss_cfg, tcfg, seed=cfg.seed)
    cfg.out.mkdir(parents=True, exist_ok=True)
    path = cfg.out / f"checkpoint_{params.mode}_{args.sequence}.imnd"
    save_checkpoint(adapted, path, loss_cfg, extra={**{k: v for k, v in meta.items()
                                                       if k not in ("kind", "mode", "arch", "loss")},
                                                    "adapted_to": args.sequence})
    print(path)
    return 0


def cmd_eval(cfg, args):
    params, loss_cfg, meta = _load(_checkpoint_path(cfg, args))
    tcfg = _train_cfg_from(meta, cfg)
    _, test_tasks = _splits(cfg)
    label = params.mode + ("_adapt" if args.adapt else "")
    out = cfg.out / f"eval_{label}"
    rows = []
    for task in test_tasks:
        row, series = eval_report.evaluate(params, task, adapt=args.adapt, loss_cfg=loss_cfg,
                                           train_cfg=tcfg, seed=cfg.seed)
        rows.append(row)
        raw_row, raw_series = eval_report.evaluate_raw(task)
        (out / "series").mkdir(parents=True, exist_ok=True)
        (out / "series" / f"{task.domain_tag}.csv").write_text(eval_report.series_csv(series))
        plotting.orientation_figure(series, out / "figures" / f"{task.domain_tag}.png",
                                    title=f"{task.domain_tag} ({row.mode})", extra={"raw": raw_series})
        log.info("%s: rmse %s (raw %s)", task.domain_tag, np.round(row.rmse, 4), np.round(raw_row.rmse, 4))
    text, csv_text = eval_report.report_table(rows)
    (out / "report.txt").write_text(text)
    (out / "report.csv").write_text(csv_text)
    plotting.rmse_bar_figure(rows, out / "figures" / "rmse.png")
    sys.stdout.write(text)
    return 0


def cmd_export_embeddings(cfg, args):
    params, _, _ = _load(_checkpoint_path(cfg, args))
    train_tasks, test_tasks = _splits(cfg)
    seqs = [t.query for t in train_tasks + test_tasks]
    out = cfg.out / "embeddings.csv"
    eval_report.export_embeddings(params, seqs, out, seed=cfg.seed)
    tags, z = eval_report.read_embeddings(out)
    raw_tags, _, raw = eval_report.embedding_points(params, seqs, seed=cfg.seed, raw=True)
    acc_raw = eval_report.linear_probe_accuracy(raw_tags, raw, seed=cfg.seed)
    acc_emb = eval_report.linear_probe_accuracy(tags, z, seed=cfg.seed)
    summary = f"probe_accuracy_raw,{acc_raw:.4f}\nprobe_accuracy_embedding,{acc_emb:.4f}\n"
    (cfg.out / "probe.csv").write_text("metric,value\n" + summary)
    print(out)
    sys.stdout.write(summary)
    return 0


COMMANDS = {
    "simulate": cmd_simulate,
    "ingest": cmd_ingest,
    "train": cmd_train,
    "adapt": cmd_adapt,
    "eval": cmd_eval,
    "export-embeddings": cmd_export_embeddings,
}


def build_parser():
    parser = argparse.ArgumentParser(prog="imnd", description="Few-shot IMU gyroscope denoising.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, mode=True):
        p.add_argument("--config", help="config file, or 'toy' for the bundled toy pack")
        p.add_argument("--seed", type=int)
        p.add_argument("--threads", type=int)
        p.add_argument("--out", help="output directory")
        if mode:
            p.add_argument("--mode", choices=MODES)
        return p

    common(sub.add_parser("simulate", help="write the configured synthetic domains"), mode=False)
    p = common(sub.add_parser("ingest", help="convert a EuRoC/TUM-VI recording to canonical CSV"), mode=False)
    p.add_argument("--format", choices=("euroc", "tumvi"), required=True)
    p.add_argument("--name", help="sequence name for the output file")
    p.add_argument("src", help="recording directory (containing mav0/)")
    p = common(sub.add_parser("train", help="train a denoiser"))
    p.add_argument("--dry-run", action="store_true", help="print the resolved config and stop")
    p.add_argument("--checkpoint", help="output checkpoint path")
    p = common(sub.add_parser("adapt", help="few-shot adapt a checkpoint to one sequence"))
    p.add_argument("--checkpoint")
    p.add_argument("--sequence", required=True)
    p = common(sub.add_parser("eval", help="evaluate on the test split"))
    p.add_argument("--checkpoint")
    p.add_argument("--adapt", action="store_true", help="adapt on each support segment first")
    p = common(sub.add_parser("export-embeddings", help="dump per-sample embeddings"))
    p.add_argument("--checkpoint")
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _config(args)
        return COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        print(f"imnd: config error: {exc}", file=sys.stderr)
        return 2
    except (RuntimeFailure, ParseError, ValueError, OSError) as exc:
        print(f"imnd: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
