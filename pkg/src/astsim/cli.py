"""Command-line entry point: ``astsim <subcommand> [flags]``.

Exit codes: 0 on success, 2 on bad flags (argparse), 1 on runtime failure
with a ``error [stage]: message`` line on stderr.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import sys
from pathlib import Path

import numpy as np
import torch

from . import evalsim
from .meshstate import Schema, build_frame_pair, normalize_to_unit_cell
from .model import AstConfig, ConfigError, StageError, config_fields, config_from_dict, read_kv_file
from .mseq import load_dataset, save_dataset
from .synthetic import KINDS
from .training import TrainConfig, train

log = logging.getLogger("astsim")

HELP_WIDTH = 100
TRAIN_KEYS = {f.name for f in dataclasses.fields(TrainConfig)} - {"steps_per_epoch", "loss_weights", "noise"}
MODEL_FLAGS = {"L_cell": "--L-cell", "l_ocnn": "--l-ocnn", "d_token": "--d-token", "L_SA": "--L-SA",
               "n_tokens": "--n-tokens", "noise": "--noise"}


class CliError(RuntimeError):
    def __init__(self, stage: str, message: str):
        super().__init__(message)
        self.stage = stage


def _formatter(prog):
    return argparse.HelpFormatter(prog, width=HELP_WIDTH)


def _int_list(text: str) -> list[int]:
    try:
        out = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")
    if not out:
        raise argparse.ArgumentTypeError("empty list")
    return out


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False, formatter_class=_formatter)
    common.add_argument("--config", type=Path, help="key: value file; flags take precedence")
    common.add_argument("--seed", type=int, help="random seed (default 0)")
    common.add_argument("--out", type=Path, help="output directory")
    common.add_argument("--threads", type=int, help="cap on torch intra-op threads")

    model = argparse.ArgumentParser(add_help=False, formatter_class=_formatter)
    model.add_argument("--L-cell", type=int, help="leaf octree level (default 5)")
    model.add_argument("--l-ocnn", type=int, help="sparse-conv layers between leaf and token level (default 0)")
    model.add_argument("--d-token", type=int, help="token width (default 256)")
    model.add_argument("--L-SA", type=int, help="self-attention layers (default 12)")
    model.add_argument("--n-tokens", type=int, help="number of latent tokens (default 256)")
    model.add_argument("--noise", type=float, help="training position noise std (default 0.003)")

    training = argparse.ArgumentParser(add_help=False, formatter_class=_formatter)
    training.add_argument("--epochs", type=int, help="training epochs (default 100)")
    training.add_argument("--batch", type=int, help="graphs per step (default 48)")
    training.add_argument("--train-data", type=Path, required=True, help="training dataset directory")
    training.add_argument("--val-data", type=Path, help="validation dataset directory")

    p = argparse.ArgumentParser(prog="astsim", formatter_class=_formatter,
                                description="Learned mesh simulation with adaptive spatial tokens.")
    sub = p.add_subparsers(dest="command", required=True, metavar="<command>")

    g = sub.add_parser("gen-data", parents=[common], formatter_class=_formatter,
                       help="generate a synthetic dataset", description="Generate a synthetic dataset.")
    g.add_argument("--kind", choices=KINDS, default="two-blob-contact", help="scene type")
    g.add_argument("--size", type=int, default=200, help="nodes per sequence")
    g.add_argument("--sequences", type=int, default=4, help="number of sequences")
    g.add_argument("--frames", type=int, default=30, help="frames per sequence")

    sub.add_parser("train", parents=[common, model, training], formatter_class=_formatter,
                   help="train a model", description="Train a model; writes checkpoints and metrics.csv.")

    r = sub.add_parser("rollout", parents=[common], formatter_class=_formatter,
                       help="roll out a trained model", description="Roll out a model; writes OBJ/CSV frames.")
    r.add_argument("--checkpoint", type=Path, required=True, help="checkpoint directory")
    r.add_argument("--data", type=Path, required=True, help="dataset directory")
    r.add_argument("--save-data", action="store_true", help="also write the rollout as a dataset")

    e = sub.add_parser("eval", parents=[common], formatter_class=_formatter,
                       help="RMSE against ground truth and persistence",
                       description="Displacement RMSE of a model (or a predicted dataset) and the persistence "
                                   "baseline.")
    e.add_argument("--data", type=Path, required=True, help="ground-truth dataset directory")
    e.add_argument("--checkpoint", type=Path, help="checkpoint to roll out")
    e.add_argument("--pred", type=Path, help="predicted dataset directory")

    i = sub.add_parser("inspect-cells", parents=[common, model], formatter_class=_formatter,
                       help="export the octree of one frame", description="Export non-empty cells of one frame.")
    i.add_argument("--data", type=Path, required=True, help="dataset directory")
    i.add_argument("--sequence", type=int, default=0, help="sequence index")
    i.add_argument("--frame", type=int, default=0, help="frame index")

    s = sub.add_parser("sweep-cells", parents=[common, model, training], formatter_class=_formatter,
                       help="train once per leaf level", description="Validation loss per leaf level.")
    s.add_argument("--levels", type=_int_list, required=True, help="comma-separated leaf levels")

    b = sub.add_parser("bench", parents=[common], formatter_class=_formatter,
                       help="cell path vs pairwise oracle timings",
                       description="Time cell build + aggregation against the pairwise radius oracle.")
    b.add_argument("--sizes", type=_int_list, default=[10_000, 20_000, 40_000, 80_000],
                   help="comma-separated node counts")
    b.add_argument("--repeats", type=int, default=5, help="repeats per size (median reported)")
    b.add_argument("--level", type=int, default=AstConfig.L_cell, help="leaf level of the cell path")
    return p


def _config_values(args) -> dict[str, str]:
    return read_kv_file(args.config) if getattr(args, "config", None) else {}


def resolve_configs(args) -> tuple[AstConfig, TrainConfig]:
    """Defaults < config file < flags."""
    values = _config_values(args)
    model_keys = config_fields()
    unknown = set(values) - set(model_keys) - TRAIN_KEYS
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
    model_vals = {k: v for k, v in values.items() if k in model_keys}
    for field, flag in MODEL_FLAGS.items():
        v = getattr(args, flag.lstrip("-").replace("-", "_"), None)
        if v is not None:
            model_vals[field] = str(v)
    cfg = config_from_dict(model_vals)
    kinds = {f.name: f.type for f in dataclasses.fields(TrainConfig)}
    train_vals = {}
    for k, v in values.items():
        if k in TRAIN_KEYS:
            train_vals[k] = float(v) if kinds[k] == "float" else int(v)
    for k in ("epochs", "batch", "seed"):
        v = getattr(args, k, None)
        if v is not None:
            train_vals[k] = v
    tc = TrainConfig(**train_vals)
    tc.validate()
    return cfg, tc


def _out(args, default: str) -> Path:
    out = args.out if args.out is not None else Path(default)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load(path: Path, stage: str):
    try:
        return load_dataset(path)
    except Exception as exc:
        raise CliError(stage, f"{path}: {exc}") from exc


def cmd_gen_data(args) -> None:
    seed = 0 if args.seed is None else args.seed
    ds = evalsim.gen_synthetic(args.kind, args.size, args.sequences, seed, frames=args.frames)
    out = _out(args, "data")
    save_dataset(ds, out)
    print(f"wrote {len(ds.sequences)} sequences to {out}")


def cmd_train(args) -> None:
    cfg, tc = resolve_configs(args)
    train_ds = _load(args.train_data, "load")
    val_ds = _load(args.val_data, "load") if args.val_data else None
    res = train(cfg, tc, train_ds, val_ds, _out(args, "run"))
    print(f"best validation loss {res.best_val!r}; checkpoints in {res.out_dir}")


def _rollouts(sim, ds):
    return [evalsim.rollout(sim, s) for s in ds.sequences]


def cmd_rollout(args) -> None:
    sim = evalsim.Simulator.from_checkpoint(args.checkpoint)
    ds = _load(args.data, "load")
    out = _out(args, "rollout")
    results = _rollouts(sim, ds)
    for k, (res, seq) in enumerate(zip(results, ds.sequences)):
        evalsim.export_rollout(out / f"seq_{k:04d}", res, seq)
    if args.save_data:
        save_dataset(_as_dataset(ds, results), out / "dataset")
    print(f"rolled out {len(results)} sequences to {out}")


def _as_dataset(ds, results):
    seqs = []
    for seq, res in zip(ds.sequences, results):
        fields = dict(seq.element_fields)
        if res.element is not None:
            col = 0
            for name in ds.schema.element_targets:
                w = fields[name].shape[-1]
                fields[name] = res.element[..., col : col + w].astype(np.float32)
                col += w
        seqs.append(dataclasses.replace(seq, positions=res.positions.astype(np.float32), element_fields=fields))
    return dataclasses.replace(ds, sequences=seqs)


def cmd_eval(args) -> None:
    gt = _load(args.data, "load")
    rows = []
    base = [evalsim.persistence_baseline(s) for s in gt.sequences]
    rows.append({"method": "persistence", "displacement_rmse": evalsim.displacement_rmse(base, gt.sequences)})
    if args.pred is not None:
        pred = _load(args.pred, "load")
        if len(pred.sequences) != len(gt.sequences):
            raise CliError("eval", "predicted and ground-truth datasets differ in sequence count")
        res = [evalsim.RolloutResult(p.positions.astype(np.float64), None, np.zeros(len(p)))
               for p in pred.sequences]
        rows.append({"method": "pred", "displacement_rmse": evalsim.displacement_rmse(res, gt.sequences)})
    if args.checkpoint is not None:
        sim = evalsim.Simulator.from_checkpoint(args.checkpoint)
        res = _rollouts(sim, gt)
        rows.append({"method": "model", "displacement_rmse": evalsim.displacement_rmse(res, gt.sequences)})
        rows.append({"method": "model_1step_mse", "displacement_rmse": evalsim.one_step_mse(sim, gt)})
        rows.append({"method": "persistence_1step_mse",
                     "displacement_rmse": evalsim.persistence_one_step_mse(gt, sim.schema.history)})
    out = _out(args, "eval")
    evalsim.write_csv(out / "eval.csv", rows)
    print((out / "eval.csv").read_text(), end="")


def cmd_inspect_cells(args) -> None:
    cfg, _ = resolve_configs(args)
    ds = _load(args.data, "load")
    unit, _ = normalize_to_unit_cell(ds)
    if not 0 <= args.sequence < len(unit.sequences):
        raise CliError("inspect-cells", f"sequence {args.sequence} out of range")
    seq = unit.sequences[args.sequence]
    if not 0 <= args.frame < len(seq):
        raise CliError("inspect-cells", f"frame {args.frame} out of range")
    pos = np.clip(seq.positions[args.frame].astype(np.float64), -1, 1)
    schema = Schema(mesh_inputs=("node_type", "displacement"), element_inputs=(), mesh_targets=("velocity",))
    t = min(args.frame, len(seq) - 2)
    feats = build_frame_pair(seq, t, schema, positions=pos).input.mesh_features
    rows = evalsim.export_cells(_out(args, "cells"), pos, feats, cfg.L_cell, cfg.token_level)
    for lev in range(cfg.token_level, cfg.L_cell + 1):
        n = sum(1 for r in rows if r["level"] == lev)
        print(f"level {lev}: {n} cells, {len(pos) / n:.3f} nodes per cell")


def cmd_sweep_cells(args) -> None:
    cfg, tc = resolve_configs(args)
    train_ds = _load(args.train_data, "load")
    val_ds = _load(args.val_data, "load") if args.val_data else train_ds
    out = _out(args, "sweep")
    rows = evalsim.sweep_cell_level(train_ds, val_ds, args.levels, cfg, tc, out)
    evalsim.write_csv(out / "sweep.csv", rows)
    print((out / "sweep.csv").read_text(), end="")


def cmd_bench(args) -> None:
    seed = 0 if args.seed is None else args.seed
    rows = evalsim.bench_scaling(args.sizes, repeats=args.repeats, level=args.level, seed=seed)
    out = _out(args, "bench")
    evalsim.write_csv(out / "bench.csv", rows)
    print((out / "bench.csv").read_text(), end="")


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "rollout": cmd_rollout,
    "eval": cmd_eval,
    "inspect-cells": cmd_inspect_cells,
    "sweep-cells": cmd_sweep_cells,
    "bench": cmd_bench,
}


def _setup_logging() -> None:
    level = os.environ.get("AST_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s")


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    _setup_logging()
    if args.threads is not None:
        if args.threads < 1:
            print("error [args]: --threads must be >= 1", file=sys.stderr)
            return 2
        torch.set_num_threads(args.threads)
    try:
        COMMANDS[args.command](args)
    except CliError as exc:
        print(f"error [{exc.stage}]: {exc}", file=sys.stderr)
        return 1
    except StageError as exc:
        print(f"error [{args.command}] {exc}", file=sys.stderr)
        return 1
    except ConfigError as exc:
        print(f"error [config]: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001  every runtime failure maps to exit 1
        log.debug("failure", exc_info=True)
        print(f"error [{args.command}]: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
