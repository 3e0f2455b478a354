"""Checkpoints: a text manifest plus one blob holding parameters and optimizer state.

Manifest lines (besides ``array.*`` blob entries)::

    format: ASTCKPT
    version: 1
    config.<field>: ...        model config
    meta.<key>: ...            trainer bookkeeping (epoch, step, best_val, ...)
    adam.step: 1234
    rng.numpy: {...}           numpy bit-generator state as JSON

Arrays: ``param.<name>``, ``adam_m.<name>``, ``adam_v.<name>`` (f32) and the
torch RNG state ``rng.torch`` (u8).
"""

from __future__ import annotations

import json
import os
import shutil
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .blobio import BlobWriter, ManifestError, parse_manifest, read_arrays, write_manifest
from .model import AstConfig, AstModel, config_from_dict, format_config
from .numerics import AdamState

MANIFEST = "manifest.txt"
BLOB = "state.bin"


@dataclass
class Checkpoint:
    model: AstModel
    adam: AdamState
    meta: dict[str, str] = field(default_factory=dict)
    numpy_state: dict | None = None
    torch_state: torch.Tensor | None = None


def save_checkpoint(path: str | Path, model: AstModel, adam: AdamState | None = None,
                    meta: dict | None = None, rng: np.random.Generator | None = None) -> None:
    """Write atomically: into ``path.tmp`` first, then rename over ``path``."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    if tmp.exists():
        shutil.rmtree(tmp)
    tmp.mkdir(parents=True)
    lines = ["format: ASTCKPT", "version: 1"]
    lines += [f"config.{line}" for line in format_config(model.cfg).splitlines()]
    for k, v in sorted((meta or {}).items()):
        lines.append(f"meta.{k}: {v}")
    w = BlobWriter(tmp / BLOB)
    names = [n for n, _ in model.named_parameters()]
    for n, p in model.named_parameters():
        w.add(f"param.{n}", p.detach().cpu().numpy())
    if adam is not None and adam.m:
        lines.append(f"adam.step: {adam.step}")
        for n, m, v in zip(names, adam.m, adam.v):
            w.add(f"adam_m.{n}", m.cpu().numpy())
            w.add(f"adam_v.{n}", v.cpu().numpy())
    w.add("rng.torch", torch.get_rng_state().numpy())
    if rng is not None:
        lines.append(f"rng.numpy: {json.dumps(rng.bit_generator.state, sort_keys=True)}")
    w.close()
    write_manifest(tmp / MANIFEST, lines + w.lines)
    if path.exists():
        old = path.with_name(path.name + ".old")
        os.replace(path, old)
        os.replace(tmp, path)
        shutil.rmtree(old)
    else:
        os.replace(tmp, path)


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    entries = parse_manifest(path / MANIFEST)
    if entries.get("format") != "ASTCKPT":
        raise ManifestError(f"{path} is not a checkpoint")
    cfg = config_from_dict({k[len("config."):]: v for k, v in entries.items() if k.startswith("config.")},
                           AstConfig())
    arrays = read_arrays(path, entries)
    model = AstModel(cfg)
    state = {}
    for n, p in model.named_parameters():
        key = f"param.{n}"
        if key not in arrays:
            raise ManifestError(f"checkpoint missing parameter {n!r}")
        if arrays[key].shape != tuple(p.shape):
            raise ManifestError(f"parameter {n!r} has shape {arrays[key].shape}, expected {tuple(p.shape)}")
        state[n] = torch.from_numpy(arrays[key])
    model.load_state_dict(state, strict=True)
    adam = AdamState()
    if "adam.step" in entries:
        adam.step = int(entries["adam.step"])
        names = [n for n, _ in model.named_parameters()]
        adam.m = [torch.from_numpy(arrays[f"adam_m.{n}"]) for n in names]
        adam.v = [torch.from_numpy(arrays[f"adam_v.{n}"]) for n in names]
    meta = {k[len("meta."):]: v for k, v in entries.items() if k.startswith("meta.")}
    np_state = json.loads(entries["rng.numpy"]) if "rng.numpy" in entries else None
    torch_state = torch.from_numpy(arrays["rng.torch"]) if "rng.torch" in arrays else None
    return Checkpoint(model, adam, meta, np_state, torch_state)
