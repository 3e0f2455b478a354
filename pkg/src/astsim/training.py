"""Normalization statistics, noise injection, loss, LR schedule and the training loop."""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .checkpoint import load_checkpoint, save_checkpoint
from .meshstate import (Affine, FramePair, HeteroGraph, Schema, SequenceDataset, build_frame_pair,
                        element_input_width, element_target_width, mesh_input_width, normalize_to_unit_cell)
from .model import AstConfig, AstModel, collate, init_params
from .numerics import AdamState, DivergenceError, adam_step

log = logging.getLogger("astsim.training")

STD_FLOOR = 1e-8
WARMUP_START = 1e-4  # warmup starts at this fraction of the peak LR
GRAPH_FIELDS = {
    "mesh_x": "mesh_features",
    "elem_x": "element_features",
    "m2m_x": "m2m_features",
    "e2m_x": "e2m_features",
    "m2e_x": "m2e_features",
}
METRIC_COLUMNS = ("step", "epoch", "lr", "train_loss", "val_loss", "val_mesh", "val_element")


@dataclass(frozen=True)
class FieldStats:
    mean: np.ndarray
    std: np.ndarray

    def norm(self, x: np.ndarray) -> np.ndarray:
        return (np.asarray(x, np.float64) - self.mean) / self.std

    def denorm(self, y: np.ndarray) -> np.ndarray:
        return np.asarray(y, np.float64) * self.std + self.mean


@dataclass(frozen=True)
class NormStats:
    """Per-column mean/std for every graph feature array and target head."""

    fields: dict[str, FieldStats]

    def __getitem__(self, key: str) -> FieldStats:
        return self.fields[key]

    def apply(self, g: HeteroGraph) -> HeteroGraph:
        return dataclasses.replace(
            g, **{attr: self.fields[key].norm(getattr(g, attr)) for key, attr in GRAPH_FIELDS.items()}
        )

    def to_json(self) -> str:
        return json.dumps({k: [v.mean.tolist(), v.std.tolist()] for k, v in sorted(self.fields.items())})

    @classmethod
    def from_json(cls, text: str) -> "NormStats":
        raw = json.loads(text)
        return cls({k: FieldStats(np.array(m, np.float64), np.array(s, np.float64)) for k, (m, s) in raw.items()})


def _stats(rows: np.ndarray, width: int) -> FieldStats:
    rows = np.asarray(rows, np.float64).reshape(-1, width)
    if len(rows) == 0:
        return FieldStats(np.zeros(width), np.ones(width))
    return FieldStats(rows.mean(axis=0), np.maximum(rows.std(axis=0), STD_FLOOR))


def compute_norm_stats(ds: SequenceDataset, n_pairs: int = 400, seed: int = 0) -> NormStats:
    """Statistics over ``n_pairs`` random (frame, frame + 1) pairs, without noise."""
    pairs = ds.pairs()
    if not pairs:
        raise ValueError("dataset has no frame pairs")
    rng = np.random.default_rng(seed)
    chosen = np.sort(rng.choice(len(pairs), size=min(n_pairs, len(pairs)), replace=False))
    acc: dict[str, list] = {k: [] for k in (*GRAPH_FIELDS, "mesh_y", "elem_y")}
    for idx in chosen:
        s, t = pairs[idx]
        fp = build_frame_pair(ds.sequences[s], t, ds.schema)
        for key, attr in GRAPH_FIELDS.items():
            acc[key].append(getattr(fp.input, attr))
        acc["mesh_y"].append(fp.target.mesh[fp.target.mask])
        if fp.target.element is not None:
            acc["elem_y"].append(fp.target.element)
    out = {}
    for key, parts in acc.items():
        if not parts:
            continue
        width = parts[0].shape[1]
        out[key] = _stats(np.concatenate(parts), width)
    return NormStats(out)


def position_noise(n: int, free: np.ndarray, scale: float, rng: np.random.Generator) -> np.ndarray:
    noise = rng.normal(0.0, 1.0, (n, 3)) * scale if scale > 0 else np.zeros((n, 3))
    noise[~free] = 0.0
    return noise


def add_noise(ds: SequenceDataset, s: int, t: int, scale: float, rng: np.random.Generator) -> FramePair:
    """Frame pair with Gaussian noise on the current positions of non-scripted nodes.

    Position-derived inputs are recomputed from the noisy state and the
    target is measured from it, so the model is taught to undo the noise.
    """
    seq = ds.sequences[s]
    if scale == 0:
        return build_frame_pair(seq, t, ds.schema, seq_index=s)
    noisy = seq.positions[t].astype(np.float64) + position_noise(seq.n_nodes, seq.free_mask(), scale, rng)
    return build_frame_pair(seq, t, ds.schema, positions=noisy, seq_index=s)


@dataclass(frozen=True)
class TrainConfig:
    batch: int = 48
    base_lr: float = 1e-4
    warmup: int = 2000
    epochs: int = 100
    noise: float | None = None  # None: use the model config value
    loss_weights: tuple[float, ...] | None = None  # None: use the model config value
    seed: int = 0
    checkpoint_every: int = 10
    clip_norm: float = 1.0  # 0 disables clipping
    n_norm_pairs: int = 400
    steps_per_epoch: int | None = None  # None: ceil(train pairs / batch)

    def validate(self) -> None:
        if self.batch < 1 or self.epochs < 1 or self.warmup < 0 or self.base_lr <= 0:
            raise ValueError("batch, epochs and base_lr must be positive; warmup >= 0")
        if self.noise is not None and self.noise < 0:
            raise ValueError("noise must be >= 0")
        if self.steps_per_epoch is not None and self.steps_per_epoch < 1:
            raise ValueError("steps_per_epoch must be >= 1")

    @property
    def peak_lr(self) -> float:
        return self.base_lr * math.sqrt(self.batch / 2.0)

    def total_steps(self) -> int:
        """Step at which the cosine reaches zero: one epoch past the last."""
        if self.steps_per_epoch is None:
            raise ValueError("steps_per_epoch unresolved")
        return max((self.epochs + 1) * self.steps_per_epoch, self.warmup + 1)


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Linear warmup from WARMUP_START * peak, then cosine decay to zero."""
    peak = cfg.peak_lr
    if step < cfg.warmup:
        return peak * (WARMUP_START + (1.0 - WARMUP_START) * step / cfg.warmup)
    total = cfg.total_steps()
    if step >= total:
        return 0.0
    frac = (step - cfg.warmup) / (total - cfg.warmup)
    return peak * 0.5 * (1.0 + math.cos(math.pi * frac))


def loss(pred: dict[str, torch.Tensor], target: dict[str, torch.Tensor], weights, mask) -> torch.Tensor:
    """Weighted sum of per-head MSEs; ``mask`` selects the mesh rows that count."""
    mask = torch.as_tensor(np.asarray(mask, bool)) if not isinstance(mask, torch.Tensor) else mask.bool()
    if pred["mesh"].shape != target["mesh"].shape:
        raise ValueError("mesh prediction and target shapes differ")
    if not bool(mask.any()):
        raise ValueError("all entries masked")
    total = weights[0] * ((pred["mesh"] - target["mesh"])[mask] ** 2).mean()
    if "element" in pred and target.get("element") is not None:
        if pred["element"].shape != target["element"].shape:
            raise ValueError("element prediction and target shapes differ")
        total = total + weights[1] * ((pred["element"] - target["element"]) ** 2).mean()
    return total


@dataclass
class Sample:
    graph: HeteroGraph
    mesh_y: np.ndarray
    elem_y: np.ndarray | None
    mask: np.ndarray


def make_sample(fp: FramePair, stats: NormStats) -> Sample:
    elem = stats["elem_y"].norm(fp.target.element) if fp.target.element is not None else None
    return Sample(stats.apply(fp.input), stats["mesh_y"].norm(fp.target.mesh), elem, fp.target.mask)


def batch_targets(samples: list[Sample]) -> tuple[dict[str, torch.Tensor], torch.Tensor]:
    tgt = {"mesh": torch.from_numpy(np.concatenate([s.mesh_y for s in samples]).astype(np.float32))}
    if samples[0].elem_y is not None:
        tgt["element"] = torch.from_numpy(np.concatenate([s.elem_y for s in samples]).astype(np.float32))
    mask = torch.from_numpy(np.concatenate([s.mask for s in samples]))
    return tgt, mask


def fit_config(cfg: AstConfig, ds: SequenceDataset) -> AstConfig:
    """Fill the data-dependent widths of ``cfg`` from the dataset schema."""
    seq = ds.sequences[0]
    return dataclasses.replace(
        cfg,
        history=ds.schema.history,
        d_mesh_in=mesh_input_width(ds.schema, seq),
        d_elem_in=element_input_width(ds.schema, seq),
        d_mesh_out=3,
        d_elem_out=element_target_width(ds.schema, seq),
    )


@torch.no_grad()
def validate(model: AstModel, ds: SequenceDataset, stats: NormStats, weights, batch: int = 16) -> dict[str, float]:
    """1-step masked MSE per head in normalized target units, no noise."""
    was_training = model.training
    model.eval()
    sums = {"mesh": 0.0, "element": 0.0}
    counts = {"mesh": 0, "element": 0}
    pairs = ds.pairs()
    for i in range(0, len(pairs), batch):
        samples = [make_sample(build_frame_pair(ds.sequences[s], t, ds.schema), stats) for s, t in pairs[i : i + batch]]
        pred = model(collate([s.graph for s in samples], model.cfg))
        tgt, mask = batch_targets(samples)
        err = (pred["mesh"].double() - tgt["mesh"].double())[mask] ** 2
        sums["mesh"] += float(err.sum())
        counts["mesh"] += err.numel()
        if "element" in pred and "element" in tgt:
            err = (pred["element"].double() - tgt["element"].double()) ** 2
            sums["element"] += float(err.sum())
            counts["element"] += err.numel()
    model.train(was_training)
    out = {k: sums[k] / counts[k] if counts[k] else 0.0 for k in sums}
    out["total"] = weights[0] * out["mesh"] + (weights[1] * out["element"] if counts["element"] else 0.0)
    return out


@dataclass
class TrainResult:
    out_dir: Path
    model: AstModel
    stats: NormStats
    affine: Affine
    best_val: float
    rows: list[dict] = field(default_factory=list)


def _affine_json(a: Affine) -> str:
    return json.dumps({"scale": a.scale, "shift": np.asarray(a.shift).tolist()})


def affine_from_json(text: str) -> Affine:
    raw = json.loads(text)
    return Affine(float(raw["scale"]), np.array(raw["shift"], np.float64))


def schema_to_json(s: Schema) -> str:
    return json.dumps(dataclasses.asdict(s))


def schema_from_json(text: str) -> Schema:
    raw = json.loads(text)
    return Schema(**{k: tuple(v) if isinstance(v, list) else v for k, v in raw.items()})


def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, float) else str(v)


def _write_rows(path: Path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRIC_COLUMNS)
        for r in rows:
            w.writerow([_fmt(r[c]) for c in METRIC_COLUMNS])


def _read_rows(path: Path) -> list[dict]:
    if not path.exists():
        return []
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [{c: (int(r[c]) if c in ("step", "epoch") else float(r[c])) for c in METRIC_COLUMNS} for r in rows]


def train(model_cfg: AstConfig, train_cfg: TrainConfig, train_ds: SequenceDataset,
          val_ds: SequenceDataset | None, out_dir: str | Path, resume: bool = False) -> TrainResult:
    """Train on random frame pairs; writes metrics.csv and checkpoints under ``out_dir``.

    ``ckpt_last`` is rewritten after every epoch, ``ckpt_best`` whenever the
    validation loss improves, and ``ckpt_epoch_NNNN`` every
    ``checkpoint_every`` epochs. With ``resume`` the run continues from
    ``ckpt_last`` and reproduces the losses of an uninterrupted run.
    """
    train_cfg.validate()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    train_n, affine = normalize_to_unit_cell(train_ds)
    val_n = normalize_to_unit_cell(val_ds, affine=affine)[0] if val_ds is not None else None
    cfg = fit_config(model_cfg, train_n)
    noise = cfg.noise if train_cfg.noise is None else train_cfg.noise
    weights = tuple(cfg.loss_weights if train_cfg.loss_weights is None else train_cfg.loss_weights)
    pairs = train_n.pairs()
    if not pairs:
        raise ValueError("training set has no frame pairs")
    spe = train_cfg.steps_per_epoch or math.ceil(len(pairs) / train_cfg.batch)
    tc = dataclasses.replace(train_cfg, steps_per_epoch=spe)

    rng = np.random.default_rng(tc.seed)
    torch.manual_seed(tc.seed)
    rows: list[dict] = []
    start_epoch, step, best = 0, 0, math.inf
    last = out / "ckpt_last"
    if resume and last.exists():
        ck = load_checkpoint(last)
        model, adam = ck.model, ck.adam
        stats = NormStats.from_json(ck.meta["norm_stats"])
        start_epoch = int(ck.meta["epoch"]) + 1
        step = int(ck.meta["step"])
        best = float(ck.meta["best_val"])
        rng.bit_generator.state = ck.numpy_state
        torch.set_rng_state(ck.torch_state)
        rows = [r for r in _read_rows(out / "metrics.csv") if r["epoch"] < start_epoch]
    else:
        model = init_params(cfg, tc.seed)
        adam = AdamState()
        stats = compute_norm_stats(train_n, tc.n_norm_pairs, tc.seed)
    params = list(model.parameters())

    def meta(epoch: int) -> dict:
        return {
            "epoch": epoch,
            "step": step,
            "best_val": repr(best),
            "norm_stats": stats.to_json(),
            "affine": _affine_json(affine),
            "schema": schema_to_json(train_n.schema),
            "train_config": json.dumps(dataclasses.asdict(tc)),
        }

    for epoch in range(start_epoch, tc.epochs):
        model.train()
        perm = rng.permutation(len(pairs))
        losses = []
        for b in range(spe):
            idx = perm[(b * tc.batch) % len(perm):][: tc.batch]
            if len(idx) < tc.batch:
                idx = np.concatenate([idx, perm[: tc.batch - len(idx)]])
            samples = [make_sample(add_noise(train_n, *pairs[i], noise, rng), stats) for i in idx]
            pred = model(collate([s.graph for s in samples], cfg))
            tgt, mask = batch_targets(samples)
            value = loss(pred, tgt, weights, mask)
            if not torch.isfinite(value):
                raise DivergenceError(f"diverged: non-finite loss at step {step}; last good checkpoint kept")
            grads = torch.autograd.grad(value, params, allow_unused=True)
            grads = [torch.zeros_like(p) if g is None else g for p, g in zip(params, grads)]
            if tc.clip_norm > 0:
                norm = torch.sqrt(sum((g.double() ** 2).sum() for g in grads))
                if norm > tc.clip_norm:
                    grads = [g * (tc.clip_norm / float(norm)) for g in grads]
            adam_step(adam, params, grads, lr_at(step, tc))
            step += 1
            losses.append(float(value.detach()))
        train_loss = float(np.mean(losses))
        val = validate(model, val_n, stats, weights) if val_n is not None else {"total": train_loss, "mesh": 0.0,
                                                                                 "element": 0.0}
        row = {"step": step, "epoch": epoch, "lr": lr_at(step, tc), "train_loss": train_loss,
               "val_loss": val["total"], "val_mesh": val["mesh"], "val_element": val["element"]}
        rows.append(row)
        _write_rows(out / "metrics.csv", rows)
        log.info("epoch %d step %d train %.6g val %.6g", epoch, step, train_loss, val["total"])
        if val["total"] < best:
            best = val["total"]
            save_checkpoint(out / "ckpt_best", model, adam, meta(epoch), rng)
        if tc.checkpoint_every and (epoch + 1) % tc.checkpoint_every == 0:
            save_checkpoint(out / f"ckpt_epoch_{epoch + 1:04d}", model, adam, meta(epoch), rng)
        save_checkpoint(last, model, adam, meta(epoch), rng)
    return TrainResult(out, model, stats, affine, best, rows)
