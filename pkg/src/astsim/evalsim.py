"""Rollouts, error metrics, baselines, resolution sweeps, scaling benchmarks and exports."""

from __future__ import annotations

import csv
import dataclasses
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .checkpoint import load_checkpoint
from .graphops import as_index, mesh_to_cell_init
from .meshstate import Affine, Schema, Sequence, SequenceDataset, build_frame_pair, normalize_to_unit_cell
from .model import AstConfig, AstModel, collate
from .spatial import build_cell_set, cell_bounds, cell_coords, morton_keys
from .synthetic import gen_synthetic, lattice_points  # noqa: F401  (re-exported)
from .training import NormStats, TrainConfig, affine_from_json, make_sample, schema_from_json, train


class RolloutError(RuntimeError):
    pass


@dataclass
class Simulator:
    """A trained model with everything needed to run it on world-unit data."""

    model: AstModel
    stats: NormStats
    affine: Affine
    schema: Schema

    @classmethod
    def from_checkpoint(cls, path: str | Path) -> "Simulator":
        ck = load_checkpoint(path)
        return cls(ck.model, NormStats.from_json(ck.meta["norm_stats"]), affine_from_json(ck.meta["affine"]),
                   schema_from_json(ck.meta["schema"]))

    @property
    def cfg(self) -> AstConfig:
        return self.model.cfg


@dataclass
class RolloutResult:
    positions: np.ndarray  # (T, N, 3) world units
    element: np.ndarray | None  # (T, E, d) predicted element field, when the model has that head
    frame_times: np.ndarray  # (T,) seconds spent producing each frame (0 for given frames)


def _to_unit(seq: Sequence, affine: Affine) -> Sequence:
    ds = SequenceDataset([seq], Schema(), np.stack([seq.positions.reshape(-1, 3).min(0),
                                                     seq.positions.reshape(-1, 3).max(0)]))
    return normalize_to_unit_cell(ds, affine=affine)[0].sequences[0]


@torch.no_grad()
def predict_step(sim: Simulator, seq: Sequence, t: int, x_t: np.ndarray, x_prev: np.ndarray | None):
    """Next positions (unit-cell coordinates) and element output from the state at ``t``."""
    fp = build_frame_pair(seq, t, sim.schema, positions=x_t, prev_positions=x_prev)
    sample = make_sample(fp, sim.stats)
    pred = sim.model(collate([sample.graph], sim.cfg))
    delta = sim.stats["mesh_y"].denorm(pred["mesh"].double().numpy())
    if sim.schema.dynamic:
        x_next = 2.0 * x_t - x_prev + delta
    else:
        x_next = x_t + delta
    x_next[seq.boundary.nodes] = seq.boundary.positions[t + 1]
    elem = None
    if "element" in pred:
        elem = sim.stats["elem_y"].denorm(pred["element"].double().numpy())
    return x_next, elem


def rollout(sim: Simulator, seq: Sequence, n_frames: int | None = None) -> RolloutResult:
    """Autoregressive rollout from the first ``history + 1`` ground-truth frames.

    Scripted nodes follow the boundary script (in world units, exactly).
    Predicted element fields that are also model inputs are fed back.
    """
    sim.model.eval()
    T = len(seq) if n_frames is None else n_frames
    h = sim.schema.history
    if not h < T <= len(seq):
        raise ValueError(f"need history {h} < frames {T} <= {len(seq)}")
    unit = _to_unit(seq, sim.affine)
    pos = unit.positions.astype(np.float64).copy()
    fields = {k: np.array(v, copy=True) for k, v in unit.element_fields.items()}
    work = dataclasses.replace(unit, positions=pos, element_fields=fields)
    fed_back = [n for n in sim.schema.element_targets if n in sim.schema.element_inputs]
    elem_out = None
    times = np.zeros(T)
    for t in range(h, T - 1):
        t0 = time.perf_counter()
        x_next, elem = predict_step(sim, work, t, pos[t], pos[t - 1] if h >= 1 else None)
        if not np.isfinite(x_next).all() or (elem is not None and not np.isfinite(elem).all()):
            raise RolloutError(f"non-finite state at frame {t + 1}")
        pos[t + 1] = x_next
        if elem is not None:
            if elem_out is None:
                elem_out = np.zeros((T,) + elem.shape)
                for s in range(h + 1):
                    elem_out[s] = _stack_fields(seq, sim.schema.element_targets, s)
            elem_out[t + 1] = elem
            col = 0
            for name in sim.schema.element_targets:
                w = fields[name].shape[-1]
                if name in fed_back:
                    fields[name][t + 1] = elem[:, col : col + w]
                col += w
        times[t + 1] = time.perf_counter() - t0
    world = sim.affine.invert(pos[:T])
    world[:h + 1] = seq.positions[:h + 1]
    world[:, seq.boundary.nodes] = seq.boundary.positions[:T]
    return RolloutResult(world, elem_out, times)


def _stack_fields(seq: Sequence, names, t: int) -> np.ndarray:
    return np.concatenate([np.asarray(seq.element_field(n, t), np.float64).reshape(seq.n_elements, -1)
                           for n in names], axis=1)


def persistence_baseline(seq: Sequence, history: int = 0, element_targets=()) -> RolloutResult:
    """Free nodes keep their last given position; scripted nodes follow the script."""
    T = len(seq)
    pos = np.repeat(seq.positions[history : history + 1].astype(np.float64), T, axis=0)
    pos[: history + 1] = seq.positions[: history + 1]
    pos[:, seq.boundary.nodes] = seq.boundary.positions
    elem = None
    if element_targets:
        elem = np.repeat(_stack_fields(seq, element_targets, history)[None], T, axis=0)
    return RolloutResult(pos, elem, np.zeros(T))


def rmse(pred: list[np.ndarray], gt: list[np.ndarray]) -> float:
    """Per-sequence RMSE over all frames, nodes and components, averaged over sequences."""
    if len(pred) != len(gt) or not pred:
        raise ValueError("need equally many (>= 1) predicted and ground-truth sequences")
    out = []
    for p, g in zip(pred, gt):
        p, g = np.asarray(p, np.float64), np.asarray(g, np.float64)
        if p.shape != g.shape:
            raise ValueError(f"shape mismatch {p.shape} vs {g.shape}")
        out.append(np.sqrt(np.mean((p - g) ** 2)))
    return float(np.mean(out))


def displacement_rmse(results: list[RolloutResult], seqs: list[Sequence]) -> float:
    pred = [r.positions - s.positions[0] for r, s in zip(results, seqs)]
    gt = [s.positions.astype(np.float64) - s.positions[0] for s in seqs]
    return rmse(pred, gt)


def one_step_mse(sim: Simulator, ds: SequenceDataset) -> float:
    """Masked 1-step position MSE in world units over free nodes, no noise."""
    sim.model.eval()
    total, count = 0.0, 0
    h = sim.schema.history
    for seq in ds.sequences:
        unit = _to_unit(seq, sim.affine)
        free = seq.free_mask()
        for t in range(h, len(seq) - 1):
            x_next, _ = predict_step(sim, unit, t, unit.positions[t].astype(np.float64),
                                     unit.positions[t - 1].astype(np.float64) if h else None)
            err = sim.affine.invert(x_next)[free] - seq.positions[t + 1][free]
            total += float((err ** 2).sum())
            count += err.size
    return total / count


def persistence_one_step_mse(ds: SequenceDataset, history: int = 0) -> float:
    total, count = 0.0, 0
    for seq in ds.sequences:
        free = seq.free_mask()
        d = np.diff(seq.positions[history:].astype(np.float64), axis=0)[:, free]
        total += float((d ** 2).sum())
        count += d.size
    return total / count


def nodes_per_cell(ds: SequenceDataset, level: int) -> float:
    """Mean over sequences of N / non-empty leaf cells at frame 0 (unit-cell coordinates)."""
    unit, _ = normalize_to_unit_cell(ds)
    ratios = []
    for s in unit.sequences:
        p = np.clip(s.positions[0], -1, 1)
        cs = build_cell_set(p, level)
        ratios.append(len(p) / cs.n_cells(level))
    return float(np.mean(ratios))


def sweep_cell_level(train_ds: SequenceDataset, val_ds: SequenceDataset, levels, model_cfg: AstConfig,
                     train_cfg: TrainConfig, out_dir: str | Path) -> list[dict]:
    """Train one model per leaf level; report best validation loss and nodes per cell."""
    rows = []
    for L in levels:
        cfg = dataclasses.replace(model_cfg, L_cell=int(L), l_ocnn=min(model_cfg.l_ocnn, int(L)))
        res = train(cfg, train_cfg, train_ds, val_ds, Path(out_dir) / f"L{L}")
        rows.append({"L_cell": int(L), "nodes_per_cell": nodes_per_cell(train_ds, int(L)),
                     "val_loss": res.best_val})
    return rows


def bench_points(size: int, seed: int = 0) -> np.ndarray:
    """Two touching blobs of ``size`` jittered lattice points, scaled into the unit cell."""
    rng = np.random.default_rng(seed)
    a = lattice_points(size // 2, (0.3, 0.25, 0.25), rng)
    b = lattice_points(size - size // 2, (0.3, 0.25, 0.25), rng)
    a[:, 0] -= 0.3
    b[:, 0] += 0.3
    p = np.concatenate([a, b])
    return p / (np.abs(p).max() * 1.05)


def cell_path(points: np.ndarray, features: torch.Tensor, level: int) -> torch.Tensor:
    cs = build_cell_set(points, level)
    return mesh_to_cell_init(cs, features)


def world_edge_oracle(points: np.ndarray, radius: float, chunk: int = 2048) -> int:
    """Brute-force count of node pairs closer than ``radius`` (all n^2 distances)."""
    p = np.ascontiguousarray(points, np.float64)
    sq = (p ** 2).sum(axis=1)
    r2 = radius * radius
    count = 0
    for s in range(0, len(p), chunk):
        block = p[s : s + chunk]
        d2 = sq[s : s + chunk, None] + sq[None, :] - 2.0 * (block @ p.T)
        count += int((d2 < r2).sum())
    return (count - len(p)) // 2


def world_edge_pairs(points: np.ndarray, radius: float) -> set[tuple[int, int]]:
    d = np.linalg.norm(points[:, None] - points[None], axis=-1)
    i, j = np.nonzero(np.triu(d < radius, k=1))
    return set(zip(i.tolist(), j.tolist()))


def same_cell_pairs(points: np.ndarray, level: int) -> set[tuple[int, int]]:
    keys = morton_keys(cell_coords(points, level))
    i, j = np.nonzero(np.triu(keys[:, None] == keys[None], k=1))
    return set(zip(i.tolist(), j.tolist()))


def colocation_agreement(points: np.ndarray, level: int) -> dict[str, float]:
    """Compare same-leaf-cell pairs with radius pairs at r_W = cell side (approximate)."""
    side = 2.0 ** (1 - level)
    cells = same_cell_pairs(points, level)
    radius = world_edge_pairs(points, side)
    diag = world_edge_pairs(points, side * np.sqrt(3.0) * (1 + 1e-9))
    union = cells | radius
    return {
        "cell_pairs": len(cells),
        "radius_pairs": len(radius),
        "jaccard": len(cells & radius) / len(union) if union else 1.0,
        "cells_within_diagonal": float(len(cells - diag) == 0),
    }


def bench_scaling(sizes, repeats: int = 5, level: int = AstConfig.L_cell, width: int = 16, radius: float | None = None,
                  seed: int = 0) -> list[dict]:
    """Median wall time of cell build + aggregation vs the pairwise radius oracle."""
    radius = 2.0 ** (1 - level) if radius is None else radius
    sets = []
    for n in sizes:
        pts = bench_points(int(n), seed)
        feats = torch.from_numpy(np.random.default_rng(seed).normal(size=(len(pts), width)).astype(np.float32))
        sets.append((pts, feats))
    # Cell repeats go round-robin over sizes, so drift in machine speed hits every size alike. The oracle is timed
    # afterwards, so its traffic cannot evict the cell path's data.
    for pts, feats in sets:
        cell_path(pts, feats, level)
    cell_t = [[] for _ in sets]
    for _ in range(repeats):
        for times, (pts, feats) in zip(cell_t, sets):
            t0 = time.perf_counter()
            cell_path(pts, feats, level)
            times.append(time.perf_counter() - t0)
    rows = []
    for n, times, (pts, _) in zip(sizes, cell_t, sets):
        oracle_t = []
        for _ in range(repeats):
            t0 = time.perf_counter()
            world_edge_oracle(pts, radius)
            oracle_t.append(time.perf_counter() - t0)
        rows.append({"size": int(n), "cell_median_s": float(np.median(times)),
                     "oracle_median_s": float(np.median(oracle_t))})
    return rows


def write_csv(path: str | Path, rows: list[dict]) -> None:
    if not rows:
        raise ValueError("no rows to write")
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})


TET_FACES = np.array([(0, 2, 1), (0, 1, 3), (1, 2, 3), (0, 3, 2)])


def export_frame_obj(path: str | Path, positions: np.ndarray, elements: np.ndarray) -> None:
    """Vertices plus the four triangular faces of every tet (1-based indices)."""
    lines = [f"v {x!r} {y!r} {z!r}" for x, y, z in np.asarray(positions, np.float64)]
    faces = np.asarray(elements)[:, TET_FACES].reshape(-1, 3) + 1
    lines += [f"f {a} {b} {c}" for a, b, c in faces]
    Path(path).write_text("\n".join(lines) + "\n")


def export_frame_csv(path: str | Path, positions: np.ndarray, node_type: np.ndarray) -> None:
    rows = [{"node": i, "x": float(p[0]), "y": float(p[1]), "z": float(p[2]), "node_type": int(nt)}
            for i, (p, nt) in enumerate(zip(np.asarray(positions, np.float64), node_type))]
    write_csv(path, rows)


def export_rollout(out_dir: str | Path, result: RolloutResult, seq: Sequence) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for t, pos in enumerate(result.positions):
        export_frame_obj(out / f"frame_{t:04d}.obj", pos, seq.elements)
        export_frame_csv(out / f"frame_{t:04d}.csv", pos, seq.node_type)
    if result.element is not None:
        rows = [{"frame": t, "element": e, **{f"value_{k}": float(v) for k, v in enumerate(vals)}}
                for t in range(len(result.element)) for e, vals in enumerate(result.element[t])]
        write_csv(out / "element_fields.csv", rows)


def export_cells(out_dir: str | Path, points: np.ndarray, features: np.ndarray, L: int, L_min: int) -> list[dict]:
    """OBJ boxes and a CSV row per non-empty cell at every level ``L_min..L``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cs = build_cell_set(points, L, L_min)
    feats = torch.from_numpy(np.asarray(features, np.float64))
    rows = []
    corners = np.array([(i, j, k) for i in (0, 1) for j in (0, 1) for k in (0, 1)])
    quads = np.array([(0, 1, 3, 2), (4, 6, 7, 5), (0, 4, 5, 1), (2, 3, 7, 6), (0, 2, 6, 4), (1, 5, 7, 3)])
    for lev in range(L_min, L + 1):
        level = cs.level(lev)
        owner = as_index(cs.node_cells_at(lev))
        counts = np.bincount(owner.numpy(), minlength=len(level))
        mean = torch.zeros(len(level), feats.shape[1], dtype=feats.dtype).index_add_(0, owner, feats)
        mean = mean / torch.from_numpy(np.maximum(counts, 1)).to(feats.dtype)[:, None]
        norms = mean.norm(dim=1).numpy()
        lo, hi = cell_bounds(level.coords, lev)
        verts, faces = [], []
        for c in range(len(level)):
            box = lo[c] + corners * (hi[c] - lo[c])
            base = len(verts)
            verts.extend(box)
            faces.extend(quads + base + 1)
            rows.append({"level": lev, "key": int(level.keys[c]), "x": int(level.coords[c, 0]),
                         "y": int(level.coords[c, 1]), "z": int(level.coords[c, 2]),
                         "cx": float(level.centers[c, 0]), "cy": float(level.centers[c, 1]),
                         "cz": float(level.centers[c, 2]), "node_count": int(counts[c]),
                         "feature_norm": float(norms[c])})
        lines = [f"v {x!r} {y!r} {z!r}" for x, y, z in np.asarray(verts, np.float64)]
        lines += ["f " + " ".join(str(i) for i in q) for q in faces]
        (out / f"cells_L{lev}.obj").write_text("\n".join(lines) + "\n")
    write_csv(out / "cells.csv", rows)
    return rows
