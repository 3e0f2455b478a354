"""Acceptance gate. Each test carries ``criterion(n)``; the terminal summary reports one line per criterion.

These checks are slow (training runs and an O(n^2) oracle); the full file takes on the order of an hour on
one CPU core.
"""

import dataclasses
import json
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest
import torch
import torch.nn.functional as F
from scipy.spatial import cKDTree

from astsim.evalsim import (Simulator, bench_scaling, displacement_rmse, one_step_mse, persistence_baseline,
                            persistence_one_step_mse, rollout, sweep_cell_level)
from astsim.graphops import (OCNN, MessagePassing, SparseConv, SparseConvTranspose, c2m_message_pass,
                             m2c_message_pass, mesh_to_cell_init, scatter_mean, scatter_sum)
from astsim.meshstate import (Schema, SequenceDataset, bounding_box, build_frame_pair, normalize_to_unit_cell,
                              unit_cell_affine)
from astsim.model import AstConfig, collate, init_params
from astsim.numerics import (MLP, CrossAttnBlock, GEGLUFeedForward, MultiHeadAttention, PosEmb, RWFLinear,
                             SelfAttnBlock, attention, grad_check, layer_norm)
from astsim.spatial import (KERNEL_OFFSETS, CellCoord, build_cell_set, cell_bounds, cell_coords, fps,
                            morton_decode, morton_decode_keys, morton_encode, morton_keys, morton_start)
from astsim.synthetic import contact_frames, gen_synthetic
from astsim.training import TrainConfig, fit_config, loss, lr_at, train
from conftest import make_sequence, tiny_config

TESTS = Path(__file__).parent
SEEDS = range(20)


def criterion(n, title):
    return pytest.mark.criterion(n, title)


# ---------------------------------------------------------------- 1: gradients

C1 = "gradient suite (pointwise/linear < 1e-6, attention < 1e-5, end-to-end < 1e-3; 20 seeds; < 5 min)"
_GRAD_TIMES: dict[str, float] = {}


@pytest.fixture
def float64():
    old = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    yield
    torch.set_default_dtype(old)


def _with_params(module, call):
    """``fn(*params)`` evaluating ``call(module)`` with substituted parameters."""
    names = [n for n, _ in module.named_parameters()]

    def fn(*ps):
        return call(lambda *a, **k: torch.func.functional_call(module, dict(zip(names, ps)), a, k))

    return fn, list(module.parameters())


def _check_module(module, inputs, call, directions=8, seed=0):
    """Worst error over every input coordinate and random parameter directions."""
    worst = grad_check(lambda *xs: call(module, *xs), inputs, seed=seed)
    fn, params = _with_params(module, lambda m: call(m, *inputs))
    return max(worst, grad_check(fn, params, directions=directions, seed=seed))


def _cells(seed, n=40, L=3, L_min=1):
    rng = np.random.default_rng(seed)
    return build_cell_set(rng.uniform(-1, 1, (n, 3)), L, L_min)


def _pointwise_cases(seed):
    torch.manual_seed(seed)
    g = np.random.default_rng(seed)
    r = lambda *s: torch.from_numpy(g.normal(size=s))  # noqa: E731
    cs = _cells(seed)
    mp_e = MessagePassing(3, 4, edge_dim=2, hidden=6)
    mp = MessagePassing(4, 4, hidden=6)
    edges = torch.from_numpy(np.stack([g.integers(0, 7, 15), g.integers(0, 5, 15)]))
    ne = cs.n_nodes
    yield "rwf_linear", lambda: _check_module(RWFLinear(4, 3), [r(5, 4)], lambda m, x: m(x))
    yield "layer_norm", lambda: grad_check(layer_norm, [r(4, 6), r(6), r(6)])
    yield "mlp", lambda: _check_module(MLP(4, 7, 3, layer_norm=True), [r(5, 4)], lambda m, x: m(x))
    yield "geglu", lambda: _check_module(GEGLUFeedForward(6, 10), [r(4, 6)], lambda m, x: m(x))
    centers = torch.from_numpy(g.uniform(-1, 1, (5, 3)))
    yield "pos_emb", lambda: _check_module(PosEmb(8, n_freqs=4, max_log2=3.0), [r(5, 8)],
                                           lambda m, x: m(x, centers))
    idx = torch.from_numpy(g.integers(0, 4, 9))
    yield "scatter_sum", lambda: grad_check(lambda x: scatter_sum(x, idx, 4), [r(9, 3)])
    yield "scatter_mean", lambda: grad_check(lambda x: scatter_mean(x, idx, 4), [r(9, 3)])
    yield "message_pass", lambda: _check_module(mp_e, [r(7, 3), r(5, 4), r(15, 2)],
                                                lambda m, vs, vr, e: m(edges, vs, vr, e))
    yield "mesh_to_cell", lambda: grad_check(lambda v: mesh_to_cell_init(cs, v), [r(ne, 4)])
    yield "m2c", lambda: _check_module(mp, [r(ne, 4), r(cs.n_cells(3), 4)],
                                       lambda m, v, c: m2c_message_pass(m, cs, v, c))
    yield "c2m", lambda: _check_module(mp, [r(cs.n_cells(3), 4), r(ne, 4)],
                                       lambda m, c, v: c2m_message_pass(m, cs, c, v))
    yield "sparse_conv_s0", lambda: _check_module(SparseConv(3, 2, stride=0), [r(cs.n_cells(3), 3)],
                                                  lambda m, x: m(cs, x, 3))
    yield "sparse_conv_s1", lambda: _check_module(SparseConv(3, 2), [r(cs.n_cells(3), 3)],
                                                  lambda m, x: m(cs, x, 2))
    yield "sparse_conv_t", lambda: _check_module(SparseConvTranspose(3, 2), [r(cs.n_cells(2), 3)],
                                                 lambda m, y: m(cs, y, 2))
    yield "ocnn", lambda: _check_module(OCNN(3, 2), [r(cs.n_cells(3), 3)], lambda m, x: m(cs, x))
    yield "ocnn_t", lambda: _check_module(OCNN(3, 2, transposed=True), [r(cs.n_cells(1), 3)],
                                          lambda m, y: m(cs, y))


def _attention_cases(seed):
    torch.manual_seed(seed)
    g = np.random.default_rng(seed)
    r = lambda *s: torch.from_numpy(g.normal(size=s))  # noqa: E731
    mask = torch.from_numpy(np.array([[True] * 5 + [False] * 2, [True] * 7]))
    yield "attention", lambda: grad_check(lambda q, k, v: attention(q, k, v), [r(2, 3, 4), r(2, 6, 4), r(2, 6, 5)])
    yield "attention_masked", lambda: grad_check(lambda q, k, v: attention(q, k, v, mask[:, None, :]),
                                                 [r(2, 3, 4), r(2, 7, 4), r(2, 7, 5)])
    yield "multi_head", lambda: _check_module(MultiHeadAttention(8, heads=2, head_dim=4, d_context=6),
                                              [r(2, 3, 8), r(2, 7, 6), r(2, 7, 6)],
                                              lambda m, q, k, v: m(q, k, v, mask))
    yield "cross_block", lambda: _check_module(CrossAttnBlock(8, heads=2, head_dim=4, ffn_hidden=12, dropout=0.0),
                                               [r(2, 3, 8), r(2, 7, 8)], lambda m, q, c: m(q, c, mask))
    yield "self_block", lambda: _check_module(SelfAttnBlock(8, heads=2, head_dim=4, ffn_hidden=12, dropout=0.0),
                                              [r(2, 5, 8)], lambda m, x: m(x))


def _model_check(seed):
    n = 12 + seed % 9  # 12..20 nodes
    schema = Schema(element_inputs=("displacement", "stress"), element_targets=("stress",))
    seq = make_sequence(n=n, seed=seed, stress=True)
    graph = build_frame_pair(seq, 1, schema).input
    unit = SequenceDataset([seq], schema, bounding_box([seq]))
    cfg = fit_config(tiny_config(L_cell=2, l_ocnn=1, n_tokens=4, d_token=32, head_dim=16, ffn_hidden=32), unit)
    model = init_params(cfg, seed).double().eval()
    b = collate([graph], cfg).to(torch.float64)
    heads = lambda out: torch.cat([out["mesh"].reshape(-1), out["element"].reshape(-1)])  # noqa: E731

    def run(mesh_x, elem_x, m2m_x, e2m_x):
        return heads(model(dataclasses.replace(b, mesh_x=mesh_x, elem_x=elem_x, m2m_x=m2m_x, e2m_x=e2m_x)))

    # every input coordinate is covered by the op-level tiers; here random directions keep 20 seeds cheap
    worst = grad_check(run, [b.mesh_x, b.elem_x, b.m2m_x, b.e2m_x], directions=16, seed=seed)
    fn, params = _with_params(model, lambda m: heads(m(b)))
    return max(worst, grad_check(fn, params, directions=16, seed=seed))


def _run_tier(cases, tol, name):
    t0 = time.perf_counter()
    failures = []
    for seed in SEEDS:
        for op, check in cases(seed):
            err = check()
            if not err < tol:
                failures.append(f"{op} seed {seed}: {err:.2e}")
    _GRAD_TIMES[name] = time.perf_counter() - t0
    assert not failures, f"{name} above {tol}: " + "; ".join(failures)


@criterion(1, C1)
def test_grad_pointwise_and_linear(float64):
    _run_tier(_pointwise_cases, 1e-6, "pointwise")


@criterion(1, C1)
def test_grad_attention(float64):
    _run_tier(_attention_cases, 1e-5, "attention")


@criterion(1, C1)
def test_grad_end_to_end(float64):
    _run_tier(lambda seed: [("model", lambda: _model_check(seed))], 1e-3, "end_to_end")


@criterion(1, C1)
def test_grad_suite_runtime():
    assert set(_GRAD_TIMES) == {"pointwise", "attention", "end_to_end"}, "gradient tiers did not all run"
    total = sum(_GRAD_TIMES.values())
    print(f"gradient suite runtime {total:.1f} s", _GRAD_TIMES)
    assert total < 300.0


# ---------------------------------------------------------------- 2: spatial oracles

C2 = "spatial oracles (Morton fuzz, FPS vs greedy, sparse conv vs dense, containment)"


def _interleave(c: np.ndarray, level: int) -> np.ndarray:
    key = np.zeros(len(c), np.int64)
    for b in range(level):
        for axis in range(3):
            key |= ((c[:, axis] >> b) & 1) << (3 * b + axis)
    return key


@criterion(2, C2)
def test_morton_round_trip_fuzz():
    rng = np.random.default_rng(100)
    levels = rng.integers(0, 22, 100_000)
    c = (rng.random((100_000, 3)) * (1 << levels)[:, None]).astype(np.int64)
    keys = morton_keys(c)
    assert np.array_equal(keys, _interleave(c, 21))
    assert np.array_equal(morton_decode_keys(keys), c)
    for l, (x, y, z) in zip(levels.tolist(), c.tolist()):
        cc = CellCoord(l, x, y, z)
        assert morton_decode(morton_encode(cc), l) == cc


def _greedy_fps(p: np.ndarray, k: int, start: int) -> list[int]:
    chosen = [start]
    while len(chosen) < k:
        d = ((p[:, None, :] - p[None, chosen, :]) ** 2).sum(-1).min(axis=1)
        d[chosen] = -1.0
        chosen.append(int(np.argmax(d)))
    return chosen


@criterion(2, C2)
def test_fps_equals_brute_force_greedy():
    rng = np.random.default_rng(101)
    for trial in range(500):
        n = int(rng.integers(1, 65))
        p = rng.uniform(-1, 1, (n, 3))
        k = int(rng.integers(1, n + 1))
        start = int(rng.integers(0, n)) if trial % 2 else morton_start(p)
        assert fps(p, k, start).tolist() == _greedy_fps(p, k, start)
        if trial % 2 == 0:
            assert fps(p, k).tolist() == _greedy_fps(p, k, start)


def _dense_kernel(w: torch.Tensor) -> torch.Tensor:
    k = torch.zeros(w.shape[2], w.shape[1], 3, 3, 3, dtype=w.dtype)
    for i, (ox, oy, oz) in enumerate(KERNEL_OFFSETS):
        k[:, :, ox + 1, oy + 1, oz + 1] = w[i].T
    return k


def _full_grid_cells(level: int):
    n = 1 << level
    axis = (np.arange(n) + 0.5) / n * 2 - 1
    p = np.stack(np.meshgrid(axis, axis, axis, indexing="ij"), -1).reshape(-1, 3)
    return build_cell_set(p, level, level - 1 if level else 0)


@criterion(2, C2)
@pytest.mark.parametrize("seed", range(5))
def test_sparse_conv_equals_dense_on_full_grid(seed):
    torch.manual_seed(seed)
    cs = _full_grid_cells(2)
    assert cs.n_cells(2) == 64
    conv = SparseConv(3, 4, stride=0).double()
    with torch.no_grad():
        conv.bias.normal_()
    x = torch.randn(64, 3, dtype=torch.float64)
    c = torch.as_tensor(cs.level(2).coords)
    grid = torch.zeros(1, 3, 4, 4, 4, dtype=torch.float64)
    grid[0, :, c[:, 0], c[:, 1], c[:, 2]] = x.T
    dense = F.conv3d(grid, _dense_kernel(conv.weight.detach()), conv.bias.detach(), padding=1)
    ref = dense[0, :, c[:, 0], c[:, 1], c[:, 2]].T
    with torch.no_grad():
        assert float((conv(cs, x, 2) - ref).abs().max()) < 1e-10


@criterion(2, C2)
def test_containment_invariant():
    rng = np.random.default_rng(102)
    p = rng.uniform(-1, 1, (100_000, 3))
    p[:8] = np.array([[-1, -1, -1], [1, 1, 1], [1, -1, 0], [0, 0, 0], [-1, 1, 1], [0.5, -0.5, 1], [1, 0, -1],
                      [-0.25, 0.75, -1]])
    for level in range(1, 9):
        c = cell_coords(p, level)
        lo, hi = cell_bounds(c, level)
        last = c == (1 << level) - 1
        assert np.all((c >= 0) & (c < 1 << level))
        assert np.all(lo <= p)
        assert np.all((p < hi) | (last & (p <= hi)))


# ---------------------------------------------------------------- 3: interaction cells

C3 = "interaction cells (shared leaf cell in every contact frame at L_cell=5; nonzero cross-body gradient)"
C3_LEVEL = 5


def _aligned_box(box: np.ndarray, point: np.ndarray, level: int) -> np.ndarray:
    """Cubic domain box covering ``box`` whose affine maps ``point`` to a leaf-cell center."""
    side = 2.0 / 2 ** level
    half = 0.5 * np.max(box[1] - box[0])
    center = 0.5 * (box[0] + box[1])
    for _ in range(50):
        out = np.stack([center - half, center + half])
        affine = unit_cell_affine(out)
        u = affine.apply(point)
        target = (np.floor((u + 1) / side) + 0.5) * side - 1
        if np.abs(u - target).max() < 1e-9 * side:
            return out
        center = center + (u - target) / affine.scale
        half = max(half, np.max(np.maximum(box[1] - center, center - box[0])))
    raise AssertionError("box alignment did not converge")


@pytest.fixture(scope="module")
def contact_fixture():
    """Two-blob sequences (2000 nodes), each normalized with its own domain box.

    The box puts the midpoint of the closest cross-body pair in the first contact
    frame at a leaf-cell center, so the octree grid does not happen to split the
    first touching pair along a cell face.
    """
    ds = gen_synthetic("two-blob-contact", 2000, 4, seed=0)
    out = []
    for seq in ds.sequences:
        body = seq.node_fields["body"][:, 0]
        e = seq.positions[0][seq.mesh_edges]
        radius = 0.5 * float(np.median(np.linalg.norm(e[:, 1] - e[:, 0], axis=1)))
        frames = contact_frames(seq, radius)
        p = seq.positions[frames[0]].astype(np.float64)
        pairs = cKDTree(p).query_pairs(radius, output_type="ndarray")
        pairs = pairs[body[pairs[:, 0]] != body[pairs[:, 1]]]
        closest = pairs[np.argmin(np.linalg.norm(p[pairs[:, 0]] - p[pairs[:, 1]], axis=1))]
        box = _aligned_box(bounding_box([seq]), p[closest].mean(axis=0), C3_LEVEL)
        unit, _ = normalize_to_unit_cell(SequenceDataset([seq], ds.schema, box))
        out.append((unit, body, frames))
    return out


@criterion(3, C3)
def test_contact_frames_share_a_leaf_cell(contact_fixture):
    for unit, body, frames in contact_fixture:
        assert len(frames) > 0
        for t in frames:
            cs = build_cell_set(unit.sequences[0].positions[t], C3_LEVEL)
            shared = np.intersect1d(cs.node_to_cell[body == 0], cs.node_to_cell[body == 1])
            assert len(shared) > 0, f"frame {t}: no leaf cell holds both bodies"


@criterion(3, C3)
def test_cross_body_gradient(contact_fixture):
    unit, body, frames = contact_fixture[0]
    seq = unit.sequences[0]
    t = int(frames[0])
    cfg = fit_config(tiny_config(L_cell=C3_LEVEL, l_ocnn=1), unit)
    model = init_params(cfg, 0).double().eval()
    b = collate([build_frame_pair(seq, t, unit.schema).input], cfg).to(torch.float64)
    x = b.mesh_x.clone().requires_grad_(True)
    out = model(dataclasses.replace(b, mesh_x=x))["mesh"]
    for src, dst in ((0, 1), (1, 0)):
        (grad,) = torch.autograd.grad(out[torch.from_numpy(body == dst)].sum(), x, retain_graph=True)
        assert float(grad[torch.from_numpy(body == src)].norm()) > 0.0


# ---------------------------------------------------------------- 4: fixed token budget

C4 = "fixed token budget (same LatentTokens shape for 1e2/1e3/1e4 nodes; 1e5-node forward within 8 GB)"

_BIG_FORWARD = """
import json, sys, torch
sys.path.insert(0, {tests!r})
torch.set_num_threads(1)
from conftest import make_sequence
from astsim.meshstate import Schema, build_frame_pair
from astsim.model import AstConfig, collate, init_params
seq = make_sequence(n=100_000, frames=2, seed=0)
graph = build_frame_pair(seq, 0, Schema()).input
del seq
cfg = AstConfig(L_cell=12, l_ocnn=4, dropout=0.0)
model = init_params(cfg, 0).eval()
with torch.no_grad():
    out = model(collate([graph], cfg))["mesh"]
hwm = [int(l.split()[1]) for l in open("/proc/self/status") if l.startswith("VmHWM")][0]
print(json.dumps({{"shape": list(out.shape), "finite": bool(torch.isfinite(out).all()), "peak_kb": hwm}}))
"""


@criterion(4, C4)
def test_token_shape_independent_of_mesh_size():
    cfg = AstConfig(dropout=0.0)
    model = init_params(cfg, 0).eval()
    shapes = []
    for n in (100, 1000, 10_000):
        graph = build_frame_pair(make_sequence(n=n, frames=2, seed=n), 0, Schema()).input
        b = collate([graph], cfg)
        with torch.no_grad():
            enc = model.encode_graph(b)
            tokens = model.tokenize(b.cells, model.cells_from_mesh(b.cells, enc.mesh), b.queries)
        shapes.append(tuple(tokens.h.shape))
    assert shapes == [(1, cfg.n_tokens, cfg.d_token)] * 3


@criterion(4, C4)
def test_forward_at_1e5_nodes_within_memory():
    proc = subprocess.run([sys.executable, "-c", _BIG_FORWARD.format(tests=str(TESTS))], capture_output=True,
                          text=True, timeout=1800)
    assert proc.returncode == 0, proc.stderr[-2000:]
    res = json.loads(proc.stdout.strip().splitlines()[-1])
    print("1e5-node forward", res)
    assert res["shape"] == [100_000, 3] and res["finite"]
    assert res["peak_kb"] * 1024 < 8 * 1024 ** 3


# ---------------------------------------------------------------- 5: scaling

C5 = "scaling (cell path <= 2.5x per doubling, pairwise oracle >= 3x, 1e4..1e5, 5 repeats)"


@criterion(5, C5)
def test_cell_path_scales_linearly():
    rows = bench_scaling([10_000, 20_000, 40_000, 80_000], repeats=5)
    print("scaling", rows)
    for a, b in zip(rows, rows[1:]):
        cell = b["cell_median_s"] / a["cell_median_s"]
        oracle = b["oracle_median_s"] / a["oracle_median_s"]
        print(f"{a['size']} -> {b['size']}: cell x{cell:.2f}, oracle x{oracle:.2f}")
        assert cell <= 2.5
        assert oracle >= 3.0


# ---------------------------------------------------------------- 6: convergence

C6 = "convergence (1-step val MSE < 20% of persistence, rollout RMSE below persistence, <= 30 epochs, < 2 h)"
C6_MODEL = AstConfig(d_token=128, L_SA=2, n_tokens=64, hidden=64, dropout=0.0, L_cell=5)
C6_TRAIN = TrainConfig(batch=8, base_lr=1e-3, warmup=100, epochs=16, noise=3e-4, seed=0, checkpoint_every=0)


@pytest.fixture(scope="module")
def convergence_run(tmp_path_factory):
    t0 = time.perf_counter()
    train_ds = gen_synthetic("two-blob-contact", 200, 40, seed=1)
    val_ds = gen_synthetic("two-blob-contact", 200, 8, seed=2)
    res = train(C6_MODEL, C6_TRAIN, train_ds, val_ds, tmp_path_factory.mktemp("convergence"))
    sim = Simulator.from_checkpoint(res.out_dir / "ckpt_best")
    model_1 = one_step_mse(sim, val_ds)
    base_1 = persistence_one_step_mse(val_ds)
    model_r = displacement_rmse([rollout(sim, s) for s in val_ds.sequences], val_ds.sequences)
    base_r = displacement_rmse([persistence_baseline(s) for s in val_ds.sequences], val_ds.sequences)
    out = dict(model_1=model_1, base_1=base_1, model_r=model_r, base_r=base_r, seconds=time.perf_counter() - t0)
    print("convergence", out)
    return out


@criterion(6, C6)
def test_one_step_beats_persistence(convergence_run):
    assert C6_TRAIN.epochs <= 30
    assert convergence_run["model_1"] < 0.2 * convergence_run["base_1"]


@criterion(6, C6)
def test_rollout_beats_persistence(convergence_run):
    assert convergence_run["model_r"] < convergence_run["base_r"]


@criterion(6, C6)
def test_convergence_runtime(convergence_run):
    assert convergence_run["seconds"] < 2 * 3600


# ---------------------------------------------------------------- 7: schedule and loss

C7 = "schedule/loss fidelity (peak 0.00049 at batch 48, warmup start 1e-4*peak, terminal 0, loss fixtures)"


@criterion(7, C7)
def test_learning_rate_schedule():
    cfg = TrainConfig(batch=48, steps_per_epoch=50, epochs=100)
    peak = cfg.peak_lr
    assert abs(peak - 0.00049) < 5e-6
    assert abs(lr_at(0, cfg) - 1e-4 * peak) < 1e-18
    assert abs(lr_at(cfg.warmup, cfg) - peak) < 1e-18
    assert lr_at(cfg.total_steps(), cfg) == 0.0
    assert lr_at(cfg.total_steps() + 10, cfg) == 0.0
    steps = np.arange(cfg.total_steps() + 1)
    lrs = np.array([lr_at(int(s), cfg) for s in steps])
    assert np.all(np.diff(lrs[: cfg.warmup + 1]) > 0) and np.all(np.diff(lrs[cfg.warmup :]) <= 0)


def _t(a):
    return torch.tensor(a, dtype=torch.float64)


@criterion(7, C7)
def test_loss_on_hand_fixtures():
    w = AstConfig().loss_weights
    assert w == (1.0, 0.01)
    # mesh rows only, last row masked out: squared errors 0,1,4 and 4,0,0 over 6 entries
    pred = {"mesh": _t([[1.0, 2.0, 3.0], [2.0, 0.0, 0.0], [5.0, 5.0, 5.0]])}
    tgt = {"mesh": _t([[1.0, 1.0, 1.0], [0.0, 0.0, 0.0], [0.0, 0.0, 0.0]])}
    assert abs(float(loss(pred, tgt, w, [True, True, False])) - 9.0 / 6.0) < 1e-12
    # both heads: mesh 1/3 (one unit error in 3 entries), element (0.25 + 1) / 2
    pred = {"mesh": _t([[1.0, 0.0, 0.0]]), "element": _t([[0.5], [-1.0]])}
    tgt = {"mesh": _t([[0.0, 0.0, 0.0]]), "element": _t([[0.0], [0.0]])}
    assert abs(float(loss(pred, tgt, w, [True])) - (1.0 / 3.0 + 0.01 * 0.625)) < 1e-12
    # exact mesh, element error 2 on all 6 entries
    pred = {"mesh": _t(np.ones((2, 3))), "element": _t(np.full((3, 2), 2.0))}
    tgt = {"mesh": _t(np.ones((2, 3))), "element": _t(np.zeros((3, 2)))}
    assert abs(float(loss(pred, tgt, w, [True, True])) - 0.04) < 1e-12


# ---------------------------------------------------------------- 8: cell-level sweep

C8 = "cell-level sweep (nodes/cell non-increasing in L_cell; single cell worse than best mid level)"
C8_LEVELS = [0, 2, 3, 4, 5]
C8_MODEL = AstConfig(d_token=64, L_SA=1, n_tokens=16, heads=2, head_dim=32, ffn_hidden=128, hidden=32,
                     out_hidden=16, dropout=0.0, l_ocnn=0)
C8_TRAIN = TrainConfig(batch=8, base_lr=1e-3, warmup=20, epochs=10, noise=3e-4, seed=0, checkpoint_every=0)


@pytest.fixture(scope="module")
def sweep_rows(tmp_path_factory):
    train_ds = gen_synthetic("two-blob-contact", 200, 8, seed=11)
    val_ds = gen_synthetic("two-blob-contact", 200, 2, seed=12)
    rows = sweep_cell_level(train_ds, val_ds, C8_LEVELS, C8_MODEL, C8_TRAIN, tmp_path_factory.mktemp("sweep"))
    print("sweep", rows)
    return rows


@criterion(8, C8)
def test_sweep_ratio_non_increasing(sweep_rows):
    assert [r["L_cell"] for r in sweep_rows] == C8_LEVELS
    ratio = [r["nodes_per_cell"] for r in sweep_rows]
    assert ratio[0] == 200
    assert all(a >= b for a, b in zip(ratio, ratio[1:]))


@criterion(8, C8)
def test_single_cell_is_worse_than_mid_levels(sweep_rows):
    single = sweep_rows[0]["val_loss"]
    mid = min(r["val_loss"] for r in sweep_rows if 0 < r["L_cell"] < C8_LEVELS[-1])
    assert single > mid


# ---------------------------------------------------------------- 9: determinism

C9 = "determinism (two identical-seed train+rollout runs give bit-identical metric CSVs)"
TINY = ("L_cell: 3\nl_ocnn: 1\nd_token: 32\nL_SA: 1\nn_tokens: 8\nheads: 2\nhead_dim: 16\nffn_hidden: 32\n"
        "hidden: 16\nout_hidden: 8\ndropout: 0.1\nwarmup: 5\n")


def _pipeline(root: Path) -> dict[str, bytes]:
    root.mkdir()
    (root / "cfg.txt").write_text(TINY)
    cli = [sys.executable, "-m", "astsim.cli"]
    steps = [
        ["gen-data", "--kind", "two-blob-contact", "--size", "60", "--sequences", "3", "--frames", "8",
         "--seed", "5", "--out", root / "data"],
        ["train", "--config", root / "cfg.txt", "--train-data", root / "data", "--val-data", root / "data",
         "--epochs", "2", "--batch", "4", "--seed", "3", "--out", root / "run"],
        ["rollout", "--checkpoint", root / "run" / "ckpt_best", "--data", root / "data", "--out", root / "roll",
         "--save-data"],
        ["eval", "--data", root / "data", "--pred", root / "roll" / "dataset", "--checkpoint",
         root / "run" / "ckpt_best", "--out", root / "eval"],
    ]
    for step in steps:
        proc = subprocess.run(cli + [str(a) for a in step], capture_output=True, text=True, timeout=1800)
        assert proc.returncode == 0, proc.stderr[-2000:]
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*.csv"))}


@criterion(9, C9)
def test_identical_seeds_give_identical_csvs(tmp_path):
    a = _pipeline(tmp_path / "a")
    b = _pipeline(tmp_path / "b")
    assert "run/metrics.csv" in a and "eval/eval.csv" in a
    assert a.keys() == b.keys()
    for name in a:
        assert a[name] == b[name], f"{name} differs between runs"
