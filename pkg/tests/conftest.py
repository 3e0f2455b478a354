import numpy as np
import pytest
import torch
from scipy.spatial import Delaunay

from astsim.meshstate import BOUNDARY, INTERIOR, BoundaryScript, Schema, Sequence, SequenceDataset, bounding_box
from astsim.model import AstConfig

torch.set_num_threads(1)


def tet_mesh(n: int, rng: np.random.Generator, scale: float = 0.5):
    p = rng.uniform(-scale, scale, (n, 3))
    tets = Delaunay(p).simplices.astype(np.int64)
    pairs = tets[:, [(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)]].reshape(-1, 2)
    und = np.unique(np.sort(pairs, axis=1), axis=0)
    return p, tets, np.concatenate([und, und[:, ::-1]])


def make_sequence(n: int = 10, frames: int = 4, seed: int = 0, n_boundary: int = 2, stress: bool = False) -> Sequence:
    rng = np.random.default_rng(seed)
    p, tets, edges = tet_mesh(n, rng)
    drift = rng.normal(0, 0.01, (frames, n, 3)).cumsum(axis=0)
    drift[0] = 0.0
    pos = (p[None] + drift).astype(np.float32)
    node_type = np.full(n, INTERIOR)
    node_type[:n_boundary] = BOUNDARY
    bnodes = np.arange(n_boundary)
    fields = {}
    if stress:
        fields["stress"] = rng.uniform(0, 1, (frames, len(tets), 1)).astype(np.float32)
    return Sequence(pos, node_type, tets, edges, BoundaryScript(bnodes, pos[:, bnodes]), {}, fields)


def make_dataset(n_seq: int = 2, schema: Schema | None = None, **kw) -> SequenceDataset:
    seqs = [make_sequence(seed=i, **kw) for i in range(n_seq)]
    return SequenceDataset(seqs, schema or Schema(), bounding_box(seqs))


def tiny_config(**kw) -> AstConfig:
    base = dict(L_cell=3, l_ocnn=1, d_token=64, L_SA=1, n_tokens=8, heads=2, head_dim=32, ffn_hidden=64,
                dropout=0.0, hidden=16, out_hidden=8, d_mesh_in=9, d_elem_in=3, d_mesh_out=3, d_elem_out=0)
    base.update(kw)
    return AstConfig(**base)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


# acceptance reporting: one PASS/FAIL line per criterion in the terminal summary

_CRITERIA: dict[str, tuple[int, str]] = {}
_OUTCOMES: dict[int, list[bool]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): test belongs to acceptance criterion n")


def pytest_collection_modifyitems(items):
    for item in items:
        mark = item.get_closest_marker("criterion")
        if mark is not None:
            _CRITERIA[item.nodeid] = (mark.args[0], mark.args[1])


def pytest_runtest_logreport(report):
    if report.nodeid not in _CRITERIA:
        return
    n = _CRITERIA[report.nodeid][0]
    if report.when == "call" or report.failed or report.skipped:
        _OUTCOMES.setdefault(n, []).append(report.passed and report.when == "call")


def pytest_terminal_summary(terminalreporter):
    if not _OUTCOMES:
        return
    titles = {n: t for n, t in _CRITERIA.values()}
    terminalreporter.section("acceptance criteria")
    for n in sorted(_OUTCOMES):
        verdict = "PASS" if all(_OUTCOMES[n]) else "FAIL"
        terminalreporter.write_line(f"criterion {n}: {verdict}  {titles[n]}")
