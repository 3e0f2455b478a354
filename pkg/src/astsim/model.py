"""Mesh encoder, cell tokenizer, latent processor and decoder."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from .graphops import OCNN, MessagePassing, as_index, c2m_message_pass, m2c_message_pass, mesh_to_cell_init
from .meshstate import EDGE_FEATURE_WIDTH, HeteroGraph
from .numerics import MLP, CrossAttnBlock, PosEmb, SelfAttnBlock
from .spatial import CellBatch, build_cell_set, fps


class ConfigError(ValueError):
    pass


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"[{stage}] {type(cause).__name__}: {cause}")
        self.stage = stage


@dataclass(frozen=True)
class AstConfig:
    L_cell: int = 5
    l_ocnn: int = 0
    d_token: int = 256
    L_SA: int = 12
    n_tokens: int = 256
    hidden: int = 128
    out_hidden: int = 32
    heads: int = 8
    head_dim: int = 64
    ffn_hidden: int = 512
    dropout: float = 0.1
    history: int = 0
    noise: float = 0.003
    d_mesh_in: int = 9
    d_elem_in: int = 3
    d_mesh_out: int = 3
    d_elem_out: int = 0
    loss_weights: tuple[float, ...] = (1.0, 0.01)

    def validate(self) -> None:
        if self.L_cell < 0:
            raise ConfigError("L_cell must be >= 0")
        if not 0 <= self.l_ocnn <= self.L_cell:
            raise ConfigError(f"l_ocnn={self.l_ocnn} must lie in [0, L_cell={self.L_cell}]")
        if self.n_tokens < 1:
            raise ConfigError("n_tokens must be >= 1")
        if self.d_token < 1 or self.d_token % self.head_dim:
            raise ConfigError(f"d_token={self.d_token} must be a positive multiple of head_dim={self.head_dim}")
        if self.L_SA < 0 or self.heads < 1 or self.hidden < 1 or self.out_hidden < 1:
            raise ConfigError("layer counts and widths must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")
        if self.d_mesh_in < 0 or self.d_elem_in < 0 or self.d_mesh_out < 1 or self.d_elem_out < 0:
            raise ConfigError("feature widths must be non-negative (mesh output >= 1)")
        if len(self.loss_weights) < 1 + (self.d_elem_out > 0):
            raise ConfigError("need one loss weight per output head")

    @property
    def token_level(self) -> int:
        return self.L_cell - self.l_ocnn


def _parse_value(raw: str, kind):
    if kind is int:
        return int(raw)
    if kind is float:
        return float(raw)
    return tuple(float(v) for v in raw.split(",") if v.strip())


_FIELD_TYPES = {"int": int, "float": float}


def config_fields() -> dict[str, type]:
    return {f.name: _FIELD_TYPES.get(f.type, tuple) for f in dataclasses.fields(AstConfig)}


def config_from_dict(values: dict[str, str], base: AstConfig | None = None) -> AstConfig:
    types = config_fields()
    unknown = set(values) - set(types)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
    parsed = {k: _parse_value(str(v), types[k]) for k, v in values.items()}
    cfg = dataclasses.replace(base or AstConfig(), **parsed)
    cfg.validate()
    return cfg


def format_config(cfg: AstConfig) -> str:
    lines = []
    for f in dataclasses.fields(cfg):
        v = getattr(cfg, f.name)
        lines.append(f"{f.name}: {','.join(repr(x) for x in v) if isinstance(v, tuple) else v}")
    return "\n".join(lines) + "\n"


def read_kv_file(path: str | Path) -> dict[str, str]:
    out = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition(":")
        if not sep:
            raise ConfigError(f"{path}:{lineno}: expected 'key: value'")
        out[key.strip()] = value.strip()
    return out


def load_config(path: str | Path, base: AstConfig | None = None) -> AstConfig:
    """Model keys from a config file; keys belonging to other components are ignored."""
    values = read_kv_file(path)
    return config_from_dict({k: v for k, v in values.items() if k in config_fields()}, base)


def save_config(cfg: AstConfig, path: str | Path) -> None:
    Path(path).write_text(format_config(cfg), encoding="utf-8")


def token_queries(centers: np.ndarray, n_tokens: int) -> np.ndarray:
    """FPS order over cell centers starting at the smallest Morton key (index 0),
    cycled when there are fewer cells than tokens."""
    k = min(n_tokens, len(centers))
    order = fps(centers, k, start=0)
    return np.resize(order, n_tokens)


@dataclass
class GraphBatch:
    """Disjoint union of frame graphs plus their per-graph cell sets."""

    mesh_x: torch.Tensor
    elem_x: torch.Tensor
    m2m_edges: torch.Tensor  # (2, M)
    m2m_x: torch.Tensor
    e2m_edges: torch.Tensor  # (2, K) element sender, mesh receiver
    e2m_x: torch.Tensor
    m2e_x: torch.Tensor
    node_graph: np.ndarray
    elem_graph: np.ndarray
    cells: CellBatch
    queries: np.ndarray  # (B, n_tokens) token-level cell index within each graph

    @property
    def n_graphs(self) -> int:
        return self.cells.n_graphs

    def to(self, dtype: torch.dtype) -> "GraphBatch":
        out = dataclasses.replace(self)
        for name in ("mesh_x", "elem_x", "m2m_x", "e2m_x", "m2e_x"):
            setattr(out, name, getattr(self, name).to(dtype))
        return out


def unit_positions(pos: np.ndarray) -> np.ndarray:
    return np.clip(np.asarray(pos, np.float64), -1.0, 1.0)


def collate(graphs: list[HeteroGraph], cfg: AstConfig, cell_sets=None) -> GraphBatch:
    """Batch graphs whose positions are already in the unit cell (clipped for cells)."""
    if not graphs:
        raise ValueError("empty batch")
    if cell_sets is None:
        cell_sets = [build_cell_set(unit_positions(g.mesh_positions), cfg.L_cell, cfg.token_level) for g in graphs]
    cells = CellBatch(cell_sets)
    tl = cfg.token_level
    queries = np.stack([token_queries(cs.centers(tl), cfg.n_tokens) for cs in cell_sets])
    n_off = np.concatenate([[0], np.cumsum([g.n_nodes for g in graphs])])
    e_off = np.concatenate([[0], np.cumsum([g.n_elements for g in graphs])])

    def cat(arrs, width):
        arrs = [np.asarray(a, np.float32).reshape(len(a), width) for a in arrs]
        return torch.from_numpy(np.concatenate(arrs)) if arrs else torch.zeros(0, width)

    def width(name):
        return getattr(graphs[0], name).shape[1]

    m2m = np.concatenate([g.m2m_edges.reshape(-1, 2) + n_off[i] for i, g in enumerate(graphs)])
    e2m = np.concatenate(
        [g.e2m_edges.reshape(-1, 2) + np.array([e_off[i], n_off[i]]) for i, g in enumerate(graphs)]
    )
    return GraphBatch(
        mesh_x=cat([g.mesh_features for g in graphs], width("mesh_features")),
        elem_x=cat([g.element_features for g in graphs], width("element_features")),
        m2m_edges=as_index(m2m.T),
        m2m_x=cat([g.m2m_features for g in graphs], EDGE_FEATURE_WIDTH),
        e2m_edges=as_index(e2m.T),
        e2m_x=cat([g.e2m_features for g in graphs], EDGE_FEATURE_WIDTH),
        m2e_x=cat([g.m2e_features for g in graphs], EDGE_FEATURE_WIDTH),
        node_graph=np.repeat(np.arange(len(graphs)), [g.n_nodes for g in graphs]),
        elem_graph=np.repeat(np.arange(len(graphs)), [g.n_elements for g in graphs]),
        cells=cells,
        queries=queries,
    )


def pad_by_graph(x: torch.Tensor, counts: np.ndarray) -> tuple[torch.Tensor, torch.Tensor]:
    """Rows grouped by graph -> ``(B, max_count, d)`` and a validity mask."""
    B, cmax = len(counts), int(counts.max())
    if B == 1:
        return x[None], torch.ones(1, cmax, dtype=torch.bool)
    graph = torch.from_numpy(np.repeat(np.arange(B), counts))
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
    slot = torch.arange(len(x)) - torch.from_numpy(np.repeat(starts, counts))
    out = x.new_zeros(B, cmax, x.shape[-1])
    out = out.index_put((graph, slot), x)
    mask = torch.zeros(B, cmax, dtype=torch.bool)
    mask[graph, slot] = True
    return out, mask


def unpad(x: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    return x[mask] if x.shape[0] > 1 else x[0]


@dataclass
class Encoded:
    mesh: torch.Tensor  # mesh latent after E2M/M2M
    mesh_embed: torch.Tensor  # input-MLP mesh embedding
    elem: torch.Tensor


@dataclass
class Tokens:
    h: torch.Tensor  # (B, n_tokens, d_token)
    cells: torch.Tensor  # (B, Cmax, d_token) positionally embedded cell features
    mask: torch.Tensor  # (B, Cmax)


class AstModel(nn.Module):
    def __init__(self, cfg: AstConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        H, D = cfg.hidden, cfg.d_token
        self.mesh_enc = MLP(cfg.d_mesh_in, H, H)
        self.elem_enc = MLP(cfg.d_elem_in, H, H)
        self.m2m_enc = MLP(EDGE_FEATURE_WIDTH, H, H)
        self.e2m_enc = MLP(EDGE_FEATURE_WIDTH, H, H)
        self.e2m = MessagePassing(H, H, edge_dim=H, hidden=H)
        self.m2m = MessagePassing(H, H, edge_dim=H, hidden=H)
        self.m2c = MessagePassing(H, H, hidden=H)
        self.ocnn = OCNN(H, cfg.l_ocnn)
        self.lift = nn.Linear(H, D)
        self.pos_emb = PosEmb(D)
        attn = dict(heads=cfg.heads, head_dim=cfg.head_dim, ffn_hidden=cfg.ffn_hidden, dropout=cfg.dropout)
        self.encoder = CrossAttnBlock(D, **attn)
        self.processor = nn.ModuleList(SelfAttnBlock(D, **attn) for _ in range(cfg.L_SA))
        self.decoder = CrossAttnBlock(D, **attn)
        self.lower = nn.Linear(D, H)
        self.ocnn_t = OCNN(H, cfg.l_ocnn, transposed=True)
        self.c2m = MessagePassing(H, H, hidden=H)
        self.mesh_head = MLP(2 * H, cfg.out_hidden, cfg.d_mesh_out)
        if cfg.d_elem_out:
            self.m2e = MessagePassing(H, H, hidden=H)
            self.elem_head = MLP(H, cfg.out_hidden, cfg.d_elem_out)

    @property
    def dtype(self) -> torch.dtype:
        return self.lift.weight.dtype

    def encode_graph(self, b: GraphBatch) -> Encoded:
        emb = self.mesh_enc(b.mesh_x)
        v = emb
        elem = self.elem_enc(b.elem_x)
        if len(elem):
            v = self.e2m(b.e2m_edges, elem, v, b.e2m_x, edge_encoder=self.e2m_enc)
        if b.m2m_edges.shape[1]:
            v = self.m2m(b.m2m_edges, v, v, b.m2m_x, edge_encoder=self.m2m_enc)
        return Encoded(v, emb, elem)

    def cells_from_mesh(self, cs, v_mesh: torch.Tensor) -> torch.Tensor:
        v_cell = mesh_to_cell_init(cs, v_mesh)
        v_cell = m2c_message_pass(self.m2c, cs, v_mesh, v_cell)
        return self.ocnn(cs, v_cell)

    def tokenize(self, cs: CellBatch, v_cell: torch.Tensor, queries: np.ndarray) -> Tokens:
        tl = self.cfg.token_level
        if cs.n_cells(tl) == 0:
            raise ValueError("empty cell set")
        centers = torch.from_numpy(cs.centers(tl)).to(v_cell.dtype)
        v = self.pos_emb(self.lift(v_cell), centers)
        padded, mask = pad_by_graph(v, cs.graph_cell_counts(tl))
        q = torch.gather(padded, 1, torch.from_numpy(queries)[..., None].expand(-1, -1, padded.shape[-1]))
        h = self.encoder(q, padded, mask if padded.shape[0] > 1 else None)
        return Tokens(h, padded, mask)

    def process_tokens(self, h: torch.Tensor) -> torch.Tensor:
        if h.shape[-1] != self.cfg.d_token:
            raise ValueError(f"token width {h.shape[-1]} != {self.cfg.d_token}")
        for block in self.processor:
            h = block(h)
        return h

    def detokenize(self, h: torch.Tensor, cell_queries: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        out = self.decoder(cell_queries, h)
        return unpad(out, mask)

    def cells_to_mesh(self, cs, v_cell: torch.Tensor, v_mesh: torch.Tensor) -> torch.Tensor:
        v_cell = self.ocnn_t(cs, self.lower(v_cell))
        return c2m_message_pass(self.c2m, cs, v_cell, v_mesh)

    def forward(self, b: GraphBatch) -> dict[str, torch.Tensor]:
        b = b.to(self.dtype)
        stage = "encode"
        try:
            enc = self.encode_graph(b)
            stage = "mesh-to-cell"
            v_cell = self.cells_from_mesh(b.cells, enc.mesh)
            stage = "tokenize"
            tok = self.tokenize(b.cells, v_cell, b.queries)
            stage = "process"
            h = self.process_tokens(tok.h)
            stage = "detokenize"
            v_cell = self.detokenize(h, tok.cells, tok.mask)
            stage = "cell-to-mesh"
            v_mesh = self.cells_to_mesh(b.cells, v_cell, enc.mesh)
            stage = "mesh-head"
            out = {"mesh": self.mesh_head(torch.cat([v_mesh, enc.mesh_embed], dim=-1))}
            if self.cfg.d_elem_out:
                stage = "element-head"
                m2e = b.e2m_edges.flip(0)
                v_elem = self.m2e(m2e, v_mesh, enc.elem)
                out["element"] = self.elem_head(v_elem)
        except Exception as exc:
            raise StageError(stage, exc) from exc
        return out


def init_params(cfg: AstConfig, seed: int = 0) -> AstModel:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return AstModel(cfg)


def count_params(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())
