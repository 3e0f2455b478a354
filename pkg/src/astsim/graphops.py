"""Message passing on typed edge sets, mesh/cell transfer and sparse octree convolution."""

from __future__ import annotations

import math
from typing import Callable

import numpy as np
import torch
import torch.nn as nn

from .numerics import MLP
from .spatial import KERNEL_OFFSETS

HIDDEN = 128
EDGE_CHUNK = 1 << 15  # edges per block when autograd is off
N_OFFSETS = len(KERNEL_OFFSETS)


def as_index(a) -> torch.Tensor:
    if isinstance(a, torch.Tensor):
        return a.long()
    return torch.from_numpy(np.ascontiguousarray(a, dtype=np.int64))


def scatter_sum(src: torch.Tensor, index: torch.Tensor, n: int) -> torch.Tensor:
    out = src.new_zeros((n,) + tuple(src.shape[1:]))
    return out.index_add_(0, index, src)


def scatter_mean(src: torch.Tensor, index: torch.Tensor, n: int) -> torch.Tensor:
    total = scatter_sum(src, index, n)
    count = torch.bincount(index, minlength=n).clamp_min(1).to(src.dtype)
    return total.div_(count[:, None])


def message_pass(
    f_e: Callable[..., torch.Tensor],
    f_v: Callable[[torch.Tensor, torch.Tensor], torch.Tensor],
    edges,
    v_sender: torch.Tensor,
    v_receiver: torch.Tensor,
    e_feats: torch.Tensor | None = None,
    keep_messages: bool = True,
) -> tuple[torch.Tensor, torch.Tensor | None]:
    """One round over ``edges`` (``(2, E)`` sender/receiver rows).

    Messages are ``f_e(e, v_s, v_r)`` (or ``f_e(v_s, v_r)`` without edge
    features), summed per receiver and passed to ``f_v(v_r, agg)``. Returns
    the new receiver features and the messages (``None`` when
    ``keep_messages`` is off and the edges were processed in blocks).

    Without autograd, edge sets larger than ``EDGE_CHUNK`` are processed in
    blocks so the gathered endpoint features never exist all at once.
    """
    edges = as_index(edges)
    if edges.dim() != 2 or edges.shape[0] != 2:
        raise ValueError(f"edges must have shape (2, E), got {tuple(edges.shape)}")
    snd, rcv = edges[0], edges[1]
    if edges.shape[1]:
        if int(snd.min()) < 0 or int(snd.max()) >= len(v_sender):
            raise IndexError("sender index out of range")
        if int(rcv.min()) < 0 or int(rcv.max()) >= len(v_receiver):
            raise IndexError("receiver index out of range")
    if e_feats is not None and len(e_feats) != edges.shape[1]:
        raise ValueError(f"{len(e_feats)} edge feature rows for {edges.shape[1]} edges")

    def messages(lo, hi):
        vs, vr = v_sender[snd[lo:hi]], v_receiver[rcv[lo:hi]]
        m = f_e(vs, vr) if e_feats is None else f_e(e_feats[lo:hi], vs, vr)
        return m[:, None] if m.dim() == 1 else m

    n_edges = edges.shape[1]
    if torch.is_grad_enabled() or n_edges <= EDGE_CHUNK:
        msg = messages(0, n_edges)
        agg = v_receiver.new_zeros((len(v_receiver), msg.shape[1]))
        if n_edges:
            agg = agg.index_add(0, rcv, msg.to(agg.dtype))
        return f_v(v_receiver, agg), msg
    agg, kept = None, []
    for lo in range(0, n_edges, EDGE_CHUNK):
        m = messages(lo, lo + EDGE_CHUNK)
        if agg is None:
            agg = v_receiver.new_zeros((len(v_receiver), m.shape[1]))
        agg.index_add_(0, rcv[lo : lo + EDGE_CHUNK], m.to(agg.dtype))
        if keep_messages:
            kept.append(m)
    return f_v(v_receiver, agg), torch.cat(kept) if keep_messages else None


class MessagePassing(nn.Module):
    """Learned round: f^e = LN(MLP([e, v_s, v_r])), v' = v + LN(MLP([v, agg])).

    ``edge_dim=0`` gives the edge-free variant. With ``residual=False`` the
    node function returns LN(MLP(...)) directly (used when widths differ).
    """

    def __init__(self, d_sender: int, d_receiver: int, edge_dim: int = 0, hidden: int = HIDDEN,
                 d_out: int | None = None, residual: bool = True):
        super().__init__()
        d_out = d_receiver if d_out is None else d_out
        if residual and d_out != d_receiver:
            raise ValueError("residual node update needs d_out == d_receiver")
        self.edge_dim, self.d_sender, self.d_receiver = edge_dim, d_sender, d_receiver
        self.residual = residual
        self.edge_mlp = MLP(edge_dim + d_sender + d_receiver, hidden, hidden, layer_norm=True)
        self.node_mlp = MLP(d_receiver + hidden, hidden, d_out, layer_norm=True)

    def f_e(self, *parts):
        return self.edge_mlp(torch.cat(parts, dim=-1))

    def f_v(self, v, agg):
        out = self.node_mlp(torch.cat([v, agg], dim=-1))
        return v + out if self.residual else out

    def forward(self, edges, v_sender, v_receiver, e_feats=None, edge_encoder=None):
        """``edge_encoder`` maps raw ``e_feats`` rows to edge latents block by block."""
        if (e_feats is None) != (self.edge_dim == 0):
            raise ValueError("edge features must be given iff the pass was built with edge_dim > 0")
        if v_sender.shape[-1] != self.d_sender or v_receiver.shape[-1] != self.d_receiver:
            raise ValueError(
                f"width mismatch: got sender {v_sender.shape[-1]}, receiver {v_receiver.shape[-1]}; "
                f"expected {self.d_sender}, {self.d_receiver}"
            )
        f_e = self.f_e
        if edge_encoder is not None:
            f_e = lambda e, vs, vr: self.f_e(edge_encoder(e), vs, vr)  # noqa: E731
        elif e_feats is not None and e_feats.shape[-1] != self.edge_dim:
            raise ValueError(f"edge width {e_feats.shape[-1]} != {self.edge_dim}")
        out, _ = message_pass(f_e, self.f_v, edges, v_sender, v_receiver, e_feats, keep_messages=False)
        return out


def mesh_to_cell_init(cs, v_mesh: torch.Tensor) -> torch.Tensor:
    """Leaf-cell features as the mean of member mesh-node features."""
    idx = as_index(cs.node_to_cell)
    if len(idx) != len(v_mesh):
        raise ValueError(f"{len(v_mesh)} node rows for a cell set over {len(idx)} nodes")
    return scatter_mean(v_mesh, idx, cs.n_cells(cs.L))


def _incidence(cs) -> torch.Tensor:
    n2c = as_index(cs.node_to_cell)
    return torch.stack([torch.arange(len(n2c)), n2c])


def m2c_message_pass(mp, cs, v_mesh: torch.Tensor, v_cell: torch.Tensor) -> torch.Tensor:
    """Edge-free pass from every mesh node into its leaf cell."""
    if len(v_cell) != cs.n_cells(cs.L):
        raise ValueError(f"{len(v_cell)} cell rows for {cs.n_cells(cs.L)} leaf cells")
    return mp(_incidence(cs), v_mesh, v_cell)


def c2m_message_pass(mp, cs, v_cell: torch.Tensor, v_mesh: torch.Tensor) -> torch.Tensor:
    """Edge-free pass from each leaf cell back to its member mesh nodes."""
    if len(v_cell) != cs.n_cells(cs.L):
        raise ValueError(f"{len(v_cell)} cell rows for {cs.n_cells(cs.L)} leaf cells")
    return mp(_incidence(cs).flip(0), v_cell, v_mesh)


def _kernel_init(n_in: int, d_in: int, d_out: int) -> torch.Tensor:
    bound = 1.0 / math.sqrt(n_in * d_in)
    return torch.empty(N_OFFSETS, d_in, d_out).uniform_(-bound, bound)


class SparseConv(nn.Module):
    """3x3x3 convolution over non-empty cells; empty neighbors read as zeros.

    Output cell ``P`` at level ``l`` reads cells ``P * 2**stride + offset`` at
    level ``l + stride``, so ``stride=1`` halves the resolution like a dense
    stride-2, padding-1 convolution.
    """

    def __init__(self, d_in: int, d_out: int, stride: int = 1):
        super().__init__()
        self.stride = stride
        self.weight = nn.Parameter(_kernel_init(N_OFFSETS, d_in, d_out))  # (27, d_in, d_out)
        self.bias = nn.Parameter(torch.zeros(d_out))

    def forward(self, cs, x: torch.Tensor, to_level: int) -> torch.Tensor:
        table = as_index(cs.neighbor_table(to_level, self.stride))
        if len(x) != cs.n_cells(to_level + self.stride):
            raise ValueError(f"{len(x)} rows for {cs.n_cells(to_level + self.stride)} cells at level "
                             f"{to_level + self.stride}")
        out = self.bias.expand(len(table), -1).clone()
        for k in range(N_OFFSETS):
            col = table[:, k]
            dst = torch.nonzero(col >= 0).squeeze(1)
            if len(dst):
                out = out.index_add(0, dst, x[col[dst]] @ self.weight[k])
        return out


class SparseConvTranspose(nn.Module):
    """Adjoint indexing of :class:`SparseConv`: each fine cell gathers from the
    coarse cells whose kernel footprint covers it."""

    def __init__(self, d_in: int, d_out: int, stride: int = 1):
        super().__init__()
        self.stride = stride
        self.weight = nn.Parameter(_kernel_init(8, d_in, d_out))  # (27, d_in, d_out)
        self.bias = nn.Parameter(torch.zeros(d_out))

    def forward(self, cs, y: torch.Tensor, from_level: int) -> torch.Tensor:
        table = as_index(cs.neighbor_table(from_level, self.stride))
        if len(y) != len(table):
            raise ValueError(f"{len(y)} rows for {len(table)} cells at level {from_level}")
        n_fine = cs.n_cells(from_level + self.stride)
        out = self.bias.expand(n_fine, -1).clone()
        for k in range(N_OFFSETS):
            col = table[:, k]
            src = torch.nonzero(col >= 0).squeeze(1)
            if len(src):
                out = out.index_add(0, col[src], y[src] @ self.weight[k])
        return out


def _check_depth(cs, n_layers: int) -> None:
    if n_layers > cs.L - cs.L_min:
        raise ValueError(f"{n_layers} OCNN layers need levels down to {cs.L - n_layers}, "
                         f"but the cell set stops at {cs.L_min}")


def ocnn(convs, cs, x: torch.Tensor) -> torch.Tensor:
    """Leaf-level features down to level ``L - len(convs)``, ReLU between layers."""
    _check_depth(cs, len(convs))
    for i, conv in enumerate(convs):
        x = conv(cs, x, cs.L - i - 1)
        if i < len(convs) - 1:
            x = torch.relu(x)
    return x


def ocnn_transposed(convs, cs, y: torch.Tensor) -> torch.Tensor:
    """Level ``L - len(convs)`` features back up to the leaf level."""
    _check_depth(cs, len(convs))
    top = cs.L - len(convs)
    for i, conv in enumerate(convs):
        y = conv(cs, y, top + i)
        if i < len(convs) - 1:
            y = torch.relu(y)
    return y


class OCNN(nn.Module):
    def __init__(self, width: int, n_layers: int, transposed: bool = False):
        super().__init__()
        cls = SparseConvTranspose if transposed else SparseConv
        self.transposed = transposed
        self.layers = nn.ModuleList(cls(width, width, stride=1) for _ in range(n_layers))

    def forward(self, cs, x):
        fn = ocnn_transposed if self.transposed else ocnn
        return fn(self.layers, cs, x)
