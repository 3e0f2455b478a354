"""Differentiable building blocks on top of torch tensors.

Everything here works on float32 for training and float64 for gradient
verification; torch autograd supplies the backward pass and
:func:`grad_check` verifies it against central finite differences.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

LN_EPS = 1e-5
KINK_RTOL = 1e-7  # grad_check: allowed disagreement between steps h and h/10
_ATTN_CHUNK = 1 << 24  # score entries per chunk in no-grad attention


class DivergenceError(RuntimeError):
    pass


def glorot_uniform_(w: torch.Tensor) -> torch.Tensor:
    fan_out, fan_in = w.shape
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    with torch.no_grad():
        return w.uniform_(-bound, bound)


class RWFLinear(nn.Module):
    """Linear layer with random weight factorization: W = diag(exp(s)) V."""

    def __init__(self, d_in: int, d_out: int, bias: bool = True):
        super().__init__()
        self.s = nn.Parameter(torch.zeros(d_out))
        self.V = nn.Parameter(glorot_uniform_(torch.empty(d_out, d_in)))
        self.bias = nn.Parameter(torch.zeros(d_out)) if bias else None

    @property
    def weight(self) -> torch.Tensor:
        return torch.exp(self.s)[:, None] * self.V

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] != self.V.shape[1]:
            raise ValueError(f"expected width {self.V.shape[1]}, got {x.shape[-1]}")
        return F.linear(x, self.weight, self.bias)


def layer_norm(x: torch.Tensor, gamma: torch.Tensor | None = None, beta: torch.Tensor | None = None,
               eps: float = LN_EPS) -> torch.Tensor:
    if x.shape[-1] == 0:
        raise ValueError("layer_norm over a zero-width feature axis")
    mu = x.mean(dim=-1, keepdim=True)
    var = ((x - mu) ** 2).mean(dim=-1, keepdim=True)
    y = (x - mu) / torch.sqrt(var + eps)
    if gamma is not None:
        y = y * gamma
    if beta is not None:
        y = y + beta
    return y


class LayerNorm(nn.Module):
    def __init__(self, d: int):
        super().__init__()
        self.gamma = nn.Parameter(torch.ones(d))
        self.beta = nn.Parameter(torch.zeros(d))

    def forward(self, x):
        return layer_norm(x, self.gamma, self.beta)


class MLP(nn.Module):
    """Two RWF layers with a ReLU in between, optionally LayerNorm on the output."""

    def __init__(self, d_in: int, d_hidden: int, d_out: int, layer_norm: bool = False):
        super().__init__()
        self.fc1 = RWFLinear(d_in, d_hidden)
        self.fc2 = RWFLinear(d_hidden, d_out)
        self.norm = LayerNorm(d_out) if layer_norm else None

    def forward(self, x):
        y = self.fc2(torch.relu(self.fc1(x)))
        return self.norm(y) if self.norm is not None else y


def _attention_full(q, k, v, mask, dropout, training, return_weights):
    scores = q @ k.transpose(-1, -2) / math.sqrt(q.shape[-1])
    if mask is not None:
        scores = scores.masked_fill(~mask, float("-inf"))
    w = torch.softmax(scores, dim=-1)
    if dropout > 0.0 and training:
        w_used = F.dropout(w, p=dropout, training=True)
    else:
        w_used = w
    out = w_used @ v
    return (out, w) if return_weights else out


def attention(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor, mask: torch.Tensor | None = None,
              dropout: float = 0.0, training: bool = False, return_weights: bool = False):
    """softmax(q k^T / sqrt(d_k)) v over the last two axes.

    ``mask`` broadcasts against the score matrix ``(..., N_q, N_k)``; False
    entries are excluded. Without autograd, large score matrices are computed
    in query chunks, which changes nothing row-wise.
    """
    if q.shape[-1] != k.shape[-1]:
        raise ValueError(f"query width {q.shape[-1]} != key width {k.shape[-1]}")
    if k.shape[-2] != v.shape[-2]:
        raise ValueError(f"{k.shape[-2]} keys but {v.shape[-2]} values")
    nq, nk = q.shape[-2], k.shape[-2]
    lead = int(torch.tensor(q.shape[:-2]).prod()) if q.dim() > 2 else 1
    if return_weights or torch.is_grad_enabled() or lead * nq * nk <= _ATTN_CHUNK:
        return _attention_full(q, k, v, mask, dropout, training, return_weights)
    rows = max(1, _ATTN_CHUNK // max(1, lead * nk))
    parts = []
    for s in range(0, nq, rows):
        m = None
        if mask is not None:
            m = mask if mask.shape[-2] == 1 else mask[..., s : s + rows, :]
        parts.append(_attention_full(q[..., s : s + rows, :], k, v, m, dropout, training, False))
    return torch.cat(parts, dim=-2)


class MultiHeadAttention(nn.Module):
    """Bias-free per-head q/k/v projections, concatenated heads, biased output projection."""

    def __init__(self, d_model: int, heads: int = 8, head_dim: int = 64, d_context: int | None = None,
                 dropout: float = 0.0):
        super().__init__()
        d_context = d_model if d_context is None else d_context
        inner = heads * head_dim
        self.heads, self.head_dim, self.dropout = heads, head_dim, dropout
        self.to_q = nn.Linear(d_model, inner, bias=False)
        self.to_k = nn.Linear(d_context, inner, bias=False)
        self.to_v = nn.Linear(d_context, inner, bias=False)
        self.to_out = nn.Linear(inner, d_model)

    def _split(self, x):
        return x.reshape(*x.shape[:-1], self.heads, self.head_dim).transpose(-2, -3)

    def forward(self, q, k, v, key_mask: torch.Tensor | None = None):
        """``key_mask`` is ``(..., N_k)`` bool, True for valid keys."""
        if q.shape[-1] != self.to_q.in_features or k.shape[-1] != self.to_k.in_features:
            raise ValueError("width mismatch in multi-head attention")
        qh, kh, vh = self._split(self.to_q(q)), self._split(self.to_k(k)), self._split(self.to_v(v))
        mask = None
        if key_mask is not None:
            mask = key_mask[..., None, None, :]
        out = attention(qh, kh, vh, mask, self.dropout, self.training)
        out = out.transpose(-2, -3).reshape(*q.shape[:-1], self.heads * self.head_dim)
        return self.to_out(out)


class GEGLUFeedForward(nn.Module):
    """(GELU(x W) * (x V)) W2 with exact-erf GELU; the caller adds the residual."""

    def __init__(self, d_model: int, hidden: int = 512, dropout: float = 0.0):
        super().__init__()
        self.w = nn.Linear(d_model, hidden, bias=False)
        self.v = nn.Linear(d_model, hidden, bias=False)
        self.w2 = nn.Linear(hidden, d_model, bias=False)
        self.dropout = dropout

    def forward(self, x):
        h = F.gelu(self.w(x)) * self.v(x)
        h = F.dropout(h, p=self.dropout, training=self.training)
        return self.w2(h)


class CrossAttnBlock(nn.Module):
    """Pre-norm block: q + MHA(LN q, LN ctx, LN ctx), then + FFN(LN ·)."""

    def __init__(self, d_model: int, heads: int = 8, head_dim: int = 64, ffn_hidden: int = 512,
                 dropout: float = 0.1):
        super().__init__()
        self.norm_q = LayerNorm(d_model)
        self.norm_ctx = LayerNorm(d_model)
        self.attn = MultiHeadAttention(d_model, heads, head_dim, dropout=dropout)
        self.norm_ffn = LayerNorm(d_model)
        self.ffn = GEGLUFeedForward(d_model, ffn_hidden, dropout)

    def forward(self, query, context, context_mask: torch.Tensor | None = None):
        if query.shape[-1] != context.shape[-1]:
            raise ValueError(f"query width {query.shape[-1]} != context width {context.shape[-1]}")
        ctx = self.norm_ctx(context)
        x = query + self.attn(self.norm_q(query), ctx, ctx, context_mask)
        return x + self.ffn(self.norm_ffn(x))


class SelfAttnBlock(nn.Module):
    def __init__(self, d_model: int, heads: int = 8, head_dim: int = 64, ffn_hidden: int = 512,
                 dropout: float = 0.1):
        super().__init__()
        self.norm = LayerNorm(d_model)
        self.attn = MultiHeadAttention(d_model, heads, head_dim, dropout=dropout)
        self.norm_ffn = LayerNorm(d_model)
        self.ffn = GEGLUFeedForward(d_model, ffn_hidden, dropout)

    def forward(self, x, mask: torch.Tensor | None = None):
        h = self.norm(x)
        x = x + self.attn(h, h, h, mask)
        return x + self.ffn(self.norm_ffn(x))


class PosEmb(nn.Module):
    """Adds a learned projection of a log-spaced Fourier bank of positions."""

    def __init__(self, d_model: int, n_freqs: int = 16, dims: int = 3, max_log2: float = 15.0):
        super().__init__()
        freqs = math.pi * 2.0 ** torch.linspace(0.0, max_log2, n_freqs, dtype=torch.float64)
        self.register_buffer("freqs", freqs, persistent=False)
        self.proj = nn.Linear(2 * n_freqs * dims, d_model)

    def fourier(self, p: torch.Tensor) -> torch.Tensor:
        ang = p.to(torch.float64)[..., None] * self.freqs  # (..., dims, n_freqs)
        feats = torch.cat([torch.sin(ang), torch.cos(ang)], dim=-1)
        return feats.reshape(*p.shape[:-1], -1).to(self.proj.weight.dtype)

    def forward(self, x: torch.Tensor, p: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] != self.proj.out_features:
            raise ValueError(f"expected width {self.proj.out_features}, got {x.shape[-1]}")
        return x + self.proj(self.fourier(p))


@dataclass
class AdamState:
    step: int = 0
    m: list[torch.Tensor] = field(default_factory=list)
    v: list[torch.Tensor] = field(default_factory=list)


@torch.no_grad()
def adam_step(state: AdamState, params: Sequence[torch.Tensor], grads: Sequence[torch.Tensor | None],
              lr: float, betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8) -> AdamState:
    """One in-place Adam update; raises DivergenceError on non-finite gradients."""
    if not state.m:
        state.m = [torch.zeros_like(p) for p in params]
        state.v = [torch.zeros_like(p) for p in params]
    if len(state.m) != len(params) or len(grads) != len(params):
        raise ValueError("optimizer state does not match parameter list")
    for g in grads:
        if g is not None and not torch.isfinite(g).all():
            raise DivergenceError("diverged: non-finite gradient")
    b1, b2 = betas
    state.step += 1
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            continue
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {tuple(g.shape)} != parameter shape {tuple(p.shape)}")
        m.mul_(b1).add_(g, alpha=1.0 - b1)
        v.mul_(b2).addcmul_(g, g, value=1.0 - b2)
        p.sub_(lr * (m / c1) / (torch.sqrt(v / c2) + eps))
    return state


def _rel_err(a: torch.Tensor, n: torch.Tensor) -> float:
    denom = max(float(a.abs().max()), float(n.abs().max()), 1e-8) if a.numel() else 1.0
    return float((a - n).abs().max()) / denom if a.numel() else 0.0


def grad_check(fn: Callable[..., torch.Tensor], inputs: Sequence[torch.Tensor], delta: float = 1e-5,
               seed: int = 0, directions: int | None = None, kink_retries: int = 3) -> float:
    """Worst relative error between autograd and central finite differences.

    ``fn`` maps the inputs to a tensor; it is contracted with a fixed random
    cotangent so every output entry participates. Per input the error is
    ``max|a - n| / max(max|a|, max|n|, 1e-8)``.

    With ``directions=None`` every input coordinate is probed. Otherwise
    ``directions`` random unit directions over all inputs jointly are probed,
    comparing directional derivatives (for large parameter sets).

    A probe whose central differences at ``h`` and ``h / 10`` disagree by
    more than ``KINK_RTOL`` (relative) has straddled a kink, e.g. a ReLU
    switching. The step is then divided by ten, up to ``kink_retries`` times.
    For smooth functions the two agree to O(h^2), so the test stays quiet.
    """
    xs = [x.detach().to(torch.float64).clone().requires_grad_(True) for x in inputs]
    out = fn(*xs)
    if not torch.isfinite(out).all():
        raise FloatingPointError("grad_check: non-finite outputs")
    gen = torch.Generator().manual_seed(seed)
    cot = torch.randn(out.shape, generator=gen, dtype=torch.float64)
    grads = torch.autograd.grad((out * cot).sum(), xs, allow_unused=True)
    grads = [torch.zeros_like(x) if g is None else g for x, g in zip(xs, grads)]
    base = [x.detach() for x in xs]
    g_scale = max((float(g.abs().max()) for g in grads if g.numel()), default=0.0)

    def scalar(vals) -> float:
        with torch.no_grad():
            y = fn(*vals)
        if not torch.isfinite(y).all():
            raise FloatingPointError("grad_check: non-finite outputs")
        return float((y * cot).sum())

    def probe(shifted: Callable[[float], list], scale: float) -> float:
        h = delta
        d = (scalar(shifted(h)) - scalar(shifted(-h))) / (2.0 * h)
        for _ in range(kink_retries):
            fine = (scalar(shifted(h / 10)) - scalar(shifted(-h / 10))) / (0.2 * h)
            if abs(fine - d) <= KINK_RTOL * max(abs(d), abs(fine), scale, 1e-8):
                return d
            h, d = h / 10, fine
        return d

    if directions is None:
        worst = 0.0
        for j, x in enumerate(base):
            num = torch.zeros_like(x)
            flat = num.view(-1)
            for i in range(x.numel()):

                def shifted(h, j=j, i=i, x=x):
                    moved = x.clone()
                    moved.view(-1)[i] += h
                    return base[:j] + [moved] + base[j + 1 :]

                flat[i] = probe(shifted, g_scale)
            worst = max(worst, _rel_err(grads[j], num))
        return worst

    all_dirs, a_list = [], []
    for _ in range(directions):
        dirs = [torch.randn(x.shape, generator=gen, dtype=torch.float64) for x in base]
        norm = math.sqrt(sum(float((d ** 2).sum()) for d in dirs))
        all_dirs.append([d / norm for d in dirs])
        a_list.append(sum(float((g * d).sum()) for g, d in zip(grads, all_dirs[-1])))
    a_scale = max(abs(a) for a in a_list)
    n_list = [probe(lambda h, dirs=dirs: [x + h * d for x, d in zip(base, dirs)], a_scale) for dirs in all_dirs]
    return _rel_err(torch.tensor(a_list, dtype=torch.float64), torch.tensor(n_list, dtype=torch.float64))
