"""Coarse-level matching: attention transform, cosine scores, dual-softmax, MNN.

The transform adds 2-D sinusoidal positional encoding once, then runs
``n_attn`` rounds of (self-attention on each map, cross-attention between
maps) with weights shared across rounds. Cross updates are computed from the
pre-round values on both sides so identical inputs stay identical.
"""

from __future__ import annotations

import math

import numpy as np
import torch
import torch.nn as nn

from .core import CoarseMatchSet, InvariantError

NORM_FLOOR = 1e-8


def sinusoidal_pe_2d(h: int, w: int, channels: int, dtype=torch.float32) -> torch.Tensor:
    """Fixed 2-D sinusoidal positional encoding, shape [h*w, channels]."""
    if channels % 4:
        raise InvariantError(f"positional encoding needs channels % 4 == 0, got {channels}")
    quarter = channels // 4
    freqs = torch.exp(
        -math.log(10000.0) * torch.arange(quarter, dtype=dtype) / max(quarter - 1, 1)
    )
    ys = torch.arange(h, dtype=dtype)[:, None] * freqs[None, :]  # [h, q]
    xs = torch.arange(w, dtype=dtype)[:, None] * freqs[None, :]  # [w, q]
    pe = torch.zeros(h, w, channels, dtype=dtype)
    pe[:, :, 0 * quarter : 1 * quarter] = torch.sin(xs)[None, :, :].expand(h, w, quarter)
    pe[:, :, 1 * quarter : 2 * quarter] = torch.cos(xs)[None, :, :].expand(h, w, quarter)
    pe[:, :, 2 * quarter : 3 * quarter] = torch.sin(ys)[:, None, :].expand(h, w, quarter)
    pe[:, :, 3 * quarter : 4 * quarter] = torch.cos(ys)[:, None, :].expand(h, w, quarter)
    return pe.reshape(h * w, channels)


class AttentionBlock(nn.Module):
    """Pre-norm single-head attention plus feed-forward, both residual."""

    def __init__(self, dim: int, ff_mult: int = 2):
        super().__init__()
        self.dim = dim
        self.norm_q = nn.LayerNorm(dim)
        self.norm_kv = nn.LayerNorm(dim)
        self.to_q = nn.Linear(dim, dim, bias=False)
        self.to_k = nn.Linear(dim, dim, bias=False)
        self.to_v = nn.Linear(dim, dim, bias=False)
        self.proj = nn.Linear(dim, dim)
        self.norm_ff = nn.LayerNorm(dim)
        self.ff = nn.Sequential(
            nn.Linear(dim, ff_mult * dim), nn.GELU(), nn.Linear(ff_mult * dim, dim)
        )

    def forward(self, x: torch.Tensor, source: torch.Tensor) -> torch.Tensor:
        q = self.to_q(self.norm_q(x))
        kv = self.norm_kv(source)
        k, v = self.to_k(kv), self.to_v(kv)
        attn = torch.softmax(q @ k.transpose(-2, -1) / math.sqrt(self.dim), dim=-1)
        x = x + self.proj(attn @ v)
        return x + self.ff(self.norm_ff(x))


class CoarseTransformer(nn.Module):
    """Interleaved self/cross attention over the two coarse maps."""

    def __init__(self, dim: int):
        super().__init__()
        self.dim = dim
        self.self_block = AttentionBlock(dim)
        self.cross_block = AttentionBlock(dim)

    def forward(
        self, ca: torch.Tensor, cb: torch.Tensor, n_attn: int
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """[B, C, h, w] maps in, same shapes out."""
        if ca.shape[1] != cb.shape[1]:
            raise InvariantError(f"channel mismatch {ca.shape[1]} vs {cb.shape[1]}")
        if ca.shape[1] != self.dim:
            raise InvariantError(f"transformer built for dim {self.dim}, got {ca.shape[1]}")
        ba, c, ha, wa = ca.shape
        bb, _, hb, wb = cb.shape
        fa = ca.reshape(ba, c, ha * wa).transpose(1, 2)
        fb = cb.reshape(bb, c, hb * wb).transpose(1, 2)
        fa = fa + sinusoidal_pe_2d(ha, wa, c, dtype=ca.dtype)[None]
        fb = fb + sinusoidal_pe_2d(hb, wb, c, dtype=cb.dtype)[None]
        for _ in range(n_attn):
            fa = self.self_block(fa, fa)
            fb = self.self_block(fb, fb)
            fa, fb = self.cross_block(fa, fb), self.cross_block(fb, fa)
        out_a = fa.transpose(1, 2).reshape(ba, c, ha, wa)
        out_b = fb.transpose(1, 2).reshape(bb, c, hb, wb)
        return out_a, out_b


def transform_features(
    tf: CoarseTransformer, ca: torch.Tensor, cb: torch.Tensor, n_attn: int
) -> tuple[torch.Tensor, torch.Tensor]:
    """Functional entry point; accepts [C, h, w] maps or batched [B, C, h, w]."""
    squeeze = ca.ndim == 3
    if squeeze:
        ca, cb = ca.unsqueeze(0), cb.unsqueeze(0)
    out_a, out_b = tf(ca, cb, n_attn)
    if squeeze:
        out_a, out_b = out_a.squeeze(0), out_b.squeeze(0)
    return out_a, out_b


def score_matrix(ca: torch.Tensor, cb: torch.Tensor, temperature: float) -> torch.Tensor:
    """Temperature-scaled pairwise cosine similarity between cell features.

    Accepts [C, h, w] maps or pre-flattened [n, C] token matrices; returns
    [n_a, n_b].
    """
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    fa = ca.reshape(ca.shape[0], -1).T if ca.ndim == 3 else ca
    fb = cb.reshape(cb.shape[0], -1).T if cb.ndim == 3 else cb
    na = fa / fa.norm(dim=1, keepdim=True).clamp_min(NORM_FLOOR)
    nb = fb / fb.norm(dim=1, keepdim=True).clamp_min(NORM_FLOOR)
    return (na @ nb.T) / temperature


def dual_softmax(s: torch.Tensor) -> torch.Tensor:
    """Elementwise product of row-wise and column-wise softmax."""
    return torch.softmax(s, dim=1) * torch.softmax(s, dim=0)


def select_matches(p, tau: float) -> CoarseMatchSet:
    """Mutual-nearest-neighbor cells with probability above tau.

    A pair (i, j) survives iff p[i, j] > tau, j is the argmax of row i, and i
    is the argmax of column j; argmax ties break to the lowest index.
    """
    if not (0.0 < tau < 1.0):
        raise ValueError(f"tau must be in (0, 1), got {tau}")
    pm = p.detach().cpu().numpy() if isinstance(p, torch.Tensor) else np.asarray(p)
    if pm.ndim != 2:
        raise ValueError("probability matrix must be 2-D")
    best_j = pm.argmax(axis=1)
    best_i = pm.argmax(axis=0)
    rows = np.arange(pm.shape[0])
    mutual = best_i[best_j] == rows
    conf = pm[rows, best_j]
    keep = mutual & (conf > tau)
    return CoarseMatchSet(rows[keep], best_j[keep], np.clip(conf[keep], 0.0, 1.0))
