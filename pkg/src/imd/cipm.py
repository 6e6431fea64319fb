"""Cross-image interaction prompting.

Each image's prompt is built by cross-attending its frozen-encoder grid
against the partner image's grid and mapping the attended vectors through an
MLP. Prompt token count equals the full attended grid (g*g); no pooling, so
local structure survives into the conditioning.

Prompt modes:
  cross       queries from self, keys/values from partner (default)
  individual  self-attention only, partner ignored
  shared      channel-concat of both grids, one shared prompt for both images
  empty       all-zero tokens
"""

from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F

from .core import Image, InvariantError
from .backbone import image_to_tensor

PROMPT_MODES = ("empty", "individual", "shared", "cross")


class GridEncoder(nn.Module):
    """Frozen convolutional stand-in for a pretrained image encoder.

    Emits a fixed g x g patch grid of d_e-dim features for any input size via
    adaptive pooling after a stride-4 conv stack.
    """

    def __init__(self, d_e: int = 32, grid: int = 16):
        super().__init__()
        self.grid = grid
        self.net = nn.Sequential(
            nn.Conv2d(3, 16, 3, stride=2, padding=1),
            nn.SiLU(),
            nn.Conv2d(16, d_e, 3, stride=2, padding=1),
            nn.SiLU(),
            nn.Conv2d(d_e, d_e, 3, padding=1),
        )
        for p in self.parameters():
            p.requires_grad_(False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return F.adaptive_avg_pool2d(self.net(x), (self.grid, self.grid))


def encode_image(encoder: GridEncoder, image: Image, dtype=torch.float32) -> torch.Tensor:
    """Single image -> [d_e, g, g] grid."""
    return encoder(image_to_tensor(image, dtype=dtype).unsqueeze(0)).squeeze(0)


class CipmWeights(nn.Module):
    """1x1 Q/K/V projections plus the token MLP mapping d_k to prompt width."""

    def __init__(self, d_e: int = 32, d_k: int = 32, d_p: int = 32, identity_mlp: bool = False):
        super().__init__()
        self.d_k = d_k
        self.w_q = nn.Conv2d(d_e, d_k, 1, bias=False)
        self.w_k = nn.Conv2d(d_e, d_k, 1, bias=False)
        self.w_v = nn.Conv2d(d_e, d_k, 1, bias=False)
        # Shared-mode path sees 2*d_e channels; separate kernel, same output width.
        self.w_v_shared = nn.Conv2d(2 * d_e, d_k, 1, bias=False)
        self.mlp = nn.Sequential(nn.Linear(d_k, 2 * d_p), nn.GELU(), nn.Linear(2 * d_p, d_p))
        self.identity_mlp = identity_mlp  # test mode: expose pre-MLP attended vectors
        self.d_p = d_p

    def tokens(self, grid: torch.Tensor, proj: nn.Conv2d) -> torch.Tensor:
        """[B, d_e, g, g] -> [B, g*g, d_k] through a 1x1 projection."""
        out = proj(grid)
        b, c, h, w = out.shape
        return out.reshape(b, c, h * w).transpose(1, 2)

    def attend(self, q: torch.Tensor, k: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
        attn = torch.softmax(q @ k.transpose(1, 2) / math.sqrt(self.d_k), dim=-1)
        return attn @ v

    def finish(self, attended: torch.Tensor) -> torch.Tensor:
        if self.identity_mlp:
            return attended
        return self.mlp(attended)


def cross_prompt(
    fa: torch.Tensor, fb: torch.Tensor, w: CipmWeights, mode: str = "cross"
) -> tuple[torch.Tensor, torch.Tensor]:
    """Build both images' prompts from their encoder grids.

    Accepts [d_e, g, g] or batched [B, d_e, g, g]; returns token tensors of
    matching batchedness, [(B,) g*g, d_p].
    """
    if mode not in PROMPT_MODES:
        raise InvariantError(f"unknown prompt mode {mode!r}")
    squeeze = fa.ndim == 3
    if squeeze:
        fa, fb = fa.unsqueeze(0), fb.unsqueeze(0)
    if fa.shape != fb.shape:
        raise InvariantError(f"grid shapes differ: {tuple(fa.shape)} vs {tuple(fb.shape)}")

    if mode == "empty":
        b, _, g1, g2 = fa.shape
        pa = fa.new_zeros(b, g1 * g2, w.d_p if not w.identity_mlp else w.d_k)
        pb = pa.clone()
    elif mode == "shared":
        v = w.tokens(torch.cat([fa, fb], dim=1), w.w_v_shared)
        pa = w.finish(v)
        pb = pa
    else:
        src_a, src_b = (fa, fb) if mode == "individual" else (fb, fa)
        qa = w.tokens(fa, w.w_q)
        qb = w.tokens(fb, w.w_q)
        pa = w.finish(w.attend(qa, w.tokens(src_a, w.w_k), w.tokens(src_a, w.w_v)))
        pb = w.finish(w.attend(qb, w.tokens(src_b, w.w_k), w.tokens(src_b, w.w_v)))

    if squeeze:
        pa, pb = pa.squeeze(0), pb.squeeze(0)
    return pa, pb
