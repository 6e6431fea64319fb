"""Prompt-conditioned UNet feature extractor with a forward-noising step.

The desk-scale UNet has two resolution stages (image strides 8 and 16 on top
of the stride-8 latent), a middle block, and two up stages; every stage
carries one prompt cross-attention block. Up stages are indexed 1-based by
resolution stage, so the default tap ``block_index=2`` is the final stride-8
stage. An adapter seam (`FeatureBackend`) lets an external pretrained model
stand in for the desk UNet.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict
from typing import Protocol, runtime_checkable

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .core import FeatureMap, Image, InvariantError


@dataclass(frozen=True)
class NoiseSchedule:
    """Cumulative signal coefficients indexed by timestep; index 0 is exactly 1."""

    alpha_bar: np.ndarray  # [T+1]
    T: int

    def __post_init__(self):
        ab = np.asarray(self.alpha_bar, dtype=np.float64)
        object.__setattr__(self, "alpha_bar", ab)
        if ab.shape != (self.T + 1,):
            raise InvariantError("alpha_bar must have T+1 entries")
        if ab[0] != 1.0:
            raise InvariantError("alpha_bar[0] must be exactly 1")
        if np.any(np.diff(ab) >= 0):
            raise InvariantError("alpha_bar must be strictly decreasing")
        if ab[-1] <= 0.0 or np.any(ab > 1.0):
            raise InvariantError("alpha_bar values must lie in (0, 1]")


def make_schedule(T: int = 1000, beta_min: float = 1e-4, beta_max: float = 0.02) -> NoiseSchedule:
    if T < 1:
        raise InvariantError(f"T must be >= 1, got {T}")
    if not (0.0 < beta_min <= beta_max < 1.0):
        raise InvariantError(f"need 0 < beta_min <= beta_max < 1, got [{beta_min}, {beta_max}]")
    betas = np.linspace(beta_min, beta_max, T, dtype=np.float64)
    alpha_bar = np.concatenate([[1.0], np.cumprod(1.0 - betas)])
    return NoiseSchedule(alpha_bar=alpha_bar, T=T)


def add_noise(z0: torch.Tensor, t: int, schedule: NoiseSchedule, seed: int) -> torch.Tensor:
    """Corrupt a latent to level t with seeded Gaussian noise; t=0 is the identity."""
    if t < 0 or t > schedule.T:
        raise InvariantError(f"t={t} outside [0, {schedule.T}]")
    if t == 0:
        return z0.clone()
    gen = torch.Generator(device="cpu").manual_seed(seed)
    eps = torch.randn(z0.shape, generator=gen, dtype=z0.dtype)
    ab = float(schedule.alpha_bar[t])
    return math.sqrt(ab) * z0 + math.sqrt(1.0 - ab) * eps


@dataclass
class BackboneSpec:
    """Architecture card for the desk UNet.

    ``block_index`` counts up stages 1-based from the bottleneck; with two up
    stages only index 2 emits stride-8 activations. ``block_indexing`` is for
    external adapters that count residual blocks instead of stages.
    """

    latent_channels: int = 4
    widths: tuple[int, int] = (32, 64)
    c_out: int = 64
    d_p: int = 32
    time_dim: int = 64
    block_index: int = 2
    block_indexing: str = "stage"  # "stage" | "resblock"

    def __post_init__(self):
        if self.block_indexing not in ("stage", "resblock"):
            raise InvariantError(f"unknown block_indexing {self.block_indexing!r}")
        if self.up_stage_stride(self.block_index) != 8:
            raise InvariantError(
                f"tapped up block {self.block_index} emits stride "
                f"{self.up_stage_stride(self.block_index)}, need 8"
            )

    def up_stage_stride(self, index: int) -> int:
        # Desk UNet up stages: 1 -> image stride 16, 2 -> image stride 8.
        # In "resblock" indexing each stage holds one residual block, so the
        # two conventions coincide here.
        strides = {1: 16, 2: 8}
        if index not in strides:
            raise InvariantError(f"up block index {index} outside 1..2")
        return strides[index]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["widths"] = list(self.widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "BackboneSpec":
        d = dict(d)
        d["widths"] = tuple(d.get("widths", (32, 64)))
        return cls(**d)


@runtime_checkable
class FeatureBackend(Protocol):
    """Seam for slotting in an external pretrained diffusion feature extractor."""

    def extract(self, image: Image, t: int, prompt: torch.Tensor) -> FeatureMap: ...


def _num_groups(channels: int) -> int:
    for g in (8, 4, 2, 1):
        if channels % g == 0:
            return g
    return 1


def timestep_embedding(t: int, dim: int, dtype=torch.float32) -> torch.Tensor:
    """Sinusoidal embedding of a scalar timestep, shape [dim]."""
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=dtype) / max(half - 1, 1))
    args = float(t) * freqs
    emb = torch.cat([torch.sin(args), torch.cos(args)])
    if dim % 2:
        emb = torch.cat([emb, emb.new_zeros(1)])
    return emb


class LatentEncoder(nn.Module):
    """Deterministic stride-8 convolutional encoder standing in for a VAE."""

    def __init__(self, latent_channels: int = 4):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(3, 16, 4, stride=2, padding=1),
            nn.SiLU(),
            nn.Conv2d(16, 32, 4, stride=2, padding=1),
            nn.SiLU(),
            nn.Conv2d(32, latent_channels, 4, stride=2, padding=1),
        )
        for p in self.parameters():
            p.requires_grad_(False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] % 8 or x.shape[-2] % 8:
            raise InvariantError(f"image dims {tuple(x.shape[-2:])} not divisible by 8")
        return self.net(x)


def image_to_tensor(image: Image, dtype=torch.float32) -> torch.Tensor:
    """uint8 HWC image -> CHW tensor in [-1, 1]."""
    arr = image.pixels.astype(np.float32) / 127.5 - 1.0
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(2, 0, 1))).to(dtype)


def encode_latent(encoder: LatentEncoder, image: Image, dtype=torch.float32) -> torch.Tensor:
    x = image_to_tensor(image, dtype=dtype).unsqueeze(0)
    return encoder(x).squeeze(0)


class ResBlock(nn.Module):
    def __init__(self, c_in: int, c_out: int, time_dim: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(_num_groups(c_in), c_in)
        self.conv1 = nn.Conv2d(c_in, c_out, 3, padding=1)
        self.time_proj = nn.Linear(time_dim, c_out)
        self.norm2 = nn.GroupNorm(_num_groups(c_out), c_out)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1)
        self.skip = nn.Conv2d(c_in, c_out, 1) if c_in != c_out else nn.Identity()

    def forward(self, x, temb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.time_proj(F.silu(temb))[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return h + self.skip(x)


class PromptCrossAttention(nn.Module):
    """Single-head cross-attention from spatial positions to prompt tokens."""

    def __init__(self, channels: int, d_p: int):
        super().__init__()
        self.norm = nn.GroupNorm(_num_groups(channels), channels)
        self.to_q = nn.Linear(channels, channels, bias=False)
        self.to_k = nn.Linear(d_p, channels, bias=False)
        self.to_v = nn.Linear(d_p, channels, bias=False)
        self.proj = nn.Linear(channels, channels)

    def forward(self, x: torch.Tensor, prompt: torch.Tensor) -> torch.Tensor:
        b, c, h, w = x.shape
        tokens = self.norm(x).reshape(b, c, h * w).transpose(1, 2)  # [B, HW, C]
        q = self.to_q(tokens)
        k = self.to_k(prompt)
        v = self.to_v(prompt)
        attn = torch.softmax(q @ k.transpose(1, 2) / math.sqrt(c), dim=-1)
        out = self.proj(attn @ v).transpose(1, 2).reshape(b, c, h, w)
        return x + out


class DeskUNet(nn.Module):
    """Two-stage UNet whose up-block activations serve as coarse features."""

    def __init__(self, spec: BackboneSpec):
        super().__init__()
        self.spec = spec
        c0, c1 = spec.widths
        td = spec.time_dim
        self.time_mlp = nn.Sequential(nn.Linear(td, td), nn.SiLU(), nn.Linear(td, td))
        self.in_conv = nn.Conv2d(spec.latent_channels, c0, 3, padding=1)
        self.down1 = ResBlock(c0, c0, td)
        self.attn_d1 = PromptCrossAttention(c0, spec.d_p)
        self.downsample = nn.Conv2d(c0, c0, 3, stride=2, padding=1)
        self.down2 = ResBlock(c0, c1, td)
        self.attn_d2 = PromptCrossAttention(c1, spec.d_p)
        self.mid = ResBlock(c1, c1, td)
        self.attn_mid = PromptCrossAttention(c1, spec.d_p)
        self.up1 = ResBlock(c1 + c1, c1, td)
        self.attn_u1 = PromptCrossAttention(c1, spec.d_p)
        self.up_conv = nn.Conv2d(c1, c1, 3, padding=1)
        self.up2 = ResBlock(c1 + c0, spec.c_out, td)
        self.attn_u2 = PromptCrossAttention(spec.c_out, spec.d_p)

    def forward(self, z_t: torch.Tensor, t: int, prompt: torch.Tensor) -> dict[int, torch.Tensor]:
        """Returns activations of each up stage, keyed by 1-based stage index."""
        if prompt.shape[-1] != self.spec.d_p:
            raise InvariantError(
                f"prompt width {prompt.shape[-1]} != configured d_p {self.spec.d_p}"
            )
        temb = self.time_mlp(
            timestep_embedding(t, self.spec.time_dim, dtype=z_t.dtype).unsqueeze(0)
        ).expand(z_t.shape[0], -1)
        h1 = self.attn_d1(self.down1(self.in_conv(z_t), temb), prompt)
        h2 = self.attn_d2(self.down2(self.downsample(h1), temb), prompt)
        m = self.attn_mid(self.mid(h2, temb), prompt)
        u1 = self.attn_u1(self.up1(torch.cat([m, h2], dim=1), temb), prompt)
        u1_up = self.up_conv(F.interpolate(u1, size=h1.shape[-2:], mode="nearest"))
        u2 = self.attn_u2(self.up2(torch.cat([u1_up, h1], dim=1), temb), prompt)
        return {1: u1, 2: u2}


def extract_features(
    unet: DeskUNet, z_t: torch.Tensor, t: int, prompt: torch.Tensor
) -> torch.Tensor:
    """Tapped up-block activations for a batch of latents, shape [B, C_out, h, w]."""
    taps = unet(z_t, t, prompt)
    idx = unet.spec.block_index
    if unet.spec.up_stage_stride(idx) != 8:
        raise InvariantError(f"up block {idx} does not emit stride-8 features")
    return taps[idx]


def extract_feature_map(
    unet: DeskUNet, z_t: torch.Tensor, t: int, prompt: torch.Tensor
) -> FeatureMap:
    """Single-pair convenience wrapper returning the stride-8 FeatureMap."""
    feats = extract_features(unet, z_t.unsqueeze(0), t, prompt.unsqueeze(0))
    return FeatureMap(data=feats.squeeze(0).detach().cpu().numpy(), stride=8)
