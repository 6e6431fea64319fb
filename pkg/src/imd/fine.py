"""Fine-level refinement: stride-2 features, fusion, local matching, subpixel step.

Patch windows are cropped on the fused stride-2 maps around each coarse
match. Window origins are recorded pre-clamp; sampling clamps per cell to the
border, and coordinate recovery clamps the recovered cell back into the grid
so reported coordinates stay inside the image.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .core import (
    COARSE_STRIDE,
    FINE_STRIDE,
    CoarseMatchSet,
    FineMatchSet,
    InvariantError,
    cell_center,
)


class FineEncoder(nn.Module):
    """Small residual ConvNet emitting stride-2 features."""

    def __init__(self, c_f: int = 64):
        super().__init__()
        self.stem = nn.Conv2d(3, 32, 3, stride=2, padding=1)
        self.conv1 = nn.Conv2d(32, 32, 3, padding=1)
        self.conv2 = nn.Conv2d(32, 32, 3, padding=1)
        self.head = nn.Conv2d(32, c_f, 3, padding=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = F.silu(self.stem(x))
        h = h + self.conv2(F.silu(self.conv1(h)))
        return self.head(h)


class FeatureFusion(nn.Module):
    """Nearest-upsample the transformed coarse map, project, add, smooth.

    The channel projection is bias-free so a zero coarse map contributes
    nothing and the output reduces to the fine pathway alone.
    """

    def __init__(self, c_coarse: int, c_f: int):
        super().__init__()
        self.proj = nn.Conv2d(c_coarse, c_f, 1, bias=False)
        self.mix = nn.Conv2d(c_f, c_f, 3, padding=1)

    def forward(self, fine: torch.Tensor, coarse_t: torch.Tensor) -> torch.Tensor:
        ratio = COARSE_STRIDE // FINE_STRIDE
        if fine.shape[-2:] != (coarse_t.shape[-2] * ratio, coarse_t.shape[-1] * ratio):
            raise InvariantError(
                f"fine grid {tuple(fine.shape[-2:])} does not cover coarse grid "
                f"{tuple(coarse_t.shape[-2:])} at ratio {ratio}"
            )
        up = F.interpolate(coarse_t, scale_factor=ratio, mode="nearest")
        return self.mix(fine + self.proj(up))


@dataclass
class PatchPair:
    """One w x w window pair on the fused fine maps."""

    patch_a: torch.Tensor  # [C_f, w, w]
    patch_b: torch.Tensor
    origin_a: tuple[int, int]  # (row, col) of window top-left, pre-clamp
    origin_b: tuple[int, int]


def fine_center_cell(coarse_idx: int, grid_w_coarse: int) -> tuple[int, int]:
    """Fine-grid cell containing a coarse cell's center."""
    x, y = cell_center(coarse_idx, grid_w_coarse, COARSE_STRIDE)
    col = int(np.floor((x + 0.5) / FINE_STRIDE))
    row = int(np.floor((y + 0.5) / FINE_STRIDE))
    return row, col


def crop_window(feat: torch.Tensor, row: int, col: int, w: int) -> tuple[torch.Tensor, tuple[int, int]]:
    """w x w window centered at (row, col) with clamp-to-border padding."""
    if w < 3 or w % 2 == 0:
        raise ValueError(f"window must be odd and >= 3, got {w}")
    half = w // 2
    h, wid = feat.shape[-2:]
    rows = torch.arange(row - half, row + half + 1).clamp(0, h - 1)
    cols = torch.arange(col - half, col + half + 1).clamp(0, wid - 1)
    return feat[:, rows][:, :, cols], (row - half, col - half)


def crop_patches(
    fa_fine: torch.Tensor,
    fb_fine: torch.Tensor,
    matches: CoarseMatchSet,
    w: int,
    grid_w_coarse: int,
) -> list[PatchPair]:
    """One PatchPair per coarse match, centered on each side's match cell."""
    pairs = []
    for ia, ib, _ in matches:
        ra, ca = fine_center_cell(ia, grid_w_coarse)
        rb, cb = fine_center_cell(ib, grid_w_coarse)
        pa, oa = crop_window(fa_fine, ra, ca, w)
        pb, ob = crop_window(fb_fine, rb, cb, w)
        pairs.append(PatchPair(patch_a=pa, patch_b=pb, origin_a=oa, origin_b=ob))
    return pairs


def local_score(patch_a: torch.Tensor, patch_b: torch.Tensor, temperature: float) -> torch.Tensor:
    """Dot-product score matrix between all pixel pairs of the two patches."""
    c = patch_a.shape[0]
    fa = patch_a.reshape(c, -1).T
    fb = patch_b.reshape(c, -1).T
    return fa @ fb.T / temperature


def local_match(
    pp: PatchPair, temperature: float
) -> tuple[int, int, torch.Tensor, bool]:
    """Top-1 mutual-nearest pixel pair inside the window.

    Returns flat indices into each patch plus the score matrix; the boolean
    flags the low-confidence global-argmax fallback taken when no mutual
    nearest neighbor survives.
    """
    s_l = local_score(pp.patch_a, pp.patch_b, temperature)
    s = s_l.detach().cpu().numpy()
    best_j = s.argmax(axis=1)
    best_i = s.argmax(axis=0)
    rows = np.arange(s.shape[0])
    mutual = np.flatnonzero(best_i[best_j] == rows)
    if mutual.size:
        vals = s[mutual, best_j[mutual]]
        # Ties resolve to the lowest flat index of the pair in the matrix.
        flat = mutual * s.shape[1] + best_j[mutual]
        order = np.lexsort((flat, -vals))
        i = int(mutual[order[0]])
        j = int(best_j[i])
        return i, j, s_l, False
    flat_best = int(s.argmax())
    return flat_best // s.shape[1], flat_best % s.shape[1], s_l, True


def subpixel_expectation(
    qa: torch.Tensor,
    pb3: torch.Tensor,
    center_b: tuple[int, int],
    temperature: float,
    stride: int = FINE_STRIDE,
) -> torch.Tensor:
    """Softmax-expectation refinement over a 3x3 neighborhood.

    qa is the query feature [C]; pb3 the [C, 3, 3] neighborhood around
    center_b (fine-grid row, col). Returns (x, y) in original-image pixels as
    a differentiable tensor.
    """
    if pb3.shape[-2:] != (3, 3):
        raise InvariantError(f"expected a 3x3 neighborhood, got {tuple(pb3.shape)}")
    logits = (pb3 * qa[:, None, None]).sum(dim=0).reshape(9) / temperature
    p = torch.softmax(logits, dim=0)
    delta = torch.tensor(
        [[dx, dy] for dy in (-1, 0, 1) for dx in (-1, 0, 1)], dtype=qa.dtype
    )
    off = (p[:, None] * delta).sum(dim=0)  # (dx, dy) in fine cells
    row, col = center_b
    x = (col + off[0] + 0.5) * stride - 0.5
    y = (row + off[1] + 0.5) * stride - 0.5
    return torch.stack([x, y])


def _clamp_cell(row: int, col: int, grid_h: int, grid_w: int) -> tuple[int, int]:
    return min(max(row, 0), grid_h - 1), min(max(col, 0), grid_w - 1)


def refine_matches(
    fused_a: torch.Tensor,
    fused_b: torch.Tensor,
    matches: CoarseMatchSet,
    grid_w_coarse: int,
    window: int,
    temperature: float,
    dims_a: tuple[int, int],
    dims_b: tuple[int, int],
) -> FineMatchSet:
    """Full fine stage: window matching plus 3x3 expectation, per coarse match."""
    xa, ya, xb, yb, conf, parents, fallback = [], [], [], [], [], [], []
    ha, wa = fused_a.shape[-2:]
    hb, wb = fused_b.shape[-2:]
    pairs = crop_patches(fused_a, fused_b, matches, window, grid_w_coarse)
    for pp, (ia, ib, c) in zip(pairs, matches):
        i, j, _, fb_flag = local_match(pp, temperature)
        ra = pp.origin_a[0] + i // window
        ca = pp.origin_a[1] + i % window
        rb = pp.origin_b[0] + j // window
        cb = pp.origin_b[1] + j % window
        ra, ca = _clamp_cell(ra, ca, ha, wa)
        rb, cb = _clamp_cell(rb, cb, hb, wb)
        qa = fused_a[:, ra, ca]
        pb3, _ = crop_window(fused_b, rb, cb, 3)
        pt_b = subpixel_expectation(qa, pb3, (rb, cb), temperature)
        x_a = (ca + 0.5) * FINE_STRIDE - 0.5
        y_a = (ra + 0.5) * FINE_STRIDE - 0.5
        xa.append(min(max(x_a, -0.5), dims_a[1] - 0.5))
        ya.append(min(max(y_a, -0.5), dims_a[0] - 0.5))
        xb.append(min(max(float(pt_b[0]), -0.5), dims_b[1] - 0.5))
        yb.append(min(max(float(pt_b[1]), -0.5), dims_b[0] - 0.5))
        conf.append(c)
        parents.append((ia, ib))
        fallback.append(fb_flag)
    return FineMatchSet(xa, ya, xb, yb, conf, parents=parents or None, fallback=fallback or None)
