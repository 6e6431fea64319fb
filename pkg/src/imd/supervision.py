"""Ground-truth correspondence generation and training losses."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import torch

from .core import COARSE_STRIDE, CameraFrame, InvariantError, cell_center, containing_cell

OCCLUSION_REL_TOL = 0.2
PROB_FLOOR = 1e-12


@dataclass
class GtMatches:
    """Coarse-cell ground truth plus the exact warped target points.

    ``idx_a[k]`` warps to the continuous point ``(x_b[k], y_b[k])`` whose
    containing coarse cell is ``idx_b[k]``. Several source cells may share a
    target cell; source cells are unique.
    """

    idx_a: np.ndarray
    idx_b: np.ndarray
    x_b: np.ndarray
    y_b: np.ndarray

    def __post_init__(self):
        self.idx_a = np.asarray(self.idx_a, dtype=np.int64)
        self.idx_b = np.asarray(self.idx_b, dtype=np.int64)
        self.x_b = np.asarray(self.x_b, dtype=np.float64)
        self.y_b = np.asarray(self.y_b, dtype=np.float64)
        n = self.idx_a.size
        if not (self.idx_b.size == self.x_b.size == self.y_b.size == n):
            raise ValueError("GtMatches arrays must have equal length")
        if n and np.unique(self.idx_a).size != n:
            raise InvariantError("duplicate source cell in ground truth")

    def __len__(self) -> int:
        return int(self.idx_a.size)


def _project(K: np.ndarray, pts_cam: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    uvw = pts_cam @ K.T
    z = uvw[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        uv = uvw[:, :2] / z[:, None]
    return uv, z


def warp_grid(
    frame_a: CameraFrame,
    frame_b: CameraFrame,
    dims_b: tuple[int, int],
    stride: int = COARSE_STRIDE,
) -> GtMatches:
    """Warp every coarse cell center of A into B via depth and relative pose.

    The source grid spans frame_a's depth map. Cells are dropped when the
    source depth is invalid, the point lands behind camera B or outside B's
    image, or (when B carries depth) the projected depth disagrees with B's
    depth map by more than 20% relative.
    """
    if frame_a.depth is None:
        raise ValueError("warp_grid needs depth on the source frame")
    hb_img, wb_img = dims_b
    grid_h = frame_a.depth.shape[0] // stride
    grid_w = frame_a.depth.shape[1] // stride
    cols, rows = np.meshgrid(np.arange(grid_w), np.arange(grid_h))
    x = (cols.ravel() + 0.5) * stride - 0.5
    y = (rows.ravel() + 0.5) * stride - 0.5

    px = np.clip(np.rint(x).astype(int), 0, frame_a.depth.shape[1] - 1)
    py = np.clip(np.rint(y).astype(int), 0, frame_a.depth.shape[0] - 1)
    d = frame_a.depth[py, px]
    keep = d > 0

    pts = np.stack([x, y, np.ones_like(x)], axis=1)
    rays = pts @ np.linalg.inv(frame_a.K).T
    world = (d[:, None] * rays - frame_a.t) @ frame_a.R  # R_a^T applied rowwise
    cam_b = world @ frame_b.R.T + frame_b.t
    uv, z = _project(frame_b.K, cam_b)
    keep &= z > 0
    keep &= (
        (uv[:, 0] >= -0.5) & (uv[:, 0] <= wb_img - 0.5)
        & (uv[:, 1] >= -0.5) & (uv[:, 1] <= hb_img - 0.5)
    )
    if frame_b.depth is not None:
        bx = np.clip(np.rint(uv[:, 0]).astype(int), 0, frame_b.depth.shape[1] - 1)
        by = np.clip(np.rint(uv[:, 1]).astype(int), 0, frame_b.depth.shape[0] - 1)
        db = frame_b.depth[by, bx]
        visible = (db > 0) & (np.abs(z - db) <= OCCLUSION_REL_TOL * db)
        keep &= visible

    idx_a, idx_b, xs, ys = [], [], [], []
    gb_h, gb_w = hb_img // stride, wb_img // stride
    for i in np.flatnonzero(keep):
        j = containing_cell(uv[i, 0], uv[i, 1], gb_w, gb_h, stride)
        if j is None:
            continue
        idx_a.append(i)
        idx_b.append(j)
        xs.append(uv[i, 0])
        ys.append(uv[i, 1])
    return GtMatches(idx_a, idx_b, xs, ys)


def warp_homography(
    h_mat: np.ndarray,
    grid_h: int,
    grid_w: int,
    dims_b: tuple[int, int],
    stride: int = COARSE_STRIDE,
) -> GtMatches:
    """Warp every coarse cell center of A into B via a 3x3 homography."""
    h_mat = np.asarray(h_mat, dtype=np.float64)
    if h_mat.shape != (3, 3):
        raise ValueError(f"homography must be 3x3, got {h_mat.shape}")
    hb_img, wb_img = dims_b
    cols, rows = np.meshgrid(np.arange(grid_w), np.arange(grid_h))
    x = (cols.ravel() + 0.5) * stride - 0.5
    y = (rows.ravel() + 0.5) * stride - 0.5
    pts = np.stack([x, y, np.ones_like(x)], axis=1)
    uvw = pts @ h_mat.T
    z = uvw[:, 2]
    keep = np.abs(z) > 1e-12
    with np.errstate(divide="ignore", invalid="ignore"):
        uv = uvw[:, :2] / z[:, None]
    keep &= (
        (uv[:, 0] >= -0.5) & (uv[:, 0] <= wb_img - 0.5)
        & (uv[:, 1] >= -0.5) & (uv[:, 1] <= hb_img - 0.5)
    )
    idx_a, idx_b, xs, ys = [], [], [], []
    gb_h, gb_w = hb_img // stride, wb_img // stride
    for i in np.flatnonzero(keep):
        j = containing_cell(uv[i, 0], uv[i, 1], gb_w, gb_h, stride)
        if j is None:
            continue
        idx_a.append(i)
        idx_b.append(j)
        xs.append(uv[i, 0])
        ys.append(uv[i, 1])
    return GtMatches(idx_a, idx_b, xs, ys)


def coarse_loss(p: torch.Tensor, gt: GtMatches, focal_gamma: float = 2.0) -> torch.Tensor:
    """Focal negative log-likelihood over ground-truth cell pairs.

    ``focal_gamma=0`` reduces to the plain mean NLL. Probabilities are floored
    at 1e-12 before the log.
    """
    if focal_gamma < 0:
        raise ValueError("focal_gamma must be >= 0")
    if len(gt) == 0:
        warnings.warn("coarse_loss: empty ground truth, returning 0", stacklevel=2)
        return p.sum() * 0.0
    probs = p[gt.idx_a, gt.idx_b].clamp_min(PROB_FLOOR)
    weight = (1.0 - probs) ** focal_gamma if focal_gamma else torch.ones_like(probs)
    return -(weight * probs.log()).mean()


def fine_loss_l1(
    score_mats: list[torch.Tensor], center_idx: int, gt_j: list[int | None]
) -> torch.Tensor:
    """Mean NLL of the ground-truth window pixel under local dual-softmax.

    ``gt_j[k]`` is the flat target index inside window k, or None when the
    true point fell outside the window (excluded from the mean). Evaluated in
    log-softmax space: -log(softmax_row * softmax_col) stays finite and keeps
    gradients even when the probability itself underflows.
    """
    terms = []
    for s_l, j in zip(score_mats, gt_j):
        if j is None:
            continue
        nll = -(
            torch.log_softmax(s_l, dim=1)[center_idx, j]
            + torch.log_softmax(s_l, dim=0)[center_idx, j]
        )
        terms.append(nll)
    if not terms:
        warnings.warn("fine_loss_l1: no in-window ground truth, returning 0", stacklevel=2)
        zero = score_mats[0].sum() * 0.0 if score_mats else torch.tensor(0.0)
        return zero
    return torch.stack(terms).mean()


def fine_loss_l2(pred_xy: torch.Tensor, gt_xy: torch.Tensor) -> torch.Tensor:
    """Mean squared Euclidean pixel distance between prediction and truth."""
    pred_xy = pred_xy.reshape(-1, 2)
    gt_xy = gt_xy.reshape(-1, 2).to(pred_xy.dtype)
    if pred_xy.shape != gt_xy.shape:
        raise ValueError(f"shape mismatch {tuple(pred_xy.shape)} vs {tuple(gt_xy.shape)}")
    if pred_xy.numel() == 0:
        warnings.warn("fine_loss_l2: no matches, returning 0", stacklevel=2)
        return pred_xy.sum() * 0.0
    return ((pred_xy - gt_xy) ** 2).sum(dim=1).mean()


def total_loss(
    lc: torch.Tensor,
    lf1: torch.Tensor,
    lf2: torch.Tensor,
    alpha: float = 1.0,
    beta: float = 0.25,
) -> torch.Tensor:
    """Weighted sum of the coarse and two fine terms."""
    return lc + alpha * lf1 + beta * lf2
