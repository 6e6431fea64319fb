"""Training loop: AdamW over the matcher with coarse plus fine supervision.

Fine supervision is evaluated at ground-truth coarse locations (not at the
model's own coarse matches) so the fine stage receives signal from step one.
At timestep > 0 the forward noising is re-drawn every step from a seed derived
from (run seed, image id, step).
"""

from __future__ import annotations

import time
import warnings
from pathlib import Path

import numpy as np
import torch

from .coarse import dual_softmax, score_matrix
from .core import COARSE_STRIDE, FINE_STRIDE, MatchingConfig, preprocess
from .datasets import PairRecord
from .fine import crop_window, fine_center_cell, local_score, subpixel_expectation
from .pipeline import (
    MatcherModel,
    build_model,
    pair_features,
    precompute_frozen,
    save_checkpoint,
)
from .supervision import (
    GtMatches,
    coarse_loss,
    fine_loss_l1,
    fine_loss_l2,
    total_loss,
    warp_grid,
    warp_homography,
)

MAX_FINE_PAIRS = 48


def prepare_pairs(records: list[PairRecord], model: MatcherModel) -> list[dict]:
    """Load images, ground truth, and frozen-encoder outputs into memory."""
    out = []
    for rec in records:
        if rec.kind == "mask":
            continue  # masks carry no cell-level supervision
        img_a, img_b = rec.load_images()
        img_a, img_b = preprocess(img_a), preprocess(img_b)
        dims_b = (img_b.height, img_b.width)
        if rec.kind == "h":
            gt = warp_homography(rec.load_homography(), img_a.height // COARSE_STRIDE,
                                 img_a.width // COARSE_STRIDE, dims_b)
        else:
            frame_a, frame_b = rec.load_frames()
            gt = warp_grid(frame_a, frame_b, dims_b)
        if len(gt) == 0:
            warnings.warn(f"pair {rec.a}: empty ground truth, skipped", stacklevel=2)
            continue
        out.append({"gt": gt, "pre": precompute_frozen(model, img_a, img_b)})
    if not out:
        raise ValueError("no trainable pairs (need homography or pose supervision)")
    return out


def fine_supervision(
    feats: dict, gt: GtMatches, cfg: MatchingConfig, rng: np.random.Generator
) -> tuple[torch.Tensor, torch.Tensor]:
    """L_f1 / L_f2 terms evaluated on windows around ground-truth coarse pairs."""
    fused_a, fused_b = feats["fine_a"], feats["fine_b"]
    grid_w_c = feats["coarse_a"].shape[-1]
    hb, wb = fused_b.shape[-2:]
    w = cfg.fine_window
    center = (w // 2) * w + w // 2

    n = len(gt)
    picks = rng.choice(n, size=min(n, MAX_FINE_PAIRS), replace=False)
    mats, gt_js, preds, targets = [], [], [], []
    for k in picks:
        ia, ib = int(gt.idx_a[k]), int(gt.idx_b[k])
        xg, yg = float(gt.x_b[k]), float(gt.y_b[k])
        ra, ca = fine_center_cell(ia, grid_w_c)
        rb, cb = fine_center_cell(ib, grid_w_c)
        pa, _ = crop_window(fused_a, ra, ca, w)
        pb, ob = crop_window(fused_b, rb, cb, w)
        s_l = local_score(pa, pb, cfg.temperature)
        mats.append(s_l)
        dr = int(np.floor((yg + 0.5) / FINE_STRIDE)) - ob[0]
        dc = int(np.floor((xg + 0.5) / FINE_STRIDE)) - ob[1]
        gt_js.append(dr * w + dc if 0 <= dr < w and 0 <= dc < w else None)

        # Predicted landing point: window argmax for the center pixel, then
        # the differentiable 3x3 expectation on the full fused map.
        j = int(s_l[center].detach().argmax())
        rj = min(max(ob[0] + j // w, 0), hb - 1)
        cj = min(max(ob[1] + j % w, 0), wb - 1)
        qa = fused_a[:, min(max(ra, 0), fused_a.shape[-2] - 1), min(max(ca, 0), fused_a.shape[-1] - 1)]
        pb3, _ = crop_window(fused_b, rj, cj, 3)
        preds.append(subpixel_expectation(qa, pb3, (rj, cj), cfg.temperature))
        targets.append(torch.tensor([xg, yg], dtype=fused_a.dtype))

    with warnings.catch_warnings():
        warnings.simplefilter("ignore")  # per-step empty-window warnings are noise
        lf1 = fine_loss_l1(mats, center, gt_js)
        lf2 = fine_loss_l2(torch.stack(preds), torch.stack(targets))
    return lf1, lf2


def train_model(
    records: list[PairRecord],
    cfg: MatchingConfig,
    steps: int,
    lr: float = 4e-3,
    batch: int = 4,
    focal_gamma: float = 2.0,
    prompt_mode: str = "cross",
    checkpoint_every: int = 0,
    out_dir: Path | None = None,
    log_every: int = 50,
    model: MatcherModel | None = None,
) -> tuple[MatcherModel, list[dict]]:
    """Train and return (model, history of scalar logs)."""
    if model is None:
        model = build_model(cfg)
    data = prepare_pairs(records, model)
    opt = torch.optim.AdamW(model.trainable_parameters(), lr=lr)
    # Fine supervision is noisy at batch scale; annealing settles the subpixel head.
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=steps, eta_min=lr * 0.02)
    rng = np.random.default_rng(cfg.seed + 1)
    history = []
    model.train()
    t0 = time.monotonic()
    for step in range(steps):
        picks = rng.choice(len(data), size=min(batch, len(data)), replace=False)
        terms = []
        for i in picks:
            d = data[i]
            feats = pair_features(
                model, None, None, cfg, prompt_mode=prompt_mode,
                noise_salt=step, pre=d["pre"],
            )
            s = score_matrix(feats["coarse_a"], feats["coarse_b"], cfg.temperature)
            p = dual_softmax(s)
            lc = coarse_loss(p, d["gt"], focal_gamma)
            lf1, lf2 = fine_supervision(feats, d["gt"], cfg, rng)
            terms.append((lc, lf1, lf2))
        lc = torch.stack([t[0] for t in terms]).mean()
        lf1 = torch.stack([t[1] for t in terms]).mean()
        lf2 = torch.stack([t[2] for t in terms]).mean()
        loss = total_loss(lc, lf1, lf2, cfg.alpha, cfg.beta)
        opt.zero_grad()
        loss.backward()
        torch.nn.utils.clip_grad_norm_(model.trainable_parameters(), 1.0)
        opt.step()
        sched.step()
        if log_every and (step % log_every == 0 or step == steps - 1):
            history.append(
                {
                    "step": step,
                    "loss": round(loss.item(), 6),
                    "lc": round(lc.item(), 6),
                    "lf1": round(lf1.item(), 6),
                    "lf2": round(lf2.item(), 6),
                    "elapsed_s": round(time.monotonic() - t0, 3),
                }
            )
        if checkpoint_every and out_dir is not None and (step + 1) % checkpoint_every == 0:
            save_checkpoint(model, cfg, Path(out_dir) / f"step_{step + 1:06d}")
    if out_dir is not None:
        save_checkpoint(model, cfg, Path(out_dir) / "final")
    return model, history
