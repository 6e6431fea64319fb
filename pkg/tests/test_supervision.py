"""Ground-truth warping and the three loss terms."""

import warnings

import numpy as np
import pytest
import torch

from imd.core import CameraFrame, InvariantError
from imd.supervision import (
    GtMatches,
    coarse_loss,
    fine_loss_l1,
    fine_loss_l2,
    total_loss,
    warp_grid,
    warp_homography,
)


def _frame(K=None, R=None, t=None, depth=None):
    if K is None:
        K = np.array([[64.0, 0, 31.5], [0, 64.0, 31.5], [0, 0, 1.0]])
    return CameraFrame(
        K=K,
        R=np.eye(3) if R is None else R,
        t=np.zeros(3) if t is None else t,
        depth=depth,
    )


def test_warp_grid_identity():
    depth = np.full((64, 64), 2.0)
    fa = _frame(depth=depth)
    fb = _frame(depth=depth.copy())
    gt = warp_grid(fa, fb, dims_b=(64, 64))
    assert len(gt) == 64
    np.testing.assert_array_equal(gt.idx_a, gt.idx_b)
    # fine targets are exactly the source cell centers
    cols = gt.idx_a % 8
    rows = gt.idx_a // 8
    np.testing.assert_allclose(gt.x_b, (cols + 0.5) * 8 - 0.5, atol=1e-6)
    np.testing.assert_allclose(gt.y_b, (rows + 0.5) * 8 - 0.5, atol=1e-6)


def test_warp_grid_intrinsic_shift_one_column():
    # shifting B's principal point by -8 px moves projections 8 px left...
    # equivalently: shifting it by +8 moves every target one coarse column right
    depth = np.full((64, 64), 2.0)
    fa = _frame(depth=depth)
    kb = np.array([[64.0, 0, 39.5], [0, 64.0, 31.5], [0, 0, 1.0]])
    fb = _frame(K=kb)
    gt = warp_grid(fa, fb, dims_b=(64, 64))
    assert len(gt) > 0
    for ia, ib in zip(gt.idx_a, gt.idx_b):
        assert ib == ia + 1  # +1 column, same row
        assert ib // 8 == ia // 8


def test_warp_grid_behind_camera_dropped():
    depth = np.full((64, 64), 2.0)
    fa = _frame(depth=depth)
    # rotate B 180 degrees about y: points land behind it
    R = np.diag([-1.0, 1.0, -1.0])
    fb = _frame(R=R)
    gt = warp_grid(fa, fb, dims_b=(64, 64))
    assert len(gt) == 0


def test_warp_grid_occlusion_check():
    depth = np.full((64, 64), 2.0)
    fa = _frame(depth=depth)
    # B's depth map claims everything is at 1.0 -> 2.0 projections disagree by 100%
    fb = _frame(depth=np.full((64, 64), 1.0))
    gt = warp_grid(fa, fb, dims_b=(64, 64))
    assert len(gt) == 0
    # within 20% passes
    fb_ok = _frame(depth=np.full((64, 64), 1.9))
    assert len(warp_grid(fa, fb_ok, dims_b=(64, 64))) == 64


def test_warp_grid_requires_depth():
    fa = _frame()
    with pytest.raises(ValueError):
        warp_grid(fa, _frame(), dims_b=(64, 64))


def test_warp_grid_agrees_with_identity_homography():
    depth = np.full((64, 64), 3.0)
    fa = _frame(depth=depth)
    fb = _frame()
    gt_g = warp_grid(fa, fb, dims_b=(64, 64))
    gt_h = warp_homography(np.eye(3), 8, 8, (64, 64))
    np.testing.assert_array_equal(gt_g.idx_a, gt_h.idx_a)
    np.testing.assert_array_equal(gt_g.idx_b, gt_h.idx_b)
    np.testing.assert_allclose(gt_g.x_b, gt_h.x_b, atol=1e-9)


def test_warp_homography_identity():
    gt = warp_homography(np.eye(3), 4, 4, (32, 32))
    assert len(gt) == 16
    np.testing.assert_array_equal(gt.idx_a, gt.idx_b)


def test_warp_homography_translation_two_columns():
    h = np.eye(3)
    h[0, 2] = 16.0  # +16 px in x at stride 8 = 2 coarse columns
    gt = warp_homography(h, 4, 8, (32, 64))
    assert len(gt) > 0
    for ia, ib in zip(gt.idx_a, gt.idx_b):
        assert ib == ia + 2
        assert ib // 8 == ia // 8


def test_warp_homography_all_out_of_bounds():
    h = np.eye(3)
    h[0, 2] = 1000.0
    assert len(warp_homography(h, 4, 4, (32, 32))) == 0


def test_warp_homography_roundtrip():
    rng = np.random.default_rng(3)
    h = np.eye(3) + 0.01 * rng.standard_normal((3, 3))
    h /= h[2, 2]
    gt_fwd = warp_homography(h, 8, 8, (64, 64))
    hinv = np.linalg.inv(h)
    pts = np.stack([gt_fwd.x_b, gt_fwd.y_b, np.ones(len(gt_fwd))], axis=1)
    back = pts @ hinv.T
    back = back[:, :2] / back[:, 2:3]
    cols = gt_fwd.idx_a % 8
    rows = gt_fwd.idx_a // 8
    np.testing.assert_allclose(back[:, 0], (cols + 0.5) * 8 - 0.5, atol=1e-6)
    np.testing.assert_allclose(back[:, 1], (rows + 0.5) * 8 - 0.5, atol=1e-6)


def test_warp_homography_rejects_bad_shape():
    with pytest.raises(ValueError):
        warp_homography(np.eye(2), 4, 4, (32, 32))


def test_gt_matches_unique_sources():
    with pytest.raises(InvariantError):
        GtMatches([0, 0], [1, 2], [1.0, 2.0], [1.0, 2.0])


def _p_with(entries, n=16):
    p = torch.full((n, n), 1e-6, dtype=torch.float64)
    for (i, j), v in entries.items():
        p[i, j] = v
    return p


def test_coarse_loss_perfect_prediction_zero():
    gt = GtMatches([0, 1], [2, 3], [0.0, 0.0], [0.0, 0.0])
    p = _p_with({(0, 2): 1.0, (1, 3): 1.0})
    assert coarse_loss(p, gt, focal_gamma=0.0).item() == 0.0


def test_coarse_loss_half_probability_ln2():
    gt = GtMatches([0], [2], [0.0], [0.0])
    p = _p_with({(0, 2): 0.5})
    got = coarse_loss(p, gt, focal_gamma=0.0).item()
    np.testing.assert_allclose(got, np.log(2.0), rtol=1e-12)


def test_coarse_loss_focal_quarter_ln2():
    gt = GtMatches([0], [2], [0.0], [0.0])
    p = _p_with({(0, 2): 0.5})
    got = coarse_loss(p, gt, focal_gamma=2.0).item()
    np.testing.assert_allclose(got, 0.25 * np.log(2.0), rtol=1e-12)


def test_coarse_loss_monotone_in_probability():
    gt = GtMatches([0], [2], [0.0], [0.0])
    losses = [
        coarse_loss(_p_with({(0, 2): v}), gt, focal_gamma=2.0).item()
        for v in (0.1, 0.3, 0.5, 0.9)
    ]
    assert all(a > b for a, b in zip(losses, losses[1:]))


def test_coarse_loss_empty_gt_warns_zero():
    gt = GtMatches([], [], [], [])
    p = torch.rand(4, 4, dtype=torch.float64)
    with pytest.warns(UserWarning):
        assert coarse_loss(p, gt).item() == 0.0


def test_fine_loss_l1_one_hot_near_zero():
    s = torch.full((9, 9), -1e4, dtype=torch.float64)
    s[4, 7] = 1e4
    got = fine_loss_l1([s], center_idx=4, gt_j=[7]).item()
    assert got < 1e-8


def test_fine_loss_l1_uniform_window_two_ln_nine():
    s = torch.zeros(9, 9, dtype=torch.float64)  # w=3 window, all scores equal
    got = fine_loss_l1([s], center_idx=4, gt_j=[4]).item()
    np.testing.assert_allclose(got, 2 * np.log(9.0), rtol=1e-12)


def test_fine_loss_l1_out_of_window_excluded():
    s_info = torch.zeros(9, 9, dtype=torch.float64)
    s_hot = torch.full((9, 9), -1e4, dtype=torch.float64)
    s_hot[4, 2] = 1e4
    got = fine_loss_l1([s_hot, s_info], center_idx=4, gt_j=[2, None]).item()
    assert got < 1e-8  # only the in-window one-hot term contributes


def test_fine_loss_l1_all_excluded_warns():
    s = torch.zeros(9, 9, dtype=torch.float64)
    with pytest.warns(UserWarning):
        assert fine_loss_l1([s], center_idx=4, gt_j=[None]).item() == 0.0


def test_fine_loss_l2_cases(rng):
    perfect = torch.tensor([[1.0, 2.0], [3.0, 4.0]])
    assert fine_loss_l2(perfect, perfect.clone()).item() == 0.0
    shifted = perfect + torch.tensor([[1.0, 0.0]])
    assert fine_loss_l2(shifted, perfect).item() == 1.0
    pred = torch.tensor(rng.standard_normal((5, 2)))
    gt = torch.tensor(rng.standard_normal((5, 2)))
    want = float(np.mean(np.sum((pred.numpy() - gt.numpy()) ** 2, axis=1)))
    np.testing.assert_allclose(fine_loss_l2(pred, gt).item(), want, rtol=1e-12)


def test_total_loss_weighting():
    one = torch.tensor(1.0)
    zero = torch.tensor(0.0)
    assert total_loss(one, one, one, 1.0, 0.25).item() == 2.25
    assert total_loss(zero, zero, zero, 1.0, 0.25).item() == 0.0
    # linear in each term
    lc = torch.tensor(0.3, dtype=torch.float64)
    lf1 = torch.tensor(0.7, dtype=torch.float64)
    lf2 = torch.tensor(1.1, dtype=torch.float64)
    got = total_loss(lc, lf1, lf2, 1.0, 0.25).item()
    np.testing.assert_allclose(got, 0.3 + 1.0 * 0.7 + 0.25 * 1.1, rtol=1e-12)
