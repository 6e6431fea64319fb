"""Core type invariants and the coordinate convention."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from imd.core import (
    COARSE_STRIDE,
    CameraFrame,
    CoarseMatchSet,
    FeatureMap,
    FineMatchSet,
    Image,
    InstanceMaskPair,
    InvariantError,
    MatchingConfig,
    cell_center,
    containing_cell,
    preprocess,
)


def test_cell_center_first_cell():
    assert cell_center(0, 4, 8) == (3.5, 3.5)


def test_cell_center_row_col():
    # idx 5 on a 4-wide grid is row 1, col 1
    assert cell_center(5, 4, 8) == (11.5, 11.5)


def test_cell_center_stride_two():
    assert cell_center(7, 4, 2) == (6.5, 2.5)


@given(
    grid_w=st.integers(1, 32),
    grid_h=st.integers(1, 32),
    stride=st.sampled_from([2, 4, 8]),
)
@settings(max_examples=50, deadline=None)
def test_cell_center_injective_and_in_bounds(grid_w, grid_h, stride):
    seen = set()
    for idx in range(grid_w * grid_h):
        x, y = cell_center(idx, grid_w, stride)
        assert (x, y) not in seen
        seen.add((x, y))
        assert -0.5 < x < grid_w * stride - 0.5
        assert -0.5 < y < grid_h * stride - 0.5


@given(
    idx=st.integers(0, 32 * 32 - 1),
    stride=st.sampled_from([2, 8]),
)
@settings(max_examples=50, deadline=None)
def test_containing_cell_inverts_cell_center(idx, stride):
    x, y = cell_center(idx, 32, stride)
    assert containing_cell(x, y, 32, 32, stride) == idx


def test_containing_cell_out_of_bounds():
    assert containing_cell(-1.0, 0.0, 8, 8, 8) is None
    assert containing_cell(0.0, 64.0, 8, 8, 8) is None


def test_image_rejects_bad_dtype():
    with pytest.raises(InvariantError):
        Image(pixels=np.zeros((4, 4, 3), dtype=np.float32))


def test_image_rejects_bad_shape():
    with pytest.raises(InvariantError):
        Image(pixels=np.zeros((4, 4), dtype=np.uint8))


def test_preprocess_pads_to_multiple_of_eight(rng):
    img = Image(pixels=rng.integers(0, 256, (50, 70, 3)).astype(np.uint8), id="p")
    out = preprocess(img)
    assert out.height % COARSE_STRIDE == 0 and out.width % COARSE_STRIDE == 0
    assert out.height >= 50 and out.width >= 70
    np.testing.assert_array_equal(out.pixels[:50, :70], img.pixels)


def test_preprocess_noop_when_divisible(rng):
    img = Image(pixels=rng.integers(0, 256, (64, 64, 3)).astype(np.uint8), id="q")
    assert preprocess(img) is img


def test_feature_map_validates():
    with pytest.raises(InvariantError):
        FeatureMap(data=np.zeros((3, 4)), stride=8)
    with pytest.raises(InvariantError):
        FeatureMap(data=np.full((2, 3, 3), np.nan), stride=8)
    fm = FeatureMap(data=np.zeros((2, 3, 5)), stride=8)
    assert (fm.grid_h, fm.grid_w) == (3, 5)


def test_coarse_match_set_rejects_duplicates():
    CoarseMatchSet([0, 1], [2, 3], [0.5, 0.6])
    with pytest.raises(InvariantError):
        CoarseMatchSet([0, 0], [2, 3], [0.5, 0.6])
    with pytest.raises(InvariantError):
        CoarseMatchSet([0, 1], [3, 3], [0.5, 0.6])


def test_fine_match_set_bounds_check():
    m = FineMatchSet(
        xa=[3.5], ya=[3.5], xb=[70.0], yb=[3.5],
        confidence=[0.9], parents=[(0, 0)],
    )
    with pytest.raises(InvariantError):
        m.check_bounds((64, 64), (64, 64))


def test_camera_frame_validates_rotation():
    K = np.array([[50.0, 0, 32], [0, 50.0, 32], [0, 0, 1]])
    bad_r = np.eye(3) * 2.0
    with pytest.raises(InvariantError):
        CameraFrame(K=K, R=bad_r, t=np.zeros(3))
    CameraFrame(K=K, R=np.eye(3), t=np.zeros(3))


def test_camera_frame_rejects_negative_depth():
    K = np.array([[50.0, 0, 32], [0, 50.0, 32], [0, 0, 1]])
    with pytest.raises(InvariantError):
        CameraFrame(K=K, R=np.eye(3), t=np.zeros(3), depth=np.full((4, 4), -1.0))


def test_mask_pair_requires_nonempty():
    a = np.zeros((8, 8), dtype=bool)
    b = np.zeros((8, 8), dtype=bool)
    b[0, 0] = True
    with pytest.raises(InvariantError):
        InstanceMaskPair(source_mask=a, target_mask=b, category="x")


def test_config_defaults_and_roundtrip():
    cfg = MatchingConfig()
    # headline defaults; the acceptance suite re-asserts these from a dump
    assert cfg.tau == 0.2 and cfg.alpha == 1.0 and cfg.beta == 0.25
    assert cfg.timestep == 0 and cfg.n_attn == 2
    again = MatchingConfig.from_dict(cfg.to_dict())
    assert again == cfg


def test_config_validates_ranges():
    with pytest.raises(InvariantError):
        MatchingConfig(tau=1.5)
    with pytest.raises(InvariantError):
        MatchingConfig(temperature=0.0)
    with pytest.raises(InvariantError):
        MatchingConfig(fine_window=4)
