"""Coarse matcher: positional encoding, attention rounds, scores, selection."""

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from imd.coarse import (
    CoarseTransformer,
    dual_softmax,
    score_matrix,
    select_matches,
    sinusoidal_pe_2d,
    transform_features,
)
from imd.core import CoarseMatchSet, InvariantError


def brute_force_mnn(p: np.ndarray, tau: float):
    """O(n^2) oracle: independent re-derivation of the selection rule."""
    rows, cols, confs = [], [], []
    for i in range(p.shape[0]):
        j = min(np.flatnonzero(p[i] == p[i].max()))
        i_back = min(np.flatnonzero(p[:, j] == p[:, j].max()))
        if i_back == i and p[i, j] > tau:
            rows.append(i)
            cols.append(j)
            confs.append(p[i, j])
    return rows, cols, confs


def test_select_matches_vs_oracle_100_random():
    rng = np.random.default_rng(0)
    for _ in range(100):
        p = rng.random((16, 16))
        got = select_matches(p, tau=0.2)
        want_i, want_j, want_c = brute_force_mnn(p, 0.2)
        np.testing.assert_array_equal(got.idx_a, want_i)
        np.testing.assert_array_equal(got.idx_b, want_j)
        np.testing.assert_array_equal(got.confidence, want_c)


def test_select_matches_tie_breaks_to_lowest_index():
    p = np.full((3, 3), 0.5)
    got = select_matches(p, tau=0.2)
    # every row's argmax is col 0; only (0, 0) is mutual
    np.testing.assert_array_equal(got.idx_a, [0])
    np.testing.assert_array_equal(got.idx_b, [0])


def test_select_matches_empty_below_tau():
    p = np.full((4, 4), 0.05)
    assert len(select_matches(p, tau=0.2)) == 0


def test_select_matches_diagonal():
    p = np.eye(5) * 0.9 + 0.01
    got = select_matches(p, tau=0.2)
    np.testing.assert_array_equal(got.idx_a, np.arange(5))
    np.testing.assert_array_equal(got.idx_b, np.arange(5))


@given(seed=st.integers(0, 10_000))
@settings(max_examples=40, deadline=None)
def test_select_matches_monotone_invariance(seed):
    # strictly increasing transforms preserve argmax structure; tau=0 removes the cut
    p = np.random.default_rng(seed).random((8, 8))
    a = select_matches(p, tau=1e-12)
    b = select_matches(np.sqrt(p), tau=1e-12)
    np.testing.assert_array_equal(a.idx_a, b.idx_a)
    np.testing.assert_array_equal(a.idx_b, b.idx_b)


@given(seed=st.integers(0, 10_000))
@settings(max_examples=25, deadline=None)
def test_select_matches_output_exclusive(seed):
    p = np.random.default_rng(seed).random((12, 12))
    got = select_matches(p, tau=0.01)
    assert isinstance(got, CoarseMatchSet)  # constructor enforces exclusivity


def test_dual_softmax_1x1():
    np.testing.assert_allclose(dual_softmax(torch.tensor([[3.7]])).numpy(), [[1.0]])


def test_dual_softmax_hand_case():
    s = torch.tensor([[10.0, 0.0], [0.0, 10.0]], dtype=torch.float64)
    p = dual_softmax(s).numpy()
    sig = np.exp(10) / (np.exp(10) + 1)
    np.testing.assert_allclose(np.diag(p), sig**2, rtol=1e-9)
    np.testing.assert_allclose(p[0, 1], (1 - sig) ** 2, rtol=1e-9)


def test_dual_softmax_factor_normalization():
    gen = torch.Generator().manual_seed(1)
    s = torch.randn(7, 9, generator=gen, dtype=torch.float64)
    rowf = torch.softmax(s, dim=1)
    colf = torch.softmax(s, dim=0)
    torch.testing.assert_close(rowf.sum(1), torch.ones(7, dtype=torch.float64), atol=1e-6, rtol=0)
    torch.testing.assert_close(colf.sum(0), torch.ones(9, dtype=torch.float64), atol=1e-6, rtol=0)
    p = dual_softmax(s)
    torch.testing.assert_close(p, rowf * colf)
    assert (p <= rowf + 1e-15).all() and (p <= colf + 1e-15).all()


def test_score_matrix_orthonormal_identity():
    feats = torch.eye(4).reshape(4, 2, 2)  # 4 orthonormal cell vectors
    s = score_matrix(feats, feats.clone(), temperature=1.0)
    torch.testing.assert_close(s, torch.eye(4), atol=1e-6, rtol=0)


def test_score_matrix_scale_invariance():
    gen = torch.Generator().manual_seed(2)
    fa = torch.randn(8, 3, 3, generator=gen)
    fb = torch.randn(8, 3, 3, generator=gen)
    s1 = score_matrix(fa, fb, 0.1)
    fa_scaled = fa.clone()
    fa_scaled[:, 1, 2] *= 5.0
    s2 = score_matrix(fa_scaled, fb, 0.1)
    torch.testing.assert_close(s1, s2, rtol=1e-5, atol=1e-6)


def test_score_matrix_vs_loop_oracle():
    gen = torch.Generator().manual_seed(3)
    fa = torch.randn(8, 3, 3, generator=gen, dtype=torch.float64)
    fb = torch.randn(8, 3, 3, generator=gen, dtype=torch.float64)
    s = score_matrix(fa, fb, 0.1).numpy()
    va = fa.reshape(8, 9).T.numpy()
    vb = fb.reshape(8, 9).T.numpy()
    for i in range(9):
        for j in range(9):
            dot = va[i] @ vb[j] / (np.linalg.norm(va[i]) * np.linalg.norm(vb[j]))
            assert abs(s[i, j] - dot / 0.1) < 1e-6


def test_pe_shape_and_channel_constraint():
    pe = sinusoidal_pe_2d(4, 6, 16)
    assert pe.shape == (24, 16)
    with pytest.raises(InvariantError):
        sinusoidal_pe_2d(4, 4, 10)


def test_transform_shapes_preserved():
    torch.manual_seed(0)
    tf = CoarseTransformer(dim=64)
    gen = torch.Generator().manual_seed(5)
    ca = torch.randn(64, 8, 8, generator=gen)
    cb = torch.randn(64, 8, 8, generator=gen)
    oa, ob = transform_features(tf, ca, cb, n_attn=2)
    assert oa.shape == ca.shape and ob.shape == cb.shape


def test_transform_zero_rounds_is_pe_only():
    torch.manual_seed(0)
    tf = CoarseTransformer(dim=32)
    gen = torch.Generator().manual_seed(6)
    ca = torch.randn(32, 4, 4, generator=gen)
    cb = torch.randn(32, 4, 4, generator=gen)
    oa, ob = transform_features(tf, ca, cb, n_attn=0)
    pe = sinusoidal_pe_2d(4, 4, 32).T.reshape(32, 4, 4)
    torch.testing.assert_close(oa, ca + pe)
    torch.testing.assert_close(ob, cb + pe)


def test_transform_identical_inputs_identical_outputs():
    torch.manual_seed(0)
    tf = CoarseTransformer(dim=32)
    ca = torch.randn(32, 4, 4, generator=torch.Generator().manual_seed(7))
    oa, ob = transform_features(tf, ca, ca.clone(), n_attn=2)
    torch.testing.assert_close(oa, ob)


def test_transform_channel_mismatch():
    torch.manual_seed(0)
    tf = CoarseTransformer(dim=32)
    with pytest.raises(InvariantError):
        transform_features(tf, torch.randn(32, 4, 4), torch.randn(16, 4, 4), n_attn=1)
