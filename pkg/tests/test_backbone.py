"""Noise schedule, latent encoding, and conditioned feature extraction."""

import numpy as np
import pytest
import torch

from imd.backbone import (
    BackboneSpec,
    DeskUNet,
    LatentEncoder,
    add_noise,
    encode_latent,
    extract_features,
    image_to_tensor,
    make_schedule,
    timestep_embedding,
)
from imd.core import Image, InvariantError

from conftest import random_image


def test_schedule_alpha_bar_zero_is_one():
    s = make_schedule(1000, 1e-4, 0.02)
    assert s.alpha_bar[0] == 1.0


def test_schedule_strictly_decreasing():
    s = make_schedule(1000, 1e-4, 0.02)
    assert np.all(np.diff(s.alpha_bar) < 0)


def test_schedule_matches_product_loop():
    # independent oracle: accumulate the product by hand
    T = 1000
    betas = np.linspace(1e-4, 0.02, T)
    prod, expect = 1.0, [1.0]
    for b in betas:
        prod *= 1.0 - b
        expect.append(prod)
    s = make_schedule(T, 1e-4, 0.02)
    np.testing.assert_allclose(s.alpha_bar, expect, rtol=1e-12)


def test_schedule_rejects_bad_beta_range():
    with pytest.raises(InvariantError):
        make_schedule(10, 0.5, 0.1)
    with pytest.raises(InvariantError):
        make_schedule(0, 1e-4, 0.02)


def test_add_noise_t0_identity():
    z0 = torch.randn(4, 8, 8, generator=torch.Generator().manual_seed(3))
    s = make_schedule()
    zt = add_noise(z0, 0, s, seed=5)
    assert torch.equal(zt, z0)


def test_add_noise_seeded_determinism():
    z0 = torch.randn(4, 8, 8, generator=torch.Generator().manual_seed(3))
    s = make_schedule()
    a = add_noise(z0, 400, s, seed=9)
    b = add_noise(z0, 400, s, seed=9)
    c = add_noise(z0, 400, s, seed=10)
    assert torch.equal(a, b)
    assert not torch.equal(a, c)


def test_add_noise_variance_monte_carlo():
    # z0 = 0 at t=500: samples are pure noise scaled by sqrt(1 - alpha_bar)
    s = make_schedule()
    z0 = torch.zeros(100_000)
    zt = add_noise(z0, 500, s, seed=123)
    var = zt.var().item()
    expect = 1.0 - s.alpha_bar[500]
    assert abs(var - expect) / expect < 0.02


def test_add_noise_affine_in_z0():
    # same seed cancels the noise term; difference isolates sqrt(alpha_bar)*z0
    s = make_schedule()
    g = torch.Generator().manual_seed(0)
    z0 = torch.randn(4, 6, 6, generator=g)
    t = 300
    za = add_noise(3.0 * z0, t, s, seed=77)
    zb = add_noise(z0, t, s, seed=77)
    diff = za - zb
    expect = np.sqrt(s.alpha_bar[t]) * 2.0 * z0
    torch.testing.assert_close(diff, expect.to(diff.dtype), rtol=1e-5, atol=1e-6)


def test_add_noise_rejects_out_of_range_t():
    s = make_schedule(10, 1e-4, 0.02)
    with pytest.raises(InvariantError):
        add_noise(torch.zeros(2), 11, s, seed=0)


def test_timestep_embedding_shape_and_range():
    emb = timestep_embedding(500, 64)
    assert emb.shape == (64,)
    assert emb.abs().max() <= 1.0
    assert not torch.equal(emb, timestep_embedding(0, 64))


def test_latent_encoder_stride_and_determinism(rng):
    img = random_image(rng)
    torch.manual_seed(0)
    enc = LatentEncoder()
    z1 = encode_latent(enc, img)
    z2 = encode_latent(enc, img)
    assert z1.shape == (4, 8, 8)
    assert torch.equal(z1, z2)
    assert not any(p.requires_grad for p in enc.parameters())


def test_latent_encoder_rejects_nondivisible():
    torch.manual_seed(0)
    enc = LatentEncoder()
    img = Image(pixels=np.zeros((60, 64, 3), dtype=np.uint8), id="odd")
    with pytest.raises(InvariantError):
        encode_latent(enc, img)


def test_image_to_tensor_range(rng):
    img = random_image(rng)
    x = image_to_tensor(img)
    assert x.shape == (3, 64, 64)
    assert x.min() >= -1.0 and x.max() <= 1.0


def _toy_unet(seed=0):
    spec = BackboneSpec()
    torch.manual_seed(seed)
    return DeskUNet(spec), spec


def test_extract_features_shape():
    unet, spec = _toy_unet()
    z = torch.randn(1, spec.latent_channels, 8, 8, generator=torch.Generator().manual_seed(1))
    prompt = torch.randn(1, 16, spec.d_p, generator=torch.Generator().manual_seed(2))
    f = extract_features(unet, z, 0, prompt)
    assert f.shape == (1, spec.c_out, 8, 8)


def test_extract_features_depends_on_prompt():
    unet, spec = _toy_unet()
    z = torch.randn(1, spec.latent_channels, 8, 8, generator=torch.Generator().manual_seed(1))
    g = torch.Generator().manual_seed(2)
    p1 = torch.randn(1, 16, spec.d_p, generator=g)
    p2 = torch.randn(1, 16, spec.d_p, generator=g)
    f1 = extract_features(unet, z, 0, p1)
    f2 = extract_features(unet, z, 0, p2)
    assert (f1 - f2).abs().max().item() > 0


def test_extract_features_deterministic():
    unet, spec = _toy_unet()
    z = torch.randn(1, spec.latent_channels, 8, 8, generator=torch.Generator().manual_seed(1))
    p = torch.randn(1, 16, spec.d_p, generator=torch.Generator().manual_seed(2))
    assert torch.equal(extract_features(unet, z, 0, p), extract_features(unet, z, 0, p))


def test_extract_features_prompt_width_mismatch():
    unet, spec = _toy_unet()
    z = torch.randn(1, spec.latent_channels, 8, 8)
    bad = torch.randn(1, 16, spec.d_p + 1)
    with pytest.raises((InvariantError, RuntimeError)):
        extract_features(unet, z, 0, bad)


def test_backbone_spec_requires_stride8_tap():
    with pytest.raises(InvariantError):
        BackboneSpec(block_index=1)  # stage 1 emits stride 16


def test_backbone_spec_resblock_indexing():
    # same tap expressed in the residual-block convention
    spec = BackboneSpec(block_index=2, block_indexing="resblock")
    assert spec.up_stage_stride(spec.block_index) == 8
    with pytest.raises(InvariantError):
        BackboneSpec(block_indexing="layer")
