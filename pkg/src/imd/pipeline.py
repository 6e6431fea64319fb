"""Model bundle, deterministic initialization, checkpoints, end-to-end match."""

from __future__ import annotations

import json
import zlib
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from .backbone import (
    BackboneSpec,
    DeskUNet,
    LatentEncoder,
    add_noise,
    encode_latent,
    extract_features,
    image_to_tensor,
    make_schedule,
)
from .cipm import CipmWeights, GridEncoder, cross_prompt, encode_image
from .coarse import CoarseTransformer, dual_softmax, score_matrix, select_matches
from .core import (
    CoarseMatchSet,
    FeatureMap,
    FineMatchSet,
    Image,
    InvariantError,
    MatchingConfig,
    preprocess,
)
from .fine import FeatureFusion, FineEncoder, refine_matches
from .tensorio import read_tensor, write_tensor

CHECKPOINT_FORMAT = "imd-checkpoint"
CHECKPOINT_VERSION = 1


class MatcherModel(nn.Module):
    """All trainable and frozen pieces of the matcher in one module.

    The latent and prompt-grid encoders stay frozen; everything else trains.
    """

    def __init__(self, spec: BackboneSpec | None = None):
        super().__init__()
        self.spec = spec or BackboneSpec()
        self.latent_enc = LatentEncoder(self.spec.latent_channels)
        self.unet = DeskUNet(self.spec)
        self.grid_enc = GridEncoder(d_e=self.spec.d_p)
        self.cipm = CipmWeights(d_e=self.spec.d_p, d_k=self.spec.d_p, d_p=self.spec.d_p)
        self.coarse_tf = CoarseTransformer(self.spec.c_out)
        self.fine_enc = FineEncoder(c_f=self.spec.c_out)
        self.fusion = FeatureFusion(self.spec.c_out, self.spec.c_out)

    def trainable_parameters(self):
        return [p for p in self.parameters() if p.requires_grad]


def seed_parameters(model: nn.Module, seed: int) -> None:
    """Deterministic re-initialization from a single generator.

    Parameters are visited in registration order; matrices get scaled normal
    draws, per-channel weights reset to 1 and biases to 0, so the same seed
    always reproduces the same byte-level state.
    """
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for name, p in model.named_parameters():
            if p.ndim >= 2:
                fan_in = int(np.prod(p.shape[1:]))
                fan_out = int(p.shape[0] * np.prod(p.shape[2:]))
                std = float(np.sqrt(2.0 / (fan_in + fan_out)))
                p.normal_(0.0, std, generator=g)
            elif name.endswith("bias"):
                p.zero_()
            else:
                p.fill_(1.0)


def build_model(cfg: MatchingConfig, spec: BackboneSpec | None = None) -> MatcherModel:
    spec = spec or BackboneSpec(block_index=cfg.block_index)
    model = MatcherModel(spec)
    seed_parameters(model, cfg.seed)
    model.latent_enc.requires_grad_(False)
    model.grid_enc.requires_grad_(False)
    return model


# ---------------------------------------------------------------------------
# Checkpoints


def save_checkpoint(model: MatcherModel, cfg: MatchingConfig, path: Path) -> None:
    """Directory of one tensor file per parameter plus a manifest."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    tensors = {}
    for i, (name, p) in enumerate(model.named_parameters()):
        fname = f"p{i:04d}.imdt"
        write_tensor(path / fname, p.detach().cpu().numpy().astype(np.float32))
        tensors[name] = fname
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "spec": model.spec.to_dict(),
        "config": cfg.to_dict(),
        "tensors": tensors,
    }
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))


def checkpoint_diff(model: MatcherModel, manifest: dict) -> list[str]:
    """Human-readable mismatches between a model and a checkpoint manifest."""
    problems = []
    have = {n: tuple(p.shape) for n, p in model.named_parameters()}
    want = manifest.get("tensors", {})
    for name in sorted(set(have) - set(want)):
        problems.append(f"missing from checkpoint: {name} {have[name]}")
    for name in sorted(set(want) - set(have)):
        problems.append(f"unexpected in checkpoint: {name}")
    return problems


def load_checkpoint(path: Path, model: MatcherModel | None = None) -> tuple[MatcherModel, MatchingConfig]:
    path = Path(path)
    manifest = json.loads((path / "manifest.json").read_text())
    if manifest.get("format") != CHECKPOINT_FORMAT or manifest.get("version") != CHECKPOINT_VERSION:
        raise InvariantError(f"not an imd checkpoint: {path}")
    cfg = MatchingConfig.from_dict(manifest["config"])
    if model is None:
        model = MatcherModel(BackboneSpec.from_dict(manifest["spec"]))
    problems = checkpoint_diff(model, manifest)
    if problems:
        raise InvariantError("checkpoint mismatch:\n" + "\n".join(problems))
    params = dict(model.named_parameters())
    with torch.no_grad():
        for name, fname in manifest["tensors"].items():
            data = read_tensor(path / fname)
            if tuple(data.shape) != tuple(params[name].shape):
                raise InvariantError(
                    f"checkpoint mismatch:\nshape of {name}: "
                    f"{tuple(data.shape)} vs {tuple(params[name].shape)}"
                )
            params[name].copy_(torch.from_numpy(data.astype(np.float32)))
    model.latent_enc.requires_grad_(False)
    model.grid_enc.requires_grad_(False)
    return model, cfg


# ---------------------------------------------------------------------------
# End-to-end matching


def _noise_seed(base_seed: int, image_id: str, t: int) -> int:
    # Stable across processes, unlike hash().
    return (base_seed * 1000003 + zlib.crc32(image_id.encode()) + t) % (2**31)


class DeskBackend:
    """FeatureBackend adapter around the desk-scale UNet.

    Matches the seam an external pretrained diffusion extractor would plug
    into: (image, t, prompt) -> stride-8 FeatureMap.
    """

    def __init__(self, model: MatcherModel, seed: int = 0):
        self.model = model
        self.seed = seed
        self.schedule = make_schedule()

    def extract(self, image: Image, t: int, prompt: torch.Tensor) -> FeatureMap:
        image = preprocess(image)
        with torch.no_grad():
            z0 = encode_latent(self.model.latent_enc, image)
            zt = add_noise(z0, t, self.schedule, seed=_noise_seed(self.seed, image.id, t))
            feats = extract_features(
                self.model.unet, zt.unsqueeze(0), t, prompt.unsqueeze(0)
            )
        return FeatureMap(data=feats.squeeze(0).numpy(), stride=8)


def precompute_frozen(model: MatcherModel, img_a: Image, img_b: Image) -> dict:
    """Outputs of the frozen encoders; safe to cache across training steps."""
    img_a = preprocess(img_a)
    img_b = preprocess(img_b)
    with torch.no_grad():
        return {
            "id_a": img_a.id,
            "id_b": img_b.id,
            "z0_a": encode_latent(model.latent_enc, img_a),
            "z0_b": encode_latent(model.latent_enc, img_b),
            "grid_a": encode_image(model.grid_enc, img_a),
            "grid_b": encode_image(model.grid_enc, img_b),
            "px_a": image_to_tensor(img_a),
            "px_b": image_to_tensor(img_b),
            "dims_a": (img_a.height, img_a.width),
            "dims_b": (img_b.height, img_b.width),
        }


def pair_features(
    model: MatcherModel,
    img_a: Image | None,
    img_b: Image | None,
    cfg: MatchingConfig,
    prompt_mode: str = "cross",
    noise_salt: int = 0,
    pre: dict | None = None,
) -> dict:
    """Shared forward pass up to the transformed coarse and fused fine maps.

    When ``pre`` is given the images are ignored and the cached frozen-encoder
    outputs are used instead.
    """
    if pre is None:
        pre = precompute_frozen(model, img_a, img_b)
    schedule = make_schedule()
    feats = {"dims_a": pre["dims_a"], "dims_b": pre["dims_b"]}
    prompts = cross_prompt(pre["grid_a"], pre["grid_b"], model.cipm, mode=prompt_mode)
    coarse = []
    for z0, prompt, img_id in (
        (pre["z0_a"], prompts[0], pre["id_a"]),
        (pre["z0_b"], prompts[1], pre["id_b"]),
    ):
        t = cfg.timestep
        zt = add_noise(z0, t, schedule, seed=_noise_seed(cfg.seed + noise_salt, img_id, t))
        c = extract_features(model.unet, zt.unsqueeze(0), t, prompt.unsqueeze(0))
        coarse.append(c)
    ta, tb = model.coarse_tf(coarse[0], coarse[1], cfg.n_attn)
    feats["coarse_a"], feats["coarse_b"] = ta[0], tb[0]
    for px, key, tmap in ((pre["px_a"], "fine_a", ta), (pre["px_b"], "fine_b", tb)):
        fine = model.fine_enc(px.unsqueeze(0))
        feats[key] = model.fusion(fine, tmap)[0]
    return feats


def match_pair(
    model: MatcherModel,
    img_a: Image,
    img_b: Image,
    cfg: MatchingConfig,
    prompt_mode: str = "cross",
) -> tuple[CoarseMatchSet, FineMatchSet]:
    """Full inference: coarse dual-softmax selection then fine refinement."""
    model.eval()
    with torch.no_grad():
        f = pair_features(model, img_a, img_b, cfg, prompt_mode=prompt_mode)
        s = score_matrix(f["coarse_a"], f["coarse_b"], cfg.temperature)
        p = dual_softmax(s)
        coarse = select_matches(p, cfg.tau)
        fine = refine_matches(
            f["fine_a"],
            f["fine_b"],
            coarse,
            grid_w_coarse=f["coarse_a"].shape[-1],
            window=cfg.fine_window,
            temperature=cfg.temperature,
            dims_a=f["dims_a"],
            dims_b=f["dims_b"],
        )
    fine.check_bounds(f["dims_a"], f["dims_b"])
    return coarse, fine
