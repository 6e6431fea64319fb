"""Shared data model and coordinate conventions.

Pixel-center convention used throughout: the cell with flat index ``idx`` on a
grid of stride ``s`` has its center at ``(col + 0.5) * s - 0.5`` so that a 3x3
expectation with uniform weights lands exactly on the patch center. Valid
subpixel coordinates live in ``[-0.5, dim - 0.5]``.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Optional

import numpy as np

COARSE_STRIDE = 8
FINE_STRIDE = 2


class InvariantError(ValueError):
    """A constructed value violates one of its declared invariants."""


@dataclass(frozen=True)
class Image:
    """8-bit RGB image plus a stable identifier."""

    pixels: np.ndarray  # uint8 [H, W, 3]
    id: str = ""

    def __post_init__(self):
        px = self.pixels
        if px.ndim != 3 or px.shape[2] != 3 or px.dtype != np.uint8:
            raise InvariantError(f"image must be uint8 [H, W, 3], got {px.dtype} {px.shape}")
        if px.shape[0] <= 0 or px.shape[1] <= 0:
            raise InvariantError("image dims must be positive")

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


def preprocess(image: Image) -> Image:
    """Reflect-pad an image so both dims are divisible by the coarse stride.

    Output coordinates of the padded image coincide with the input for the
    original pixel range; downstream matches are reported in padded coords,
    which equal original coords whenever the input was already divisible.
    """
    h, w = image.pixels.shape[:2]
    ph = (-h) % COARSE_STRIDE
    pw = (-w) % COARSE_STRIDE
    if ph == 0 and pw == 0:
        return image
    padded = np.pad(image.pixels, ((0, ph), (0, pw), (0, 0)), mode="reflect")
    return Image(pixels=padded, id=image.id)


def cell_center(idx: int, grid_w: int, stride: int) -> tuple[float, float]:
    """Center of a flat grid cell in image pixels (pixel-center convention)."""
    if idx < 0 or grid_w <= 0 or stride <= 0:
        raise ValueError(f"bad cell_center args idx={idx} grid_w={grid_w} stride={stride}")
    row, col = divmod(idx, grid_w)
    x = (col + 0.5) * stride - 0.5
    y = (row + 0.5) * stride - 0.5
    return x, y


def containing_cell(x: float, y: float, grid_w: int, grid_h: int, stride: int) -> Optional[int]:
    """Flat index of the grid cell whose footprint contains (x, y), or None."""
    col = int(np.floor((x + 0.5) / stride))
    row = int(np.floor((y + 0.5) / stride))
    if col < 0 or col >= grid_w or row < 0 or row >= grid_h:
        return None
    return row * grid_w + col


@dataclass(frozen=True)
class FeatureMap:
    """Channel-major feature grid tied to image pixels by an integer stride."""

    data: np.ndarray  # float [C, h, w]
    stride: int

    def __post_init__(self):
        if self.data.ndim != 3:
            raise InvariantError(f"feature map must be [C, h, w], got shape {self.data.shape}")
        if self.stride <= 0:
            raise InvariantError("stride must be positive")
        if not np.all(np.isfinite(self.data)):
            raise InvariantError("feature map contains non-finite values")

    @property
    def grid_h(self) -> int:
        return self.data.shape[1]

    @property
    def grid_w(self) -> int:
        return self.data.shape[2]


class CoarseMatchSet:
    """Cell-level matches at the coarse stride with MNN exclusivity.

    Duplicate source or target indices are constructor errors; the check is a
    single O(n) pass.
    """

    def __init__(self, idx_a, idx_b, confidence):
        idx_a = np.asarray(idx_a, dtype=np.int64)
        idx_b = np.asarray(idx_b, dtype=np.int64)
        confidence = np.asarray(confidence, dtype=np.float64)
        if not (idx_a.shape == idx_b.shape == confidence.shape) or idx_a.ndim != 1:
            raise InvariantError("idx_a, idx_b, confidence must be equal-length 1-D")
        if idx_a.size:
            if idx_a.min() < 0 or idx_b.min() < 0:
                raise InvariantError("negative cell index")
            seen_a: set[int] = set()
            seen_b: set[int] = set()
            for a, b in zip(idx_a.tolist(), idx_b.tolist()):
                if a in seen_a:
                    raise InvariantError(f"duplicate idx_a={a} breaks MNN exclusivity")
                if b in seen_b:
                    raise InvariantError(f"duplicate idx_b={b} breaks MNN exclusivity")
                seen_a.add(a)
                seen_b.add(b)
        if confidence.size and (confidence.min() < 0.0 or confidence.max() > 1.0):
            raise InvariantError("confidence outside [0, 1]")
        self.idx_a = idx_a
        self.idx_b = idx_b
        self.confidence = confidence

    def __len__(self) -> int:
        return int(self.idx_a.size)

    def __iter__(self):
        return iter(zip(self.idx_a.tolist(), self.idx_b.tolist(), self.confidence.tolist()))


class FineMatchSet:
    """Subpixel matches in original-image coordinates.

    ``parents`` records each entry's coarse match as ``(idx_a, idx_b)`` so the
    coarse parent stays recoverable; ``fallback`` flags entries produced by the
    low-confidence global-argmax fallback of local matching.
    """

    def __init__(self, xa, ya, xb, yb, confidence, parents=None, fallback=None):
        self.xa = np.asarray(xa, dtype=np.float64)
        self.ya = np.asarray(ya, dtype=np.float64)
        self.xb = np.asarray(xb, dtype=np.float64)
        self.yb = np.asarray(yb, dtype=np.float64)
        self.confidence = np.asarray(confidence, dtype=np.float64)
        n = self.xa.size
        for arr in (self.ya, self.xb, self.yb, self.confidence):
            if arr.size != n:
                raise InvariantError("coordinate arrays must have equal length")
        self.parents = None if parents is None else np.asarray(parents, dtype=np.int64).reshape(n, 2)
        self.fallback = (
            np.zeros(n, dtype=bool) if fallback is None else np.asarray(fallback, dtype=bool)
        )

    def __len__(self) -> int:
        return int(self.xa.size)

    def check_bounds(self, dims_a: tuple[int, int], dims_b: tuple[int, int]) -> None:
        ha, wa = dims_a
        hb, wb = dims_b
        ok = (
            (self.xa >= -0.5).all() and (self.xa <= wa - 0.5).all()
            and (self.ya >= -0.5).all() and (self.ya <= ha - 0.5).all()
            and (self.xb >= -0.5).all() and (self.xb <= wb - 0.5).all()
            and (self.yb >= -0.5).all() and (self.yb <= hb - 0.5).all()
        )
        if not ok:
            raise InvariantError("fine match coordinates outside image bounds")


@dataclass(frozen=True)
class CameraFrame:
    """Pinhole camera with world-to-camera pose and optional metric depth."""

    K: np.ndarray  # [3, 3]
    R: np.ndarray  # [3, 3], world -> cam
    t: np.ndarray  # [3]
    depth: Optional[np.ndarray] = None  # [H, W] meters, 0 = invalid

    def __post_init__(self):
        K = np.asarray(self.K, dtype=np.float64)
        R = np.asarray(self.R, dtype=np.float64)
        t = np.asarray(self.t, dtype=np.float64).reshape(3)
        object.__setattr__(self, "K", K)
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "t", t)
        if K.shape != (3, 3) or R.shape != (3, 3):
            raise InvariantError("K and R must be 3x3")
        if abs(K[1, 0]) > 1e-12 or abs(K[2, 0]) > 1e-12 or abs(K[2, 1]) > 1e-12:
            raise InvariantError("K must be upper-triangular")
        if K[0, 0] <= 0 or K[1, 1] <= 0:
            raise InvariantError("focal entries must be positive")
        if np.abs(R.T @ R - np.eye(3)).max() > 1e-6:
            raise InvariantError("R not orthonormal within 1e-6")
        if abs(np.linalg.det(R) - 1.0) > 1e-6:
            raise InvariantError("det(R) != 1 within 1e-6")
        if self.depth is not None:
            depth = np.asarray(self.depth, dtype=np.float64)
            object.__setattr__(self, "depth", depth)
            if depth.ndim != 2:
                raise InvariantError("depth must be [H, W]")
            if depth.size and depth.min() < 0:
                raise InvariantError("depth values must be >= 0")


@dataclass(frozen=True)
class InstanceMaskPair:
    """Binary instance masks for one object tracked across an image pair."""

    source_mask: np.ndarray  # bool [H_A, W_A]
    target_mask: np.ndarray  # bool [H_B, W_B]
    category: str = ""

    def __post_init__(self):
        sm = np.asarray(self.source_mask, dtype=bool)
        tm = np.asarray(self.target_mask, dtype=bool)
        object.__setattr__(self, "source_mask", sm)
        object.__setattr__(self, "target_mask", tm)
        if sm.ndim != 2 or tm.ndim != 2:
            raise InvariantError("masks must be 2-D")
        if not sm.any() or not tm.any():
            raise InvariantError("each mask needs at least one true pixel")


@dataclass
class MatchingConfig:
    """Matcher hyperparameters; defaults are the shipping operating point."""

    tau: float = 0.2
    temperature: float = 0.1
    n_attn: int = 2
    timestep: int = 0
    block_index: int = 2
    fine_window: int = 5
    alpha: float = 1.0
    beta: float = 0.25
    seed: int = 0

    def __post_init__(self):
        if not (0.0 < self.tau < 1.0):
            raise InvariantError(f"tau must be in (0, 1), got {self.tau}")
        if self.temperature <= 0:
            raise InvariantError("temperature must be positive")
        if self.fine_window < 3 or self.fine_window % 2 == 0:
            raise InvariantError("fine_window must be odd and >= 3")
        if self.n_attn < 0:
            raise InvariantError("n_attn must be >= 0")
        if self.timestep < 0:
            raise InvariantError("timestep must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "MatchingConfig":
        known = {f for f in cls.__dataclass_fields__}
        return cls(**{k: v for k, v in d.items() if k in known})


def cache_dir() -> Path:
    """Golden/checkpoint cache root, overridable through IMD_CACHE."""
    root = os.environ.get("IMD_CACHE")
    if root:
        return Path(root)
    return Path.home() / ".cache" / "imd"
