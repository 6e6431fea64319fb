"""Synthetic pair generation and the on-disk dataset layout.

A dataset directory holds PNG images, small binary tensors (homographies,
depth maps, masks, packed poses), and an ``index.json`` with one record per
pair. Every record carries exactly one supervision source: a homography, a
pose+depth triple, or an instance mask pair.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image as PilImage

from .core import CameraFrame, Image, InstanceMaskPair, InvariantError
from .tensorio import read_tensor, write_tensor

MAX_WARP_RETRIES = 100
MIN_OVERLAP = 0.5
MAX_SPRITE_OVERLAP = 0.2


# ---------------------------------------------------------------------------
# Records and index files


@dataclass
class PairRecord:
    """One image pair plus its single supervision source (paths, not data)."""

    a: str
    b: str
    h: Optional[str] = None
    pose_a: Optional[str] = None
    pose_b: Optional[str] = None
    depth_a: Optional[str] = None
    mask_a: Optional[str] = None
    mask_b: Optional[str] = None
    category: str = ""
    split: str = "train"
    root: Path = Path(".")

    def __post_init__(self):
        has_h = self.h is not None
        has_pose = self.pose_a is not None or self.pose_b is not None or self.depth_a is not None
        has_mask = self.mask_a is not None or self.mask_b is not None
        if sum([has_h, has_pose, has_mask]) != 1:
            raise InvariantError("record must carry exactly one supervision source")
        if has_pose and None in (self.pose_a, self.pose_b, self.depth_a):
            raise InvariantError("pose supervision needs pose_a, pose_b and depth_a")
        if has_mask and None in (self.mask_a, self.mask_b):
            raise InvariantError("mask supervision needs both masks")

    @property
    def kind(self) -> str:
        if self.h is not None:
            return "h"
        if self.pose_a is not None:
            return "pose"
        return "mask"

    def to_dict(self) -> dict:
        out = {"a": self.a, "b": self.b, "category": self.category, "split": self.split}
        for k in ("h", "pose_a", "pose_b", "depth_a", "mask_a", "mask_b"):
            v = getattr(self, k)
            if v is not None:
                out[k] = v
        return out

    def load_images(self) -> tuple[Image, Image]:
        return load_image(self.root / self.a), load_image(self.root / self.b)

    def load_homography(self) -> np.ndarray:
        return read_tensor(self.root / self.h).astype(np.float64)

    def load_frames(self) -> tuple[CameraFrame, CameraFrame]:
        K_a, R_a, t_a = load_pose(self.root / self.pose_a)
        K_b, R_b, t_b = load_pose(self.root / self.pose_b)
        depth = read_tensor(self.root / self.depth_a).astype(np.float64)
        return CameraFrame(K_a, R_a, t_a, depth=depth), CameraFrame(K_b, R_b, t_b)

    def load_masks(self) -> InstanceMaskPair:
        ma = read_tensor(self.root / self.mask_a).astype(bool)
        mb = read_tensor(self.root / self.mask_b).astype(bool)
        return InstanceMaskPair(ma, mb, category=self.category)


def load_image(path: Path) -> Image:
    arr = np.asarray(PilImage.open(path).convert("RGB"), dtype=np.uint8)
    return Image(pixels=arr, id=Path(path).stem)


def save_image(path: Path, image: Image) -> None:
    PilImage.fromarray(image.pixels).save(path)


def save_pose(path: Path, K: np.ndarray, R: np.ndarray, t: np.ndarray) -> None:
    packed = np.vstack([K, R, np.asarray(t, dtype=np.float64).reshape(1, 3)])
    write_tensor(path, packed.astype(np.float64))


def load_pose(path: Path) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    packed = read_tensor(path).astype(np.float64)
    if packed.shape != (7, 3):
        raise InvariantError(f"pose tensor must be [7, 3], got {packed.shape}")
    return packed[:3], packed[3:6], packed[6]


def write_index(root: Path, records: list[PairRecord]) -> None:
    payload = {"pairs": [r.to_dict() for r in records]}
    (Path(root) / "index.json").write_text(json.dumps(payload, indent=2, sort_keys=True))


def load_dataset(index_path: Path) -> list[PairRecord]:
    index_path = Path(index_path)
    root = index_path.parent
    data = json.loads(index_path.read_text())
    return [PairRecord(root=root, **entry) for entry in data["pairs"]]


# ---------------------------------------------------------------------------
# Procedural textures


def _value_noise(rng: np.random.Generator, h: int, w: int, cell: int) -> np.ndarray:
    gh, gw = h // cell + 2, w // cell + 2
    grid = rng.random((gh, gw))
    ys = np.arange(h) / cell
    xs = np.arange(w) / cell
    y0 = ys.astype(int)
    x0 = xs.astype(int)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    g00 = grid[np.ix_(y0, x0)]
    g01 = grid[np.ix_(y0, x0 + 1)]
    g10 = grid[np.ix_(y0 + 1, x0)]
    g11 = grid[np.ix_(y0 + 1, x0 + 1)]
    return (
        g00 * (1 - fy) * (1 - fx)
        + g01 * (1 - fy) * fx
        + g10 * fy * (1 - fx)
        + g11 * fy * fx
    )


def make_texture(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    """Multi-scale noise with a few high-contrast shapes, uint8 RGB."""
    img = np.zeros((h, w, 3))
    for c in range(3):
        acc = np.zeros((h, w))
        amp = 1.0
        for cell in (16, 8, 4, 2):
            acc += amp * _value_noise(rng, h, w, cell)
            amp *= 0.55
        img[:, :, c] = acc
    img -= img.min()
    img /= max(img.max(), 1e-9)
    img = img * 200 + 25

    yy, xx = np.mgrid[0:h, 0:w]
    for _ in range(int(rng.integers(3, 7))):
        color = rng.integers(0, 256, size=3)
        cx, cy = rng.uniform(0, w), rng.uniform(0, h)
        r = rng.uniform(min(h, w) * 0.05, min(h, w) * 0.2)
        if rng.random() < 0.5:
            m = (xx - cx) ** 2 + (yy - cy) ** 2 <= r * r
        else:
            m = (np.abs(xx - cx) <= r) & (np.abs(yy - cy) <= r)
        img[m] = 0.65 * img[m] + 0.35 * color
    return np.clip(img, 0, 255).astype(np.uint8)


# ---------------------------------------------------------------------------
# Homography pairs


def _random_homography(
    rng: np.random.Generator, h: int, w: int, magnitude: float
) -> np.ndarray:
    ang = np.radians(rng.uniform(-30.0, 30.0) * magnitude)
    scale = rng.uniform(1.0 - 0.2 * magnitude, 1.0 + 0.25 * magnitude)
    tx = rng.uniform(-0.15, 0.15) * magnitude * w
    ty = rng.uniform(-0.15, 0.15) * magnitude * h
    cx, cy = (w - 1) / 2.0, (h - 1) / 2.0
    c, s = np.cos(ang), np.sin(ang)
    rot = np.array([[c * scale, -s * scale, 0], [s * scale, c * scale, 0], [0, 0, 1.0]])
    to_c = np.array([[1, 0, -cx], [0, 1, -cy], [0, 0, 1.0]])
    from_c = np.array([[1, 0, cx + tx], [0, 1, cy + ty], [0, 0, 1.0]])
    H = from_c @ rot @ to_c
    H[2, 0] = rng.uniform(-1, 1) * 5e-4 * magnitude
    H[2, 1] = rng.uniform(-1, 1) * 5e-4 * magnitude
    return H / H[2, 2]


def _overlap_fraction(H: np.ndarray, h: int, w: int) -> float:
    """Fraction of a coarse sample grid of A that lands inside B (min of both ways)."""

    def frac(mat):
        xs = np.linspace(0, w - 1, 16)
        ys = np.linspace(0, h - 1, 16)
        gx, gy = np.meshgrid(xs, ys)
        pts = np.stack([gx.ravel(), gy.ravel(), np.ones(gx.size)], axis=1)
        proj = pts @ mat.T
        with np.errstate(divide="ignore", invalid="ignore"):
            uv = proj[:, :2] / proj[:, 2:3]
        good = np.isfinite(uv).all(axis=1)
        inside = good & (uv[:, 0] >= 0) & (uv[:, 0] <= w - 1) & (uv[:, 1] >= 0) & (uv[:, 1] <= h - 1)
        return inside.mean()

    return min(frac(H), frac(np.linalg.inv(H)))


def _bilinear_sample(img: np.ndarray, x: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    h, w = img.shape[:2]
    valid = (x >= 0) & (x <= w - 1) & (y >= 0) & (y <= h - 1)
    x = np.clip(x, 0, w - 1)
    y = np.clip(y, 0, h - 1)
    x0 = np.clip(np.floor(x).astype(int), 0, w - 2)
    y0 = np.clip(np.floor(y).astype(int), 0, h - 2)
    fx = (x - x0)[..., None]
    fy = (y - y0)[..., None]
    out = (
        img[y0, x0] * (1 - fy) * (1 - fx)
        + img[y0, x0 + 1] * (1 - fy) * fx
        + img[y0 + 1, x0] * fy * (1 - fx)
        + img[y0 + 1, x0 + 1] * fy * fx
    )
    return out, valid


def warp_image(img: np.ndarray, H: np.ndarray, fill: np.ndarray) -> np.ndarray:
    """Render B(p) = A(H^-1 p) with bilinear sampling; invalid pixels take fill."""
    h, w = img.shape[:2]
    Hinv = np.linalg.inv(H)
    yy, xx = np.mgrid[0:h, 0:w]
    pts = np.stack([xx.ravel(), yy.ravel(), np.ones(xx.size)], axis=1)
    src = pts @ Hinv.T
    with np.errstate(divide="ignore", invalid="ignore"):
        sx = src[:, 0] / src[:, 2]
        sy = src[:, 1] / src[:, 2]
    sx = np.nan_to_num(sx, nan=-1e6)
    sy = np.nan_to_num(sy, nan=-1e6)
    sampled, valid = _bilinear_sample(img.astype(np.float64), sx, sy)
    out = np.where(valid[:, None], sampled, fill.reshape(-1, fill.shape[-1]))
    return np.clip(out.reshape(h, w, -1), 0, 255).astype(np.uint8)


def _photometric_jitter(rng: np.random.Generator, img: np.ndarray) -> np.ndarray:
    gain = rng.uniform(0.8, 1.2, size=3)
    bias = rng.uniform(-10, 10, size=3)
    out = img.astype(np.float64) * gain + bias
    return np.clip(out, 0, 255).astype(np.uint8)


def gen_synthetic_pair(
    rng: np.random.Generator, size: int = 64, warp_magnitude: float = 1.0
) -> tuple[Image, Image, np.ndarray]:
    """Textured image, homography-warped partner, and the A->B homography."""
    tex = make_texture(rng, size, size)
    for _ in range(MAX_WARP_RETRIES):
        H = _random_homography(rng, size, size, warp_magnitude)
        if _overlap_fraction(H, size, size) >= MIN_OVERLAP:
            break
    else:
        raise RuntimeError("could not sample a homography with enough overlap")
    fill = make_texture(rng, size, size)
    warped = warp_image(tex, H, fill)
    warped = _photometric_jitter(rng, warped)
    return Image(tex, id="a"), Image(warped, id="b"), H


# ---------------------------------------------------------------------------
# Multi-instance pairs


_SPRITE_KINDS = ("circle", "square", "triangle")


def _render_sprite(
    canvas: np.ndarray, kind: str, cx: float, cy: float, r: float, ang: float, color: np.ndarray
) -> np.ndarray:
    h, w = canvas.shape[:2]
    yy, xx = np.mgrid[0:h, 0:w]
    dx = xx - cx
    dy = yy - cy
    c, s = np.cos(-ang), np.sin(-ang)
    rx = c * dx - s * dy
    ry = s * dx + c * dy
    if kind == "circle":
        m = rx * rx + ry * ry <= r * r
    elif kind == "square":
        m = (np.abs(rx) <= r) & (np.abs(ry) <= r)
    else:  # triangle: upward-pointing, inscribed in radius r
        m = (ry <= r * 0.5) & (ry >= -r) & (np.abs(rx) <= (ry + r) * 0.75)
    canvas[m] = color
    return m


def gen_multi_instance_pair(
    rng: np.random.Generator,
    size: int = 64,
    n_instances: int = 3,
) -> tuple[Image, Image, list[InstanceMaskPair]]:
    """Copies of one sprite on a shared background, each moving independently.

    All instances share shape, size and color, so telling them apart needs
    more than local appearance. Sprite footprints may overlap each other by at
    most 20% (of the smaller sprite) in either frame; layouts violating that
    are resampled. Generation asserts that each instance's motion carries its
    frame-A mask centroid into its frame-B mask. The first returned pair is
    the designated evaluation instance.
    """
    if n_instances < 2:
        raise ValueError("need at least 2 instances")
    for _ in range(MAX_WARP_RETRIES):
        bg_a = make_texture(rng, size, size)
        img_a = bg_a.copy()
        img_b = _photometric_jitter(rng, bg_a)
        kind = _SPRITE_KINDS[int(rng.integers(len(_SPRITE_KINDS)))]
        r = rng.uniform(size * 0.1, size * 0.16)
        color = rng.integers(40, 256, size=3)
        params = []
        for _ in range(n_instances):
            cx = rng.uniform(r, size - 1 - r)
            cy = rng.uniform(r, size - 1 - r)
            ang = rng.uniform(0, 2 * np.pi)
            dx = rng.uniform(-size * 0.2, size * 0.2)
            dy = rng.uniform(-size * 0.2, size * 0.2)
            dang = rng.uniform(-0.3, 0.3)
            params.append((kind, cx, cy, r, ang, dx, dy, dang, color))

        masks_a, masks_b, cats = [], [], []
        ok = True
        for kind, cx, cy, r, ang, dx, dy, dang, color in params:
            bx = min(max(cx + dx, r), size - 1 - r)
            by = min(max(cy + dy, r), size - 1 - r)
            ma = _render_sprite(img_a, kind, cx, cy, r, ang, color)
            mb = _render_sprite(img_b, kind, bx, by, r, ang + dang, color)
            if not ma.any() or not mb.any():
                ok = False
                break
            masks_a.append(ma)
            masks_b.append(mb)
            cats.append(kind)
        if not ok:
            continue

        def too_close(masks):
            for i in range(len(masks)):
                for j in range(i + 1, len(masks)):
                    inter = (masks[i] & masks[j]).sum()
                    if inter > MAX_SPRITE_OVERLAP * min(masks[i].sum(), masks[j].sum()):
                        return True
            return False

        if too_close(masks_a) or too_close(masks_b):
            continue

        pairs = []
        ok = True
        for k, (kind, cx, cy, r, ang, dx, dy, dang, _) in enumerate(params):
            ys, xs = np.nonzero(masks_a[k])
            ccx, ccy = xs.mean(), ys.mean()
            bx = min(max(cx + dx, r), size - 1 - r)
            by = min(max(cy + dy, r), size - 1 - r)
            # True motion: rotate about the sprite center, then translate.
            c, s = np.cos(dang), np.sin(dang)
            rx, ry = ccx - cx, ccy - cy
            tx = c * rx - s * ry + bx
            ty = s * rx + c * ry + by
            px, py = int(round(tx)), int(round(ty))
            if not (0 <= px < size and 0 <= py < size and masks_b[k][py, px]):
                ok = False
                break
            pairs.append(InstanceMaskPair(masks_a[k], masks_b[k], category=cats[k]))
        if not ok:
            continue
        assert pairs, "designated instance must survive the motion check"
        return Image(img_a, id="a"), Image(img_b, id="b"), pairs
    raise RuntimeError("could not sample a sprite layout within the overlap budget")


# ---------------------------------------------------------------------------
# Posed planar pairs (pose + depth supervision for two-view evaluation)


def gen_posed_pair(
    rng: np.random.Generator, size: int = 64, warp_magnitude: float = 1.0
) -> tuple[Image, Image, CameraFrame, CameraFrame]:
    """Fronto-parallel plane seen from two cameras.

    Camera A sits at the origin looking down +z at a textured plane z = d, so
    A's depth map is constant. B is rotated and translated; its image is the
    exact induced homography warp H = K (R + t n^T / d) K^-1 of A.
    """
    f = size * 1.2
    cx = cy = (size - 1) / 2.0
    K = np.array([[f, 0, cx], [0, f, cy], [0, 0, 1.0]])
    d = 2.0

    for _ in range(MAX_WARP_RETRIES):
        ax = rng.uniform(-0.08, 0.08) * warp_magnitude
        ay = rng.uniform(-0.08, 0.08) * warp_magnitude
        az = rng.uniform(-0.35, 0.35) * warp_magnitude
        Rx = np.array([[1, 0, 0], [0, np.cos(ax), -np.sin(ax)], [0, np.sin(ax), np.cos(ax)]])
        Ry = np.array([[np.cos(ay), 0, np.sin(ay)], [0, 1, 0], [-np.sin(ay), 0, np.cos(ay)]])
        Rz = np.array([[np.cos(az), -np.sin(az), 0], [np.sin(az), np.cos(az), 0], [0, 0, 1]])
        R = Rz @ Ry @ Rx
        t = rng.uniform(-0.15, 0.15, size=3) * warp_magnitude
        t[2] *= 0.5
        # Plane z = d in A's frame with x_b = R x_a + t induces R + t n^T / d.
        n = np.array([0.0, 0.0, 1.0])
        H = K @ (R + np.outer(t, n) / d) @ np.linalg.inv(K)
        H /= H[2, 2]
        if _overlap_fraction(H, size, size) >= MIN_OVERLAP and np.linalg.norm(t) > 0.02:
            break
    else:
        raise RuntimeError("could not sample a posed pair with enough overlap")

    tex = make_texture(rng, size, size)
    fill = make_texture(rng, size, size)
    img_b = _photometric_jitter(rng, warp_image(tex, H, fill))
    depth = np.full((size, size), d)
    frame_a = CameraFrame(K, np.eye(3), np.zeros(3), depth=depth)
    frame_b = CameraFrame(K, R, t)
    return Image(tex, id="a"), Image(img_b, id="b"), frame_a, frame_b


# ---------------------------------------------------------------------------
# Dataset writer


def generate_dataset(
    out: Path,
    kind: str,
    n_pairs: int,
    seed: int,
    size: int = 64,
    warp_magnitude: float = 1.0,
    holdout_every: int = 10,
) -> list[PairRecord]:
    """Write n_pairs generated pairs plus index.json under ``out``.

    Every ``holdout_every``-th pair goes to the "val" split.
    """
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    records = []
    for i in range(n_pairs):
        split = "val" if holdout_every and (i + 1) % holdout_every == 0 else "train"
        stem = f"pair_{i:05d}"
        if kind == "warp":
            a, b, H = gen_synthetic_pair(rng, size=size, warp_magnitude=warp_magnitude)
            save_image(out / f"{stem}_a.png", a)
            save_image(out / f"{stem}_b.png", b)
            write_tensor(out / f"{stem}_h.imdt", H.astype(np.float64))
            rec = PairRecord(
                a=f"{stem}_a.png", b=f"{stem}_b.png", h=f"{stem}_h.imdt",
                category="warp", split=split, root=out,
            )
        elif kind == "multi-instance":
            a, b, pairs = gen_multi_instance_pair(rng, size=size)
            save_image(out / f"{stem}_a.png", a)
            save_image(out / f"{stem}_b.png", b)
            mp = pairs[0]  # designated evaluation instance
            write_tensor(out / f"{stem}_ma.imdt", mp.source_mask.astype(np.uint8))
            write_tensor(out / f"{stem}_mb.imdt", mp.target_mask.astype(np.uint8))
            rec = PairRecord(
                a=f"{stem}_a.png", b=f"{stem}_b.png",
                mask_a=f"{stem}_ma.imdt", mask_b=f"{stem}_mb.imdt",
                category=mp.category, split=split, root=out,
            )
        elif kind == "posed":
            a, b, fa, fb = gen_posed_pair(rng, size=size, warp_magnitude=warp_magnitude)
            save_image(out / f"{stem}_a.png", a)
            save_image(out / f"{stem}_b.png", b)
            save_pose(out / f"{stem}_pose_a.imdt", fa.K, fa.R, fa.t)
            save_pose(out / f"{stem}_pose_b.imdt", fb.K, fb.R, fb.t)
            write_tensor(out / f"{stem}_depth_a.imdt", fa.depth.astype(np.float32))
            rec = PairRecord(
                a=f"{stem}_a.png", b=f"{stem}_b.png",
                pose_a=f"{stem}_pose_a.imdt", pose_b=f"{stem}_pose_b.imdt",
                depth_a=f"{stem}_depth_a.imdt",
                category="posed", split=split, root=out,
            )
        else:
            raise ValueError(f"unknown dataset kind {kind!r}")
        records.append(rec)
    write_index(out, records)
    return records
