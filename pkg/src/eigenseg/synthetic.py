"""Synthetic scenes: colored rectangles and ellipses on a textured background.

Per-patch features (c = 12), computed from the quantized 8-bit image:

    [0:3]   mean RGB of the patch
    [3:6]   per-channel standard deviation, scaled by STD_WEIGHT
    [6:8]   patch-center (row, col) in [0, 1], scaled by POSITION_WEIGHT
    [8:12]  palette response: every pixel votes for its nearest palette color,
            the per-patch vote fractions f are sharpened to softmax(SHARPNESS * f)
            and scaled by RESPONSE_WEIGHT (background first)

Mixed boundary patches thus sit close to their majority class.

The ground-truth mask stores the class of the topmost shape at every pixel
(0 = background).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data_io import FeatureContainer, downsample_image, write_feature_container, write_pgm, write_ppm
from .errors import ConfigError
from .tensor_core import make_rng

DEFAULT_PALETTE = (
    (0.42, 0.50, 0.40),  # background
    (0.85, 0.18, 0.15),
    (0.15, 0.30, 0.85),
    (0.92, 0.82, 0.20),
)
STD_WEIGHT = 0.5
POSITION_WEIGHT = 0.1
RESPONSE_WEIGHT = 2.0
SHARPNESS = 25.0
WAVE_AMPLITUDE = 0.5
N_CHANNELS = 12


@dataclass
class SceneSpec:
    n_images: int = 20
    height: int = 64
    width: int = 64
    patch_size: int = 8
    n_shapes: int = 3
    palette: tuple = DEFAULT_PALETTE
    min_size: int = 14
    max_size: int = 30
    texture: float = 0.06
    seed: int = 0

    def validate(self):
        if self.n_images < 1 or self.height < 1 or self.width < 1:
            raise ConfigError("scene needs at least one image of positive size")
        if self.patch_size < 1 or self.height % self.patch_size or self.width % self.patch_size:
            raise ConfigError(f"image size must be a multiple of the patch size {self.patch_size}")
        if self.n_shapes < 0:
            raise ConfigError("n_shapes must be >= 0")
        if self.min_size < 1 or self.min_size > self.max_size:
            raise ConfigError(f"invalid shape size range [{self.min_size}, {self.max_size}]")
        if self.max_size > min(self.height, self.width):
            raise ConfigError(f"shapes up to {self.max_size}px exceed the {self.height}x{self.width} canvas")
        if len(self.palette) < 2:
            raise ConfigError("palette needs a background and at least one shape color")

    @property
    def n_classes(self) -> int:
        return len(self.palette)


@dataclass
class SyntheticDataset:
    images: list = field(default_factory=list)  # (H, W, 3) uint8
    masks: list = field(default_factory=list)  # (H, W) uint8 class ids
    container: FeatureContainer | None = None
    n_classes: int = 0


def _background(spec: SceneSpec, rng: np.random.Generator) -> np.ndarray:
    H, W = spec.height, spec.width
    yy, xx = np.mgrid[0:H, 0:W] / max(H, W)
    fy, fx, ph = rng.uniform(2, 6), rng.uniform(2, 6), rng.uniform(0, 2 * np.pi)
    wave = WAVE_AMPLITUDE * spec.texture * np.sin(2 * np.pi * (fy * yy + fx * xx) + ph)
    noise = spec.texture * rng.standard_normal((H, W, 3))
    return np.asarray(spec.palette[0]) + wave[..., None] + noise


def _draw(spec: SceneSpec, rng: np.random.Generator):
    H, W = spec.height, spec.width
    img = _background(spec, rng)
    mask = np.zeros((H, W), dtype=np.uint8)
    yy, xx = np.mgrid[0:H, 0:W]
    # every shape class shows up once per cycle so no class starves
    n_fg = spec.n_classes - 1
    cycles = [rng.permutation(n_fg) + 1 for _ in range(-(-spec.n_shapes // n_fg))]
    order = np.concatenate(cycles) if cycles else np.zeros(0, dtype=np.int64)
    for cls in order[:spec.n_shapes].tolist():
        sh, sw = rng.integers(spec.min_size, spec.max_size + 1, size=2)
        top = int(rng.integers(0, H - sh + 1))
        left = int(rng.integers(0, W - sw + 1))
        if rng.random() < 0.5:
            inside = (yy >= top) & (yy < top + sh) & (xx >= left) & (xx < left + sw)
        else:
            cy, cx = top + (sh - 1) / 2, left + (sw - 1) / 2
            inside = ((yy - cy) / (sh / 2)) ** 2 + ((xx - cx) / (sw / 2)) ** 2 <= 1
        color = np.asarray(spec.palette[cls]) + 0.3 * spec.texture * rng.standard_normal((H, W, 3))
        img[inside] = color[inside]
        mask[inside] = cls
    return np.clip(np.round(img * 255), 0, 255).astype(np.uint8), mask


def patch_features(image: np.ndarray, patch_size: int, palette=DEFAULT_PALETTE) -> np.ndarray:
    """The 12-channel feature recipe for one uint8 image -> (H/P, W/P, 12)."""
    P = patch_size
    img = image.astype(np.float64) / 255.0
    H, W = img.shape[:2]
    h, w = H // P, W // P
    blocks = img[:h * P, :w * P].reshape(h, P, w, P, 3).transpose(0, 2, 1, 3, 4).reshape(h, w, P * P, 3)
    mean = blocks.mean(axis=2)
    std = blocks.std(axis=2) * STD_WEIGHT
    rows = (np.arange(h) + 0.5) / h
    cols = (np.arange(w) + 0.5) / w
    pos = np.stack(np.meshgrid(rows, cols, indexing="ij"), axis=-1) * POSITION_WEIGHT
    pal = np.asarray(palette, dtype=np.float64)
    d2 = ((blocks[:, :, :, None, :] - pal) ** 2).sum(-1)
    votes = np.eye(len(pal))[d2.argmin(axis=-1)].mean(axis=2)
    z = SHARPNESS * votes
    z = np.exp(z - z.max(axis=-1, keepdims=True))
    resp = RESPONSE_WEIGHT * z / z.sum(axis=-1, keepdims=True)
    return np.concatenate([mean, std, pos, resp], axis=-1)


def generate_synthetic(spec: SceneSpec | None = None) -> SyntheticDataset:
    spec = spec or SceneSpec()
    spec.validate()
    rng = make_rng(spec.seed)
    ds = SyntheticDataset(n_classes=spec.n_classes)
    feats, planes = [], []
    for _ in range(spec.n_images):
        img, mask = _draw(spec, rng)
        ds.images.append(img)
        ds.masks.append(mask)
        feats.append(patch_features(img, spec.patch_size, spec.palette))
        planes.append(downsample_image(img / 255.0, spec.patch_size))
    ds.container = FeatureContainer(np.stack(feats), spec.patch_size, np.stack(planes))
    return ds


def write_synthetic(out_dir, spec: SceneSpec | None = None) -> SyntheticDataset:
    """Write images/*.ppm, masks/*.pgm and features.nefb under ``out_dir``."""
    ds = generate_synthetic(spec)
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    for i, (img, mask) in enumerate(zip(ds.images, ds.masks)):
        write_ppm(out / "images" / f"img_{i:04d}.ppm", img)
        write_pgm(out / "masks" / f"img_{i:04d}.pgm", mask)
    write_feature_container(out / "features.nefb", ds.container)
    return ds
