"""Feature containers, PPM/PGM codecs and run-configuration files.

NEFB feature container (little endian)::

    b"NEFB" | u32 version=1 | u32 n_images | u32 h | u32 w | u32 c
    | u32 patch_size | u32 flags (bit 0: pixel planes present)
    | float32 features (n_images, h, w, c)
    | float32 pixel planes (n_images, h, w, 3), only when flag bit 0 is set

Run configuration: one ``key = value`` per line, ``#`` starts a comment.
Keys are the fields of :class:`TrainConfig`.
"""

from __future__ import annotations

import re
import struct
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError, FormatError
from .neuralef import TrainConfig
from .segmentation import resize_bilinear

NEFB_MAGIC = b"NEFB"
NEFB_VERSION = 1
_HEADER = struct.Struct("<4s7I")


@dataclass
class FeatureContainer:
    features: np.ndarray  # (n_images, h, w, c) float32
    patch_size: int = 1
    pixel_planes: np.ndarray | None = None  # (n_images, h, w, 3) in [0, 1]

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float32)
        if self.features.ndim != 4 or min(self.features.shape) < 1:
            raise DataError(f"features must be a non-empty (n, h, w, c) array, got {self.features.shape}")
        if not np.isfinite(self.features).all():
            raise DataError("features contain non-finite values")
        if self.pixel_planes is not None:
            self.pixel_planes = np.asarray(self.pixel_planes, dtype=np.float32)
            if self.pixel_planes.shape != self.features.shape[:3] + (3,):
                raise DataError(f"pixel planes must be {self.features.shape[:3] + (3,)}, "
                                f"got {self.pixel_planes.shape}")
            if not np.isfinite(self.pixel_planes).all():
                raise DataError("pixel planes contain non-finite values")

    @property
    def n_images(self) -> int:
        return self.features.shape[0]

    @property
    def grid(self) -> tuple[int, int]:
        return self.features.shape[1], self.features.shape[2]

    @property
    def channels(self) -> int:
        return self.features.shape[3]

    def subset(self, idx) -> "FeatureContainer":
        planes = None if self.pixel_planes is None else self.pixel_planes[idx]
        return FeatureContainer(self.features[idx], self.patch_size, planes)

    def to_bytes(self) -> bytes:
        n, h, w, c = self.features.shape
        flags = 1 if self.pixel_planes is not None else 0
        parts = [_HEADER.pack(NEFB_MAGIC, NEFB_VERSION, n, h, w, c, self.patch_size, flags),
                 self.features.astype("<f4").tobytes()]
        if flags:
            parts.append(self.pixel_planes.astype("<f4").tobytes())
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, blob: bytes) -> "FeatureContainer":
        if len(blob) < _HEADER.size:
            raise FormatError(f"truncated NEFB header: {len(blob)} bytes")
        magic, version, n, h, w, c, patch, flags = _HEADER.unpack_from(blob)
        if magic != NEFB_MAGIC:
            raise FormatError(f"bad magic {magic!r}, expected {NEFB_MAGIC!r}")
        if version != NEFB_VERSION:
            raise FormatError(f"unsupported NEFB version {version}")
        count = n * h * w * c
        planes = n * h * w * 3 if flags & 1 else 0
        expected = _HEADER.size + 4 * (count + planes)
        if len(blob) != expected:
            raise FormatError(f"NEFB payload size mismatch: expected {expected} bytes, got {len(blob)}")
        off = _HEADER.size
        feats = np.frombuffer(blob, "<f4", count, off).reshape(n, h, w, c)
        pix = None
        if planes:
            pix = np.frombuffer(blob, "<f4", planes, off + 4 * count).reshape(n, h, w, 3)
        if not np.isfinite(feats).all() or (pix is not None and not np.isfinite(pix).all()):
            raise FormatError("NEFB payload contains non-finite floats")
        return cls(feats.astype(np.float32), patch, None if pix is None else pix.astype(np.float32))


def write_feature_container(path, fc: FeatureContainer) -> None:
    Path(path).write_bytes(fc.to_bytes())


def read_feature_container(path) -> FeatureContainer:
    return FeatureContainer.from_bytes(Path(path).read_bytes())


# -- PPM / PGM ------------------------------------------------------------------

_TOKEN = re.compile(rb"(?:\s|#[^\n]*\n)*(\S+)")


def _encode_pnm(magic: bytes, arr: np.ndarray) -> bytes:
    h, w = arr.shape[:2]
    return b"%s\n%d %d\n255\n" % (magic, w, h) + np.ascontiguousarray(arr, dtype=np.uint8).tobytes()


def decode_pnm(blob: bytes) -> np.ndarray:
    """Decode binary P5 (gray -> (H, W)) or P6 (RGB -> (H, W, 3)) with maxval 255."""
    pos = 0
    tokens = []
    for _ in range(4):
        m = _TOKEN.match(blob, pos)
        if m is None:
            raise FormatError("truncated PNM header")
        tokens.append(m.group(1))
        pos = m.end()
    magic = tokens[0]
    if magic not in (b"P5", b"P6"):
        raise FormatError(f"unsupported PNM type {magic!r}; only binary P5/P6 are accepted")
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError as exc:
        raise FormatError(f"malformed PNM header: {exc}") from None
    if maxval != 255:
        raise FormatError(f"unsupported maxval {maxval}; only 255 is accepted")
    if w < 1 or h < 1:
        raise FormatError(f"invalid PNM size {w}x{h}")
    if pos >= len(blob) or not blob[pos:pos + 1].isspace():
        raise FormatError("missing whitespace after PNM header")
    pos += 1
    channels = 3 if magic == b"P6" else 1
    need = w * h * channels
    data = blob[pos:]
    if len(data) < need:
        raise FormatError(f"truncated PNM raster: expected {need} bytes, got {len(data)}")
    if len(data) > need:
        raise FormatError(f"trailing data after PNM raster ({len(data) - need} bytes)")
    arr = np.frombuffer(data, np.uint8).copy()
    return arr.reshape(h, w, 3) if channels == 3 else arr.reshape(h, w)


def write_pgm(path, mask: np.ndarray) -> None:
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise DataError(f"PGM needs a 2-D array, got {mask.shape}")
    if mask.min(initial=0) < 0 or mask.max(initial=0) > 255:
        raise DataError("PGM values must lie in [0, 255]")
    Path(path).write_bytes(_encode_pnm(b"P5", mask))


def write_ppm(path, image: np.ndarray) -> None:
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise DataError(f"PPM needs an (H, W, 3) array, got {image.shape}")
    Path(path).write_bytes(_encode_pnm(b"P6", image))


def read_pgm(path) -> np.ndarray:
    arr = decode_pnm(Path(path).read_bytes())
    if arr.ndim != 2:
        raise FormatError(f"{path}: expected a P5 (gray) image")
    return arr


def read_ppm(path) -> np.ndarray:
    arr = decode_pnm(Path(path).read_bytes())
    if arr.ndim != 3:
        raise FormatError(f"{path}: expected a P6 (RGB) image")
    return arr


def palette_256() -> np.ndarray:
    """Fixed 256-entry color table used for colorized masks.

    Entry i takes the bit-interleaved (PASCAL VOC style) color of i.
    """
    pal = np.zeros((256, 3), dtype=np.uint8)
    for i in range(256):
        c, r, g, b = i, 0, 0, 0
        for j in range(8):
            r |= ((c >> 0) & 1) << (7 - j)
            g |= ((c >> 1) & 1) << (7 - j)
            b |= ((c >> 2) & 1) << (7 - j)
            c >>= 3
        pal[i] = (r, g, b)
    return pal


def colorize(mask: np.ndarray) -> np.ndarray:
    return palette_256()[np.asarray(mask, dtype=np.uint8)]


# -- images -----------------------------------------------------------------------

def downsample_image(img: np.ndarray, P: int) -> np.ndarray:
    """Bilinear (half-pixel centers) reduction of an (H, W, 3) image by ``P``.

    Sizes that are not multiples of ``P`` are reflect-padded first.
    """
    img = np.asarray(img, dtype=np.float64)
    if P < 1:
        raise ConfigError(f"patch size must be >= 1, got {P}")
    if P == 1:
        return img.copy()
    H, W = img.shape[:2]
    ph, pw = (-H) % P, (-W) % P
    if ph or pw:
        img = np.pad(img, ((0, ph), (0, pw), (0, 0)), mode="reflect")
    return resize_bilinear(img, img.shape[0] // P, img.shape[1] // P)


# -- run configuration --------------------------------------------------------------

def _parse_value(key: str, raw: str, typ):
    try:
        if typ == "bool":
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if typ == "int":
            return int(raw)
        return float(raw)
    except ValueError:
        raise ConfigError(f"cannot parse value {raw!r} for key {key!r}") from None


def _field_types() -> dict[str, str]:
    out = {}
    for f in fields(TrainConfig):
        t = str(f.type)
        out[f.name] = "bool" if "bool" in t else ("int" if t.startswith("int") else "float")
    return out


def parse_config_text(text: str) -> TrainConfig:
    types = _field_types()
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in types:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        values[key] = _parse_value(key, raw, types[key])
    return TrainConfig(**values)


def parse_config(path) -> TrainConfig:
    return parse_config_text(Path(path).read_text())


def format_config(cfg: TrainConfig) -> str:
    lines = []
    for f in fields(cfg):
        v = getattr(cfg, f.name)
        lines.append(f"{f.name} = {str(v).lower() if isinstance(v, bool) else v}")
    return "\n".join(lines) + "\n"


def image_files(directory, suffix: str) -> list[Path]:
    files = sorted(p for p in Path(directory).iterdir() if p.suffix == suffix)
    if not files:
        raise DataError(f"no {suffix} files in {directory}")
    return files
