"""Synthetic datasets, netpbm (PPM/PGM) I/O, palettes, manifests, crop and normalize."""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .supervision import IGNORE_INDEX
from .tensor import get_dtype

# conventional ImageNet statistics used by VGG-style preprocessing
VGG_MEAN = (0.485, 0.456, 0.406)
VGG_STD = (0.229, 0.224, 0.225)

_CLASS_COLORS = [
    (0, 0, 0), (220, 40, 40), (40, 180, 60), (50, 80, 230), (230, 210, 40),
    (200, 60, 200), (40, 200, 210), (240, 140, 30), (140, 90, 40), (250, 250, 250),
]


class DataError(ValueError):
    """Malformed, truncated or inconsistent data on disk."""


@dataclass
class Sample:
    image: np.ndarray   # (1, 3, h, w) float in [0, 1]
    labels: np.ndarray  # (h, w) int, class index or IGNORE_INDEX
    id: str = ""

    def __post_init__(self):
        if self.image.ndim != 4 or self.image.shape[:2] != (1, 3):
            raise ValueError(f"image must be (1, 3, h, w), got {self.image.shape}")
        if self.image.shape[2:] != self.labels.shape:
            raise ValueError(f"image {self.image.shape[2:]} and labels {self.labels.shape} differ in size")


@dataclass
class Palette:
    entries: list  # (index, r, g, b, name)

    def __post_init__(self):
        idx = [e[0] for e in self.entries]
        if sorted(idx) != list(range(len(idx))):
            raise ValueError(f"palette indices must be unique and dense from 0, got {idx}")
        self.entries = sorted(self.entries)

    @property
    def names(self):
        return [e[4] for e in self.entries]

    def colors(self) -> np.ndarray:
        return np.array([e[1:4] for e in self.entries], dtype=np.uint8)

    @classmethod
    def default(cls, num_classes: int) -> "Palette":
        entries = []
        for c in range(num_classes):
            r, g, b = _class_color(c)
            entries.append((c, r, g, b, "background" if c == 0 else f"class{c}"))
        return cls(entries)

    def colorize(self, labels: np.ndarray) -> np.ndarray:
        """(h, w) labels -> (h, w, 3) uint8; ignore pixels render black."""
        lut = np.zeros((256, 3), dtype=np.uint8)
        lut[: len(self.entries)] = self.colors()
        return lut[np.asarray(labels, dtype=np.uint8)]


def _class_color(c: int):
    if c < len(_CLASS_COLORS):
        return _CLASS_COLORS[c]
    rng = np.random.Generator(np.random.PCG64(c))
    return tuple(int(v) for v in rng.integers(30, 256, 3))


# ---------------------------------------------------------------- generators

def gen_shapes(rng: np.random.Generator, n: int, size: int, num_classes: int,
               noise: float = 0.04) -> list:
    """Images with 1-4 rectangles or discs; each object class has its own colour.

    Background is class 0. Later shapes paint over earlier ones and the label
    map follows the paint order, so labels always match the visible pixels.
    """
    if num_classes < 2:
        raise ValueError("gen_shapes needs at least one object class besides background")
    if isinstance(size, int):
        size = (size, size)
    h, w = size
    yy, xx = np.mgrid[0:h, 0:w]
    out = []
    for i in range(n):
        bg = rng.uniform(0.35, 0.6)
        img = np.full((h, w, 3), bg)
        lab = np.zeros((h, w), dtype=np.int64)
        for _ in range(int(rng.integers(1, 5))):
            cls = int(rng.integers(1, num_classes))
            color = np.array(_class_color(cls)) / 255.0
            sh = int(rng.integers(max(2, h // 8), max(3, h // 3) + 1))
            sw = int(rng.integers(max(2, w // 8), max(3, w // 3) + 1))
            y0 = int(rng.integers(0, h - sh + 1))
            x0 = int(rng.integers(0, w - sw + 1))
            if rng.random() < 0.5:
                mask = (yy >= y0) & (yy < y0 + sh) & (xx >= x0) & (xx < x0 + sw)
            else:
                cy, cx, r = y0 + sh / 2, x0 + sw / 2, min(sh, sw) / 2
                mask = (yy + 0.5 - cy) ** 2 + (xx + 0.5 - cx) ** 2 <= r * r
            img[mask] = color
            lab[mask] = cls
        img = np.clip(img + rng.normal(0.0, noise, img.shape), 0.0, 1.0)
        out.append(Sample(_to_nchw(_quantize(img)), lab, f"shapes_{i:05d}"))
    return out


def ambiguous_layout(size: int):
    """(cue_side, patch_side, lowest patch origin, highest patch origin) for a square image."""
    cue = max(1, size // 8)
    patch = max(2, size // 4)
    lo = cue + size // 2
    hi = size - patch
    if lo > hi:
        raise ValueError(f"image size {size} too small for the ambiguity layout")
    return cue, patch, lo, hi


def ambiguous_texture(side: int) -> np.ndarray:
    """Fixed class-independent checkerboard texture, (side, side, 3) in [0, 1]."""
    yy, xx = np.mgrid[0:side, 0:side]
    check = ((yy // 2 + xx // 2) % 2).astype(np.float64)
    tex = np.empty((side, side, 3))
    tex[..., 0] = 0.15 + 0.7 * check
    tex[..., 1] = 0.85 - 0.7 * check
    tex[..., 2] = 0.5
    return tex


def gen_ambiguous(rng: np.random.Generator, n: int, size: int, noise: float = 0.04) -> list:
    """Three-class task (background + two objects) decidable only from distant context.

    The object is always the same textured square in the lower-right region;
    its class (1 or 2) is signalled only by the tint of a small cue square in
    the top-left corner. The cue and the patch are at least ``size / 2``
    pixels apart on both axes, so a receptive field narrower than half the
    image cannot see both.
    """
    cue, side, lo, hi = ambiguous_layout(size)
    tex = _quantize(ambiguous_texture(side))
    tints = {1: np.array([0.9, 0.2, 0.2]), 2: np.array([0.2, 0.3, 0.9])}
    out = []
    for i in range(n):
        cls = int(rng.integers(1, 3))
        img = np.clip(0.5 + rng.normal(0.0, noise, (size, size, 3)), 0.0, 1.0)
        img[:cue, :cue] = tints[cls]
        y0 = int(rng.integers(lo, hi + 1))
        x0 = int(rng.integers(lo, hi + 1))
        img = _quantize(img)
        img[y0:y0 + side, x0:x0 + side] = tex
        lab = np.zeros((size, size), dtype=np.int64)
        lab[y0:y0 + side, x0:x0 + side] = cls
        out.append(Sample(_to_nchw(img), lab, f"ambiguous_{i:05d}"))
    return out


def _quantize(img: np.ndarray) -> np.ndarray:
    """Snap to the 8-bit grid so in-memory samples equal their PPM round trip."""
    return np.round(np.clip(img, 0.0, 1.0) * 255.0) / 255.0


def _to_nchw(img: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(img.transpose(2, 0, 1)[None])


GENERATORS = {"shapes", "ambiguous"}


SPLITS = {"train": 0, "test": 1}


def generate(spec: dict, seed: int, split: str = "train") -> list:
    """Build a dataset from ``{"generator": name, "n": .., "size": .., ...}``.

    ``split`` selects an independent stream so train and test sets never overlap.
    """
    kind = spec.get("generator")
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), 0x5EED, SPLITS[split]])))
    if kind == "shapes":
        return gen_shapes(rng, int(spec["n"]), int(spec["size"]), int(spec["num_classes"]))
    if kind == "ambiguous":
        return gen_ambiguous(rng, int(spec["n"]), int(spec["size"]))
    raise ValueError(f"unknown generator {kind!r}; expected one of {sorted(GENERATORS)}")


# ---------------------------------------------------------------- crop / normalize

def random_crop(sample: Sample, crop_h: int, crop_w: int, rng: np.random.Generator) -> Sample:
    h, w = sample.labels.shape
    if crop_h > h or crop_w > w or crop_h < 1 or crop_w < 1:
        raise ValueError(f"crop {crop_h}x{crop_w} does not fit image {h}x{w}")
    y0 = int(rng.integers(0, h - crop_h + 1))
    x0 = int(rng.integers(0, w - crop_w + 1))
    return Sample(sample.image[:, :, y0:y0 + crop_h, x0:x0 + crop_w].copy(),
                  sample.labels[y0:y0 + crop_h, x0:x0 + crop_w].copy(), sample.id)


def normalize(image: np.ndarray, mean=VGG_MEAN, std=VGG_STD) -> np.ndarray:
    mean = np.asarray(mean, dtype=np.float64).reshape(1, -1, 1, 1)
    std = np.asarray(std, dtype=np.float64).reshape(1, -1, 1, 1)
    if np.any(std <= 0):
        raise ValueError("normalize: std must be positive")
    return ((image - mean) / std).astype(image.dtype)


def prepare_batch(samples, mean=VGG_MEAN, std=VGG_STD, dtype=None):
    """Normalize and stack samples into an (n, 3, h, w) image batch and (n, h, w) labels."""
    dtype = dtype or get_dtype()
    images = np.concatenate([normalize(s.image, mean, std) for s in samples], axis=0).astype(dtype)
    labels = np.stack([s.labels for s in samples])
    return images, labels


# ---------------------------------------------------------------- netpbm

def _parse_header(buf: bytes, magic: bytes, path):
    if buf[:2] != magic:
        raise DataError(f"{path}: bad magic {buf[:2]!r}, expected {magic!r}")
    fields, pos = [], 2
    while len(fields) < 3:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if pos < len(buf) and buf[pos:pos + 1] == b"#":
            while pos < len(buf) and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(buf) and buf[pos:pos + 1].isdigit():
            pos += 1
        if start == pos:
            raise DataError(f"{path}: malformed header near byte {pos}")
        fields.append(int(buf[start:pos]))
    if pos >= len(buf) or not buf[pos:pos + 1].isspace():
        raise DataError(f"{path}: malformed header, missing separator after maxval")
    width, height, maxval = fields
    if width < 1 or height < 1:
        raise DataError(f"{path}: invalid dimensions {width}x{height}")
    if maxval != 255:
        raise DataError(f"{path}: unsupported maxval {maxval}, only 255 is accepted")
    return width, height, pos + 1


def _read_payload(path, magic: bytes, channels: int) -> np.ndarray:
    buf = Path(path).read_bytes()
    w, h, off = _parse_header(buf, magic, path)
    need = w * h * channels
    if len(buf) - off < need:
        raise DataError(f"{path}: truncated payload, {len(buf) - off} of {need} bytes")
    return np.frombuffer(buf, dtype=np.uint8, count=need, offset=off).reshape(h, w, channels)


def load_image_ppm(path) -> np.ndarray:
    """Binary P6 -> (1, 3, h, w) float64 in [0, 1]."""
    px = _read_payload(path, b"P6", 3)
    return np.ascontiguousarray(px.transpose(2, 0, 1)[None].astype(np.float64) / 255.0)


def load_labels_pgm(path, num_classes: int | None = None) -> np.ndarray:
    """Binary P5 -> (h, w) int labels; 255 marks ignored pixels."""
    lab = _read_payload(path, b"P5", 1)[..., 0].astype(np.int64)
    if num_classes is not None:
        check_labels(lab, num_classes, path)
    return lab


def check_labels(labels, num_classes: int, where="labels"):
    bad = (labels != IGNORE_INDEX) & ((labels < 0) | (labels >= num_classes))
    if bad.any():
        y, x = (int(v) for v in np.argwhere(bad)[0])
        raise DataError(f"{where}: label {int(labels[y, x])} at ({y}, {x}) is not below {num_classes}")


def _write(path, magic: bytes, px: np.ndarray):
    h, w = px.shape[:2]
    with open(path, "wb") as f:
        f.write(magic + b"\n%d %d\n255\n" % (w, h))
        f.write(np.ascontiguousarray(px, dtype=np.uint8).tobytes())


def save_image_ppm(path, image: np.ndarray):
    """(1, 3, h, w) or (h, w, 3) uint8/float image -> binary P6."""
    arr = np.asarray(image)
    if arr.ndim == 4:
        arr = arr[0].transpose(1, 2, 0)
    if arr.dtype != np.uint8:
        arr = np.round(np.clip(arr, 0.0, 1.0) * 255.0).astype(np.uint8)
    _write(path, b"P6", arr)


def save_labels_pgm(path, labels: np.ndarray):
    lab = np.asarray(labels)
    if lab.min(initial=0) < 0 or lab.max(initial=0) > 255:
        raise ValueError("labels must fit in 0..255 for PGM")
    _write(path, b"P5", lab.astype(np.uint8))


# ---------------------------------------------------------------- palette / manifest / dataset dirs

def save_palette(path, palette: Palette):
    with open(path, "w") as f:
        for idx, r, g, b, name in palette.entries:
            f.write(f"{idx} {r} {g} {b} {name}\n")


def load_palette(path) -> Palette:
    entries = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split(maxsplit=4)
        if len(parts) != 5:
            raise DataError(f"{path}:{lineno}: expected 'index r g b name'")
        try:
            idx, r, g, b = (int(p) for p in parts[:4])
        except ValueError:
            raise DataError(f"{path}:{lineno}: non-integer field") from None
        entries.append((idx, r, g, b, parts[4]))
    try:
        return Palette(entries)
    except ValueError as e:
        raise DataError(f"{path}: {e}") from None


def write_dataset(out_dir, samples: list, palette: Palette):
    """Write ``images/*.ppm``, ``labels/*.pgm``, ``manifest.txt`` and ``palette.txt``."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "labels").mkdir(parents=True, exist_ok=True)
    lines = []
    for s in samples:
        img_rel = f"images/{s.id}.ppm"
        lab_rel = f"labels/{s.id}.pgm"
        save_image_ppm(out / img_rel, s.image)
        save_labels_pgm(out / lab_rel, s.labels)
        lines.append(f"{img_rel} {lab_rel}\n")
    (out / "manifest.txt").write_text("".join(lines))
    save_palette(out / "palette.txt", palette)
    return out / "manifest.txt"


def load_manifest(path, num_classes: int | None = None) -> list:
    """Read ``image_path label_path`` lines; paths are relative to the manifest."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"manifest {path} does not exist")
    base = path.parent
    samples = []
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 2:
            raise DataError(f"{path}:{lineno}: expected 'image_path label_path'")
        img_p, lab_p = (p if os.path.isabs(p) else base / p for p in parts)
        image = load_image_ppm(img_p)
        labels = load_labels_pgm(lab_p, num_classes)
        if image.shape[2:] != labels.shape:
            raise DataError(f"{path}:{lineno}: image {image.shape[2:]} and labels {labels.shape} differ")
        samples.append(Sample(image, labels, Path(parts[0]).stem))
    return samples
