"""Datasets: IDX and PGM/PPM files, and the synthetic shapes set."""
from __future__ import annotations

import math
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError


class IdxError(DataError):
    pass


class IdxBadMagic(IdxError):
    pass


class IdxTruncated(IdxError):
    pass


class IdxCountMismatch(IdxError):
    pass


@dataclass
class Dataset:
    images: np.ndarray          # [N, C, H, W] in [0, 1]
    labels: np.ndarray          # [N] int
    n_classes: int
    source: str = ""
    split: str = "all"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise DataError(f"images must be [N, C, H, W], got {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise DataError(f"{len(self.images)} images but {len(self.labels)} labels")
        if len(self.labels) == 0:
            raise DataError("empty dataset")
        if self.labels.min() < 0 or self.labels.max() >= self.n_classes:
            raise DataError(f"labels outside [0, {self.n_classes})")
        if self.images.min() < 0 or self.images.max() > 1:
            raise DataError("pixel values outside [0, 1]")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def shape(self) -> tuple:
        return self.images.shape[1:]

    def subset(self, index, split: str | None = None) -> "Dataset":
        index = np.asarray(index)
        return Dataset(self.images[index], self.labels[index], self.n_classes, self.source,
                       split or self.split, dict(self.meta))

    def head(self, n: int, split: str | None = None) -> "Dataset":
        return self.subset(np.arange(min(n, len(self))), split)

    def tail(self, start: int, split: str | None = None) -> "Dataset":
        return self.subset(np.arange(start, len(self)), split)


# ---------------------------------------------------------------------------
# IDX
# ---------------------------------------------------------------------------

_IDX_TYPES = {0x08: ">u1", 0x09: ">i1", 0x0B: ">i2", 0x0C: ">i4", 0x0D: ">f4", 0x0E: ">f8"}
_IDX_CODES = {"u1": 0x08, "i1": 0x09, "i2": 0x0B, "i4": 0x0C, "f4": 0x0D, "f8": 0x0E}


def write_idx(path, array: np.ndarray) -> None:
    array = np.asarray(array)
    key = array.dtype.kind + str(array.dtype.itemsize)
    if key not in _IDX_CODES:
        raise DataError(f"dtype {array.dtype} has no IDX code")
    code = _IDX_CODES[key]
    with open(path, "wb") as fh:
        fh.write(bytes([0, 0, code, array.ndim]))
        fh.write(struct.pack(f">{array.ndim}I", *array.shape))
        fh.write(array.astype(_IDX_TYPES[code]).tobytes())


def read_idx(path) -> np.ndarray:
    blob = Path(path).read_bytes()
    if len(blob) < 4:
        raise IdxTruncated(f"{path}: file shorter than the 4-byte magic")
    for off in (0, 1):
        if blob[off] != 0:
            raise IdxBadMagic(f"{path}: bad magic at offset {off} (expected 0x00, got {blob[off]:#04x})")
    code, ndim = blob[2], blob[3]
    if code not in _IDX_TYPES:
        raise IdxBadMagic(f"{path}: bad magic at offset 2 (unknown type code {code:#04x})")
    if ndim == 0:
        raise IdxBadMagic(f"{path}: bad magic at offset 3 (zero dimensions)")
    if len(blob) < 4 + 4 * ndim:
        raise IdxTruncated(f"{path}: truncated dimension table")
    shape = struct.unpack_from(f">{ndim}I", blob, 4)
    dtype = np.dtype(_IDX_TYPES[code])
    need = int(np.prod(shape)) * dtype.itemsize
    start = 4 + 4 * ndim
    if len(blob) - start < need:
        raise IdxTruncated(f"{path}: payload has {len(blob) - start} bytes, header implies {need}")
    return np.frombuffer(blob, dtype=dtype, count=int(np.prod(shape)), offset=start).reshape(shape)


def _to_unit(raw: np.ndarray) -> np.ndarray:
    if raw.dtype.kind == "u" and raw.dtype.itemsize == 1:
        return raw.astype(np.float64) / 255.0
    return raw.astype(np.float64)


def load_idx(images_path, labels_path=None, n_classes: int | None = None) -> Dataset:
    """Read paired IDX files.  Unsigned-byte pixels are scaled to [0, 1].

    ``labels_path`` defaults to the images path with "images" replaced by "labels".
    """
    images_path = str(images_path)
    if labels_path is None:
        if "images" not in os.path.basename(images_path):
            raise DataError(f"cannot infer a labels file for {images_path}")
        head, tail = os.path.split(images_path)
        labels_path = os.path.join(head, tail.replace("images", "labels"))
    raw = read_idx(images_path)
    labels = read_idx(labels_path).astype(np.int64)
    if labels.ndim != 1:
        raise IdxCountMismatch(f"{labels_path}: labels must be 1-D, got shape {labels.shape}")
    if raw.shape[0] != labels.shape[0]:
        raise IdxCountMismatch(f"{raw.shape[0]} images but {labels.shape[0]} labels")
    images = _to_unit(raw)
    if images.ndim == 3:
        images = images[:, None]
    elif images.ndim != 4:
        raise DataError(f"{images_path}: expected [N, H, W] or [N, C, H, W], got {raw.shape}")
    k = int(labels.max()) + 1 if n_classes is None else n_classes
    return Dataset(images, labels, k, source=f"idx:{os.path.basename(images_path)}")


def save_idx(dataset: Dataset, images_path, labels_path=None, exact: bool = True) -> None:
    """Write a dataset as IDX; ``exact`` stores float64 pixels, otherwise unsigned bytes."""
    if labels_path is None:
        head, tail = os.path.split(str(images_path))
        labels_path = os.path.join(head, tail.replace("images", "labels"))
    imgs = dataset.images
    payload = imgs if exact else np.round(imgs * 255).astype(np.uint8)
    write_idx(images_path, payload)
    write_idx(labels_path, dataset.labels.astype(np.uint8 if dataset.n_classes <= 256 else np.int32))


# ---------------------------------------------------------------------------
# PGM / PPM
# ---------------------------------------------------------------------------

def _pnm_tokens(blob: bytes, count: int, pos: int):
    out = []
    while len(out) < count:
        while pos < len(blob) and blob[pos:pos + 1].isspace():
            pos += 1
        if blob[pos:pos + 1] == b"#":
            while pos < len(blob) and blob[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise DataError("truncated PNM header")
        out.append(blob[start:pos])
    return out, pos


def read_pnm(path) -> np.ndarray:
    """Read P2/P3/P5/P6 into a float array [C, H, W] in [0, 1]."""
    blob = Path(path).read_bytes()
    magic = blob[:2]
    if magic not in (b"P2", b"P3", b"P5", b"P6"):
        raise DataError(f"{path}: not a PGM/PPM file (magic {magic!r})")
    channels = 3 if magic in (b"P3", b"P6") else 1
    (w, h, maxval), pos = _pnm_tokens(blob, 3, 2)
    w, h, maxval = int(w), int(h), int(maxval)
    n = w * h * channels
    if magic in (b"P5", b"P6"):
        pos += 1
        dt = ">u1" if maxval < 256 else ">u2"
        if len(blob) - pos < n * np.dtype(dt).itemsize:
            raise DataError(f"{path}: truncated pixel data")
        data = np.frombuffer(blob, dtype=dt, count=n, offset=pos).astype(np.float64)
    else:
        vals, _ = _pnm_tokens(blob, n, pos)
        data = np.array([int(v) for v in vals], dtype=np.float64)
    img = data.reshape(h, w, channels).transpose(2, 0, 1) / maxval
    return img


def write_pnm(path, image: np.ndarray) -> None:
    """Write [C, H, W] (C = 1 or 3) or [H, W] values in [0, 1] as binary PGM/PPM."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 2:
        image = image[None]
    c, h, w = image.shape
    if c not in (1, 3):
        raise DataError(f"PNM needs 1 or 3 channels, got {c}")
    px = np.round(np.clip(image, 0, 1) * 255).astype(np.uint8).transpose(1, 2, 0)
    with open(path, "wb") as fh:
        fh.write(b"P5\n" if c == 1 else b"P6\n")
        fh.write(f"{w} {h}\n255\n".encode())
        fh.write(px.tobytes())


def write_pgm_raw(path, gray: np.ndarray) -> None:
    """Write an already-quantized uint8 [H, W] array as PGM."""
    h, w = gray.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode())
        fh.write(np.asarray(gray, dtype=np.uint8).tobytes())


def load_image_dir(path) -> tuple[np.ndarray, list[str]]:
    files = sorted(p for p in Path(path).iterdir() if p.suffix.lower() in (".pgm", ".ppm", ".pnm"))
    if not files:
        raise DataError(f"no PGM/PPM files in {path}")
    imgs = [read_pnm(p) for p in files]
    if len({im.shape for im in imgs}) != 1:
        raise DataError(f"images in {path} differ in shape")
    return np.stack(imgs), [p.name for p in files]


# ---------------------------------------------------------------------------
# synthetic shapes
# ---------------------------------------------------------------------------

SHAPES = ("disk", "ring", "cross", "square", "slash", "backslash")


def _segment_distance(px, py, cx, cy, angle, half_len):
    dx, dy = math.cos(angle), math.sin(angle)
    qx, qy = px - cx, py - cy
    a = np.clip(qx * dx + qy * dy, -half_len, half_len)
    return np.hypot(qx - a * dx, qy - a * dy)


def _shape_sdf(name, px, py, cx, cy, r, t, jitter):
    if name == "disk":
        return np.hypot(px - cx, py - cy) - r
    if name == "ring":
        return np.abs(np.hypot(px - cx, py - cy) - r) - t / 2
    if name == "cross":
        d1 = _segment_distance(px, py, cx, cy, jitter, r)
        d2 = _segment_distance(px, py, cx, cy, jitter + math.pi / 2, r)
        return np.minimum(d1, d2) - t / 2
    if name == "square":
        c, s = math.cos(jitter), math.sin(jitter)
        u, v = (px - cx) * c + (py - cy) * s, -(px - cx) * s + (py - cy) * c
        return np.abs(np.maximum(np.abs(u), np.abs(v)) - 0.8 * r) - t / 2
    # y grows downwards: "/" rises to the right, i.e. angle -45 degrees
    base = -math.pi / 4 if name == "slash" else math.pi / 4
    return _segment_distance(px, py, cx, cy, base + jitter, 1.2 * r) - t / 2


def render_shape(name: str, size: int, rng: np.random.Generator) -> np.ndarray:
    py, px = np.meshgrid(np.arange(size, dtype=np.float64), np.arange(size, dtype=np.float64),
                         indexing="ij")
    centre = (size - 1) / 2
    shift = size / 8
    cx, cy = centre + rng.uniform(-shift, shift), centre + rng.uniform(-shift, shift)
    r = size * rng.uniform(0.2, 0.3)
    t = rng.uniform(1.2, 2.0) * size / 16
    jitter = rng.uniform(-0.25, 0.25)
    intensity = rng.uniform(0.6, 1.0)
    sdf = _shape_sdf(name, px, py, cx, cy, r, t, jitter)
    return intensity * np.clip(0.5 - sdf, 0.0, 1.0)


def synth_dataset(n_per_class: int, classes: int = 6, size: int = 16, seed: int = 0,
                  noise: float = 0.03) -> Dataset:
    """Class-balanced parametric shapes with jittered position, scale and intensity."""
    if not 2 <= classes <= len(SHAPES):
        raise ValueError(f"classes must be in [2, {len(SHAPES)}], got {classes}")
    if n_per_class < 1 or size < 8:
        raise ValueError("need n_per_class >= 1 and size >= 8")
    rng = np.random.default_rng(seed)
    labels = np.repeat(np.arange(classes), n_per_class)
    rng.shuffle(labels)
    images = np.empty((len(labels), 1, size, size))
    for i, lab in enumerate(labels):
        img = render_shape(SHAPES[lab], size, rng)
        if noise > 0:
            img = img + noise * rng.standard_normal(img.shape)
        images[i, 0] = np.clip(img, 0.0, 1.0)
    return Dataset(images, labels, classes, source=f"synth:{classes}x{n_per_class}@{size}/seed{seed}",
                   meta={"n_per_class": n_per_class, "size": size, "seed": seed, "noise": noise})
