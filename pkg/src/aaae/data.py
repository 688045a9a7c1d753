"""Dataset ingestion, preprocessing and synthetic point data."""

from __future__ import annotations

import csv
import gzip
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from aaae.errors import ConfigurationError, IngestionError, InputError

DATA_ROOT_ENV = "AAAE_DATA_ROOT"
DEBUG_ENV = "AAAE_DEBUG"
RESIZE_FILTER = "bilinear"
FACE_CROP = 178
IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".gif", ".webp"}

_IDX_DTYPES = {
    0x08: np.uint8,
    0x09: np.int8,
    0x0B: np.dtype(">i2"),
    0x0C: np.dtype(">i4"),
    0x0D: np.dtype(">f4"),
    0x0E: np.dtype(">f8"),
}


@dataclass
class AttributeTable:
    names: list[str]
    values: np.ndarray  # (n, K) of {0, 1}
    filenames: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.int8)
        if self.values.ndim != 2 or self.values.shape[1] != len(self.names):
            raise InputError("attribute table must be (n, len(names))")
        if not np.isin(self.values, (0, 1)).all():
            raise InputError("attribute entries must be 0 or 1")

    def __len__(self):
        return len(self.values)

    def column(self, name: str) -> np.ndarray:
        try:
            return self.values[:, self.names.index(name)]
        except ValueError:
            raise InputError(f"unknown attribute {name!r}") from None

    def take(self, idx) -> AttributeTable:
        idx = np.asarray(idx)
        files = [self.filenames[i] for i in idx] if self.filenames else []
        return AttributeTable(list(self.names), self.values[idx], files)


class Dataset:
    """In-memory samples (images in [-1, 1] or points) with aligned side data.

    Labels and attributes are permuted jointly with the samples.
    """

    def __init__(self, data, labels=None, attributes: AttributeTable | None = None, name="dataset"):
        self.data = torch.as_tensor(data, dtype=torch.float32)
        self.labels = None if labels is None else np.asarray(labels)
        self.attributes = attributes
        self.name = name
        n = len(self.data)
        if self.labels is not None and len(self.labels) != n:
            raise InputError("labels must align with samples")
        if attributes is not None and len(attributes) != n:
            raise InputError("attribute rows must align with samples")

    def __len__(self):
        return len(self.data)

    @property
    def sample_shape(self) -> tuple[int, ...]:
        return tuple(self.data.shape[1:])

    def take(self, idx) -> Dataset:
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(
            self.data[torch.from_numpy(idx)],
            None if self.labels is None else self.labels[idx],
            None if self.attributes is None else self.attributes.take(idx),
            self.name,
        )

    def split(self, fraction: float, seed: int) -> tuple[Dataset, Dataset]:
        """Seeded random split into (train, held-out) with ``fraction`` held out."""
        if not 0 <= fraction < 1:
            raise ConfigurationError("validation fraction must be in [0, 1)")
        perm = np.random.default_rng(seed).permutation(len(self))
        n_val = int(round(fraction * len(self)))
        return self.take(np.sort(perm[n_val:])), self.take(np.sort(perm[:n_val]))

    def batches(self, batch_size: int, generator: torch.Generator | None = None, shuffle=True):
        """Yield sample batches; the final partial batch is kept."""
        n = len(self)
        order = torch.randperm(n, generator=generator) if shuffle else torch.arange(n)
        check = bool(os.environ.get(DEBUG_ENV))
        for start in range(0, n, batch_size):
            batch = self.data[order[start:start + batch_size]]
            if check and batch.dim() == 4:
                assert_pixel_range(batch)
            yield batch


def assert_pixel_range(x: torch.Tensor) -> None:
    lo, hi = float(x.min()), float(x.max())
    if lo < -1.0 or hi > 1.0:
        raise InputError(f"pixel values outside [-1, 1]: min {lo}, max {hi}")


def bytes_to_symmetric(u8: np.ndarray) -> np.ndarray:
    """Map byte pixels 0..255 affinely onto [-1, 1]."""
    return np.asarray(u8, dtype=np.float32) / 127.5 - 1.0


def resolve_path(path: str | os.PathLike) -> Path:
    p = Path(path).expanduser()
    if not p.is_absolute() and os.environ.get(DATA_ROOT_ENV):
        p = Path(os.environ[DATA_ROOT_ENV]) / p
    return p


def read_idx(path: str | os.PathLike) -> np.ndarray:
    """Read a big-endian IDX array (optionally gzip-compressed)."""
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    try:
        with opener(path, "rb") as fh:
            raw = fh.read()
    except (OSError, EOFError) as exc:
        raise IngestionError(f"{path}: {exc}") from exc
    if len(raw) < 4 or raw[0] != 0 or raw[1] != 0 or raw[2] not in _IDX_DTYPES:
        raise IngestionError(f"{path}: not an IDX file")
    dtype, ndim = np.dtype(_IDX_DTYPES[raw[2]]), raw[3]
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise IngestionError(f"{path}: truncated IDX header")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    count = int(np.prod(dims)) if dims else 1
    if len(raw) - header != count * dtype.itemsize:
        raise IngestionError(f"{path}: payload size {len(raw) - header} != expected {count * dtype.itemsize}")
    return np.frombuffer(raw, dtype=dtype, offset=header).reshape(dims)


def write_idx(path: str | os.PathLike, array: np.ndarray) -> None:
    array = np.asarray(array)
    codes = {np.dtype(v).newbyteorder("="): k for k, v in _IDX_DTYPES.items()}
    code = codes.get(array.dtype.newbyteorder("="))
    if code is None:
        raise InputError(f"dtype {array.dtype} not representable in IDX")
    header = struct.pack(">BBBB", 0, 0, code, array.ndim) + struct.pack(f">{array.ndim}I", *array.shape)
    opener = gzip.open if str(path).endswith(".gz") else open
    with opener(path, "wb") as fh:
        fh.write(header + array.astype(array.dtype.newbyteorder(">")).tobytes())


def lift_grayscale(u8: np.ndarray, resolution=32, channels=3) -> np.ndarray:
    """Zero-pad (n, h, w) byte images to ``resolution`` and replicate channels.

    Padding uses byte 0 (the background), i.e. -1 after normalization.
    """
    n, h, w = u8.shape
    if h > resolution or w > resolution:
        raise InputError(f"images {h}x{w} larger than target {resolution}")
    top, left = (resolution - h) // 2, (resolution - w) // 2
    out = np.zeros((n, resolution, resolution), dtype=np.uint8)
    out[:, top:top + h, left:left + w] = u8
    img = bytes_to_symmetric(out)[:, None]
    return np.repeat(img, channels, axis=1)


def _resize(image: np.ndarray, size: int) -> np.ndarray:
    """Bilinear resize of an (H, W[, C]) array to ``size`` x ``size``."""
    arr = np.asarray(image, dtype=np.float32)
    squeeze = arr.ndim == 2
    if squeeze:
        arr = arr[..., None]
    if arr.shape[:2] == (size, size):
        out = arr.copy()
    else:
        t = torch.from_numpy(np.ascontiguousarray(arr.transpose(2, 0, 1)))[None]
        t = F.interpolate(t, size=(size, size), mode="bilinear", align_corners=False, antialias=True)
        out = t[0].numpy().transpose(1, 2, 0)
    return out[..., 0] if squeeze else out


def center_crop(image: np.ndarray, size: int) -> np.ndarray:
    h, w = image.shape[:2]
    if h < size or w < size:
        raise InputError(f"image {h}x{w} smaller than crop {size}x{size}")
    top, left = (h - size) // 2, (w - size) // 2
    return image[top:top + size, left:left + size]


def preprocess_face(image: np.ndarray, size=64) -> np.ndarray:
    """Center-crop to 178x178 then bilinear-resize to ``size``; returns float32 HWC."""
    return _resize(center_crop(np.asarray(image), FACE_CROP), size)


def preprocess_flower(image: np.ndarray, size=64) -> np.ndarray:
    """Direct bilinear resize to ``size`` (aspect ratio not preserved)."""
    return _resize(np.asarray(image), size)


PREPROCESSORS = {"face": preprocess_face, "flower": preprocess_flower, "none": None}


def read_attribute_csv(path: str | os.PathLike) -> AttributeTable:
    """``filename, attr1..attrK`` with 0/1 entries (CelebA's -1 is mapped to 0)."""
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise IngestionError(f"{path}: {exc}") from exc
    if not rows:
        raise IngestionError(f"{path}: empty attribute table")
    names = [c.strip() for c in rows[0][1:]]
    files, vals = [], []
    for line, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        try:
            v = [int(c) for c in row[1:]]
        except ValueError as exc:
            raise IngestionError(f"{path}:{line}: {exc}") from exc
        if len(v) != len(names):
            raise IngestionError(f"{path}:{line}: expected {len(names)} attributes, got {len(v)}")
        files.append(row[0].strip())
        vals.append([1 if x == 1 else 0 for x in v])
    return AttributeTable(names, np.array(vals, dtype=np.int8).reshape(-1, len(names)), files)


def load_image_folder(directory, preprocess="none", resolution=64, attributes=None, limit=None) -> Dataset:
    from PIL import Image

    directory = resolve_path(directory)
    if not directory.is_dir():
        raise IngestionError(f"{directory}: not a directory")
    files = sorted(p for p in directory.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    table = None
    if attributes is not None:
        table = read_attribute_csv(resolve_path(attributes))
        by_name = {p.name: p for p in files}
        missing = [f for f in table.filenames if f not in by_name]
        if missing:
            raise IngestionError(f"attribute rows without images: {missing[:5]}")
        files = [by_name[f] for f in table.filenames]
    if limit is not None:
        files = files[:limit]
        table = table.take(np.arange(len(files))) if table is not None else None
    if not files:
        raise IngestionError(f"{directory}: no images found")
    fn = PREPROCESSORS[preprocess] or (lambda im: _resize(im, resolution))
    out = []
    for p in files:
        try:
            with Image.open(p) as im:
                arr = np.asarray(im.convert("RGB"))
        except OSError as exc:
            raise IngestionError(f"{p}: {exc}") from exc
        out.append(fn(arr))
    imgs = bytes_to_symmetric(np.stack(out)).transpose(0, 3, 1, 2)
    return Dataset(np.clip(imgs, -1.0, 1.0), attributes=table, name=directory.name)


def make_ring_gaussians(n_modes=8, radius=2.0, sigma=0.05, n=10_000, seed=0) -> Dataset:
    """Equal-weight 2-D Gaussian mixture with means at angles ``2*pi*i/n_modes``."""
    if n_modes < 1 or radius < 0 or sigma <= 0 or n < 1:
        raise ConfigurationError("need n_modes >= 1, radius >= 0, sigma > 0, n >= 1")
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, n_modes, size=n)
    centers = ring_centers(n_modes, radius)
    points = centers[labels] + sigma * rng.standard_normal((n, 2))
    return Dataset(points.astype(np.float32), labels=labels, name=f"ring-{n_modes}")


def ring_centers(n_modes: int, radius: float) -> np.ndarray:
    angles = 2 * np.pi * np.arange(n_modes) / n_modes
    return radius * np.stack([np.cos(angles), np.sin(angles)], axis=1)


@dataclass
class DatasetSpec:
    kind: str = "idx-archive"
    path: str = "mnist"
    split: str = "train"
    resolution: int = 32
    channels: int = 3
    crop: str = "none"  # idx: padding is implied; image-folder: face | flower | none
    normalization: str = "symmetric"
    attributes: str | None = None
    limit: int | None = None
    offset: int = 0
    n_modes: int = 8
    radius: float = 2.0
    sigma: float = 0.05
    n: int = 10_000
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("image-folder", "idx-archive", "synthetic-ring"):
            raise ConfigurationError(f"unknown dataset kind {self.kind!r}")
        if self.kind != "synthetic-ring" and self.resolution not in (32, 64):
            raise ConfigurationError("image resolution must be 32 or 64")
        if self.normalization != "symmetric":
            raise ConfigurationError("only symmetric [-1, 1] normalization is supported")


def _idx_files(root: Path, split: str) -> tuple[Path, Path | None]:
    prefix = "train" if split == "train" else "t10k"
    for suffix in (".gz", ""):
        img = root / f"{prefix}-images-idx3-ubyte{suffix}"
        if img.exists():
            lab = root / f"{prefix}-labels-idx1-ubyte{suffix}"
            return img, lab if lab.exists() else None
    raise IngestionError(f"{root}: no {prefix}-images-idx3-ubyte[.gz] found")


def load_dataset(spec: DatasetSpec) -> Dataset:
    if spec.kind == "synthetic-ring":
        return make_ring_gaussians(spec.n_modes, spec.radius, spec.sigma, spec.n, spec.seed)
    if spec.kind == "image-folder":
        ds = load_image_folder(spec.path, spec.crop, spec.resolution, spec.attributes,
                               None if spec.limit is None else spec.offset + spec.limit)
        return ds.take(np.arange(spec.offset, len(ds)))
    root = resolve_path(spec.path)
    img_path, lab_path = (root, None) if root.is_file() else _idx_files(root, spec.split)
    raw = read_idx(img_path)
    labels = read_idx(lab_path) if lab_path is not None else None
    stop = None if spec.limit is None else spec.offset + spec.limit
    raw = raw[spec.offset:stop]
    labels = None if labels is None else labels[spec.offset:stop].astype(np.int64)
    if raw.ndim != 3:
        raise IngestionError(f"{img_path}: expected (n, h, w) images, got {raw.shape}")
    imgs = lift_grayscale(raw, spec.resolution, spec.channels)
    return Dataset(imgs, labels=labels, name=f"{root.name}-{spec.split}")
