"""Datasets: synthetic template blobs, IDX and CSV files."""

import csv
import struct
from dataclasses import dataclass

import numpy as np

from .errors import InputError, ParseError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass
class Dataset:
    images: np.ndarray  # (count, channels, h, w), values in [0, 1]
    labels: np.ndarray  # (count,) int64
    classes: int
    split: str = "train"

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise InputError(f"images must be (count, channels, h, w), got {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise InputError(f"{len(self.images)} images but {len(self.labels)} labels")
        if self.classes < 1:
            raise InputError("classes must be positive")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.classes):
            raise InputError(f"labels must lie in [0, {self.classes})")

    def __len__(self):
        return len(self.labels)

    @property
    def sample_shape(self):
        return self.images.shape[1:]

    def standardized(self, mean=None, std=None):
        """Per-channel standardization; pass train statistics when transforming test data."""
        if mean is None:
            mean = self.images.mean(axis=(0, 2, 3), keepdims=True)
            std = self.images.std(axis=(0, 2, 3), keepdims=True) + 1e-12
        return Dataset((self.images - mean) / std, self.labels, self.classes, self.split), mean, std


def synth_blobs(classes=10, per_class=200, channels=3, h=8, w=8, noise_sigma=0.3, seed=0,
                test_per_class=None):
    """One uniform random template per class plus Gaussian pixel noise, clipped to [0, 1].

    Returns ``(train, test)``; the test split uses fresh noise draws.
    """
    if min(classes, per_class, channels, h, w) < 1:
        raise InputError("all counts must be positive")
    test_per_class = per_class if test_per_class is None else test_per_class
    rng = np.random.default_rng(seed)
    templates = rng.uniform(0.0, 1.0, size=(classes, channels, h, w))

    def draw(count, split):
        labels = np.repeat(np.arange(classes), count)
        noise = rng.normal(0.0, noise_sigma, size=(classes * count, channels, h, w)) if noise_sigma else 0.0
        images = np.clip(templates[labels] + noise, 0.0, 1.0)
        order = rng.permutation(len(labels))
        return Dataset(images[order], labels[order], classes, split)

    return draw(per_class, "train"), draw(test_per_class, "test")


def hflip(images):
    return images[..., ::-1]


# -- IDX ------------------------------------------------------------------


def _read_exact(fh, n, what, path):
    buf = fh.read(n)
    if len(buf) != n:
        pos = fh.tell()
        raise ParseError(f"{path}: truncated {what} at byte {pos}: expected {n} bytes, got {len(buf)}")
    return buf


def _read_idx(path, magic, ndim_min):
    with open(path, "rb") as fh:
        head = _read_exact(fh, 4, "magic", path)
        (got,) = struct.unpack(">I", head)
        if got != magic:
            raise ParseError(f"{path}: bad magic 0x{got:08x} at byte 0, expected 0x{magic:08x}")
        ndim = magic & 0xFF
        dims = struct.unpack(f">{ndim}I", _read_exact(fh, 4 * ndim, "dimension header", path))
        if ndim < ndim_min:
            raise ParseError(f"{path}: expected at least {ndim_min} dimensions, got {ndim}")
        count = int(np.prod(dims))
        data = fh.read()
        if len(data) != count:
            raise ParseError(
                f"{path}: payload at byte {4 + 4 * ndim} has {len(data)} bytes, expected {count}")
    return np.frombuffer(data, dtype=np.uint8).reshape(dims)


def load_idx(images_path, labels_path, classes=None):
    """Unsigned-byte IDX image/label pair (big-endian header), pixels scaled to [0, 1]."""
    raw = _read_idx(images_path, IDX_IMAGES_MAGIC, 3)
    labels = _read_idx(labels_path, IDX_LABELS_MAGIC, 1).astype(np.int64)
    if len(raw) != len(labels):
        raise ParseError(f"{images_path}: {len(raw)} images but {labels_path} has {len(labels)} labels")
    images = raw.astype(np.float64)[:, None] / 255.0
    if classes is None:
        classes = int(labels.max()) + 1 if len(labels) else 1
    return Dataset(images, labels, classes)


def write_idx(images_path, labels_path, dataset):
    """Write a single-channel dataset as an IDX pair (pixels quantized to bytes)."""
    if dataset.images.shape[1] != 1:
        raise InputError("IDX stores single-channel images only")
    imgs = np.rint(dataset.images[:, 0] * 255.0).astype(np.uint8)
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, *imgs.shape))
        fh.write(imgs.tobytes())
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">II", IDX_LABELS_MAGIC, len(dataset.labels)))
        fh.write(dataset.labels.astype(np.uint8).tobytes())


# -- CSV ------------------------------------------------------------------


def load_csv(path, shape=None, classes=None):
    """Rows of ``label,pixel,...`` with pixel values in [0, 1].

    ``shape`` is ``(channels, h, w)``; if omitted the pixels form a square
    single-channel image.
    """
    labels, rows = [], []
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or row[0].startswith("#"):
                continue
            try:
                labels.append(int(row[0]))
                rows.append([float(v) for v in row[1:]])
            except ValueError:
                raise ParseError(f"{path}:{lineno}: non-numeric field") from None
            if len(rows[-1]) != len(rows[0]):
                raise ParseError(f"{path}:{lineno}: expected {len(rows[0])} pixels, got {len(rows[-1])}")
    if not rows:
        raise ParseError(f"{path}: no data rows")
    pixels = np.asarray(rows)
    if shape is None:
        side = int(round(np.sqrt(pixels.shape[1])))
        if side * side != pixels.shape[1]:
            raise ParseError(f"{path}: {pixels.shape[1]} pixels is not a square image; pass shape")
        shape = (1, side, side)
    if int(np.prod(shape)) != pixels.shape[1]:
        raise ParseError(f"{path}: {pixels.shape[1]} pixels do not fit shape {tuple(shape)}")
    labels = np.asarray(labels)
    if classes is None:
        classes = int(labels.max()) + 1
    return Dataset(pixels.reshape((-1, *shape)), labels, classes)


def write_csv(path, dataset):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        for label, img in zip(dataset.labels, dataset.images):
            w.writerow([int(label), *(repr(float(v)) for v in img.ravel())])
