"""Datasets: IDX (MNIST-format) files and a seeded synthetic prototype task."""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import FormatError, InputError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass
class Dataset:
    x_train: np.ndarray
    y_train: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray
    classes: int
    hflip: bool = False

    @property
    def image_shape(self):
        return self.x_train.shape[1:]


def read_idx(path, expected_magic: int) -> np.ndarray:
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 4:
        raise FormatError(f"{path}: too short for an IDX header")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expected_magic:
        raise FormatError(f"{path}: IDX magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    ndim = magic & 0xFF
    hdr = 4 + 4 * ndim
    if len(raw) < hdr:
        raise FormatError(f"{path}: truncated IDX header")
    dims = struct.unpack(f">{ndim}I", raw[4:hdr])
    count = int(np.prod(dims))
    if len(raw) - hdr != count:
        raise FormatError(f"{path}: payload has {len(raw) - hdr} bytes, header promises {count}")
    return np.frombuffer(raw, dtype=np.uint8, offset=hdr).reshape(dims)


def write_idx(path, array: np.ndarray):
    array = np.asarray(array, dtype=np.uint8)
    magic = 0x00000800 | array.ndim
    with open(path, "wb") as f:
        f.write(struct.pack(">I", magic))
        f.write(struct.pack(f">{array.ndim}I", *array.shape))
        f.write(array.tobytes())


def load_idx(path_images, path_labels, classes: int = 10):
    """Return ``(images N x 1 x H x W in [0, 1], labels int64)``."""
    images = read_idx(path_images, IDX_IMAGES_MAGIC)
    labels = read_idx(path_labels, IDX_LABELS_MAGIC)
    if images.ndim != 3:
        raise FormatError(f"{path_images}: expected N x H x W images, got {images.shape}")
    if labels.ndim != 1:
        raise FormatError(f"{path_labels}: expected a 1-D label vector")
    if images.shape[0] != labels.shape[0]:
        raise FormatError(f"{images.shape[0]} images but {labels.shape[0]} labels")
    if labels.size and labels.max() >= classes:
        raise InputError(f"label {int(labels.max())} outside [0, {classes - 1}]")
    x = (images.astype(np.float32) / np.float32(255.0))[:, None]
    return x, labels.astype(np.int64)


def _smooth(img):
    k = np.array([1.0, 2.0, 1.0]) / 4.0
    for axis in (-1, -2):
        pad = [(0, 0)] * img.ndim
        pad[axis] = (1, 1)
        p = np.pad(img, pad, mode="wrap")
        n = img.shape[axis]
        img = sum(w * np.take(p, range(i, i + n), axis=axis) for i, w in enumerate(k))
    return img


@dataclass
class SynthData:
    x: np.ndarray
    y: np.ndarray
    prototypes: np.ndarray


def synth_dataset(classes: int, per_class: int, dim: int, noise: float, seed: int, channels: int = 1) -> SynthData:
    """Smooth, mirror-symmetric Gaussian prototypes plus i.i.d. pixel noise.

    Samples are ordered class by class (``per_class`` each).  At ``noise == 0``
    every sample equals its prototype, so nearest-prototype is exact.
    """
    if classes < 2:
        raise InputError("need at least two classes")
    rng = np.random.default_rng(seed)
    protos = rng.standard_normal((classes, channels, dim, dim))
    for _ in range(2):
        protos = _smooth(protos)
    protos = 0.5 * (protos + protos[..., ::-1])
    protos /= np.sqrt(np.mean(protos ** 2, axis=(1, 2, 3), keepdims=True))
    y = np.repeat(np.arange(classes), per_class)
    x = protos[y] + noise * rng.standard_normal((y.size, channels, dim, dim))
    return SynthData(x.astype(np.float32), y.astype(np.int64), protos.astype(np.float32))


def normalize(x_train, x_test):
    """Zero-mean unit-variance per channel using training-split statistics."""
    axes = (0, 2, 3)
    mu = x_train.mean(axis=axes, keepdims=True, dtype=np.float64)
    sd = x_train.std(axis=axes, keepdims=True, dtype=np.float64)
    sd = np.where(sd > 0, sd, 1.0)
    f = lambda x: ((x - mu) / sd).astype(np.float32)  # noqa: E731
    return f(x_train), f(x_test)


def build_dataset(dc) -> Dataset:
    """Materialize the dataset described by a :class:`~metaquant.config.DataConfig`."""
    if dc.kind == "synthetic":
        s = synth_dataset(dc.classes, dc.train_per_class + dc.test_per_class, dc.dim, dc.noise, dc.seed)
        per = dc.train_per_class + dc.test_per_class
        pos = np.arange(s.y.size) % per
        tr, te = pos < dc.train_per_class, pos >= dc.train_per_class
        xtr, ytr, xte, yte = s.x[tr], s.y[tr], s.x[te], s.y[te]
    elif dc.kind == "idx":
        xtr, ytr = load_idx(dc.train_images, dc.train_labels, dc.classes)
        xte, yte = load_idx(dc.test_images, dc.test_labels, dc.classes)
    else:
        raise InputError(f"unknown dataset kind {dc.kind!r}")
    if dc.train_limit:
        xtr, ytr = xtr[: dc.train_limit], ytr[: dc.train_limit]
    if dc.test_limit:
        xte, yte = xte[: dc.test_limit], yte[: dc.test_limit]
    xtr, xte = normalize(xtr, xte)
    return Dataset(xtr, ytr, xte, yte, dc.classes, hflip=dc.hflip)


def iterate_batches(n: int, batch_size: int, rng: np.random.Generator | None):
    order = np.arange(n) if rng is None else rng.permutation(n)
    for s in range(0, n, batch_size):
        yield order[s:s + batch_size]
