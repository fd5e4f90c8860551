"""Dataset ingestion, synthetic data, and preprocessing.

CIFAR-10 binary batches (3073-byte records: one label byte plus 3072
channel-major pixel bytes) load into [n, 3, 32, 32] float arrays in
[0, 1]. The synthetic generator renders per-class Gaussian-bump
prototypes plus pixel noise, which gives a desk-scale task that is
linearly separable at low noise. Preprocessing follows per-image
contrast normalization with whitening fitted on the training split
only.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .errors import DataError
from .numerics import RngStream, default_dtype

CIFAR_RECORD_BYTES = 3073
CIFAR_CLASSES = 10


@dataclass
class Dataset:
    images: np.ndarray  # [n, c, h, w]
    labels: np.ndarray  # [n] integer class ids
    classes: int

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise DataError(f"images must be [n, c, h, w], got shape {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise DataError(
                f"{len(self.images)} images but {len(self.labels)} labels"
            )
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.classes):
            raise DataError("labels outside [0, classes)")

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx) -> "Dataset":
        return Dataset(self.images[idx], self.labels[idx], self.classes)


def split_dataset(ds: Dataset, n_train: int, n_valid: int):
    """Index-based split: first n_train for training, last n_valid held out."""
    if n_train + n_valid > len(ds):
        raise DataError(f"cannot split {len(ds)} examples into {n_train}+{n_valid}")
    train = ds.subset(slice(0, n_train))
    valid = ds.subset(slice(len(ds) - n_valid, len(ds)))
    return train, valid


def load_cifar10_binary(path) -> Dataset:
    """Read one or more CIFAR-10 binary batch files.

    ``path`` may be a single file, a directory (all ``*.bin`` files in
    sorted order), or a sequence of files.
    """
    if isinstance(path, (str, os.PathLike)):
        if os.path.isdir(path):
            files = sorted(
                os.path.join(path, f) for f in os.listdir(path) if f.endswith(".bin")
            )
            if not files:
                raise DataError(f"no .bin files in {path}")
        else:
            files = [os.fspath(path)]
    else:
        files = [os.fspath(p) for p in path]
    chunks, labels = [], []
    for f in files:
        raw = np.fromfile(f, dtype=np.uint8)
        if raw.size == 0:
            raise DataError(f"empty dataset file: {f}")
        if raw.size % CIFAR_RECORD_BYTES != 0:
            raise DataError(
                f"truncated file {f}: {raw.size} bytes is not a multiple of {CIFAR_RECORD_BYTES}"
            )
        rec = raw.reshape(-1, CIFAR_RECORD_BYTES)
        lab = rec[:, 0]
        if lab.max() >= CIFAR_CLASSES:
            raise DataError(f"label byte {int(lab.max())} out of range in {f}")
        pix = rec[:, 1:].reshape(-1, 3, 32, 32)
        chunks.append(pix)
        labels.append(lab)
    images = (np.concatenate(chunks).astype(default_dtype()) / 255.0)
    return Dataset(images, np.concatenate(labels), CIFAR_CLASSES)


def make_synthetic(classes: int, per_class: int, image_size: int = 16, seed: int = 0,
                   noise: float = 0.25, channels: int = 3) -> Dataset:
    """Gaussian-bump class prototypes plus per-pixel noise, exactly balanced.

    Deterministic per seed; at noise 0 a nearest-prototype classifier is
    perfect by construction.
    """
    if classes < 1 or per_class < 1 or image_size < 1 or channels < 1:
        raise DataError("classes, per_class, image_size, channels must all be >= 1")
    root = RngStream(seed)
    proto_rng = root.fork(0)
    yy, xx = np.mgrid[0:image_size, 0:image_size].astype(np.float64)
    protos = np.zeros((classes, channels, image_size, image_size))
    for c in range(classes):
        for ch in range(channels):
            for _ in range(3):  # three bumps per channel
                cy, cx = proto_rng.uniform(2) * (0.6 * image_size) + 0.2 * image_size
                sigma = (proto_rng.uniform() * 0.15 + 0.10) * image_size
                amp = proto_rng.uniform() + 0.5
                protos[c, ch] += amp * np.exp(
                    -((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma**2)
                )
    labels = np.repeat(np.arange(classes), per_class)
    images = protos[labels]
    if noise > 0:
        images = images + noise * root.fork(1).normal(images.shape)
    order = root.fork(2).permutation(len(labels))
    return Dataset(
        images[order].astype(default_dtype()),
        labels[order],
        classes,
    )


def contrast_normalize(images, scale: float = 55.0, eps: float = 1e-8) -> np.ndarray:
    """Per image: subtract its mean, divide by max(std, eps), multiply by scale."""
    images = np.asarray(images)
    single = images.ndim == 3
    imb = images[None] if single else images
    flat = imb.reshape(len(imb), -1).astype(np.float64)
    centered = flat - flat.mean(axis=1, keepdims=True)
    std = centered.std(axis=1, keepdims=True)
    out = (scale * centered / np.maximum(std, eps)).astype(images.dtype)
    out = out.reshape(imb.shape)
    return out[0] if single else out


@dataclass
class PreprocessModel:
    """Contrast-normalization settings plus whitening fitted on training data."""

    mean: np.ndarray        # [d] training mean of flattened images
    whitening: np.ndarray   # [d, d] symmetric ZCA matrix
    zca_eps: float
    gcn_scale: float = 55.0
    gcn_eps: float = 1e-8


def zca_fit(train_images, eps: float = 1e-5) -> PreprocessModel:
    """Whitening transform from the eigendecomposition of the training covariance."""
    imgs = np.asarray(train_images)
    if imgs.ndim != 4 or len(imgs) < 2:
        raise DataError("zca_fit needs a batch [n, c, h, w] of at least 2 images")
    flat = imgs.reshape(len(imgs), -1).astype(np.float64)
    mean = flat.mean(axis=0)
    centered = flat - mean
    cov = centered.T @ centered / len(flat)
    s, U = np.linalg.eigh(cov)
    s = np.maximum(s, 0.0)  # clip eigenvalue roundoff
    W = (U * (1.0 / np.sqrt(s + eps))) @ U.T
    W = 0.5 * (W + W.T)  # enforce exact symmetry
    return PreprocessModel(mean=mean, whitening=W, zca_eps=eps)


def zca_apply(model: PreprocessModel, images) -> np.ndarray:
    """Subtract the training mean and multiply by the whitening matrix."""
    images = np.asarray(images)
    single = images.ndim == 3
    imb = images[None] if single else images
    flat = imb.reshape(len(imb), -1).astype(np.float64)
    if flat.shape[1] != model.mean.shape[0]:
        raise DataError(
            f"image dim {flat.shape[1]} does not match fitted dim {model.mean.shape[0]}"
        )
    out = ((flat - model.mean) @ model.whitening).astype(images.dtype).reshape(imb.shape)
    return out[0] if single else out


def fit_preprocess(train_images, gcn_scale: float = 55.0, gcn_eps: float = 1e-8,
                   zca_eps: float = 1e-5) -> PreprocessModel:
    """Contrast-normalize the training images, then fit whitening on the result."""
    normalized = contrast_normalize(train_images, scale=gcn_scale, eps=gcn_eps)
    model = zca_fit(normalized, eps=zca_eps)
    model.gcn_scale = gcn_scale
    model.gcn_eps = gcn_eps
    return model


def apply_preprocess(model: PreprocessModel, images) -> np.ndarray:
    normalized = contrast_normalize(images, scale=model.gcn_scale, eps=model.gcn_eps)
    return zca_apply(model, normalized)


def hflip(images) -> np.ndarray:
    return np.asarray(images)[..., ::-1].copy()


def shift_image(img, dy: int, dx: int) -> np.ndarray:
    """Integer translation with zero fill; in-frame pixels are copied bit-exactly.

    Positive dy moves content toward larger row indices (down), positive
    dx toward larger columns (right).
    """
    img = np.asarray(img)
    c, h, w = img.shape
    if abs(dy) >= h or abs(dx) >= w:
        raise DataError(f"shift ({dy}, {dx}) outside image {h}x{w}")
    out = np.zeros_like(img)
    y_dst = slice(max(dy, 0), h + min(dy, 0))
    y_src = slice(max(-dy, 0), h - max(dy, 0))
    x_dst = slice(max(dx, 0), w + min(dx, 0))
    x_src = slice(max(-dx, 0), w - max(dx, 0))
    out[:, y_dst, x_dst] = img[:, y_src, x_src]
    return out


def augment(images, labels, rng: RngStream, max_shift: int, flip: bool = True):
    """Random integer translations (zero fill) and optional horizontal flips."""
    images = np.asarray(images)
    n, c, h, w = images.shape
    if max_shift >= w or max_shift >= h:
        raise DataError(f"max_shift {max_shift} too large for {h}x{w} images")
    if max_shift > 0:
        shifts = rng.integers(-max_shift, max_shift + 1, size=(n, 2))
    else:
        shifts = np.zeros((n, 2), dtype=np.int64)
    out = np.empty_like(images)
    for i in range(n):
        out[i] = shift_image(images[i], int(shifts[i, 0]), int(shifts[i, 1]))
    if flip:
        do_flip = rng.uniform(n) < 0.5
        if np.any(do_flip):
            out[do_flip] = out[do_flip][..., ::-1]
    return out, np.asarray(labels).copy()
