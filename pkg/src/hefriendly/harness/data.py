"""Desk-scale datasets: a synthetic 3-class image set and .npz file loading."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from scipy import ndimage

from ..errors import ConfigError, DataError


@dataclass
class DatasetSpec:
    """Where the data comes from, how it is split, and how training batches are augmented.

    ``name`` is either ``"shapes"`` (generated on the fly) or a path to an
    ``.npz`` file holding ``X_train, y_train, X_val, y_val, X_test, y_test``.
    """

    name: str = "shapes"
    train_size: int = 3000
    val_size: int = 300
    test_size: int = 300
    num_classes: int = 3
    image_shape: tuple = (1, 16, 16)
    noise: float = 0.35
    hflip: bool = False
    rotation: float = 0.0
    normalize: bool = True
    resize: Optional[tuple] = None
    extra: dict = field(default_factory=dict)

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetSpec":
        d = dict(d or {})
        aug = d.pop("augment", {}) or {}
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown dataset keys: {sorted(unknown)}")
        for key in ("hflip", "rotation", "normalize", "resize"):
            if key in aug:
                d[key] = aug[key]
        if "image_shape" in d:
            d["image_shape"] = tuple(d["image_shape"])
        if d.get("resize") is not None:
            d["resize"] = tuple(d["resize"])
        return cls(**d)

    @property
    def augments(self) -> bool:
        return bool(self.hflip or self.rotation)


@dataclass
class Split:
    X: np.ndarray
    y: np.ndarray

    def __len__(self):
        return len(self.y)

    def class_counts(self, num_classes: int) -> list:
        return np.bincount(self.y, minlength=num_classes).tolist()

    def batches(self, batch_size: int, rng: Optional[np.random.Generator] = None):
        order = np.arange(len(self)) if rng is None else rng.permutation(len(self))
        for start in range(0, len(order), batch_size):
            idx = order[start:start + batch_size]
            yield self.X[idx], self.y[idx]


# -- synthetic generator -------------------------------------------------------


def _draw(kind: int, size: int, rng: np.random.Generator) -> np.ndarray:
    """One clean glyph: 0 = box outline, 1 = plus sign, 2 = ring."""
    img = np.zeros((size, size))
    r = int(rng.integers(3, size // 2 - 1))
    cy = int(rng.integers(r, size - r))
    cx = int(rng.integers(r, size - r))
    if kind == 0:
        img[cy - r, cx - r:cx + r + 1] = 1
        img[cy + r, cx - r:cx + r + 1] = 1
        img[cy - r:cy + r + 1, cx - r] = 1
        img[cy - r:cy + r + 1, cx + r] = 1
    elif kind == 1:
        img[cy, cx - r:cx + r + 1] = 1
        img[cy - r:cy + r + 1, cx] = 1
    else:
        yy, xx = np.mgrid[:size, :size]
        d = np.hypot(yy - cy, xx - cx)
        img[np.abs(d - r) < 0.7] = 1
    return img


def make_shapes(n: int, image_shape=(1, 16, 16), noise: float = 0.35, num_classes: int = 3,
                rng: Optional[np.random.Generator] = None):
    """Balanced noisy glyph images with random position, size and contrast."""
    if num_classes != 3:
        raise ConfigError("the shapes generator has exactly 3 classes")
    c, h, w = image_shape
    if h != w:
        raise ConfigError("the shapes generator needs square images")
    rng = rng or np.random.default_rng()
    y = np.arange(n) % num_classes
    rng.shuffle(y)
    X = np.empty((n, c, h, w))
    for i, label in enumerate(y):
        glyph = _draw(int(label), h, rng) * rng.uniform(0.5, 1.5)
        X[i] = glyph[None] + noise * rng.standard_normal((c, h, w))
    return X, y.astype(np.int64)


# -- augmentation ----------------------------------------------------------------


class Augmenter:
    """Random horizontal flips and small rotations for NCHW batches."""

    def __init__(self, hflip: bool = False, rotation: float = 0.0):
        self.hflip = hflip
        self.rotation = float(rotation)

    def __call__(self, X: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        X = X.copy()
        if self.hflip:
            flip = rng.random(len(X)) < 0.5
            X[flip] = X[flip, :, :, ::-1]
        if self.rotation:
            angles = rng.uniform(-self.rotation, self.rotation, len(X))
            for i, angle in enumerate(angles):
                X[i] = ndimage.rotate(X[i], angle, axes=(1, 2), reshape=False, order=1, mode="nearest")
        return X


# -- loading ---------------------------------------------------------------------


def _load_npz(path: Path):
    if not path.exists():
        raise DataError(f"dataset file not found: {path}")
    try:
        with np.load(path) as f:
            return tuple(Split(f[f"X_{s}"].astype(np.float64), f[f"y_{s}"].astype(np.int64))
                         for s in ("train", "val", "test"))
    except (OSError, KeyError, ValueError) as exc:
        raise DataError(f"cannot read dataset {path}: {exc}") from None


def load_dataset(spec: DatasetSpec, seed: int):
    """Return ``(train, validation, test)`` splits, deterministic in ``seed``.

    Normalization statistics come from the training split and are applied to
    all three. Random augmentation is returned separately (see
    :func:`make_augmenter`) so it only ever touches training batches.
    """
    if spec.name == "shapes":
        rng = np.random.default_rng(seed)
        total = spec.train_size + spec.val_size + spec.test_size
        X, y = make_shapes(total, spec.image_shape, spec.noise, spec.num_classes, rng)
        a, b = spec.train_size, spec.train_size + spec.val_size
        train, val, test = Split(X[:a], y[:a]), Split(X[a:b], y[a:b]), Split(X[b:], y[b:])
    else:
        train, val, test = _load_npz(Path(spec.name))
        for want, split in zip((spec.train_size, spec.val_size, spec.test_size), (train, val, test)):
            if want and len(split) != want:
                raise DataError(f"{spec.name}: expected split of {want} samples, found {len(split)}")
    if spec.resize is not None:
        train, val, test = (Split(_resize(s.X, spec.resize), s.y) for s in (train, val, test))
    if spec.normalize:
        mu, sd = train.X.mean(), train.X.std()
        sd = sd if sd > 0 else 1.0
        train, val, test = (Split((s.X - mu) / sd, s.y) for s in (train, val, test))
    return train, val, test


def _resize(X: np.ndarray, size) -> np.ndarray:
    h, w = size
    zoom = (1, 1, h / X.shape[2], w / X.shape[3])
    return ndimage.zoom(X, zoom, order=1)


def make_augmenter(spec: DatasetSpec) -> Optional[Augmenter]:
    return Augmenter(spec.hflip, spec.rotation) if spec.augments else None
