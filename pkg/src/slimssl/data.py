"""Datasets and two-view augmentation.

CIFAR binary layout: every record is the label byte(s) followed by 3072 pixel
bytes stored channel-planar (1024 red, 1024 green, 1024 blue, each 32x32
row-major). CIFAR-10 has one label byte, CIFAR-100 two (coarse, fine).
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np

__all__ = [
    "AugOp",
    "DataConfig",
    "ChannelJitter",
    "CifarFormatError",
    "FeatureDropout",
    "GaussianNoise",
    "HorizontalFlip",
    "Identity",
    "ImageRecord",
    "RandomCrop",
    "ViewPair",
    "augment_batch",
    "default_policy",
    "hflip",
    "load_dataset",
    "parse_cifar",
    "records_to_arrays",
    "synthetic_blobs",
    "two_view_augment",
    "write_cifar",
]

PIXELS = 3 * 32 * 32
LABEL_BYTES = {"cifar10": 1, "cifar100": 2}


class CifarFormatError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


@dataclass
class ImageRecord:
    labels: tuple[int, ...]
    pixels: np.ndarray  # uint8, (3, 32, 32)

    @property
    def label(self) -> int:
        """The label used for training: the fine label for CIFAR-100."""
        return self.labels[-1]

    def __eq__(self, other: object) -> bool:
        return (
            isinstance(other, ImageRecord)
            and self.labels == other.labels
            and np.array_equal(self.pixels, other.pixels)
        )


def parse_cifar(source: str | os.PathLike | bytes, variant: str = "cifar10") -> list[ImageRecord]:
    if variant not in LABEL_BYTES:
        raise ValueError(f"variant must be one of {sorted(LABEL_BYTES)}")
    raw = bytes(source) if isinstance(source, (bytes, bytearray)) else open(source, "rb").read()
    nl = LABEL_BYTES[variant]
    size = nl + PIXELS
    full = len(raw) // size
    if len(raw) % size:
        raise CifarFormatError(
            f"{len(raw)} bytes is not a whole number of {size}-byte {variant} records", full * size
        )
    buf = np.frombuffer(raw, dtype=np.uint8).reshape(full, size)
    return [
        ImageRecord(tuple(int(v) for v in row[:nl]), row[nl:].reshape(3, 32, 32).copy())
        for row in buf
    ]


def write_cifar(records: Sequence[ImageRecord], path: str | os.PathLike, variant: str = "cifar10") -> None:
    nl = LABEL_BYTES[variant]
    with open(path, "wb") as fh:
        for rec in records:
            if len(rec.labels) != nl:
                raise ValueError(f"{variant} records carry {nl} label byte(s), got {rec.labels}")
            if rec.pixels.shape != (3, 32, 32):
                raise ValueError("pixels must have shape (3, 32, 32)")
            fh.write(bytes(rec.labels))
            fh.write(np.ascontiguousarray(rec.pixels, dtype=np.uint8).tobytes())


def records_to_arrays(records: Sequence[ImageRecord]) -> tuple[np.ndarray, np.ndarray]:
    """Images scaled to [0, 1] with shape ``(n, 3, 32, 32)`` and their labels."""
    X = np.stack([r.pixels for r in records]).astype(np.float64) / 255.0
    y = np.asarray([r.label for r in records], dtype=int)
    return X, y


def synthetic_blobs(
    n: int, d: int, classes: int, spread: float = 0.5, seed: int = 0, *, separation: float = 3.0
) -> tuple[np.ndarray, np.ndarray]:
    """Class-balanced isotropic Gaussian clusters.

    Centers are random directions scaled to ``separation``; samples are the
    center plus ``spread * N(0, I)``.
    """
    if classes < 2 or n < classes or d < 1:
        raise ValueError("need classes >= 2, n >= classes and d >= 1")
    rng = np.random.default_rng(seed)
    centers = rng.normal(size=(classes, d))
    centers *= separation / np.linalg.norm(centers, axis=1, keepdims=True)
    y = rng.permutation(np.arange(n) % classes)
    X = centers[y] + spread * rng.normal(size=(n, d))
    return X, y


# -- augmentation --------------------------------------------------------

def hflip(pixels: np.ndarray) -> np.ndarray:
    """Mirror the last (width) axis."""
    return pixels[..., ::-1]


class AugOp:
    """One augmentation step; subclasses implement ``apply`` on a batch."""

    name = "op"

    def apply(self, X: np.ndarray, rng: np.random.Generator) -> tuple[np.ndarray, dict[str, Any]]:
        raise NotImplementedError

    def to_dict(self) -> dict:
        return {"op": self.name, **{k: v for k, v in vars(self).items()}}


@dataclass
class Identity(AugOp):
    name = "identity"

    def apply(self, X, rng):
        return X, {}


@dataclass
class HorizontalFlip(AugOp):
    p: float = 0.5
    name = "hflip"

    def apply(self, X, rng):
        if X.ndim != 4:
            return X, {"skipped": True}
        flip = rng.random(X.shape[0]) < self.p
        out = X.copy()
        out[flip] = hflip(X[flip])
        return out, {"flipped": flip.tolist()}


@dataclass
class RandomCrop(AugOp):
    """Zero-pad by ``pad`` pixels and crop back at a random offset."""

    pad: int = 4
    name = "crop"

    def apply(self, X, rng):
        if X.ndim != 4 or self.pad == 0:
            return X, {"skipped": True}
        n, c, h, w = X.shape
        padded = np.pad(X, ((0, 0), (0, 0), (self.pad, self.pad), (self.pad, self.pad)))
        dy = rng.integers(0, 2 * self.pad + 1, size=n)
        dx = rng.integers(0, 2 * self.pad + 1, size=n)
        out = np.empty_like(X)
        for k in range(n):
            out[k] = padded[k, :, dy[k]:dy[k] + h, dx[k]:dx[k] + w]
        return out, {"dy": dy.tolist(), "dx": dx.tolist()}


@dataclass
class ChannelJitter(AugOp):
    """Multiply each image channel by ``1 + U(-strength, strength)``."""

    strength: float = 0.2
    name = "channel_jitter"

    def apply(self, X, rng):
        if X.ndim != 4:
            return X, {"skipped": True}
        f = 1.0 + rng.uniform(-self.strength, self.strength, size=(X.shape[0], X.shape[1], 1, 1))
        return X * f, {"factors": f.reshape(X.shape[0], -1).tolist()}


@dataclass
class GaussianNoise(AugOp):
    sigma: float = 0.1
    name = "noise"

    def apply(self, X, rng):
        return X + self.sigma * rng.normal(size=X.shape), {"sigma": self.sigma}


@dataclass
class FeatureDropout(AugOp):
    """Zero each feature independently with probability ``p``."""

    p: float = 0.1
    name = "dropout"

    def apply(self, X, rng):
        keep = rng.random(X.shape) >= self.p
        return X * keep, {"dropped": int(np.sum(~keep))}


OPS = {
    cls.name: cls for cls in (Identity, HorizontalFlip, RandomCrop, ChannelJitter, GaussianNoise, FeatureDropout)
}


def build_policy(spec: Sequence[dict]) -> list[AugOp]:
    """``[{"op": "noise", "sigma": 0.1}, ...]`` -> op objects."""
    ops = []
    for item in spec:
        item = dict(item)
        name = item.pop("op")
        if name not in OPS:
            raise ValueError(f"unknown augmentation op {name!r}; known: {sorted(OPS)}")
        ops.append(OPS[name](**item))
    return ops


def default_policy(kind: str) -> list[AugOp]:
    if kind == "blobs":
        return [GaussianNoise(0.3), FeatureDropout(0.1)]
    return [RandomCrop(4), HorizontalFlip(0.5), ChannelJitter(0.2), GaussianNoise(0.02)]


def augment_batch(X: np.ndarray, policy: Sequence[AugOp], rng: np.random.Generator) -> tuple[np.ndarray, list]:
    if not policy:
        raise ValueError("augmentation policy is empty")
    log = []
    for op in policy:
        X, params = op.apply(X, rng)
        log.append((op.name, params))
    return X, log


@dataclass
class ViewPair:
    view1: np.ndarray
    view2: np.ndarray
    source_id: int
    log: list = field(default_factory=list)


def two_view_augment(
    record: ImageRecord | np.ndarray, policy: Sequence[AugOp], rng: np.random.Generator, source_id: int = 0
) -> ViewPair:
    """Two independent draws of ``policy`` applied to one record."""
    x = record.pixels.astype(np.float64) / 255.0 if isinstance(record, ImageRecord) else np.asarray(record, float)
    v1, log1 = augment_batch(x[None], policy, rng)
    v2, log2 = augment_batch(x[None], policy, rng)
    return ViewPair(v1[0], v2[0], source_id, [log1, log2])


# -- dataset references -------------------------------------------------

DATA_KINDS = ("blobs", "cifar10", "cifar100")


@dataclass
class DataConfig:
    """Where training and evaluation data come from.

    ``blobs`` generates ``n_train + n_test`` points from one seeded draw and
    splits them; the CIFAR kinds read binary files from ``path`` and
    ``test_path`` (``n_train``/``n_test`` cap the record counts when set).
    """

    kind: str = "blobs"
    path: str | None = None
    test_path: str | None = None
    n_train: int | None = 2000
    n_test: int | None = 1000
    d: int = 32
    classes: int = 10
    spread: float = 0.5
    separation: float = 3.0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.kind not in DATA_KINDS:
            raise ValueError(f"data kind must be one of {DATA_KINDS}, got {self.kind!r}")
        if self.kind != "blobs" and not self.path:
            raise ValueError(f"data kind {self.kind!r} needs a path to the binary training file")


def load_dataset(cfg: DataConfig) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """``(X_train, y_train, X_test, y_test)``."""
    if cfg.kind == "blobs":
        n_tr, n_te = cfg.n_train or 2000, cfg.n_test or 0
        X, y = synthetic_blobs(n_tr + n_te, cfg.d, cfg.classes, cfg.spread, cfg.seed, separation=cfg.separation)
        return X[:n_tr], y[:n_tr], X[n_tr:], y[n_tr:]
    Xtr, ytr = records_to_arrays(parse_cifar(cfg.path, cfg.kind)[: cfg.n_train])
    if cfg.test_path:
        Xte, yte = records_to_arrays(parse_cifar(cfg.test_path, cfg.kind)[: cfg.n_test])
    else:
        Xte, yte = Xtr[:0], ytr[:0]
    return Xtr, ytr, Xte, yte
