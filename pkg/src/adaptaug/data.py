"""Datasets, split management, and the procedurally generated shapes corpus.

The default corpus renders 10 classes of geometric figures at 32x32 with
nuisance variation (pose, scale, colors, illumination, noise), so a small
model generalizes imperfectly from a few thousand samples and augmentation
has headroom to help.  Everything is a pure function of its seed.
"""

from __future__ import annotations

import json
import pickle
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .errors import ConfigurationError

Tensor = torch.Tensor

_DATASET_CACHE: dict[tuple, "ImageDataset"] = {}


@dataclass
class ImageDataset:
    name: str
    images: Tensor  # (N, C, H, W) float32 in [0, 1]
    labels: Tensor  # (N,) long
    num_classes: int

    def __len__(self) -> int:
        return self.images.shape[0]

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])


@dataclass
class DatasetSplit:
    train_indices: Tensor
    val_indices: Tensor
    test_indices: Tensor

    def save(self, path, dataset_name: str = "") -> None:
        blob = {
            "dataset": dataset_name,
            "train": sorted(self.train_indices.tolist()),
            "val": sorted(self.val_indices.tolist()),
            "test": sorted(self.test_indices.tolist()),
        }
        Path(path).write_text(json.dumps(blob, indent=1))

    @classmethod
    def load(cls, path) -> "DatasetSplit":
        blob = json.loads(Path(path).read_text())
        return cls(
            torch.tensor(blob["train"], dtype=torch.long),
            torch.tensor(blob["val"], dtype=torch.long),
            torch.tensor(blob["test"], dtype=torch.long),
        )


# ---------------------------------------------------------------------------
# Shape rendering
# ---------------------------------------------------------------------------

SHAPE_CLASSES = (
    "disk",
    "ring",
    "square",
    "triangle",
    "plus",
    "cross",
    "hbars",
    "vbars",
    "diamond",
    "quadrants",
)


def _shape_mask(cls: int, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    box = np.maximum(np.abs(u), np.abs(v)) <= 1.0
    r = np.sqrt(u * u + v * v)
    if cls == 0:
        return r <= 1.0
    if cls == 1:
        return (r <= 1.0) & (r >= 0.55)
    if cls == 2:
        return np.maximum(np.abs(u), np.abs(v)) <= 0.85
    if cls == 3:
        return (v >= -0.75) & (v <= 0.95) & (np.abs(u) <= 0.85 * (0.95 - v) / 1.7)
    if cls == 4:
        return box & ((np.abs(u) <= 0.32) | (np.abs(v) <= 0.32))
    if cls == 5:
        return box & ((np.abs(u - v) <= 0.4) | (np.abs(u + v) <= 0.4))
    if cls == 6:
        return box & (np.floor((v + 1.0) * 1.5).astype(int) % 2 == 0)
    if cls == 7:
        return box & (np.floor((u + 1.0) * 1.5).astype(int) % 2 == 0)
    if cls == 8:
        return (np.abs(u) + np.abs(v)) <= 1.15
    if cls == 9:
        return (np.maximum(np.abs(u), np.abs(v)) <= 0.9) & ((u > 0) == (v > 0))
    raise ValueError(f"unknown shape class {cls}")


def _hsv_to_rgb(h: float, s: float, v: float) -> np.ndarray:
    i = int(h * 6.0) % 6
    f = h * 6.0 - int(h * 6.0)
    p, q, t = v * (1 - s), v * (1 - f * s), v * (1 - (1 - f) * s)
    rgb = [(v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q)][i]
    return np.array(rgb)


def _render_shape(
    cls: int, rng: np.random.Generator, size: int, style: str
) -> np.ndarray:
    ss = 2 * size  # supersampled render, averaged down 2x
    ax = np.linspace(-1.0, 1.0, ss)
    xx, yy = np.meshgrid(ax, ax)

    cx, cy = rng.uniform(-0.28, 0.28, size=2)
    scale = rng.uniform(0.38, 0.68) if style == "solid" else rng.uniform(0.45, 0.75)
    phi = rng.uniform(-0.35, 0.35)  # ~±20 degrees
    cphi, sphi = np.cos(phi), np.sin(phi)
    u = ((xx - cx) * cphi + (yy - cy) * sphi) / scale
    v = (-(xx - cx) * sphi + (yy - cy) * cphi) / scale

    mask = _shape_mask(cls, u, v).astype(np.float64)
    if style == "outline":
        inner = _shape_mask(cls, u / 0.78, v / 0.78).astype(np.float64)
        mask = np.clip(mask - inner, 0.0, 1.0)

    fg = _hsv_to_rgb(rng.uniform(), rng.uniform(0.55, 1.0), rng.uniform(0.65, 1.0))
    while True:
        if style == "solid":
            bg = _hsv_to_rgb(rng.uniform(), rng.uniform(0.0, 0.45), rng.uniform(0.1, 0.9))
        else:
            bg = _hsv_to_rgb(rng.uniform(), rng.uniform(0.0, 0.3), rng.uniform(0.55, 1.0))
        if np.abs(fg - bg).sum() > 0.8:
            break
        fg = _hsv_to_rgb(rng.uniform(), rng.uniform(0.55, 1.0), rng.uniform(0.65, 1.0))

    img = bg[:, None, None] * (1.0 - mask) + fg[:, None, None] * mask
    # Linear illumination ramp across a random direction.
    gdir = rng.uniform(0, 2 * np.pi)
    ramp = 1.0 + rng.uniform(0.0, 0.22) * (np.cos(gdir) * xx + np.sin(gdir) * yy)
    img = img * ramp[None, :, :]
    img = img.reshape(3, size, 2, size, 2).mean(axis=(2, 4))
    sigma = rng.uniform(0.02, 0.07) if style == "solid" else rng.uniform(0.03, 0.09)
    img = img + rng.normal(0.0, sigma, size=img.shape)
    return np.clip(img, 0.0, 1.0)


def build_dataset(
    name: str, n: int = 6500, seed: int = 0, size: int = 32, cache: bool = True
) -> ImageDataset:
    """Procedural datasets: "shapes10" (solid) and "shapes10_outline" (variant B)."""
    key = (name, n, seed, size)
    if cache and key in _DATASET_CACHE:
        return _DATASET_CACHE[key]
    styles = {"shapes10": "solid", "shapes10_outline": "outline"}
    if name not in styles:
        raise ConfigurationError(
            f"unknown dataset {name!r}; available: {sorted(styles)} (or load_cifar10)"
        )
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % len(SHAPE_CLASSES)
    rng.shuffle(labels)
    images = np.empty((n, 3, size, size), dtype=np.float32)
    for i in range(n):
        images[i] = _render_shape(int(labels[i]), rng, size, styles[name])
    ds = ImageDataset(
        name=name,
        images=torch.from_numpy(images),
        labels=torch.from_numpy(labels.astype(np.int64)),
        num_classes=len(SHAPE_CLASSES),
    )
    if cache:
        _DATASET_CACHE[key] = ds
    return ds


def load_cifar10(root) -> ImageDataset:
    """Read the standard python-pickle CIFAR-10 batches from a local directory."""
    root = Path(root)
    batches = [f"data_batch_{i}" for i in range(1, 6)] + ["test_batch"]
    arrays, labels = [], []
    for b in batches:
        path = root / b
        if not path.exists():
            raise ConfigurationError(f"CIFAR-10 batch file missing: {path}")
        with open(path, "rb") as f:
            blob = pickle.load(f, encoding="bytes")
        arrays.append(blob[b"data"])
        labels.extend(blob[b"labels"])
    data = np.concatenate(arrays).reshape(-1, 3, 32, 32).astype(np.float32) / 255.0
    return ImageDataset(
        name="cifar10",
        images=torch.from_numpy(data),
        labels=torch.tensor(labels, dtype=torch.long),
        num_classes=10,
    )


def make_splits(
    dataset: ImageDataset,
    n_train: int,
    n_val: int,
    stratify: bool = True,
    seed: int = 0,
    n_test: Optional[int] = None,
) -> DatasetSplit:
    """Disjoint train/val/test index sets; test takes the remainder by default."""
    n = len(dataset)
    if n_train + n_val > n:
        raise ValueError(f"n_train + n_val = {n_train + n_val} exceeds dataset size {n}")
    rng = np.random.default_rng(seed)
    if stratify:
        k = dataset.num_classes
        per_tr, per_va = _even_counts(n_train, k), _even_counts(n_val, k)
        train, val, rest = [], [], []
        labels = dataset.labels.numpy()
        for c in range(k):
            idx = np.flatnonzero(labels == c)
            need = per_tr[c] + per_va[c]
            if len(idx) < need:
                raise ValueError(
                    f"class {c} has {len(idx)} samples, needs {need} for stratification"
                )
            idx = rng.permutation(idx)
            train.append(idx[: per_tr[c]])
            val.append(idx[per_tr[c] : need])
            rest.append(idx[need:])
        train_idx = np.sort(np.concatenate(train))
        val_idx = np.sort(np.concatenate(val))
        rest_idx = rng.permutation(np.concatenate(rest))
    else:
        perm = rng.permutation(n)
        train_idx = np.sort(perm[:n_train])
        val_idx = np.sort(perm[n_train : n_train + n_val])
        rest_idx = perm[n_train + n_val :]
    if n_test is not None:
        rest_idx = rest_idx[:n_test]
    test_idx = np.sort(rest_idx)
    return DatasetSplit(
        torch.from_numpy(train_idx.astype(np.int64)),
        torch.from_numpy(val_idx.astype(np.int64)),
        torch.from_numpy(test_idx.astype(np.int64)),
    )


def _even_counts(total: int, k: int) -> list[int]:
    base, extra = divmod(total, k)
    return [base + (1 if c < extra else 0) for c in range(k)]


def channel_stats(images: Tensor) -> tuple[tuple, tuple]:
    mean = images.mean(dim=(0, 2, 3))
    std = images.std(dim=(0, 2, 3)).clamp_min(1e-4)
    return tuple(mean.tolist()), tuple(std.tolist())
