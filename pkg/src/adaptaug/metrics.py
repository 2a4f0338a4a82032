"""Evaluation metrics: per-class accuracy and original/augmented similarity."""

from __future__ import annotations

import math

import torch

Tensor = torch.Tensor


@torch.no_grad()
def accuracy(model, images: Tensor, labels: Tensor, batch_size: int = 512) -> float:
    correct = 0
    for i in range(0, len(images), batch_size):
        logits = model(images[i : i + batch_size])
        correct += (logits.argmax(dim=-1) == labels[i : i + batch_size]).sum().item()
    return correct / len(images)


@torch.no_grad()
def per_class_accuracy(
    model, images: Tensor, labels: Tensor, num_classes: int, batch_size: int = 512
) -> tuple[list[float], float]:
    """Per-ground-truth-class accuracies plus their sample-weighted mean.

    Classes absent from the evaluation set get NaN and are excluded from
    the mean.
    """
    if len(images) == 0:
        raise ValueError("empty evaluation set")
    hits = torch.zeros(num_classes)
    counts = torch.zeros(num_classes)
    for i in range(0, len(images), batch_size):
        yb = labels[i : i + batch_size]
        pred = model(images[i : i + batch_size]).argmax(dim=-1)
        for c, ok in zip(yb.tolist(), (pred == yb).tolist()):
            counts[c] += 1
            hits[c] += ok
    per_class = [
        (hits[c] / counts[c]).item() if counts[c] > 0 else math.nan
        for c in range(num_classes)
    ]
    overall = (hits.sum() / counts.sum()).item()
    return per_class, overall


def augmentation_similarity(original: Tensor, augmented: Tensor) -> float:
    """Cosine similarity of mean-centered flattened pixels, in [-1, 1].

    Degenerate (zero-variance) inputs: 1.0 when the images are identical,
    0.0 otherwise.
    """
    if original.shape != augmented.shape:
        raise ValueError(
            f"shape mismatch: {tuple(original.shape)} vs {tuple(augmented.shape)}"
        )
    a = original.double().flatten()
    b = augmented.double().flatten()
    a = a - a.mean()
    b = b - b.mean()
    na, nb = a.norm(), b.norm()
    if na < 1e-12 or nb < 1e-12:
        return 1.0 if torch.equal(original, augmented) else 0.0
    return float((a @ b) / (na * nb))


def batch_similarity(original: Tensor, augmented: Tensor) -> float:
    """Mean augmentation_similarity across a batch."""
    return sum(
        augmentation_similarity(o, a) for o, a in zip(original, augmented)
    ) / len(original)
