"""Monotonic curriculum gating when augmentation is applied at all.

The gating probability grows with the epoch as tanh(t / tau), so early
training sees mostly original images and later training mostly augmented
ones.  always_on / always_off reproduce the fixed-augmentation and
no-augmentation baseline regimes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import torch

from .errors import ConfigurationError

MODES = ("tanh", "always_on", "always_off")


@dataclass(frozen=True)
class CurriculumSchedule:
    tau: float = 40.0
    mode: str = "tanh"

    def __post_init__(self) -> None:
        if self.mode not in MODES:
            raise ConfigurationError(f"curriculum mode must be one of {MODES}, got {self.mode!r}")
        if self.mode == "tanh" and not self.tau > 0:
            raise ConfigurationError(f"tau must be positive in tanh mode, got {self.tau}")


def curriculum_probability(t: int, schedule: CurriculumSchedule) -> float:
    """Probability of augmenting a sample at epoch t."""
    if t < 0:
        raise ValueError(f"epoch must be non-negative, got {t}")
    if schedule.mode == "always_on":
        return 1.0
    if schedule.mode == "always_off":
        return 0.0
    return math.tanh(t / schedule.tau)


def gate_batch(
    batch_size: int, p: float, rng: Optional[torch.Generator] = None
) -> torch.Tensor:
    """Independent Bernoulli(p) draw per sample; True means augment."""
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"p must lie in [0, 1], got {p}")
    if p == 0.0:
        return torch.zeros(batch_size, dtype=torch.bool)
    if p == 1.0:
        return torch.ones(batch_size, dtype=torch.bool)
    return torch.rand(batch_size, generator=rng) < p
