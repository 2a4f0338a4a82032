"""Desk-scale task models with a penultimate-feature hook.

Every model exposes features(x) (the penultimate activation the policy
network consumes) and forward(x) = head(features(x)).  Per-channel
standardization happens inside features(), so augmentation always operates
on raw [0, 1] pixels.
"""

from __future__ import annotations

from typing import Optional, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigurationError

Tensor = torch.Tensor

ARCHITECTURES = ("small_cnn", "mlp", "wide_resnet_tiny")


class TaskModel(nn.Module):
    """Base: normalization buffers + feature body + linear classification head."""

    architecture: str = "base"

    def __init__(self, image_shape: Sequence[int], num_classes: int, feature_dim: int,
                 stats: Optional[tuple] = None) -> None:
        super().__init__()
        c = image_shape[0]
        self.image_shape = tuple(image_shape)
        self.num_classes = num_classes
        self.feature_dim = feature_dim
        mean, std = stats if stats is not None else (0.5, 0.5)
        mean_t = torch.as_tensor(mean, dtype=torch.float32).reshape(-1)
        std_t = torch.as_tensor(std, dtype=torch.float32).reshape(-1)
        if mean_t.numel() == 1:
            mean_t = mean_t.expand(c).clone()
        if std_t.numel() == 1:
            std_t = std_t.expand(c).clone()
        self.register_buffer("input_mean", mean_t.view(1, c, 1, 1))
        self.register_buffer("input_std", std_t.view(1, c, 1, 1))
        self.head = nn.Linear(feature_dim, num_classes)

    def normalize(self, x: Tensor) -> Tensor:
        single = x.dim() == 3
        xb = x.unsqueeze(0) if single else x
        out = (xb - self.input_mean) / self.input_std
        return out.squeeze(0) if single else out

    def body(self, x: Tensor) -> Tensor:
        raise NotImplementedError

    def features(self, x: Tensor) -> Tensor:
        return self.body(self.normalize(x))

    def forward(self, x: Tensor) -> Tensor:
        return self.head(self.features(x))

    def forward_with_features(self, x: Tensor) -> tuple[Tensor, Tensor]:
        f = self.features(x)
        return self.head(f), f


class SmallCnn(TaskModel):
    """Three conv/pool stages, global average pooling, linear head (~24k params)."""

    architecture = "small_cnn"

    def __init__(self, image_shape, num_classes, stats=None, width: int = 16):
        super().__init__(image_shape, num_classes, feature_dim=4 * width, stats=stats)
        c = image_shape[0]
        self.conv1 = nn.Conv2d(c, width, 3, padding=1)
        self.conv2 = nn.Conv2d(width, 2 * width, 3, padding=1)
        self.conv3 = nn.Conv2d(2 * width, 4 * width, 3, padding=1)

    def body(self, x: Tensor) -> Tensor:
        x = F.max_pool2d(F.relu(self.conv1(x)), 2)
        x = F.max_pool2d(F.relu(self.conv2(x)), 2)
        x = F.relu(self.conv3(x))
        return x.mean(dim=(-2, -1))


class Mlp(TaskModel):
    architecture = "mlp"

    def __init__(self, image_shape, num_classes, stats=None, hidden: int = 64):
        super().__init__(image_shape, num_classes, feature_dim=hidden, stats=stats)
        in_dim = int(torch.tensor(image_shape).prod())
        self.fc1 = nn.Linear(in_dim, hidden)

    def body(self, x: Tensor) -> Tensor:
        return F.relu(self.fc1(x.flatten(start_dim=-3)))


class _BasicBlock(nn.Module):
    def __init__(self, c_in, c_out, stride):
        super().__init__()
        self.bn1 = nn.BatchNorm2d(c_in)
        self.conv1 = nn.Conv2d(c_in, c_out, 3, stride=stride, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(c_out)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1, bias=False)
        self.shortcut = (
            nn.Conv2d(c_in, c_out, 1, stride=stride, bias=False)
            if (stride != 1 or c_in != c_out)
            else nn.Identity()
        )

    def forward(self, x):
        h = F.relu(self.bn1(x))
        out = self.conv1(h)
        out = self.conv2(F.relu(self.bn2(out)))
        return out + self.shortcut(h)


class WideResnetTiny(TaskModel):
    """Two residual groups at widths (2w, 4w); a scaled-down residual net."""

    architecture = "wide_resnet_tiny"

    def __init__(self, image_shape, num_classes, stats=None, width: int = 16):
        super().__init__(image_shape, num_classes, feature_dim=4 * width, stats=stats)
        c = image_shape[0]
        self.stem = nn.Conv2d(c, width, 3, padding=1, bias=False)
        self.group1 = nn.Sequential(
            _BasicBlock(width, 2 * width, stride=1), _BasicBlock(2 * width, 2 * width, stride=1)
        )
        self.group2 = nn.Sequential(
            _BasicBlock(2 * width, 4 * width, stride=2), _BasicBlock(4 * width, 4 * width, stride=1)
        )
        self.bn_out = nn.BatchNorm2d(4 * width)

    def body(self, x: Tensor) -> Tensor:
        x = self.stem(x)
        x = self.group2(self.group1(x))
        return F.relu(self.bn_out(x)).mean(dim=(-2, -1))


def build_model(
    architecture: str,
    num_classes: int,
    seed: int = 0,
    image_shape: Sequence[int] = (3, 32, 32),
    stats: Optional[tuple] = None,
    **kw,
) -> TaskModel:
    """Deterministically initialized task model with its feature hook wired."""
    builders = {"small_cnn": SmallCnn, "mlp": Mlp, "wide_resnet_tiny": WideResnetTiny}
    if architecture not in builders:
        raise ConfigurationError(
            f"unknown architecture {architecture!r}; supported: {ARCHITECTURES}"
        )
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        return builders[architecture](tuple(image_shape), num_classes, stats=stats, **kw)
