"""Per-sample augmentation policy network and operation sampler.

The network maps task-model features to a probability simplex over the op
registry and a magnitude vector in [0, 1]^n.  Features are treated as
constants (detached), so policy-loss gradients never reach the task model
through this input.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import torch
import torch.nn as nn

from .errors import ConfigurationError
from .ops import OpRegistry

Tensor = torch.Tensor


@dataclass
class PolicyOutput:
    """Probabilities p (simplex over n ops) and magnitudes lam in [0,1]^n.

    Both tensors share a leading batch dimension when produced from batched
    features.
    """

    p: Tensor
    lam: Tensor

    @property
    def n_ops(self) -> int:
        return self.p.shape[-1]

    def validate(self, atol: float = 1e-6) -> None:
        if self.p.shape != self.lam.shape:
            raise ValueError(f"p shape {tuple(self.p.shape)} != lam shape {tuple(self.lam.shape)}")
        if (self.p < 0).any():
            raise ValueError("negative probability entry")
        if (self.p.sum(dim=-1) - 1.0).abs().max() > atol:
            raise ValueError("probabilities do not sum to 1")
        if (self.lam < 0).any() or (self.lam > 1).any():
            raise ValueError("magnitude outside [0, 1]")


class PolicyNetwork(nn.Module):
    """h hidden ReLU layers followed by a 2n-way affine head (softmax / sigmoid).

    The final layer is zero-initialized so an untrained policy emits uniform
    probabilities and mid-range magnitudes regardless of its input.
    """

    def __init__(
        self,
        input_dim: int,
        n_ops: int,
        hidden_layers: int = 0,
        hidden_dim: int = 64,
    ) -> None:
        super().__init__()
        if input_dim < 1 or n_ops < 1 or hidden_layers < 0:
            raise ConfigurationError(
                f"bad policy shape: input_dim={input_dim}, n_ops={n_ops}, h={hidden_layers}"
            )
        self.input_dim = input_dim
        self.n_ops = n_ops
        self.hidden_layers = hidden_layers
        self.hidden_dim = hidden_dim if hidden_layers > 0 else input_dim

        layers: list[nn.Module] = []
        width = input_dim
        for _ in range(hidden_layers):
            layers.append(nn.Linear(width, hidden_dim))
            layers.append(nn.ReLU())
            width = hidden_dim
        self.body = nn.Sequential(*layers)
        self.head = nn.Linear(width, 2 * n_ops)
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)

    def forward(self, features: Tensor) -> PolicyOutput:
        if features.shape[-1] != self.input_dim:
            raise ValueError(
                f"feature dimension {features.shape[-1]} does not match "
                f"policy input_dim {self.input_dim}"
            )
        z = self.head(self.body(features.detach()))
        logits, mag = z.split(self.n_ops, dim=-1)
        return PolicyOutput(p=torch.softmax(logits, dim=-1), lam=torch.sigmoid(mag))


def build_policy(
    input_dim: int,
    n_ops: int,
    hidden_layers: int = 0,
    hidden_dim: int = 64,
    seed: int = 0,
) -> PolicyNetwork:
    """Deterministically initialized policy (hidden layers seeded, head zeroed)."""
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        return PolicyNetwork(input_dim, n_ops, hidden_layers, hidden_dim)


def sample_ops(p: Tensor, k: int, rng: Optional[torch.Generator] = None) -> Tensor:
    """Draw k distinct op indices without replacement, proportional to p.

    Accepts a single simplex (n,) or a batch (B, n); returns (k,) or (B, k).
    Sequential renormalized draws: each pick zeroes its weight and the
    remainder is renormalized for the next pick.
    """
    n = p.shape[-1]
    if k < 1 or k > n:
        raise ValueError(f"k must lie in [1, {n}], got {k}")
    flat = p.reshape(-1, n)
    if (flat < 0).any():
        raise ValueError("probabilities must be non-negative")
    # multinomial without replacement implements exactly the sequential
    # renormalized scheme; it raises if the remaining mass hits zero.
    idx = torch.multinomial(flat, k, replacement=False, generator=rng)
    return idx.squeeze(0) if p.dim() == 1 else idx


def save_policy_checkpoint(
    path, net: PolicyNetwork, registry: OpRegistry
) -> None:
    torch.save(
        {
            "state_dict": net.state_dict(),
            "input_dim": net.input_dim,
            "hidden_layers": net.hidden_layers,
            "hidden_dim": net.hidden_dim,
            "n_ops": net.n_ops,
            "registry_fingerprint": registry.fingerprint(),
            "registry_ops": list(registry.names),
        },
        path,
    )


def load_policy_checkpoint(
    path, expected_input_dim: int, registry: OpRegistry
) -> PolicyNetwork:
    """Load a frozen policy, validating feature and registry compatibility."""
    blob = torch.load(path, weights_only=True)
    if blob["input_dim"] != expected_input_dim:
        raise ConfigurationError(
            f"policy checkpoint expects feature dimension {blob['input_dim']} "
            f"but the target model provides {expected_input_dim}"
        )
    if blob["registry_fingerprint"] != registry.fingerprint():
        raise ConfigurationError(
            "policy checkpoint was trained against a different op registry "
            f"({blob.get('registry_ops')}) than the one configured ({list(registry.names)})"
        )
    net = PolicyNetwork(
        blob["input_dim"], blob["n_ops"], blob["hidden_layers"], blob["hidden_dim"]
    )
    net.load_state_dict(blob["state_dict"])
    return net
