"""Alternating bi-level training: virtual task step, policy update through
the unrolled step, real task step.

Per iteration the loop (i) draws a train mini-batch and a curriculum gate,
(ii) builds gradient-carrying augmentations and takes a one-step virtual
update of the task weights, (iii) updates the policy to reduce validation
loss of the virtual weights (repeated s times on fresh validation batches),
and (iv) regenerates augmentations under the new policy and takes the real
task step.  The exact second-order gradient through the unrolled step is the
default; a first-order switch replaces the Hessian-vector product with a
central finite difference over the task weights (two extra first-order
backward passes instead of double backprop).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterator, Optional

import torch
import torch.nn.functional as F
from torch.func import functional_call

from .composer import (
    _LambdaStraightThrough,
    compose_sampled_batch,
    forward_sampled_backward_relaxed,
    relaxed_composition,
)
from .curriculum import CurriculumSchedule, curriculum_probability, gate_batch
from .errors import ConfigurationError, TrainingDivergedError
from .metrics import batch_similarity, per_class_accuracy
from .models import TaskModel
from .ops import OpRegistry, perturb_magnitude
from .policy import PolicyNetwork, PolicyOutput, sample_ops

Tensor = torch.Tensor


@dataclass
class BilevelConfig:
    alpha: float = 0.05          # task learning rate
    beta: float = 1e-3           # policy learning rate
    n_tr: int = 64
    n_val: int = 64
    s: int = 1                   # policy updates per task step
    epochs: int = 40
    second_order: bool = True
    momentum: float = 0.9
    weight_decay: float = 5e-4
    grad_clip: float = 5.0
    lr_schedule: str = "cosine"  # or "constant"
    policy_optimizer: str = "adam"  # or "sgd"

    def __post_init__(self) -> None:
        if self.alpha < 0:
            raise ConfigurationError(f"alpha must be >= 0, got {self.alpha}")
        if self.beta < 0:
            raise ConfigurationError(f"beta must be >= 0, got {self.beta}")
        if self.s < 1 or self.n_tr < 1 or self.n_val < 1 or self.epochs < 1:
            raise ConfigurationError("s, n_tr, n_val, and epochs must all be >= 1")
        if self.lr_schedule not in ("cosine", "constant"):
            raise ConfigurationError(f"unknown lr schedule {self.lr_schedule!r}")
        if self.policy_optimizer not in ("adam", "sgd"):
            raise ConfigurationError(f"unknown policy optimizer {self.policy_optimizer!r}")


@dataclass
class AugmentationOptions:
    k: int = 2
    delta: float = 0.3
    relaxation_mode: str = "full_pair_sum"
    renormalize: bool = True
    lambda_grad: str = "ste"
    # "sampled": forward uses the drawn op chain (training default);
    # "relaxed": forward IS the pair sum, making theta -> val loss a smooth
    # map (used by gradient-correctness checks).
    composition_value: str = "sampled"
    # "learned": policy network; "fixed_random": uniform random distinct op
    # pair at fixed mid magnitudes (the hand-designed baseline).
    policy_mode: str = "learned"
    # "per_sample": policy sees g_w(x); "constant": one dataset-level policy.
    feature_mode: str = "per_sample"
    # Stop policy updates after this fraction of epochs (None = never).
    freeze_after_fraction: Optional[float] = None

    def __post_init__(self) -> None:
        if self.k < 1:
            raise ConfigurationError(f"k must be >= 1, got {self.k}")
        if self.delta < 0:
            raise ConfigurationError(f"delta must be >= 0, got {self.delta}")
        if self.composition_value not in ("sampled", "relaxed"):
            raise ConfigurationError(f"unknown composition_value {self.composition_value!r}")
        if self.policy_mode not in ("learned", "fixed_random"):
            raise ConfigurationError(f"unknown policy_mode {self.policy_mode!r}")
        if self.feature_mode not in ("per_sample", "constant"):
            raise ConfigurationError(f"unknown feature_mode {self.feature_mode!r}")


def epoch_batches(n: int, batch_size: int, rng: torch.Generator) -> Iterator[Tensor]:
    """Shuffled index batches covering all n samples (last batch may be short)."""
    perm = torch.randperm(n, generator=rng)
    for i in range(0, n, batch_size):
        yield perm[i : i + batch_size]


def functional_loss(model: TaskModel, params: dict, x: Tensor, y: Tensor) -> Tensor:
    logits = functional_call(model, params, (x,))
    return F.cross_entropy(logits, y)


def virtual_step(
    model: TaskModel,
    params: dict,
    buffers: dict,
    x_aug: Tensor,
    y: Tensor,
    alpha: float,
    second_order: bool = True,
) -> tuple[dict, Tensor]:
    """One plain gradient-descent step; keeps the graph to theta when asked.

    Returns (w_hat, train_loss).  With second_order=True the returned
    parameters stay differentiable w.r.t. whatever produced x_aug.
    """
    loss = functional_loss(model, {**params, **buffers}, x_aug, y)
    if not torch.isfinite(loss):
        raise TrainingDivergedError(f"non-finite training loss in virtual step: {loss}")
    names = list(params)
    grads = torch.autograd.grad(
        loss, [params[n] for n in names], create_graph=second_order, retain_graph=True
    )
    w_hat = {n: params[n] - alpha * g for n, g in zip(names, grads)}
    return w_hat, loss


def augment_gated(
    model: TaskModel,
    policy: PolicyNetwork,
    registry: OpRegistry,
    x: Tensor,
    gate: Tensor,
    aug: AugmentationOptions,
    rngs: Optional[dict] = None,
) -> Tensor:
    """Gradient-carrying augmentation of the gated subset of a batch.

    Ungated samples pass through bit-identical.  With
    composition_value="sampled" the value path is the drawn op chain and
    gradients come from the relaxation; with "relaxed" the pair sum is the
    value itself (deterministic, no sampling rng consumed).
    """
    out = x.clone()
    if not bool(gate.any()):
        return out
    xs = x[gate]
    if aug.feature_mode == "constant":
        feats = torch.ones(len(xs), policy.input_dim)
    else:
        with torch.no_grad():
            feats = model.features(xs)
    pol = policy(feats)

    if aug.composition_value == "relaxed":
        lam = pol.lam if aug.lambda_grad == "pathwise" else pol.lam.detach()
        aug_x = relaxed_composition(
            xs, pol.p, lam, registry, renormalize=aug.renormalize
        )
        if aug.lambda_grad == "ste":
            # No sampled set in this mode: every magnitude op gets the
            # straight-through gradient.
            mask = registry.magnitude_mask(dtype=pol.lam.dtype).expand(len(xs), -1)
            aug_x = _LambdaStraightThrough.apply(aug_x, pol.lam, mask)
    else:
        sampled = sample_ops(pol.p.detach(), aug.k, rngs["sample"] if rngs else None)
        aug_x = forward_sampled_backward_relaxed(
            xs,
            pol,
            sampled,
            registry,
            renormalize=aug.renormalize,
            relaxation_mode=aug.relaxation_mode,
            lambda_grad=aug.lambda_grad,
            delta=aug.delta,
            rng=rngs["perturb"] if rngs else None,
        )
    out[gate] = aug_x
    return out


def policy_value_loss(
    model: TaskModel,
    policy: PolicyNetwork,
    registry: OpRegistry,
    x: Tensor,
    y: Tensor,
    x_val: Tensor,
    y_val: Tensor,
    gate: Tensor,
    alpha: float,
    aug: AugmentationOptions,
    second_order: bool = True,
    rngs: Optional[dict] = None,
) -> Tensor:
    """Validation loss of the one-step-updated task model, L_val(w_hat(theta)).

    Differentiable w.r.t. the policy parameters when second_order=True.
    With composition_value="relaxed" and delta=0 this is a deterministic
    function of theta, suitable for finite-difference checks.
    """
    params = dict(model.named_parameters())
    buffers = {n: b.clone() for n, b in model.named_buffers()}
    x_aug = augment_gated(model, policy, registry, x, gate, aug, rngs)
    w_hat, _ = virtual_step(model, params, buffers, x_aug, y, alpha, second_order)
    val_loss = functional_loss(model, {**w_hat, **buffers}, x_val, y_val)
    if not torch.isfinite(val_loss):
        raise TrainingDivergedError(f"non-finite validation loss: {val_loss}")
    return val_loss


def compute_policy_gradients(
    model: TaskModel,
    policy: PolicyNetwork,
    registry: OpRegistry,
    x: Tensor,
    y: Tensor,
    x_val: Tensor,
    y_val: Tensor,
    gate: Tensor,
    alpha: float,
    aug: AugmentationOptions,
    second_order: bool = True,
    rngs: Optional[dict] = None,
) -> list[Tensor]:
    """Gradient of L_val(w_hat(theta)) w.r.t. the policy parameters.

    second_order=True differentiates exactly through the unrolled step.
    The first-order route instead estimates the mixed second derivative by
    a central difference over the task weights along v = grad L_val(w_hat):
    grad_theta ~= -alpha * (grad_theta L_tr(w + eps v) -
    grad_theta L_tr(w - eps v)) / (2 eps), with eps = 0.01 / ||v||.
    """
    theta = list(policy.parameters())
    if second_order:
        val_loss = policy_value_loss(
            model, policy, registry, x, y, x_val, y_val, gate, alpha, aug,
            second_order=True, rngs=rngs,
        )
        grads = torch.autograd.grad(val_loss, theta, allow_unused=True)
    else:
        params = dict(model.named_parameters())
        buffers = {n: b.clone() for n, b in model.named_buffers()}
        x_aug = augment_gated(model, policy, registry, x, gate, aug, rngs)
        w_hat, _ = virtual_step(model, params, buffers, x_aug, y, alpha, second_order=False)
        names = list(params)
        w_hat = {n: p.detach().requires_grad_(True) for n, p in w_hat.items()}
        val_loss = functional_loss(model, {**w_hat, **buffers}, x_val, y_val)
        if not torch.isfinite(val_loss):
            raise TrainingDivergedError(f"non-finite validation loss: {val_loss}")
        v = torch.autograd.grad(val_loss, [w_hat[n] for n in names])
        vnorm = torch.sqrt(sum((g * g).sum() for g in v))
        eps = 0.01 / max(float(vnorm), 1e-12)
        plus = {n: (params[n] + eps * g).detach() for n, g in zip(names, v)}
        minus = {n: (params[n] - eps * g).detach() for n, g in zip(names, v)}
        loss_plus = functional_loss(model, {**plus, **buffers}, x_aug, y)
        g_plus = torch.autograd.grad(loss_plus, theta, retain_graph=True, allow_unused=True)
        loss_minus = functional_loss(model, {**minus, **buffers}, x_aug, y)
        g_minus = torch.autograd.grad(loss_minus, theta, allow_unused=True)
        grads = [
            None
            if gp is None and gm is None
            else -alpha
            * ((gp if gp is not None else 0) - (gm if gm is not None else 0))
            / (2 * eps)
            for gp, gm in zip(g_plus, g_minus)
        ]
    return [g if g is not None else torch.zeros_like(p) for g, p in zip(grads, theta)]


class Trainer:
    """Holds (w, theta, optimizer state, epoch, rng streams) and runs the loop."""

    def __init__(
        self,
        model: TaskModel,
        policy: Optional[PolicyNetwork],
        registry: OpRegistry,
        schedule: CurriculumSchedule,
        config: BilevelConfig,
        aug: AugmentationOptions,
        train_x: Tensor,
        train_y: Tensor,
        val_x: Tensor,
        val_y: Tensor,
        test_x: Optional[Tensor] = None,
        test_y: Optional[Tensor] = None,
        seed: int = 0,
    ) -> None:
        if aug.policy_mode == "learned" and policy is None:
            raise ConfigurationError("learned policy mode requires a policy network")
        self.model = model
        self.policy = policy
        self.registry = registry
        self.schedule = schedule
        self.config = config
        self.aug = aug
        self.train_x, self.train_y = train_x, train_y
        self.val_x, self.val_y = val_x, val_y
        self.test_x, self.test_y = test_x, test_y
        self.seed = seed
        self.epoch = 0

        self.rngs = {
            name: torch.Generator().manual_seed(seed * 100003 + i)
            for i, name in enumerate(("data", "gate", "sample", "perturb", "val"))
        }
        self.task_opt = torch.optim.SGD(
            model.parameters(),
            lr=config.alpha,
            momentum=config.momentum,
            weight_decay=config.weight_decay,
        )
        if policy is not None:
            if config.policy_optimizer == "adam":
                self.policy_opt = torch.optim.Adam(policy.parameters(), lr=config.beta)
            else:
                self.policy_opt = torch.optim.SGD(policy.parameters(), lr=config.beta)
        else:
            self.policy_opt = None
        self._val_perm: Optional[Tensor] = None
        self._val_pos = 0

    # -- plumbing ----------------------------------------------------------

    @classmethod
    def from_split(cls, dataset, split, model, policy, registry, schedule, config, aug,
                   seed: int = 0) -> "Trainer":
        sets = [set(split.train_indices.tolist()), set(split.val_indices.tolist()),
                set(split.test_indices.tolist())]
        if sets[0] & sets[1] or sets[0] & sets[2] or sets[1] & sets[2]:
            raise ConfigurationError("train/val/test splits overlap")
        return cls(
            model, policy, registry, schedule, config, aug,
            dataset.images[split.train_indices], dataset.labels[split.train_indices],
            dataset.images[split.val_indices], dataset.labels[split.val_indices],
            dataset.images[split.test_indices], dataset.labels[split.test_indices],
            seed=seed,
        )

    def epoch_lr(self, t: int) -> float:
        if self.config.lr_schedule == "constant":
            return self.config.alpha
        return self.config.alpha * 0.5 * (1.0 + math.cos(math.pi * t / self.config.epochs))

    def _next_val_batch(self) -> tuple[Tensor, Tensor]:
        n = len(self.val_x)
        take = min(self.config.n_val, n)
        if self._val_perm is None or self._val_pos + take > n:
            self._val_perm = torch.randperm(n, generator=self.rngs["val"])
            self._val_pos = 0
        idx = self._val_perm[self._val_pos : self._val_pos + take]
        self._val_pos += take
        return self.val_x[idx], self.val_y[idx]

    def _policy_outputs(self, x: Tensor) -> PolicyOutput:
        if self.aug.feature_mode == "constant":
            feats = torch.ones(len(x), self.policy.input_dim)
        else:
            with torch.no_grad():
                feats = self.model.features(x)
        return self.policy(feats)

    def _sample_fixed(self, b: int) -> tuple[Tensor, Tensor]:
        n = len(self.registry)
        uniform = torch.full((b, n), 1.0 / n)
        sampled = sample_ops(uniform, self.aug.k, self.rngs["sample"])
        lam = torch.full((b, n), 0.5)
        return sampled, lam

    # -- augmentation paths --------------------------------------------------

    @torch.no_grad()
    def _augment_plain(self, x: Tensor, gate: Tensor) -> Tensor:
        """Sampled-only augmentation (no policy graph) for the real task step."""
        out = x.clone()
        if not bool(gate.any()):
            return out
        xs = x[gate]
        if self.aug.policy_mode == "fixed_random":
            sampled, lam = self._sample_fixed(len(xs))
        else:
            pol = self._policy_outputs(xs)
            sampled = sample_ops(pol.p, self.aug.k, self.rngs["sample"])
            lam = perturb_magnitude(pol.lam, self.aug.delta, self.rngs["perturb"])
        out[gate] = compose_sampled_batch(xs, sampled, lam, self.registry, self.rngs["perturb"])
        return out

    # -- policy update --------------------------------------------------------

    def _apply_policy_gradients(self, grads: list[Tensor]) -> None:
        for p, g in zip(self.policy.parameters(), grads):
            if not torch.isfinite(g).all():
                raise TrainingDivergedError("non-finite policy gradient")
            p.grad = g
        self.policy_opt.step()
        self.policy_opt.zero_grad(set_to_none=True)

    # -- main loop -------------------------------------------------------------

    def _policy_training_active(self, t: int) -> bool:
        if self.aug.policy_mode != "learned" or self.config.beta <= 0:
            return False
        frac = self.aug.freeze_after_fraction
        if frac is not None and t >= math.ceil(frac * self.config.epochs):
            return False
        return True

    def train_epoch(self, t: Optional[int] = None) -> dict:
        t = self.epoch if t is None else t
        cfg = self.config
        p_gate = curriculum_probability(t, self.schedule)
        lr_t = self.epoch_lr(t)
        for group in self.task_opt.param_groups:
            group["lr"] = lr_t

        self.model.train()
        losses, sims, fracs = [], [], []
        n = len(self.train_x)
        for idx in epoch_batches(n, cfg.n_tr, self.rngs["data"]):
            x, y = self.train_x[idx], self.train_y[idx]
            gate = gate_batch(len(x), p_gate, self.rngs["gate"])
            if self._policy_training_active(t) and bool(gate.any()):
                for _ in range(cfg.s):
                    x_val, y_val = self._next_val_batch()
                    grads = compute_policy_gradients(
                        self.model, self.policy, self.registry,
                        x, y, x_val, y_val, gate, lr_t,
                        self.aug, second_order=cfg.second_order, rngs=self.rngs,
                    )
                    self._apply_policy_gradients(grads)

            x_aug = self._augment_plain(x, gate)
            self.task_opt.zero_grad(set_to_none=True)
            loss = F.cross_entropy(self.model(x_aug), y)
            if not torch.isfinite(loss):
                raise TrainingDivergedError(
                    f"non-finite task loss at epoch {t}: {float(loss)}"
                )
            loss.backward()
            if cfg.grad_clip > 0:
                torch.nn.utils.clip_grad_norm_(self.model.parameters(), cfg.grad_clip)
            self.task_opt.step()

            losses.append(loss.item())
            fracs.append(gate.float().mean().item())
            sims.append(batch_similarity(x, x_aug))

        for name, p in self.model.named_parameters():
            if not torch.isfinite(p).all():
                raise TrainingDivergedError(f"non-finite task parameter {name} after epoch {t}")

        record = {
            "epoch": t,
            "lr": lr_t,
            "curriculum_p": p_gate,
            "aug_fraction": sum(fracs) / len(fracs),
            "train_loss": sum(losses) / len(losses),
            "mean_similarity": sum(sims) / len(sims),
        }
        self.model.eval()
        with torch.no_grad():
            record["val_loss"] = float(
                F.cross_entropy(self.model(self.val_x), self.val_y)
            )
        if self.test_x is not None:
            per_class, overall = per_class_accuracy(
                self.model, self.test_x, self.test_y, self.model.num_classes
            )
            record["test_acc"] = overall
            record["per_class_acc"] = per_class
        self.epoch = t + 1
        return record

    def run(self, epochs: Optional[int] = None, log=None) -> list[dict]:
        total = self.config.epochs if epochs is None else epochs
        records = []
        while self.epoch < total:
            record = self.train_epoch()
            records.append(record)
            if log is not None:
                log(record)
        return records

    # -- checkpointing -----------------------------------------------------------

    def state_dict(self) -> dict:
        state = {
            "model": self.model.state_dict(),
            "task_opt": self.task_opt.state_dict(),
            "epoch": self.epoch,
            "rngs": {k: g.get_state() for k, g in self.rngs.items()},
            "val_pos": self._val_pos,
            "val_perm": self._val_perm,
        }
        if self.policy is not None:
            state["policy"] = self.policy.state_dict()
            state["policy_opt"] = self.policy_opt.state_dict()
        return state

    def load_state_dict(self, state: dict) -> None:
        self.model.load_state_dict(state["model"])
        self.task_opt.load_state_dict(state["task_opt"])
        self.epoch = state["epoch"]
        for k, g in self.rngs.items():
            g.set_state(state["rngs"][k])
        self._val_pos = state["val_pos"]
        self._val_perm = state["val_perm"]
        if self.policy is not None and "policy" in state:
            self.policy.load_state_dict(state["policy"])
            self.policy_opt.load_state_dict(state["policy_opt"])
