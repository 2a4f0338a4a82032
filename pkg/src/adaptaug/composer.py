"""Composition of sampled ops plus its differentiable relaxation.

Forward passes use the k sampled operations applied in order.  Backward
passes route probability gradients through a weighted sum over all ordered
op pairs and magnitude gradients through a straight-through rule that treats
the augmented image as identity in lambda (per-pixel derivative one, so the
lambda gradient is the plain sum of output-pixel gradients).

The pair sum caches the first-stage application of each op, so a full
relaxation on n ops costs n + n*(n-1) kernel invocations for the n*(n-1)
ordered-pair terms.
"""

from __future__ import annotations

from typing import Optional, Sequence

import torch

from .ops import OpRegistry, apply_op, perturb_magnitude
from .policy import PolicyOutput

Tensor = torch.Tensor

RELAXATION_MODES = ("full_pair_sum", "sampled_neighborhood")
LAMBDA_GRAD_MODES = ("ste", "pathwise")


def compose_sampled(
    x: Tensor,
    ops: Sequence[int],
    lam: Tensor,
    registry: OpRegistry,
    rng: Optional[torch.Generator] = None,
) -> Tensor:
    """Sequentially apply the ops at their magnitudes (first index first).

    lam is indexed by op id, length n (or (B, n) for batched x).
    """
    ops = [int(j) for j in ops]
    if len(set(ops)) != len(ops):
        raise ValueError(f"sampled op indices must be distinct, got {ops}")
    lam2 = lam.reshape(1, -1) if lam.dim() == 1 else lam
    out = x
    for j in ops:
        out = apply_op(out, registry[j], lam2[:, j], rng)
    return out


def compose_sampled_batch(
    x: Tensor,
    sampled: Tensor,
    lam: Tensor,
    registry: OpRegistry,
    rng: Optional[torch.Generator] = None,
) -> Tensor:
    """Per-sample op chains: sampled is (B, k) indices, lam is (B, n).

    Grouped by op within each chain slot so every kernel runs batched.
    """
    out = x.clone()
    for t in range(sampled.shape[1]):
        slot = sampled[:, t]
        for j in slot.unique().tolist():
            rows = slot == j
            out[rows] = apply_op(out[rows], registry[j], lam[rows, j], rng)
    return out


def neighborhood_pair_mask(n: int, sampled: Tensor) -> Tensor:
    """Pairs sharing at least one index with the sampled set; diag excluded.

    sampled: (k,) or (B, k) -> mask (n, n) or (B, n, n).
    """
    single = sampled.dim() == 1
    s = sampled.reshape(1, -1) if single else sampled
    b = s.shape[0]
    hit = torch.zeros(b, n, dtype=torch.bool)
    hit.scatter_(1, s.long(), True)
    mask = hit.unsqueeze(2) | hit.unsqueeze(1)
    mask &= ~torch.eye(n, dtype=torch.bool).unsqueeze(0)
    return mask.squeeze(0) if single else mask


def relaxed_composition(
    x: Tensor,
    p: Tensor,
    lam: Tensor,
    registry: OpRegistry,
    renormalize: bool = True,
    pair_mask: Optional[Tensor] = None,
    rng: Optional[torch.Generator] = None,
) -> Tensor:
    """Probability-weighted sum over ordered op pairs (j1, j2), j1 != j2.

    Each term is op_j2(op_j1(x)) weighted by p_j1 * p_j2.  The raw weights
    sum to 1 - sum_j p_j^2; with renormalize=True they are divided by that
    total so the output is a convex combination.  Differentiable w.r.t.
    p, lam, and x.
    """
    n = len(registry)
    if n < 2:
        raise ValueError("relaxation needs at least two ops")
    single = x.dim() == 3
    xb = x.unsqueeze(0) if single else x
    b = xb.shape[0]
    pb = p.reshape(1, -1).expand(b, -1) if p.dim() == 1 else p
    lamb = lam.reshape(1, -1).expand(b, -1) if lam.dim() == 1 else lam
    if pb.shape != (b, n):
        raise ValueError(f"p shape {tuple(p.shape)} incompatible with registry size {n}")

    weights = pb.unsqueeze(2) * pb.unsqueeze(1)  # (B, n, n)
    off_diag = ~torch.eye(n, dtype=torch.bool)
    keep = off_diag.unsqueeze(0).expand(b, -1, -1)
    if pair_mask is not None:
        pm = pair_mask.unsqueeze(0) if pair_mask.dim() == 2 else pair_mask
        keep = keep & pm
    weights = weights * keep.to(weights.dtype)

    if renormalize:
        total = weights.sum(dim=(1, 2), keepdim=True)
        if (total.detach() <= 1e-12).any():
            raise ValueError(
                "degenerate distribution: pair-weight mass is zero (one-hot p?)"
            )
        weights = weights / total

    # Pairs with zero weight for the whole batch are skipped (relevant in
    # neighborhood mode); full mode evaluates every ordered pair.
    needed = keep.any(dim=0)
    first_needed = needed.any(dim=1)

    kernel_grad = xb.requires_grad or lamb.requires_grad
    if not kernel_grad:
        # Pair images are constants here, so gradients only flow through the
        # weights; second-stage kernels run once per op on the concatenated
        # first-stage results.
        b, c, h, w = xb.shape
        with torch.no_grad():
            stage1 = {
                j1: apply_op(xb, registry[j1], lamb[:, j1], rng)
                for j1 in range(n)
                if first_needed[j1]
            }
        out = torch.zeros_like(xb)
        for j2 in range(n):
            j1s = [j1 for j1 in range(n) if needed[j1, j2]]
            if not j1s:
                continue
            with torch.no_grad():
                stacked = torch.cat([stage1[j1] for j1 in j1s], dim=0)
                lam_rep = lamb[:, j2].repeat(len(j1s))
                pairs = apply_op(stacked, registry[j2], lam_rep, rng)
                pairs = pairs.reshape(len(j1s), b, c, h, w)
            out = out + torch.einsum("bm,mbchw->bchw", weights[:, j1s, j2], pairs)
        return out.squeeze(0) if single else out

    stage1 = {}
    for j1 in range(n):
        if first_needed[j1]:
            stage1[j1] = apply_op(xb, registry[j1], lamb[:, j1], rng)

    out = torch.zeros_like(xb)
    for j1 in range(n):
        if not first_needed[j1]:
            continue
        y1 = stage1[j1]
        for j2 in range(n):
            if j1 == j2 or not needed[j1, j2]:
                continue
            y2 = apply_op(y1, registry[j2], lamb[:, j2], rng)
            out = out + weights[:, j1, j2].view(-1, 1, 1, 1) * y2
    return out.squeeze(0) if single else out


class _LambdaStraightThrough(torch.autograd.Function):
    """Identity on the image; backward adds sum-of-pixel-gradients to lambda.

    The mask selects (sampled, magnitude-consuming) ops; everything else
    receives an exact zero.
    """

    @staticmethod
    def forward(ctx, image: Tensor, lam: Tensor, mask: Tensor) -> Tensor:
        ctx.save_for_backward(mask)
        ctx.batched = image.dim() == 4
        return image

    @staticmethod
    def backward(ctx, grad_out: Tensor):
        (mask,) = ctx.saved_tensors
        if ctx.batched:
            pixel_sum = grad_out.sum(dim=(1, 2, 3)).unsqueeze(-1)
        else:
            pixel_sum = grad_out.sum()
        return grad_out, pixel_sum * mask, None


def straight_through_lambda_grad(
    pixel_grad: Tensor, sampled: Tensor, registry: OpRegistry
) -> Tensor:
    """Gradient of the loss w.r.t. lambda under the straight-through rule.

    pixel_grad: loss gradient w.r.t. every output pixel, (C, H, W) or
    (B, C, H, W).  Sampled magnitude ops get the sum over channels and
    pixels; unsampled or magnitude-free ops get exactly zero.
    """
    n = len(registry)
    single = pixel_grad.dim() == 3
    g = pixel_grad.unsqueeze(0) if single else pixel_grad
    s = sampled.reshape(1, -1) if sampled.dim() == 1 else sampled
    mag = registry.magnitude_mask(dtype=g.dtype)
    hit = torch.zeros(g.shape[0], n, dtype=g.dtype)
    hit.scatter_(1, s.long(), 1.0)
    out = g.sum(dim=(1, 2, 3)).unsqueeze(-1) * hit * mag
    return out.squeeze(0) if single else out


def sampled_magnitude_mask(
    sampled: Tensor, registry: OpRegistry, dtype=torch.float32
) -> Tensor:
    """(B, n) float mask: 1 where op is sampled and consumes a magnitude."""
    n = len(registry)
    s = sampled.reshape(1, -1) if sampled.dim() == 1 else sampled
    hit = torch.zeros(s.shape[0], n, dtype=dtype)
    hit.scatter_(1, s.long(), 1.0)
    return hit * registry.magnitude_mask(dtype=dtype)


def forward_sampled_backward_relaxed(
    x: Tensor,
    policy_out: PolicyOutput,
    sampled: Tensor,
    registry: OpRegistry,
    renormalize: bool = True,
    relaxation_mode: str = "full_pair_sum",
    lambda_grad: str = "ste",
    delta: float = 0.0,
    rng: Optional[torch.Generator] = None,
) -> Tensor:
    """Sampled composition in value, relaxed composition in gradient.

    Output pixels equal compose_sampled exactly; gradients w.r.t. p and x
    are those of relaxed_composition.  With lambda_grad="ste" the magnitude
    vector receives straight-through gradients (and its pathwise route is
    severed); "pathwise" instead differentiates through the kernels, which
    only makes sense for smooth ops and delta=0.
    """
    if relaxation_mode not in RELAXATION_MODES:
        raise ValueError(f"relaxation_mode must be one of {RELAXATION_MODES}")
    if lambda_grad not in LAMBDA_GRAD_MODES:
        raise ValueError(f"lambda_grad must be one of {LAMBDA_GRAD_MODES}")
    if lambda_grad == "pathwise" and delta != 0.0:
        raise ValueError("magnitude perturbation requires the straight-through mode")

    single = x.dim() == 3
    xb = x.unsqueeze(0) if single else x
    b = xb.shape[0]
    p = policy_out.p.reshape(1, -1).expand(b, -1) if policy_out.p.dim() == 1 else policy_out.p
    lam = (
        policy_out.lam.reshape(1, -1).expand(b, -1)
        if policy_out.lam.dim() == 1
        else policy_out.lam
    )
    s = sampled.reshape(1, -1).expand(b, -1) if sampled.dim() == 1 else sampled

    if lambda_grad == "ste":
        lam_exec = lam.detach()
        if delta > 0:
            lam_exec = perturb_magnitude(lam_exec, delta, rng)
    else:
        lam_exec = lam

    with torch.no_grad():
        value = compose_sampled_batch(xb.detach(), s, lam_exec, registry, rng)

    pair_mask = None
    if relaxation_mode == "sampled_neighborhood":
        pair_mask = neighborhood_pair_mask(len(registry), s)
        renormalize = True
    relaxed = relaxed_composition(
        xb, p, lam_exec, registry, renormalize=renormalize, pair_mask=pair_mask, rng=rng
    )

    out = value + (relaxed - relaxed.detach())
    if lambda_grad == "ste":
        mask = sampled_magnitude_mask(s, registry, dtype=lam.dtype)
        out = _LambdaStraightThrough.apply(out, lam, mask)
    return out.squeeze(0) if single else out
