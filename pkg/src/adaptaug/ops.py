"""Differentiable image augmentation operations and their registry.

Images are float tensors in [0, 1], shaped (C, H, W) or batched (B, C, H, W).
Every operation maps a normalized magnitude lambda in [0, 1] to its native
parameter through an affine map over a declared range, applies the transform,
and clamps the result back to [0, 1].  Geometric transforms use bilinear
resampling with zero padding.  Operations whose forward pass quantizes
(Posterize, Equalize) reattach pixel gradients with a straight-through
identity so gradient flow through compositions never dies.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from typing import Callable, Iterator, Optional, Sequence

import torch
import torch.nn.functional as F
import yaml

from .errors import ConfigurationError

Tensor = torch.Tensor

# Reference edge length for ranges declared in pixels (TranslateX/Y, Cutout).
PIXEL_RANGE_BASE = 32

_LUMA = (0.299, 0.587, 0.114)


class ApplicationCounter:
    """Counts op applications per image (a batched call counts its batch size)."""

    def __init__(self) -> None:
        self.count = 0

    def __int__(self) -> int:
        return self.count


_active_counters: list[ApplicationCounter] = []


class count_applications:
    """Context manager exposing the op-application counter.

    >>> with count_applications() as c:
    ...     apply_op(x, op, 0.5)
    >>> c.count
    1
    """

    def __enter__(self) -> ApplicationCounter:
        self._counter = ApplicationCounter()
        _active_counters.append(self._counter)
        return self._counter

    def __exit__(self, *exc) -> None:
        _active_counters.remove(self._counter)


def _tick(n_images: int) -> None:
    for c in _active_counters:
        c.count += n_images


@dataclass(frozen=True)
class AugmentationOp:
    """One named transform plus its magnitude and differentiability metadata.

    smooth_lambda marks ops whose native parameter enters the kernel smoothly,
    so pathwise autograd w.r.t. lambda is exact.  pixel_grad is "exact" when
    autograd through pixels is the true (a.e.) derivative and "ste" when the
    forward quantizes and the backward treats it as identity.
    """

    name: str
    magnitude_range: tuple[float, float]
    discrete: bool
    uses_magnitude: bool
    smooth_lambda: bool
    pixel_grad: str
    kernel: Callable = field(repr=False, compare=False)

    def __post_init__(self) -> None:
        if self.uses_magnitude and not self.magnitude_range[0] < self.magnitude_range[1]:
            raise ConfigurationError(
                f"{self.name}: magnitude range must satisfy low < high, "
                f"got {self.magnitude_range}"
            )


def _round_half_up(v: float) -> float:
    return math.floor(v + 0.5)


def map_magnitude(op: AugmentationOp, lam: float) -> float:
    """Affine map of lambda in [0,1] onto the op's native parameter range.

    Discrete ops (Posterize, Solarize) are rounded to their nearest valid
    level; the rounding applies to the forward value only (gradients use the
    straight-through rule in the composer).
    """
    if not op.uses_magnitude:
        return 0.0
    low, high = op.magnitude_range
    value = low + lam * (high - low)
    if op.discrete:
        if op.name == "Posterize":
            value = _round_half_up(value)
        elif op.name == "Solarize":
            value = _round_half_up(value * 255.0) / 255.0
        else:
            value = _round_half_up(value)
    return value


def _map_magnitude_tensor(op: AugmentationOp, lam: Tensor) -> Tensor:
    """Tensor version of map_magnitude; discrete rounding is straight-through."""
    low, high = op.magnitude_range
    value = low + lam * (high - low)
    if op.discrete:
        if op.name == "Solarize":
            rounded = torch.floor(value * 255.0 + 0.5) / 255.0
        else:
            rounded = torch.floor(value + 0.5)
        value = value + (rounded - value).detach()
    return value


# ---------------------------------------------------------------------------
# Kernels.  Each takes x (B, C, H, W) and a per-sample native parameter (B,).
# ---------------------------------------------------------------------------


def _affine_apply(x: Tensor, theta: Tensor) -> Tensor:
    grid = F.affine_grid(theta, list(x.shape), align_corners=False)
    return F.grid_sample(x, grid, mode="bilinear", padding_mode="zeros", align_corners=False)


def _rows(a, b, c, d, e, f_):
    def as_col(v, like):
        if isinstance(v, Tensor):
            return v
        return torch.full_like(like, float(v))

    ref = next(v for v in (a, b, c, d, e, f_) if isinstance(v, Tensor))
    cols = [as_col(v, ref) for v in (a, b, c, d, e, f_)]
    return torch.stack(cols, dim=1).reshape(-1, 2, 3)


def _shear_x(x: Tensor, s: Tensor, rng=None) -> Tensor:
    return _affine_apply(x, _rows(1.0, s, 0.0, 0.0, 1.0, 0.0))


def _shear_y(x: Tensor, s: Tensor, rng=None) -> Tensor:
    return _affine_apply(x, _rows(1.0, 0.0, 0.0, s, 1.0, 0.0))


def _translate_x(x: Tensor, px: Tensor, rng=None) -> Tensor:
    # px is declared at the PIXEL_RANGE_BASE edge; scaling by the base (not the
    # actual width) keeps the shift proportional on any image size.
    shift = px * (2.0 / PIXEL_RANGE_BASE)
    return _affine_apply(x, _rows(1.0, 0.0, -shift, 0.0, 1.0, 0.0))


def _translate_y(x: Tensor, px: Tensor, rng=None) -> Tensor:
    shift = px * (2.0 / PIXEL_RANGE_BASE)
    return _affine_apply(x, _rows(1.0, 0.0, 0.0, 0.0, 1.0, -shift))


def _rotate(x: Tensor, deg: Tensor, rng=None) -> Tensor:
    rad = deg * (math.pi / 180.0)
    ca, sa = torch.cos(rad), torch.sin(rad)
    return _affine_apply(x, _rows(ca, -sa, 0.0, sa, ca, 0.0))


def _identity(x: Tensor, param: Tensor, rng=None) -> Tensor:
    return x


def _flip(x: Tensor, param: Tensor, rng=None) -> Tensor:
    return x.flip(-1)


def _invert(x: Tensor, param: Tensor, rng=None) -> Tensor:
    return 1.0 - x


def _auto_contrast(x: Tensor, param: Tensor, rng=None) -> Tensor:
    mn = x.amin(dim=(-2, -1), keepdim=True)
    mx = x.amax(dim=(-2, -1), keepdim=True)
    flat = (mx - mn) <= 1e-8
    scale = torch.where(flat, torch.ones_like(mx), 1.0 / (mx - mn).clamp_min(1e-8))
    offset = torch.where(flat, torch.zeros_like(mn), mn)
    return (x - offset) * scale


def _equalize(x: Tensor, param: Tensor, rng=None) -> Tensor:
    with torch.no_grad():
        b, c, h, w = x.shape
        xi = (x.detach() * 255.0).round().clamp(0, 255).long().reshape(b * c, h * w)
        hist = torch.zeros(b * c, 256, dtype=torch.float32, device=x.device)
        hist.scatter_add_(1, xi, torch.ones_like(xi, dtype=torch.float32))
        cdf = hist.cumsum(dim=1)
        # First occupied bin per channel; channels with a single level pass through.
        bins = torch.arange(256, device=x.device).unsqueeze(0)
        first = torch.where(hist > 0, bins, 256).min(dim=1, keepdim=True).values.clamp(max=255)
        cdf_min = cdf.gather(1, first)
        denom = (h * w) - cdf_min
        lut = torch.floor((cdf - cdf_min) / denom.clamp_min(1.0) * 255.0 + 0.5).clamp(0, 255)
        degenerate = denom.squeeze(1) <= 0
        eq = lut.gather(1, xi) / 255.0
        eq[degenerate] = xi[degenerate].float() / 255.0
        eq = eq.reshape(b, c, h, w).to(x.dtype)
    return x + (eq - x).detach()


def _solarize(x: Tensor, strength: Tensor, rng=None) -> Tensor:
    # Strict inequality makes strength 0 (threshold 1) an exact no-op.
    thresh = (1.0 - strength).detach().view(-1, 1, 1, 1)
    return torch.where(x > thresh, 1.0 - x, x)


def _posterize(x: Tensor, bits_removed: Tensor, rng=None) -> Tensor:
    keep = (8.0 - bits_removed).detach().view(-1, 1, 1, 1)
    levels = torch.pow(2.0, keep) - 1.0
    with torch.no_grad():
        q = torch.round(x.detach() * levels) / levels
    return x + (q - x).detach()


def _brightness(x: Tensor, factor: Tensor, rng=None) -> Tensor:
    return x * factor.view(-1, 1, 1, 1)


def _contrast(x: Tensor, factor: Tensor, rng=None) -> Tensor:
    if x.shape[1] == 3:
        weights = x.new_tensor(_LUMA).view(1, 3, 1, 1)
        gray = (x * weights).sum(dim=1, keepdim=True)
    else:
        gray = x
    pivot = gray.mean(dim=(-2, -1), keepdim=True)
    return pivot + factor.view(-1, 1, 1, 1) * (x - pivot)


def _color(x: Tensor, factor: Tensor, rng=None) -> Tensor:
    if x.shape[1] != 3:
        return x  # hue is undefined on non-RGB data
    weights = x.new_tensor(_LUMA).view(1, 3, 1, 1)
    gray = (x * weights).sum(dim=1, keepdim=True)
    return gray + factor.view(-1, 1, 1, 1) * (x - gray)


def _smooth3x3(x: Tensor) -> Tensor:
    # [[1,1,1],[1,5,1],[1,1,1]] / 13 stencil via shifted slices (much faster
    # than a grouped conv on CPU).
    h, w = x.shape[-2], x.shape[-1]
    xp = F.pad(x, (1, 1, 1, 1))
    out = 5.0 * x
    for dy in (0, 1, 2):
        for dx in (0, 1, 2):
            if dy == 1 and dx == 1:
                continue
            out = out + xp[..., dy : dy + h, dx : dx + w]
    return out / 13.0


def _sharpness(x: Tensor, factor: Tensor, rng=None) -> Tensor:
    blur = _smooth3x3(x)
    # Smoothing leaves the 1-px border untouched, so factor=1 is exact identity.
    smooth = x.clone()
    if x.shape[-1] > 2 and x.shape[-2] > 2:
        smooth[..., 1:-1, 1:-1] = blur[..., 1:-1, 1:-1]
    return smooth + factor.view(-1, 1, 1, 1) * (x - smooth)


def _cutout(x: Tensor, side_px: Tensor, rng: Optional[torch.Generator] = None) -> Tensor:
    b, _, h, w = x.shape
    scale = min(h, w) / PIXEL_RANGE_BASE
    side = (side_px.detach() * scale).round().long().clamp(min=0)
    if rng is None:
        cy = torch.full((b,), h // 2, dtype=torch.long)
        cx = torch.full((b,), w // 2, dtype=torch.long)
    else:
        cy = torch.randint(0, h, (b,), generator=rng)
        cx = torch.randint(0, w, (b,), generator=rng)
    ys = torch.arange(h).view(1, h, 1)
    xs = torch.arange(w).view(1, 1, w)
    half = side.view(-1, 1, 1) // 2
    inside = (
        (ys >= cy.view(-1, 1, 1) - half)
        & (ys < cy.view(-1, 1, 1) - half + side.view(-1, 1, 1))
        & (xs >= cx.view(-1, 1, 1) - half)
        & (xs < cx.view(-1, 1, 1) - half + side.view(-1, 1, 1))
    )
    mask = (~inside).unsqueeze(1).to(dtype=x.dtype, device=x.device)
    return x * mask


# name -> (kernel, magnitude_range, discrete, uses_magnitude, smooth_lambda, pixel_grad)
_OP_TABLE: dict[str, tuple] = {
    "ShearX": (_shear_x, (-0.3, 0.3), False, True, True, "exact"),
    "ShearY": (_shear_y, (-0.3, 0.3), False, True, True, "exact"),
    "TranslateX": (_translate_x, (-10.0, 10.0), False, True, True, "exact"),
    "TranslateY": (_translate_y, (-10.0, 10.0), False, True, True, "exact"),
    "Rotate": (_rotate, (-30.0, 30.0), False, True, True, "exact"),
    "AutoContrast": (_auto_contrast, (0.0, 1.0), False, False, False, "exact"),
    "Invert": (_invert, (0.0, 1.0), False, False, False, "exact"),
    "Equalize": (_equalize, (0.0, 1.0), False, False, False, "ste"),
    # Solarize strength s inverts pixels above threshold 1 - s.
    "Solarize": (_solarize, (0.0, 1.0), True, True, False, "exact"),
    # Posterize magnitude counts bits removed from an 8-bit depth.
    "Posterize": (_posterize, (0.0, 4.0), True, True, False, "ste"),
    "Contrast": (_contrast, (0.1, 1.9), False, True, True, "exact"),
    "Color": (_color, (0.1, 1.9), False, True, True, "exact"),
    "Brightness": (_brightness, (0.1, 1.9), False, True, True, "exact"),
    "Sharpness": (_sharpness, (0.1, 1.9), False, True, True, "exact"),
    "Cutout": (_cutout, (0.0, 20.0), False, True, False, "exact"),
    "Flip": (_flip, (0.0, 1.0), False, False, False, "exact"),
    "Identity": (_identity, (0.0, 1.0), False, False, False, "exact"),
}

# The classical transform list names 15 ops besides Identity; the 16th slot is
# conventionally a flip-type op and stays configurable here (default Flip).
DEFAULT_OP_NAMES: tuple[str, ...] = (
    "ShearX",
    "ShearY",
    "TranslateX",
    "TranslateY",
    "Rotate",
    "AutoContrast",
    "Invert",
    "Equalize",
    "Solarize",
    "Posterize",
    "Contrast",
    "Color",
    "Brightness",
    "Sharpness",
    "Cutout",
    "Flip",
    "Identity",
)


def _build_op(name: str) -> AugmentationOp:
    if name not in _OP_TABLE:
        raise ConfigurationError(
            f"unknown augmentation op {name!r}; known ops: {sorted(_OP_TABLE)}"
        )
    kernel, mag_range, discrete, uses_mag, smooth, pgrad = _OP_TABLE[name]
    return AugmentationOp(
        name=name,
        magnitude_range=mag_range,
        discrete=discrete,
        uses_magnitude=uses_mag,
        smooth_lambda=smooth,
        pixel_grad=pgrad,
        kernel=kernel,
    )


class OpRegistry:
    """Immutable, ordered collection of augmentation ops.

    Safe to share across threads once built; construction is the only place
    unknown names can fail.
    """

    def __init__(self, names: Sequence[str] = DEFAULT_OP_NAMES) -> None:
        if len(set(names)) != len(names):
            raise ConfigurationError(f"duplicate op names in registry: {list(names)}")
        self.ops: tuple[AugmentationOp, ...] = tuple(_build_op(n) for n in names)
        self._index = {op.name: i for i, op in enumerate(self.ops)}

    def __len__(self) -> int:
        return len(self.ops)

    def __iter__(self) -> Iterator[AugmentationOp]:
        return iter(self.ops)

    def __getitem__(self, i: int) -> AugmentationOp:
        return self.ops[i]

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(op.name for op in self.ops)

    def index(self, name: str) -> int:
        return self._index[name]

    def by_name(self, name: str) -> AugmentationOp:
        return self.ops[self._index[name]]

    def subset(self, names: Sequence[str]) -> "OpRegistry":
        return OpRegistry(tuple(names))

    def continuous_names(self) -> tuple[str, ...]:
        """Ops with exact pixel gradients and a smooth lambda path."""
        return tuple(
            op.name for op in self.ops if op.pixel_grad == "exact" and op.smooth_lambda
        )

    def magnitude_mask(self, **kw) -> Tensor:
        """Boolean (n,) tensor marking ops that consume a magnitude."""
        return torch.tensor([op.uses_magnitude for op in self.ops], **kw)

    def to_config(self) -> list[dict]:
        return [
            {
                "name": op.name,
                "low": op.magnitude_range[0],
                "high": op.magnitude_range[1],
                "discrete": op.discrete,
                "uses_magnitude": op.uses_magnitude,
            }
            for op in self.ops
        ]

    def save(self, path) -> None:
        with open(path, "w") as f:
            yaml.safe_dump({"ops": self.to_config()}, f, sort_keys=False)

    @classmethod
    def load(cls, path) -> "OpRegistry":
        with open(path) as f:
            raw = yaml.safe_load(f)
        entries = raw["ops"] if isinstance(raw, dict) else raw
        names = []
        for entry in entries:
            name = entry["name"] if isinstance(entry, dict) else str(entry)
            if name not in _OP_TABLE:
                raise ConfigurationError(f"registry file lists unknown op {name!r}")
            if isinstance(entry, dict):
                built = _build_op(name)
                declared = (float(entry.get("low", built.magnitude_range[0])),
                            float(entry.get("high", built.magnitude_range[1])))
                if declared != built.magnitude_range:
                    raise ConfigurationError(
                        f"{name}: declared range {declared} does not match "
                        f"implemented range {built.magnitude_range}"
                    )
            names.append(name)
        return cls(tuple(names))

    def fingerprint(self) -> str:
        payload = json.dumps(self.to_config(), sort_keys=True).encode()
        return hashlib.sha256(payload).hexdigest()


def apply_op(
    x: Tensor,
    op: AugmentationOp,
    lam,
    rng: Optional[torch.Generator] = None,
) -> Tensor:
    """Apply one op at normalized magnitude lam; output clamped to [0, 1].

    Accepts a single (C, H, W) image or a (B, C, H, W) batch; lam may be a
    float (shared) or a per-sample tensor of shape (B,).  Identity and Flip
    return pixel values bit-identical to the input.
    """
    single = x.dim() == 3
    xb = x.unsqueeze(0) if single else x
    b = xb.shape[0]
    if isinstance(lam, Tensor):
        lam_t = lam.reshape(-1).to(dtype=xb.dtype)
        if lam_t.numel() == 1 and b > 1:
            lam_t = lam_t.expand(b)
        elif lam_t.numel() != b:
            raise ValueError(
                f"lambda has {lam_t.numel()} entries for a batch of {b} images"
            )
    else:
        lam_t = torch.full((b,), float(lam), dtype=xb.dtype)
    param = _map_magnitude_tensor(op, lam_t) if op.uses_magnitude else lam_t
    _tick(b)
    out = op.kernel(xb, param, rng)
    if op.name not in ("Identity", "Flip"):
        out = out.clamp(0.0, 1.0)
    return out.squeeze(0) if single else out


def perturb_magnitude(
    lam: Tensor, delta: float, rng: Optional[torch.Generator] = None
) -> Tensor:
    """Add independent uniform noise in [-delta, delta] to each entry, clamped to [0, 1]."""
    if delta < 0:
        raise ValueError(f"delta must be >= 0, got {delta}")
    if delta == 0:
        return lam
    noise = (torch.rand(lam.shape, generator=rng, dtype=lam.dtype) * 2.0 - 1.0) * delta
    return (lam + noise).clamp(0.0, 1.0)


def default_registry() -> OpRegistry:
    return OpRegistry(DEFAULT_OP_NAMES)
