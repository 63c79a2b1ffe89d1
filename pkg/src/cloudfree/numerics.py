"""Tensor primitives used by every layer of the denoiser.

All functions accept either a single feature map ``[C, H, W]`` or a batch
``[B, C, H, W]`` and return the same rank they were given. They are thin,
shape-checked wrappers over torch so that autograd supplies the backward
pass; :func:`grad_check` is the independent finite-difference check of it.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import torch
import torch.nn.functional as F
from torch import Tensor


class ShapeError(ValueError):
    pass


@dataclass(frozen=True)
class ConvSpec:
    in_channels: int
    out_channels: int
    kernel: tuple[int, int] = (1, 1)
    stride: int = 1
    padding: int = 0
    groups: int = 1

    def __post_init__(self):
        if self.groups < 1 or self.in_channels % self.groups or self.out_channels % self.groups:
            raise ShapeError(
                f"groups={self.groups} must divide in_channels={self.in_channels} "
                f"and out_channels={self.out_channels}"
            )
        if self.stride < 1:
            raise ShapeError(f"stride must be >= 1, got {self.stride}")
        if self.padding < 0:
            raise ShapeError(f"padding must be >= 0, got {self.padding}")

    @property
    def weight_shape(self) -> tuple[int, int, int, int]:
        kh, kw = self.kernel
        return (self.out_channels, self.in_channels // self.groups, kh, kw)

    def output_hw(self, h: int, w: int) -> tuple[int, int]:
        kh, kw = self.kernel
        return (
            (h + 2 * self.padding - kh) // self.stride + 1,
            (w + 2 * self.padding - kw) // self.stride + 1,
        )


def _batched(x: Tensor) -> tuple[Tensor, bool]:
    if x.dim() == 3:
        return x.unsqueeze(0), True
    if x.dim() == 4:
        return x, False
    raise ShapeError(f"expected [C,H,W] or [B,C,H,W], got shape {tuple(x.shape)}")


def _restore(y: Tensor, squeezed: bool) -> Tensor:
    return y.squeeze(0) if squeezed else y


def conv2d(x: Tensor, spec: ConvSpec, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Cross-correlation (no kernel flip) with the geometry given by ``spec``."""
    xb, squeezed = _batched(x)
    if xb.shape[1] != spec.in_channels:
        raise ShapeError(f"input has {xb.shape[1]} channels, spec expects {spec.in_channels}")
    if tuple(weight.shape) != spec.weight_shape:
        raise ShapeError(f"weight shape {tuple(weight.shape)} != {spec.weight_shape}")
    if bias is not None and tuple(bias.shape) != (spec.out_channels,):
        raise ShapeError(f"bias shape {tuple(bias.shape)} != ({spec.out_channels},)")
    h, w = spec.output_hw(xb.shape[2], xb.shape[3])
    if h < 1 or w < 1:
        raise ShapeError(f"kernel {spec.kernel} does not fit input {tuple(xb.shape[2:])}")
    y = F.conv2d(xb, weight, bias, stride=spec.stride, padding=spec.padding, groups=spec.groups)
    return _restore(y, squeezed)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize each sample jointly over (C, H, W), then apply a per-channel affine."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    xb, squeezed = _batched(x)
    c = xb.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"affine params must have shape ({c},)")
    # single-group group norm is exactly this reduction
    y = F.group_norm(xb, 1, gamma, beta, eps)
    return _restore(y, squeezed)


def pool_global(x: Tensor, mode: str = "mean") -> Tensor:
    xb, squeezed = _batched(x)
    if mode == "mean":
        y = xb.mean(dim=(2, 3), keepdim=True)
    elif mode == "max":
        y = xb.amax(dim=(2, 3), keepdim=True)
    else:
        raise ValueError(f"unknown pooling mode {mode!r}")
    return _restore(y, squeezed)


def pixel_shuffle(x: Tensor, r: int) -> Tensor:
    """Depth-to-space: ``[r*r*C, H, W] -> [C, r*H, r*W]``."""
    xb, squeezed = _batched(x)
    if r < 1 or xb.shape[1] % (r * r):
        raise ShapeError(f"channel count {xb.shape[1]} not divisible by r^2={r * r}")
    return _restore(F.pixel_shuffle(xb, r), squeezed)


def pixel_unshuffle(x: Tensor, r: int) -> Tensor:
    """Space-to-depth, the inverse of :func:`pixel_shuffle`."""
    xb, squeezed = _batched(x)
    if r < 1 or xb.shape[2] % r or xb.shape[3] % r:
        raise ShapeError(f"spatial dims {tuple(xb.shape[2:])} not divisible by r={r}")
    return _restore(F.pixel_unshuffle(xb, r), squeezed)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    if weight.dim() != 2 or x.shape[-1] != weight.shape[1]:
        raise ShapeError(f"cannot apply weight {tuple(weight.shape)} to input {tuple(x.shape)}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ShapeError(f"bias shape {tuple(bias.shape)} != ({weight.shape[0]},)")
    return F.linear(x, weight, bias)


def grad_check(
    f: Callable[..., Tensor],
    x: Tensor | Sequence[Tensor],
    h: float = 1e-5,
    max_coords: int | None = None,
    seed: int = 0,
) -> float:
    """Largest relative error between autograd and central differences.

    ``f`` maps the tensor(s) in ``x`` to a scalar. Tensors are promoted to
    float64 copies; the originals are left untouched. When ``max_coords`` is
    set, only that many randomly chosen coordinates (across all inputs) are
    perturbed.

    The relative error at each coordinate is ``|g_fd - g_ad| / max(|g_fd|,
    |g_ad|, 1e-8)``.
    """
    xs = [x] if isinstance(x, Tensor) else list(x)
    xs = [t.detach().to(torch.float64).clone().requires_grad_(True) for t in xs]

    out = f(*xs)
    if out.numel() != 1:
        raise ShapeError("grad_check needs a scalar-valued function")
    if not torch.isfinite(out):
        raise FloatingPointError("function value is not finite")
    analytic = torch.autograd.grad(out, xs, allow_unused=True)
    analytic = [torch.zeros_like(t) if g is None else g for t, g in zip(xs, analytic)]

    coords = [(i, j) for i, t in enumerate(xs) for j in range(t.numel())]
    if max_coords is not None and len(coords) > max_coords:
        gen = torch.Generator().manual_seed(seed)
        pick = torch.randperm(len(coords), generator=gen)[:max_coords]
        coords = [coords[k] for k in pick.tolist()]

    worst = 0.0
    with torch.no_grad():
        for i, j in coords:
            flat = xs[i].view(-1)
            orig = flat[j].item()
            flat[j] = orig + h
            fp = f(*xs).item()
            flat[j] = orig - h
            fm = f(*xs).item()
            flat[j] = orig
            if not (torch.isfinite(torch.tensor([fp, fm])).all()):
                raise FloatingPointError(f"non-finite evaluation at input {i}, coord {j}")
            g_fd = (fp - fm) / (2 * h)
            g_ad = analytic[i].view(-1)[j].item()
            denom = max(abs(g_fd), abs(g_ad), 1e-8)
            worst = max(worst, abs(g_fd - g_ad) / denom)
    return worst
