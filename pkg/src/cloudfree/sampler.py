"""Few-step ancestral sampling for a data-prediction (or noise-prediction) model.

The reverse update is written in terms of a noise estimate. A model that
predicts the clean image is mapped to that slot by inverting the forward
process, so both parameterizations share one update rule. Skipping steps
uses the effective ``alpha = alpha_bar(t) / alpha_bar(t_prev)`` between the
selected timesteps; the last jump always lands on ``t_prev = 0``, where the
update returns the (clamped) clean-image estimate exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import torch
from torch import Tensor

from cloudfree.schedule import NoiseSchedule, eps_from_y0, y0_from_eps


@dataclass
class SamplerConfig:
    steps: int = 1
    seed: int = 0
    use_ema: bool = True
    clamp: bool = True

    def validate(self, T: int) -> None:
        if not 1 <= self.steps <= T:
            raise ValueError(f"steps={self.steps} outside 1..{T}")


def step_subsequence(T: int, k: int) -> list[int]:
    """``k`` uniformly spaced timesteps from ``T`` downwards, e.g. (8, 4) -> [8, 6, 4, 2]."""
    if not 1 <= k <= T:
        raise ValueError(f"k={k} outside 1..{T}")
    return [T - (i * T) // k for i in range(k)]


def ancestral_step(
    y_t: Tensor, t: int, y0_hat: Tensor, s: NoiseSchedule, z: Tensor, t_prev: int | None = None
) -> Tensor:
    """One reverse step from ``t`` to ``t_prev`` (default ``t - 1``)."""
    if t_prev is None:
        t_prev = t - 1
    if not 0 <= t_prev < t:
        raise ValueError(f"t_prev={t_prev} must lie in [0, {t})")
    if y0_hat.shape != y_t.shape or z.shape != y_t.shape:
        raise ValueError("y_t, y0_hat and z must share a shape")
    ab_t = s.alpha_bar(t)
    a = ab_t / s.alpha_bar(t_prev)
    eps_hat = eps_from_y0(s, y_t, y0_hat, t)
    mean = (y_t - (1.0 - a) / math.sqrt(1.0 - ab_t) * eps_hat) / math.sqrt(a)
    return mean + math.sqrt(1.0 - a) * z


def predict_y0(
    model: Callable, y_t: Tensor, t: int, x: Tensor, s: NoiseSchedule, target: str = "data", clamp: bool = True
) -> Tensor:
    tt = torch.full((y_t.shape[0],), t, dtype=torch.long)
    out = model(y_t, tt, x)
    if target == "noise":
        out = y0_from_eps(s, y_t, out, t)
    elif target != "data":
        raise ValueError(f"unknown target {target!r}")
    return out.clamp(-1.0, 1.0) if clamp else out


@torch.no_grad()
def sample(
    model: Callable, x: Tensor, s: NoiseSchedule, cfg: SamplerConfig, target: str = "data"
) -> Tensor:
    """Generate clean images for a batch of condition stacks ``x`` ``[B, N, C, H, W]``.

    ``model(y_t, t, x)`` must return a ``[B, C, H, W]`` prediction. Returns
    ``[B, C, H, W]``. A single stack ``[N, C, H, W]`` is treated as ``B = 1``.
    """
    cfg.validate(s.T)
    if x.dim() == 4:
        x = x.unsqueeze(0)
    if x.dim() != 5:
        raise ValueError(f"condition must be [B, N, C, H, W] or [N, C, H, W], got {tuple(x.shape)}")
    gen = torch.Generator().manual_seed(cfg.seed)
    b, _, c, h, w = x.shape
    y = torch.randn((b, c, h, w), generator=gen, dtype=x.dtype)
    steps = step_subsequence(s.T, cfg.steps)
    for i, t in enumerate(steps):
        t_prev = steps[i + 1] if i + 1 < len(steps) else 0
        y0_hat = predict_y0(model, y, t, x, s, target, cfg.clamp)
        if t_prev == 0:
            # the jump to 0 reduces algebraically to y0_hat; skip the round-off
            y = y0_hat
            break
        z = torch.randn(y.shape, generator=gen, dtype=y.dtype)
        y = ancestral_step(y, t, y0_hat, s, z, t_prev)
    if not torch.isfinite(y).all():
        raise FloatingPointError("sampler produced non-finite values")
    return y
