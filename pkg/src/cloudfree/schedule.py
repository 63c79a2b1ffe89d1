"""Noise schedules and the closed-form forward process.

Timesteps are 1-indexed: ``t`` ranges over ``1..T`` and ``alpha_bar(0) == 1``.
Tables are stored 0-indexed, so step ``t`` lives at position ``t - 1``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import Tensor

KINDS = ("linear", "cosine", "sigmoid")
BETA_MAX = 0.999

DEFAULT_PARAMS = {
    "linear": {"beta_start": 1e-4, "beta_end": 0.02},
    "cosine": {"s": 0.008},
    "sigmoid": {"start": -3.0, "end": 3.0},
}


@dataclass(frozen=True)
class NoiseSchedule:
    kind: str
    T: int
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray
    params: dict = field(default_factory=dict)

    def alpha(self, t: int) -> float:
        self._check_t(t)
        return float(self.alphas[t - 1])

    def alpha_bar(self, t: int) -> float:
        """``alpha_bar(0)`` is defined as 1."""
        if t == 0:
            return 1.0
        self._check_t(t)
        return float(self.alpha_bars[t - 1])

    def _check_t(self, t: int) -> None:
        if not 1 <= t <= self.T:
            raise ValueError(f"timestep {t} outside 1..{self.T}")

    def alpha_bar_at(self, t: Tensor) -> Tensor:
        """Vectorized lookup for a batch of 1-indexed timesteps."""
        if torch.any(t < 1) or torch.any(t > self.T):
            raise ValueError(f"timesteps outside 1..{self.T}")
        table = torch.as_tensor(self.alpha_bars)
        return table[t.long() - 1]


def _sigmoid(z):
    return 1.0 / (1.0 + np.exp(-z))


def _betas_from_alpha_bars(abar: np.ndarray) -> np.ndarray:
    """``abar`` holds f(0..T)/f(0); returns clipped per-step betas for t=1..T."""
    betas = 1.0 - abar[1:] / abar[:-1]
    return np.clip(betas, 0.0, BETA_MAX)


def build_schedule(kind: str = "sigmoid", T: int = 2000, params: dict | None = None) -> NoiseSchedule:
    """Build the beta/alpha/alpha-bar tables for one schedule family.

    Linear endpoints default to 1e-4 -> 0.02, scaled by ``1000 / T`` when
    ``T < 1000`` (capped at ``BETA_MAX``) so short chains still end near pure
    noise. Explicitly passed endpoints are used verbatim.
    """
    if kind not in KINDS:
        raise ValueError(f"unknown schedule kind {kind!r}; expected one of {KINDS}")
    if not isinstance(T, (int, np.integer)) or T < 1:
        raise ValueError(f"T must be a positive integer, got {T!r}")
    given = dict(params or {})
    unknown = set(given) - set(DEFAULT_PARAMS[kind])
    if unknown:
        raise ValueError(f"unknown {kind} schedule params: {sorted(unknown)}")
    p = {**DEFAULT_PARAMS[kind], **given}

    if kind == "linear":
        b0, b1 = p["beta_start"], p["beta_end"]
        if not given:
            scale = max(1.0, 1000.0 / T)
            b0, b1 = min(b0 * scale, BETA_MAX), min(b1 * scale, BETA_MAX)
            p = {"beta_start": b0, "beta_end": b1}
        for name, v in (("beta_start", b0), ("beta_end", b1)):
            if not 0.0 < v < 1.0:
                raise ValueError(f"{name}={v} outside (0, 1)")
        if T > 1 and not b0 < b1:
            raise ValueError("beta_start must be below beta_end")
        betas = np.linspace(b0, b1, T, dtype=np.float64)
    elif kind == "cosine":
        s = p["s"]
        if not 0.0 < s < 1.0:
            raise ValueError(f"s={s} outside (0, 1)")
        steps = np.arange(T + 1, dtype=np.float64) / T
        f = np.cos((steps + s) / (1 + s) * math.pi / 2) ** 2
        betas = _betas_from_alpha_bars(f / f[0])
    else:
        lo, hi = p["start"], p["end"]
        if not lo < hi:
            raise ValueError("sigmoid start must be below end")
        lam = lo + np.arange(T + 1, dtype=np.float64) / T * (hi - lo)
        v = _sigmoid(-lam)
        betas = _betas_from_alpha_bars((v - v[-1]) / (v[0] - v[-1]))

    alphas = 1.0 - betas
    alpha_bars = np.cumprod(alphas)
    sched = NoiseSchedule(kind, int(T), betas, alphas, alpha_bars, p)
    _validate(sched)
    return sched


def _validate(s: NoiseSchedule) -> None:
    b = s.betas
    if not (np.all(b > 0) and np.all(b < 1)):
        raise ValueError(f"{s.kind} schedule produced betas outside (0, 1)")
    if s.kind == "linear" and s.T > 1 and not np.all(np.diff(b) > 0):
        raise ValueError("linear betas must be strictly increasing")
    if not np.all(np.diff(s.alpha_bars) < 0):
        raise ValueError(f"{s.kind} alpha_bar is not strictly decreasing")


def q_sample(s: NoiseSchedule, y0: Tensor, t: int, eps: Tensor) -> Tensor:
    """Draw ``y_t`` directly from ``y0``: ``sqrt(ab) * y0 + sqrt(1 - ab) * eps``."""
    if eps.shape != y0.shape:
        raise ValueError(f"eps shape {tuple(eps.shape)} != y0 shape {tuple(y0.shape)}")
    s._check_t(t)
    ab = s.alpha_bar(t)
    return math.sqrt(ab) * y0 + math.sqrt(1.0 - ab) * eps


def q_sample_batch(s: NoiseSchedule, y0: Tensor, t: Tensor, eps: Tensor) -> Tensor:
    """Batched :func:`q_sample` with one timestep per leading-axis element."""
    if eps.shape != y0.shape:
        raise ValueError(f"eps shape {tuple(eps.shape)} != y0 shape {tuple(y0.shape)}")
    ab = s.alpha_bar_at(t).to(y0.dtype).view(-1, *([1] * (y0.dim() - 1)))
    return ab.sqrt() * y0 + (1.0 - ab).sqrt() * eps


def eps_from_y0(s: NoiseSchedule, y_t: Tensor, y0_hat: Tensor, t: int) -> Tensor:
    s._check_t(t)
    ab = s.alpha_bar(t)
    return (y_t - math.sqrt(ab) * y0_hat) / math.sqrt(1.0 - ab)


def y0_from_eps(s: NoiseSchedule, y_t: Tensor, eps_hat: Tensor, t: int) -> Tensor:
    s._check_t(t)
    ab = s.alpha_bar(t)
    return (y_t - math.sqrt(1.0 - ab) * eps_hat) / math.sqrt(ab)


def diffusion_chain_sample(
    s: NoiseSchedule, y0: Tensor, t: int, generator: torch.Generator | None = None
) -> Tensor:
    """Run ``t`` single-step Gaussian transitions starting from ``y0``.

    Only meant as a statistical reference for :func:`q_sample`.
    """
    s._check_t(t)
    y = y0.clone()
    for i in range(t):
        beta = float(s.betas[i])
        z = torch.randn(y.shape, generator=generator, dtype=y.dtype)
        y = math.sqrt(1.0 - beta) * y + math.sqrt(beta) * z
    return y
