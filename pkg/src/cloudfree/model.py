"""Conditional denoising network.

Three parts: a sinusoidal time encoder with an MLP, a decoupled condition
encoder that turns the cloudy stack into a feature pyramid, and a UNet of
TCF blocks (spatial extraction + feature recalibration, with additive time
and condition injection) that predicts the clean image.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from cloudfree import numerics as nx
from cloudfree.numerics import ConvSpec, ShapeError


@dataclass
class ModelConfig:
    in_channels: int = 3
    n_temporal: int = 3
    width: int = 64
    enc_depths: list[int] = field(default_factory=lambda: [1, 1, 1, 1])
    mid_depth: int = 1
    dec_depths: list[int] = field(default_factory=lambda: [1, 1, 1, 1])
    channel_mults: list[int] = field(default_factory=lambda: [1, 2, 4, 8])
    time_dim: int | None = None
    expansion: int = 2
    skip: str = "sum"

    def __post_init__(self):
        if self.time_dim is None:
            self.time_dim = 4 * self.width
        n = len(self.channel_mults)
        if len(self.enc_depths) != n or len(self.dec_depths) != n:
            raise ValueError("enc_depths, dec_depths and channel_mults must have equal length")
        if n < 1:
            raise ValueError("need at least one stage")
        if self.skip != "sum":
            raise ValueError(f"only 'sum' skip connections are supported, got {self.skip!r}")
        if self.expansion != 2:
            raise ValueError("split self-activation needs expansion == 2")
        for c in self.stage_channels:
            if c % 2:
                raise ValueError(f"stage channel count {c} is odd; split attention needs even channels")
        if self.width % 2:
            raise ValueError("width must be even for the sinusoidal time features")
        if self.in_channels < 1 or self.n_temporal < 1:
            raise ValueError("in_channels and n_temporal must be positive")
        if min(self.enc_depths + self.dec_depths + [self.mid_depth]) < 0:
            raise ValueError("depths must be non-negative")

    @property
    def stage_channels(self) -> list[int]:
        return [self.width * m for m in self.channel_mults]

    @property
    def n_stages(self) -> int:
        return len(self.channel_mults)

    @property
    def divisor(self) -> int:
        return 2 ** (self.n_stages - 1)

    def to_dict(self) -> dict:
        return asdict(self)


class Conv(nn.Module):
    def __init__(self, cin, cout, kernel=1, stride=1, padding=0, groups=1):
        super().__init__()
        self.spec = ConvSpec(cin, cout, (kernel, kernel), stride, padding, groups)
        self.weight = nn.Parameter(torch.empty(self.spec.weight_shape))
        self.bias = nn.Parameter(torch.zeros(cout))
        nn.init.kaiming_normal_(self.weight, mode="fan_in", nonlinearity="linear")

    def forward(self, x):
        return nx.conv2d(x, self.spec, self.weight, self.bias)


class Linear(nn.Module):
    def __init__(self, din, dout):
        super().__init__()
        self.weight = nn.Parameter(torch.empty(dout, din))
        self.bias = nn.Parameter(torch.zeros(dout))
        nn.init.kaiming_normal_(self.weight, mode="fan_in", nonlinearity="linear")

    def forward(self, x):
        return nx.linear(x, self.weight, self.bias)


class LayerNorm2d(nn.Module):
    def __init__(self, channels, eps=1e-6):
        super().__init__()
        self.eps = eps
        self.weight = nn.Parameter(torch.ones(channels))
        self.bias = nn.Parameter(torch.zeros(channels))

    def forward(self, x):
        return nx.layer_norm(x, self.weight, self.bias, self.eps)


def ssa(x: Tensor) -> Tensor:
    """Split self-activation: halve the channels and multiply the halves."""
    c = x.shape[-3]
    if c % 2:
        raise ShapeError(f"split self-activation needs an even channel count, got {c}")
    a, b = x.split(c // 2, dim=-3)
    return a * b


def sca(fg: Tensor, w1: nn.Module, w2: nn.Module, w0: nn.Module) -> Tensor:
    """Split channel attention.

    The first half of the channels is gated by a 1x1 conv of its global mean,
    the second half by a 1x1 conv of its global max; the gated map is fused
    by ``w0``.
    """
    c = fg.shape[-3]
    if c % 2:
        raise ShapeError(f"split channel attention needs an even channel count, got {c}")
    g1, g2 = fg.split(c // 2, dim=-3)
    gates = torch.cat([w1(nx.pool_global(g1, "mean")), w2(nx.pool_global(g2, "max"))], dim=-3)
    return w0(fg * gates)


class SEM(nn.Module):
    """Spatial extraction: norm, 1x1 expand, 3x3 depthwise, SSA, SCA."""

    def __init__(self, c, expansion=2):
        super().__init__()
        hidden = expansion * c
        self.norm = LayerNorm2d(c)
        self.expand = Conv(c, hidden)
        self.dwconv = Conv(hidden, hidden, kernel=3, padding=1, groups=hidden)
        self.gate_avg = Conv(c // 2, c // 2)
        self.gate_max = Conv(c // 2, c // 2)
        self.fuse = Conv(c, c)

    def forward(self, x):
        fg = ssa(self.dwconv(self.expand(self.norm(x))))
        return sca(fg, self.gate_avg, self.gate_max, self.fuse)


class FRM(nn.Module):
    """Feature recalibration: norm, 1x1 expand to 2C, SSA back to C, 1x1."""

    def __init__(self, c, expansion=2):
        super().__init__()
        self.norm = LayerNorm2d(c)
        self.v1 = Conv(c, expansion * c)
        self.v2 = Conv(c, c)

    def forward(self, x):
        return self.v2(ssa(self.v1(self.norm(x))))


class TCFBlock(nn.Module):
    def __init__(self, c, time_dim=None, expansion=2):
        super().__init__()
        self.channels = c
        self.sem = SEM(c, expansion)
        self.frm = FRM(c, expansion)
        self.time_proj = Linear(time_dim, c) if time_dim else None

    def forward(self, x, cond=None, temb=None):
        n = self.sem(x) + x
        if temb is not None:
            if self.time_proj is None:
                raise ValueError("this block was built without time injection")
            ft = self.time_proj(temb)
            n = n + ft.view(*ft.shape, 1, 1)
        out = self.frm(n) + n
        if cond is not None:
            if cond.shape[-3:] != out.shape[-3:]:
                raise ShapeError(f"condition {tuple(cond.shape)} does not match features {tuple(out.shape)}")
            out = out + cond
        return out


def sinusoidal_embedding(t: Tensor, dim: int) -> Tensor:
    """``[sin(t*w_k), cos(t*w_k)]`` with ``w_k = 10000**(-2k/dim)``."""
    t = torch.as_tensor(t)
    if not t.is_floating_point():
        t = t.to(torch.get_default_dtype())
    k = torch.arange(dim // 2, dtype=t.dtype)
    freqs = torch.exp(-math.log(10000.0) * 2 * k / dim)
    args = t.reshape(-1, 1) * freqs
    return torch.cat([torch.sin(args), torch.cos(args)], dim=-1)


class TimeEncoder(nn.Module):
    def __init__(self, width, time_dim):
        super().__init__()
        self.width = width
        self.fc1 = Linear(width, time_dim)
        self.fc2 = Linear(time_dim, time_dim)

    def forward(self, t):
        return self.mlp(sinusoidal_embedding(t, self.width).to(self.fc1.weight.dtype))

    def mlp(self, feats):
        return self.fc2(F.silu(self.fc1(feats)))


class ConditionEncoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        ch = cfg.stage_channels
        self.stem = Conv(cfg.n_temporal * cfg.in_channels, cfg.width)
        self.stages = nn.ModuleList(
            nn.ModuleList(TCFBlock(c, None, cfg.expansion) for _ in range(d))
            for c, d in zip(ch, cfg.enc_depths)
        )
        self.down = nn.ModuleList(Conv(ch[s], ch[s + 1], kernel=2, stride=2) for s in range(len(ch) - 1))

    def forward(self, x: Tensor) -> list[Tensor]:
        """``x``: ``[B, N, C, H, W]``; returns one feature map per stage."""
        b, n, c, h, w = x.shape
        if n != self.cfg.n_temporal or c != self.cfg.in_channels:
            raise ShapeError(
                f"condition stack has N={n}, C={c}; model expects "
                f"N={self.cfg.n_temporal}, C={self.cfg.in_channels}"
            )
        _check_divisible(h, w, self.cfg.divisor)
        feat = self.stem(x.reshape(b, n * c, h, w))
        pyramid = []
        for s, blocks in enumerate(self.stages):
            for blk in blocks:
                feat = blk(feat)
            pyramid.append(feat)
            if s < len(self.down):
                feat = self.down[s](feat)
        return pyramid


class Upsample(nn.Module):
    """1x1 conv to ``4 * cout`` channels, then pixel shuffle by 2."""

    def __init__(self, cin, cout):
        super().__init__()
        self.proj = Conv(cin, 4 * cout)

    def forward(self, x):
        return nx.pixel_shuffle(self.proj(x), 2)


def _check_divisible(h, w, d):
    if h % d or w % d:
        raise ShapeError(f"spatial size {h}x{w} must be divisible by {d}")


class Denoiser(nn.Module):
    """Predicts the clean image from ``(y_t, t, x)``.

    Inputs are batched: ``y_t`` is ``[B, C, H, W]``, ``t`` is ``[B]`` and
    ``x`` is ``[B, N, C, H, W]``.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        ch = cfg.stage_channels
        td = cfg.time_dim
        self.time = TimeEncoder(cfg.width, td)
        self.cond = ConditionEncoder(cfg)
        self.stem = Conv(cfg.in_channels, cfg.width)
        self.enc = nn.ModuleList(
            nn.ModuleList(TCFBlock(c, td, cfg.expansion) for _ in range(d)) for c, d in zip(ch, cfg.enc_depths)
        )
        self.down = nn.ModuleList(Conv(ch[s], ch[s + 1], kernel=2, stride=2) for s in range(len(ch) - 1))
        self.mid = nn.ModuleList(TCFBlock(ch[-1], td, cfg.expansion) for _ in range(cfg.mid_depth))
        self.up = nn.ModuleList(Upsample(ch[s + 1], ch[s]) for s in range(len(ch) - 1))
        self.dec = nn.ModuleList(
            nn.ModuleList(TCFBlock(c, td, cfg.expansion) for _ in range(d)) for c, d in zip(ch, cfg.dec_depths)
        )
        self.head = Conv(cfg.width, cfg.in_channels)
        nn.init.zeros_(self.head.weight)

    def forward(self, y_t: Tensor, t: Tensor, x: Tensor) -> Tensor:
        if y_t.dim() != 4 or y_t.shape[1] != self.cfg.in_channels:
            raise ShapeError(f"y_t must be [B, {self.cfg.in_channels}, H, W], got {tuple(y_t.shape)}")
        if x.shape[0] != y_t.shape[0] or x.shape[-2:] != y_t.shape[-2:]:
            raise ShapeError(f"condition {tuple(x.shape)} does not match y_t {tuple(y_t.shape)}")
        t = torch.as_tensor(t).reshape(-1).expand(y_t.shape[0])
        temb = self.time(t)
        pyramid = self.cond(x)

        h = self.stem(y_t)
        skips = []
        for s, blocks in enumerate(self.enc):
            for blk in blocks:
                h = blk(h, pyramid[s], temb)
            skips.append(h)
            if s < len(self.down):
                h = self.down[s](h)
        for blk in self.mid:
            h = blk(h, pyramid[-1], temb)
        for s in reversed(range(self.cfg.n_stages)):
            if s < len(self.up):
                h = self.up[s](h)
            h = h + skips[s]
            for blk in self.dec[s]:
                h = blk(h, pyramid[s], temb)
        return self.head(h)


def denoiser_forward(model: Denoiser, y_t: Tensor, t: int, x: Tensor) -> Tensor:
    """Single-sample call: ``y_t`` is ``[1, C, H, W]``, ``x`` is ``[N, C, H, W]``."""
    if y_t.dim() != 4 or y_t.shape[0] != 1:
        raise ShapeError(f"y_t must be [1, C, H, W], got {tuple(y_t.shape)}")
    if x.dim() != 4:
        raise ShapeError(f"x must be [N, C, H, W], got {tuple(x.shape)}")
    return model(y_t, torch.tensor([t]), x.unsqueeze(0))
