"""Analytic parameter and multiply-accumulate counts for :class:`Denoiser`.

Only convolutions and linear layers contribute MACs (``weights * H' * W'``
per conv, ``d_in * d_out`` per linear); normalization, pooling, the split
activation products and residual additions are not counted. Parameters
include every learnable tensor (norm affines too). Counts are per sample.
"""

from __future__ import annotations

from cloudfree.model import ModelConfig


def conv_cost(cin: int, cout: int, k: int = 1, groups: int = 1, hw: int = 1) -> tuple[int, int]:
    weights = cout * (cin // groups) * k * k
    return weights + cout, weights * hw


def linear_cost(din: int, dout: int) -> tuple[int, int]:
    return din * dout + dout, din * dout


def block_cost(c: int, hw: int, time_dim: int | None, expansion: int = 2) -> tuple[int, int]:
    e = expansion * c
    parts = [
        (2 * c, 0),  # norm
        conv_cost(c, e, hw=hw),
        conv_cost(e, e, k=3, groups=e, hw=hw),
        conv_cost(c // 2, c // 2),  # gate on pooled means
        conv_cost(c // 2, c // 2),  # gate on pooled maxima
        conv_cost(c, c, hw=hw),
        (2 * c, 0),
        conv_cost(c, e, hw=hw),
        conv_cost(e // 2, c, hw=hw),
    ]
    if time_dim:
        parts.append(linear_cost(time_dim, c))
    return sum(p for p, _ in parts), sum(m for _, m in parts)


def _costs(cfg: ModelConfig, H: int, W: int) -> list[tuple[int, int]]:
    ch = cfg.stage_channels
    hw = [(H >> s) * (W >> s) for s in range(cfg.n_stages)]
    td = cfg.time_dim
    out = [linear_cost(cfg.width, td), linear_cost(td, td)]

    out.append(conv_cost(cfg.n_temporal * cfg.in_channels, cfg.width, hw=hw[0]))
    for s, d in enumerate(cfg.enc_depths):
        out += [block_cost(ch[s], hw[s], None, cfg.expansion)] * d
        if s + 1 < cfg.n_stages:
            out.append(conv_cost(ch[s], ch[s + 1], k=2, hw=hw[s + 1]))

    out.append(conv_cost(cfg.in_channels, cfg.width, hw=hw[0]))
    for s, d in enumerate(cfg.enc_depths):
        out += [block_cost(ch[s], hw[s], td, cfg.expansion)] * d
        if s + 1 < cfg.n_stages:
            out.append(conv_cost(ch[s], ch[s + 1], k=2, hw=hw[s + 1]))
    out += [block_cost(ch[-1], hw[-1], td, cfg.expansion)] * cfg.mid_depth
    for s, d in enumerate(cfg.dec_depths):
        if s + 1 < cfg.n_stages:
            out.append(conv_cost(ch[s + 1], 4 * ch[s], hw=hw[s + 1]))
        out += [block_cost(ch[s], hw[s], td, cfg.expansion)] * d
    out.append(conv_cost(cfg.width, cfg.in_channels, hw=hw[0]))
    return out


def count_params(cfg: ModelConfig) -> int:
    return sum(p for p, _ in _costs(cfg, cfg.divisor, cfg.divisor))


def count_macs(cfg: ModelConfig, H: int, W: int) -> int:
    if H % cfg.divisor or W % cfg.divisor:
        raise ValueError(f"{H}x{W} is not divisible by {cfg.divisor}")
    return sum(m for _, m in _costs(cfg, H, W))


REFERENCE_COUNTS = {"params_m": 22.91, "macs_g": 45.86, "hw": 256, "n_temporal": 3}


def reference_config_report(in_channels: int = 3) -> dict:
    cfg = ModelConfig(in_channels=in_channels, n_temporal=3, width=64)
    params = count_params(cfg)
    macs = count_macs(cfg, 256, 256)
    return {
        "config": cfg.to_dict(),
        "hw": 256,
        "params": params,
        "macs": macs,
        "params_m": round(params / 1e6, 3),
        "macs_g": round(macs / 1e9, 3),
        "reference_params_m": REFERENCE_COUNTS["params_m"],
        "reference_macs_g": REFERENCE_COUNTS["macs_g"],
    }
