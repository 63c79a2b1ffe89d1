"""PSNR and SSIM.

Both operate on arrays already mapped to ``[0, max_val]``; use
:func:`to_unit` to bring model-space ``[-1, 1]`` images to ``[0, 1]``.
SSIM uses an 11x11 Gaussian window (sigma 1.5), K1=0.01, K2=0.03, valid
region only, averaged over channels.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy import ndimage


@dataclass
class MetricReport:
    psnr_db: float
    ssim: float
    count: int

    def __post_init__(self):
        if self.count < 1:
            raise ValueError("a report needs at least one sample")

    def to_dict(self):
        d = asdict(self)
        d["psnr_db"] = _json_float(d["psnr_db"])
        return d


def _json_float(v: float):
    # JSON has no infinity; the sentinel for a perfect match is the string "inf"
    return "inf" if math.isinf(v) else v


def to_unit(img):
    return (np.asarray(img, dtype=np.float64) + 1.0) * 0.5


def psnr(a, b, max_val: float = 1.0) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    if max_val <= 0:
        raise ValueError("max_val must be positive")
    mse = np.mean((a - b) ** 2)
    if mse == 0:
        return math.inf
    return float(10.0 * np.log10(max_val**2 / mse))


def _gaussian_window(size=11, sigma=1.5):
    r = np.arange(size) - (size - 1) / 2
    g = np.exp(-(r**2) / (2 * sigma**2))
    return g / g.sum()


def _filter_valid(img, win):
    pad = (len(win) - 1) // 2
    out = ndimage.correlate1d(img, win, axis=-1, mode="constant")
    out = ndimage.correlate1d(out, win, axis=-2, mode="constant")
    return out[..., pad:-pad, pad:-pad]


def ssim(a, b, max_val: float = 1.0, win_size: int = 11, sigma: float = 1.5, k1=0.01, k2=0.03) -> float:
    """Mean SSIM over the valid region and over channels.

    Accepts ``[H, W]``, ``[C, H, W]`` or any array whose last two axes are
    spatial; leading axes are treated as channels.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    if a.ndim < 2 or min(a.shape[-2:]) < win_size:
        raise ValueError(f"image {a.shape} smaller than the {win_size}x{win_size} window")
    a2 = a.reshape(-1, *a.shape[-2:])
    b2 = b.reshape(-1, *b.shape[-2:])
    win = _gaussian_window(win_size, sigma)
    c1 = (k1 * max_val) ** 2
    c2 = (k2 * max_val) ** 2

    vals = []
    for x, y in zip(a2, b2):
        mx, my = _filter_valid(x, win), _filter_valid(y, win)
        sxx = _filter_valid(x * x, win) - mx * mx
        syy = _filter_valid(y * y, win) - my * my
        sxy = _filter_valid(x * y, win) - mx * my
        num = (2 * mx * my + c1) * (2 * sxy + c2)
        den = (mx * mx + my * my + c1) * (sxx + syy + c2)
        vals.append(np.mean(num / den))
    return float(np.mean(vals))


def evaluate_pairs(preds: dict, refs: dict, max_val: float = 1.0) -> tuple[list[dict], MetricReport]:
    """Id-keyed comparison of ``[-1, 1]`` images; returns per-sample records and the mean."""
    missing = sorted(set(refs) - set(preds))
    extra = sorted(set(preds) - set(refs))
    if missing or extra:
        parts = []
        if missing:
            parts.append(f"missing predictions for ids: {', '.join(missing)}")
        if extra:
            parts.append(f"predictions without reference: {', '.join(extra)}")
        raise KeyError("; ".join(parts))
    records = []
    for sid in sorted(refs):
        p, r = to_unit(preds[sid]), to_unit(refs[sid])
        records.append({"id": sid, "psnr_db": psnr(p, r, max_val), "ssim": ssim(p, r, max_val)})
    report = MetricReport(
        psnr_db=float(np.mean([r["psnr_db"] for r in records])),
        ssim=float(np.mean([r["ssim"] for r in records])),
        count=len(records),
    )
    return records, report
