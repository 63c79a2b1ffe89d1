"""Synthetic cloudy scenes, the on-disk tensor container, and value scaling.

Container layout (a directory)::

    manifest.json   UTF-8 JSON, sorted keys; field names are a stable interface
    data.bin        concatenated records; each record is
                    u32 rank | u32 dims[rank] | f32 values   (all little-endian)

The manifest carries ``format``, ``version``, ``sha256`` and ``blob_bytes`` of
``data.bin`` and an ``entries`` list of ``{name, offset}``. Datasets add
``count``, ``N``, ``C``, ``H``, ``W``, ``seed``, ``split`` and a ``samples``
list of ``{id, offset}`` (offset of the sample's ``x`` record).
"""

from __future__ import annotations

import hashlib
import io
import json
import os
import shutil
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

FORMAT = "cloudfree-tensors"
VERSION = 1
MANIFEST = "manifest.json"
BLOB = "data.bin"


class ContainerError(ValueError):
    """Raised for any malformed, truncated or inconsistent container."""


@dataclass
class SamplePair:
    x: np.ndarray  # [N, C, H, W] cloudy stack
    y0: np.ndarray  # [1, C, H, W] cloud-free target
    id: str

    def __post_init__(self):
        if self.x.ndim != 4 or self.y0.ndim != 4 or self.y0.shape[0] != 1:
            raise ValueError(f"bad shapes x={self.x.shape} y0={self.y0.shape}")
        if self.x.shape[1:] != self.y0.shape[1:]:
            raise ValueError(f"x {self.x.shape} and y0 {self.y0.shape} disagree on C,H,W")


@dataclass
class Dataset:
    pairs: list[SamplePair]
    seed: int
    split: str = "train"
    extra: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.pairs)

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return tuple(self.pairs[0].x.shape)

    def by_id(self) -> dict[str, SamplePair]:
        return {p.id: p for p in self.pairs}

    def stacked(self) -> tuple[np.ndarray, np.ndarray]:
        """``x`` as ``[n, N, C, H, W]`` and ``y0`` as ``[n, C, H, W]``."""
        return np.stack([p.x for p in self.pairs]), np.stack([p.y0[0] for p in self.pairs])


# ---------------------------------------------------------------- generator


def value_noise(rng: np.random.Generator, h: int, w: int, base: int = 4, octaves: int = 3) -> np.ndarray:
    """Smooth multi-octave value noise, roughly zero-mean, shape ``[h, w]``."""
    out = np.zeros((h, w))
    amp = 1.0
    for o in range(octaves):
        g = base * 2**o
        grid = rng.uniform(-1.0, 1.0, size=(g + 1, g + 1))
        up = ndimage.zoom(grid, ((h + h // g) / (g + 1), (w + w // g) / (g + 1)), order=3, mode="nearest")
        out += amp * up[:h, :w]
        amp *= 0.5
    return out


def _alpha_mask(noise: np.ndarray, coverage: float, softness: float = 0.08) -> np.ndarray:
    """Soft mask ``sigmoid((noise - q) / w)`` with ``q`` bisected so mean == coverage."""
    if coverage <= 0.0:
        return np.zeros_like(noise)
    z = (noise - noise.mean()) / (noise.std() + 1e-12)
    lo, hi = z.min() - 10.0, z.max() + 10.0
    for _ in range(80):
        q = 0.5 * (lo + hi)
        m = (1.0 / (1.0 + np.exp(-(z - q) / softness))).mean()
        if m > coverage:
            lo = q
        else:
            hi = q
    return 1.0 / (1.0 + np.exp(-(z - 0.5 * (lo + hi)) / softness))


def make_pair(
    seed: int, index: int, h: int, w: int, n_views: int, channels: int, coverage=(0.10, 0.30), split="train"
) -> tuple[SamplePair, list[float]]:
    rng = np.random.default_rng([seed, index])
    shared = value_noise(rng, h, w)
    truth = np.empty((channels, h, w))
    for c in range(channels):
        own = value_noise(rng, h, w, base=8, octaves=2)
        gain, offset = rng.uniform(0.6, 1.2), rng.uniform(-0.3, 0.3)
        truth[c] = np.tanh(gain * shared + 0.35 * own + offset)

    views = np.empty((n_views, channels, h, w))
    coverages = []
    for v in range(n_views):
        target = rng.uniform(*coverage)
        alpha = _alpha_mask(value_noise(rng, h, w, base=2, octaves=3), target)
        coverages.append(float(alpha.mean()))
        tint = rng.uniform(0.7, 0.95, size=(channels, 1, 1))
        cloud = np.clip(tint + 0.05 * value_noise(rng, h, w, base=4, octaves=2), -1.0, 1.0)
        views[v] = (1.0 - alpha) * truth + alpha * cloud

    pair = SamplePair(
        x=np.clip(views, -1, 1).astype(np.float32),
        y0=np.clip(truth, -1, 1).astype(np.float32)[None],
        id=f"{split}-{seed}-{index:05d}",
    )
    return pair, coverages


def gen_synthetic(
    seed: int, n: int, H: int, W: int, N: int = 3, C: int = 3, split: str = "train", coverage=(0.10, 0.30)
) -> Dataset:
    """Deterministic synthetic multi-temporal dataset.

    Each target is a smooth textured scene; each of the ``N`` views composites
    an independent soft cloud mask (mean alpha drawn from ``coverage``) with a
    bright cloud colour over it. Values lie in ``[-1, 1]``.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if H < 8 or W < 8 or H % 8 or W % 8:
        raise ValueError(f"H and W must be positive multiples of 8, got {H}x{W}")
    if N < 1 or C < 1:
        raise ValueError("N and C must be >= 1")
    pairs, covs = [], []
    for i in range(n):
        pair, c = make_pair(seed, i, H, W, N, C, coverage, split)
        pairs.append(pair)
        covs.append(c)
    return Dataset(pairs, seed=seed, split=split, extra={"coverage": covs})


# ---------------------------------------------------------------- container


def _encode_record(arr: np.ndarray) -> bytes:
    a = np.ascontiguousarray(arr, dtype="<f4")
    head = struct.pack(f"<{1 + a.ndim}I", a.ndim, *a.shape)
    return head + a.tobytes()


def _decode_record(buf: bytes, offset: int) -> tuple[np.ndarray, int]:
    if offset < 0 or offset + 4 > len(buf):
        raise ContainerError(f"record header at {offset} lies outside the blob")
    (rank,) = struct.unpack_from("<I", buf, offset)
    if rank > 8:
        raise ContainerError(f"implausible rank {rank} at offset {offset}")
    start = offset + 4 + 4 * rank
    if start > len(buf):
        raise ContainerError(f"record dims at {offset} run past the blob")
    dims = struct.unpack_from(f"<{rank}I", buf, offset + 4)
    count = int(np.prod(dims, dtype=np.int64))
    end = start + 4 * count
    if end > len(buf):
        raise ContainerError(f"record at {offset} is truncated")
    arr = np.frombuffer(buf, dtype="<f4", count=count, offset=start).reshape(dims).astype(np.float32)
    return arr, end


def write_container(path, records: list[tuple[str, np.ndarray]], header: dict) -> dict:
    """Write ``records`` in order; returns the manifest. Replaces ``path`` atomically."""
    path = Path(path)
    blob = io.BytesIO()
    entries = []
    for name, arr in records:
        entries.append({"name": name, "offset": blob.tell()})
        blob.write(_encode_record(arr))
    data = blob.getvalue()
    manifest = {
        **header,
        "format": FORMAT,
        "version": VERSION,
        "entries": entries,
        "blob_bytes": len(data),
        "sha256": hashlib.sha256(data).hexdigest(),
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=f".{path.name}.", dir=path.parent))
    try:
        (tmp / BLOB).write_bytes(data)
        (tmp / MANIFEST).write_text(json.dumps(manifest, sort_keys=True, indent=1) + "\n")
        if path.exists():
            old = path.with_name(f".{path.name}.old")
            if old.exists():
                shutil.rmtree(old)
            os.replace(path, old)
            os.replace(tmp, path)
            shutil.rmtree(old)
        else:
            os.replace(tmp, path)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    return manifest


def read_container(path) -> tuple[dict, dict[str, np.ndarray]]:
    path = Path(path)
    try:
        manifest = json.loads((path / MANIFEST).read_text())
    except FileNotFoundError:
        raise ContainerError(f"no {MANIFEST} in {path}") from None
    except (json.JSONDecodeError, UnicodeDecodeError) as e:
        raise ContainerError(f"corrupt manifest in {path}: {e}") from None
    if not isinstance(manifest, dict) or manifest.get("format") != FORMAT:
        raise ContainerError(f"{path} is not a {FORMAT} container")
    if manifest.get("version") != VERSION:
        raise ContainerError(f"unsupported container version {manifest.get('version')!r} (expected {VERSION})")
    try:
        data = (path / BLOB).read_bytes()
    except FileNotFoundError:
        raise ContainerError(f"no {BLOB} in {path}") from None
    if len(data) != manifest.get("blob_bytes"):
        raise ContainerError(f"blob is {len(data)} bytes, manifest says {manifest.get('blob_bytes')}")
    if hashlib.sha256(data).hexdigest() != manifest.get("sha256"):
        raise ContainerError("blob checksum mismatch")

    tensors = {}
    prev = -1
    for e in manifest.get("entries", []):
        off = e["offset"]
        if off <= prev:
            raise ContainerError("entry offsets are not strictly increasing")
        prev = off
        tensors[e["name"]], _ = _decode_record(data, off)
    return manifest, tensors


def save_dataset(ds: Dataset, path) -> dict:
    if not ds.pairs:
        raise ValueError("refusing to save an empty dataset")
    n, c, h, w = ds.shape
    records = []
    for p in ds.pairs:
        records += [(f"{p.id}/x", p.x), (f"{p.id}/y0", p.y0)]
    header = {
        "kind": "dataset",
        "count": len(ds),
        "N": n,
        "C": c,
        "H": h,
        "W": w,
        "seed": ds.seed,
        "split": ds.split,
    }
    # offsets are known only after layout; compute them the same way write_container does
    offsets, pos = [], 0
    for name, arr in records:
        if name.endswith("/x"):
            offsets.append(pos)
        pos += len(_encode_record(arr))
    header["samples"] = [{"id": p.id, "offset": o} for p, o in zip(ds.pairs, offsets)]
    return write_container(path, records, header)


def load_dataset(path) -> Dataset:
    manifest, tensors = read_container(path)
    if manifest.get("kind") != "dataset":
        raise ContainerError(f"{path} holds a {manifest.get('kind')!r}, not a dataset")
    samples = manifest.get("samples", [])
    if manifest.get("count") != len(samples):
        raise ContainerError(f"manifest count {manifest.get('count')} != {len(samples)} sample records")
    if len(tensors) != 2 * len(samples):
        raise ContainerError(f"expected {2 * len(samples)} tensors, found {len(tensors)}")
    x_offsets = {e["name"][:-2]: e["offset"] for e in manifest["entries"] if e["name"].endswith("/x")}
    shape = (manifest["N"], manifest["C"], manifest["H"], manifest["W"])
    pairs, prev = [], -1
    for s in samples:
        sid, off = s["id"], s["offset"]
        if off <= prev:
            raise ContainerError("sample offsets are not strictly increasing")
        prev = off
        if x_offsets.get(sid) != off:
            raise ContainerError(f"sample {sid!r} offset {off} does not match its record")
        try:
            x, y0 = tensors[f"{sid}/x"], tensors[f"{sid}/y0"]
        except KeyError:
            raise ContainerError(f"missing tensors for sample {sid!r}") from None
        if x.shape != shape or y0.shape != (1, *shape[1:]):
            raise ContainerError(f"sample {sid!r} has shapes {x.shape}/{y0.shape}, manifest says {shape}")
        pairs.append(SamplePair(x, y0, sid))
    return Dataset(pairs, seed=manifest["seed"], split=manifest["split"])


# ---------------------------------------------------------------- scaling & images


def normalize(img, lo: float, hi: float):
    """Affine map ``lo -> -1``, ``hi -> +1``, clamped."""
    if not hi > lo:
        raise ValueError(f"need hi > lo, got lo={lo}, hi={hi}")
    return np.clip(2.0 * (np.asarray(img, dtype=np.float64) - lo) / (hi - lo) - 1.0, -1.0, 1.0)


def denormalize(img, lo: float, hi: float):
    if not hi > lo:
        raise ValueError(f"need hi > lo, got lo={lo}, hi={hi}")
    return (np.asarray(img, dtype=np.float64) + 1.0) * 0.5 * (hi - lo) + lo


def to_uint8(img: np.ndarray) -> np.ndarray:
    """``[-1, 1] -> [0, 255]`` with round-half-up, channel-last."""
    v = np.floor((np.clip(np.asarray(img, dtype=np.float64), -1, 1) + 1.0) * 0.5 * 255.0 + 0.5)
    return np.moveaxis(v.astype(np.uint8), 0, -1)


def png_bytes(img: np.ndarray) -> bytes:
    """Encode a ``[C, H, W]`` image; 3+ channels use the first three as RGB."""
    arr = to_uint8(img)
    if arr.shape[-1] >= 3:
        im = Image.fromarray(np.ascontiguousarray(arr[..., :3]))
    else:
        im = Image.fromarray(np.ascontiguousarray(arr[..., 0]))
    buf = io.BytesIO()
    im.save(buf, format="PNG")
    return buf.getvalue()
