"""Training loop: data- or noise-prediction regression with AdamW and an EMA shadow."""

from __future__ import annotations

import base64
import copy
import json
import logging
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
from torch import Tensor, nn

from cloudfree.data import Dataset, read_container, write_container, ContainerError
from cloudfree.model import Denoiser, ModelConfig
from cloudfree.schedule import NoiseSchedule, build_schedule, q_sample_batch

log = logging.getLogger(__name__)

TARGETS = ("data", "noise")


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lr: float = 5e-5
    batch_size: int = 8
    p: int = 2
    ema_decay: float = 0.9999
    target: str = "data"
    T: int = 2000
    max_steps: int = 1000
    seed: int = 0
    log_every: int = 100
    ckpt_every: int = 1000

    def __post_init__(self):
        if not 0.0 < self.ema_decay < 1.0:
            raise ValueError(f"ema_decay must lie in (0, 1), got {self.ema_decay}")
        if self.p not in (1, 2):
            raise ValueError(f"p must be 1 or 2, got {self.p}")
        if self.lr < 0:
            raise ValueError("lr must be non-negative")
        if self.target not in TARGETS:
            raise ValueError(f"target must be one of {TARGETS}, got {self.target!r}")
        if self.batch_size < 1 or self.T < 1 or self.max_steps < 0:
            raise ValueError("batch_size and T must be positive, max_steps non-negative")


def loss(y0: Tensor, prediction: Tensor, target_kind: str, eps: Tensor, p: int = 2) -> Tensor:
    """Mean of ``|target - prediction|**p``; the target is ``y0`` or ``eps``."""
    if prediction.shape != y0.shape or eps.shape != y0.shape:
        raise ValueError(f"shape mismatch: y0 {tuple(y0.shape)}, prediction {tuple(prediction.shape)}")
    if target_kind == "data":
        target = y0
    elif target_kind == "noise":
        target = eps
    else:
        raise ValueError(f"unknown target {target_kind!r}")
    diff = (target - prediction).abs()
    return diff.pow(p).mean() if p != 1 else diff.mean()


@torch.no_grad()
def ema_update(ema, params, decay: float) -> None:
    """In place: ``ema = decay * ema + (1 - decay) * params``."""
    ema = list(ema)
    params = list(params)
    if len(ema) != len(params):
        raise ValueError("ema and params differ in length")
    for e, p in zip(ema, params):
        if e.shape != p.shape:
            raise ValueError(f"shape mismatch {tuple(e.shape)} vs {tuple(p.shape)}")
        e.mul_(decay).add_(p, alpha=1.0 - decay)


@dataclass
class TrainState:
    model: Denoiser
    ema: Denoiser
    optimizer: torch.optim.Optimizer
    generator: torch.Generator
    step: int = 0

    @classmethod
    def create(cls, model_cfg: ModelConfig, cfg: TrainConfig) -> "TrainState":
        torch.manual_seed(cfg.seed)
        model = Denoiser(model_cfg)
        ema = copy.deepcopy(model).requires_grad_(False)
        opt = make_optimizer(model, cfg.lr)
        gen = torch.Generator().manual_seed(cfg.seed)
        return cls(model, ema, opt, gen)


def make_optimizer(model: nn.Module, lr: float) -> torch.optim.Optimizer:
    return torch.optim.AdamW(model.parameters(), lr=lr, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0)


def train_step(state: TrainState, x: Tensor, y0: Tensor, schedule: NoiseSchedule, cfg: TrainConfig) -> float:
    """One gradient step on a batch ``x`` ``[B, N, C, H, W]``, ``y0`` ``[B, C, H, W]``."""
    if x.shape[0] == 0:
        raise ValueError("empty batch")
    if schedule.T != cfg.T:
        raise ValueError(f"schedule has T={schedule.T} but config says T={cfg.T}")
    b = y0.shape[0]
    t = torch.randint(1, schedule.T + 1, (b,), generator=state.generator)
    eps = torch.randn(y0.shape, generator=state.generator, dtype=y0.dtype)
    y_t = q_sample_batch(schedule, y0, t, eps)

    state.model.train()
    pred = state.model(y_t, t, x)
    value = loss(y0, pred, cfg.target, eps, cfg.p)
    if not torch.isfinite(value):
        raise TrainingDiverged(f"non-finite loss {value.item()} at step {state.step}")
    state.optimizer.zero_grad(set_to_none=True)
    value.backward()
    state.optimizer.step()
    ema_update(state.ema.parameters(), state.model.parameters(), cfg.ema_decay)
    state.step += 1
    return value.item()


def draw_batch(ds_x: Tensor, ds_y: Tensor, batch_size: int, gen: torch.Generator) -> tuple[Tensor, Tensor]:
    idx = torch.randint(0, ds_x.shape[0], (batch_size,), generator=gen)
    return ds_x[idx], ds_y[idx]


def dataset_tensors(ds: Dataset) -> tuple[Tensor, Tensor]:
    x, y = ds.stacked()
    return torch.from_numpy(x), torch.from_numpy(y)


# ---------------------------------------------------------------- checkpoints


def save_checkpoint(path, state: TrainState, model_cfg: ModelConfig, cfg: TrainConfig, schedule: NoiseSchedule):
    records = []
    for prefix, module in (("params", state.model), ("ema", state.ema)):
        for name, t in module.state_dict().items():
            records.append((f"{prefix}/{name}", t.detach().numpy()))
    names = {id(p): n for n, p in state.model.named_parameters()}
    opt_steps = {}
    for p in state.model.parameters():
        st = state.optimizer.state.get(p)
        if not st:
            continue
        n = names[id(p)]
        records.append((f"opt/{n}/exp_avg", st["exp_avg"].numpy()))
        records.append((f"opt/{n}/exp_avg_sq", st["exp_avg_sq"].numpy()))
        opt_steps[n] = float(st["step"])
    header = {
        "kind": "checkpoint",
        "step": state.step,
        "model": model_cfg.to_dict(),
        "train": asdict(cfg),
        "schedule": {"kind": schedule.kind, "T": schedule.T, "params": schedule.params},
        "opt_steps": opt_steps,
        "rng_state": base64.b64encode(state.generator.get_state().numpy().tobytes()).decode("ascii"),
    }
    return write_container(path, records, header)


def load_checkpoint(path, lr: float | None = None) -> tuple[TrainState, dict]:
    manifest, tensors = read_container(path)
    if manifest.get("kind") != "checkpoint":
        raise ContainerError(f"{path} holds a {manifest.get('kind')!r}, not a checkpoint")
    model_cfg = ModelConfig(**manifest["model"])
    train_cfg = TrainConfig(**manifest["train"])
    model = Denoiser(model_cfg)
    ema = Denoiser(model_cfg).requires_grad_(False)
    for prefix, module in (("params", model), ("ema", ema)):
        sd = {k[len(prefix) + 1 :]: torch.from_numpy(v) for k, v in tensors.items() if k.startswith(prefix + "/")}
        module.load_state_dict(sd, strict=True)
    opt = make_optimizer(model, train_cfg.lr if lr is None else lr)
    for n, p in model.named_parameters():
        if n in manifest["opt_steps"]:
            opt.state[p] = {
                "step": torch.tensor(manifest["opt_steps"][n]),
                "exp_avg": torch.from_numpy(tensors[f"opt/{n}/exp_avg"]).clone(),
                "exp_avg_sq": torch.from_numpy(tensors[f"opt/{n}/exp_avg_sq"]).clone(),
            }
    gen = torch.Generator()
    rng = np.frombuffer(base64.b64decode(manifest["rng_state"]), dtype=np.uint8).copy()
    gen.set_state(torch.from_numpy(rng))
    return TrainState(model, ema, opt, gen, manifest["step"]), manifest


def schedule_from_manifest(manifest: dict) -> NoiseSchedule:
    s = manifest["schedule"]
    return build_schedule(s["kind"], s["T"], s["params"])


# ---------------------------------------------------------------- loop


def fit(
    state: TrainState,
    ds: Dataset,
    schedule: NoiseSchedule,
    model_cfg: ModelConfig,
    cfg: TrainConfig,
    ckpt_dir: Path | None = None,
    log_path: Path | None = None,
) -> list[float]:
    """Train until ``cfg.max_steps``; returns the losses of the steps run here.

    Checkpoints go to ``ckpt_dir/last`` every ``ckpt_every`` steps and at the
    end. On divergence the last good checkpoint is left in place.
    """
    ds_x, ds_y = dataset_tensors(ds)
    losses = []
    logf = open(log_path, "a") if log_path else None
    try:
        while state.step < cfg.max_steps:
            t0 = time.perf_counter()
            x, y = draw_batch(ds_x, ds_y, cfg.batch_size, state.generator)
            value = train_step(state, x, y, schedule, cfg)
            losses.append(value)
            if logf:
                rec = {"step": state.step, "loss": value, "lr": cfg.lr, "wall_ms": (time.perf_counter() - t0) * 1e3}
                logf.write(json.dumps(rec) + "\n")
            if cfg.log_every and state.step % cfg.log_every == 0:
                log.info("step %d loss %.5f", state.step, value)
            if ckpt_dir and cfg.ckpt_every and state.step % cfg.ckpt_every == 0:
                save_checkpoint(Path(ckpt_dir) / "last", state, model_cfg, cfg, schedule)
    finally:
        if logf:
            logf.close()
    if ckpt_dir:
        save_checkpoint(Path(ckpt_dir) / "last", state, model_cfg, cfg, schedule)
    return losses
