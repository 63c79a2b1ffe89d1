"""Desk-scale training/evaluation runs used to check the ablation orderings.

A run trains one model on a synthetic dataset and reports test PSNR/SSIM and
sampling wall-clock for each requested step count. Results are cached as JSON
keyed by the run config and a hash of the package sources that influence the
numbers, so an unchanged run is not repeated.
"""

from __future__ import annotations

import argparse
import ast
import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from cloudfree import data, metrics
from cloudfree.model import ModelConfig
from cloudfree.sampler import SamplerConfig, sample
from cloudfree.schedule import build_schedule
from cloudfree.training import TrainConfig, TrainState, fit

log = logging.getLogger(__name__)

CORE_MODULES = ("numerics", "schedule", "model", "training", "sampler", "data", "metrics", "experiments")


@dataclass
class DeskRun:
    seed: int = 0
    target: str = "data"
    schedule: str = "sigmoid"
    steps: int = 20000
    width: int = 16
    hw: int = 32
    n_train: int = 500
    n_test: int = 50
    n_temporal: int = 3
    channels: int = 3
    lr: float = 2e-4
    batch_size: int = 8
    ema_decay: float = 0.999
    T: int = 2000
    data_seed: int = 7
    eval_steps: list[int] = field(default_factory=lambda: [1, 10])

    def key(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True) + source_hash()
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    @property
    def name(self) -> str:
        return f"{self.target}-{self.schedule}-s{self.seed}"


def _code_only(src: str) -> str:
    """AST dump with docstrings removed, so comment and doc edits keep the cache."""
    tree = ast.parse(src)
    for node in ast.walk(tree):
        body = getattr(node, "body", None)
        if (
            isinstance(body, list)
            and body
            and isinstance(body[0], ast.Expr)
            and isinstance(body[0].value, ast.Constant)
            and isinstance(body[0].value.value, str)
        ):
            node.body = body[1:] or [ast.Pass()]
    return ast.dump(tree, include_attributes=False)


def source_hash() -> str:
    root = Path(__file__).parent
    h = hashlib.sha256()
    for mod in CORE_MODULES:
        h.update(_code_only((root / f"{mod}.py").read_text()).encode())
    return h.hexdigest()


def datasets(run: DeskRun) -> tuple[data.Dataset, data.Dataset]:
    train = data.gen_synthetic(run.data_seed, run.n_train, run.hw, run.hw, run.n_temporal, run.channels, "train")
    test = data.gen_synthetic(run.data_seed + 1000, run.n_test, run.hw, run.hw, run.n_temporal, run.channels, "test")
    return train, test


def evaluate(model, test: data.Dataset, schedule, steps: int, target: str, seed: int = 0) -> dict:
    x, y = test.stacked()
    x = torch.from_numpy(x)
    model.eval()
    t0 = time.perf_counter()
    out = sample(model, x, schedule, SamplerConfig(steps=steps, seed=seed), target=target).numpy()
    wall = time.perf_counter() - t0
    preds = {p.id: o for p, o in zip(test.pairs, out)}
    refs = {p.id: r for p, r in zip(test.pairs, y)}
    _, report = metrics.evaluate_pairs(preds, refs)
    return {"psnr_db": report.psnr_db, "ssim": report.ssim, "wall_s": wall}


def run_desk(run: DeskRun) -> dict:
    train, test = datasets(run)
    model_cfg = ModelConfig(in_channels=run.channels, n_temporal=run.n_temporal, width=run.width)
    cfg = TrainConfig(
        lr=run.lr,
        batch_size=run.batch_size,
        ema_decay=run.ema_decay,
        target=run.target,
        T=run.T,
        max_steps=run.steps,
        seed=run.seed,
        log_every=1000,
        ckpt_every=0,
    )
    schedule = build_schedule(run.schedule, run.T)
    state = TrainState.create(model_cfg, cfg)
    t0 = time.perf_counter()
    losses = fit(state, train, schedule, model_cfg, cfg)
    train_s = time.perf_counter() - t0
    evals = {str(k): evaluate(state.ema, test, schedule, k, run.target) for k in run.eval_steps}
    return {
        "run": asdict(run),
        "name": run.name,
        "train_s": train_s,
        "loss_first100": float(np.mean(losses[:100])) if losses else None,
        "loss_last100": float(np.mean(losses[-100:])) if losses else None,
        "eval": evals,
    }


def cached_run(run: DeskRun, cache_dir) -> dict:
    cache_dir = Path(cache_dir)
    path = cache_dir / f"{run.name}-{run.key()}.json"
    if path.exists():
        return json.loads(path.read_text())
    torch.set_num_threads(1)
    result = run_desk(run)
    cache_dir.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(result, indent=1, sort_keys=True) + "\n")
    return result


def ordering_runs(seeds=(0, 1, 2), **overrides) -> list[DeskRun]:
    """The runs behind the prediction-target and schedule comparisons."""
    runs = []
    for s in seeds:
        runs.append(DeskRun(seed=s, target="data", schedule="sigmoid", **overrides))
        runs.append(DeskRun(seed=s, target="noise", schedule="sigmoid", **overrides))
        runs.append(DeskRun(seed=s, target="data", schedule="linear", **overrides))
    return runs


def main(argv=None) -> int:
    p = argparse.ArgumentParser(description="Run (or fetch from cache) the desk-scale ordering runs.")
    p.add_argument("--cache", default=".acceptance_cache")
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    args = p.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    for run in ordering_runs(tuple(args.seeds)):
        t0 = time.perf_counter()
        r = cached_run(run, args.cache)
        ev = {k: round(v["psnr_db"], 3) for k, v in r["eval"].items()}
        log.info("%s psnr %s (%.0fs)", run.name, ev, time.perf_counter() - t0)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
