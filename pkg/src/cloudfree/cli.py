"""Command-line interface.

Exit codes: 0 success, 1 invalid input or configuration (reported before any
heavy work), 2 runtime failure. JSON reports go to stdout or the requested
file; progress goes to stderr. Setting ``CLOUDFREE_OUTPUT_DIR`` overrides the
output directory of ``train`` and ``sample``.

Images are compared in ``[0, 1]`` (model space ``[-1, 1]`` shifted and
halved) with ``max_val = 1``. PNG previews map ``[-1, 1]`` to ``[0, 255]``
with round-half-up.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np
import torch

from cloudfree import data, efficiency, metrics
from cloudfree.model import ModelConfig
from cloudfree.sampler import SamplerConfig, sample
from cloudfree.schedule import KINDS, build_schedule
from cloudfree.training import (
    TrainConfig,
    TrainingDiverged,
    TrainState,
    fit,
    load_checkpoint,
    schedule_from_manifest,
)

log = logging.getLogger("cloudfree")

CONFIG_VERSION = 1
REPORT_VERSION = 1
OUTPUT_ENV = "CLOUDFREE_OUTPUT_DIR"


class ConfigError(ValueError):
    """Invalid configuration or input; maps to exit code 1."""


# ---------------------------------------------------------------- run config


@dataclass
class RunConfig:
    model: ModelConfig
    train: TrainConfig
    schedule: dict
    sampler: SamplerConfig
    data: dict
    output_dir: Path

    def to_dict(self) -> dict:
        return {
            "version": CONFIG_VERSION,
            "model": self.model.to_dict(),
            "train": asdict(self.train),
            "schedule": self.schedule,
            "sampler": asdict(self.sampler),
            "data": self.data,
            "output_dir": str(self.output_dir),
        }


def _strict(cls, raw, section):
    if not isinstance(raw, dict):
        raise ConfigError(f"'{section}' must be an object")
    allowed = {f.name for f in fields(cls)}
    unknown = sorted(set(raw) - allowed)
    if unknown:
        raise ConfigError(f"unknown keys in '{section}': {', '.join(unknown)}")
    try:
        return cls(**raw)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"invalid '{section}': {e}") from None


def parse_run_config(raw: dict, base_dir: Path = Path(".")) -> RunConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    top = {"version", "model", "train", "schedule", "sampler", "data", "output_dir"}
    unknown = sorted(set(raw) - top)
    if unknown:
        raise ConfigError(f"unknown top-level keys: {', '.join(unknown)}")
    if raw.get("version") != CONFIG_VERSION:
        raise ConfigError(f"config version must be {CONFIG_VERSION}, got {raw.get('version')!r}")

    model = _strict(ModelConfig, raw.get("model", {}), "model")
    sched = raw.get("schedule", {})
    if not isinstance(sched, dict) or set(sched) - {"kind", "T", "params"}:
        raise ConfigError("'schedule' accepts only kind, T and params")
    kind = sched.get("kind", "sigmoid")
    if kind not in KINDS:
        raise ConfigError(f"schedule kind must be one of {KINDS}, got {kind!r}")
    train_raw = dict(raw.get("train", {}))
    if "T" in sched and "T" in train_raw and sched["T"] != train_raw["T"]:
        raise ConfigError(f"schedule.T={sched['T']} disagrees with train.T={train_raw['T']}")
    T = sched.get("T", train_raw.get("T", TrainConfig.T))
    train_raw["T"] = T
    train = _strict(TrainConfig, train_raw, "train")
    schedule = {"kind": kind, "T": T, "params": dict(sched.get("params") or {})}
    try:
        build_schedule(kind, T, schedule["params"])
    except ValueError as e:
        raise ConfigError(f"invalid 'schedule': {e}") from None
    sampler = _strict(SamplerConfig, raw.get("sampler", {}), "sampler")
    try:
        sampler.validate(T)
    except ValueError as e:
        raise ConfigError(f"invalid 'sampler': {e}") from None

    paths = raw.get("data", {})
    if not isinstance(paths, dict) or set(paths) - {"train", "test"}:
        raise ConfigError("'data' accepts only train and test paths")
    paths = {k: str((base_dir / v).resolve()) for k, v in paths.items()}
    if os.environ.get(OUTPUT_ENV):
        out = Path(os.environ[OUTPUT_ENV])
    elif raw.get("output_dir"):
        out = base_dir / raw["output_dir"]
    else:
        raise ConfigError(f"no output_dir in config and {OUTPUT_ENV} is unset")
    return RunConfig(model, train, schedule, sampler, paths, out)


def load_run_config(path) -> RunConfig:
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file {path} not found") from None
    except json.JSONDecodeError as e:
        raise ConfigError(f"config file {path} is not valid JSON: {e}") from None
    return parse_run_config(raw, path.parent)


def _load_dataset_checked(path, model: ModelConfig, what: str) -> data.Dataset:
    if not path:
        raise ConfigError(f"no {what} dataset path configured")
    if not Path(path).exists():
        raise ConfigError(f"{what} dataset {path} does not exist")
    try:
        ds = data.load_dataset(path)
    except data.ContainerError as e:
        raise ConfigError(f"{what} dataset {path}: {e}") from None
    n, c, h, w = ds.shape
    if n != model.n_temporal or c != model.in_channels:
        raise ConfigError(
            f"{what} dataset has N={n}, C={c} but the model expects N={model.n_temporal}, C={model.in_channels}"
        )
    if h % model.divisor or w % model.divisor:
        raise ConfigError(f"{what} images {h}x{w} are not divisible by {model.divisor}")
    return ds


# ---------------------------------------------------------------- commands


def _emit(obj: dict, out: str | None) -> None:
    text = json.dumps(obj, indent=1, sort_keys=True)
    if out:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(text + "\n")
    else:
        print(text)


def cmd_gen_data(args) -> int:
    try:
        ds = data.gen_synthetic(args.seed, args.n, args.hw, args.hw, args.N, args.C, args.split)
    except ValueError as e:
        raise ConfigError(str(e)) from None
    manifest = data.save_dataset(ds, args.out)
    log.info("wrote %d samples to %s", manifest["count"], args.out)
    _emit({"path": str(args.out), "count": manifest["count"], "sha256": manifest["sha256"]}, None)
    return 0


def cmd_train(args) -> int:
    cfg = load_run_config(args.config)
    if args.target:
        cfg.train = TrainConfig(**{**asdict(cfg.train), "target": args.target})
    ds = _load_dataset_checked(cfg.data.get("train"), cfg.model, "train")
    out = cfg.output_dir
    ckpt_dir = out / "checkpoints"
    schedule = build_schedule(cfg.schedule["kind"], cfg.schedule["T"], cfg.schedule["params"])

    if args.resume:
        last = ckpt_dir / "last"
        if not last.exists():
            raise ConfigError(f"nothing to resume: {last} does not exist")
        state, manifest = load_checkpoint(last)
        if ModelConfig(**manifest["model"]) != cfg.model:
            raise ConfigError("checkpoint model config differs from the config file")
        saved = schedule_from_manifest(manifest)
        if (saved.kind, saved.T, saved.params) != (schedule.kind, schedule.T, schedule.params):
            raise ConfigError("checkpoint schedule differs from the config file")
        free = {"max_steps": 0, "log_every": 0, "ckpt_every": 0}
        if manifest["train"] | free != asdict(cfg.train) | free:
            raise ConfigError("checkpoint training config differs from the config file (only max_steps, log_every, ckpt_every may change)")
        log.info("resuming from step %d", state.step)
    else:
        state = TrainState.create(cfg.model, cfg.train)

    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=1, sort_keys=True) + "\n")
    t0 = time.perf_counter()
    losses = fit(state, ds, schedule, cfg.model, cfg.train, ckpt_dir=ckpt_dir, log_path=out / "train_log.jsonl")
    _emit(
        {
            "steps_run": len(losses),
            "step": state.step,
            "final_loss": losses[-1] if losses else None,
            "wall_s": time.perf_counter() - t0,
            "checkpoint": str(ckpt_dir / "last"),
        },
        None,
    )
    return 0


def cmd_sample(args) -> int:
    ck = Path(args.checkpoint)
    if not ck.exists():
        raise ConfigError(f"checkpoint {ck} does not exist")
    try:
        state, manifest = load_checkpoint(ck)
    except data.ContainerError as e:
        raise ConfigError(f"checkpoint {ck}: {e}") from None
    model_cfg = ModelConfig(**manifest["model"])
    schedule = schedule_from_manifest(manifest)
    target = manifest["train"]["target"]
    ds = _load_dataset_checked(args.dataset, model_cfg, "sample")
    for k in args.steps:
        try:
            SamplerConfig(steps=k, seed=args.seed).validate(schedule.T)
        except ValueError as e:
            raise ConfigError(str(e)) from None
    out = Path(os.environ.get(OUTPUT_ENV) or args.out)
    model = state.model if args.raw else state.ema
    model.eval()

    x_all, _ = ds.stacked()
    x_all = torch.from_numpy(x_all)
    timing = []
    for k in args.steps:
        preds = []
        t0 = time.perf_counter()
        for b, start in enumerate(range(0, len(ds), args.batch_size)):
            cfg = SamplerConfig(steps=k, seed=args.seed + b, use_ema=not args.raw)
            preds.append(sample(model, x_all[start : start + args.batch_size], schedule, cfg, target=target).numpy())
        wall = time.perf_counter() - t0
        preds = np.concatenate(preds)
        kdir = out / f"k{k}"
        header = {
            "kind": "predictions",
            "steps": k,
            "seed": args.seed,
            "batch_size": args.batch_size,
            "use_ema": not args.raw,
            "checkpoint": str(ck),
            "ids": [p.id for p in ds.pairs],
        }
        data.write_container(kdir / "predictions", [(p.id, y[None]) for p, y in zip(ds.pairs, preds)], header)
        if args.png:
            (kdir / "png").mkdir(parents=True, exist_ok=True)
            for p, y in zip(ds.pairs, preds):
                (kdir / "png" / f"{p.id}.png").write_bytes(data.png_bytes(y))
        timing.append({"steps": k, "wall_s": wall, "per_sample_s": wall / len(ds), "count": len(ds)})
        log.info("k=%d: %d samples in %.2fs", k, len(ds), wall)
    report = {"version": REPORT_VERSION, "runs": timing}
    out.mkdir(parents=True, exist_ok=True)
    _emit(report, str(out / "timing.json"))
    _emit(report, None)
    return 0


def load_predictions(path) -> dict[str, np.ndarray]:
    path = Path(path)
    if (path / "predictions").is_dir():
        path = path / "predictions"
    if not path.exists():
        raise ConfigError(f"predictions {path} do not exist")
    try:
        manifest, tensors = data.read_container(path)
    except data.ContainerError as e:
        raise ConfigError(f"predictions {path}: {e}") from None
    if manifest.get("kind") != "predictions":
        raise ConfigError(f"{path} holds a {manifest.get('kind')!r}, not predictions")
    return {k: v[0] for k, v in tensors.items()}


def cmd_eval(args) -> int:
    preds = load_predictions(args.pred)
    if not Path(args.ref).exists():
        raise ConfigError(f"reference dataset {args.ref} does not exist")
    try:
        ref = data.load_dataset(args.ref)
    except data.ContainerError as e:
        raise ConfigError(f"reference dataset {args.ref}: {e}") from None
    refs = {p.id: p.y0[0] for p in ref.pairs}
    for sid, y in preds.items():
        if sid in refs and y.shape != refs[sid].shape:
            raise ConfigError(f"prediction {sid!r} has shape {y.shape}, reference {refs[sid].shape}")
    try:
        records, report = metrics.evaluate_pairs(preds, refs)
    except KeyError as e:
        raise ConfigError(e.args[0]) from None
    for r in records:
        r["psnr_db"] = metrics._json_float(r["psnr_db"])
    _emit({"version": REPORT_VERSION, "records": records, "aggregate": report.to_dict()}, args.out)
    return 0


def cmd_count(args) -> int:
    if args.config:
        cfg = load_run_config(args.config).model
        h, w = args.hw if args.hw else (256, 256)
        try:
            macs = efficiency.count_macs(cfg, h, w)
        except ValueError as e:
            raise ConfigError(str(e)) from None
        report = {"config": cfg.to_dict(), "hw": [h, w], "params": efficiency.count_params(cfg), "macs": macs}
    else:
        report = efficiency.reference_config_report()
    report["version"] = REPORT_VERSION
    _emit(report, args.out)
    return 0


def selfcheck_errors() -> dict[str, float]:
    """Relative gradient errors of the differentiable building blocks (float64)."""
    from cloudfree import numerics as nx
    from cloudfree.model import FRM, SEM, Conv, Denoiser, TCFBlock, TimeEncoder, sca, sinusoidal_embedding, ssa

    torch.manual_seed(0)
    g = torch.Generator().manual_seed(0)

    def rnd(*shape):
        return torch.randn(*shape, generator=g, dtype=torch.float64)

    def perturbed(module):
        module = module.double()
        with torch.no_grad():
            for p in module.parameters():
                p.add_(0.3 * rnd(*p.shape))
        return module

    def module_check(module, *extra, x):
        names = [n for n, _ in module.named_parameters()]
        probe = rnd(*module(x, *extra).shape)

        def f(x, *ps):
            return (torch.func.functional_call(module, dict(zip(names, ps)), (x, *extra)) * probe).sum()

        return nx.grad_check(f, [x, *[p.detach() for p in module.parameters()]])

    errs = {}
    errs["ssa"] = nx.grad_check(lambda v: (ssa(v) ** 2).sum(), rnd(4, 4, 4))
    w1, w2, w0 = perturbed(Conv(2, 2)), perturbed(Conv(2, 2)), perturbed(Conv(4, 4))
    errs["sca"] = nx.grad_check(lambda v: (sca(v, w1, w2, w0) ** 2).sum(), rnd(4, 4, 4))
    errs["sem"] = module_check(perturbed(SEM(4)), x=rnd(4, 4, 4))
    errs["frm"] = module_check(perturbed(FRM(4)), x=rnd(4, 4, 4))
    errs["tcf_block"] = module_check(perturbed(TCFBlock(4, time_dim=6)), rnd(4, 4, 4), rnd(6), x=rnd(4, 4, 4))

    class TimeMLP(torch.nn.Module):
        def __init__(self, enc):
            super().__init__()
            self.enc = enc

        def forward(self, feats):
            return self.enc.mlp(feats)

    feats = sinusoidal_embedding(torch.tensor([1.0, 50.0, 999.0], dtype=torch.float64), 8)
    errs["time_mlp"] = module_check(TimeMLP(perturbed(TimeEncoder(8, 16))), x=feats)
    m = Denoiser(ModelConfig(in_channels=3, n_temporal=2, width=8)).double()
    with torch.no_grad():
        m.head.weight.copy_(0.1 * rnd(*m.head.weight.shape))
    stem = m.cond.stem
    errs["condition_stem"] = nx.grad_check(
        lambda v, w, b: (nx.conv2d(v, stem.spec, w, b) ** 2).sum(), [rnd(6, 8, 8), stem.weight, stem.bias]
    )
    t = torch.tensor([37])
    errs["denoiser"] = nx.grad_check(lambda y, x: m(y, t, x).sum(), [rnd(1, 3, 8, 8), rnd(1, 2, 3, 8, 8)])
    return errs


def cmd_selfcheck(args) -> int:
    errs = selfcheck_errors()
    ok = all(v < args.tol for v in errs.values())
    _emit({"version": REPORT_VERSION, "tolerance": args.tol, "errors": errs, "ok": ok}, args.out)
    return 0 if ok else 2


# ---------------------------------------------------------------- entry point


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cloudfree", description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic cloudy dataset")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--n", type=int, required=True, help="number of samples")
    g.add_argument("--hw", type=int, default=32, help="image height and width (multiple of 8)")
    g.add_argument("--N", type=int, default=3, help="cloudy views per sample")
    g.add_argument("--C", type=int, default=3, help="channels")
    g.add_argument("--split", default="train")
    g.add_argument("--out", required=True, help="output container directory")
    g.set_defaults(fn=cmd_gen_data)

    t = sub.add_parser("train", help="train from a JSON run config")
    t.add_argument("config")
    t.add_argument("--target", choices=["data", "noise"], help="override train.target")
    t.add_argument("--resume", action="store_true", help="continue from <output_dir>/checkpoints/last")
    t.set_defaults(fn=cmd_train)

    s = sub.add_parser("sample", help="sample clean images for a dataset")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--dataset", required=True)
    s.add_argument("--steps", type=int, nargs="+", default=[1], help="one or more sampling step counts")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--batch-size", type=int, default=16)
    s.add_argument("--raw", action="store_true", help="use raw weights instead of the EMA shadow")
    s.add_argument("--png", action="store_true", help="also write PNG previews")
    s.add_argument("--out", default="samples")
    s.set_defaults(fn=cmd_sample)

    e = sub.add_parser("eval", help="PSNR/SSIM of predictions against a reference dataset")
    e.add_argument("pred", help="predictions container (or the k<steps> directory holding it)")
    e.add_argument("ref", help="reference dataset container")
    e.add_argument("--out", help="write the JSON report here instead of stdout")
    e.set_defaults(fn=cmd_eval)

    c = sub.add_parser("count", help="analytic parameter and MAC counts")
    c.add_argument("--config", help="run config; without it the reference 256x256, N=3, width-64 setup is counted")
    c.add_argument("--hw", type=int, nargs=2, metavar=("H", "W"))
    c.add_argument("--out")
    c.set_defaults(fn=cmd_count)

    k = sub.add_parser("selfcheck", help="finite-difference gradient checks of the building blocks")
    k.add_argument("--tol", type=float, default=1e-4)
    k.add_argument("--out")
    k.set_defaults(fn=cmd_selfcheck)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(message)s")
    try:
        return args.fn(args)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (TrainingDiverged, FloatingPointError) as e:
        print(f"runtime error: {e}", file=sys.stderr)
        return 2
    except (OSError, data.ContainerError) as e:
        print(f"runtime error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
