"""Command-line entry point: train, eval, profile, ablate, gradcheck.

Precedence for every setting is CLI flag, then ``--config`` file, then the
built-in default. Each invocation writes into a fresh run directory under
``--out-dir`` so earlier results are never overwritten.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__, checkpoint, gradcheck
from .evaluation import (
    SubnetRecord,
    evaluate_all,
    evaluate,
    pareto_report,
    profile_summary,
    residual_profile,
    write_profile_csv,
    write_subnets_csv,
)
from .experiments import DATASETS, MODELS, DataSpec, ModelSpec, build_model, load_data, strategy_means, table3_grid, table4_grid
from .network import RATIOS, SkipConfig, build_from_config, flops, param_count
from .training import OPTIMIZERS, SCHEDULES, STRATEGIES, TrainRecipe, train

logger = logging.getLogger("adaptive_depth")

GRIDS = ("table3", "table4", "both")
MANIFEST = "manifest.json"
CHECKPOINT = "model.adnw"


@dataclass
class RunConfig:
    model: str = "resnet_tiny"
    dataset: str = "synthetic"
    data_dir: Optional[str] = None
    out_dir: str = "runs"
    ratio: str = "default"
    skip_aware: bool = True
    stage_blocks: str = "3,4,6,3"
    widths: str = "16,32,64,128"
    image_size: Optional[int] = None
    synthetic_n: int = 256
    synthetic_classes: int = 10
    noise: float = 0.25
    epochs: int = 20
    batch_size: int = 64
    optimizer: str = "sgd_momentum"
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 5e-4
    lr_schedule: str = "cosine"
    warmup_epochs: int = 0
    kl_temperature: float = 1.0
    feature_kl: bool = False
    distill_strategy: str = "ours"
    crop_pad: int = 0
    hflip_prob: float = 0.0
    seed: int = 0
    grid: str = "both"
    seeds: int = 1
    eval_batch_size: int = 256
    max_batches: Optional[int] = None

    def recipe(self, **overrides) -> TrainRecipe:
        base = dict(
            epochs=self.epochs,
            batch_size=self.batch_size,
            optimizer=self.optimizer,
            lr=self.lr,
            momentum=self.momentum,
            weight_decay=self.weight_decay,
            lr_schedule=self.lr_schedule,
            warmup_epochs=self.warmup_epochs,
            kl_temperature=self.kl_temperature,
            feature_kl=self.feature_kl,
            distill_strategy=self.distill_strategy,
            crop_pad=self.crop_pad,
            hflip_prob=self.hflip_prob,
            seed=self.seed,
        )
        base.update(overrides)
        return TrainRecipe(**base)

    def data_spec(self) -> DataSpec:
        return DataSpec(
            self.dataset, self.data_dir, self.synthetic_n, self.synthetic_classes, self.image_size, None, self.noise, self.seed
        )

    def model_spec(self) -> ModelSpec:
        return ModelSpec(
            self.model, self.ratio, _ints(self.stage_blocks), _ints(self.widths), skip_aware=self.skip_aware
        )


CHOICES = {
    "model": MODELS,
    "dataset": DATASETS,
    "ratio": RATIOS,
    "optimizer": OPTIMIZERS,
    "lr_schedule": SCHEDULES,
    "distill_strategy": STRATEGIES,
    "grid": GRIDS,
}


class UsageError(ValueError):
    """Invalid user input; reported with exit status 2."""


def _ints(text) -> tuple:
    if isinstance(text, (list, tuple)):
        return tuple(int(v) for v in text)
    return tuple(int(v) for v in str(text).split(",") if v.strip())


def _bool(text) -> bool:
    if isinstance(text, bool):
        return text
    low = str(text).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise UsageError(f"not a boolean: {text!r}")


def read_config_file(path) -> dict:
    """Flat ``key = value`` lines; ``#`` starts a comment; keys may use dashes."""
    out = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line or (line.startswith("[") and line.endswith("]")):
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key=value, got {line!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        out[key.replace("-", "_")] = value.strip("\"'")
    return out


def _coerce(name: str, value):
    kinds = {f.name: f.type for f in fields(RunConfig)}
    if name not in kinds:
        raise UsageError(f"unknown config key {name!r}")
    kind = kinds[name]
    if value is None:
        return None
    if "bool" in kind:
        return _bool(value)
    if "int" in kind:
        return int(value)
    if "float" in kind:
        return float(value)
    return str(value)


def resolve_config(cli: dict, config_path: Optional[str]) -> RunConfig:
    """Defaults, overridden by the config file, overridden by explicit CLI flags."""
    merged = {}
    if config_path:
        for key, value in read_config_file(config_path).items():
            merged[key] = _coerce(key, value)
    for key, value in cli.items():
        if key in {f.name for f in fields(RunConfig)}:
            merged[key] = value
    cfg = RunConfig(**merged)
    for key, allowed in CHOICES.items():
        if getattr(cfg, key) not in allowed:
            raise UsageError(f"invalid {key} {getattr(cfg, key)!r}; choose from {', '.join(allowed)}")
    try:
        _ints(cfg.stage_blocks), _ints(cfg.widths)
        cfg.recipe()
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    if cfg.seeds < 1:
        raise UsageError("--seeds must be >= 1")
    return cfg


def new_run_dir(out_dir, verb: str) -> Path:
    """First unused ``<verb>-NNNN`` directory under ``out_dir``."""
    root = Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)
    for i in range(1, 100000):
        path = root / f"{verb}-{i:04d}"
        try:
            path.mkdir()
        except FileExistsError:
            continue
        return path
    raise RuntimeError(f"no free run directory under {root}")


# -- argument parsing ---------------------------------------------------------
def _run_flags() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False, argument_default=argparse.SUPPRESS)
    g = p.add_argument_group("run configuration")
    g.add_argument("--config", help="key=value file; CLI flags take precedence")
    g.add_argument("--model", choices=MODELS)
    g.add_argument("--dataset", choices=DATASETS)
    g.add_argument("--data-dir")
    g.add_argument("--out-dir")
    g.add_argument("--ratio", choices=RATIOS, help="mandatory/skippable split per stage")
    g.add_argument("--no-skip-aware", dest="skip_aware", action="store_false", help="single shared norm set")
    g.add_argument("--stage-blocks", help="comma-separated blocks per stage (resnet_tiny)")
    g.add_argument("--widths", help="comma-separated channels per stage (resnet_tiny)")
    g.add_argument("--image-size", type=int, help="synthetic image side")
    g.add_argument("--synthetic-n", type=int)
    g.add_argument("--synthetic-classes", type=int)
    g.add_argument("--noise", type=float)
    g.add_argument("--epochs", type=int)
    g.add_argument("--batch-size", type=int)
    g.add_argument("--optimizer", choices=OPTIMIZERS)
    g.add_argument("--lr", type=float)
    g.add_argument("--momentum", type=float)
    g.add_argument("--weight-decay", type=float)
    g.add_argument("--lr-schedule", choices=SCHEDULES)
    g.add_argument("--warmup-epochs", type=int)
    g.add_argument("--kl-temperature", type=float)
    g.add_argument("--feature-kl", action="store_true")
    g.add_argument("--distill-strategy", choices=STRATEGIES)
    g.add_argument("--crop-pad", type=int)
    g.add_argument("--hflip-prob", type=float)
    g.add_argument("--seed", type=int)
    g.add_argument("--eval-batch-size", type=int)
    return p


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="adaptive-depth", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="verb", required=True)
    flags = _run_flags()

    sub.add_parser("train", parents=[flags], help="train an adaptive depth network")

    ev = sub.add_parser("eval", parents=[flags], help="evaluate sub-networks of a checkpoint")
    ev.add_argument("checkpoint", help="run directory or .adnw file written by train")
    which = ev.add_mutually_exclusive_group(required=True)
    which.add_argument("--skip", help="per-stage T/F string, e.g. TFFF")
    which.add_argument("--all", action="store_true", help="every sub-network plus a Pareto flag")

    pr = sub.add_parser("profile", parents=[flags], help="residual magnitude ratio per block")
    pr.add_argument("checkpoint")
    pr.add_argument("--skip", default=None, help="sub-network to profile (default: super-net)")
    pr.add_argument("--max-batches", type=int)

    ab = sub.add_parser("ablate", parents=[flags], help="distillation and norm ablation grids")
    ab.add_argument("--grid", choices=GRIDS, default=argparse.SUPPRESS)
    ab.add_argument("--seeds", type=int, default=argparse.SUPPRESS, help="seeds per strategy row (starting at --seed)")

    sub.add_parser("gradcheck", help="finite-difference check of every primitive")
    return parser


# -- helpers ------------------------------------------------------------------
def _locate(checkpoint_arg) -> tuple[Path, Path]:
    path = Path(checkpoint_arg)
    ckpt = path / CHECKPOINT if path.is_dir() else path
    manifest = ckpt.parent / MANIFEST
    if not ckpt.exists():
        raise FileNotFoundError(f"checkpoint not found: {ckpt}")
    if not manifest.exists():
        raise FileNotFoundError(f"{MANIFEST} not found next to {ckpt}")
    return ckpt, manifest


def _load_run(args_dict: dict, config_path):
    """Rebuild the trained model; data settings default to the training run's."""
    ckpt, manifest_path = _locate(args_dict.pop("checkpoint"))
    manifest = json.loads(manifest_path.read_text())
    base = {k: v for k, v in manifest["config"].items() if k in {f.name for f in fields(RunConfig)}}
    file_cfg = {}
    if config_path:
        file_cfg = {k: _coerce(k, v) for k, v in read_config_file(config_path).items()}
    merged = {**base, **file_cfg, **args_dict}
    cfg = resolve_config(merged, None)
    net = build_from_config(manifest["model"])
    checkpoint.load_model(ckpt, net)
    stats = (np.asarray(manifest["norm_stats"]["mean"]), np.asarray(manifest["norm_stats"]["std"]))
    return cfg, net, stats


def _print_records(records: Sequence[SubnetRecord]) -> None:
    print(f"{'skip':<8}{'flops':>14}{'params':>12}{'top1':>9}  pareto")
    for r in records:
        mark = "" if r.pareto is None else ("*" if r.pareto else "")
        print(f"{r.skip:<8}{r.flops:>14,}{r.params:>12,}{r.top1:>9.4f}  {mark}")


def _write_rows(path, rows: Sequence[dict]) -> None:
    keys: list = []
    for row in rows:
        keys.extend(k for k in row if k not in keys)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, keys, lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in row.items()})


# -- verbs --------------------------------------------------------------------
def cmd_train(cfg: RunConfig) -> int:
    data = load_data(cfg.data_spec(), cfg.model)
    net = build_model(cfg.model_spec(), data, cfg.seed)
    run = new_run_dir(cfg.out_dir, "train")
    mean, std = data.stats
    manifest = {
        "version": __version__,
        "seed": cfg.seed,
        "config": asdict(cfg),
        "model": net.config,
        "norm_stats": {"mean": [float(v) for v in mean], "std": [float(v) for v in std]},
        "flops_supernet": flops(net, SkipConfig.supernet(net.n_stages)),
        "params": param_count(net),
    }
    (run / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    result = train(
        net,
        data.train,
        cfg.recipe(),
        data.val,
        data.stats,
        log_path=run / "train_log.csv",
        checkpoint_path=run / CHECKPOINT,
        eval_batch_size=cfg.eval_batch_size,
    )
    if result.aborted:
        print(f"training aborted: {result.aborted}", file=sys.stderr)
        return 1
    last = result.log[-1]
    print(f"run: {run}")
    print(f"supernet top1 {last['acc_supernet']:.4f}  basenet top1 {last['acc_basenet']:.4f}")
    return 0


def cmd_eval(cfg: RunConfig, net, stats, skip: Optional[str], run_all: bool) -> int:
    if skip is not None:
        try:
            cfg_skip = SkipConfig.parse(skip, net.n_stages)
        except ValueError as exc:
            raise UsageError(str(exc)) from exc
    data = load_data(cfg.data_spec(), cfg.model)
    run = new_run_dir(cfg.out_dir, "eval")
    if run_all:
        records = pareto_report(evaluate_all(net, data.val, stats, cfg.eval_batch_size))
    else:
        top1 = evaluate(net, cfg_skip, data.val, stats, cfg.eval_batch_size)
        records = [SubnetRecord(str(cfg_skip), flops(net, cfg_skip), param_count(net, cfg_skip), top1)]
    write_subnets_csv(run / "subnets.csv", records)
    _print_records(records)
    print(f"wrote {run / 'subnets.csv'}")
    return 0


def cmd_profile(cfg: RunConfig, net, stats, skip: Optional[str], max_batches: Optional[int]) -> int:
    try:
        skip_cfg = None if skip is None else SkipConfig.parse(skip, net.n_stages)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    data = load_data(cfg.data_spec(), cfg.model)
    run = new_run_dir(cfg.out_dir, "profile")
    profile = residual_profile(net, data.val, stats, skip_cfg, max_batches, cfg.eval_batch_size)
    write_profile_csv(run / "profile.csv", profile)
    for p in profile:
        kind = "skippable" if p.skippable else "mandatory"
        print(f"stage {p.stage} block {p.block} {kind:<9} {p.ratio:.4f}")
    s = profile_summary(profile)
    verdict = "PASS" if s["skippable_mean"] < s["mandatory_mean"] else "FAIL"
    print(
        f"mandatory_mean {s['mandatory_mean']:.4f}  skippable_mean {s['skippable_mean']:.4f}  "
        f"ratio {s['ratio']:.4f}  {verdict}"
    )
    print(f"wrote {run / 'profile.csv'}")
    return 0


def cmd_ablate(cfg: RunConfig) -> int:
    data = load_data(cfg.data_spec(), cfg.model)
    model = cfg.model_spec()
    recipe = cfg.recipe()
    run = new_run_dir(cfg.out_dir, "ablate")
    rows = []
    if cfg.grid in ("table3", "both"):
        rows += table3_grid(model, data, recipe)
    if cfg.grid in ("table4", "both"):
        t4 = table4_grid(model, data, recipe, [cfg.seed + i for i in range(cfg.seeds)])
        rows += t4
        for strategy, cols in strategy_means(t4).items():
            print(strategy, "  ".join(f"{k[4:]} {v:.4f}" for k, v in cols.items()))
    _write_rows(run / "ablation.csv", rows)
    for row in rows:
        print(", ".join(f"{k}={v:.4f}" if isinstance(v, float) else f"{k}={v}" for k, v in row.items()))
    print(f"wrote {run / 'ablation.csv'}")
    return 0


def cmd_gradcheck(seed: int = 0) -> int:
    failed = []
    for name, err in gradcheck.run_suite(seed):
        ok = err < gradcheck.TOLERANCE
        print(f"{name:<18} max_rel_err {err:.3e}  {'ok' if ok else 'FAIL'}")
        if not ok:
            failed.append(name)
    if failed:
        print(f"gradcheck failed: {', '.join(failed)}", file=sys.stderr)
        return 1
    print("gradcheck passed")
    return 0


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = vars(parser.parse_args(argv))
    logging.basicConfig(
        level=logging.INFO if args.pop("verbose") else logging.WARNING, format="%(levelname)s %(name)s: %(message)s"
    )
    verb = args.pop("verb")
    if verb == "gradcheck":
        return cmd_gradcheck()
    config_path = args.pop("config", None)
    try:
        if verb in ("eval", "profile"):
            skip = args.pop("skip", None)
            run_all = args.pop("all", False)
            max_batches = args.pop("max_batches", None)
            cfg, net, stats = _load_run(args, config_path)
            if verb == "eval":
                return cmd_eval(cfg, net, stats, skip, run_all)
            return cmd_profile(cfg, net, stats, skip, max_batches)
        cfg = resolve_config(args, config_path)
        if verb == "train":
            return cmd_train(cfg)
        return cmd_ablate(cfg)
    except UsageError as exc:
        parser.error(str(exc))
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 1


if __name__ == "__main__":
    sys.exit(main())
