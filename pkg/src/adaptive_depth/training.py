"""Two-pass self-distillation training for adaptive depth networks.

Per iteration: a teacher pass (super-net by default) trained on labels, its
backward, then a student pass (base-net by default) distilled from the
teacher outputs, a second backward that accumulates into the same buffers,
and one optimizer step.
"""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from . import checkpoint
from .data import LabeledImageSet, augment, normalize
from .functional import cross_entropy, kl_divergence
from .network import AdaptiveDepthNetwork, SkipConfig, enumerate_subnets
from .tensor import Tensor, add, flatten

logger = logging.getLogger(__name__)

STRATEGIES = ("ours", "teacher_random", "student_random", "both_random", "none", "vanilla")
OPTIMIZERS = ("sgd_momentum", "adamw")
SCHEDULES = ("cosine", "step")
LOG_COLUMNS = ("epoch", "step", "loss_super", "loss_base", "lr", "acc_supernet", "acc_basenet", "wall_ms")


class NonFiniteLossError(FloatingPointError):
    pass


@dataclass
class TrainRecipe:
    epochs: int = 20
    batch_size: int = 128
    optimizer: str = "sgd_momentum"
    lr: float = 0.1
    momentum: float = 0.9
    betas: tuple = (0.9, 0.999)
    weight_decay: float = 5e-4
    lr_schedule: str = "cosine"
    warmup_epochs: int = 5
    kl_temperature: float = 1.0
    feature_kl: bool = False
    distill_strategy: str = "ours"
    crop_pad: int = 0
    hflip_prob: float = 0.0
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.lr <= 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if self.kl_temperature <= 0:
            raise ValueError(f"kl_temperature must be positive, got {self.kl_temperature}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.distill_strategy not in STRATEGIES:
            raise ValueError(f"unknown distill strategy {self.distill_strategy!r}; expected one of {STRATEGIES}")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"unknown optimizer {self.optimizer!r}; expected one of {OPTIMIZERS}")
        if self.lr_schedule not in SCHEDULES:
            raise ValueError(f"unknown lr schedule {self.lr_schedule!r}; expected one of {SCHEDULES}")


@dataclass
class StepReport:
    loss_super: float
    loss_base: float
    grad_norm: float
    lr: float
    teacher: str
    student: str
    timings_ms: dict = field(default_factory=dict)


# -- losses -----------------------------------------------------------------
def feature_kl(h_super: Sequence, h_base: Sequence, temperature: float = 1.0) -> Tensor:
    """KL between per-sample softmaxes of flattened stage features, summed over stages."""
    if len(h_super) != len(h_base):
        raise ValueError(f"stage count mismatch: {len(h_super)} vs {len(h_base)}")
    total = None
    for s, (teacher, student) in enumerate(zip(h_super, h_base)):
        if teacher.shape != student.shape:
            raise ValueError(f"stage {s} feature shapes differ: {teacher.shape} vs {student.shape}")
        t_data = teacher.data if isinstance(teacher, Tensor) else np.asarray(teacher)
        term = kl_divergence(t_data.reshape(t_data.shape[0], -1), flatten(student), temperature)
        total = term if total is None else add(total, term)
    return total


# -- optimizers and schedules -----------------------------------------------
def _decays(p: Tensor) -> bool:
    # norm parameters and biases are 1-D
    return p.ndim > 1


def sgd_momentum_step(params, grads, state, lr, momentum=0.9, weight_decay=0.0) -> None:
    """v <- momentum * v + grad + wd * param;  param <- param - lr * v (in place)."""
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            continue
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {p.shape}")
        d = g + weight_decay * p.data if weight_decay and _decays(p) else g
        v = state.get(i)
        if v is None:
            v = state[i] = np.zeros_like(p.data)
        elif v.shape != p.shape:
            raise ValueError(f"momentum buffer shape {v.shape} does not match parameter {p.shape}")
        v *= momentum
        v += d
        p.data -= (lr * v).astype(p.dtype)


def adamw_step(params, grads, state, lr, betas=(0.9, 0.999), weight_decay=0.0, eps=1e-8) -> None:
    b1, b2 = betas
    state["t"] = t = state.get("t", 0) + 1
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            continue
        m, v = state.get(("m", i)), state.get(("v", i))
        if m is None:
            m = state[("m", i)] = np.zeros_like(p.data)
            v = state[("v", i)] = np.zeros_like(p.data)
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        mhat = m / (1 - b1**t)
        vhat = v / (1 - b2**t)
        if weight_decay and _decays(p):
            p.data -= (lr * weight_decay * p.data).astype(p.dtype)
        p.data -= (lr * mhat / (np.sqrt(vhat) + eps)).astype(p.dtype)


class Optimizer:
    def __init__(self, params: list, recipe: TrainRecipe):
        self.params = params
        self.recipe = recipe
        self.state: dict = {}

    def step(self, lr: float) -> None:
        grads = [p.grad for p in self.params]
        r = self.recipe
        if r.optimizer == "sgd_momentum":
            sgd_momentum_step(self.params, grads, self.state, lr, r.momentum, r.weight_decay)
        else:
            adamw_step(self.params, grads, self.state, lr, r.betas, r.weight_decay)


def cosine_lr(step: int, total_steps: int, base_lr: float, warmup_steps: int = 0) -> float:
    if warmup_steps > 0 and step < warmup_steps:
        return base_lr * step / warmup_steps
    span = max(total_steps - warmup_steps, 1)
    progress = min(max((step - warmup_steps) / span, 0.0), 1.0)
    return 0.5 * base_lr * (1.0 + math.cos(math.pi * progress))


def step_lr(step: int, total_steps: int, base_lr: float, warmup_steps: int = 0, milestones=(0.5, 0.75)) -> float:
    if warmup_steps > 0 and step < warmup_steps:
        return base_lr * step / warmup_steps
    drops = sum(step >= m * total_steps for m in milestones)
    return base_lr * (0.1**drops)


def learning_rate(recipe: TrainRecipe, step: int, total_steps: int, steps_per_epoch: int) -> float:
    warmup = min(recipe.warmup_epochs * steps_per_epoch, total_steps // 2)
    fn = cosine_lr if recipe.lr_schedule == "cosine" else step_lr
    return fn(step, total_steps, recipe.lr, warmup)


# -- one iteration ----------------------------------------------------------
def pick_configs(n_stages: int, strategy: str, rng: np.random.Generator) -> tuple[SkipConfig, Optional[SkipConfig]]:
    """Teacher and student sub-networks for one iteration (student None = single pass)."""
    supernet, basenet = SkipConfig.supernet(n_stages), SkipConfig.basenet(n_stages)
    if strategy == "vanilla":
        return supernet, None
    if strategy in ("ours", "none"):
        return supernet, basenet
    pool = enumerate_subnets(n_stages)
    teacher = pool[rng.integers(len(pool))] if strategy in ("teacher_random", "both_random") else supernet
    student = pool[rng.integers(len(pool))] if strategy in ("student_random", "both_random") else basenet
    return teacher, student


def _check_finite(value: float, what: str, teacher, student) -> None:
    if not np.isfinite(value):
        raise NonFiniteLossError(f"{what} is {value} (teacher {teacher}, student {student})")


def compute_step_grads(
    net: AdaptiveDepthNetwork,
    images: np.ndarray,
    labels: np.ndarray,
    recipe: TrainRecipe,
    rng: np.random.Generator,
    lr: float = 0.0,
) -> StepReport:
    """Run both passes and both backwards, accumulating into ``.grad`` (no update)."""
    teacher_cfg, student_cfg = pick_configs(net.n_stages, recipe.distill_strategy, rng)
    timings = {}

    t0 = time.perf_counter()
    logits_t, feats_t = net.forward(images, teacher_cfg, training=True)
    loss_super = cross_entropy(logits_t, labels)
    loss_super_value = loss_super.item()
    _check_finite(loss_super_value, "loss_super", teacher_cfg, student_cfg)
    loss_super.backward()
    teacher_logits = logits_t.data.copy()
    teacher_feats = [f.data.copy() for f in feats_t] if recipe.feature_kl else None
    del logits_t, feats_t, loss_super
    timings["teacher_ms"] = (time.perf_counter() - t0) * 1e3

    loss_base_value = 0.0
    if student_cfg is not None:
        t0 = time.perf_counter()
        logits_s, feats_s = net.forward(images, student_cfg, training=True)
        if recipe.distill_strategy == "none":
            loss_base = cross_entropy(logits_s, labels)
        else:
            loss_base = kl_divergence(teacher_logits, logits_s, recipe.kl_temperature)
            if recipe.feature_kl:
                loss_base = add(feature_kl(teacher_feats, feats_s, recipe.kl_temperature), loss_base)
        loss_base_value = loss_base.item()
        _check_finite(loss_base_value, "loss_base", teacher_cfg, student_cfg)
        loss_base.backward()
        timings["student_ms"] = (time.perf_counter() - t0) * 1e3

    sq = 0.0
    for p in net.parameters():
        if p.grad is not None:
            sq += float(np.sum(np.square(p.grad, dtype=np.float64)))
    return StepReport(
        loss_super=float(loss_super_value),
        loss_base=float(loss_base_value),
        grad_norm=math.sqrt(sq),
        lr=lr,
        teacher=str(teacher_cfg),
        student="" if student_cfg is None else str(student_cfg),
        timings_ms=timings,
    )


def train_step(
    net: AdaptiveDepthNetwork,
    images: np.ndarray,
    labels: np.ndarray,
    recipe: TrainRecipe,
    optimizer: Optimizer,
    rng: np.random.Generator,
    lr: float,
) -> StepReport:
    """zero grads, teacher pass + backward, student pass + backward, one optimizer step."""
    net.zero_grad()
    report = compute_step_grads(net, images, labels, recipe, rng, lr)
    optimizer.step(lr)
    return report


# -- full loop --------------------------------------------------------------
@dataclass
class TrainResult:
    log: list
    steps: int
    stats: tuple
    aborted: Optional[str] = None


def epoch_order(n: int, epoch: int, seed: int) -> np.ndarray:
    """Seeded shuffle for one epoch; independent of anything else that consumes randomness."""
    return np.random.default_rng([seed, 0, epoch]).permutation(n)


def iterate_batches(ds: LabeledImageSet, batch_size: int, epoch: int, seed: int):
    order = epoch_order(len(ds), epoch, seed)
    for start in range(0, len(order), batch_size):
        idx = order[start : start + batch_size]
        if len(idx) < 2:
            continue  # batch statistics need two samples
        yield ds.images[idx], ds.labels[idx]


def train(
    net: AdaptiveDepthNetwork,
    train_set: LabeledImageSet,
    recipe: TrainRecipe,
    val_set: Optional[LabeledImageSet] = None,
    stats: Optional[tuple] = None,
    log_path=None,
    checkpoint_path=None,
    eval_batch_size: int = 256,
) -> TrainResult:
    """Run the two-pass training loop; evaluate super-net and base-net after every epoch.

    The checkpoint (if requested) is rewritten at the end of each epoch, so a
    non-finite loss leaves the last good one in place.
    """
    from .data import channel_stats
    from .evaluation import evaluate

    recipe.validate()
    if len(train_set) == 0:
        raise ValueError("training set is empty")
    stats = stats if stats is not None else channel_stats(train_set)
    steps_per_epoch = max(1, sum(1 for _ in range(0, len(train_set), recipe.batch_size)))
    total_steps = recipe.epochs * steps_per_epoch
    optimizer = Optimizer(net.parameters(), recipe)
    strategy_rng = np.random.default_rng([recipe.seed, 1])
    n = net.n_stages
    rows = []
    step = 0
    aborted = None
    for epoch in range(recipe.epochs):
        aug_rng = np.random.default_rng([recipe.seed, 2, epoch])
        t0 = time.perf_counter()
        sums = [0.0, 0.0]
        count = 0
        lr = recipe.lr
        try:
            for images, labels in iterate_batches(train_set, recipe.batch_size, epoch, recipe.seed):
                lr = learning_rate(recipe, step + 1, total_steps, steps_per_epoch)
                batch = augment(images, recipe.crop_pad, recipe.hflip_prob, aug_rng)
                x = normalize(batch, *stats)
                report = train_step(net, x, labels, recipe, optimizer, strategy_rng, lr)
                sums[0] += report.loss_super
                sums[1] += report.loss_base
                count += 1
                step += 1
        except NonFiniteLossError as exc:
            logger.error("aborting at epoch %d step %d: %s", epoch, step, exc)
            aborted = str(exc)
            break
        row = {
            "epoch": epoch + 1,
            "step": step,
            "loss_super": sums[0] / max(count, 1),
            "loss_base": sums[1] / max(count, 1),
            "lr": lr,
            "acc_supernet": evaluate(net, SkipConfig.supernet(n), val_set, stats, eval_batch_size) if val_set else float("nan"),
            "acc_basenet": evaluate(net, SkipConfig.basenet(n), val_set, stats, eval_batch_size) if val_set else float("nan"),
            "wall_ms": (time.perf_counter() - t0) * 1e3,
        }
        rows.append(row)
        logger.info(
            "epoch %d  loss_super %.4f  loss_base %.4f  acc FFFF %.4f  TTTT %.4f",
            row["epoch"], row["loss_super"], row["loss_base"], row["acc_supernet"], row["acc_basenet"],
        )
        if log_path is not None:
            write_log_csv(log_path, rows)
        if checkpoint_path is not None:
            checkpoint.save_model(checkpoint_path, net)
    return TrainResult(rows, step, tuple(np.asarray(s) for s in stats), aborted)


def write_log_csv(path, rows: Iterable[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LOG_COLUMNS)
        for r in rows:
            w.writerow(
                [
                    r["epoch"],
                    r["step"],
                    f"{r['loss_super']:.6f}",
                    f"{r['loss_base']:.6f}",
                    f"{r['lr']:.6g}",
                    f"{r['acc_supernet']:.6f}",
                    f"{r['acc_basenet']:.6f}",
                    f"{r['wall_ms']:.1f}",
                ]
            )
