"""Sub-network evaluation, residual-magnitude profiles and Pareto reports."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import numpy as np

from .data import LabeledImageSet, normalize
from .network import AdaptiveDepthNetwork, enumerate_subnets, flops, param_count
from .tensor import no_grad


@dataclass
class SubnetRecord:
    skip: str
    flops: int
    params: int
    top1: float
    pareto: Optional[bool] = None


@dataclass
class BlockRatio:
    stage: int
    block: int
    skippable: bool
    ratio: float
    samples: int = 0
    skipped_samples: int = 0


def _batches(ds: LabeledImageSet, stats, batch_size: int, limit: Optional[int] = None):
    mean, std = stats
    n = len(ds)
    for b, start in enumerate(range(0, n, batch_size)):
        if limit is not None and b >= limit:
            break
        sl = slice(start, start + batch_size)
        yield normalize(ds.images[sl], mean, std), ds.labels[sl]


def predict(net: AdaptiveDepthNetwork, skip, ds: LabeledImageSet, stats, batch_size: int = 256) -> np.ndarray:
    preds = []
    with no_grad():
        for x, _ in _batches(ds, stats, batch_size):
            logits, _ = net.forward(x, skip, training=False)
            # argmax returns the lowest index on ties
            preds.append(np.argmax(logits.data, axis=1))
    return np.concatenate(preds)


def evaluate(net: AdaptiveDepthNetwork, skip, ds: LabeledImageSet, stats, batch_size: int = 256) -> float:
    """Top-1 accuracy of one sub-network using running statistics (no updates)."""
    if len(ds) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    return float(np.mean(predict(net, skip, ds, stats, batch_size) == ds.labels))


def evaluate_all(net: AdaptiveDepthNetwork, ds: LabeledImageSet, stats, batch_size: int = 256) -> list[SubnetRecord]:
    records = []
    for cfg in enumerate_subnets(net.n_stages):
        records.append(
            SubnetRecord(str(cfg), flops(net, cfg), param_count(net, cfg), evaluate(net, cfg, ds, stats, batch_size))
        )
    return records


def pareto_report(records: Sequence[SubnetRecord]) -> list[SubnetRecord]:
    """Mark non-dominated records in the (flops lower, top1 higher) plane; sort by flops."""
    if not records:
        raise ValueError("pareto_report needs at least one record")
    ordered = sorted(records, key=lambda r: (r.flops, -r.top1, r.skip))
    out = []
    best = -np.inf
    i = 0
    # sweep groups of equal flops; a record is optimal iff it beats every cheaper one
    while i < len(ordered):
        j = i
        while j < len(ordered) and ordered[j].flops == ordered[i].flops:
            j += 1
        group_best = ordered[i].top1
        for r in ordered[i:j]:
            optimal = r.top1 == group_best and r.top1 > best
            out.append(SubnetRecord(r.skip, r.flops, r.params, r.top1, optimal))
        best = max(best, group_best)
        i = j
    return out


def residual_profile(
    net: AdaptiveDepthNetwork,
    ds: LabeledImageSet,
    stats,
    skip=None,
    max_batches: Optional[int] = None,
    batch_size: int = 256,
) -> list[BlockRatio]:
    """Mean per-sample ||F(h)||_2 / ||h||_2 for every executed residual block."""
    skip = net.coerce_skip(skip)
    sums: dict = {}

    def probe(stage, block, skippable, h, fh):
        hn = np.sqrt(np.square(h.data.reshape(len(h.data), -1), dtype=np.float64).sum(axis=1))
        fn = np.sqrt(np.square(fh.data.reshape(len(fh.data), -1), dtype=np.float64).sum(axis=1))
        ok = hn >= 1e-12
        entry = sums.setdefault((stage, block, skippable), [0.0, 0, 0])
        entry[0] += float((fn[ok] / hn[ok]).sum())
        entry[1] += int(ok.sum())
        entry[2] += int((~ok).sum())

    with no_grad():
        for x, _ in _batches(ds, stats, batch_size, max_batches):
            net.forward(x, skip, training=False, probe=probe)
    return [
        BlockRatio(s, b, sk, total / count if count else float("nan"), count, skipped)
        for (s, b, sk), (total, count, skipped) in sorted(sums.items())
    ]


def profile_summary(profile: Sequence[BlockRatio]) -> dict:
    mand = [p.ratio for p in profile if not p.skippable]
    skip = [p.ratio for p in profile if p.skippable]
    m = float(np.mean(mand)) if mand else float("nan")
    s = float(np.mean(skip)) if skip else float("nan")
    return {"mandatory_mean": m, "skippable_mean": s, "ratio": s / m if m else float("nan")}


# -- CSV --------------------------------------------------------------------
def write_subnets_csv(path, records: Iterable[SubnetRecord]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["skip", "flops", "params", "top1", "pareto"])
        for r in records:
            pareto = "" if r.pareto is None else int(r.pareto)
            w.writerow([r.skip, r.flops, r.params, f"{r.top1:.6f}", pareto])


def write_profile_csv(path, profile: Iterable[BlockRatio]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["stage", "block", "skippable", "ratio"])
        for p in profile:
            w.writerow([p.stage, p.block, int(p.skippable), f"{p.ratio:.6f}"])
