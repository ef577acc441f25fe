"""Training orchestration: Adam, schedule, epoch loop, evaluation, matrices."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import attack, ladder
from . import numerics as nx
from .data import SemiSupervisedSplit, batch_stream, make_split
from .numerics import Parameter, RngStream, Tape
from .variants import LossBreakdown, VariantConfig, default_config, loss_graph

log = logging.getLogger(__name__)


class NumericalError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 250
    decay_start: int = 200
    base_lr: float = 0.002
    labeled_batch: int = 100
    unlabeled_batch: int = 100
    eval_every: int = 0
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    attack_norms: tuple[str, ...] = ("l1", "l2", "linf")
    attack_eps_l1: float = attack.DEFAULT_ATTACK_EPS["l1"]
    attack_eps_l2: float = attack.DEFAULT_ATTACK_EPS["l2"]
    attack_eps_linf: float = attack.DEFAULT_ATTACK_EPS["linf"]
    smoothness_eps: float = attack.SMOOTHNESS_EPS
    smoothness_samples: int = 1000

    def __post_init__(self):
        if not 0 <= self.decay_start <= self.epochs:
            raise ValueError(f"decay_start={self.decay_start} outside [0, epochs={self.epochs}]")
        if self.labeled_batch < 1 or self.unlabeled_batch < 1:
            raise ValueError("batch sizes must be >= 1")
        object.__setattr__(self, "attack_norms", tuple(self.attack_norms))

    @classmethod
    def full(cls, n_labels: int, **kw) -> "TrainConfig":
        return cls(labeled_batch=50 if n_labels == 50 else 100, **kw)

    @classmethod
    def desk(cls, n_labels: int, **kw) -> "TrainConfig":
        kw = {"epochs": 30, "decay_start": 20, **kw}
        return cls(labeled_batch=50 if n_labels == 50 else 100, **kw)

    def attack_specs(self) -> list[attack.AttackSpec]:
        eps = {"l1": self.attack_eps_l1, "l2": self.attack_eps_l2, "linf": self.attack_eps_linf}
        return [attack.AttackSpec(n, eps[n]) for n in self.attack_norms]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["attack_norms"] = list(self.attack_norms)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class MetricsRecord:
    epoch: int
    clean_aer: float
    adversarial_aer: dict
    smoothness: float
    supervised: float
    reconstruction: float
    vadv: float
    total: float
    wall_seconds: float

    def row(self) -> dict:
        d = asdict(self)
        adv = d.pop("adversarial_aer")
        for k, v in adv.items():
            d[f"aer_{k}"] = v
        return d


@dataclass
class TrainResult:
    params: ladder.LadderParams
    records: list[MetricsRecord] = field(default_factory=list)
    final_loss: LossBreakdown | None = None
    losses: list[float] = field(default_factory=list)


def lr_schedule(config: TrainConfig, epoch: float) -> float:
    """Constant, then linear decay to zero from ``decay_start`` to ``epochs``."""
    if epoch < config.decay_start:
        return config.base_lr
    if config.epochs == config.decay_start:
        return 0.0
    frac = (config.epochs - epoch) / (config.epochs - config.decay_start)
    return config.base_lr * max(0.0, frac)


def adam_step(params: Sequence[Parameter], lr: float, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8):
    """Bias-corrected Adam update in place; clears gradients."""
    for p in params:
        p.step_count += 1
        g = p.grad
        p.m1 *= beta1
        p.m1 += (1 - beta1) * g
        p.m2 *= beta2
        p.m2 += (1 - beta2) * g * g
        m_hat = p.m1 / (1 - beta1 ** p.step_count)
        v_hat = p.m2 / (1 - beta2 ** p.step_count)
        p.data -= (lr * m_hat / (np.sqrt(v_hat) + eps)).astype(p.data.dtype)
        p.zero_grad()


def train_step(variant: VariantConfig, params: ladder.LadderParams, labeled, unlabeled,
               rng: RngStream, lr: float, config: TrainConfig, step_label: str = "") -> LossBreakdown:
    trainable = params.parameters()
    with Tape() as tape:
        tape.watch(trainable)
        graph = loss_graph(variant, params, labeled, unlabeled, rng)
    breakdown = graph.breakdown()
    for name in ("supervised", "reconstruction", "vadv"):
        value = getattr(breakdown, name)
        if not math.isfinite(value):
            raise NumericalError(f"non-finite {name} loss ({value}) at {step_label}")
    grads = tape.gradient(graph.total, trainable)
    for p, g in zip(trainable, grads):
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient for {p.name} at {step_label}")
        p.grad += g
    params.update_running_stats(graph.stats_trace)
    adam_step(trainable, lr, config.beta1, config.beta2, config.adam_eps)
    return breakdown


def evaluate(params: ladder.LadderParams, split: SemiSupervisedSplit, config: TrainConfig,
             epoch: int, losses: LossBreakdown, started: float, seed: int) -> MetricsRecord:
    test = split.test
    clean = attack.error_rate(lambda x: ladder.predict_proba(params, x), test.images, test.labels)
    adv = attack.adversarial_error_matrix(params, test.images, test.labels, config.attack_specs())
    sub = test.images[:config.smoothness_samples]
    smooth = attack.smoothness_metric(params, sub, config.smoothness_eps,
                                      rng=RngStream(seed).child("smoothness", epoch))
    return MetricsRecord(epoch, clean, adv, smooth, losses.supervised, losses.reconstruction,
                         losses.vadv, losses.total, time.perf_counter() - started)


def _mean_breakdown(items: list[LossBreakdown]) -> LossBreakdown:
    if not items:
        return LossBreakdown(float("nan"), float("nan"), float("nan"), float("nan"))
    return LossBreakdown(*(float(np.mean([getattr(b, k) for b in items]))
                           for k in ("supervised", "reconstruction", "vadv", "total")))


def train(variant: VariantConfig, config: TrainConfig, split: SemiSupervisedSplit,
          metrics_path=None, checkpoint_path=None, params: ladder.LadderParams | None = None,
          callback: Callable[[int, TrainResult], None] | None = None,
          metadata: dict | None = None) -> TrainResult:
    """Run the epoch loop; evaluate every ``eval_every`` epochs and at the end."""
    variant.check_fields()
    root = RngStream(config.seed)
    if params is None:
        params = ladder.LadderParams.init(variant.widths, root.child("weights"))
    if split.labeled.images.shape[1] != variant.widths[0]:
        raise ValueError(f"data width {split.labeled.images.shape[1]} != encoder input "
                         f"{variant.widths[0]}")
    result = TrainResult(params)
    started = time.perf_counter()
    writer = None
    fh = None
    if metrics_path is not None:
        fh = open(metrics_path, "w", newline="")
    try:
        for epoch in range(config.epochs):
            lr = lr_schedule(config, epoch)
            epoch_losses = []
            stream = batch_stream(split, config.labeled_batch, config.unlabeled_batch,
                                  root.child("data"), epoch)
            for step, (xl, yl, xu) in enumerate(stream):
                b = train_step(variant, params, (xl, yl), xu, root.child("step", epoch, step),
                               lr, config, step_label=f"epoch {epoch} step {step}")
                epoch_losses.append(b)
                result.losses.append(b.total)
            mean = _mean_breakdown(epoch_losses)
            result.final_loss = mean
            log.info("%s epoch %d lr %.5f loss %.4f (sup %.4f rec %.4f vadv %.4f)",
                     variant.kind, epoch + 1, lr, mean.total, mean.supervised,
                     mean.reconstruction, mean.vadv)
            last = epoch + 1 == config.epochs
            due = config.eval_every and (epoch + 1) % config.eval_every == 0
            if split.test is not None and (last or due):
                rec = evaluate(params, split, config, epoch + 1, mean, started, config.seed)
                result.records.append(rec)
                log.info("%s epoch %d clean AER %.2f%% adv %s smooth %.4f", variant.kind,
                         epoch + 1, rec.clean_aer, rec.adversarial_aer, rec.smoothness)
                if fh is not None:
                    row = rec.row()
                    if writer is None:
                        writer = csv.DictWriter(fh, fieldnames=list(row), delimiter="\t")
                        writer.writeheader()
                    writer.writerow(row)
                    fh.flush()
            if callback is not None:
                callback(epoch + 1, result)
    finally:
        if fh is not None:
            fh.close()
    if checkpoint_path is not None:
        ladder.save_checkpoint(checkpoint_path, params, {"variant": variant.to_dict(),
                                                         "train": config.to_dict(),
                                                         **(metadata or {})})
    return result


@dataclass
class MatrixCell:
    kind: str
    labels: int
    seed: int
    record: MetricsRecord | None
    error: str | None = None


def standard_error(values: Sequence[float]) -> float:
    values = np.asarray(values, dtype=float)
    if len(values) < 2:
        return 0.0
    return float(values.std(ddof=1) / np.sqrt(len(values)))


def run_matrix(kinds: Sequence[str], label_counts: Sequence[int], seeds: Sequence[int],
               train_config: TrainConfig | Callable[[int, int], TrainConfig], train_set, test_set,
               variant_factory: Callable[[str, int], VariantConfig] = default_config,
               trainer: Callable = train) -> tuple[list[MatrixCell], list[dict]]:
    """Train every (kind, labels, seed) cell and aggregate mean +- standard error.

    ``train_config`` is either one config (its seed replaced per cell and its
    labeled batch set from the label count) or ``f(labels, seed)``. The
    labeled split for a seed is shared by all kinds. A failed cell is
    recorded and left out of the aggregates.
    """
    if not kinds or not label_counts or not seeds:
        raise ValueError("kinds, label counts and seeds must be nonempty")
    if isinstance(train_config, TrainConfig):
        base = train_config

        def train_config(labels, seed):
            return replace(base, seed=seed, labeled_batch=50 if labels == 50 else 100)

    cells: list[MatrixCell] = []
    for labels in label_counts:
        for seed in seeds:
            split = make_split(train_set, test_set, labels, RngStream(seed).child("split"))
            for kind in kinds:
                try:
                    variant = variant_factory(kind, labels)
                    res = trainer(variant, train_config(labels, seed), split)
                    cells.append(MatrixCell(variant.kind, labels, seed, res.records[-1]))
                except Exception as exc:  # recorded; aggregation continues
                    log.exception("cell %s/%s/%s failed", kind, labels, seed)
                    cells.append(MatrixCell(kind, labels, seed, None, repr(exc)))
    return cells, aggregate(cells)


def aggregate(cells: Sequence[MatrixCell]) -> list[dict]:
    groups: dict[tuple, list[MetricsRecord]] = {}
    for c in cells:
        if c.record is not None:
            groups.setdefault((c.kind, c.labels), []).append(c.record)
    rows = []
    for (kind, labels), recs in groups.items():
        row = {"kind": kind, "labels": labels, "runs": len(recs)}
        metrics = {"clean_aer": [r.clean_aer for r in recs],
                   "smoothness": [r.smoothness for r in recs]}
        for norm in recs[0].adversarial_aer:
            metrics[f"aer_{norm}"] = [r.adversarial_aer[norm] for r in recs]
        for name, vals in metrics.items():
            row[f"{name}_mean"] = float(np.mean(vals))
            row[f"{name}_se"] = standard_error(vals)
        rows.append(row)
    return rows


def cell_rows(cells: Sequence[MatrixCell]) -> list[dict]:
    rows = []
    for c in cells:
        row = {"kind": c.kind, "labels": c.labels, "seed": c.seed, "error": c.error or ""}
        if c.record is not None:
            row.update(c.record.row())
        rows.append(row)
    return rows


def write_rows(rows: Sequence[dict], path):
    cols: list[str] = []
    for r in rows:
        cols += [k for k in r if k not in cols]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols, delimiter="\t")
        w.writeheader()
        for r in rows:
            w.writerow(r)
    return Path(path)


def with_overrides(config: TrainConfig, **kw) -> TrainConfig:
    return replace(config, **kw)
