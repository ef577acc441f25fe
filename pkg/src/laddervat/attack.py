"""White-box evaluation: fast gradient method, error rates, smoothness."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import ladder
from . import numerics as nx
from .numerics import RngStream, Tape, Tensor
from .vat import EncoderPath, VatSettings, vadv_cost

ATTACK_NORMS = ("l1", "l2", "linf")
DEFAULT_ATTACK_EPS = {"linf": 0.1, "l2": 2.0, "l1": 10.0}
SMOOTHNESS_EPS = 5.0
REPORT_COLUMNS = ("variant", "labels", "seed", "norm", "epsilon", "error_rate", "runtime_s")


@dataclass(frozen=True)
class AttackSpec:
    norm: str
    epsilon: float
    clip: bool = True

    def __post_init__(self):
        object.__setattr__(self, "norm", self.norm.lower())
        if self.norm not in ATTACK_NORMS:
            raise ValueError(f"norm must be one of {ATTACK_NORMS}, got {self.norm!r}")
        if self.epsilon < 0:
            raise ValueError("epsilon must be non-negative")


def default_specs(norms: Sequence[str] = ATTACK_NORMS, eps: dict | None = None,
                  clip: bool = True) -> list[AttackSpec]:
    eps = {**DEFAULT_ATTACK_EPS, **(eps or {})}
    return [AttackSpec(n, eps[n.lower()], clip) for n in norms]


def clean_logits_fn(params: ladder.LadderParams) -> Callable:
    """Logits of the clean encoder under running statistics (per-sample function)."""
    stats = params.eval_stats()
    frozen = params.frozen()

    def logits(x):
        return ladder.encode(frozen, x, stats=stats).logits

    return logits


def fgm(logits_fn: Callable[[Tensor], Tensor], x: np.ndarray, labels, spec: AttackSpec,
        return_flags: bool = False):
    """One-step attack along the gradient of the true-label cross-entropy.

    Rows with an all-zero gradient are left unperturbed (reported through
    ``return_flags``).
    """
    x = np.asarray(x)
    zero_rows = np.zeros(len(x), dtype=bool)
    if spec.epsilon == 0:
        out = x.copy()
    else:
        xt = Tensor(x)
        with Tape() as tape:
            tape.watch([xt])
            loss = nx.cross_entropy(logits_fn(xt), labels)
        (g,) = tape.gradient(loss, [xt])
        if spec.norm == "linf":
            r = np.sign(g)
            zero_rows = ~np.any(g != 0, axis=1)
        else:
            ord_ = 1 if spec.norm == "l1" else 2
            norms = np.linalg.norm(g.astype(np.float64), ord=ord_, axis=1, keepdims=True)
            zero_rows = norms[:, 0] == 0
            r = g / np.where(norms > 0, norms, 1.0)
        out = (x + spec.epsilon * r).astype(x.dtype)
        if spec.clip:
            out = np.clip(out, 0.0, 1.0)
    return (out, zero_rows) if return_flags else out


def error_rate(predict_fn: Callable[[np.ndarray], np.ndarray], x, labels) -> float:
    """Percentage of argmax predictions that miss ``labels``."""
    labels = np.asarray(labels)
    if len(labels) == 0:
        raise ValueError("empty dataset")
    pred = np.argmax(predict_fn(x), axis=1)
    return 100.0 * int(np.sum(pred != labels)) / len(labels)


def adversarial_error_matrix(params: ladder.LadderParams, x, labels,
                             specs: Sequence[AttackSpec], batch_size: int = 1000) -> dict:
    """Error rate (%) on FGM-perturbed inputs, one entry per spec's norm."""
    logits_fn = clean_logits_fn(params)
    out = {}
    for spec in specs:
        wrong = 0
        for i in range(0, len(x), batch_size):
            xb, yb = x[i:i + batch_size], labels[i:i + batch_size]
            adv = fgm(logits_fn, xb, yb, spec)
            with nx.no_grad():
                pred = np.argmax(logits_fn(adv).data, axis=1)
            wrong += int(np.sum(pred != yb))
        out[spec.norm] = 100.0 * wrong / len(x)
    return out


def smoothness_metric(params: ladder.LadderParams, x, epsilon: float = SMOOTHNESS_EPS,
                      rng: RngStream | None = None, norm: str = "l2", xi: float = 1e-6,
                      power_iters: int = 1, batch_size: int = 500) -> float:
    """Average virtual adversarial divergence of the clean encoder at radius ``epsilon``.

    Larger means less locally smooth.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    rng = rng or RngStream(0).child("smoothness")
    settings = VatSettings(epsilon=(epsilon,), xi=xi, power_iters=power_iters, norm=norm)
    stats = params.eval_stats()
    frozen = params.frozen()
    total = 0.0
    with nx.no_grad():
        for b, i in enumerate(range(0, len(x), batch_size)):
            xb = x[i:i + batch_size]
            path = EncoderPath(frozen, ladder.encode(frozen, xb, stats=stats))
            total += float(vadv_cost(path, settings, rng.child("batch", b)).data) * len(xb)
    return total / len(x)


def write_table(rows: Sequence[dict], path, columns: Sequence[str] = REPORT_COLUMNS):
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(columns), delimiter="\t", extrasaction="ignore")
        w.writeheader()
        for row in rows:
            w.writerow(row)
    return path


def write_report(rows: Sequence[dict], path, extra: dict | None = None):
    path = Path(path)
    path.write_text(json.dumps({"columns": list(REPORT_COLUMNS), "rows": list(rows),
                                **(extra or {})}, indent=2) + "\n")
    return path
