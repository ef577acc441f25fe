"""The seven trainable configurations behind one loss contract."""

from __future__ import annotations

import json
import warnings
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import ladder
from . import numerics as nx
from .numerics import RngStream, Tensor
from .vat import EncoderPath, VatSettings, injection_noise, layerwise_vadv_cost

KINDS = ("supervised", "ladder", "vat", "lvac", "lvac-lw", "lvan", "lvan-lw")
LADDER_KINDS = ("ladder", "lvac", "lvac-lw", "lvan", "lvan-lw")
VAT_KINDS = ("vat", "lvac", "lvac-lw", "lvan", "lvan-lw")
LAYERWISE_KINDS = ("lvac-lw", "lvan-lw")
COLLAPSES_TO = {"lvac": "ladder", "lvac-lw": "ladder", "lvan": "ladder", "lvan-lw": "ladder",
                "vat": "supervised"}

FULL_WIDTHS = (784, 1000, 500, 250, 250, 250, 10)
DESK_WIDTHS = (784, 256, 128, 10)
LADDER_SIGMA = 0.3

# (kind, labels) -> (lambda0, lambda1, lambda>=2), (eps0, eps1, eps>=2); None = column blank
PRESET_TABLE = {
    ("lvac", 50): ((1504, 16.15, 0.0381), (0.0733, None, None)),
    ("lvac", 100): ((1966, 14.20, 0.1563), (0.0731, None, None)),
    ("lvac", 1000): ((3883, 12.35, 0.0539), (2.5206, None, None)),
    ("lvac-lw", 50): ((1000, 10.00, 0.1000), (1.0000, 0.1000, 1.00e-3)),
    ("lvac-lw", 100): ((1966, 14.20, 0.1563), (0.0731, 0.4822, 1.402e-3)),
    ("lvac-lw", 1000): ((3883, 12.35, 0.0539), (2.5206, 0.0143, 6.002e-4)),
    ("lvan", 50): ((1504, 16.15, 0.0381), (0.0733, None, None)),
    ("lvan", 100): ((1966, 14.20, 0.1563), (0.0731, None, None)),
    ("lvan", 1000): ((3883, 12.35, 0.0539), (2.5206, None, None)),
    ("lvan-lw", 50): ((1504, 16.15, 0.0381), (0.0733, 0.3897, 8.372e-2)),
    ("lvan-lw", 100): ((1966, 14.20, 0.1563), (0.0731, 0.4822, 1.402e-3)),
    ("lvan-lw", 1000): ((3883, 12.35, 0.0539), (2.5206, 0.0143, 6.002e-4)),
    ("ladder", 50): ((1504, 16.15, 0.0381), (None, None, None)),
    ("ladder", 100): ((1966, 14.20, 0.1563), (None, None, None)),
    ("ladder", 1000): ((3883, 12.35, 0.0539), (None, None, None)),
    ("vat", 50): ((None, None, None), (5.0, None, None)),
    ("vat", 100): ((None, None, None), (5.0, None, None)),
    ("vat", 1000): ((None, None, None), (2.5, None, None)),
}


class ConfigError(ValueError):
    pass


def canonical_kind(kind: str) -> str:
    k = kind.strip().lower().replace("_", "-")
    if k not in KINDS:
        raise ConfigError(f"unknown variant {kind!r}; expected one of {', '.join(KINDS)}")
    return k


def expand(values, n_layers: int) -> list[float]:
    """Three-value scheme -> per-layer list: [v0, v1, v2, v2, ...] of length L + 1."""
    v0, v1, v2 = values
    return [v0] + [v1] * min(1, n_layers) + [v2] * max(0, n_layers - 1)


@dataclass(frozen=True)
class VariantConfig:
    kind: str
    widths: tuple[int, ...] = FULL_WIDTHS
    sigma: float = LADDER_SIGMA
    lambdas: tuple[float, float, float] = (0.0, 0.0, 0.0)
    epsilons: tuple[float, float, float] = (0.0, 0.0, 0.0)
    alphas: tuple[float, float, float] = (1.0, 1.0, 1.0)
    xi: float = 1e-6
    power_iters: int = 1
    vat_norm: str = "linf"

    def __post_init__(self):
        object.__setattr__(self, "kind", canonical_kind(self.kind))
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        for name in ("lambdas", "epsilons", "alphas"):
            value = tuple(float(v) for v in getattr(self, name))
            if len(value) != 3:
                raise ConfigError(f"{name} needs three values (layer 0, layer 1, layers >= 2)")
            object.__setattr__(self, name, value)
        if self.sigma < 0:
            raise ConfigError("sigma must be non-negative")
        if any(v < 0 for v in self.lambdas + self.epsilons):
            raise ConfigError("lambdas and epsilons must be non-negative")

    @property
    def n_layers(self) -> int:
        return len(self.widths) - 1

    def layer_lambdas(self) -> list[float]:
        return expand(self.lambdas, self.n_layers)

    def layer_epsilons(self) -> list[float]:
        if self.kind in LAYERWISE_KINDS:
            return expand(self.epsilons, self.n_layers)
        return [self.epsilons[0]] + [0.0] * self.n_layers

    def vat_settings(self) -> VatSettings:
        return VatSettings(
            epsilon=tuple(self.layer_epsilons()),
            alpha=tuple(expand(self.alphas, self.n_layers)),
            xi=self.xi, power_iters=self.power_iters, norm=self.vat_norm,
        )

    def check_fields(self):
        """Warn about fields the kind ignores."""
        if self.kind not in LADDER_KINDS and any(self.lambdas):
            warnings.warn(f"{self.kind}: lambdas are ignored", stacklevel=2)
        if self.kind not in VAT_KINDS and any(self.epsilons):
            warnings.warn(f"{self.kind}: epsilons are ignored", stacklevel=2)
        if self.kind in VAT_KINDS and self.kind not in LAYERWISE_KINDS and any(self.epsilons[1:]):
            warnings.warn(f"{self.kind}: only epsilon0 is used", stacklevel=2)

    def to_dict(self) -> dict:
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "VariantConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path) -> "VariantConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


def default_config(kind: str, n_labels: int, widths=FULL_WIDTHS) -> VariantConfig:
    """Preset row for ``(kind, n_labels)``; supervised has no tunables."""
    kind = canonical_kind(kind)
    if n_labels not in (50, 100, 1000):
        raise ConfigError(f"no preset for {n_labels} labels (have 50, 100, 1000)")
    if kind == "supervised":
        return VariantConfig(kind, widths=widths, sigma=0.0)
    lams, epss = PRESET_TABLE[(kind, n_labels)]
    return VariantConfig(
        kind,
        widths=widths,
        sigma=0.0 if kind == "vat" else LADDER_SIGMA,
        lambdas=tuple(0.0 if v is None else v for v in lams),
        epsilons=tuple(0.0 if v is None else v for v in epss),
    )


def presets() -> list[dict]:
    """Every preset row, verbatim (blank columns as None)."""
    rows = []
    for (kind, labels), (lams, epss) in PRESET_TABLE.items():
        rows.append({"kind": kind, "labels": labels,
                     "lambda0": lams[0], "lambda1": lams[1], "lambda2+": lams[2],
                     "epsilon0": epss[0], "epsilon1": epss[1], "epsilon2+": epss[2]})
    return rows


@dataclass
class LossBreakdown:
    supervised: float
    reconstruction: float
    vadv: float
    total: float


@dataclass
class LossGraph:
    """Tensors of one training-loss evaluation (on the active tape, if any)."""

    supervised: Tensor
    reconstruction: Tensor
    vadv: Tensor
    total: Tensor
    stats_trace: ladder.EncoderTrace
    cache: dict = field(default_factory=dict)

    def breakdown(self) -> LossBreakdown:
        return LossBreakdown(float(self.supervised.data), float(self.reconstruction.data),
                             float(self.vadv.data), float(self.total.data))


def _zero(dtype) -> Tensor:
    return Tensor(np.zeros((), dtype))


def loss_graph(config: VariantConfig, params: ladder.LadderParams, labeled, unlabeled,
               rng: RngStream, cache: dict | None = None) -> LossGraph:
    """Build the training objective for one step.

    ``labeled`` is ``(x, y)``; ``unlabeled`` is an image matrix. ``cache``
    pins every virtual adversarial perturbation (and reference distribution)
    by ``(batch, role, layer)`` so repeated evaluations differentiate a fixed
    objective.
    """
    kind = config.kind
    settings = config.vat_settings()
    x_l, y_l = labeled
    x_u = unlabeled
    dtype = np.asarray(x_l).dtype
    cache = {} if cache is None else cache
    noise_rng, vat_rng = rng.child("noise"), rng.child("vat")
    uses_unlabeled = kind != "supervised"
    batches = {"labeled": x_l}
    if uses_unlabeled:
        batches["unlabeled"] = x_u

    noisy = {}
    for name, x in batches.items():
        noise = ladder.sample_noise(params.widths, len(x), config.sigma,
                                    noise_rng.child(name), dtype)
        extra = None
        if kind in ("lvan", "lvan-lw"):
            layers = [0] if kind == "lvan" else range(config.n_layers + 1)
            key = (name, "inject")
            if key not in cache:
                with nx.no_grad():
                    ref = ladder.encode(params, x, noise=noise)
                cache[key] = injection_noise(EncoderPath(params, ref), settings,
                                             vat_rng.child(name, "inject"), layers)
            extra = cache[key]
            if all(e is None for e in extra):
                extra = None
        noisy[name] = ladder.encode(params, x, noise=noise, extra_noise=extra)

    sup = ladder.supervised_cost(noisy["labeled"].logits, y_l)
    recon = _zero(dtype)
    stats_trace = noisy.get("unlabeled", noisy["labeled"])
    if kind in LADDER_KINDS:
        clean = ladder.encode(params, x_u)
        dec = ladder.decode(params, noisy["unlabeled"])
        recon = ladder.reconstruction_cost(dec, clean, config.layer_lambdas())
        stats_trace = clean

    vadv = _zero(dtype)
    if kind in ("vat", "lvac", "lvac-lw"):
        layers = range(config.n_layers + 1) if kind == "lvac-lw" else (0,)
        n_total = sum(len(x) for x in batches.values())
        for name, x in batches.items():
            sub = cache.setdefault((name, "cost"), {})
            term = layerwise_vadv_cost(EncoderPath(params, noisy[name]), settings,
                                       vat_rng.child(name, "cost"), layers=layers, cache=sub)
            vadv = nx.add(vadv, nx.scale(term, len(x) / n_total))

    total = nx.add(nx.add(sup, recon), vadv)
    return LossGraph(sup, recon, vadv, total, stats_trace, cache)


def training_loss(config: VariantConfig, params: ladder.LadderParams, labeled, unlabeled,
                  rng: RngStream, cache: dict | None = None) -> LossBreakdown:
    with nx.no_grad():
        return loss_graph(config, params, labeled, unlabeled, rng, cache).breakdown()


def predict(config: VariantConfig, params: ladder.LadderParams, x) -> np.ndarray:
    """Clean-encoder class probabilities (running statistics, no noise)."""
    return ladder.predict_proba(params, x)


def with_overrides(config: VariantConfig, **kw) -> VariantConfig:
    return replace(config, **kw)
