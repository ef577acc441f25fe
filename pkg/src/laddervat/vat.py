"""Virtual adversarial perturbations and consistency costs.

A perturbation at layer ``l`` is added to ``z_tilde[l]`` of an encoder pass
whose noise draw and batch statistics are frozen (see :class:`EncoderPath`),
so the divergence responds to the perturbation alone and each sample is
handled independently. Direction finding runs on a float64 constant replica
of the pass: with ``xi = 1e-6`` the probe would vanish below float32
resolution.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import numerics as nx
from .ladder import EncoderTrace, LadderParams, forward_from
from .numerics import RngStream, Tape, Tensor

NORMS = ("l2", "linf")


@dataclass(frozen=True)
class VatSettings:
    epsilon: tuple[float, ...]
    alpha: tuple[float, ...] | None = None
    xi: float = 1e-6
    power_iters: int = 1
    norm: str = "linf"

    def __post_init__(self):
        if any(e < 0 for e in self.epsilon):
            raise ValueError(f"epsilon must be non-negative, got {self.epsilon}")
        if self.xi <= 0:
            raise ValueError("xi must be positive")
        if self.power_iters < 1:
            raise ValueError("power_iters must be >= 1")
        if self.norm not in NORMS:
            raise ValueError(f"norm must be one of {NORMS}, got {self.norm!r}")

    def eps(self, layer: int) -> float:
        return self.epsilon[layer] if layer < len(self.epsilon) else 0.0

    def weight(self, layer: int) -> float:
        if self.alpha is None:
            return 1.0
        return self.alpha[layer] if layer < len(self.alpha) else 1.0


@dataclass
class PerturbationResult:
    direction: np.ndarray
    r_vadv: np.ndarray
    divergence_value: float
    degenerate: np.ndarray


def _unit_rows(d: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(d, axis=1, keepdims=True)
    return d / np.where(norms > 0, norms, 1.0)


def power_iteration(div_at: Callable[[Tensor], Tensor], shape, rng: RngStream,
                    xi: float = 1e-6, iters: int = 1, dtype=np.float64):
    """Finite-difference power method for the dominant Hessian direction.

    ``div_at(r)`` must vanish with zero gradient at ``r = 0``; the gradient at
    ``r = xi * d`` is then proportional to ``H d``. Returns the per-row unit
    direction and a mask of rows whose probe gradient was exactly zero (those
    keep their previous direction).
    """
    d = _unit_rows(rng.normal(shape).astype(dtype))
    degenerate = np.zeros(shape[0], dtype=bool)
    for _ in range(iters):
        r = Tensor((xi * d).astype(dtype))
        with Tape() as tape:
            tape.watch([r])
            value = div_at(r)
        (g,) = tape.gradient(value, [r])
        norms = np.linalg.norm(g, axis=1, keepdims=True)
        zero = norms[:, 0] == 0
        degenerate |= zero
        d = np.where(zero[:, None], d, g / np.where(norms > 0, norms, 1.0))
    return d, degenerate


def scale_direction(d: np.ndarray, eps: float, norm: str) -> np.ndarray:
    if norm == "l2":
        return eps * d
    if norm == "linf":
        # zero components are sent to +eps so every entry has magnitude eps
        return eps * np.where(d >= 0, 1.0, -1.0).astype(d.dtype)
    raise ValueError(f"unknown norm {norm!r}")


class EncoderPath:
    """An encoder pass viewed as a function of a perturbation at any layer."""

    def __init__(self, params: LadderParams, trace: EncoderTrace):
        self.params = params
        self.trace = trace
        self._probes: dict = {}

    @property
    def n_layers(self) -> int:
        return self.params.n_layers

    def attach(self, layer: int):
        return self.trace.z_tilde[layer]

    def logits_at(self, layer: int, r) -> Tensor:
        return forward_from(self.params, self.trace, layer, nx.add(self.attach(layer), r))

    def probs_at(self, layer: int, r) -> Tensor:
        return nx.softmax(self.logits_at(layer, r))

    def reference_probs(self) -> np.ndarray:
        return self.trace.probs.data

    def probe(self, dtype=np.float64) -> "EncoderPath":
        """Constant replica in ``dtype``, replayed from the input so that every
        layer's unperturbed value is consistent with the replica's output."""
        key = np.dtype(dtype).str
        if key not in self._probes:
            self._probes[key] = self._replay(dtype)
        return self._probes[key]

    def _replay(self, dtype) -> "EncoderPath":
        t = self.trace

        def cast(v):
            return None if v is None else np.asarray(nx._data(v), dtype=dtype)

        frozen = EncoderTrace(
            pre=[None] * len(t.pre), mean=[cast(m) for m in t.mean], std=[cast(s) for s in t.std],
            z=[None] * len(t.z), z_tilde=[None] * len(t.z_tilde), h=[None] * len(t.h),
            noise=[cast(e) for e in t.noise], logits=None, probs=None,
        )
        params = self.params.frozen(dtype)
        record = [None] * (self.n_layers + 1)
        with nx.no_grad():
            logits = forward_from(params, frozen, 0, Tensor(cast(t.z_tilde[0])), record)
            frozen.z_tilde = record
            frozen.logits = logits
            frozen.probs = nx.softmax(logits)
        return EncoderPath(params, frozen)


def vadv_perturbation(path: EncoderPath, layer: int, settings: VatSettings,
                      rng: RngStream) -> PerturbationResult:
    """Virtual adversarial perturbation of ``path`` at ``layer``."""
    eps = settings.eps(layer)
    shape = tuple(np.shape(nx._data(path.attach(layer))))
    dtype = nx._data(path.attach(layer)).dtype
    if eps == 0:
        zeros = np.zeros(shape, dtype)
        return PerturbationResult(zeros, zeros.copy(), 0.0, np.zeros(shape[0], bool))
    probe = path.probe()
    p_ref = probe.reference_probs()

    def div_at(r):
        return nx.kl_divergence(p_ref, probe.probs_at(layer, r))

    d, degenerate = power_iteration(div_at, shape, rng, settings.xi, settings.power_iters)
    r = scale_direction(d, eps, settings.norm)
    with nx.no_grad():
        value = float(div_at(Tensor(r)).data)
    return PerturbationResult(d.astype(dtype), r.astype(dtype), value, degenerate)


def layerwise_vadv_cost(path: EncoderPath, settings: VatSettings, rng: RngStream,
                        layers: Sequence[int] | None = None, cache: dict | None = None) -> Tensor:
    """Sum over layers of ``alpha_l * KL[p(path) || p(path with r_l at layer l)]``.

    Perturbations are generated independently per layer and enter the cost as
    constants, as does the reference distribution. ``cache`` (keyed by layer)
    pins both across calls, e.g. for finite-difference checks.
    """
    if layers is None:
        layers = range(path.n_layers + 1)
    total = None
    dtype = path.reference_probs().dtype
    for layer in layers:
        alpha = settings.weight(layer)
        if alpha == 0 or settings.eps(layer) == 0:
            continue
        if cache is not None and layer in cache:
            r, p_ref = cache[layer]
        else:
            r = vadv_perturbation(path, layer, settings, rng.child("layer", layer)).r_vadv
            p_ref = path.reference_probs().copy()
            if cache is not None:
                cache[layer] = (r, p_ref)
        term = nx.kl_divergence(p_ref, path.probs_at(layer, r))
        if alpha != 1:
            term = nx.scale(term, alpha)
        total = term if total is None else nx.add(total, term)
    return total if total is not None else Tensor(np.zeros((), dtype))


def vadv_cost(path: EncoderPath, settings: VatSettings, rng: RngStream,
              cache: dict | None = None) -> Tensor:
    """Batch-averaged KL between the output and its value at the input VAP."""
    return layerwise_vadv_cost(path, settings, rng, layers=(0,), cache=cache)


def injection_noise(path: EncoderPath, settings: VatSettings, rng: RngStream,
                    layers: Sequence[int]) -> list:
    """Per-layer perturbations to inject into a corrupted pass (None where inactive)."""
    out = [None] * (path.n_layers + 1)
    for layer in layers:
        if settings.eps(layer) > 0:
            out[layer] = vadv_perturbation(path, layer, settings, rng.child("layer", layer)).r_vadv
    return out
