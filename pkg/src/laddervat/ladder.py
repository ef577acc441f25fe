"""Ladder architecture: shared-weight clean/corrupted encoders, skip-connected
decoder with the vanilla per-unit combinator, and the two training costs."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import numerics as nx
from .numerics import DimensionError, Parameter, RngStream, Tensor

CHECKPOINT_VERSION = 1
RUNNING_MOMENTUM = 0.99
COMBINATOR_JITTER = 0.01

# vanilla combinator, one row per coefficient:
#   mu = a0*sigmoid(a1*u + a2) + a3*u + a4
#   v  = a5*sigmoid(a6*u + a7) + a8*u + a9
COMBINATOR_PASS_THROUGH = np.array([0, 1, 0, 0, 0, 0, 1, 0, 0, 1], dtype=float)


@dataclass
class LadderParams:
    """All learnable arrays plus the running batch statistics.

    Layer ``l`` runs 1..L on the encoder side (``weights[l-1]`` maps width
    ``l-1`` to width ``l``); the decoder owns ``dec_weights[l]`` mapping
    width ``l+1`` down to width ``l`` and one combinator block per layer
    0..L.
    """

    widths: tuple[int, ...]
    weights: list[Parameter]
    beta: list[Parameter]
    gamma: list[Parameter]
    dec_weights: list[Parameter]
    combinators: list[Parameter]
    running_mean: list[np.ndarray] = field(default_factory=list)
    running_var: list[np.ndarray] = field(default_factory=list)

    @property
    def n_layers(self) -> int:
        return len(self.widths) - 1

    @classmethod
    def init(cls, widths: Sequence[int], rng: RngStream, dtype=np.float32) -> "LadderParams":
        widths = tuple(int(w) for w in widths)
        if len(widths) < 2:
            raise ValueError("need at least an input and an output width")
        L = len(widths) - 1
        weights, beta, gamma, dec, comb = [], [], [], [], []
        for l in range(1, L + 1):
            fan_in = widths[l - 1]
            w = rng.child("encoder", l).normal((fan_in, widths[l])) / np.sqrt(fan_in)
            weights.append(Parameter(w.astype(dtype), f"W{l}"))
            beta.append(Parameter(np.zeros((1, widths[l]), dtype), f"beta{l}"))
            gamma.append(Parameter(np.ones((1, widths[l]), dtype), f"gamma{l}"))
        for l in range(L):
            fan_in = widths[l + 1]
            v = rng.child("decoder", l).normal((fan_in, widths[l])) / np.sqrt(fan_in)
            dec.append(Parameter(v.astype(dtype), f"V{l}"))
        for l in range(L + 1):
            jitter = rng.child("combinator", l).normal((10, widths[l])) * COMBINATOR_JITTER
            a = COMBINATOR_PASS_THROUGH[:, None] + jitter
            comb.append(Parameter(a.astype(dtype), f"comb{l}"))
        return cls(
            widths=widths, weights=weights, beta=beta, gamma=gamma,
            dec_weights=dec, combinators=comb,
            running_mean=[np.zeros((1, w), dtype) for w in widths[1:]],
            running_var=[np.ones((1, w), dtype) for w in widths[1:]],
        )

    def parameters(self) -> list[Parameter]:
        return [*self.weights, *self.beta, *self.gamma, *self.dec_weights, *self.combinators]

    def encoder_parameters(self) -> list[Parameter]:
        return [*self.weights, *self.beta, *self.gamma]

    def named_arrays(self) -> dict[str, np.ndarray]:
        out = {p.name: p.data for p in self.parameters()}
        for l, (m, v) in enumerate(zip(self.running_mean, self.running_var), start=1):
            out[f"running_mean{l}"] = m
            out[f"running_var{l}"] = v
        return out

    def astype(self, dtype) -> "LadderParams":
        def conv(ps):
            return [Parameter(p.data.astype(dtype), p.name) for p in ps]

        return LadderParams(
            self.widths, conv(self.weights), conv(self.beta), conv(self.gamma),
            conv(self.dec_weights), conv(self.combinators),
            [m.astype(dtype) for m in self.running_mean],
            [v.astype(dtype) for v in self.running_var],
        )

    def frozen(self, dtype=None) -> "LadderParams":
        """Constant view (plain tensors, optional cast); no tape ever tracks it."""
        def conv(ps):
            return [Tensor(p.data if dtype is None else p.data.astype(dtype)) for p in ps]

        return LadderParams(self.widths, conv(self.weights), conv(self.beta), conv(self.gamma),
                            conv(self.dec_weights), conv(self.combinators),
                            self.running_mean, self.running_var)

    def eval_stats(self, eps: float = nx.BN_EPS) -> list[tuple[np.ndarray, np.ndarray]]:
        return [(m, np.sqrt(v + eps).astype(v.dtype)) for m, v in
                zip(self.running_mean, self.running_var)]

    def update_running_stats(self, trace: "EncoderTrace", momentum: float = RUNNING_MOMENTUM):
        for i, l in enumerate(range(1, self.n_layers + 1)):
            mean = nx._data(trace.mean[l])
            var = nx._data(trace.std[l]) ** 2 - nx.BN_EPS
            self.running_mean[i] = (momentum * self.running_mean[i]
                                    + (1 - momentum) * mean).astype(self.running_mean[i].dtype)
            self.running_var[i] = (momentum * self.running_var[i]
                                   + (1 - momentum) * var).astype(self.running_var[i].dtype)


@dataclass
class EncoderTrace:
    """Per-layer values of one encoder pass; index ``l`` is layer ``l`` (0 = input).

    ``z`` holds the normalized pre-activations before noise, ``z_tilde`` the
    values after noise and injections, ``h`` the post-activations.
    """

    pre: list
    mean: list
    std: list
    z: list
    z_tilde: list
    h: list
    noise: list
    logits: Tensor
    probs: Tensor


@dataclass
class DecoderTrace:
    z_hat: list


def sample_noise(widths: Sequence[int], n: int, sigma: float, rng: RngStream | None,
                 dtype=np.float32) -> list:
    if sigma == 0:
        return [None] * len(widths)
    if rng is None:
        raise ValueError("sigma > 0 needs an rng")
    return [nx.gaussian_noise((n, w), sigma, rng.child("layer", l), dtype)
            for l, w in enumerate(widths)]


def _inject(value, noise, extra):
    if noise is not None:
        value = nx.add(value, noise)
    if extra is not None:
        value = nx.add(value, extra)
    return value


def layer_output(params: LadderParams, l: int, z_tilde):
    """Shift/scale then nonlinearity; returns logits at the top layer."""
    pre = nx.mul(nx.add(z_tilde, params.beta[l - 1]), params.gamma[l - 1])
    return pre if l == params.n_layers else nx.relu(pre)


def _check_extra(params: LadderParams, n: int, extra_noise):
    if extra_noise is None:
        return [None] * (params.n_layers + 1)
    extra = list(extra_noise) + [None] * (params.n_layers + 1 - len(extra_noise))
    if len(extra) != params.n_layers + 1:
        raise DimensionError(f"extra_noise has {len(extra_noise)} slots for "
                             f"{params.n_layers + 1} layers")
    for l, e in enumerate(extra):
        if e is not None and tuple(np.shape(nx._data(e))) != (n, params.widths[l]):
            raise DimensionError(f"extra_noise[{l}] shape {np.shape(nx._data(e))}, "
                                 f"expected {(n, params.widths[l])}")
    return extra


def encode(params: LadderParams, x, sigma: float = 0.0, rng: RngStream | None = None,
           extra_noise=None, noise=None, stats=None) -> EncoderTrace:
    """One encoder pass.

    Each layer: linear map, batch normalization (or the fixed ``stats``
    pairs), additive N(0, sigma^2) noise plus ``extra_noise[l]``, shift and
    scale, nonlinearity. Slot 0 of the noise lists applies to the input.
    A pre-drawn ``noise`` list overrides sampling.
    """
    xd = nx._data(x)
    if xd.ndim != 2 or xd.shape[1] != params.widths[0]:
        raise DimensionError(f"input shape {xd.shape}, expected (*, {params.widths[0]})")
    n = xd.shape[0]
    L = params.n_layers
    extra = _check_extra(params, n, extra_noise)
    if noise is None:
        noise = sample_noise(params.widths, n, sigma, rng, xd.dtype)

    pre, mean, std, z, zt, h = ([None] * (L + 1) for _ in range(6))
    z[0] = x
    zt[0] = _inject(x, noise[0], extra[0])
    h[0] = zt[0]
    for l in range(1, L + 1):
        pre[l] = nx.affine(h[l - 1], params.weights[l - 1])
        if stats is None:
            z[l], mean[l], std[l] = nx.batch_normalize(pre[l])
        else:
            mean[l], std[l] = stats[l - 1]
            z[l] = nx.normalize(pre[l], mean[l], std[l])
        zt[l] = _inject(z[l], noise[l], extra[l])
        h[l] = layer_output(params, l, zt[l])
    logits = h[L]
    probs = nx.softmax(logits)
    h[L] = probs
    return EncoderTrace(pre, mean, std, z, zt, h, list(noise), logits, probs)


def forward_from(params: LadderParams, trace: EncoderTrace, layer: int, value,
                 record: list | None = None):
    """Continue ``trace``'s pass from ``z_tilde[layer] := value``.

    Downstream layers reuse the trace's batch statistics and noise draws, so
    samples are processed independently. Returns logits; when ``record`` is
    given it receives the z_tilde of every layer from ``layer`` upward.
    """
    L = params.n_layers
    if record is not None:
        record[layer] = value
    h = value if layer == 0 else layer_output(params, layer, value)
    for l in range(layer + 1, L + 1):
        z = nx.normalize(nx.affine(h, params.weights[l - 1]), trace.mean[l], trace.std[l])
        zt = _inject(z, trace.noise[l], None)
        if record is not None:
            record[l] = zt
        h = layer_output(params, l, zt)
    return h


def combinator(z_tilde, u, a) -> Tensor:
    """Per-unit denoising function ``(z_tilde - mu(u)) * v(u) + mu(u)``.

    ``a`` is a (10, width) block of coefficients (see
    ``COMBINATOR_PASS_THROUGH`` for the row layout).
    """
    rows = [a[i:i + 1] for i in range(10)] if not isinstance(a, Tensor) else _rows(a)
    mu = nx.add(nx.add(nx.mul(rows[0], nx.sigmoid(nx.add(nx.mul(rows[1], u), rows[2]))),
                       nx.mul(rows[3], u)), rows[4])
    v = nx.add(nx.add(nx.mul(rows[5], nx.sigmoid(nx.add(nx.mul(rows[6], u), rows[7]))),
                      nx.mul(rows[8], u)), rows[9])
    return nx.add(nx.mul(nx.sub(z_tilde, mu), v), mu)


def _rows(a: Tensor) -> list[Tensor]:
    ad = a.data
    out = []
    for i in range(10):
        def backward(g, need, i=i):
            full = np.zeros_like(ad)
            full[i:i + 1] = g
            return (full,)
        out.append(nx._emit(ad[i:i + 1], (a,), backward))
    return out


def decode(params: LadderParams, noisy: EncoderTrace) -> DecoderTrace:
    """Top-down pass seeded by the batch-normalized noisy output probabilities."""
    L = params.n_layers
    z_hat = [None] * (L + 1)
    u, _, _ = nx.batch_normalize(noisy.probs)
    for l in range(L, -1, -1):
        if l < L:
            u, _, _ = nx.batch_normalize(nx.affine(z_hat[l + 1], params.dec_weights[l]))
        z_hat[l] = combinator(noisy.z_tilde[l], u, params.combinators[l])
    return DecoderTrace(z_hat)


def reconstruction_cost(decoder: DecoderTrace, clean: EncoderTrace,
                        lambdas: Sequence[float]) -> Tensor:
    """Sum over layers of ``lambda_l * ||z_hat_l - z_l||^2 / (batch * width_l)``.

    Hidden-layer reconstructions are normalized with the clean pass's batch
    statistics before the comparison; layer 0 is compared raw.
    """
    if len(lambdas) != len(decoder.z_hat):
        raise ValueError(f"{len(lambdas)} lambdas for {len(decoder.z_hat)} layers")
    if any(lam < 0 for lam in lambdas):
        raise ValueError(f"lambdas must be non-negative, got {list(lambdas)}")
    cost = None
    for l, lam in enumerate(lambdas):
        if lam == 0:
            continue
        z_hat = decoder.z_hat[l]
        if l > 0:
            z_hat = nx.normalize(z_hat, clean.mean[l], clean.std[l])
        n, width = nx._data(z_hat).shape
        term = nx.scale(nx.total(nx.square(nx.sub(z_hat, clean.z[l]))), lam / (n * width))
        cost = term if cost is None else nx.add(cost, term)
    if cost is None:
        dtype = nx._data(decoder.z_hat[0]).dtype
        return Tensor(np.zeros((), dtype))
    return cost


def supervised_cost(noisy_logits, labels) -> Tensor:
    return nx.cross_entropy(noisy_logits, labels)


def predict_proba(params: LadderParams, x, batch_size: int = 2000) -> np.ndarray:
    """Clean encoder with running statistics."""
    stats = params.eval_stats()
    out = []
    with nx.no_grad():
        for i in range(0, len(x), batch_size):
            out.append(encode(params, x[i:i + batch_size], stats=stats).probs.data)
    return np.concatenate(out) if out else np.zeros((0, params.widths[-1]))


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, params: LadderParams, metadata: dict | None = None):
    arrays = params.named_arrays()
    header = {
        "format": "laddervat-checkpoint",
        "version": CHECKPOINT_VERSION,
        "widths": list(params.widths),
        "arrays": {k: list(v.shape) for k, v in arrays.items()},
        "metadata": metadata or {},
    }
    path = Path(path)
    with open(path, "wb") as fh:
        np.savez(fh, __header__=np.array(json.dumps(header)), **arrays)
    return path


def load_checkpoint(path) -> tuple[LadderParams, dict]:
    with np.load(path, allow_pickle=False) as npz:
        header = json.loads(str(npz["__header__"]))
        if header.get("format") != "laddervat-checkpoint":
            raise ValueError(f"{path}: not a laddervat checkpoint")
        if header["version"] > CHECKPOINT_VERSION:
            raise ValueError(f"{path}: checkpoint version {header['version']} is newer than "
                             f"supported {CHECKPOINT_VERSION}")
        arrays = {k: npz[k] for k in header["arrays"]}
    widths = tuple(header["widths"])
    L = len(widths) - 1

    def group(prefix, idx):
        return [Parameter(arrays[f"{prefix}{i}"], f"{prefix}{i}") for i in idx]

    params = LadderParams(
        widths=widths,
        weights=group("W", range(1, L + 1)),
        beta=group("beta", range(1, L + 1)),
        gamma=group("gamma", range(1, L + 1)),
        dec_weights=group("V", range(L)),
        combinators=group("comb", range(L + 1)),
        running_mean=[arrays[f"running_mean{l}"] for l in range(1, L + 1)],
        running_var=[arrays[f"running_var{l}"] for l in range(1, L + 1)],
    )
    return params, header["metadata"]
