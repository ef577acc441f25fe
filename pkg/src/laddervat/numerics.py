"""Dense differentiable kernel.

Arrays are plain numpy; a :class:`Tensor` wraps one and, while a
:class:`Tape` is active, every op records a backward closure on it.
Recording is per tape: an op is recorded only when one of its inputs is
tracked by the innermost active tape, so a nested tape (e.g. the probe
passes of the power method) never touches the gradients of the outer one.
"""

from __future__ import annotations

import hashlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

PROB_FLOOR = 1e-12
BN_EPS = 1e-8


class DimensionError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "__weakref__")

    def __init__(self, data):
        self.data = np.asarray(data)

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)


class Parameter(Tensor):
    """Learnable array with its gradient accumulator and Adam moments."""

    __slots__ = ("name", "grad", "m1", "m2", "step_count")

    def __init__(self, data, name: str = ""):
        super().__init__(np.array(data))
        self.name = name
        self.grad = np.zeros_like(self.data)
        self.m1 = np.zeros_like(self.data)
        self.m2 = np.zeros_like(self.data)
        self.step_count = 0

    def zero_grad(self):
        self.grad[...] = 0

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape}, dtype={self.dtype})"


def _data(x):
    return x.data if isinstance(x, Tensor) else x


# ---------------------------------------------------------------------------
# tape


_state = threading.local()


def _stack() -> list:
    if not hasattr(_state, "stack"):
        _state.stack = []
    return _state.stack


def current_tape() -> "Tape | None":
    stack = _stack()
    return stack[-1] if stack else None


class Tape:
    """Records backward closures for one forward pass.

    Usage::

        with Tape() as tape:
            tape.watch(params)
            loss = f(params)
        grads = tape.gradient(loss, params)
    """

    def __init__(self):
        self._nodes: list = []
        self._tracked: set[int] = set()
        self._keep: list = []
        self._used = False

    def __enter__(self):
        _stack().append(self)
        return self

    def __exit__(self, *exc):
        _stack().pop()
        return False

    def watch(self, tensors: Iterable[Tensor]):
        for t in tensors:
            self._tracked.add(id(t))
            self._keep.append(t)

    def is_tracked(self, x) -> bool:
        return isinstance(x, Tensor) and id(x) in self._tracked

    def record(self, out: Tensor, inputs: tuple, backward: Callable):
        mask = tuple(self.is_tracked(a) for a in inputs)
        if any(mask):
            self._tracked.add(id(out))
            self._nodes.append((out, inputs, mask, backward))

    def gradient(self, target: Tensor, sources: Sequence[Tensor]) -> list[np.ndarray]:
        if self._used:
            raise RuntimeError("tape already consumed; record a new pass")
        self._used = True
        source_ids = {id(s) for s in sources}
        grads = {id(target): np.ones_like(target.data)}
        for out, inputs, mask, backward in reversed(self._nodes):
            key = id(out)
            g = grads.get(key) if key in source_ids else grads.pop(key, None)
            if g is None:
                continue
            for a, need, ga in zip(inputs, mask, backward(g, mask)):
                if need and ga is not None:
                    k = id(a)
                    if k in grads:
                        grads[k] = grads[k] + ga
                    else:
                        grads[k] = ga
        self._nodes.clear()
        return [grads.get(id(s), np.zeros_like(s.data)) for s in sources]


class no_grad:
    """Suspend recording on every enclosing tape."""

    def __enter__(self):
        _stack().append(None)

    def __exit__(self, *exc):
        _stack().pop()
        return False


def _emit(data, inputs: tuple, backward: Callable) -> Tensor:
    out = Tensor(data)
    tape = current_tape()
    if tape is not None:
        tape.record(out, inputs, backward)
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == tuple(shape):
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# ops


def affine(x, w, b=None) -> Tensor:
    """``x @ w + b`` with ``b`` broadcast over rows."""
    xd, wd = _data(x), _data(w)
    if xd.ndim != 2 or wd.ndim != 2 or xd.shape[1] != wd.shape[0]:
        raise DimensionError(f"affine: input {xd.shape} incompatible with weights {wd.shape}")
    out = xd @ wd
    if b is not None:
        bd = _data(b)
        if bd.shape[-1] != wd.shape[1]:
            raise DimensionError(f"affine: bias {bd.shape} incompatible with weights {wd.shape}")
        out = out + bd

    def backward(g, need):
        gx = g @ wd.T if need[0] else None
        gw = xd.T @ g if need[1] else None
        gb = None
        if b is not None and need[2]:
            gb = _unbroadcast(g, _data(b).shape)
        return gx, gw, gb

    return _emit(out, (x, w, b), backward)


def add(a, b) -> Tensor:
    ad, bd = _data(a), _data(b)

    def backward(g, need):
        return (_unbroadcast(g, np.shape(ad)) if need[0] else None,
                _unbroadcast(g, np.shape(bd)) if need[1] else None)

    return _emit(ad + bd, (a, b), backward)


def sub(a, b) -> Tensor:
    ad, bd = _data(a), _data(b)

    def backward(g, need):
        return (_unbroadcast(g, np.shape(ad)) if need[0] else None,
                _unbroadcast(-g, np.shape(bd)) if need[1] else None)

    return _emit(ad - bd, (a, b), backward)


def mul(a, b) -> Tensor:
    ad, bd = _data(a), _data(b)

    def backward(g, need):
        return (_unbroadcast(g * bd, np.shape(ad)) if need[0] else None,
                _unbroadcast(g * ad, np.shape(bd)) if need[1] else None)

    return _emit(ad * bd, (a, b), backward)


def div(a, b) -> Tensor:
    ad, bd = _data(a), _data(b)
    out = ad / bd

    def backward(g, need):
        return (_unbroadcast(g / bd, np.shape(ad)) if need[0] else None,
                _unbroadcast(-g * out / bd, np.shape(bd)) if need[1] else None)

    return _emit(out, (a, b), backward)


def square(x) -> Tensor:
    xd = _data(x)
    return _emit(xd * xd, (x,), lambda g, need: (2.0 * g * xd,))


def sqrt(x) -> Tensor:
    out = np.sqrt(_data(x))
    return _emit(out, (x,), lambda g, need: (0.5 * g / out,))


def relu(x) -> Tensor:
    xd = _data(x)
    mask = xd > 0
    return _emit(np.maximum(xd, 0), (x,), lambda g, need: (g * mask,))


def sigmoid(x) -> Tensor:
    xd = _data(x)
    half = xd.dtype.type(0.5)
    out = half * (1 + np.tanh(half * xd))
    return _emit(out, (x,), lambda g, need: (g * out * (1 - out),))


def col_mean(x) -> Tensor:
    """Mean over rows, keeping a (1, cols) shape."""
    xd = _data(x)
    n = xd.shape[0]
    return _emit(xd.mean(axis=0, keepdims=True), (x,),
                 lambda g, need: (np.broadcast_to(g / n, xd.shape).copy(),))


def total(x) -> Tensor:
    xd = _data(x)
    return _emit(np.asarray(xd.sum(), dtype=xd.dtype), (x,),
                 lambda g, need: (np.full_like(xd, g),))


def scale(x, c: float) -> Tensor:
    xd = _data(x)
    return _emit(xd * xd.dtype.type(c), (x,), lambda g, need: (g * c,))


def softmax(logits) -> Tensor:
    """Row-wise softmax with per-row max subtraction."""
    ld = _data(logits)
    e = np.exp(ld - ld.max(axis=1, keepdims=True))
    out = e / e.sum(axis=1, keepdims=True)

    def backward(g, need):
        return (out * (g - (g * out).sum(axis=1, keepdims=True)),)

    return _emit(out, (logits,), backward)


def log_softmax(logits) -> np.ndarray:
    ld = _data(logits)
    shifted = ld - ld.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def cross_entropy(logits, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits)."""
    ld = _data(logits)
    labels = np.asarray(labels)
    n = ld.shape[0]
    logp = log_softmax(ld)
    rows = np.arange(n)
    value = -logp[rows, labels].mean()

    def backward(g, need):
        grad = np.exp(logp)
        grad[rows, labels] -= 1.0
        return (grad * (g / n),)

    return _emit(np.asarray(value, dtype=ld.dtype), (logits,), backward)


def kl_divergence(p, q) -> Tensor:
    """Mean over rows of sum_i p_i ln(p_i / q_i).

    ``p`` is a constant (no gradient flows into it). ``q`` is clamped at
    ``PROB_FLOOR`` before the log; clamped entries pass no gradient.
    """
    pd = np.asarray(_data(p))
    qd = _data(q)
    if pd.shape != qd.shape:
        raise DimensionError(f"kl_divergence: p {pd.shape} vs q {qd.shape}")
    n = qd.shape[0]
    qc = np.maximum(qd, PROB_FLOOR)
    with np.errstate(divide="ignore", invalid="ignore"):
        plogp = np.where(pd > 0, pd * np.log(np.where(pd > 0, pd, 1.0)), 0.0)
    value = (plogp - pd * np.log(qc)).sum() / n

    def backward(g, need):
        return (None, np.where(qd >= PROB_FLOOR, -pd / qc, 0.0) * (g / n))

    return _emit(np.asarray(value, dtype=qd.dtype), (p, q), backward)


def batch_normalize(x, eps: float = BN_EPS):
    """Standardize each column with the batch mean and sqrt(var + eps).

    Returns ``(normalized, mean, std)``; all three are differentiable.
    """
    mean = col_mean(x)
    centered = sub(x, mean)
    var = col_mean(square(centered))
    std = sqrt(add(var, np.asarray(eps, dtype=_data(x).dtype)))
    return div(centered, std), mean, std


def normalize(x, mean, std) -> Tensor:
    return div(sub(x, mean), std)


def gaussian_noise(shape, sigma: float, rng: "RngStream", dtype=np.float32) -> np.ndarray:
    if sigma < 0:
        raise ValueError(f"sigma must be non-negative, got {sigma}")
    if sigma == 0:
        return np.zeros(shape, dtype=dtype)
    return rng.normal(shape, dtype) * np.asarray(sigma, dtype=dtype)


# ---------------------------------------------------------------------------
# randomness


class RngStream:
    """Counter-based (Philox) stream keyed by a seed and a substream path.

    ``RngStream(7).child("noise", 12)`` is independent of every other path
    and does not depend on how many draws its siblings made.
    """

    def __init__(self, seed: int, path: tuple = ()):
        self.seed = int(seed)
        self.path = tuple(path)
        digest = hashlib.blake2b(repr((self.seed, self.path)).encode(), digest_size=16).digest()
        self._gen = np.random.Generator(np.random.Philox(key=int.from_bytes(digest, "little")))

    def child(self, *names) -> "RngStream":
        return RngStream(self.seed, self.path + tuple(names))

    @property
    def generator(self) -> np.random.Generator:
        return self._gen

    def normal(self, shape, dtype=np.float64) -> np.ndarray:
        return self._gen.standard_normal(shape, dtype=dtype)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def choice(self, a, size: int, replace: bool = False) -> np.ndarray:
        return self._gen.choice(a, size=size, replace=replace)

    def __repr__(self):
        return f"RngStream(seed={self.seed}, path={self.path})"


# ---------------------------------------------------------------------------
# gradient check


def grad_check(f: Callable[[], Tensor], params: Sequence[Tensor], step: float = 1e-5,
               max_entries: int | None = None, rng: RngStream | None = None) -> float:
    """Largest relative error between tape gradients and central differences.

    ``f`` recomputes the scalar from the current contents of ``params``
    (which are perturbed in place and restored). Error per parameter is
    ``|analytic - numeric| / max(|analytic|, |numeric|)`` in the 2-norm over
    the checked entries; with ``max_entries`` only a random subset of each
    array is probed.
    """
    with Tape() as tape:
        tape.watch(params)
        value = f()
    analytic = tape.gradient(value, params)

    worst = 0.0
    for p, a in zip(params, analytic):
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = (rng or RngStream(0)).choice(flat.size, max_entries)
        numeric = np.empty(len(idx))
        for j, i in enumerate(idx):
            orig = flat[i]
            flat[i] = orig + step
            up = float(f().data)
            flat[i] = orig - step
            down = float(f().data)
            flat[i] = orig
            numeric[j] = (up - down) / (2 * step)
        a_sel = a.reshape(-1)[idx]
        scale_ = max(np.linalg.norm(a_sel), np.linalg.norm(numeric))
        if scale_ == 0:
            continue
        worst = max(worst, float(np.linalg.norm(a_sel - numeric) / scale_))
    return worst
