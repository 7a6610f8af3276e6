"""Network building blocks: dense stacks, GRU cell, categorical latents, two-hot heads."""

from __future__ import annotations

import threading
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor, ShapeMismatch

TRUNC_STD_CORRECTION = 0.87962566103423978  # std of a unit normal truncated to [-2, 2]


class Module:
    """Parameter container; parameters are discovered from instance attributes."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            if name.startswith("_"):
                continue
            full = f"{prefix}{name}"
            if isinstance(value, Tensor):
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_arrays(self, arrays, prefix: str = "") -> None:
        for name, p in self.named_parameters():
            arr = arrays[prefix + name]
            if arr.shape != p.shape:
                raise ShapeMismatch(f"{name}: checkpoint {arr.shape} vs model {p.shape}")
            p.data[...] = arr

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    @contextmanager
    def frozen(self):
        """Treat all parameters as constants for ops executed inside the block."""
        params = self.parameters()
        saved = [p.requires_grad for p in params]
        for p in params:
            p.requires_grad = False
        try:
            yield self
        finally:
            for p, flag in zip(params, saved):
                p.requires_grad = flag


def param(data) -> Tensor:
    return Tensor(data, requires_grad=True)


def trunc_normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    out = rng.standard_normal(size=shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(size=int(bad.sum()))
        bad = np.abs(out) > 2.0
    return out * (std / TRUNC_STD_CORRECTION)


class Linear(Module):
    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator | None,
                 zero: bool = False):
        if zero or rng is None:
            w = np.zeros((out_dim, in_dim))
        else:
            w = trunc_normal(rng, (out_dim, in_dim), 1.0 / np.sqrt(in_dim))
        self.W = param(w)
        self.b = param(np.zeros(out_dim))

    @property
    def in_dim(self) -> int:
        return self.W.shape[1]

    @property
    def out_dim(self) -> int:
        return self.W.shape[0]

    def __call__(self, x: Tensor) -> Tensor:
        return T.affine(x, self.W, self.b)


class NormLayer(Module):
    """Affine, then layer norm, then SiLU."""

    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator | None):
        self.linear = Linear(in_dim, out_dim, rng)
        self.gain = param(np.ones(out_dim))
        self.bias = param(np.zeros(out_dim))

    def __call__(self, x: Tensor) -> Tensor:
        return T.silu(T.layer_norm(self.linear(x), self.gain, self.bias))


class DenseStack(Module):
    def __init__(self, layers: Sequence[NormLayer], head: Linear | None = None):
        self.layers = list(layers)
        self.head = head

    @property
    def depth(self) -> int:
        return len(self.layers)

    @property
    def out_dim(self) -> int:
        if self.head is not None:
            return self.head.out_dim
        return self.layers[-1].linear.out_dim

    def __call__(self, x: Tensor) -> Tensor:
        for layer in self.layers:
            x = layer(x)
        return self.head(x) if self.head is not None else x


def build_dense_stack(in_dim: int, widths: Sequence[int], out_dim: int | None,
                      rng: np.random.Generator | None, zero_head: bool = False) -> DenseStack:
    """Hidden layers of ``widths`` followed by an optional plain affine head.

    Weights use a truncated normal with std 1/sqrt(fan_in); biases start at zero and
    layer norms at gain 1, bias 0.  ``rng=None`` builds an all-zero network.
    """
    layers = []
    d = in_dim
    for w in widths:
        layers.append(NormLayer(d, w, rng))
        d = w
    head = Linear(d, out_dim, rng, zero=zero_head) if out_dim is not None else None
    return DenseStack(layers, head)


class GRUCell(Module):
    """Gated recurrent cell.

    r = sigmoid(W_ir x + W_hr h),  u = sigmoid(W_iu x + W_hu h),
    n = tanh(W_in x + r * (W_hn h)),  h' = (1 - u) * n + u * h
    (biases included in each affine term).
    """

    def __init__(self, in_dim: int, hidden: int, rng: np.random.Generator | None):
        self.hidden = hidden
        self.inp = Linear(in_dim, 3 * hidden, rng)
        self.rec = Linear(hidden, 3 * hidden, rng)

    def __call__(self, x: Tensor, h: Tensor) -> Tensor:
        if h.shape[-1] != self.hidden or x.shape[-1] != self.inp.in_dim:
            raise ShapeMismatch(
                f"GRU expects input {self.inp.in_dim} and state {self.hidden}, "
                f"got {x.shape} and {h.shape}")
        d = self.hidden
        xr, xu, xn = T.split(self.inp(x), [d, d, d])
        hr, hu, hn = T.split(self.rec(h), [d, d, d])
        r = T.sigmoid(xr + hr)
        u = T.sigmoid(xu + hu)
        n = T.tanh(xn + r * hn)
        return n + u * (h - n)


def grucell_step(cell: GRUCell, x: Tensor, h_prev: Tensor) -> Tensor:
    return cell(x, h_prev)


# categorical latents -----------------------------------------------------------


@dataclass(frozen=True)
class CategoricalLatent:
    groups: int = 16
    classes: int = 16
    unimix: float = 0.01

    @property
    def size(self) -> int:
        return self.groups * self.classes


def categorical_probs(logits: Tensor, groups: int, classes: int, unimix: float = 0.01,
                      temperature: float = 1.0) -> Tensor:
    """Unimix-smoothed per-group probabilities, returned flattened as (N, G*K)."""
    n = logits.shape[0]
    x = T.reshape(logits, (n, groups, classes))
    if temperature != 1.0:
        x = x * (1.0 / temperature)
    p = T.softmax(x, axis=-1)
    if unimix > 0.0:
        p = p * (1.0 - unimix) + unimix / classes
    return T.reshape(p, (n, groups * classes))


def draw_one_hot(probs: np.ndarray, groups: int, classes: int,
                 rng: np.random.Generator) -> np.ndarray:
    """Inverse-CDF draw of one class per group."""
    n = probs.shape[0]
    p = probs.reshape(n, groups, classes)
    cdf = np.cumsum(p, axis=-1)
    u = rng.random((n, groups, 1)) * cdf[..., -1:]
    idx = np.minimum((cdf < u).sum(axis=-1), classes - 1)
    out = np.zeros_like(p)
    np.put_along_axis(out, idx[..., None], 1.0, axis=-1)
    return out.reshape(n, groups * classes)


def mode_one_hot(probs: np.ndarray, groups: int, classes: int) -> np.ndarray:
    n = probs.shape[0]
    p = probs.reshape(n, groups, classes)
    out = np.zeros_like(p)
    np.put_along_axis(out, p.argmax(axis=-1)[..., None], 1.0, axis=-1)
    return out.reshape(n, groups * classes)


class _Relaxed(threading.local):
    active = False


_relaxed = _Relaxed()


@contextmanager
def relaxed_sampling():
    """Within this block categorical samples take the value of their probabilities.

    The backward pass is unchanged, so this turns the sampled graph into a smooth
    function for finite-difference checks of the straight-through routing.
    """
    prev = _relaxed.active
    _relaxed.active = True
    try:
        yield
    finally:
        _relaxed.active = prev


def sample_categorical(logits: Tensor, latent: CategoricalLatent, rng: np.random.Generator | None,
                       temperature: float = 1.0, unimix: float | None = None):
    """Straight-through one-hot sample.

    Returns ``(sample, probs)``; the forward value of ``sample`` is exactly one-hot per
    group and its gradient is routed to ``probs``.  ``rng=None`` takes the mode.
    """
    mix = latent.unimix if unimix is None else unimix
    probs = categorical_probs(logits, latent.groups, latent.classes, mix, temperature)
    if _relaxed.active:
        return T.straight_through(probs.data, probs), probs
    if rng is None:
        hard = mode_one_hot(probs.data, latent.groups, latent.classes)
    else:
        hard = draw_one_hot(probs.data, latent.groups, latent.classes, rng)
    return T.straight_through(hard, probs), probs


def kl_categorical(p_logits: Tensor, q_logits: Tensor, latent: CategoricalLatent) -> Tensor:
    """KL(p || q) per row, summed over groups; both sides unimix-smoothed."""
    g, k, mix = latent.groups, latent.classes, latent.unimix
    p = categorical_probs(p_logits, g, k, mix)
    q = categorical_probs(q_logits, g, k, mix)
    return T.sum(p * (T.log(p) - T.log(q)), axis=-1)


# two-hot regression ---------------------------------------------------------------


@dataclass(frozen=True)
class TwoHotHead:
    n_bins: int = 63
    low: float = -20.0
    high: float = 20.0

    @property
    def centers(self) -> np.ndarray:
        return np.linspace(self.low, self.high, self.n_bins)


def _symlog_np(x):
    return np.sign(x) * np.log1p(np.abs(x))


def _symexp_np(x):
    return np.sign(x) * np.expm1(np.abs(x))


def twohot_encode(values, head: TwoHotHead) -> np.ndarray:
    """Weights over bins for symlog(values); at most two adjacent non-zero entries."""
    centers = head.centers
    x = np.clip(_symlog_np(np.asarray(values, dtype=np.float64)), centers[0], centers[-1])
    flat = x.reshape(-1)
    hi = np.clip(np.searchsorted(centers, flat, side="right"), 1, len(centers) - 1)
    lo = hi - 1
    span = centers[hi] - centers[lo]
    w_hi = (flat - centers[lo]) / span
    out = np.zeros((flat.size, len(centers)))
    rows = np.arange(flat.size)
    out[rows, lo] = 1.0 - w_hi
    out[rows, hi] += w_hi
    return out.reshape(x.shape + (len(centers),))


def twohot_decode(probs, head: TwoHotHead):
    """symexp of the probability-weighted bin centre; Tensor in, Tensor out."""
    centers = head.centers
    if isinstance(probs, Tensor):
        col = Tensor(centers.reshape(-1, 1))
        return T.symexp(T.reshape(T.matmul(probs, col), (probs.shape[0],)))
    return _symexp_np(np.asarray(probs) @ centers)


def twohot_nll(logits: Tensor, targets: np.ndarray, head: TwoHotHead) -> Tensor:
    """Per-row cross-entropy between two-hot targets and softmax(logits)."""
    weights = twohot_encode(targets, head)
    return -T.sum(T.log_softmax(logits, axis=-1) * weights, axis=-1)


def twohot_expected(logits: Tensor, head: TwoHotHead) -> Tensor:
    return twohot_decode(T.softmax(logits, axis=-1), head)
