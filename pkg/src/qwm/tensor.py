"""Dense float64 tensors with tape-based reverse-mode differentiation.

Ops executed while a :class:`Tape` is active (and touching at least one tensor
that requires gradients) are appended to that tape together with a closure
mapping the output cotangent to input cotangents.  :func:`backward` walks the
tape in exact reverse execution order.  Outside a tape every op is a plain
numpy computation, which is what environment rollouts and evaluation use.

Broadcasting between two tensors is limited to equal shapes, leading-axis
broadcast (bias over the batch axis) and 0-d scalars.  Non-tensor constants
(floats, numpy arrays) broadcast freely since they never receive gradients.
"""

from __future__ import annotations

import os
import struct
import threading
from contextlib import contextmanager
from typing import BinaryIO, Callable, Iterable, Mapping, Sequence

import numpy as np

DEBUG = bool(os.environ.get("QWM_DEBUG"))


class NonScalarLoss(ValueError):
    pass


class ShapeMismatch(ValueError):
    pass


class NonFiniteValue(FloatingPointError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "is_leaf", "__weakref__")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(self.data) if requires_grad else None
        self.is_leaf = True

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __len__(self) -> int:
        return len(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad[...] = 0.0

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    __add__ = lambda self, other: add(self, other)
    __radd__ = lambda self, other: add(other, self)
    __sub__ = lambda self, other: sub(self, other)
    __rsub__ = lambda self, other: sub(other, self)
    __mul__ = lambda self, other: mul(self, other)
    __rmul__ = lambda self, other: mul(other, self)
    __truediv__ = lambda self, other: div(self, other)
    __rtruediv__ = lambda self, other: div(other, self)
    __neg__ = lambda self: neg(self)
    __matmul__ = lambda self, other: matmul(self, other)


class Tape:
    """Ordered record of differentiable ops executed inside ``with Tape():``."""

    def __init__(self):
        self.records: list[tuple] = []

    def __enter__(self) -> "Tape":
        _stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _stack().pop()

    def __len__(self) -> int:
        return len(self.records)

    def backward(self, loss: Tensor) -> None:
        if loss.data.size != 1:
            raise NonScalarLoss(f"loss must be scalar, got shape {loss.shape}")
        if loss.is_leaf:
            if loss.requires_grad:
                loss.grad += 1.0
            return
        grads = {id(loss): np.ones_like(loss.data)}
        for out, inputs, needs, fn in reversed(self.records):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            for t, need, gi in zip(inputs, needs, fn(g)):
                if not need or gi is None:
                    continue
                if t.is_leaf:
                    if t.grad is None:
                        t.grad = np.zeros_like(t.data)
                    t.grad += gi
                else:
                    key = id(t)
                    if key in grads:
                        grads[key] = grads[key] + gi
                    else:
                        grads[key] = gi


_local = threading.local()


def _stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def current_tape() -> Tape | None:
    stack = _stack()
    return stack[-1] if stack else None


@contextmanager
def no_grad():
    """Suspend recording even if an outer tape is active."""
    stack = _stack()
    saved = list(stack)
    stack.clear()
    try:
        yield
    finally:
        stack.extend(saved)


def backward(loss: Tensor, tape: Tape | None = None) -> None:
    """Accumulate d(loss)/d(leaf) into every leaf that requires gradients."""
    tape = tape or current_tape()
    if tape is None:
        raise RuntimeError("backward() needs the tape the loss was recorded on")
    tape.backward(loss)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(data: np.ndarray, inputs: Sequence[Tensor], fn: Callable) -> Tensor:
    if DEBUG and not np.all(np.isfinite(data)):
        raise NonFiniteValue("non-finite value produced by tensor op")
    out = Tensor(data)
    tape = current_tape()
    if tape is not None:
        needs = tuple(t.requires_grad for t in inputs)
        if any(needs):
            out.requires_grad = True
            out.is_leaf = False
            tape.records.append((out, tuple(inputs), needs, fn))
    return out


def _check_broadcast(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape == b.shape or a.ndim == 0 or b.ndim == 0:
        return
    short, long_ = (a, b) if a.ndim < b.ndim else (b, a)
    if short.ndim < long_.ndim and long_.shape[long_.ndim - short.ndim:] == short.shape:
        return
    raise ShapeMismatch(f"cannot combine shapes {a.shape} and {b.shape}")


def _reduce_to(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    if len(shape) == 0:
        return np.asarray(g.sum())
    lead = g.ndim - len(shape)
    return g.sum(axis=tuple(range(lead))) if lead > 0 else g


# elementwise binary -----------------------------------------------------------


def _binary(a, b, forward, grad_a, grad_b):
    ta, tb = isinstance(a, Tensor), isinstance(b, Tensor)
    ad = a.data if ta else np.asarray(a, dtype=np.float64)
    bd = b.data if tb else np.asarray(b, dtype=np.float64)
    if ta and tb:
        _check_broadcast(ad, bd)
    out = forward(ad, bd)
    inputs = [t for t in (a, b) if isinstance(t, Tensor)]

    def fn(g):
        res = []
        if ta:
            res.append(_reduce_to(grad_a(g, ad, bd, out), ad.shape))
        if tb:
            res.append(_reduce_to(grad_b(g, ad, bd, out), bd.shape))
        return res

    return _record(out, inputs, fn)


def add(a, b) -> Tensor:
    return _binary(a, b, np.add, lambda g, x, y, o: g, lambda g, x, y, o: g)


def sub(a, b) -> Tensor:
    return _binary(a, b, np.subtract, lambda g, x, y, o: g, lambda g, x, y, o: -g)


def mul(a, b) -> Tensor:
    return _binary(a, b, np.multiply, lambda g, x, y, o: g * y, lambda g, x, y, o: g * x)


def div(a, b) -> Tensor:
    return _binary(
        a, b, np.divide, lambda g, x, y, o: g / y, lambda g, x, y, o: -g * o / y
    )


def neg(x: Tensor) -> Tensor:
    return _record(-x.data, [x], lambda g: (-g,))


# elementwise unary ------------------------------------------------------------


def square(x: Tensor) -> Tensor:
    d = x.data
    return _record(d * d, [x], lambda g: (2.0 * g * d,))


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _record(out, [x], lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    d = x.data
    return _record(np.log(d), [x], lambda g: (g / d,))


def sigmoid(x: Tensor) -> Tensor:
    out = _sigmoid(x.data)
    return _record(out, [x], lambda g: (g * out * (1.0 - out),))


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return _record(out, [x], lambda g: (g * (1.0 - out * out),))


def softplus(x: Tensor) -> Tensor:
    d = x.data
    out = np.logaddexp(0.0, d)
    return _record(out, [x], lambda g: (g * _sigmoid(d),))


def silu(x: Tensor) -> Tensor:
    d = x.data
    s = _sigmoid(d)
    return _record(d * s, [x], lambda g: (g * s * (1.0 + d * (1.0 - s)),))


def symlog(x: Tensor) -> Tensor:
    d = x.data
    return _record(np.sign(d) * np.log1p(np.abs(d)), [x], lambda g: (g / (1.0 + np.abs(d)),))


def symexp(x: Tensor) -> Tensor:
    d = x.data
    a = np.abs(d)
    return _record(np.sign(d) * np.expm1(a), [x], lambda g: (g * np.exp(a),))


def clamp(x: Tensor, lo: float, hi: float) -> Tensor:
    d = x.data
    inside = (d >= lo) & (d <= hi)
    return _record(np.clip(d, lo, hi), [x], lambda g: (g * inside,))


def maximum(x: Tensor, floor: float) -> Tensor:
    """max(x, floor) against a constant floor; no gradient below the floor."""
    d = x.data
    above = d > floor
    return _record(np.where(above, d, floor), [x], lambda g: (g * above,))


def stop_gradient(x: Tensor) -> Tensor:
    return Tensor(x.data)


def straight_through(sample: np.ndarray, probs: Tensor) -> Tensor:
    """Forward value ``sample``; backward as if the output were ``probs``."""
    sample = np.asarray(sample, dtype=np.float64)
    if sample.shape != probs.shape:
        raise ShapeMismatch(f"sample {sample.shape} vs probs {probs.shape}")
    return _record(sample.copy(), [probs], lambda g: (g,))


def _sigmoid(d: np.ndarray) -> np.ndarray:
    # tanh form is overflow-free on both tails
    return 0.5 * (1.0 + np.tanh(0.5 * d))


# linear algebra ---------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    ad, bd = a.data, b.data
    if ad.ndim != 2 or bd.ndim != 2 or ad.shape[1] != bd.shape[0]:
        raise ShapeMismatch(f"matmul of {ad.shape} and {bd.shape}")
    return _record(ad @ bd, [a, b], lambda g: (g @ bd.T, ad.T @ g))


def affine(x: Tensor, W: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ W.T + b`` with W stored as (out, in)."""
    xd, Wd = x.data, W.data
    if xd.ndim != 2 or Wd.ndim != 2 or xd.shape[1] != Wd.shape[1]:
        raise ShapeMismatch(f"affine input {xd.shape} vs weight {Wd.shape}")
    out = xd @ Wd.T
    if b is None:
        return _record(out, [x, W], lambda g: (g @ Wd, g.T @ xd))
    out += b.data
    return _record(out, [x, W, b], lambda g: (g @ Wd, g.T @ xd, g.sum(axis=0)))


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    xd = x.data
    mean = xd.mean(axis=-1, keepdims=True)
    xc = xd - mean
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    gd = gain.data

    def fn(g):
        lead = tuple(range(g.ndim - 1))
        dgain = (g * xhat).sum(axis=lead)
        dbias = g.sum(axis=lead)
        gx = g * gd
        dx = inv * (gx - gx.mean(axis=-1, keepdims=True)
                    - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
        return dx, dgain, dbias

    return _record(xhat * gd + bias.data, [x, gain, bias], fn)


def standardize(x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Pre-affine layer-norm output (numpy helper for tests and analysis)."""
    xc = x - x.mean(axis=-1, keepdims=True)
    return xc / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    d = x.data
    e = np.exp(d - d.max(axis=axis, keepdims=True))
    out = e / e.sum(axis=axis, keepdims=True)
    return _record(out, [x], lambda g: (out * (g - (g * out).sum(axis=axis, keepdims=True)),))


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    d = x.data
    shifted = d - d.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    p = np.exp(out)
    return _record(out, [x], lambda g: (g - p * g.sum(axis=axis, keepdims=True),))


# shape ops --------------------------------------------------------------------


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    old = x.shape
    return _record(x.data.reshape(shape), [x], lambda g: (g.reshape(old),))


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    parts = [t for t in tensors if t is not None]
    datas = [p.data if isinstance(p, Tensor) else np.asarray(p, dtype=np.float64) for p in parts]
    out = np.concatenate(datas, axis=axis)
    bounds = np.cumsum([0] + [d.shape[axis] for d in datas])
    keep = [i for i, p in enumerate(parts) if isinstance(p, Tensor)]

    def fn(g):
        pieces = np.split(g, bounds[1:-1], axis=axis)
        return [pieces[i] for i in keep]

    return _record(out, [parts[i] for i in keep], fn)


def split(x: Tensor, sizes: Sequence[int], axis: int = -1) -> list[Tensor]:
    """Split along ``axis`` into consecutive pieces of the given sizes."""
    if int(np.sum(sizes)) != x.shape[axis]:
        raise ShapeMismatch(f"split sizes {list(sizes)} do not cover extent {x.shape[axis]}")
    outs = []
    start = 0
    for size in sizes:
        outs.append(slice_axis(x, start, start + size, axis))
        start += size
    return outs


def slice_axis(x: Tensor, start: int, stop: int, axis: int = -1) -> Tensor:
    index = [slice(None)] * x.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)
    shape = x.shape

    def fn(g):
        full = np.zeros(shape)
        full[index] = g
        return (full,)

    return _record(x.data[index], [x], fn)


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    shape = x.shape
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _record(np.asarray(out), [x], fn)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return sum(x, axis=axis, keepdims=keepdims) * (1.0 / count)


# optimization -----------------------------------------------------------------


def global_norm(params: Iterable[Tensor]) -> float:
    return float(np.sqrt(np.sum([np.sum(p.grad * p.grad) for p in params])))


def clip_grad_norm(params: Sequence[Tensor], max_norm: float = 100.0) -> float:
    """Rescale gradients in place so their global norm is at most ``max_norm``."""
    norm = global_norm(params)
    if norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for p in params:
            p.grad *= scale
    return norm


class Adam:
    def __init__(self, params: Sequence[Tensor], lr: float = 3e-4, betas=(0.9, 0.999),
                 eps: float = 1e-8, clip: float | None = 100.0):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.clip = clip
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self) -> float:
        norm = clip_grad_norm(self.params, self.clip) if self.clip else global_norm(self.params)
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            m *= self.b1
            m += (1.0 - self.b1) * p.grad
            v *= self.b2
            v += (1.0 - self.b2) * p.grad * p.grad
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        return norm

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {"t": np.array([float(self.t)])}
        for i, (m, v) in enumerate(zip(self.m, self.v)):
            out[f"m{i}"] = m
            out[f"v{i}"] = v
        return out

    def load_state_arrays(self, arrays: Mapping[str, np.ndarray]) -> None:
        self.t = int(arrays["t"][0])
        for i in range(len(self.params)):
            self.m[i][...] = arrays[f"m{i}"]
            self.v[i][...] = arrays[f"v{i}"]


# checkpoints ------------------------------------------------------------------

MAGIC = b"QWMCKPT\x00"
VERSION = 1


class CheckpointError(ValueError):
    pass


def write_blocks(fh: BinaryIO, blocks: Mapping[str, np.ndarray]) -> None:
    """Write named float64 blocks: magic, version, count, then each block."""
    fh.write(MAGIC)
    fh.write(struct.pack("<II", VERSION, len(blocks)))
    for name, arr in blocks.items():
        arr = np.asarray(arr.data if isinstance(arr, Tensor) else arr, dtype="<f8")
        raw = name.encode("utf-8")
        fh.write(struct.pack("<I", len(raw)))
        fh.write(raw)
        fh.write(struct.pack("<I", arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        fh.write(np.ascontiguousarray(arr).tobytes())


def read_blocks(fh: BinaryIO) -> dict[str, np.ndarray]:
    if fh.read(len(MAGIC)) != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    version, count = struct.unpack("<II", _read_exact(fh, 8))
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    blocks = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<I", _read_exact(fh, 4))
        name = _read_exact(fh, nlen).decode("utf-8")
        (rank,) = struct.unpack("<I", _read_exact(fh, 4))
        shape = struct.unpack(f"<{rank}Q", _read_exact(fh, 8 * rank))
        n = int(np.prod(shape)) if rank else 1
        data = np.frombuffer(_read_exact(fh, 8 * n), dtype="<f8").astype(np.float64)
        blocks[name] = data.reshape(shape)
    return blocks


def _read_exact(fh: BinaryIO, n: int) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise CheckpointError("truncated checkpoint")
    return buf


def save_checkpoint(path, blocks: Mapping[str, np.ndarray]) -> None:
    with open(path, "wb") as fh:
        write_blocks(fh, blocks)


def load_checkpoint(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        return read_blocks(fh)
