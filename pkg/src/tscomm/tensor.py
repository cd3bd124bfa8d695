"""A small reverse-mode autodiff kernel on numpy arrays.

Only what the signal-control networks need: broadcasting arithmetic, matmul,
ReLU, sigmoid, masked softmax, single-head self-attention, three losses, Adam
and a versioned binary checkpoint.  Everything runs in float64 so that finite
difference checks are meaningful.
"""

from __future__ import annotations

import contextlib
import io
import json
import math
import struct
from collections import OrderedDict
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import CheckpointVersionMismatch, MissingGradient, ShapeMismatch

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, _parents: tuple = (), _backward=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def _accum(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    def backward(self, grad: np.ndarray | None = None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise ShapeMismatch("backward() without a gradient needs a scalar")
            grad = np.ones_like(self.data)
        order: list[Tensor] = []
        seen: set[int] = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=np.float64)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node._accum(g)
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if id(parent) in grads:
                    grads[id(parent)] = grads[id(parent)] + pg
                else:
                    grads[id(parent)] = pg

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __neg__(self):
        return neg(self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def param(data) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True)


def _make(data, parents: tuple, backward: Callable) -> Tensor:
    if _grad_enabled and any(p.requires_grad for p in parents):
        return Tensor(data, True, parents, backward)
    return Tensor(data)


# -------------------------------------------------------------------- ops

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data + b.data
    except ValueError as exc:
        raise ShapeMismatch(str(exc)) from exc
    sa, sb = a.shape, b.shape
    return _make(out, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data * b.data
    except ValueError as exc:
        raise ShapeMismatch(str(exc)) from exc
    ad, bd = a.data, b.data
    return _make(
        out, (a, b), lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape))
    )


def scale(x, k: float) -> Tensor:
    x = as_tensor(x)
    return _make(x.data * k, (x,), lambda g: (g * k,))


def _swap(x: np.ndarray) -> np.ndarray:
    return np.swapaxes(x, -1, -2)


def matmul(a, b) -> Tensor:
    """Matrix product; 3-d operands multiply batch by batch."""
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    if ad.ndim not in (2, 3) or ad.ndim != bd.ndim or ad.shape[-1] != bd.shape[-2] or ad.shape[:-2] != bd.shape[:-2]:
        raise ShapeMismatch(f"matmul {a.shape} @ {b.shape}")
    return _make(ad @ bd, (a, b), lambda g: (g @ _swap(bd), _swap(ad) @ g))


def const_matmul(A, x) -> Tensor:
    """``A @ x`` for a constant (dense or scipy sparse) matrix ``A``."""
    x = as_tensor(x)
    if x.data.ndim != 2 or A.shape[1] != x.shape[0]:
        raise ShapeMismatch(f"matmul {A.shape} @ {x.shape}")
    At = A.T
    return _make(np.asarray(A @ x.data), (x,), lambda g: (np.asarray(At @ g),))


def dense(x, W, b=None) -> Tensor:
    """``x @ W + b`` for a batch of row vectors."""
    x, W = as_tensor(x), as_tensor(W)
    if x.data.ndim != 2 or W.data.ndim != 2 or x.shape[1] != W.shape[0]:
        raise ShapeMismatch(f"dense {x.shape} @ {W.shape}")
    xd, Wd = x.data, W.data
    out = xd @ Wd
    if b is None:
        return _make(out, (x, W), lambda g: (g @ Wd.T, xd.T @ g))
    b = as_tensor(b)
    if b.shape != (W.shape[1],):
        raise ShapeMismatch(f"bias {b.shape} for {W.shape[1]} outputs")
    return _make(out + b.data, (x, W, b), lambda g: (g @ Wd.T, xd.T @ g, g.sum(axis=0)))


def transpose(a) -> Tensor:
    """Swap the last two axes."""
    a = as_tensor(a)
    return _make(_swap(a.data), (a,), lambda g: (_swap(g),))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return _make(x.data * mask, (x,), lambda g: (g * mask,))


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    s = np.empty_like(x.data)
    pos = x.data >= 0
    s[pos] = 1.0 / (1.0 + np.exp(-x.data[pos]))
    e = np.exp(x.data[~pos])
    s[~pos] = e / (1.0 + e)
    return _make(s, (x,), lambda g: (g * s * (1.0 - s),))


def exp(x) -> Tensor:
    x = as_tensor(x)
    e = np.exp(x.data)
    return _make(e, (x,), lambda g: (g * e,))


def log(x) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    return _make(np.log(xd), (x,), lambda g: (g / xd,))


def tsum(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    shape = x.shape

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(x.data.sum(axis=axis, keepdims=keepdims), (x,), back)


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    n = x.data.size if axis is None else x.shape[axis]
    return scale(tsum(x, axis, keepdims), 1.0 / n)


def concat(xs: Sequence, axis: int = -1) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    try:
        out = np.concatenate([x.data for x in xs], axis=axis)
    except ValueError as exc:
        raise ShapeMismatch(str(exc)) from exc
    sizes = np.cumsum([x.shape[axis] for x in xs])[:-1]
    return _make(out, tuple(xs), lambda g: tuple(np.split(g, sizes, axis=axis)))


def take(x, index) -> Tensor:
    """Rows ``x[index]`` (gather along the first axis)."""
    x = as_tensor(x)
    idx = np.asarray(index, dtype=np.int64)
    shape = x.shape

    def back(g):
        full = np.zeros(shape)
        np.add.at(full, idx, g)
        return (full,)

    return _make(x.data[idx], (x,), back)


def softmax(x, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    """Softmax; entries where ``mask`` is False get probability zero."""
    x = as_tensor(x)
    z = x.data if mask is None else np.where(mask, x.data, -np.inf)
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _make(s, (x,), back)


def self_attention_1head(
    H, Wq, Wk, Wv, w_out, b_out, mask: np.ndarray | None = None, groups: np.ndarray | None = None
) -> Tensor:
    """Scaled dot-product self-attention over the rows of ``H``, one scalar per row.

    ``mask[i, j]`` restricts row ``i`` to attend to row ``j``.  Alternatively
    ``groups`` gives row offsets of independent sets packed one after another;
    rows attend only within their own set.  Returns pre-sigmoid scores of
    shape ``(m,)``.
    """
    H = as_tensor(H)
    if H.data.ndim != 2:
        raise ShapeMismatch(f"attention input must be m x d, got {H.shape}")
    n = H.shape[0]
    q = matmul(H, Wq)
    k = matmul(H, Wk)
    v = matmul(H, Wv)
    d = Wk.shape[1]
    sizes = None if groups is None else np.diff(groups)
    if sizes is not None and len(sizes) and (sizes == sizes[0]).all() and sizes[0] > 0:
        # equal-size sets: batched attention instead of an n x n masked one
        shape3 = (len(sizes), int(sizes[0]), d)
        q3, k3, v3 = (reshape(t, shape3) for t in (q, k, v))
        att = softmax(scale(matmul(q3, transpose(k3)), 1.0 / math.sqrt(d)), axis=-1)
        ctx = reshape(matmul(att, v3), (n, d))
    else:
        if sizes is not None:
            mask = group_mask(groups)
        att = softmax(scale(matmul(q, transpose(k)), 1.0 / math.sqrt(d)), axis=-1, mask=mask)
        ctx = matmul(att, v)
    out = dense(ctx, w_out, b_out)
    return reshape(out, (n,))


def group_mask(groups: np.ndarray) -> np.ndarray:
    """Block-diagonal boolean mask for row sets delimited by ``groups`` offsets."""
    n = int(groups[-1])
    owner = np.repeat(np.arange(len(groups) - 1), np.diff(groups))
    return owner[:, None] == owner[None, :] if n else np.zeros((0, 0), dtype=bool)


# ------------------------------------------------------------------ losses

BCE_EPS = 1e-7


def bce(pred, target) -> Tensor:
    """Mean binary cross-entropy; predictions clamped to [eps, 1 - eps]."""
    pred = as_tensor(pred)
    t = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=np.float64)
    if pred.shape != t.shape:
        raise ShapeMismatch(f"bce {pred.shape} vs {t.shape}")
    p = np.clip(pred.data, BCE_EPS, 1.0 - BCE_EPS)
    n = max(p.size, 1)
    loss = -(t * np.log(p) + (1.0 - t) * np.log(1.0 - p)).sum() / n
    inside = (pred.data > BCE_EPS) & (pred.data < 1.0 - BCE_EPS)
    return _make(loss, (pred,), lambda g: (g * inside * (p - t) / (p * (1.0 - p)) / n,))


def mse(pred, target) -> Tensor:
    pred = as_tensor(pred)
    t = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=np.float64)
    if pred.shape != t.shape:
        raise ShapeMismatch(f"mse {pred.shape} vs {t.shape}")
    diff = pred.data - t
    n = max(diff.size, 1)
    return _make((diff * diff).sum() / n, (pred,), lambda g: (g * 2.0 * diff / n,))


def huber(pred, target, delta: float = 1.0) -> Tensor:
    pred = as_tensor(pred)
    t = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=np.float64)
    if pred.shape != t.shape:
        raise ShapeMismatch(f"huber {pred.shape} vs {t.shape}")
    e = pred.data - t
    a = np.abs(e)
    quad = a <= delta
    per = np.where(quad, 0.5 * e * e, delta * (a - 0.5 * delta))
    n = max(e.size, 1)
    dg = np.where(quad, e, delta * np.sign(e)) / n
    return _make(per.sum() / n, (pred,), lambda g: (g * dg,))


# ------------------------------------------------------------- parameters

MAGIC = b"TSCKPT01"
CHECKPOINT_VERSION = 1


class ParamStore:
    """Named parameters plus Adam state, serializable to a binary checkpoint."""

    def __init__(self):
        self.params: OrderedDict[str, Tensor] = OrderedDict()
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.step = 0

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def names(self) -> list[str]:
        return list(self.params)

    def add(self, name: str, value: np.ndarray) -> Tensor:
        if name in self.params:
            raise KeyError(f"parameter {name!r} already exists")
        t = param(value)
        self.params[name] = t
        self.m[name] = np.zeros_like(t.data)
        self.v[name] = np.zeros_like(t.data)
        return t

    def init_dense(self, name: str, fan_in: int, fan_out: int, rng: np.random.Generator) -> None:
        bound = 1.0 / math.sqrt(fan_in)
        self.add(f"{name}.W", rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        self.add(f"{name}.b", np.zeros(fan_out))

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = np.zeros_like(t.data)

    def grad_norm(self) -> float:
        return math.sqrt(sum(float((t.grad * t.grad).sum()) for t in self.params.values() if t.grad is not None))

    def clip_grad_norm(self, max_norm: float) -> float:
        norm = self.grad_norm()
        if max_norm > 0 and norm > max_norm:
            k = max_norm / (norm + 1e-12)
            for t in self.params.values():
                if t.grad is not None:
                    t.grad *= k
        return norm

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self.params.items()}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for k, t in self.params.items():
            t.data[...] = arrays[k]

    def copy(self) -> "ParamStore":
        out = ParamStore()
        for k, t in self.params.items():
            out.add(k, t.data.copy())
            out.m[k] = self.m[k].copy()
            out.v[k] = self.v[k].copy()
        out.step = self.step
        return out

    # ------------------------------------------------------- checkpoints

    def to_bytes(self, meta: dict | None = None, with_optimizer: bool = True) -> bytes:
        buf = io.BytesIO()
        buf.write(MAGIC)
        buf.write(struct.pack("<I", CHECKPOINT_VERSION))
        meta_b = json.dumps(meta or {}, sort_keys=True).encode()
        buf.write(struct.pack("<I", len(meta_b)))
        buf.write(meta_b)
        buf.write(struct.pack("<I", len(self.params)))

        def record(name, arr):
            nb = name.encode()
            buf.write(struct.pack("<H", len(nb)))
            buf.write(nb)
            buf.write(struct.pack("<B", arr.ndim))
            buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())

        for k, t in self.params.items():
            record(k, t.data)
        buf.write(struct.pack("<B", 1 if with_optimizer else 0))
        if with_optimizer:
            buf.write(struct.pack("<Q", self.step))
            for k in self.params:
                record(k, self.m[k])
                record(k, self.v[k])
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, blob: bytes) -> tuple["ParamStore", dict]:
        buf = io.BytesIO(blob)
        if buf.read(len(MAGIC)) != MAGIC:
            raise CheckpointVersionMismatch("not a checkpoint file")
        (version,) = struct.unpack("<I", buf.read(4))
        if version != CHECKPOINT_VERSION:
            raise CheckpointVersionMismatch(f"checkpoint version {version}, expected {CHECKPOINT_VERSION}")
        (n_meta,) = struct.unpack("<I", buf.read(4))
        meta = json.loads(buf.read(n_meta).decode())
        (count,) = struct.unpack("<I", buf.read(4))

        def record():
            (n,) = struct.unpack("<H", buf.read(2))
            name = buf.read(n).decode()
            (ndim,) = struct.unpack("<B", buf.read(1))
            shape = struct.unpack(f"<{ndim}I", buf.read(4 * ndim))
            size = int(np.prod(shape)) if ndim else 1
            arr = np.frombuffer(buf.read(8 * size), dtype="<f8").astype(np.float64).reshape(shape)
            return name, arr

        store = cls()
        for _ in range(count):
            name, arr = record()
            store.add(name, arr)
        (has_opt,) = struct.unpack("<B", buf.read(1))
        if has_opt:
            (store.step,) = struct.unpack("<Q", buf.read(8))
            for _ in range(count):
                name, m = record()
                _, v = record()
                store.m[name] = m.copy()
                store.v[name] = v.copy()
        return store, meta

    def save(self, path, meta: dict | None = None) -> None:
        with open(path, "wb") as fh:
            fh.write(self.to_bytes(meta))

    @classmethod
    def load(cls, path) -> tuple["ParamStore", dict]:
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())


def adam_step(
    store: ParamStore,
    lr: float = 1e-3,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    names: Iterable[str] | None = None,
) -> None:
    """Bias-corrected Adam update from the gradients held on each parameter."""
    keys = list(store.params) if names is None else list(names)
    for k in keys:
        if store.params[k].grad is None:
            raise MissingGradient(f"parameter {k!r} has no gradient")
    store.step += 1
    c1 = 1.0 - beta1**store.step
    c2 = 1.0 - beta2**store.step
    for k in keys:
        t = store.params[k]
        g = t.grad
        m = store.m[k]
        v = store.v[k]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        t.data -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


# ------------------------------------------------------------ checking

def numeric_grad(fn: Callable[[], float], x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Central finite differences of ``fn`` with respect to array ``x`` (in place)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = fn()
        x[i] = old - h
        fm = fn()
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def gradcheck(
    fn: Callable[[], Tensor],
    tensors: Sequence[Tensor],
    rtol: float = 1e-4,
    atol: float = 1e-6,
    h: float = 1e-6,
) -> tuple[bool, float]:
    """Compare analytic and central-difference gradients of scalar ``fn()``.

    Returns (ok, worst violation ratio); ok means every entry satisfies
    ``|analytic - numeric| <= atol + rtol * |numeric|``.
    """
    for t in tensors:
        t.grad = None
    out = fn()
    out.backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in tensors]
    worst = 0.0
    with no_grad():
        for t, a in zip(tensors, analytic):
            num = numeric_grad(lambda: fn().item(), t.data, h)
            ratio = np.abs(a - num) / (atol + rtol * np.abs(num))
            worst = max(worst, float(ratio.max(initial=0.0)))
    return worst <= 1.0, worst
