"""Small dense tensor engine with tape-based reverse-mode autodiff.

Only the operations needed by the segmentation network are provided:
3x3 same-padded convolution, group normalization, ReLU, sigmoid, 2x2 max
pooling, bilinear resizing, channel concatenation and binary cross-entropy.
Arrays are plain numpy; the dtype of the inputs is kept (float32 for
training, float64 for gradient checks).
"""

from __future__ import annotations

import contextlib
import functools
import struct
import threading
from dataclasses import dataclass, field
from typing import BinaryIO, Callable, Iterable, Sequence

import numpy as np

BCE_CLAMP = 1e-7


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


_state = threading.local()


def _grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording on the current thread."""
    prev = _grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    """N-d array plus an optional gradient and the closure that produced it."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_released")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self._released = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def backward(self) -> None:
        """Propagate d(self)/d(leaf) into the ``grad`` of every leaf that requires it.

        The recorded graph is consumed: a second call raises ``RuntimeError``.
        Leaf gradients accumulate across *different* graphs.
        """
        if self.data.size != 1:
            raise ValueError(f"backward() needs a scalar, got shape {self.shape}")
        if self._released:
            raise RuntimeError("graph already consumed by a previous backward() call")
        if not self.requires_grad:
            raise RuntimeError("tensor does not require grad")

        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
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

        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if node._backward is None:
                if g is not None:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            if g is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        for node in order:
            if node._backward is not None:
                node._backward = None
                node._parents = ()
                node._released = True


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(out: np.ndarray, parents: tuple[Tensor, ...], backward) -> Tensor:
    t = Tensor(out)
    if _grad_enabled() and any(p.requires_grad for p in parents):
        t.requires_grad = True
        t._parents = parents
        t._backward = backward
    return t


# ---------------------------------------------------------------------------
# elementwise / reductions


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    out = np.where(mask, x.data, 0).astype(x.dtype, copy=False)
    return _record(out, (x,), lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    """Logistic function, clamped so the result lies strictly inside (0, 1)."""
    d = x.data
    e = np.exp(-np.abs(d))
    out = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(d.dtype, copy=False)
    fi = np.finfo(d.dtype)
    out = np.clip(out, fi.tiny, 1.0 - fi.epsneg)
    return _record(out, (x,), lambda g: (g * out * (1.0 - out),))


def tensor_sum(x: Tensor) -> Tensor:
    out = np.asarray(x.data.sum(), dtype=x.dtype)
    return _record(out, (x,), lambda g: (np.broadcast_to(g, x.shape).astype(x.dtype),))


def weighted_sum(x: Tensor, weights: np.ndarray) -> Tensor:
    """sum(x * weights) for a constant weight array of the same shape."""
    w = np.asarray(weights, dtype=x.dtype)
    if w.shape != x.shape:
        raise ShapeError(f"weights {w.shape} vs tensor {x.shape}")
    out = np.asarray((x.data * w).sum(), dtype=x.dtype)
    return _record(out, (x,), lambda g: (g * w,))


def scale(x: Tensor, c: float) -> Tensor:
    out = (x.data * c).astype(x.dtype, copy=False)
    return _record(out, (x,), lambda g: (g * c,))


# ---------------------------------------------------------------------------
# convolution


def _im2col3(x: np.ndarray) -> np.ndarray:
    """(B, C, H, W) -> (C*9, B*H*W) patch matrix for a 3x3, pad-1 window."""
    b, c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    cols = np.empty((c, 3, 3, b, h, w), dtype=x.dtype)
    for i in range(3):
        for j in range(3):
            cols[:, i, j] = xp[:, :, i:i + h, j:j + w].transpose(1, 0, 2, 3)
    return cols.reshape(c * 9, b * h * w)


def _col2im3(cols: np.ndarray, shape: tuple[int, int, int, int]) -> np.ndarray:
    b, c, h, w = shape
    cols = cols.reshape(c, 3, 3, b, h, w)
    xp = np.zeros((b, c, h + 2, w + 2), dtype=cols.dtype)
    for i in range(3):
        for j in range(3):
            xp[:, :, i:i + h, j:j + w] += cols[:, i, j].transpose(1, 0, 2, 3)
    return xp[:, :, 1:-1, 1:-1]


def conv2d(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """3x3 cross-correlation, stride 1, zero padding 1."""
    if x.data.ndim != 4:
        raise ShapeError(f"conv2d input must be 4-d, got {x.shape}")
    b, cin, h, w = x.shape
    cout = weight.shape[0]
    if weight.shape != (cout, cin, 3, 3):
        raise ShapeError(f"weight {weight.shape} does not fit input channels {cin}")
    if bias.shape != (cout,):
        raise ShapeError(f"bias {bias.shape} does not fit {cout} output channels")

    w2 = weight.data.reshape(cout, cin * 9)
    out = (w2 @ _im2col3(x.data)).reshape(cout, b, h, w).transpose(1, 0, 2, 3)
    out = np.ascontiguousarray(out) + bias.data[None, :, None, None]

    def backward(g):
        g2 = g.transpose(1, 0, 2, 3).reshape(cout, b * h * w)
        gw = gb = gx = None
        if weight.requires_grad:
            gw = (g2 @ _im2col3(x.data).T).reshape(weight.shape)
        if bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        if x.requires_grad:
            gx = _col2im3(w2.T @ g2, x.shape)
        return gx, gw, gb

    return _record(out, (x, weight, bias), backward)


# ---------------------------------------------------------------------------
# normalization


def group_norm(x: Tensor, num_groups: int, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    b, c, h, w = x.shape
    if c % num_groups:
        raise ShapeError(f"{c} channels not divisible into {num_groups} groups")
    if eps <= 0:
        raise ValueError("eps must be positive")
    xg = x.data.reshape(b, num_groups, -1)
    mean = xg.mean(axis=2, keepdims=True)
    var = xg.var(axis=2, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = ((xg - mean) * inv).reshape(x.shape)
    out = xhat * gamma.data[None, :, None, None] + beta.data[None, :, None, None]

    def backward(g):
        gg = gb = gx = None
        if gamma.requires_grad:
            gg = (g * xhat).sum(axis=(0, 2, 3))
        if beta.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        if x.requires_grad:
            dxhat = (g * gamma.data[None, :, None, None]).reshape(b, num_groups, -1)
            xh = xhat.reshape(b, num_groups, -1)
            gx = inv * (dxhat - dxhat.mean(axis=2, keepdims=True)
                        - xh * (dxhat * xh).mean(axis=2, keepdims=True))
            gx = gx.reshape(x.shape)
        return gx, gg, gb

    return _record(out.astype(x.dtype, copy=False), (x, gamma, beta), backward)


# ---------------------------------------------------------------------------
# resampling


def maxpool2(x: Tensor) -> Tensor:
    b, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2 needs even spatial dims, got {h}x{w}")
    win = x.data.reshape(b, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    win = win.reshape(b, c, h // 2, w // 2, 4)
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def backward(g):
        onehot = (np.arange(4) == idx[..., None]) * g[..., None]
        gx = onehot.reshape(b, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
        return (gx.reshape(x.shape).astype(x.dtype, copy=False),)

    return _record(out, (x,), backward)


@functools.lru_cache(maxsize=64)
def _resize_matrix(n_in: int, n_out: int) -> np.ndarray:
    m = np.zeros((n_out, n_in), dtype=np.float64)
    ratio = n_in / n_out
    for o in range(n_out):
        src = max((o + 0.5) * ratio - 0.5, 0.0)
        i0 = min(int(np.floor(src)), n_in - 1)
        i1 = min(i0 + 1, n_in - 1)
        lam = src - i0
        m[o, i0] += 1.0 - lam
        m[o, i1] += lam
    m.setflags(write=False)
    return m


def resize_matrix(n_in: int, n_out: int, dtype=np.float64) -> np.ndarray:
    """Row-stochastic linear-interpolation matrix with half-pixel centres.

    Row ``o`` samples source coordinate ``(o + 0.5) * n_in / n_out - 0.5``,
    clamped to the valid range (the align_corners=False convention, no
    antialiasing).
    """
    return _resize_matrix(int(n_in), int(n_out)).astype(dtype)


def resize_array(a: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize over the last two axes of a plain array."""
    h, w = a.shape[-2:]
    if (h, w) == (out_h, out_w):
        return a.copy()
    mh = resize_matrix(h, out_h, a.dtype)
    mw = resize_matrix(w, out_w, a.dtype)
    return mh @ a @ mw.T


def resize_bilinear(x: Tensor, out_h: int, out_w: int) -> Tensor:
    h, w = x.shape[-2:]
    mh = resize_matrix(h, out_h, x.dtype)
    mw = resize_matrix(w, out_w, x.dtype)
    out = mh @ x.data @ mw.T
    return _record(out, (x,), lambda g: (mh.T @ g @ mw,))


def upsample_bilinear2(x: Tensor) -> Tensor:
    h, w = x.shape[-2:]
    return resize_bilinear(x, 2 * h, 2 * w)


# ---------------------------------------------------------------------------
# structure / loss


def concat_channels(xs: Sequence[Tensor]) -> Tensor:
    if not xs:
        raise ShapeError("concat_channels needs at least one input")
    ref = xs[0].shape
    for t in xs:
        if t.data.ndim != 4 or t.shape[0] != ref[0] or t.shape[2:] != ref[2:]:
            raise ShapeError(f"cannot concatenate {t.shape} with {ref}")
    out = np.concatenate([t.data for t in xs], axis=1)
    bounds = np.cumsum([0] + [t.shape[1] for t in xs])

    def backward(g):
        return tuple(g[:, bounds[i]:bounds[i + 1]] for i in range(len(xs)))

    return _record(out, tuple(xs), backward)


def bce_loss(pred: Tensor, target) -> Tensor:
    """Mean binary cross-entropy; probabilities clamped to [1e-7, 1 - 1e-7]."""
    t = target.data if isinstance(target, Tensor) else np.asarray(target)
    if t.shape != pred.shape:
        raise ShapeError(f"pred {pred.shape} vs target {t.shape}")
    t = t.astype(pred.dtype, copy=False)
    p = np.clip(pred.data, BCE_CLAMP, 1.0 - BCE_CLAMP)
    n = p.size
    loss = -(t * np.log(p) + (1.0 - t) * np.log1p(-p)).mean()
    inside = (pred.data >= BCE_CLAMP) & (pred.data <= 1.0 - BCE_CLAMP)

    def backward(g):
        return (g * inside * (p - t) / (p * (1.0 - p)) / n,)

    return _record(np.asarray(loss, dtype=pred.dtype), (pred,), backward)


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    """Moment buffers for a list of parameters; ``t`` counts completed steps."""

    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    @classmethod
    def for_params(cls, params: Iterable[Tensor], **hyper) -> "AdamState":
        params = list(params)
        return cls(m=[np.zeros_like(p.data) for p in params],
                   v=[np.zeros_like(p.data) for p in params], **hyper)


def adam_step(params: Sequence[Tensor], grads: Sequence[np.ndarray | None], state: AdamState) -> AdamState:
    """Bias-corrected Adam update, applied in place to ``params``.

    Parameters whose gradient is ``None`` are treated as having a zero gradient.
    """
    if not (len(params) == len(grads) == len(state.m) == len(state.v)):
        raise ShapeError("params, grads and optimizer state differ in length")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if m.shape != p.shape:
            raise ShapeError(f"optimizer state {m.shape} does not match parameter {p.shape}")
        if g is None:
            g = np.zeros_like(p.data)
        elif g.shape != p.shape:
            raise ShapeError(f"gradient {g.shape} does not match parameter {p.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        step = state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.data -= step.astype(p.dtype, copy=False)
    return state


# ---------------------------------------------------------------------------
# checkpoints

MAGIC = b"SPATW"
FORMAT_VERSION = 1


def save_params(params: dict[str, Tensor], fh: BinaryIO) -> None:
    """Write ``params`` in the SPATW binary format (all little-endian).

    Layout: magic ``SPATW``, u32 version, u32 record count, then per record
    u32 name length, UTF-8 name, u32 rank, rank x u64 dims, float32 payload.
    """
    fh.write(MAGIC)
    fh.write(struct.pack("<II", FORMAT_VERSION, len(params)))
    for name, t in params.items():
        raw = name.encode("utf-8")
        arr = np.ascontiguousarray(t.data, dtype="<f4")
        fh.write(struct.pack("<I", len(raw)))
        fh.write(raw)
        fh.write(struct.pack("<I", arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        fh.write(arr.tobytes())


def load_params(fh: BinaryIO) -> dict[str, Tensor]:
    def read(n):
        buf = fh.read(n)
        if len(buf) != n:
            raise ValueError("truncated checkpoint")
        return buf

    if read(len(MAGIC)) != MAGIC:
        raise ValueError("not a SPATW checkpoint")
    version, count = struct.unpack("<II", read(8))
    if version != FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    out: dict[str, Tensor] = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<I", read(4))
        name = read(nlen).decode("utf-8")
        (rank,) = struct.unpack("<I", read(4))
        dims = struct.unpack(f"<{rank}Q", read(8 * rank))
        size = int(np.prod(dims, dtype=np.int64)) if rank else 1
        arr = np.frombuffer(read(4 * size), dtype="<f4").reshape(dims).astype(np.float32)
        out[name] = Tensor(arr, requires_grad=True)
    return out
