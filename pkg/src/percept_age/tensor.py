"""Dense float64 tensors with a reverse-mode gradient tape.

Every differentiable op records a :class:`Node` on the calling thread's
:class:`Tape` whenever one of its inputs requires a gradient.
:func:`backward` walks the tape once in reverse execution order, then
clears it.

Ops accept either a single sample (``[n]`` for dense, ``[h, w, c]`` for
images) or a leading batch axis (``[B, n]``, ``[B, h, w, c]``).
"""
from __future__ import annotations

import contextlib
import struct
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import _kernels


class ShapeError(ValueError):
    """Operand shapes do not conform."""


class NonFiniteError(ArithmeticError):
    """A forward op produced NaN or Inf."""


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "_node")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        if any(d <= 0 for d in arr.shape):
            raise ShapeError(f"dimensions must be positive, got {arr.shape}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self._node: Node | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def zero_grad(self) -> None:
        self.grad = None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_item(self)

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    # a few operators used by loss composition
    def __add__(self, other):
        return add(self, other)

    def __mul__(self, k):
        return scale(self, k)

    __rmul__ = __mul__


def _raise_item(t: Tensor):
    raise ShapeError(f"item() needs a single-element tensor, got {t.shape}")


@dataclass(eq=False)
class Node:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Tape:
    nodes: list[Node] = field(default_factory=list)
    enabled: bool = True

    def record(self, node: Node) -> None:
        node.output._node = node
        self.nodes.append(node)

    def clear(self) -> None:
        for node in self.nodes:
            node.output._node = None
        self.nodes.clear()

    def __len__(self) -> int:
        return len(self.nodes)


_local = threading.local()


def current_tape() -> Tape:
    tape = getattr(_local, "tape", None)
    if tape is None:
        tape = _local.tape = Tape()
    return tape


def reset_tape() -> None:
    current_tape().clear()


@contextlib.contextmanager
def no_grad():
    """Suspend recording on this thread's tape."""
    tape = current_tape()
    prev = tape.enabled
    tape.enabled = False
    try:
        yield
    finally:
        tape.enabled = prev


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _finish(op: str, out_data: np.ndarray, inputs: tuple[Tensor, ...], backward_fn) -> Tensor:
    if not np.all(np.isfinite(out_data)):
        raise NonFiniteError(f"{op} produced a non-finite value")
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.grad = None
    out.name = None
    out._node = None
    tape = current_tape()
    out.requires_grad = tape.enabled and any(t.requires_grad for t in inputs)
    if out.requires_grad:
        tape.record(Node(op, inputs, out, backward_fn))
    return out


# ------------------------------------------------------------------- ops


def dense(x, weight, bias=None) -> Tensor:
    """``x @ weight (+ bias)`` for ``x`` of shape ``[n_in]`` or ``[B, n_in]``."""
    x, weight = as_tensor(x), as_tensor(weight)
    if weight.data.ndim != 2 or x.data.ndim not in (1, 2) or x.shape[-1] != weight.shape[0]:
        raise ShapeError(f"dense: input {x.shape} incompatible with weight {weight.shape}")
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (weight.shape[1],):
            raise ShapeError(f"dense: bias {bias.shape} != ({weight.shape[1]},)")
    out = x.data @ weight.data
    if bias is not None:
        out = out + bias.data
    inputs = (x, weight) if bias is None else (x, weight, bias)

    def back(g):
        gx = g @ weight.data.T
        if x.data.ndim == 1:
            gw = np.outer(x.data, g)
            gb = g
        else:
            gw = x.data.T @ g
            gb = g.sum(axis=0)
        return (gx, gw) if bias is None else (gx, gw, gb)

    return _finish("dense", out, inputs, back)


def _conv_geometry(h, w, kh, kw, stride, padding):
    if padding == "same":
        oh, ow = -(-h // stride), -(-w // stride)
        ph = max((oh - 1) * stride + kh - h, 0)
        pw = max((ow - 1) * stride + kw - w, 0)
        pads = (ph // 2, ph - ph // 2, pw // 2, pw - pw // 2)
    elif padding == "valid":
        if kh > h or kw > w:
            raise ShapeError(f"conv2d: kernel {kh}x{kw} larger than input {h}x{w}")
        oh, ow = (h - kh) // stride + 1, (w - kw) // stride + 1
        pads = (0, 0, 0, 0)
    else:
        raise ValueError(f"padding must be 'same' or 'valid', got {padding!r}")
    if kh > h + pads[0] + pads[1] or kw > w + pads[2] + pads[3]:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} larger than padded input")
    return oh, ow, pads


def conv2d(x, kernel, bias=None, stride: int = 1, padding: str = "valid") -> Tensor:
    """Cross-correlation of an NHWC image (or batch) with a ``[kh, kw, cin, cout]`` kernel."""
    x, kernel = as_tensor(x), as_tensor(kernel)
    if stride < 1:
        raise ValueError("stride must be >= 1")
    single = x.data.ndim == 3
    xb = x.data[None] if single else x.data
    if xb.ndim != 4 or kernel.data.ndim != 4 or kernel.shape[2] != xb.shape[3]:
        raise ShapeError(f"conv2d: input {x.shape} incompatible with kernel {kernel.shape}")
    kh, kw, cin, cout = kernel.shape
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (cout,):
            raise ShapeError(f"conv2d: bias {bias.shape} != ({cout},)")
    b, h, w, _ = xb.shape
    oh, ow, (pt, pb, pl, pr) = _conv_geometry(h, w, kh, kw, stride, padding)
    xp = np.pad(xb, ((0, 0), (pt, pb), (pl, pr), (0, 0))) if (pt or pb or pl or pr) else xb
    xp = np.ascontiguousarray(xp)
    cols = _kernels.im2col(xp, kh, kw, stride, oh, ow)
    wmat = kernel.data.reshape(kh * kw * cin, cout)
    out = (cols.reshape(-1, kh * kw * cin) @ wmat).reshape(b, oh, ow, cout)
    if bias is not None:
        out = out + bias.data
    if single:
        out = out[0]
    inputs = (x, kernel) if bias is None else (x, kernel, bias)
    hp, wp = xp.shape[1], xp.shape[2]

    def back(g):
        gb4 = g[None] if single else g
        g2 = gb4.reshape(-1, cout)
        gk = (cols.reshape(-1, kh * kw * cin).T @ g2).reshape(kernel.shape)
        gx = None
        if x.requires_grad:
            dcols = np.ascontiguousarray((g2 @ wmat.T).reshape(b, oh, ow, kh * kw * cin))
            dxp = _kernels.col2im(dcols, hp, wp, kh, kw, stride)
            gx = dxp[:, pt : pt + h, pl : pl + w, :]
            if single:
                gx = gx[0]
        if bias is None:
            return gx, gk
        return gx, gk, g2.sum(axis=0)

    return _finish("conv2d", out, inputs, back)


def maxpool2(x) -> Tensor:
    """2x2 max pooling, stride 2; ties route the gradient to the first window element."""
    x = as_tensor(x)
    single = x.data.ndim == 3
    xb = x.data[None] if single else x.data
    if xb.ndim != 4:
        raise ShapeError(f"maxpool2: expected [h,w,c] or [B,h,w,c], got {x.shape}")
    if xb.shape[1] % 2 or xb.shape[2] % 2:
        raise ShapeError(f"maxpool2: odd spatial dimension in {x.shape}")
    out, idx = _kernels.maxpool2_forward(np.ascontiguousarray(xb))

    def back(g):
        gb = np.ascontiguousarray(g[None] if single else g)
        dx = _kernels.maxpool2_backward(gb, idx)
        return (dx[0] if single else dx,)

    return _finish("maxpool2", out[0] if single else out, (x,), back)


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return _finish("relu", np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    e = np.exp(-np.abs(x.data))
    s = np.where(x.data >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _finish("sigmoid", s, (x,), lambda g: (g * s * (1.0 - s),))


def concat(inputs: Sequence) -> Tensor:
    """Join rank-1 vectors (or rank-2 batches) along the last axis, in order."""
    if not inputs:
        raise ValueError("concat: empty input list")
    ts = tuple(as_tensor(t) for t in inputs)
    ranks = {t.data.ndim for t in ts}
    if len(ranks) != 1 or ranks.pop() not in (1, 2):
        raise ShapeError(f"concat: inputs must all be rank 1 or all rank 2, got {[t.shape for t in ts]}")
    if ts[0].data.ndim == 2 and len({t.shape[0] for t in ts}) != 1:
        raise ShapeError("concat: batch sizes differ")
    widths = [t.shape[-1] for t in ts]
    splits = np.cumsum(widths)[:-1]
    out = np.concatenate([t.data for t in ts], axis=-1)
    return _finish("concat", out, ts, lambda g: tuple(np.split(g, splits, axis=-1)))


def flatten(x) -> Tensor:
    x = as_tensor(x)
    shape = x.shape
    return _finish("flatten", x.data.reshape(-1), (x,), lambda g: (g.reshape(shape),))


def flatten_batch(x) -> Tensor:
    """Collapse all axes except the leading batch axis."""
    x = as_tensor(x)
    shape = x.shape
    out = x.data.reshape(shape[0], -1)
    return _finish("flatten_batch", out, (x,), lambda g: (g.reshape(shape),))


def mse(pred, target) -> Tensor:
    """Mean of squared differences, as a scalar tensor."""
    pred, target = as_tensor(pred), as_tensor(target)
    if pred.shape != target.shape:
        raise ShapeError(f"mse: shapes differ {pred.shape} vs {target.shape}")
    diff = pred.data - target.data
    n = diff.size
    out = np.array(np.mean(diff * diff))
    return _finish("mse", out, (pred, target), lambda g: (2.0 * g * diff / n, -2.0 * g * diff / n))


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"add: shapes differ {a.shape} vs {b.shape}")
    return _finish("add", a.data + b.data, (a, b), lambda g: (g, g))


def scale(x, k: float) -> Tensor:
    x = as_tensor(x)
    k = float(k)
    return _finish("scale", x.data * k, (x,), lambda g: (g * k,))


def tsum(x) -> Tensor:
    x = as_tensor(x)
    shape = x.shape
    return _finish("sum", np.array(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, shape).copy(),))


# ------------------------------------------------------------- backward


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(t) into ``t.grad`` for every ancestor requiring grad."""
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = current_tape()
    if loss._node is None:
        if not loss.requires_grad:
            raise ValueError("loss is not on the tape and does not require grad")
        # a leaf used directly as the loss
        loss.grad = np.ones_like(loss.data) if loss.grad is None else loss.grad + 1.0
        tape.clear()
        return

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        node.output.grad = g
        for inp, gi in zip(node.inputs, node.backward_fn(g)):
            if gi is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = np.asarray(gi, dtype=np.float64)
            if inp._node is None:
                leaves[key] = inp
    for key, leaf in leaves.items():
        g = grads[key]
        leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g
    tape.clear()


# --------------------------------------------------------- serialization

PTNS_MAGIC = b"PTNS"
PTNS_VERSION = 1


def tensor_to_bytes(arr) -> bytes:
    # np.ascontiguousarray would promote a 0-d array to 1-d
    arr = np.array(arr.data if isinstance(arr, Tensor) else arr, dtype="<f8", order="C")
    header = PTNS_MAGIC + struct.pack("<HH", PTNS_VERSION, arr.ndim)
    header += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return header + arr.tobytes(order="C")


def tensor_from_bytes(buf: bytes) -> np.ndarray:
    if len(buf) < 8 or buf[:4] != PTNS_MAGIC:
        raise ValueError("not a PTNS tensor (bad magic)")
    version, rank = struct.unpack_from("<HH", buf, 4)
    if version != PTNS_VERSION:
        raise ValueError(f"unsupported PTNS version {version}")
    off = 8 + 8 * rank
    if len(buf) < off:
        raise ValueError("truncated PTNS header")
    dims = struct.unpack_from(f"<{rank}Q", buf, 8)
    count = int(np.prod(dims)) if rank else 1
    if len(buf) != off + 8 * count:
        raise ValueError(f"truncated PTNS payload: expected {8 * count} bytes, got {len(buf) - off}")
    return np.frombuffer(buf, dtype="<f8", count=count, offset=off).reshape(dims).astype(np.float64)


def save_tensor(path, arr) -> None:
    Path(path).write_bytes(tensor_to_bytes(arr))


def load_tensor(path) -> np.ndarray:
    return tensor_from_bytes(Path(path).read_bytes())
