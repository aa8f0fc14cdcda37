"""Define-by-run reverse-mode differentiation over float64 numpy arrays.

Only the operations the audio and composer models need are provided. A
:class:`Tape` records every operation executed while it is active and at least
one operand requires a gradient; :func:`backward` replays it in reverse.

Two arithmetic routes exist for contractions (``conv1d`` and ``matmul``):

* the default route hands products to BLAS, which is fast but whose rounding
  depends on operand shapes;
* inside :func:`exact_arithmetic` every output element is accumulated
  sequentially in a fixed order, so a column computed on its own is
  bit-identical to the same column computed as part of a longer sequence.
  Cached incremental generation relies on this.
"""

from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, DimensionError

_state = threading.local()


def _tape_stack() -> list:
    stack = getattr(_state, "tapes", None)
    if stack is None:
        stack = _state.tapes = []
    return stack


def _exact() -> bool:
    return getattr(_state, "exact", False)


@contextlib.contextmanager
def exact_arithmetic():
    """Use the fixed-order accumulation route for contractions in this block."""
    previous = _exact()
    _state.exact = True
    try:
        yield
    finally:
        _state.exact = previous


class Tensor:
    """A shaped float64 array with an optional gradient."""

    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, values, shape=None, requires_grad=False, name=None):
        data = np.array(values, dtype=np.float64)
        if shape is not None:
            shape = tuple(int(s) for s in shape)
            if data.size != int(np.prod(shape, dtype=np.int64)):
                raise DimensionError(f"{data.size} values cannot fill shape {shape}")
            data = data.reshape(shape)
        self.data = data
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.name = name

    @classmethod
    def wrap(cls, array: np.ndarray, requires_grad=False, name=None) -> "Tensor":
        """Build a tensor around ``array`` without copying (converted to float64 if needed)."""
        t = cls.__new__(cls)
        t.data = np.asarray(array, dtype=np.float64)
        t.grad = None
        t.requires_grad = requires_grad
        t.name = name
        return t

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def values(self) -> list:
        return self.data.ravel().tolist()

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag})"


@dataclass
class Parameter:
    """A named, optionally trainable tensor owned by a model."""

    name: str
    tensor: Tensor
    trainable: bool = True

    def __post_init__(self):
        self.tensor.requires_grad = self.trainable
        self.tensor.name = self.name

    @property
    def data(self) -> np.ndarray:
        return self.tensor.data

    @property
    def grad(self):
        return self.tensor.grad


@dataclass
class Node:
    output: Tensor
    inputs: tuple
    backward: Callable


@dataclass
class Tape:
    """Ordered record of operations; use as a context manager."""

    nodes: list = field(default_factory=list)

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()
        return False


def current_tape():
    stack = _tape_stack()
    return stack[-1] if stack else None


def _emit(data: np.ndarray, inputs: Sequence[Tensor], backward: Callable) -> Tensor:
    out = Tensor.wrap(data)
    tape = current_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.nodes.append(Node(out, tuple(inputs), backward))
    return out


def _recording(*inputs: Tensor) -> bool:
    return current_tape() is not None and any(t.requires_grad for t in inputs)


def backward(tape: Tape, loss: Tensor, params: Iterable = ()) -> None:
    """Propagate d(loss)/d(.) through ``tape`` into leaf ``.grad`` fields.

    Gradients accumulate into existing ``.grad`` arrays. Every tensor (or
    :class:`Parameter`) listed in ``params`` that the loss does not reach gets
    a zero gradient.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    produced = {id(node.output) for node in tape.nodes}
    grads = {id(loss): np.ones_like(loss.data)}
    leaves = {}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        parts = node.backward(g)
        for inp, part in zip(node.inputs, parts):
            if part is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + part
            else:
                grads[key] = part
            if key not in produced:
                leaves[key] = inp
    if id(loss) not in produced and loss.requires_grad:
        leaves[id(loss)] = loss
    for key, leaf in leaves.items():
        g = grads[key]
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for {leaf.name or leaf.shape}")
        leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g
    for p in params:
        t = p.tensor if isinstance(p, Parameter) else p
        if t.grad is None:
            t.grad = np.zeros_like(t.data)


# ---------------------------------------------------------------- arithmetic


def exact_matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """``a @ b`` with each element summed left to right over the inner axis.

    The result for any column of ``b`` does not depend on the other columns.
    """
    m, k = a.shape
    k2, n = b.shape
    if k != k2:
        raise DimensionError(f"inner dimensions differ: {a.shape} @ {b.shape}")
    out = np.empty((m, n))
    if n == 0:
        return out
    if k == 0:
        out[:] = 0.0
        return out
    chunk = max(1, (1 << 22) // max(1, m * k))
    for start in range(0, n, chunk):
        stop = min(n, start + chunk)
        prod = a[:, :, None] * b[None, :, start:stop]
        out[:, start:stop] = np.cumsum(prod, axis=1)[:, -1, :]
    return out


def sigmoid_array(a: np.ndarray) -> np.ndarray:
    """Overflow-free logistic function, elementwise."""
    a = np.asarray(a, dtype=np.float64)
    out = np.empty_like(a)
    pos = a >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
    e = np.exp(a[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def relu_array(a: np.ndarray) -> np.ndarray:
    return np.where(a > 0, a, 0.0)


_POINTWISE = {
    "tanh": (np.tanh, lambda x, y: 1.0 - y * y),
    "sigmoid": (sigmoid_array, lambda x, y: y * (1.0 - y)),
    "relu": (relu_array, lambda x, y: (x > 0).astype(np.float64)),
}


def pointwise(name: str, x: Tensor) -> Tensor:
    """Apply ``tanh``, ``sigmoid`` or ``relu`` elementwise."""
    try:
        fn, deriv = _POINTWISE[name]
    except KeyError:
        raise ContractError(f"unknown pointwise function {name!r}") from None
    y = fn(x.data)

    def back(g):
        return (g * deriv(x.data, y),)

    return _emit(y, (x,), back)


def tanh(x: Tensor) -> Tensor:
    return pointwise("tanh", x)


def sigmoid(x: Tensor) -> Tensor:
    return pointwise("sigmoid", x)


def relu(x: Tensor) -> Tensor:
    return pointwise("relu", x)


def binary(name: str, a: Tensor, b: Tensor) -> Tensor:
    """Elementwise ``add`` or ``mul`` of two identically shaped tensors."""
    if a.shape != b.shape:
        raise DimensionError(f"{name}: shapes {a.shape} and {b.shape} differ")
    if name == "add":
        return _emit(a.data + b.data, (a, b), lambda g: (g, g))
    if name == "mul":
        return _emit(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))
    raise ContractError(f"unknown binary operation {name!r}")


def add(a: Tensor, b: Tensor) -> Tensor:
    return binary("add", a, b)


def mul(a: Tensor, b: Tensor) -> Tensor:
    return binary("mul", a, b)


def scale(x: Tensor, factor: float) -> Tensor:
    factor = float(factor)
    return _emit(x.data * factor, (x,), lambda g: (g * factor,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of ``[M x K]`` and ``[K x N]``."""
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    out = exact_matmul(a.data, b.data) if _exact() else a.data @ b.data

    def back(g):
        ga = g @ b.data.T if a.requires_grad else None
        gb = a.data.T @ g if b.requires_grad else None
        return ga, gb

    return _emit(out, (a, b), back)


def total(x: Tensor) -> Tensor:
    """Sum of all elements as a scalar tensor."""
    return _emit(np.array(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, x.shape).copy(),))


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    out = x.data.reshape(shape)
    return _emit(out, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    out = np.ascontiguousarray(x.data.transpose(axes))
    return _emit(out, (x,), lambda g: (g.transpose(inverse),))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = list(tensors)
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def back(g):
        return tuple(np.split(g, sizes, axis=axis))

    return _emit(out, tensors, back)


def slice_last(x: Tensor, start: int, stop: int) -> Tensor:
    """Select ``x[..., start:stop]``."""
    out = x.data[..., start:stop].copy()

    def back(g):
        full = np.zeros_like(x.data)
        full[..., start:stop] = g
        return (full,)

    return _emit(out, (x,), back)


# -------------------------------------------------------------- convolution


def _conv_exact(X, K, dilation, left, right):
    batch, c_in, length = X.shape
    c_out, _, width = K.shape
    Xp = np.pad(X, ((0, 0), (0, 0), (left, right)))
    flat = K.transpose(0, 2, 1).reshape(c_out, width * c_in)
    out = np.empty((batch, c_out, length))
    for b in range(batch):
        cols = np.concatenate(
            [Xp[b, :, k * dilation:k * dilation + length] for k in range(width)], axis=0
        )
        out[b] = exact_matmul(flat, cols)
    return out


def conv1d(x: Tensor, kernel: Tensor, dilation: int = 1, causal: bool = True,
           bias: Tensor | None = None) -> Tensor:
    """Dilated 1-D convolution over the last axis.

    ``x`` is ``[C_in x T]`` (or ``[B x C_in x T]``), ``kernel`` is
    ``[C_out x C_in x W]``. Causal mode pads ``(W-1)*dilation`` zeros on the
    left so the output keeps length ``T`` and column ``t`` sees only inputs
    ``t-(W-1)*dilation .. t``; tap ``W-1`` reads the current column.
    """
    if dilation < 1:
        raise ContractError(f"dilation must be >= 1, got {dilation}")
    xd = x.data
    if xd.ndim not in (2, 3) or kernel.data.ndim != 3:
        raise DimensionError(f"conv1d: bad ranks {x.shape} / {kernel.shape}")
    squeeze = xd.ndim == 2
    X = xd[None] if squeeze else xd
    batch, c_in, length = X.shape
    K = kernel.data
    c_out, k_in, width = K.shape
    if k_in != c_in:
        raise DimensionError(f"conv1d: kernel expects {k_in} input channels, input has {c_in}")
    if bias is not None and bias.shape != (c_out,):
        raise DimensionError(f"conv1d: bias shape {bias.shape} != ({c_out},)")
    span = (width - 1) * dilation
    left = span if causal else span // 2
    right = span - left

    rows = None
    if _exact():
        out = _conv_exact(X, K, dilation, left, right)
    else:
        if not x.requires_grad:
            # zero input rows contribute nothing; skipping them is exact up to the sign of zero
            active = np.flatnonzero(np.any(X != 0, axis=(0, 2)))
            if active.size < c_in:
                rows = active
        Xs = X if rows is None else X[:, rows]
        taps = np.ascontiguousarray((K if rows is None else K[:, rows]).transpose(2, 0, 1))
        Xp = np.pad(Xs, ((0, 0), (0, 0), (left, right))) if span else Xs
        out = np.matmul(taps[0], Xp[:, :, :length])
        for k in range(1, width):
            out += np.matmul(taps[k], Xp[:, :, k * dilation:k * dilation + length])
    if bias is not None:
        out += bias.data[:, None]

    def back(g):
        G = g[None] if squeeze else g
        gx = gk = gb = None
        if kernel.requires_grad:
            Xs = X if rows is None else X[:, rows]
            Xp = np.pad(Xs, ((0, 0), (0, 0), (left, right))) if span else Xs
            part = np.empty((c_out, Xs.shape[1], width))
            for k in range(width):
                part[:, :, k] = np.tensordot(
                    G, Xp[:, :, k * dilation:k * dilation + length], axes=([0, 2], [0, 2]))
            if rows is None:
                gk = part
            else:
                gk = np.zeros_like(K)
                gk[:, rows] = part
        if x.requires_grad:
            gxp = np.zeros((batch, c_in, length + span))
            taps_t = np.ascontiguousarray(K.transpose(2, 1, 0))
            for k in range(width):
                gxp[:, :, k * dilation:k * dilation + length] += np.matmul(taps_t[k], G)
            gx = gxp[:, :, left:left + length]
            if squeeze:
                gx = gx[0]
        if bias is not None and bias.requires_grad:
            gb = G.sum(axis=(0, 2))
        return gx, gk, gb

    inputs = (x, kernel) if bias is None else (x, kernel, bias)
    return _emit(out[0] if squeeze else out, inputs, back)


# ------------------------------------------------------------------- losses


def softmax_xent(logits: Tensor, targets, mask=None) -> Tensor:
    """Mean negative log-likelihood of integer ``targets`` under column softmaxes.

    ``logits`` is ``[Q x T]`` (or ``[B x Q x T]``) and ``targets`` holds one
    class index per column. ``mask`` (boolean, shaped like ``targets``)
    selects which columns count; the mean is over selected columns.
    """
    L = logits.data
    squeeze = L.ndim == 2
    L3 = L[None] if squeeze else L
    tg = np.asarray(targets)
    tg2 = tg[None] if squeeze else tg
    batch, q, length = L3.shape
    if tg2.shape != (batch, length):
        raise DimensionError(f"targets shape {tg.shape} does not match logits {L.shape}")
    if not np.issubdtype(tg2.dtype, np.integer):
        if not np.all(tg2 == np.round(tg2)):
            raise IndexError("targets must be integers")
        tg2 = tg2.astype(np.int64)
    if tg2.size and (tg2.min() < 0 or tg2.max() >= q):
        raise IndexError(f"target out of range [0, {q})")
    m2 = np.ones((batch, length), dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if squeeze and mask is not None:
        m2 = m2[None]
    if m2.shape != (batch, length):
        raise DimensionError("mask shape does not match targets")
    count = int(m2.sum())
    if count == 0:
        raise ContractError("softmax_xent: no positions selected")

    z = L3 - L3.max(axis=1, keepdims=True)
    ez = np.exp(z)
    se = ez.sum(axis=1, keepdims=True)
    bi, ti = np.nonzero(m2)
    picked = z[bi, tg2[bi, ti], ti] - np.log(se[bi, 0, ti])
    loss = -picked.sum() / count

    def back(g):
        grad = ez / se
        grad[bi, tg2[bi, ti], ti] -= 1.0
        grad *= m2[:, None, :] * (float(g) / count)
        return (grad[0] if squeeze else grad,)

    return _emit(np.array(loss), (logits,), back)


def sigmoid_bce(logits: Tensor, targets, weight: float | None = None) -> Tensor:
    """Summed binary cross-entropy of sigmoid(logits) vs 0/1 targets, times ``weight``.

    ``weight`` defaults to ``1/size`` (a plain mean).
    """
    t = np.asarray(targets, dtype=np.float64)
    if t.shape != logits.shape:
        raise DimensionError(f"targets shape {t.shape} != logits {logits.shape}")
    w = 1.0 / logits.data.size if weight is None else float(weight)
    a = logits.data
    per = np.maximum(a, 0.0) - a * t + np.log1p(np.exp(-np.abs(a)))
    loss = per.sum() * w

    def back(g):
        return ((sigmoid_array(a) - t) * (float(g) * w),)

    return _emit(np.array(loss), (logits,), back)


# --------------------------------------------------------------------- LSTM


def lstm(x: Tensor, weight: Tensor, bias: Tensor, h0=None, c0=None) -> Tensor:
    """Run an LSTM over the first axis of ``x`` (``[S x B x I]``).

    ``weight`` is ``[(I+H) x 4H]`` acting on ``concat(input, hidden)``; the
    gate blocks are input, forget, output, candidate. Returns all hidden
    states, ``[S x B x H]``. ``h0``/``c0`` are constant initial states.
    """
    X = x.data
    if X.ndim != 3:
        raise DimensionError(f"lstm expects [S x B x I], got {x.shape}")
    steps, batch, n_in = X.shape
    W = weight.data
    hidden = W.shape[1] // 4
    if W.shape != (n_in + hidden, 4 * hidden) or bias.shape != (4 * hidden,):
        raise DimensionError(f"lstm: weight {W.shape} / bias {bias.shape} do not fit input {n_in}")
    Wx, Wh = W[:n_in], W[n_in:]
    h = np.zeros((batch, hidden)) if h0 is None else np.array(h0, dtype=np.float64)
    c = np.zeros((batch, hidden)) if c0 is None else np.array(c0, dtype=np.float64)
    zx = (X.reshape(steps * batch, n_in) @ Wx).reshape(steps, batch, 4 * hidden) + bias.data
    gates = np.empty((steps, batch, 4 * hidden))
    cs = np.empty((steps + 1, batch, hidden))
    hs = np.empty((steps + 1, batch, hidden))
    tc = np.empty((steps, batch, hidden))
    cs[0], hs[0] = c, h
    H = hidden
    for s in range(steps):
        z = zx[s] + hs[s] @ Wh
        gt = gates[s]
        gt[:, :3 * H] = sigmoid_array(z[:, :3 * H])
        gt[:, 3 * H:] = np.tanh(z[:, 3 * H:])
        cs[s + 1] = gt[:, H:2 * H] * cs[s] + gt[:, :H] * gt[:, 3 * H:]
        tc[s] = np.tanh(cs[s + 1])
        hs[s + 1] = gt[:, 2 * H:3 * H] * tc[s]

    def back(gout):
        dz = np.empty((steps, batch, 4 * H))
        dh_next = np.zeros((batch, H))
        dc_next = np.zeros((batch, H))
        gWh = np.zeros_like(Wh)
        for s in range(steps - 1, -1, -1):
            gt = gates[s]
            i, f, o, cand = gt[:, :H], gt[:, H:2 * H], gt[:, 2 * H:3 * H], gt[:, 3 * H:]
            dh = gout[s] + dh_next
            dc = dh * o * (1.0 - tc[s] ** 2) + dc_next
            d = dz[s]
            d[:, :H] = dc * cand * i * (1.0 - i)
            d[:, H:2 * H] = dc * cs[s] * f * (1.0 - f)
            d[:, 2 * H:3 * H] = dh * tc[s] * o * (1.0 - o)
            d[:, 3 * H:] = dc * i * (1.0 - cand ** 2)
            gWh += hs[s].T @ d
            dh_next = d @ Wh.T
            dc_next = dc * f
        flat = dz.reshape(steps * batch, 4 * H)
        gx = (flat @ Wx.T).reshape(X.shape) if x.requires_grad else None
        gW = np.concatenate([X.reshape(steps * batch, n_in).T @ flat, gWh], axis=0)
        gb = flat.sum(axis=0)
        return gx, gW, gb

    return _emit(hs[1:].copy(), (x, weight, bias), back)


# --------------------------------------------------------------- utilities


def numerical_gradient(fn: Callable[[], float], array: np.ndarray, eps: float = 1e-4) -> np.ndarray:
    """Central finite differences of scalar ``fn()`` w.r.t. ``array`` (perturbed in place)."""
    grad = np.zeros_like(array)
    flat = array.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        up = fn()
        flat[i] = orig - eps
        down = fn()
        flat[i] = orig
        gflat[i] = (up - down) / (2 * eps)
    return grad


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    """``|a-b| / max(|a|, |b|)`` in the Euclidean norm; 0 when both vanish."""
    denom = max(np.linalg.norm(a), np.linalg.norm(b))
    if denom == 0:
        return 0.0
    return float(np.linalg.norm(a - b) / denom)
