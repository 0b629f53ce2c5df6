"""Reverse-mode differentiation over the closed op set used by the cell
automaton rollouts and training losses, plus Adam and per-layer gradient
normalization.

Graphs are recorded on an explicit Tape.  Ops executed while a tape is
active append one node each (op id, input refs, vjp closure over the saved
activations); `backward` replays the node list in exact reverse order once.
With no active tape the same ops run value-only, so the inference paths can
share code with training at zero recording cost.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import grid as G

_TAPE_STACK: list["Tape"] = []


class Tape:
    """Ordered op records plus the watched leaf parameters."""

    def __init__(self):
        self.nodes: list[Tensor] = []
        self.watched: list[Tensor] = []

    def __enter__(self):
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc):
        _TAPE_STACK.pop()
        return False

    def watch(self, t: "Tensor"):
        t.needs_grad = True
        if t not in self.watched:
            self.watched.append(t)
        return t


def active_tape() -> Tape | None:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


class Tensor:
    """A value in the graph.  Leaves carry data; op outputs carry a vjp
    closure mapping the output gradient to input gradients."""

    __slots__ = ("value", "inputs", "vjp", "grad", "needs_grad", "op")

    def __init__(self, value, inputs=(), vjp=None, op="leaf", needs_grad=False):
        self.value = np.asarray(value)
        self.inputs = inputs
        self.vjp = vjp
        self.grad = None
        self.needs_grad = needs_grad
        self.op = op

    @property
    def shape(self):
        return self.value.shape

    @property
    def dtype(self):
        return self.value.dtype

    def __repr__(self):
        return f"Tensor({self.op}, shape={self.value.shape}, dtype={self.value.dtype})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __getitem__(self, idx):
        return getitem(self, idx)


def param(value, tape: Tape | None = None) -> Tensor:
    """A leaf whose gradient will be populated by backward."""
    t = Tensor(np.asarray(value), needs_grad=True)
    tape = tape or active_tape()
    if tape is not None:
        tape.watch(t)
    return t


def constant(value) -> Tensor:
    return Tensor(np.asarray(value))


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.value.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _record(op, value, inputs, vjp) -> Tensor:
    tape = active_tape()
    needs = any(i is not None and i.needs_grad for i in inputs)
    if tape is None or not needs:
        return Tensor(value, op=op)
    out = Tensor(value, inputs=tuple(inputs), vjp=vjp, op=op, needs_grad=True)
    tape.nodes.append(out)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum g down to `shape` (reverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise ops


def add(a, b):
    a, b = _as_tensor(a, b if isinstance(b, Tensor) else None), _as_tensor(b, a if isinstance(a, Tensor) else None)
    val = a.value + b.value

    def vjp(g):
        return _unbroadcast(g, a.value.shape), _unbroadcast(g, b.value.shape)

    return _record("add", val, (a, b), vjp)


def sub(a, b):
    a, b = _as_tensor(a, b if isinstance(b, Tensor) else None), _as_tensor(b, a if isinstance(a, Tensor) else None)
    val = a.value - b.value

    def vjp(g):
        return _unbroadcast(g, a.value.shape), _unbroadcast(-g, b.value.shape)

    return _record("sub", val, (a, b), vjp)


def mul(a, b):
    a, b = _as_tensor(a, b if isinstance(b, Tensor) else None), _as_tensor(b, a if isinstance(a, Tensor) else None)
    av, bv = a.value, b.value
    val = av * bv

    def vjp(g):
        return _unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)

    return _record("mul", val, (a, b), vjp)


def div(a, b):
    a, b = _as_tensor(a, b if isinstance(b, Tensor) else None), _as_tensor(b, a if isinstance(a, Tensor) else None)
    av, bv = a.value, b.value
    val = av / bv

    def vjp(g):
        ga = _unbroadcast(g / bv, av.shape)
        gb = _unbroadcast(-g * av / (bv * bv), bv.shape)
        return ga, gb

    return _record("div", val, (a, b), vjp)


def relu(a):
    a = _as_tensor(a)
    mask = a.value > 0
    val = np.where(mask, a.value, a.value.dtype.type(0))

    def vjp(g):
        return (g * mask,)

    return _record("relu", val, (a,), vjp)


def absolute(a):
    a = _as_tensor(a)
    sign = np.sign(a.value)
    val = np.abs(a.value)

    def vjp(g):
        return (g * sign,)

    return _record("abs", val, (a,), vjp)


def sqrt(a):
    a = _as_tensor(a)
    val = np.sqrt(a.value)

    def vjp(g):
        return (g / (2.0 * val),)

    return _record("sqrt", val, (a,), vjp)


def clip(a, lo, hi):
    a = _as_tensor(a)
    val = np.clip(a.value, lo, hi)
    inside = (a.value > lo) & (a.value < hi)

    def vjp(g):
        return (g * inside,)

    return _record("clip", val, (a,), vjp)


def maximum(a, b):
    a, b = _as_tensor(a, b if isinstance(b, Tensor) else None), _as_tensor(b, a if isinstance(a, Tensor) else None)
    take_a = a.value >= b.value
    val = np.where(take_a, a.value, b.value)

    def vjp(g):
        return _unbroadcast(g * take_a, a.value.shape), _unbroadcast(g * ~take_a, b.value.shape)

    return _record("maximum", val, (a, b), vjp)


def minimum(a, b):
    a, b = _as_tensor(a, b if isinstance(b, Tensor) else None), _as_tensor(b, a if isinstance(a, Tensor) else None)
    take_a = a.value <= b.value
    val = np.where(take_a, a.value, b.value)

    def vjp(g):
        return _unbroadcast(g * take_a, a.value.shape), _unbroadcast(g * ~take_a, b.value.shape)

    return _record("minimum", val, (a, b), vjp)


def where(cond, a, b):
    """cond is a plain boolean array (not differentiated)."""
    cond = np.asarray(cond)
    a, b = _as_tensor(a, b if isinstance(b, Tensor) else None), _as_tensor(b, a if isinstance(a, Tensor) else None)
    val = np.where(cond, a.value, b.value)

    def vjp(g):
        return _unbroadcast(g * cond, a.value.shape), _unbroadcast(g * ~cond, b.value.shape)

    return _record("where", val, (a, b), vjp)


def stop_grad(a):
    a = _as_tensor(a)
    return Tensor(a.value, op="stop_grad")


# ---------------------------------------------------------------------------
# shape / indexing


def reshape(a, shape):
    a = _as_tensor(a)
    old = a.value.shape
    val = a.value.reshape(shape)

    def vjp(g):
        return (g.reshape(old),)

    return _record("reshape", val, (a,), vjp)


def getitem(a, idx):
    a = _as_tensor(a)
    val = a.value[idx]

    def vjp(g):
        out = np.zeros_like(a.value)
        out[idx] = g
        return (out,)

    return _record("getitem", val, (a,), vjp)


def take_rows(a, idx):
    """Gather rows of a 2-D tensor by integer index (duplicates allowed)."""
    a = _as_tensor(a)
    idx = np.asarray(idx)
    val = a.value[idx]

    def vjp(g):
        out = np.zeros_like(a.value)
        np.add.at(out, idx, g)
        return (out,)

    return _record("take_rows", val, (a,), vjp)


def concat(parts, axis=-1):
    parts = [_as_tensor(p) for p in parts]
    val = np.concatenate([p.value for p in parts], axis=axis)
    sizes = [p.value.shape[axis] for p in parts]

    def vjp(g):
        return tuple(np.ascontiguousarray(piece) for piece in np.split(g, np.cumsum(sizes)[:-1], axis=axis))

    return _record("concat", val, tuple(parts), vjp)


# ---------------------------------------------------------------------------
# reductions


def tsum(a, axis=None, keepdims=False):
    a = _as_tensor(a)
    val = a.value.sum(axis=axis, keepdims=keepdims)
    shape = a.value.shape

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        g2 = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(g2, shape).copy(),)

    return _record("sum", val, (a,), vjp)


def tmean(a, axis=None, keepdims=False):
    a = _as_tensor(a)
    if axis is None:
        n = a.value.size
    elif isinstance(axis, tuple):
        n = int(np.prod([a.value.shape[ax] for ax in axis]))
    else:
        n = a.value.shape[axis]
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def amax(a, axis):
    """Max along one axis; gradient routes to the first argmax."""
    a = _as_tensor(a)
    val = a.value.max(axis=axis)
    arg = a.value.argmax(axis=axis)

    def vjp(g):
        out = np.zeros_like(a.value)
        np.put_along_axis(out, np.expand_dims(arg, axis), np.expand_dims(g, axis), axis)
        return (out,)

    return _record("amax", val, (a,), vjp)


def amin(a, axis):
    a = _as_tensor(a)
    val = a.value.min(axis=axis)
    arg = a.value.argmin(axis=axis)

    def vjp(g):
        out = np.zeros_like(a.value)
        np.put_along_axis(out, np.expand_dims(arg, axis), np.expand_dims(g, axis), axis)
        return (out,)

    return _record("amin", val, (a,), vjp)


# ---------------------------------------------------------------------------
# linear algebra / grid ops


def matmul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    av, bv = a.value, b.value
    val = av @ bv

    def vjp(g):
        return g @ bv.T, av.T @ g

    return _record("matmul", val, (a, b), vjp)


def conv3x3(a, kernel: np.ndarray, pad: G.PaddingMode):
    """Depthwise 3x3 convolution with a frozen kernel."""
    a = _as_tensor(a)
    k = np.asarray(kernel, dtype=a.value.dtype)
    val = G.conv3x3_depthwise(a.value, k, pad)

    def vjp(g):
        return (G.conv3x3_adjoint(g, k, pad),)

    return _record("conv3x3", val, (a,), vjp)


def unfold3x3(a, pad: G.PaddingMode):
    """Stack the 9 shifted neighbour slices: (..., H, W, C) -> (..., H, W, 9C).

    Tap order is row-major over the 3x3 window; combined with a matmul this
    expresses a dense 3x3 convolution through existing ops.
    """
    a = _as_tensor(a)
    h, w = a.value.shape[-3], a.value.shape[-2]
    p = G.pad1(a.value, pad)
    taps = [p[..., dy:dy + h, dx:dx + w, :] for dy in range(3) for dx in range(3)]
    val = np.concatenate(taps, axis=-1)
    c = a.value.shape[-1]

    def vjp(g):
        dp = np.zeros_like(p)
        for n, (dy, dx) in enumerate((dy, dx) for dy in range(3) for dx in range(3)):
            dp[..., dy:dy + h, dx:dx + w, :] += g[..., n * c:(n + 1) * c]
        return (G.fold_pad(dp, pad),)

    return _record("unfold3x3", val, (a,), vjp)


def resize(a, out_h: int, out_w: int):
    a = _as_tensor(a)
    in_h, in_w = a.value.shape[-3], a.value.shape[-2]
    val = G.bilinear_resize(a.value, out_h, out_w)

    def vjp(g):
        return (G.bilinear_resize_adjoint(g, in_h, in_w),)

    return _record("resize", val, (a,), vjp)


# ---------------------------------------------------------------------------
# backward


def backward(tape: Tape, loss: Tensor) -> None:
    """Populate .grad on every watched leaf of the tape.

    Saved activations are released as soon as their node has been visited,
    keeping peak memory at roughly the live frontier of the reverse sweep.
    """
    if loss.value.size != 1:
        raise ValueError(f"loss must be scalar, got shape {loss.value.shape}")
    for leaf in tape.watched:
        leaf.grad = None
    loss.grad = np.ones_like(loss.value)
    for node in reversed(tape.nodes):
        g = node.grad
        if g is None or node.vjp is None:
            node.grad = None
            node.vjp = None
            node.inputs = ()
            continue
        grads = node.vjp(g)
        for inp, gi in zip(node.inputs, grads):
            if inp is None or gi is None or not inp.needs_grad:
                continue
            if inp.grad is None:
                inp.grad = np.asarray(gi)
            else:
                inp.grad = inp.grad + gi
        node.grad = None
        node.vjp = None
        node.inputs = ()
    for leaf in tape.watched:
        if leaf.grad is None:
            leaf.grad = np.zeros_like(leaf.value)


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    """Per-parameter first/second moment buffers plus the step counter."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState) -> dict:
    """Standard Adam update with bias correction; params updated in place."""
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape} for {name}")
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m, v = state.m[name], state.v[name]
        m += (1.0 - b1) * (g - m)
        v += (1.0 - b2) * (g * g - v)
        mhat = m / (1.0 - b1 ** state.t)
        vhat = v / (1.0 - b2 ** state.t)
        p -= (state.lr * mhat / (np.sqrt(vhat) + state.eps)).astype(p.dtype)
    return params


def normalize_gradients(grads: dict) -> dict:
    """Scale each layer's gradient to unit L2 norm; zero layers stay zero."""
    out = {}
    for name, g in grads.items():
        n = float(np.linalg.norm(g.astype(np.float64)))
        out[name] = g if n == 0.0 else (g / g.dtype.type(n))
    return out
