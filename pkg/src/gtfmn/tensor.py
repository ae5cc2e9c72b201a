"""Minimal N-d tensor with tape-based reverse-mode autodiff.

Every differentiable operation appends a record to the active :class:`Tape`
of the calling thread. :func:`backward` replays the tape in reverse to
populate ``.grad`` on the leaves that require it.

Activations use N x C x H x W layout, convolution weights O x I x kH x kW.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Iterator, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

_FLOAT_DTYPES = (np.float32, np.float64)

BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tensor:
    """N-dimensional float array with an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad", "_tape", "name", "__weakref__")

    def __init__(self, data, dtype=None, requires_grad: bool = False, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is None:
            dtype = arr.dtype if arr.dtype in _FLOAT_DTYPES else np.float32
        dtype = np.dtype(dtype)
        if dtype not in _FLOAT_DTYPES:
            raise TypeError(f"unsupported dtype {dtype}; expected float32 or float64")
        self.data: np.ndarray = np.ascontiguousarray(arr, dtype=dtype)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        # set only on outputs recorded on a tape; leaves keep None
        self._tape: Tape | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._tape is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_item(self.shape)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # operator sugar; the named functions below are the real API
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return scale(self, -1.0)


def _raise_item(shape):
    raise ValueError(f"item() needs a single-element tensor, got shape {shape}")


# ---------------------------------------------------------------------------
# tape


@dataclass
class _Record:
    out: Tensor
    inputs: tuple[Tensor, ...]
    backward: BackwardFn
    op: str


class Tape:
    """Ordered log of executed operations, replayed in reverse by :func:`backward`.

    Use as a context manager to scope recording::

        with Tape() as tape:
            loss = l1_loss(model(x), y)
        tape.backward(loss)

    Outside any ``with Tape()`` block, operations are recorded on a per-thread
    default tape which is replaced by a fresh one after each backward pass.
    """

    def __init__(self):
        self.records: list[_Record] = []
        self.consumed = False

    def __len__(self) -> int:
        return len(self.records)

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        stack.remove(self)

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], backward_fn: BackwardFn, op: str) -> None:
        if self.consumed:
            raise RuntimeError("tape already consumed by backward(); call reset() before recording again")
        out._tape = self
        out.requires_grad = True
        self.records.append(_Record(out, inputs, backward_fn, op))

    def reset(self) -> None:
        for rec in self.records:
            rec.out._tape = None
        self.records = []
        self.consumed = False

    def backward(self, loss: Tensor) -> None:
        if loss.size != 1:
            raise ValueError(f"backward() needs a scalar loss, got shape {loss.shape}")
        if self.consumed:
            raise RuntimeError("backward() called twice on the same tape without reset()")
        if loss._tape is not self:
            raise RuntimeError("loss was not produced by an operation recorded on this tape")

        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        leaves: dict[int, Tensor] = {}
        for rec in reversed(self.records):
            for inp in rec.inputs:
                if inp.requires_grad and inp._tape is None:
                    leaves[id(inp)] = inp
            g_out = grads.pop(id(rec.out), None)
            if g_out is None:
                continue
            in_grads = rec.backward(g_out)
            for inp, g in zip(rec.inputs, in_grads):
                if g is None or not inp.requires_grad:
                    continue
                if g.shape != inp.shape:
                    raise AssertionError(f"{rec.op}: grad shape {g.shape} != input shape {inp.shape}")
                if inp._tape is None:
                    inp.grad = g.astype(inp.dtype, copy=True) if inp.grad is None else inp.grad + g
                else:
                    key = id(inp)
                    grads[key] = g if key not in grads else grads[key] + g
        for leaf in leaves.values():
            if leaf.grad is None:
                leaf.grad = np.zeros_like(leaf.data)

        for rec in self.records:
            rec.out._tape = None
        self.records = []
        self.consumed = True
        if _default_tape_or_none() is self:
            _state.default = Tape()


_state = threading.local()


def _tape_stack() -> list[Tape]:
    stack = getattr(_state, "stack", None)
    if stack is None:
        stack = _state.stack = []
    return stack


def _default_tape_or_none() -> Tape | None:
    return getattr(_state, "default", None)


def current_tape() -> Tape:
    stack = _tape_stack()
    if stack:
        return stack[-1]
    tape = _default_tape_or_none()
    if tape is None:
        tape = _state.default = Tape()
    return tape


def grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextmanager
def no_grad() -> Iterator[None]:
    """Disable recording on this thread (inference)."""
    prev = grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` of every ``requires_grad`` leaf reachable from ``loss``."""
    if loss._tape is None:
        if loss.size != 1:
            raise ValueError(f"backward() needs a scalar loss, got shape {loss.shape}")
        raise RuntimeError(
            "loss has no recorded history (backward already ran on its tape, or it is a leaf)"
        )
    loss._tape.backward(loss)


def apply_op(op: str, out_data: np.ndarray, inputs: Sequence[Tensor], backward_fn: BackwardFn) -> Tensor:
    """Wrap ``out_data`` in a Tensor and record it when any input needs a gradient.

    ``backward_fn`` maps the output gradient to one gradient (or None) per input.
    """
    inputs = tuple(inputs)
    out = Tensor(out_data, dtype=out_data.dtype)
    if grad_enabled() and any(t.requires_grad for t in inputs):
        current_tape().record(out, inputs, backward_fn, op)
    return out


def _as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype or np.float32))


# ---------------------------------------------------------------------------
# elementwise


def _check_broadcast(a: tuple[int, ...], b: tuple[int, ...]) -> tuple[int, ...]:
    if a == b:
        return a
    if len(a) != len(b):
        raise ValueError(f"cannot broadcast shapes {a} and {b}: ranks differ")
    out = []
    for da, db in zip(a, b):
        if da == db or db == 1:
            out.append(da)
        elif da == 1:
            out.append(db)
        else:
            raise ValueError(f"cannot broadcast shapes {a} and {b}")
    return tuple(out)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    return g.sum(axis=axes, keepdims=True)


def _binary_operands(x, y) -> tuple[Tensor, Tensor]:
    if not isinstance(x, Tensor):
        raise TypeError("left operand must be a Tensor")
    if not isinstance(y, Tensor):
        y = Tensor(np.full(x.shape, y, dtype=x.dtype)) if np.ndim(y) == 0 else Tensor(np.asarray(y, x.dtype))
    _check_broadcast(x.shape, y.shape)
    return x, y


def add(x: Tensor, y) -> Tensor:
    x, y = _binary_operands(x, y)
    xs, ys = x.shape, y.shape
    return apply_op("add", x.data + y.data, (x, y), lambda g: (_unbroadcast(g, xs), _unbroadcast(g, ys)))


def sub(x: Tensor, y) -> Tensor:
    x, y = _binary_operands(x, y)
    xs, ys = x.shape, y.shape
    return apply_op("sub", x.data - y.data, (x, y), lambda g: (_unbroadcast(g, xs), -_unbroadcast(g, ys)))


def mul(x: Tensor, y) -> Tensor:
    if not isinstance(y, Tensor) and np.ndim(y) == 0:
        return scale(x, float(y))
    x, y = _binary_operands(x, y)
    xd, yd = x.data, y.data
    return apply_op(
        "mul", xd * yd, (x, y),
        lambda g: (_unbroadcast(g * yd, xd.shape), _unbroadcast(g * xd, yd.shape)),
    )


def div(x: Tensor, y) -> Tensor:
    if not isinstance(y, Tensor) and np.ndim(y) == 0:
        return scale(x, 1.0 / float(y))
    x, y = _binary_operands(x, y)
    xd, yd = x.data, y.data
    out = xd / yd

    def grad(g):
        gx = g / yd
        return _unbroadcast(gx, xd.shape), _unbroadcast(-gx * out, yd.shape)

    return apply_op("div", out, (x, y), grad)


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return apply_op("scale", x.data * x.dtype.type(c), (x,), lambda g: (g * c,))


def add_scalar(x: Tensor, c: float) -> Tensor:
    return apply_op("add_scalar", x.data + x.dtype.type(c), (x,), lambda g: (g,))


def sigmoid(x: Tensor) -> Tensor:
    # split by sign so exp never overflows
    d = x.data
    e = np.exp(-np.abs(d))
    out = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(d.dtype)
    return apply_op("sigmoid", out, (x,), lambda g: (g * out * (1.0 - out),))


def leaky_relu(x: Tensor, negative_slope: float = 0.2) -> Tensor:
    d = x.data
    pos = d > 0
    slope = d.dtype.type(negative_slope)
    out = np.where(pos, d, d * slope)
    return apply_op("leaky_relu", out, (x,), lambda g: (np.where(pos, g, g * slope),))


def clamp(x: Tensor, lo: float, hi: float) -> Tensor:
    if lo > hi:
        raise ValueError(f"clamp bounds inverted: lo={lo} > hi={hi}")
    d = x.data
    inside = (d >= lo) & (d <= hi)
    return apply_op("clamp", np.clip(d, lo, hi), (x,), lambda g: (np.where(inside, g, 0),))


def sum(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    shape = x.shape
    return apply_op("sum", np.asarray(x.data.sum(), dtype=x.dtype), (x,), lambda g: (np.broadcast_to(g, shape).copy(),))


def mean(x: Tensor) -> Tensor:
    shape, n = x.shape, x.size
    return apply_op(
        "mean", np.asarray(x.data.mean(), dtype=x.dtype), (x,),
        lambda g: (np.full(shape, g / n, dtype=g.dtype),),
    )


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    old = x.shape
    return apply_op("reshape", x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


# ---------------------------------------------------------------------------
# spatial ops


def adaptive_avg_pool_global(x: Tensor) -> Tensor:
    """Mean over each H x W plane: N x C x H x W -> N x C x 1 x 1."""
    if x.ndim != 4:
        raise ValueError(f"expected N x C x H x W input, got shape {x.shape}")
    h, w = x.shape[2:]
    if h == 0 or w == 0:
        raise ValueError(f"empty spatial extent {h}x{w}")
    shape = x.shape
    inv = 1.0 / (h * w)
    return apply_op(
        "avg_pool_global", x.data.mean(axis=(2, 3), keepdims=True), (x,),
        lambda g: (np.broadcast_to(g * inv, shape).astype(g.dtype),),
    )


spatial_mean = adaptive_avg_pool_global


def channel_norm(x: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize across channels at every (n, h, w) to zero mean, unit (biased) variance."""
    if x.ndim != 4:
        raise ValueError(f"expected N x C x H x W input, got shape {x.shape}")
    d = x.data
    mu = d.mean(axis=1, keepdims=True)
    centered = d - mu
    var = (centered * centered).mean(axis=1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    y = centered * inv_std

    def grad(g):
        gm = g.mean(axis=1, keepdims=True)
        gym = (g * y).mean(axis=1, keepdims=True)
        return (inv_std * (g - gm - y * gym),)

    return apply_op("channel_norm", y, (x,), grad)


def pixel_shuffle(x: Tensor, s: int) -> Tensor:
    """N x (C s^2) x H x W -> N x C x sH x sW with out[n,c,h*s+i,w*s+j] = in[n,c*s*s+i*s+j,h,w]."""
    n, cs2, h, w = _check4(x)
    if s < 1:
        raise ValueError(f"scale must be positive, got {s}")
    if cs2 % (s * s):
        raise ValueError(f"channel count {cs2} not divisible by s^2={s * s}")
    c = cs2 // (s * s)
    out = x.data.reshape(n, c, s, s, h, w).transpose(0, 1, 4, 2, 5, 3).reshape(n, c, h * s, w * s)
    return apply_op("pixel_shuffle", out, (x,), lambda g: (_unshuffle(g, s),))


def pixel_unshuffle(x: Tensor, s: int) -> Tensor:
    """Inverse of :func:`pixel_shuffle`."""
    _, _, h, w = _check4(x)
    if s < 1:
        raise ValueError(f"scale must be positive, got {s}")
    if h % s or w % s:
        raise ValueError(f"spatial dims {h}x{w} not divisible by s={s}")
    return apply_op("pixel_unshuffle", _unshuffle(x.data, s), (x,), lambda g: (_shuffle(g, s),))


def _shuffle(d: np.ndarray, s: int) -> np.ndarray:
    n, cs2, h, w = d.shape
    c = cs2 // (s * s)
    return d.reshape(n, c, s, s, h, w).transpose(0, 1, 4, 2, 5, 3).reshape(n, c, h * s, w * s)


def _unshuffle(d: np.ndarray, s: int) -> np.ndarray:
    n, c, hs, ws = d.shape
    h, w = hs // s, ws // s
    return np.ascontiguousarray(d.reshape(n, c, h, s, w, s).transpose(0, 1, 3, 5, 2, 4).reshape(n, c * s * s, h, w))


def _check4(x: Tensor) -> tuple[int, int, int, int]:
    if x.ndim != 4:
        raise ValueError(f"expected N x C x H x W tensor, got shape {x.shape}")
    return x.shape  # type: ignore[return-value]


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Tensor | None = None,
    stride: int = 1,
    padding: int = 0,
    groups: int = 1,
) -> Tensor:
    """2-D cross-correlation with zero padding.

    Dense convolutions go through im2col + tensordot; grouped ones loop over
    kernel offsets, which is cheap for the small depthwise kernels used here.
    """
    n, cin, h, w = _check4(x)
    if weight.ndim != 4:
        raise ValueError(f"weight must be O x I x kH x kW, got shape {weight.shape}")
    cout, cin_g, kh, kw = weight.shape
    if not isinstance(stride, (int, np.integer)) or stride < 1:
        raise ValueError(f"stride must be a positive int, got {stride!r}")
    if padding < 0:
        raise ValueError(f"padding must be non-negative, got {padding}")
    if groups < 1 or cin % groups or cout % groups:
        raise ValueError(f"groups={groups} must divide in_channels={cin} and out_channels={cout}")
    if cin_g * groups != cin:
        raise ValueError(
            f"weight expects {cin_g * groups} input channels (groups={groups}), input has {cin}"
        )
    if bias is not None and bias.shape != (cout,):
        raise ValueError(f"bias must have shape ({cout},), got {bias.shape}")
    if h + 2 * padding < kh or w + 2 * padding < kw:
        raise ValueError(f"kernel {kh}x{kw} larger than padded input {h + 2 * padding}x{w + 2 * padding}")
    if x.dtype != weight.dtype:
        raise TypeError(f"dtype mismatch: input {x.dtype}, weight {weight.dtype}")

    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    wd = weight.data

    if groups == 1:
        cols = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
        # cols: N, Cin, Ho, Wo, kh, kw
        out = np.tensordot(cols, wd, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    else:
        cols = None
        og = cout // groups
        xg = xp.reshape(n, groups, cin_g, xp.shape[2], xp.shape[3])
        wg = wd.reshape(groups, og, cin_g, kh, kw)
        out = np.zeros((n, groups, og, ho, wo), dtype=x.dtype)
        for i in range(kh):
            for j in range(kw):
                patch = xg[:, :, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
                if cin_g == 1 and og == 1:
                    out += patch * wg[:, 0, 0, i, j].reshape(1, groups, 1, 1, 1)
                else:
                    out += np.einsum("ngchw,goc->ngohw", patch, wg[:, :, :, i, j])
        out = out.reshape(n, cout, ho, wo)
    if bias is not None:
        out = out + bias.data.reshape(1, cout, 1, 1)
    out = np.ascontiguousarray(out)

    def grad(g):
        gb = g.sum(axis=(0, 2, 3)) if bias is not None and bias.requires_grad else None
        gx = gw = None
        if groups == 1:
            if weight.requires_grad:
                gw = np.tensordot(g, cols, axes=([0, 2, 3], [0, 2, 3]))
            if x.requires_grad:
                gcols = np.tensordot(g, wd, axes=([1], [0]))  # N, Ho, Wo, Cin, kh, kw
                gxp = np.zeros_like(xp)
                for i in range(kh):
                    for j in range(kw):
                        gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += gcols[..., i, j].transpose(0, 3, 1, 2)
                gx = gxp
        else:
            og = cout // groups
            gg = g.reshape(n, groups, og, ho, wo)
            xg = xp.reshape(n, groups, cin_g, xp.shape[2], xp.shape[3])
            wg = wd.reshape(groups, og, cin_g, kh, kw)
            gwg = np.zeros_like(wg) if weight.requires_grad else None
            gxg = np.zeros_like(xg) if x.requires_grad else None
            for i in range(kh):
                for j in range(kw):
                    sl = (slice(None), slice(None), slice(None), slice(i, i + stride * ho, stride), slice(j, j + stride * wo, stride))
                    if gwg is not None:
                        gwg[:, :, :, i, j] = np.einsum("ngohw,ngchw->goc", gg, xg[sl])
                    if gxg is not None:
                        gxg[sl] += np.einsum("ngohw,goc->ngchw", gg, wg[:, :, :, i, j])
            gw = gwg.reshape(wd.shape) if gwg is not None else None
            gx = gxg.reshape(xp.shape) if gxg is not None else None
        if gx is not None and padding:
            gx = gx[:, :, padding:padding + h, padding:padding + w]
        if gx is not None:
            gx = np.ascontiguousarray(gx)
        return (gx, gw, gb) if bias is not None else (gx, gw)

    inputs = (x, weight, bias) if bias is not None else (x, weight)
    return apply_op("conv2d", out, inputs, grad)


# ---------------------------------------------------------------------------
# finite-difference oracle


def finite_difference_grad(f: Callable[[Tensor], "Tensor | float"], x: Tensor, step: float = 1e-4) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x``, one coordinate at a time.

    ``f`` is evaluated under :func:`no_grad` on perturbed float64 copies of ``x``.
    """

    def evaluate(arr: np.ndarray) -> float:
        with no_grad():
            val = f(Tensor(arr, dtype=arr.dtype))
        val = val.item() if isinstance(val, Tensor) else float(val)
        return val

    base = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    f0 = evaluate(base)
    if not np.isfinite(f0):
        raise ValueError(f"f(x) is not finite ({f0})")
    grad = np.zeros_like(base)
    flat = base.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = evaluate(base)
        flat[i] = orig - step
        fm = evaluate(base)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * step)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """max |a - n| scaled by the larger of the two gradient magnitudes."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = max(np.abs(a).max(initial=0.0), np.abs(n).max(initial=0.0), 1e-12)
    return float(np.abs(a - n).max(initial=0.0) / denom)
