"""Dense NHWC tensors with tape-based reverse-mode differentiation.

Every op works on rank-4 ``Tensor`` values laid out as (batch, height,
width, channels) in float64.  Learnable weights live in ``Param`` objects,
which may have any shape (matrices, conv kernels, bias vectors).

Gradients are only tracked while a ``Tape`` is active::

    with Tape() as tape:
        loss = bce_loss(linear(gap(x), w, b), targets)
    tape.backward(loss)       # adds into w.grad and b.grad

Outside a tape, ops just compute values.
"""

from __future__ import annotations

import math
import threading
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from casnet.errors import NearKinkError, NonFiniteError, ShapeError

__all__ = [
    "Tensor",
    "Param",
    "Tape",
    "gap",
    "linear",
    "relu",
    "sigmoid",
    "conv2d",
    "concat_channels",
    "slice_channels",
    "channel_stats",
    "broadcast_mul",
    "add",
    "scale",
    "total",
    "param_tensor",
    "bce_loss",
    "grad_check",
    "zero_grads",
]


class Tensor:
    """Immutable rank-4 float64 array.

    ``tracked`` is set on op outputs that depend on a ``Param`` under an
    active tape; untracked inputs (e.g. images) get no gradient computed.
    """

    __slots__ = ("data", "tracked", "_cols")

    def __init__(self, data):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim != 4:
            raise ShapeError(f"Tensor must be rank 4 (N,H,W,C), got shape {arr.shape}")
        self.data = arr
        self.tracked = False
        self._cols = None

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return self.data.shape

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, shape is {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        return f"Tensor(shape={self.shape})"


class Param:
    """Learnable array with an accumulated gradient of the same shape."""

    __slots__ = ("value", "grad", "name")

    def __init__(self, value, name: str = ""):
        self.value = np.array(value, dtype=np.float64)
        self.grad = np.zeros_like(self.value)
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    @property
    def size(self) -> int:
        return self.value.size

    def zero_grad(self):
        self.grad[...] = 0.0

    def __repr__(self):
        return f"Param({self.name!r}, shape={self.value.shape})"


def zero_grads(params: Iterable[Param]):
    for p in params:
        p.zero_grad()


_local = threading.local()


def _active_tape() -> "Tape | None":
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


class Tape:
    """Ordered record of executed ops for one backward pass.

    ``check_finite`` raises ``NonFiniteError`` naming the first op whose
    output contains NaN/Inf.  ``track_kinks`` keeps the smallest distance
    of any ReLU input to 0 and of any channel max to its runner-up, which
    ``grad_check`` uses to reject evaluation points near non-smooth spots.
    """

    def __init__(self, check_finite: bool = False, track_kinks: bool = False):
        self.records: list[tuple[str, Tensor, tuple, Callable]] = []
        self.check_finite = check_finite
        self.track_kinks = track_kinks
        self.kink_margin = math.inf

    def __enter__(self) -> "Tape":
        if not hasattr(_local, "stack"):
            _local.stack = []
        _local.stack.append(self)
        return self

    def __exit__(self, *exc):
        _local.stack.pop()
        return False

    def record(self, name: str, out: Tensor, inputs: tuple, backward: Callable):
        if self.check_finite and not np.isfinite(out.data).all():
            raise NonFiniteError(f"non-finite output from op '{name}' (op #{len(self.records)})")
        self.records.append((name, out, inputs, backward))

    def note_margin(self, margin: float):
        if margin < self.kink_margin:
            self.kink_margin = float(margin)

    def op_names(self) -> list[str]:
        return [r[0] for r in self.records]

    def backward(self, out: Tensor, grad: np.ndarray | None = None):
        """Propagate d(out) back through the recorded ops in reverse order.

        Gradients are added into ``Param.grad``; nothing is overwritten.
        """
        seed = np.ones_like(out.data) if grad is None else np.asarray(grad, dtype=np.float64)
        grads: dict[int, np.ndarray] = {id(out): seed}
        for name, node, inputs, backward in reversed(self.records):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            for inp, gi in zip(inputs, backward(g)):
                if gi is None:
                    continue
                if isinstance(inp, Param):
                    inp.grad += gi
                elif isinstance(inp, Tensor):
                    k = id(inp)
                    grads[k] = gi if k not in grads else grads[k] + gi


def _needs_grad(x) -> bool:
    return isinstance(x, Param) or (isinstance(x, Tensor) and x.tracked)


def _record(name, out, inputs, backward):
    tape = _active_tape()
    if tape is not None and any(_needs_grad(i) for i in inputs):
        out.tracked = True
        tape.record(name, out, inputs, backward)
    return out


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# pooling, dense layers, activations
# ---------------------------------------------------------------------------


def gap(x: Tensor) -> Tensor:
    """Global average pooling over height and width."""
    n, h, w, c = x.shape
    if h * w == 0:
        raise ShapeError(f"gap needs non-empty spatial extent, got {x.shape}")
    out = Tensor(x.data.mean(axis=(1, 2), keepdims=True))

    def backward(g):
        return (np.broadcast_to(g / (h * w), x.shape),)

    return _record("gap", out, (x,), backward)


def linear(x: Tensor, w: Param, b: Param | None = None) -> Tensor:
    """Fully connected layer on (N,1,1,Cin) inputs; ``w`` is (Cout, Cin)."""
    n, h, wd, cin = x.shape
    if h != 1 or wd != 1:
        raise ShapeError(f"linear expects H=W=1, got {x.shape}")
    if w.value.ndim != 2 or w.value.shape[1] != cin:
        raise ShapeError(f"weight {w.value.shape} does not accept {cin} input channels")
    cout = w.value.shape[0]
    if b is not None and b.value.shape != (cout,):
        raise ShapeError(f"bias shape {b.value.shape} != ({cout},)")
    x2 = x.data.reshape(n, cin)
    y = x2 @ w.value.T
    if b is not None:
        y = y + b.value
    out = Tensor(y.reshape(n, 1, 1, cout))
    wv = w.value

    def backward(g):
        g2 = g.reshape(n, cout)
        gx = (g2 @ wv).reshape(x.shape) if x.tracked else None
        gw = g2.T @ x2
        gb = g2.sum(axis=0) if b is not None else None
        return gx, gw, gb

    return _record("linear", out, (x, w, b), backward)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    out = Tensor(np.where(mask, x.data, 0.0))
    tape = _active_tape()
    if tape is not None and tape.track_kinks and x.data.size:
        tape.note_margin(np.abs(x.data).min())

    def backward(g):
        return (g * mask,)

    return _record("relu", out, (x,), backward)


_SIG_LO = np.nextafter(0.0, 1.0)
_SIG_HI = np.nextafter(1.0, 0.0)


def _sigmoid_np(z: np.ndarray) -> np.ndarray:
    # two-branch form avoids overflow in exp for large |z|; the clip keeps
    # saturated values strictly inside (0, 1) and moves nothing by > 1.2e-16
    e = np.exp(-np.abs(z))
    s = np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return np.clip(s, _SIG_LO, _SIG_HI)


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid_np(x.data)
    out = Tensor(s)

    def backward(g):
        return (g * s * (1.0 - s),)

    return _record("sigmoid", out, (x,), backward)


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------


def _conv_out_size(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def _conv_input_grad(g: np.ndarray, kernel: np.ndarray, in_shape, padding: int, stride: int) -> np.ndarray:
    # transposed convolution: correlate the stride-dilated output gradient,
    # padded by kh-1, with the spatially flipped kernel
    n, h, w, cin = in_shape
    kh, kw, _, cout = kernel.shape
    _, ho, wo, _ = g.shape
    hp, wp = h + 2 * padding, w + 2 * padding
    lh, lw = (ho - 1) * stride + 1, (wo - 1) * stride + 1
    if stride == 1:
        gd = g
    else:
        gd = np.zeros((n, lh, lw, cout))
        gd[:, ::stride, ::stride, :] = g
    gdp = np.pad(gd, ((0, 0), (kh - 1, hp - lh), (kw - 1, wp - lw), (0, 0)))
    win = sliding_window_view(gdp, (kh, kw), axis=(1, 2))[:, padding : padding + h, padding : padding + w]
    cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(n * h * w, kh * kw * cout)
    kflip = kernel[::-1, ::-1].transpose(0, 1, 3, 2).reshape(kh * kw * cout, cin)
    return (cols @ kflip).reshape(n, h, w, cin)


def conv2d(x: Tensor, k: Param, b: Param | None = None, padding: int | None = None,
           stride: int = 1) -> Tensor:
    """Zero-padded 2-D cross-correlation; kernel layout (kh, kw, Cin, Cout).

    ``padding`` defaults to (kh-1)//2, which keeps H and W at stride 1.
    With stride s the output size is ceil(H/s) for odd kernels.
    """
    n, h, w, cin = x.shape
    if k.value.ndim != 4:
        raise ShapeError(f"conv kernel must be (kh,kw,Cin,Cout), got {k.value.shape}")
    kh, kw, kcin, cout = k.value.shape
    if kcin != cin:
        raise ShapeError(f"kernel expects {kcin} input channels, input has {cin}")
    if b is not None and b.value.shape != (cout,):
        raise ShapeError(f"bias shape {b.value.shape} != ({cout},)")
    if stride < 1:
        raise ShapeError(f"stride must be >= 1, got {stride}")
    if padding is None:
        padding = (kh - 1) // 2
    hp, wp = h + 2 * padding, w + 2 * padding
    if kh > hp or kw > wp:
        raise ShapeError(f"kernel {kh}x{kw} larger than padded input {hp}x{wp}")
    ho = _conv_out_size(h, kh, stride, padding)
    wo = _conv_out_size(w, kw, stride, padding)
    kmat = k.value.reshape(kh * kw * cin, cout)

    if kh == 1 and kw == 1 and padding == 0:
        xs = x.data[:, ::stride, ::stride, :]
        cols = xs.reshape(n * ho * wo, cin)
    else:
        # tensors are immutable, so the column matrix can be reused by any
        # other conv reading the same input with the same geometry
        key = (kh, kw, padding, stride)
        cached = x._cols
        if cached is not None and cached[0] == key:
            cols = cached[1]
        else:
            xp = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding), (0, 0)))
            win = sliding_window_view(xp, (kh, kw), axis=(1, 2))
            win = win[:, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]
            cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(n * ho * wo, kh * kw * cin)
            x._cols = (key, cols)
    y = cols @ kmat
    if b is not None:
        y += b.value
    out = Tensor(y.reshape(n, ho, wo, cout))

    def backward(g):
        g2 = g.reshape(n * ho * wo, cout)
        gk = (cols.T @ g2).reshape(k.value.shape)
        gb = g2.sum(axis=0) if b is not None else None
        if not x.tracked:
            gx = None
        elif kh == 1 and kw == 1 and padding == 0:
            dcols = g2 @ kmat.T
            if stride == 1:
                gx = dcols.reshape(x.shape)
            else:
                gx = np.zeros(x.shape)
                gx[:, ::stride, ::stride, :] = dcols.reshape(n, ho, wo, cin)
        elif stride == 1:
            gx = _conv_input_grad(g, k.value, (n, h, w, cin), padding, stride)
        else:
            # strided: scatter column gradients back, one kernel tap at a time
            dcols = (g2 @ kmat.T).reshape(n, ho, wo, kh, kw, cin)
            gxp = np.zeros((n, hp, wp, cin))
            for i in range(kh):
                for j in range(kw):
                    gxp[:, i : i + (ho - 1) * stride + 1 : stride,
                        j : j + (wo - 1) * stride + 1 : stride, :] += dcols[:, :, :, i, j, :]
            gx = gxp[:, padding : padding + h, padding : padding + w, :]
        return gx, gk, gb

    return _record("conv2d", out, (x, k, b), backward)


# ---------------------------------------------------------------------------
# channel plumbing
# ---------------------------------------------------------------------------


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    if a.shape[:3] != b.shape[:3]:
        raise ShapeError(f"concat_channels needs matching N,H,W: {a.shape} vs {b.shape}")
    c1 = a.shape[3]
    out = Tensor(np.concatenate([a.data, b.data], axis=3))

    def backward(g):
        return g[..., :c1], g[..., c1:]

    return _record("concat_channels", out, (a, b), backward)


def slice_channels(x: Tensor, start: int, stop: int) -> Tensor:
    c = x.shape[3]
    if not 0 <= start < stop <= c:
        raise ShapeError(f"channel slice [{start}:{stop}) out of range for C={c}")
    out = Tensor(x.data[..., start:stop])

    def backward(g):
        gx = np.zeros(x.shape)
        gx[..., start:stop] = g
        return (gx,)

    return _record("slice_channels", out, (x,), backward)


def channel_stats(x: Tensor) -> tuple[Tensor, Tensor]:
    """Per-position mean and max across channels, each (N,H,W,1).

    The max gradient goes to the lowest channel index attaining the max.
    """
    c = x.shape[3]
    if c < 1:
        raise ShapeError("channel_stats needs at least one channel")
    avg = Tensor(x.data.mean(axis=3, keepdims=True))
    _record("channel_mean", avg, (x,), lambda g: (np.broadcast_to(g / c, x.shape),))

    idx = np.argmax(x.data, axis=3)[..., None]
    mx = Tensor(np.take_along_axis(x.data, idx, axis=3))
    tape = _active_tape()
    if tape is not None and tape.track_kinks and c > 1:
        top2 = np.sort(x.data, axis=3)[..., -2:]
        tape.note_margin((top2[..., 1] - top2[..., 0]).min())

    def max_backward(g):
        gx = np.zeros(x.shape)
        np.put_along_axis(gx, idx, g, axis=3)
        return (gx,)

    _record("channel_max", mx, (x,), max_backward)
    return avg, mx


# ---------------------------------------------------------------------------
# elementwise with broadcasting
# ---------------------------------------------------------------------------


def _broadcast_shape(a: tuple, b: tuple) -> tuple:
    out = []
    for da, db in zip(a, b):
        if da == db or db == 1:
            out.append(da)
        elif da == 1:
            out.append(db)
        else:
            raise ShapeError(f"shapes {a} and {b} are not broadcastable")
    return tuple(out)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    return g.sum(axis=axes, keepdims=True) if axes else g


def broadcast_mul(x: Tensor, y: Tensor) -> Tensor:
    """Elementwise product; any singleton axis is copied to match."""
    shape = _broadcast_shape(x.shape, y.shape)
    out = Tensor(x.data * y.data)
    xd, yd = x.data, y.data

    def backward(g):
        gx = _unbroadcast(g * yd, x.shape) if x.tracked else None
        gy = _unbroadcast(g * xd, y.shape) if y.tracked else None
        return gx, gy

    assert out.shape == shape
    return _record("broadcast_mul", out, (x, y), backward)


def add(x: Tensor, y: Tensor) -> Tensor:
    _broadcast_shape(x.shape, y.shape)
    out = Tensor(x.data + y.data)

    def backward(g):
        return _unbroadcast(g, x.shape), _unbroadcast(g, y.shape)

    return _record("add", out, (x, y), backward)


def scale(x: Tensor, factor: float) -> Tensor:
    """Multiply by a constant (not differentiated w.r.t. ``factor``)."""
    factor = float(factor)
    out = Tensor(x.data * factor)
    return _record("scale", out, (x,), lambda g: (g * factor,))


def total(x: Tensor) -> Tensor:
    """Sum of all entries as a (1,1,1,1) tensor."""
    out = Tensor(np.full((1, 1, 1, 1), x.data.sum()))
    return _record("total", out, (x,), lambda g: (np.broadcast_to(g.reshape(()), x.shape),))


def param_tensor(p: Param, shape: Sequence[int], index=None) -> Tensor:
    """View ``p.value[index]`` as a Tensor of ``shape``; gradient flows back into ``p``."""
    sel = p.value if index is None else p.value[index]
    out = Tensor(np.reshape(sel, shape))
    src_shape = np.shape(sel)

    def backward(g):
        g = g.reshape(src_shape)
        if index is None:
            return (g,)
        full = np.zeros_like(p.value)
        full[index] = g
        return (full,)

    return _record("param_tensor", out, (p,), backward)


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------


def bce_loss(logits: Tensor, targets) -> Tensor:
    """Mean binary cross-entropy with logits, in the overflow-free form

    max(z,0) - z*t + log(1 + exp(-|z|)).
    """
    t = targets.data if isinstance(targets, Tensor) else np.asarray(targets, dtype=np.float64)
    z = logits.data
    if t.shape != z.shape:
        t = t.reshape(z.shape)
    count = z.size
    loss = np.maximum(z, 0.0) - z * t + np.log1p(np.exp(-np.abs(z)))
    out = Tensor(np.full((1, 1, 1, 1), loss.sum() / count))

    def backward(g):
        return ((_sigmoid_np(z) - t) * (g.reshape(()) / count),)

    return _record("bce_loss", out, (logits,), backward)


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------


def grad_check(f: Callable[[], Tensor], params: Sequence[Param], eps: float = 1e-5) -> float:
    """Max relative error between tape gradients and central differences.

    ``f`` takes no arguments and must read the current ``Param.value`` arrays;
    it is re-evaluated with each coordinate nudged by ``±eps``.  The error
    for one coordinate is |analytic - numeric| / max(1, |analytic|, |numeric|).

    Raises ``NearKinkError`` if the point sits within ``10*eps`` of a ReLU
    kink or channel-max tie, and ``NonFiniteError`` naming the op that
    produced a NaN/Inf.
    """
    if not 1e-7 <= eps <= 1e-4:
        raise ValueError(f"eps must lie in [1e-7, 1e-4], got {eps}")
    zero_grads(params)
    with Tape(check_finite=True, track_kinks=True) as tape:
        out = f()
    if out.data.size != 1:
        raise ShapeError(f"grad_check needs a scalar-valued function, got {out.shape}")
    if tape.kink_margin < 10 * eps:
        raise NearKinkError(f"kink margin {tape.kink_margin:.3g} < {10 * eps:.3g}")
    tape.backward(out)

    worst = 0.0
    for p in params:
        flat = p.value.reshape(-1)
        analytic = p.grad.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = f().item()
            flat[i] = orig - eps
            fm = f().item()
            flat[i] = orig
            numeric = (fp - fm) / (2 * eps)
            a = analytic[i]
            err = abs(a - numeric) / max(1.0, abs(a), abs(numeric))
            worst = max(worst, err)
    return worst
