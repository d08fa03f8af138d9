"""Dense tensors with tape-based reverse-mode differentiation.

Only the operations the recognizer needs are provided: convolution, pooling,
batch normalization, affine maps, a fused LSTM layer and a few elementwise
activations. Arrays are plain numpy arrays in NHWC layout; every reduction is
done in a fixed order so repeated runs give bit-identical results.

Usage::

    with Tape() as tape:
        y = tensor.sum(tensor.mul(x, x))
    (gx,) = tape.gradient(y, [x])
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Sequence

import numpy as np

_state = threading.local()


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class NonFiniteError(FloatingPointError):
    """Raised when an operation produces NaN or infinity from finite inputs."""


# ---------------------------------------------------------------------------
# precision

def get_default_dtype() -> np.dtype:
    return getattr(_state, "dtype", np.dtype(np.float32))


def set_default_dtype(dtype) -> None:
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported precision {dtype}")
    _state.dtype = dtype


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the default scalar type (float32 or float64)."""
    old = get_default_dtype()
    set_default_dtype(dtype)
    try:
        yield
    finally:
        _state.dtype = old


# ---------------------------------------------------------------------------
# tensor and tape

class Tensor:
    """An n-dimensional array that can take part in differentiation."""

    __slots__ = ("data", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(get_default_dtype())
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


class _Node:
    __slots__ = ("op", "inputs", "output", "backward")

    def __init__(self, op, inputs, output, backward):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward = backward


class Tape:
    """Ordered record of executed operations.

    Operations executed while the tape is active (inside ``with``) and that
    depend on a tensor with ``requires_grad`` are appended to ``nodes``.
    Tapes nest; only the innermost one records. A tape is confined to the
    thread that created it.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self.visits = 0

    def __enter__(self):
        stack = getattr(_state, "tapes", None)
        if stack is None:
            stack = _state.tapes = []
        stack.append(self)
        return self

    def __exit__(self, *exc):
        _state.tapes.pop()
        return False

    def gradient(self, target: Tensor, sources: Sequence[Tensor],
                 seed: np.ndarray | None = None) -> list[np.ndarray]:
        """Gradients of ``target`` with respect to each of ``sources``.

        ``target`` must be a scalar unless an explicit ``seed`` (the upstream
        gradient) is given. Sources unreachable from the target get zeros.
        """
        if seed is None:
            if target.data.size != 1:
                raise ShapeError(f"gradient needs a scalar target, got shape {target.shape}")
            seed = np.ones_like(target.data)
        grads: dict[int, np.ndarray] = {id(target): np.asarray(seed, dtype=target.dtype)}
        self.visits = 0
        for node in reversed(self.nodes):
            self.visits += 1
            g = grads.pop(id(node.output), None)
            if g is None:
                continue
            wanted = [t.requires_grad for t in node.inputs]
            in_grads = node.backward(g, wanted)
            for t, w, gi in zip(node.inputs, wanted, in_grads):
                if not w or gi is None:
                    continue
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
        return [grads[id(s)] if id(s) in grads else np.zeros_like(s.data) for s in sources]


def _active_tape() -> Tape | None:
    stack = getattr(_state, "tapes", None)
    return stack[-1] if stack else None


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=get_default_dtype()))


def apply(op: str, inputs: Sequence[Tensor], out: np.ndarray,
          backward: Callable[[np.ndarray, list[bool]], Sequence[np.ndarray | None]]) -> Tensor:
    """Wrap a computed array as an op output and record it on the active tape.

    ``backward(grad_out, wanted)`` returns one gradient (or None) per input.
    """
    if not np.all(np.isfinite(out)):
        bad = [t.name or t.shape for t in inputs if not np.all(np.isfinite(t.data))]
        if not bad:
            raise NonFiniteError(f"{op} produced non-finite values from finite inputs")
        raise NonFiniteError(f"{op} received non-finite input(s) {bad}")
    tape = _active_tape()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    result = Tensor(out, requires_grad=needs)
    if needs:
        tape.nodes.append(_Node(op, list(inputs), result, backward))
    return result


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise and shape ops

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def backward(g, wanted):
        return (_unbroadcast(g, a.shape) if wanted[0] else None,
                _unbroadcast(g, b.shape) if wanted[1] else None)

    return apply("add", (a, b), a.data + b.data, backward)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def backward(g, wanted):
        return (_unbroadcast(g, a.shape) if wanted[0] else None,
                _unbroadcast(-g, b.shape) if wanted[1] else None)

    return apply("sub", (a, b), a.data - b.data, backward)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def backward(g, wanted):
        return (_unbroadcast(g * b.data, a.shape) if wanted[0] else None,
                _unbroadcast(g * a.data, b.shape) if wanted[1] else None)

    return apply("mul", (a, b), a.data * b.data, backward)


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return apply("neg", (a,), -a.data, lambda g, w: (-g,))


def sum(a) -> Tensor:  # noqa: A001 - mirrors numpy naming
    """Sum of all elements, as a scalar tensor."""
    a = _as_tensor(a)
    return apply("sum", (a,), np.asarray(a.data.sum()),
                 lambda g, w: (np.broadcast_to(g, a.shape).copy(),))


def mean(a) -> Tensor:
    a = _as_tensor(a)
    n = a.data.size
    return apply("mean", (a,), np.asarray(a.data.mean()),
                 lambda g, w: (np.full(a.shape, g / n, dtype=a.dtype),))


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    return apply("reshape", (a,), a.data.reshape(shape), lambda g, w: (g.reshape(a.shape),))


def reverse(a, axis: int) -> Tensor:
    a = _as_tensor(a)
    return apply("reverse", (a,), np.flip(a.data, axis).copy(),
                 lambda g, w: (np.flip(g, axis).copy(),))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def backward(g, wanted):
        return np.split(g, bounds, axis=axis)

    return apply("concat", tensors, np.concatenate([t.data for t in tensors], axis=axis), backward)


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def backward(g, wanted):
        return (g @ b.data.T if wanted[0] else None,
                a.data.T @ g if wanted[1] else None)

    return apply("matmul", (a, b), a.data @ b.data, backward)


# ---------------------------------------------------------------------------
# activations

def relu(x) -> Tensor:
    x = _as_tensor(x)
    out = np.maximum(x.data, 0)
    return apply("relu", (x,), out, lambda g, w: (g * (out > 0),))


def _sigmoid(v: np.ndarray) -> np.ndarray:
    # tanh form saturates cleanly instead of overflowing exp
    return 0.5 * (1.0 + np.tanh(0.5 * v))


def sigmoid(x) -> Tensor:
    x = _as_tensor(x)
    s = _sigmoid(x.data)
    return apply("sigmoid", (x,), s, lambda g, w: (g * s * (1 - s),))


def tanh(x) -> Tensor:
    x = _as_tensor(x)
    t = np.tanh(x.data)
    return apply("tanh", (x,), t, lambda g, w: (g * (1 - t * t),))


def log_softmax(x, axis: int = -1) -> Tensor:
    x = _as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    soft = np.exp(out)

    def backward(g, wanted):
        return (g - soft * g.sum(axis=axis, keepdims=True),)

    return apply("log_softmax", (x,), out, backward)


# ---------------------------------------------------------------------------
# layers

def _batched(x: Tensor, ndim: int) -> tuple[Tensor, bool]:
    if x.ndim == ndim - 1:
        return reshape(x, (1,) + x.shape), True
    if x.ndim != ndim:
        raise ShapeError(f"expected a {ndim - 1}- or {ndim}-d input, got shape {x.shape}")
    return x, False


def _im2col(x: np.ndarray, k: int) -> np.ndarray:
    """[B, H, W, C] -> [B*H*W, k*k*C] zero-padded receptive fields, (ky, kx, c) order."""
    B, H, W, C = x.shape
    p = k // 2
    xp = np.pad(x, ((0, 0), (p, p), (p, p), (0, 0)))
    view = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(1, 2))
    return view.transpose(0, 1, 2, 4, 5, 3).reshape(B * H * W, k * k * C)


def conv2d(x, kernel, bias=None) -> Tensor:
    """Stride-1 convolution with zero "same" padding.

    ``x`` is [H, W, Cin] or [B, H, W, Cin]; ``kernel`` is [k, k, Cin, Cout]
    with odd ``k``; ``bias`` is an optional [Cout] vector.
    """
    x, squeeze = _batched(_as_tensor(x), 4)
    kernel = _as_tensor(kernel)
    if kernel.ndim != 4 or kernel.shape[0] != kernel.shape[1] or kernel.shape[0] % 2 == 0:
        raise ShapeError(f"conv2d: kernel must be [k, k, Cin, Cout] with odd k, got {kernel.shape}")
    k, _, cin, cout = kernel.shape
    if x.shape[3] != cin:
        raise ShapeError(f"conv2d: input has {x.shape[3]} channels but kernel expects {cin} "
                         f"(input {x.shape}, kernel {kernel.shape})")
    B, H, W, _ = x.shape
    cols = _im2col(x.data, k)
    out = cols @ kernel.data.reshape(k * k * cin, cout)
    inputs = [x, kernel]
    if bias is not None:
        bias = _as_tensor(bias)
        if bias.shape != (cout,):
            raise ShapeError(f"conv2d: bias shape {bias.shape} != ({cout},)")
        out += bias.data
        inputs.append(bias)
    out = out.reshape(B, H, W, cout)

    def backward(g, wanted):
        g2 = g.reshape(B * H * W, cout)
        gx = gk = gb = None
        if wanted[0]:
            # input gradient is a same-padded correlation with the flipped kernel
            flipped = kernel.data[::-1, ::-1].transpose(0, 1, 3, 2).reshape(k * k * cout, cin)
            gx = (_im2col(g, k) @ flipped).reshape(B, H, W, cin)
        if wanted[1]:
            gk = (cols.T @ g2).reshape(k, k, cin, cout)
        if len(wanted) > 2 and wanted[2]:
            gb = g2.sum(axis=0)
        return (gx, gk, gb)[:len(inputs)]

    y = apply("conv2d", inputs, out, backward)
    return reshape(y, y.shape[1:]) if squeeze else y


def maxpool2d(x, window: tuple[int, int]) -> Tensor:
    """Non-overlapping max pooling (stride equals window).

    Gradient flows to the first maximum of each window in row-major order.
    """
    x, squeeze = _batched(_as_tensor(x), 4)
    ph, pw = window
    B, H, W, C = x.shape
    if H % ph or W % pw:
        raise ShapeError(f"maxpool2d: extents {(H, W)} not divisible by window {window}")
    Ho, Wo = H // ph, W // pw
    win = x.data.reshape(B, Ho, ph, Wo, pw, C)
    out = win.max(axis=(2, 4))

    def backward(g, wanted):
        gx = np.zeros(win.shape, dtype=g.dtype)
        taken = np.zeros(out.shape, dtype=bool)
        for i in range(ph):
            for j in range(pw):
                first = (win[:, :, i, :, j, :] == out) & ~taken
                gx[:, :, i, :, j, :] = np.where(first, g, 0)
                taken |= first
        return (gx.reshape(B, H, W, C),)

    y = apply("maxpool2d", (x,), out, backward)
    return reshape(y, y.shape[1:]) if squeeze else y


class BatchNormState:
    """Running statistics of one batch-norm layer."""

    def __init__(self, channels: int | None = None, momentum: float = 0.9, eps: float = 1e-5):
        self.momentum = momentum
        self.eps = eps
        self.running_mean = None if channels is None else np.zeros(channels, get_default_dtype())
        self.running_var = None if channels is None else np.ones(channels, get_default_dtype())


def batchnorm(x, gamma, beta, state: BatchNormState, training: bool) -> Tensor:
    """Per-channel normalization over all axes but the last.

    Training mode uses the batch's population statistics and updates
    ``state``; eval mode uses the running statistics.
    """
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    C = x.shape[-1]
    if gamma.shape != (C,) or beta.shape != (C,):
        raise ShapeError(f"batchnorm: gamma/beta must be ({C},), got {gamma.shape}, {beta.shape}")
    axes = tuple(range(x.ndim - 1))
    if training:
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        if state.running_mean is None:
            state.running_mean = mu.copy()
            state.running_var = var.copy()
        else:
            m = state.momentum
            state.running_mean = (m * state.running_mean + (1 - m) * mu).astype(x.dtype)
            state.running_var = (m * state.running_var + (1 - m) * var).astype(x.dtype)
    else:
        if state.running_mean is None:
            raise RuntimeError("batchnorm: eval mode requested before any running statistics exist")
        mu = state.running_mean.astype(x.dtype)
        var = state.running_var.astype(x.dtype)
    inv = 1.0 / np.sqrt(var + state.eps)
    xhat = (x.data - mu) * inv
    out = gamma.data * xhat + beta.data
    n = x.data.size // C

    def backward(g, wanted):
        gg = (g * xhat).sum(axis=axes) if wanted[1] else None
        gb = g.sum(axis=axes) if wanted[2] else None
        gx = None
        if wanted[0]:
            gxhat = g * gamma.data
            if training:
                gx = inv / n * (n * gxhat - gxhat.sum(axis=axes) - xhat * (gxhat * xhat).sum(axis=axes))
            else:
                gx = gxhat * inv
        return gx, gg, gb

    return apply("batchnorm", (x, gamma, beta), out.astype(x.dtype), backward)


def dense(x, weight, bias) -> Tensor:
    """Affine map over the last axis: ``x @ weight + bias``."""
    x, weight, bias = _as_tensor(x), _as_tensor(weight), _as_tensor(bias)
    F, G = weight.shape
    if x.shape[-1] != F or bias.shape != (G,):
        raise ShapeError(f"dense: input {x.shape}, weight {weight.shape}, bias {bias.shape}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, F)
    out = (x2 @ weight.data + bias.data).reshape(lead + (G,))

    def backward(g, wanted):
        g2 = g.reshape(-1, G)
        return ((g2 @ weight.data.T).reshape(x.shape) if wanted[0] else None,
                x2.T @ g2 if wanted[1] else None,
                g2.sum(axis=0) if wanted[2] else None)

    return apply("dense", (x, weight, bias), out, backward)


def lstm(x, w_input, w_hidden, bias, reverse: bool = False) -> Tensor:
    """One LSTM direction over a [B, T, F] sequence, zero initial state.

    Gates are packed (input, forget, candidate, output) along the last axis
    of ``w_input`` [F, 4H], ``w_hidden`` [H, 4H] and ``bias`` [4H]. With
    ``reverse`` the sequence is consumed right to left; outputs stay aligned
    with their input positions.
    """
    x, squeeze = _batched(_as_tensor(x), 3)
    w_input, w_hidden, bias = _as_tensor(w_input), _as_tensor(w_hidden), _as_tensor(bias)
    B, T, F = x.shape
    Hd = w_hidden.shape[0]
    if w_input.shape != (F, 4 * Hd) or w_hidden.shape != (Hd, 4 * Hd) or bias.shape != (4 * Hd,):
        raise ShapeError(f"lstm: input {x.shape}, w_input {w_input.shape}, "
                         f"w_hidden {w_hidden.shape}, bias {bias.shape}")
    dt = x.dtype
    xw = (x.data.reshape(B * T, F) @ w_input.data + bias.data).reshape(B, T, 4 * Hd)
    order = range(T - 1, -1, -1) if reverse else range(T)
    gates = np.empty((B, T, 4 * Hd), dt)   # activated i, f, g, o
    cells = np.empty((B, T, Hd), dt)
    tanh_c = np.empty((B, T, Hd), dt)
    hs = np.empty((B, T, Hd), dt)
    h = np.zeros((B, Hd), dt)
    c = np.zeros((B, Hd), dt)
    for t in order:
        z = xw[:, t] + h @ w_hidden.data
        a = gates[:, t]
        a[:, :2 * Hd] = _sigmoid(z[:, :2 * Hd])
        a[:, 2 * Hd:3 * Hd] = np.tanh(z[:, 2 * Hd:3 * Hd])
        a[:, 3 * Hd:] = _sigmoid(z[:, 3 * Hd:])
        c = a[:, Hd:2 * Hd] * c + a[:, :Hd] * a[:, 2 * Hd:3 * Hd]
        cells[:, t] = c
        tanh_c[:, t] = np.tanh(c)
        h = a[:, 3 * Hd:] * tanh_c[:, t]
        hs[:, t] = h

    def backward(g, wanted):
        dz = np.empty((B, T, 4 * Hd), dt)
        dw_hidden = np.zeros_like(w_hidden.data)
        dh_next = np.zeros((B, Hd), dt)
        dc_next = np.zeros((B, Hd), dt)
        steps = list(order)
        for n in range(T - 1, -1, -1):
            t = steps[n]
            prev = steps[n - 1] if n > 0 else None
            a = gates[:, t]
            i, f, cand, o = a[:, :Hd], a[:, Hd:2 * Hd], a[:, 2 * Hd:3 * Hd], a[:, 3 * Hd:]
            dh = g[:, t] + dh_next
            tc = tanh_c[:, t]
            dc = dh * o * (1 - tc * tc) + dc_next
            c_prev = cells[:, prev] if prev is not None else np.zeros((B, Hd), dt)
            d = dz[:, t]
            d[:, :Hd] = dc * cand * i * (1 - i)
            d[:, Hd:2 * Hd] = dc * c_prev * f * (1 - f)
            d[:, 2 * Hd:3 * Hd] = dc * i * (1 - cand * cand)
            d[:, 3 * Hd:] = dh * tc * o * (1 - o)
            dc_next = dc * f
            if prev is not None:
                dw_hidden += hs[:, prev].T @ d
            dh_next = d @ w_hidden.data.T
        dz2 = dz.reshape(B * T, 4 * Hd)
        return ((dz2 @ w_input.data.T).reshape(B, T, F) if wanted[0] else None,
                x.data.reshape(B * T, F).T @ dz2 if wanted[1] else None,
                dw_hidden if wanted[2] else None,
                dz2.sum(axis=0) if wanted[3] else None)

    y = apply("lstm", (x, w_input, w_hidden, bias), hs, backward)
    return reshape(y, y.shape[1:]) if squeeze else y


# ---------------------------------------------------------------------------
# verification

def grad_check(f: Callable[[Tensor], Tensor], point, step: float = 1e-6,
               coords: Sequence[int] | None = None) -> float:
    """Max relative error between tape and central-difference gradients.

    The error per coordinate is ``|g_ad - g_fd| / max(1, |g_ad|, |g_fd|)``.
    ``point`` is evaluated in 64-bit precision. ``coords`` restricts the
    comparison to the given flat indices.
    """
    x0 = np.array(point.data if isinstance(point, Tensor) else point, dtype=np.float64)
    with precision(np.float64):
        x = Tensor(x0.copy(), requires_grad=True)
        with Tape() as tape:
            y = f(x)
        if y.data.size != 1:
            raise ShapeError(f"grad_check: f must return a scalar, got shape {y.shape}")
        (g_ad,) = tape.gradient(y, [x])
        g_ad = g_ad.reshape(-1)
        flat = x0.reshape(-1)
        coords = range(flat.size) if coords is None else coords
        worst = 0.0
        for idx in coords:
            orig = flat[idx]
            flat[idx] = orig + step
            up = float(f(Tensor(x0.copy())).data)
            flat[idx] = orig - step
            down = float(f(Tensor(x0.copy())).data)
            flat[idx] = orig
            fd = (up - down) / (2 * step)
            err = abs(g_ad[idx] - fd) / max(1.0, abs(g_ad[idx]), abs(fd))
            worst = max(worst, err)
    return float(worst)
