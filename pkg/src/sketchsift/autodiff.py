"""Minimal reverse-mode automatic differentiation over dense float64 arrays.

Ops record onto the active Tape (a context manager); with no active tape they
run as plain numpy forward passes, which is the cheap inference path. Backward
replays the tape in exact reverse recording order, so gradients are
bit-deterministic for a fixed program.

Shapes are explicit: the only broadcasting allowed is the bias-add pattern
((K, d) + (d,) or (K, d) + (1, d)).
"""

from __future__ import annotations

import contextvars
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import NotScalar, NumericError, ShapeMismatch

_ACTIVE_TAPE: contextvars.ContextVar["Tape | None"] = contextvars.ContextVar(
    "sketchsift_active_tape", default=None
)


class Tensor:
    """A dense float64 array plus grad bookkeeping."""

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def constant(data) -> Tensor:
    return Tensor(data, requires_grad=False)


def parameter(data) -> Tensor:
    return Tensor(data, requires_grad=True)


@dataclass
class _TapeEntry:
    out: Tensor
    parents: tuple[Tensor, ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    """Recorded op sequence; backward walks it in exact reverse order."""

    def __init__(self) -> None:
        self.entries: list[_TapeEntry] = []
        self._token = None

    def __enter__(self) -> "Tape":
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE_TAPE.reset(self._token)
        self._token = None

    def record(self, out, parents, backward) -> None:
        self.entries.append(_TapeEntry(out, parents, backward))

    def gradients(
        self,
        loss: Tensor,
        params: Iterable[Tensor] | None = None,
    ) -> dict[Tensor, np.ndarray]:
        """d(loss)/d(t) for every requires_grad tensor reachable on this tape.

        Tensors listed in params are always present in the result (zeros when
        disconnected from the loss).
        """
        if loss.data.size != 1:
            raise NotScalar(f"loss has shape {loss.data.shape}, expected a scalar")
        if not self.entries:
            raise NotScalar("tape is empty; nothing was recorded")

        produced = {id(entry.out) for entry in self.entries}
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        holders: dict[int, Tensor] = {id(loss): loss}
        for entry in reversed(self.entries):
            g_out = grads.get(id(entry.out))
            if g_out is None:
                continue
            parent_grads = entry.backward(g_out)
            for parent, g in zip(entry.parents, parent_grads):
                if g is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + g
                else:
                    grads[key] = g
                    holders[key] = parent

        # only leaves (tensors not produced by this tape) are reported
        result: dict[Tensor, np.ndarray] = {}
        for key, tensor in holders.items():
            if tensor.requires_grad and key not in produced:
                result[tensor] = grads[key]
        if params is not None:
            for p in params:
                if p not in result:
                    result[p] = np.zeros_like(p.data)
        for tensor, g in result.items():
            tensor.grad = g
        return result


def active_tape() -> Tape | None:
    return _ACTIVE_TAPE.get()


def backward(loss: Tensor, params: Iterable[Tensor] | None = None) -> dict[Tensor, np.ndarray]:
    """Gradient map from the currently active tape."""
    tape = active_tape()
    if tape is None:
        raise NotScalar("backward called with no active tape")
    return tape.gradients(loss, params=params)


# --------------------------------------------------------------------------
# op plumbing


def _finite_or_raise(data: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(data)):
        raise NumericError(f"{op} produced non-finite values")


def _make(op: str, out_data, parents: tuple[Tensor, ...], backward_fn) -> Tensor:
    _finite_or_raise(out_data, op)
    requires = any(p.requires_grad for p in parents)
    out = Tensor(out_data, requires_grad=requires)
    tape = _ACTIVE_TAPE.get()
    if tape is not None and requires:
        tape.record(out, parents, backward_fn)
    return out


def _bias_pattern(a_shape: tuple[int, ...], b_shape: tuple[int, ...]) -> bool:
    if len(a_shape) == 2 and b_shape == (a_shape[1],):
        return True
    if len(a_shape) == 2 and b_shape == (1, a_shape[1]):
        return True
    return False


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    summed = g.sum(axis=0)
    return summed.reshape(shape)


# --------------------------------------------------------------------------
# primitives


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape and not _bias_pattern(a.shape, b.shape):
        raise ShapeMismatch(f"add {a.shape} + {b.shape}")
    out = a.data + b.data

    def bwd(g):
        return g, _reduce_to(g, b.shape)

    return _make("add", out, (a, b), bwd)


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape and not _bias_pattern(a.shape, b.shape):
        raise ShapeMismatch(f"sub {a.shape} - {b.shape}")
    out = a.data - b.data

    def bwd(g):
        return g, -_reduce_to(g, b.shape)

    return _make("sub", out, (a, b), bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeMismatch(f"mul {a.shape} * {b.shape}")
    out = a.data * b.data
    a_data, b_data = a.data, b.data

    def bwd(g):
        return g * b_data, g * a_data

    return _make("mul", out, (a, b), bwd)


def add_scalar(a: Tensor, c: float) -> Tensor:
    out = a.data + c

    def bwd(g):
        return (g,)

    return _make("add_scalar", out, (a,), bwd)


def mul_scalar(a: Tensor, c: float) -> Tensor:
    out = a.data * c

    def bwd(g):
        return (g * c,)

    return _make("mul_scalar", out, (a,), bwd)


def neg(a: Tensor) -> Tensor:
    return mul_scalar(a, -1.0)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if len(a.shape) != 2 or len(b.shape) != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"matmul {a.shape} @ {b.shape}")
    out = a.data @ b.data
    a_data, b_data = a.data, b.data

    def bwd(g):
        return g @ b_data.T, a_data.T @ g

    return _make("matmul", out, (a, b), bwd)


def relu(a: Tensor) -> Tensor:
    out = np.maximum(a.data, 0.0)
    mask = a.data > 0.0

    def bwd(g):
        return (g * mask,)

    return _make("relu", out, (a,), bwd)


def sigmoid(a: Tensor) -> Tensor:
    out = 1.0 / (1.0 + np.exp(-a.data))

    def bwd(g):
        return (g * out * (1.0 - out),)

    return _make("sigmoid", out, (a,), bwd)


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)

    def bwd(g):
        return (g * (1.0 - out * out),)

    return _make("tanh", out, (a,), bwd)


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(a.data)

    def bwd(g):
        return (g * out,)

    return _make("exp", out, (a,), bwd)


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0.0):
        raise NumericError("log of non-positive value")
    out = np.log(a.data)
    a_data = a.data

    def bwd(g):
        return (g / a_data,)

    return _make("log", out, (a,), bwd)


def sqrt(a: Tensor) -> Tensor:
    if np.any(a.data < 0.0):
        raise NumericError("sqrt of negative value")
    out = np.sqrt(a.data)

    def bwd(g):
        return (g * 0.5 / np.maximum(out, 1e-150),)

    return _make("sqrt", out, (a,), bwd)


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    out = np.clip(a.data, lo, hi)
    pass_through = (a.data >= lo) & (a.data <= hi)

    def bwd(g):
        return (g * pass_through,)

    return _make("clip", out, (a,), bwd)


def minimum(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise min; gradient follows the winner (ties go to the first arg)."""
    if a.shape != b.shape:
        raise ShapeMismatch(f"minimum {a.shape} vs {b.shape}")
    take_a = a.data <= b.data
    out = np.where(take_a, a.data, b.data)

    def bwd(g):
        return g * take_a, g * (~take_a)

    return _make("minimum", out, (a, b), bwd)


def _axis_tuple(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        return (axis % ndim,)
    return tuple(a % ndim for a in axis)


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _axis_tuple(axis, a.data.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)
    in_shape = a.data.shape

    def bwd(g):
        if not keepdims:
            g = np.expand_dims(g, axes) if axes else g
        return (np.broadcast_to(g, in_shape).copy(),)

    return _make("sum", out, (a,), bwd)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _axis_tuple(axis, a.data.ndim)
    count = 1
    for ax in axes:
        count *= a.data.shape[ax]
    out = a.data.mean(axis=axes, keepdims=keepdims)
    in_shape = a.data.shape

    def bwd(g):
        if not keepdims:
            g = np.expand_dims(g, axes) if axes else g
        return (np.broadcast_to(g, in_shape).copy() / count,)

    return _make("mean", out, (a,), bwd)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    out = a.data.reshape(shape)
    in_shape = a.data.shape

    def bwd(g):
        return (g.reshape(in_shape),)

    return _make("reshape", out, (a,), bwd)


def softmax_rows(a: Tensor) -> Tensor:
    if len(a.shape) != 2:
        raise ShapeMismatch(f"softmax_rows expects 2-D, got {a.shape}")
    shifted = a.data - a.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=1, keepdims=True)

    def bwd(g):
        dot = (g * out).sum(axis=1, keepdims=True)
        return (out * (g - dot),)

    return _make("softmax_rows", out, (a,), bwd)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then affine scale/shift."""
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeMismatch(f"layer_norm affine shapes {gamma.shape}, {beta.shape} for d={d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    x_hat = centered * inv_std
    out = gamma.data * x_hat + beta.data
    g_data = gamma.data

    def bwd(g):
        lead = tuple(range(g.ndim - 1))
        d_beta = g.sum(axis=lead)
        d_gamma = (g * x_hat).sum(axis=lead)
        d_xhat = g * g_data
        # standard layer-norm backward over the last axis
        dx = (
            d_xhat
            - d_xhat.mean(axis=-1, keepdims=True)
            - x_hat * (d_xhat * x_hat).mean(axis=-1, keepdims=True)
        ) * inv_std
        return dx, d_gamma, d_beta

    return _make("layer_norm", out, (x, gamma, beta), bwd)


def l2_normalize_rows(a: Tensor, eps: float = 0.0) -> Tensor:
    """Rows scaled to unit norm; all-zero rows stay zero (flagged on the result)."""
    if len(a.shape) != 2:
        raise ShapeMismatch(f"l2_normalize_rows expects 2-D, got {a.shape}")
    norms = np.sqrt((a.data * a.data).sum(axis=1, keepdims=True))
    zero_rows = norms[:, 0] == 0.0
    safe = np.where(zero_rows[:, None], 1.0, norms)
    out = a.data / safe
    out[zero_rows] = 0.0

    def bwd(g):
        dot = (g * out).sum(axis=1, keepdims=True)
        dx = (g - out * dot) / safe
        dx[zero_rows] = 0.0
        return (dx,)

    result = _make("l2_normalize_rows", out, (a,), bwd)
    result.zero_rows = zero_rows  # type: ignore[attr-defined]
    return result


def gather_rows(a: Tensor, indices) -> Tensor:
    if len(a.shape) != 2:
        raise ShapeMismatch(f"gather_rows expects 2-D, got {a.shape}")
    idx = np.asarray(indices, dtype=np.int64)
    out = a.data[idx]
    in_shape = a.data.shape

    def bwd(g):
        dx = np.zeros(in_shape)
        np.add.at(dx, idx, g)
        return (dx,)

    return _make("gather_rows", out, (a,), bwd)


def hstack2(a: Tensor, b: Tensor) -> Tensor:
    """Concatenate two (K, 1) columns into (K, 2)."""
    if a.shape != b.shape or len(a.shape) != 2 or a.shape[1] != 1:
        raise ShapeMismatch(f"hstack2 {a.shape} | {b.shape}")
    out = np.concatenate([a.data, b.data], axis=1)

    def bwd(g):
        return g[:, :1], g[:, 1:]

    return _make("hstack2", out, (a, b), bwd)


def conv2d_valid(x: Tensor, kernel: Tensor, bias: Tensor | None = None) -> Tensor:
    """Valid cross-correlation: x (B,C,H,W) with kernel (O,C,kh,kw) [+ bias (O,)]."""
    if len(x.shape) != 4 or len(kernel.shape) != 4 or x.shape[1] != kernel.shape[1]:
        raise ShapeMismatch(f"conv2d_valid {x.shape} with kernel {kernel.shape}")
    kh, kw = kernel.shape[2], kernel.shape[3]
    if x.shape[2] < kh or x.shape[3] < kw:
        raise ShapeMismatch(f"input {x.shape} smaller than kernel {kernel.shape}")
    windows = np.lib.stride_tricks.sliding_window_view(x.data, (kh, kw), axis=(2, 3))
    out = np.einsum("bchwij,ocij->bohw", windows, kernel.data, optimize=True)
    if bias is not None:
        if bias.shape != (kernel.shape[0],):
            raise ShapeMismatch(f"conv bias {bias.shape} for {kernel.shape[0]} filters")
        out = out + bias.data[None, :, None, None]
    k_data = kernel.data

    def bwd(g):
        d_kernel = np.einsum("bchwij,bohw->ocij", windows, g, optimize=True)
        padded = np.pad(g, ((0, 0), (0, 0), (kh - 1, kh - 1), (kw - 1, kw - 1)))
        g_windows = np.lib.stride_tricks.sliding_window_view(padded, (kh, kw), axis=(2, 3))
        k_flipped = k_data[:, :, ::-1, ::-1]
        d_x = np.einsum("bohwij,ocij->bchw", g_windows, k_flipped, optimize=True)
        if bias is not None:
            return d_x, d_kernel, g.sum(axis=(0, 2, 3))
        return d_x, d_kernel

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return _make("conv2d_valid", out, parents, bwd)


def maxpool2(x: Tensor) -> Tensor:
    """2x2 stride-2 max pool; odd trailing rows/cols are cropped."""
    if len(x.shape) != 4:
        raise ShapeMismatch(f"maxpool2 expects 4-D, got {x.shape}")
    b, c, h, w = x.shape
    h2, w2 = h // 2, w // 2
    if h2 == 0 or w2 == 0:
        raise ShapeMismatch(f"maxpool2 input {x.shape} too small")
    cropped = x.data[:, :, : h2 * 2, : w2 * 2]
    tiles = cropped.reshape(b, c, h2, 2, w2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, h2, w2, 4)
    arg = tiles.argmax(axis=-1)
    out = np.take_along_axis(tiles, arg[..., None], axis=-1)[..., 0]

    def bwd(g):
        d_tiles = np.zeros((b, c, h2, w2, 4))
        np.put_along_axis(d_tiles, arg[..., None], g[..., None], axis=-1)
        d_cropped = d_tiles.reshape(b, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(
            b, c, h2 * 2, w2 * 2
        )
        dx = np.zeros((b, c, h, w))
        dx[:, :, : h2 * 2, : w2 * 2] = d_cropped
        return (dx,)

    return _make("maxpool2", out, (x,), bwd)


# --------------------------------------------------------------------------
# optimizer + gradient checking


@dataclass
class AdamState:
    """Per-parameter first/second moment estimates plus the step counter."""

    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_step(
    params: dict[str, Tensor],
    grads: dict[str, np.ndarray],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> AdamState:
    """One bias-corrected Adam update, in place on the parameter tensors."""
    state.t += 1
    t = state.t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.data.shape:
            raise ShapeMismatch(f"grad shape {g.shape} != param {p.data.shape} for {name}")
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * (g * g)
        state.m[name] = m
        state.v[name] = v
        m_hat = m / (1.0 - beta1**t)
        v_hat = v / (1.0 - beta2**t)
        p.data = p.data - lr * m_hat / (np.sqrt(v_hat) + eps)
    return state


@dataclass
class FiniteDiffReport:
    max_rel_err: float
    per_param: dict[str, float]
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err <= self.tol


def finite_diff_check(
    f: Callable[[], Tensor],
    params: dict[str, Tensor],
    h: float = 1e-5,
    tol: float = 1e-5,
    denom_floor: float = 1e-3,
) -> FiniteDiffReport:
    """Compare analytic gradients of f() against central finite differences.

    f must be deterministic and build its graph from the given params. The
    relative error denominator is floored at denom_floor so that FD rounding
    noise on near-zero gradients does not register as failure.
    """
    with Tape() as tape:
        loss = f()
    grads = tape.gradients(loss, params=params.values())

    per_param: dict[str, float] = {}
    for name, p in params.items():
        analytic = grads[p]
        flat = p.data.reshape(-1)
        fd = np.zeros_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = f().item()
            flat[i] = orig - h
            down = f().item()
            flat[i] = orig
            fd[i] = (up - down) / (2.0 * h)
        fd = fd.reshape(p.data.shape)
        denom = np.maximum(np.maximum(np.abs(fd), np.abs(analytic)), denom_floor)
        per_param[name] = float((np.abs(fd - analytic) / denom).max())
    max_err = max(per_param.values()) if per_param else 0.0
    return FiniteDiffReport(max_rel_err=max_err, per_param=per_param, tol=tol)
