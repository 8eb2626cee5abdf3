"""Dense float64 tensors with a minimal reverse-mode gradient tape.

Tensors are plain numpy float64 arrays of rank 1-4. Only the primitives the
retrieval network actually needs are implemented: 2-D convolution
(cross-correlation, no kernel flip), ReLU, and non-overlapping 2x2 max
pooling. Other modules (pooling, similarity, hinge loss) register their own
backward rules through `register_backward`, so one tape can replay a full
descriptor-plus-loss pipeline.

All computation happens in float64; storage formats may narrow to float32
but arrays are widened before they reach these ops.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    """Operation inputs violate a shape precondition."""


def tensor(data) -> np.ndarray:
    """Coerce nested lists / arrays to the in-memory tensor type (float64)."""
    return np.asarray(data, dtype=np.float64)


def _require_f64(name: str, arr: np.ndarray) -> None:
    if not isinstance(arr, np.ndarray) or arr.dtype != np.float64:
        raise TypeError(f"{name} must be a float64 ndarray, got {type(arr).__name__}"
                        f"{'' if not isinstance(arr, np.ndarray) else f' of dtype {arr.dtype}'}")


# ---------------------------------------------------------------------------
# Gradient tape
# ---------------------------------------------------------------------------

@dataclass
class TapeEntry:
    """One recorded forward operation.

    `inputs` holds references to the exact arrays the op consumed (gradients
    are accumulated per array identity), `ctx` whatever the backward rule
    needs (saved columns, argmax positions, norms, ...).
    """
    op: str
    inputs: tuple
    output: np.ndarray
    ctx: dict = field(default_factory=dict)


_BACKWARD_FNS: dict = {}


def register_backward(op: str, fn) -> None:
    """Register the backward rule for an op name (used by other modules)."""
    _BACKWARD_FNS[op] = fn


class GradientTape:
    """Wengert list: operations recorded in execution order, replayed in
    strict reverse order to accumulate gradients.

    A tape is single-use and single-threaded: one tape per forward/backward
    pass, never shared. Entries keep references to their input/output arrays
    so identity-based gradient lookup stays valid for the tape's lifetime.
    """

    def __init__(self):
        self.entries: list[TapeEntry] = []
        self._grads: dict[int, np.ndarray] = {}

    def record(self, op: str, inputs: tuple, output: np.ndarray, ctx: dict | None = None) -> TapeEntry:
        entry = TapeEntry(op, inputs, output, ctx or {})
        self.entries.append(entry)
        return entry

    def backward(self, output: np.ndarray, upstream: np.ndarray | None = None) -> None:
        """Seed the gradient at `output` and replay all entries in reverse."""
        if not any(e.output is output for e in self.entries):
            raise ValueError("output was not produced by an operation recorded on this tape")
        if upstream is None:
            upstream = np.ones_like(output)
        if upstream.shape != output.shape:
            raise ShapeError(f"upstream gradient shape {upstream.shape} != output shape {output.shape}")
        self._grads = {id(output): np.asarray(upstream, dtype=np.float64)}
        for entry in reversed(self.entries):
            g = self._grads.get(id(entry.output))
            if g is None:
                continue
            try:
                backward_fn = _BACKWARD_FNS[entry.op]
            except KeyError:
                raise KeyError(f"no backward rule registered for op {entry.op!r}") from None
            input_grads = backward_fn(entry, g)
            if not isinstance(input_grads, tuple):
                input_grads = (input_grads,)
            for arr, ig in zip(entry.inputs, input_grads):
                if ig is None:
                    continue
                if ig.shape != arr.shape:
                    raise ShapeError(f"op {entry.op!r} produced gradient of shape {ig.shape} "
                                     f"for input of shape {arr.shape}")
                acc = self._grads.get(id(arr))
                self._grads[id(arr)] = ig if acc is None else acc + ig

    def gradient(self, arr: np.ndarray) -> np.ndarray | None:
        """Accumulated gradient for `arr`, or None if nothing flowed to it."""
        return self._grads.get(id(arr))


# ---------------------------------------------------------------------------
# Convolution (cross-correlation)
# ---------------------------------------------------------------------------

def conv2d_forward(x: np.ndarray, weights: np.ndarray, bias: np.ndarray,
                   stride: int = 1, padding: int = 0,
                   tape: GradientTape | None = None) -> np.ndarray:
    """2-D cross-correlation of a [C_in,H,W] input with [C_out,C_in,kH,kW] kernels.

    Output spatial dims: floor((H + 2*padding - kH)/stride) + 1, same for W.
    """
    _require_f64("input", x)
    _require_f64("weights", weights)
    _require_f64("bias", bias)
    if x.ndim != 3:
        raise ShapeError(f"conv input must be rank 3 [C,H,W], got shape {x.shape}")
    if weights.ndim != 4:
        raise ShapeError(f"conv weights must be rank 4 [C_out,C_in,kH,kW], got shape {weights.shape}")
    c_out, c_in, kh, kw = weights.shape
    if x.shape[0] != c_in:
        raise ShapeError(f"input has {x.shape[0]} channels but weights expect {c_in}")
    if bias.shape != (c_out,):
        raise ShapeError(f"bias shape {bias.shape} != ({c_out},)")
    if stride < 1:
        raise ShapeError(f"stride must be >= 1, got {stride}")
    if padding < 0:
        raise ShapeError(f"padding must be >= 0, got {padding}")
    _, h, w = x.shape
    if h + 2 * padding < kh or w + 2 * padding < kw:
        raise ShapeError(f"padded input {h + 2 * padding}x{w + 2 * padding} smaller than "
                         f"kernel {kh}x{kw}")

    xp = np.pad(x, ((0, 0), (padding, padding), (padding, padding))) if padding else x
    windows = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]
    h_out, w_out = windows.shape[1], windows.shape[2]
    cols = np.ascontiguousarray(windows.transpose(0, 3, 4, 1, 2)).reshape(c_in * kh * kw, h_out * w_out)
    out = (weights.reshape(c_out, -1) @ cols + bias[:, None]).reshape(c_out, h_out, w_out)
    if tape is not None:
        tape.record("conv2d", (x, weights, bias), out,
                    {"cols": cols, "stride": stride, "padding": padding})
    return out


def conv2d_backward(entry: TapeEntry, upstream: np.ndarray):
    """Gradients of a recorded conv2d: (input_grad, weight_grad, bias_grad)."""
    if not isinstance(entry, TapeEntry) or entry.op != "conv2d":
        raise ValueError("conv2d_backward needs a conv2d tape entry")
    x, weights, _bias = entry.inputs
    cols = entry.ctx["cols"]
    stride, padding = entry.ctx["stride"], entry.ctx["padding"]
    c_out, c_in, kh, kw = weights.shape
    _, h, w = x.shape
    h_out, w_out = entry.output.shape[1], entry.output.shape[2]

    g_mat = upstream.reshape(c_out, -1)
    bias_grad = upstream.sum(axis=(1, 2))
    weight_grad = (g_mat @ cols.T).reshape(weights.shape)

    cols_grad = (weights.reshape(c_out, -1).T @ g_mat).reshape(c_in, kh, kw, h_out, w_out)
    dxp = np.zeros((c_in, h + 2 * padding, w + 2 * padding))
    for u in range(kh):
        for v in range(kw):
            dxp[:, u:u + (h_out - 1) * stride + 1:stride,
                v:v + (w_out - 1) * stride + 1:stride] += cols_grad[:, u, v]
    input_grad = dxp[:, padding:padding + h, padding:padding + w]
    if padding:
        input_grad = np.ascontiguousarray(input_grad)
    return input_grad, weight_grad, bias_grad


# ---------------------------------------------------------------------------
# ReLU
# ---------------------------------------------------------------------------

def relu_forward(x: np.ndarray, tape: GradientTape | None = None) -> np.ndarray:
    _require_f64("input", x)
    out = np.maximum(x, 0.0)
    if tape is not None:
        tape.record("relu", (x,), out)
    return out


def relu_backward(entry: TapeEntry, upstream: np.ndarray):
    """Passes gradient where x > 0; subgradient 0 at exactly 0."""
    if not isinstance(entry, TapeEntry) or entry.op != "relu":
        raise ValueError("relu_backward needs a relu tape entry")
    (x,) = entry.inputs
    return (upstream * (x > 0.0),)


# ---------------------------------------------------------------------------
# 2x2 max pooling
# ---------------------------------------------------------------------------

def maxpool2_forward(x: np.ndarray, tape: GradientTape | None = None) -> np.ndarray:
    """Non-overlapping 2x2 max pool; requires even spatial dims."""
    _require_f64("input", x)
    if x.ndim != 3:
        raise ShapeError(f"maxpool input must be rank 3 [C,H,W], got shape {x.shape}")
    c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2 needs even spatial dims, got {h}x{w}")
    windows = x.reshape(c, h // 2, 2, w // 2, 2).transpose(0, 1, 3, 2, 4).reshape(c, h // 2, w // 2, 4)
    # argmax returns the first maximum: window positions are ordered
    # (0,0),(0,1),(1,0),(1,1), i.e. row-major, so ties break deterministically
    idx = windows.argmax(axis=-1)
    out = np.take_along_axis(windows, idx[..., None], axis=-1)[..., 0]
    if tape is not None:
        tape.record("maxpool2", (x,), out, {"idx": idx})
    return out


def maxpool2_backward(entry: TapeEntry, upstream: np.ndarray):
    """Routes gradient to each window's argmax position."""
    if not isinstance(entry, TapeEntry) or entry.op != "maxpool2":
        raise ValueError("maxpool2_backward needs a maxpool2 tape entry")
    (x,) = entry.inputs
    idx = entry.ctx["idx"]
    c, h, w = x.shape
    g4 = np.zeros((c, h // 2, w // 2, 4))
    np.put_along_axis(g4, idx[..., None], upstream[..., None], axis=-1)
    dx = g4.reshape(c, h // 2, w // 2, 2, 2).transpose(0, 1, 3, 2, 4).reshape(c, h, w)
    return (dx,)


register_backward("conv2d", conv2d_backward)
register_backward("relu", relu_backward)
register_backward("maxpool2", maxpool2_backward)
