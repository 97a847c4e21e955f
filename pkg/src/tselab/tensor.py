"""Tape-based reverse-mode automatic differentiation on float64 arrays.

Every value is a :class:`Tensor` wrapping a ``numpy`` float64 array.  While a
:class:`Tape` is active (``with Tape() as tape:``), each operation whose
result requires gradients appends one node to the tape; ``tape.backward(loss)``
replays the nodes in reverse execution order exactly once and populates
``.grad`` on every reachable tensor with ``requires_grad=True``.

Design rules:

- float64 everywhere; no implicit broadcasting except scalar-with-tensor
  (shape mismatches raise :class:`~tselab.errors.ShapeError`);
- ``relu`` has gradient 0 at exactly 0;
- a tape can be backpropagated once; a second call raises
  :class:`~tselab.errors.GraphError`;
- tapes are single-threaded, tracked per-thread, so independent tapes may run
  on separate threads.
"""

from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np

from .errors import DomainError, GraphError, ShapeError

_LOCAL = threading.local()


def _tape_stack() -> list:
    stack = getattr(_LOCAL, "stack", None)
    if stack is None:
        stack = []
        _LOCAL.stack = stack
    return stack


def active_tape():
    """Innermost active tape on this thread, or None."""
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """N-dimensional float64 array, optionally tracked for gradients."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # Arithmetic operators delegate to module ops; python scalars are allowed.
    def __add__(self, other):
        return add(self, as_tensor(other))

    def __radd__(self, other):
        return add(as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, as_tensor(other))

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, as_tensor(other))

    def __rmul__(self, other):
        return mul(as_tensor(other), self)

    def __truediv__(self, other):
        return div(self, as_tensor(other))

    def __rtruediv__(self, other):
        return div(as_tensor(other), self)

    def __matmul__(self, other):
        return matmul(self, as_tensor(other))

    def __neg__(self):
        return scale(self, -1.0)


def as_tensor(value) -> Tensor:
    """Pass through tensors; wrap numbers/arrays as constant tensors."""
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


class _Node:
    __slots__ = ("output", "inputs", "vjps")

    def __init__(self, output: Tensor, inputs: tuple, vjps: tuple):
        self.output = output
        self.inputs = inputs
        self.vjps = vjps


class Tape:
    """Append-only record of executed operations; one backward pass allowed."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self._output_ids: set[int] = set()
        self._consumed = False

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        stack = _tape_stack()
        if not stack or stack[-1] is not self:
            raise GraphError("tape stack corrupted: exiting a non-innermost tape")
        stack.pop()

    def _record(self, output: Tensor, inputs: tuple, vjps: tuple) -> None:
        self.nodes.append(_Node(output, inputs, vjps))
        self._output_ids.add(id(output))

    def backward(self, loss: Tensor) -> None:
        """Populate ``.grad`` with d(loss)/d(tensor) for every reachable
        requires_grad tensor. ``loss`` must be a scalar produced on this tape."""
        if self._consumed:
            raise GraphError("backward() already called on this tape; build a new tape")
        if loss.data.size != 1:
            raise GraphError(f"loss must be scalar, got shape {loss.shape}")
        if id(loss) not in self._output_ids:
            raise GraphError("loss is detached: it was not produced on this tape")
        self._consumed = True

        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        holders: dict[int, Tensor] = {id(loss): loss}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.output), None)
            if g is None:
                continue
            holders.pop(id(node.output), None)
            if node.output.requires_grad:
                out = node.output
                out.grad = g if out.grad is None else out.grad + g
            for inp, vjp in zip(node.inputs, node.vjps):
                if vjp is None or not inp.requires_grad:
                    continue
                contrib = vjp(g)
                prev = grads.get(id(inp))
                grads[id(inp)] = contrib if prev is None else prev + contrib
                holders[id(inp)] = inp
        # whatever is left belongs to leaves
        for tid, g in grads.items():
            leaf = holders[tid]
            if leaf.requires_grad:
                leaf.grad = g if leaf.grad is None else leaf.grad + g


def backward(loss: Tensor) -> None:
    """Backpropagate from ``loss`` through the innermost active tape."""
    tape = active_tape()
    if tape is None:
        raise GraphError("no active tape: wrap the computation in `with Tape() as t:`")
    tape.backward(loss)


def _emit(out_data: np.ndarray, inputs: Sequence[Tensor], vjps: Sequence) -> Tensor:
    """Wrap an op result, recording it on the active tape when needed."""
    out = Tensor(out_data, requires_grad=any(t.requires_grad for t in inputs))
    tape = active_tape()
    if tape is not None and out.requires_grad:
        tape._record(out, tuple(inputs), tuple(vjps))
    return out


def custom_op(out_data: np.ndarray, inputs: Sequence[Tensor],
              vjps: Sequence[Callable[[np.ndarray], np.ndarray] | None]) -> Tensor:
    """Public hook for modules that define their own differentiable ops.

    ``vjps[i]`` maps the cotangent of the output to the cotangent of
    ``inputs[i]`` (same shape as that input), or is None for non-differentiable
    inputs.
    """
    return _emit(out_data, inputs, vjps)


# ---------------------------------------------------------------------------
# elementwise ops (strict shapes, scalar broadcast only)
# ---------------------------------------------------------------------------

def _binary_check(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape == b.shape or a.size == 1 or b.size == 1:
        return
    raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ and neither is scalar")


def _reduce_to(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a cotangent down to `shape` (identity, or scalar reduction)."""
    if g.shape == shape:
        return g
    return np.sum(g).reshape(shape) if np.prod(shape, dtype=int) == 1 else g


def add(a: Tensor, b: Tensor) -> Tensor:
    _binary_check(a, b, "add")
    return _emit(a.data + b.data, (a, b),
                 (lambda g: _reduce_to(g, a.shape), lambda g: _reduce_to(g, b.shape)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _binary_check(a, b, "sub")
    return _emit(a.data - b.data, (a, b),
                 (lambda g: _reduce_to(g, a.shape), lambda g: _reduce_to(-g, b.shape)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _binary_check(a, b, "mul")
    return _emit(a.data * b.data, (a, b),
                 (lambda g: _reduce_to(g * b.data, a.shape),
                  lambda g: _reduce_to(g * a.data, b.shape)))


def div(a: Tensor, b: Tensor) -> Tensor:
    _binary_check(a, b, "div")
    if np.any(b.data == 0.0):
        raise DomainError("div: zero in denominator")
    inv = 1.0 / b.data
    return _emit(a.data * inv, (a, b),
                 (lambda g: _reduce_to(g * inv, a.shape),
                  lambda g: _reduce_to(-g * a.data * inv * inv, b.shape)))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _emit(a.data * c, (a,), (lambda g: g * c,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0.0  # gradient 0 at exactly 0 by convention
    return _emit(np.where(mask, a.data, 0.0), (a,), (lambda g: g * mask,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _emit(out, (a,), (lambda g: g * out,))


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0.0):
        raise DomainError("log: non-positive input")
    return _emit(np.log(a.data), (a,), (lambda g: g / a.data,))


def sqrt(a: Tensor) -> Tensor:
    if np.any(a.data < 0.0):
        raise DomainError("sqrt: negative input")
    out = np.sqrt(a.data)
    return _emit(out, (a,), (lambda g: g * (0.5 / np.maximum(out, 1e-300)),))


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    out = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                   np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    return _emit(out, (a,), (lambda g: g * out * (1.0 - out),))


# ---------------------------------------------------------------------------
# linear algebra / shape ops
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product on the last two axes; leading batch axes must match
    exactly (no broadcasting)."""
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands must have ndim >= 2, got {a.shape} x {b.shape}")
    if a.shape[-1] != b.shape[-2] or a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} x {b.shape}")

    def _sw(x: np.ndarray) -> np.ndarray:
        return np.swapaxes(x, -1, -2)

    return _emit(np.matmul(a.data, b.data), (a, b),
                 (lambda g: np.matmul(g, _sw(b.data)),
                  lambda g: np.matmul(_sw(a.data), g)))


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Row-stable softmax: exp-normalize after max subtraction."""
    x = a.data
    shifted = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / np.sum(e, axis=axis, keepdims=True)

    def _vjp(g: np.ndarray) -> np.ndarray:
        dot = np.sum(g * out, axis=axis, keepdims=True)
        return (g - dot) * out

    return _emit(out, (a,), (_vjp,))


def layernorm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layernorm: gain/bias must have shape ({d},), "
                         f"got {gain.shape} and {bias.shape}")
    mu = np.mean(x.data, axis=-1, keepdims=True)
    xc = x.data - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xn = xc * inv_std
    out = xn * gain.data + bias.data

    lead = tuple(range(x.ndim - 1))

    def _vjp_x(g: np.ndarray) -> np.ndarray:
        dxn = g * gain.data
        return (dxn - np.mean(dxn, axis=-1, keepdims=True)
                - xn * np.mean(dxn * xn, axis=-1, keepdims=True)) * inv_std

    return _emit(out, (x, gain, bias),
                 (_vjp_x,
                  lambda g: np.sum(g * xn, axis=lead),
                  lambda g: np.sum(g, axis=lead)))


def _conv_indices(length: int, kernel: int, stride: int, dilation: int) -> np.ndarray:
    span = (kernel - 1) * dilation + 1
    n_out = (length - span) // stride + 1
    return (stride * np.arange(n_out)[None, :]
            + dilation * np.arange(kernel)[:, None])  # [kernel, n_out]


def conv1d(x: Tensor, kernels: Tensor, stride: int = 1, dilation: int = 1) -> Tensor:
    """Valid (no padding) 1-D convolution: x[C_in, L] * kernels[C_out, C_in, k]
    -> [C_out, L'] with L' = floor((L - span)/stride) + 1."""
    if x.ndim != 2 or kernels.ndim != 3:
        raise ShapeError(f"conv1d: expected x[C_in, L] and kernels[C_out, C_in, k], "
                         f"got {x.shape} and {kernels.shape}")
    c_in, length = x.shape
    c_out, kc_in, kw = kernels.shape
    if kc_in != c_in:
        raise ShapeError(f"conv1d: channel mismatch x has {c_in}, kernels expect {kc_in}")
    span = (kw - 1) * dilation + 1
    if length < span:
        raise ShapeError(f"conv1d: input too short, length {length} < kernel span {span}")
    idx = _conv_indices(length, kw, stride, dilation)  # [kw, L']
    cols = x.data[:, idx].reshape(c_in * kw, -1)       # [C_in*kw, L']
    w = kernels.data.reshape(c_out, c_in * kw)
    out = w @ cols

    def _vjp_x(g: np.ndarray) -> np.ndarray:
        dcols = (w.T @ g).reshape(c_in, kw, -1)
        dx = np.zeros_like(x.data)
        np.add.at(dx, (np.arange(c_in)[:, None, None], idx[None, :, :]), dcols)
        return dx

    def _vjp_k(g: np.ndarray) -> np.ndarray:
        return (g @ cols.T).reshape(c_out, c_in, kw)

    return _emit(out, (x, kernels), (_vjp_x, _vjp_k))


def conv1d_transpose(y: Tensor, kernels: Tensor, stride: int = 1,
                     dilation: int = 1) -> Tensor:
    """Adjoint of :func:`conv1d` for fixed kernels: y[C_out, L'] with
    kernels[C_out, C_in, k] -> [C_in, L], L = (L' - 1)*stride + span."""
    if y.ndim != 2 or kernels.ndim != 3:
        raise ShapeError(f"conv1d_transpose: expected y[C_out, L'] and "
                         f"kernels[C_out, C_in, k], got {y.shape} and {kernels.shape}")
    c_out, n_out = y.shape
    kc_out, c_in, kw = kernels.shape
    if kc_out != c_out:
        raise ShapeError(f"conv1d_transpose: channel mismatch y has {c_out}, "
                         f"kernels expect {kc_out}")
    if n_out < 1:
        raise ShapeError("conv1d_transpose: empty input")
    span = (kw - 1) * dilation + 1
    length = (n_out - 1) * stride + span
    idx = _conv_indices(length, kw, stride, dilation)  # [kw, L']
    w = kernels.data.reshape(c_out, c_in * kw)
    pieces = (w.T @ y.data).reshape(c_in, kw, n_out)
    out = np.zeros((c_in, length))
    np.add.at(out, (np.arange(c_in)[:, None, None], idx[None, :, :]), pieces)

    def _vjp_y(g: np.ndarray) -> np.ndarray:
        cols = g[:, idx].reshape(c_in * kw, n_out)
        return w @ cols

    def _vjp_k(g: np.ndarray) -> np.ndarray:
        cols = g[:, idx].reshape(c_in * kw, n_out)
        return (y.data @ cols.T).reshape(c_out, c_in, kw)

    return _emit(out, (y, kernels), (_vjp_y, _vjp_k))


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = np.sum(a.data, axis=axis, keepdims=keepdims)

    def _vjp(g: np.ndarray) -> np.ndarray:
        if axis is None:
            return np.broadcast_to(g.reshape((1,) * a.ndim), a.shape).copy()
        gg = g if keepdims else np.expand_dims(g, axis)
        return np.broadcast_to(gg, a.shape).copy()

    return _emit(out, (a,), (_vjp,))


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = a.size if axis is None else a.shape[axis]
    return scale(tsum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = np.argsort(axes)
    return _emit(np.transpose(a.data, axes), (a,),
                 (lambda g: np.transpose(g, inv),))


def reshape(a: Tensor, shape) -> Tensor:
    return _emit(a.data.reshape(shape), (a,),
                 (lambda g: g.reshape(a.shape),))


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    arrays = [p.data for p in parts]
    sizes = [arr.shape[axis] for arr in arrays]
    bounds = np.cumsum(sizes)[:-1]

    def _make_vjp(i: int):
        def _vjp(g: np.ndarray) -> np.ndarray:
            return np.split(g, bounds, axis=axis)[i]
        return _vjp

    return _emit(np.concatenate(arrays, axis=axis), tuple(parts),
                 tuple(_make_vjp(i) for i in range(len(parts))))


def expand(a: Tensor, shape) -> Tensor:
    """Explicit broadcast to `shape`; gradient sums over the expanded axes."""
    shape = tuple(shape)
    out = np.broadcast_to(a.data, shape)

    def _vjp(g: np.ndarray) -> np.ndarray:
        pad = len(shape) - a.ndim
        gg = g
        if pad:
            gg = gg.sum(axis=tuple(range(pad)))
        axes = tuple(i for i, (sa, so) in enumerate(zip(a.shape, gg.shape)) if sa != so)
        if axes:
            gg = gg.sum(axis=axes, keepdims=True)
        return gg.reshape(a.shape)

    return _emit(out.copy(), (a,), (_vjp,))


def parameter(rng: np.random.Generator, shape, fan_in: int | None = None,
              fan_out: int | None = None) -> Tensor:
    """Glorot-uniform initialized learnable tensor."""
    shape = tuple(shape)
    if fan_in is None or fan_out is None:
        if len(shape) == 1:
            fan_in = fan_out = shape[0]
        else:
            fan_in, fan_out = shape[-2], shape[-1]
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-limit, limit, size=shape), requires_grad=True)


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=requires_grad)
