"""Reverse-mode automatic differentiation over dense numpy matrices.

Every differentiable operation builds a node in a dynamic graph that is
rebuilt on each forward pass. Values are float32 by default (float64 graphs
are supported and used by the gradient-check oracles); reductions such as
softmax denominators and norms accumulate in float64 regardless of the
graph dtype.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import (
    ConfigurationError,
    ContractError,
    DegenerateInputError,
    DimensionError,
)

DEFAULT_DTYPE = np.float32

_grad_enabled = True


class no_grad:
    """Context manager that disables graph construction (inference mode)."""

    def __enter__(self):
        global _grad_enabled
        self._saved = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._saved
        return False


class Tensor:
    """A dense array with an accumulated gradient and backward recipe.

    ``value`` is the forward result; ``grad`` has the same shape and holds
    d(loss)/d(self) after ``backward()`` has run. Gradients accumulate
    across backward calls until explicitly cleared.
    """

    __slots__ = ("value", "_grad", "_parents", "_backward")

    def __init__(self, value, parents=(), backward=None):
        arr = np.asarray(value)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.value = arr
        self._grad = None
        if _grad_enabled:
            self._parents = tuple(parents)
            self._backward = backward
        else:
            self._parents = ()
            self._backward = None

    @property
    def shape(self):
        return self.value.shape

    @property
    def grad(self) -> np.ndarray:
        if self._grad is None:
            self._grad = np.zeros_like(self.value)
        return self._grad

    def accumulate_grad(self, g) -> None:
        if self._grad is None:
            self._grad = np.array(g, dtype=self.value.dtype, copy=True)
            if self._grad.shape != self.value.shape:
                self._grad = np.broadcast_to(self._grad, self.value.shape).copy()
        else:
            self._grad += g

    def zero_grad(self) -> None:
        self._grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.value)

    def item(self) -> float:
        if self.value.size != 1:
            raise ContractError(f"item() needs a scalar, got shape {self.value.shape}")
        return float(self.value.reshape(()))

    def backward(self) -> None:
        backward(self)

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Tensor(shape={self.value.shape}, dtype={self.value.dtype})"


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x, dtype=dtype) if dtype is not None else np.asarray(x)
    return Tensor(arr)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a gradient over the axes numpy broadcast during the forward op."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_value = a.value + b.value

    def bw(out):
        g = out.grad
        a.accumulate_grad(_unbroadcast(g, a.value.shape))
        b.accumulate_grad(_unbroadcast(g, b.value.shape))

    return Tensor(out_value, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_value = a.value - b.value

    def bw(out):
        g = out.grad
        a.accumulate_grad(_unbroadcast(g, a.value.shape))
        b.accumulate_grad(-_unbroadcast(g, b.value.shape))

    return Tensor(out_value, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_value = a.value * b.value

    def bw(out):
        g = out.grad
        a.accumulate_grad(_unbroadcast(g * b.value, a.value.shape))
        b.accumulate_grad(_unbroadcast(g * a.value, b.value.shape))

    return Tensor(out_value, (a, b), bw)


def scale(a, k: float) -> Tensor:
    a = as_tensor(a)
    k = float(k)
    out_value = a.value * k

    def bw(out):
        a.accumulate_grad(out.grad * k)

    return Tensor(out_value, (a,), bw)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.value.ndim != 2 or b.value.ndim != 2:
        raise DimensionError(
            f"matmul needs 2-D operands, got {a.value.shape} and {b.value.shape}"
        )
    if a.value.shape[1] != b.value.shape[0]:
        raise DimensionError(
            f"matmul shape mismatch: {a.value.shape} x {b.value.shape}"
        )
    out_value = a.value @ b.value

    def bw(out):
        g = out.grad
        a.accumulate_grad(g @ b.value.T)
        b.accumulate_grad(a.value.T @ g)

    return Tensor(out_value, (a, b), bw)


def transpose(a) -> Tensor:
    a = as_tensor(a)
    if a.value.ndim != 2:
        raise DimensionError(f"transpose needs a 2-D operand, got {a.value.shape}")
    out_value = a.value.T.copy()

    def bw(out):
        a.accumulate_grad(out.grad.T)

    return Tensor(out_value, (a,), bw)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    out_value = a.value.reshape(shape)

    def bw(out):
        a.accumulate_grad(out.grad.reshape(a.value.shape))

    return Tensor(out_value, (a,), bw)


def concat_rows(parts: Sequence) -> Tensor:
    """Stack 2-D blocks along the row axis."""
    parts = [as_tensor(p) for p in parts]
    if not parts:
        raise DimensionError("concat_rows needs at least one block")
    out_value = np.concatenate([p.value for p in parts], axis=0)
    sizes = [p.value.shape[0] for p in parts]

    def bw(out):
        g = out.grad
        start = 0
        for p, n in zip(parts, sizes):
            p.accumulate_grad(g[start : start + n])
            start += n

    return Tensor(out_value, tuple(parts), bw)


def sum_all(a) -> Tensor:
    a = as_tensor(a)
    out_value = np.array(
        [[a.value.sum(dtype=np.float64)]], dtype=a.value.dtype
    )

    def bw(out):
        a.accumulate_grad(np.full_like(a.value, out.grad.reshape(())))

    return Tensor(out_value, (a,), bw)


def mean_rows(a) -> Tensor:
    """Mean over the row axis of a 2-D matrix; returns a 1 x cols row."""
    a = as_tensor(a)
    if a.value.ndim != 2 or a.value.shape[0] == 0:
        raise DegenerateInputError(
            f"mean_rows needs a non-empty 2-D matrix, got shape {a.value.shape}"
        )
    n = a.value.shape[0]
    out_value = (
        a.value.mean(axis=0, keepdims=True, dtype=np.float64).astype(a.value.dtype)
    )

    def bw(out):
        a.accumulate_grad(np.broadcast_to(out.grad / n, a.value.shape))

    return Tensor(out_value, (a,), bw)


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out_value = np.tanh(a.value)

    def bw(out):
        a.accumulate_grad(out.grad * (1.0 - out.value * out.value))

    return Tensor(out_value, (a,), bw)


def relu(a) -> Tensor:
    a = as_tensor(a)
    out_value = np.maximum(a.value, 0)

    def bw(out):
        a.accumulate_grad(out.grad * (a.value > 0))

    return Tensor(out_value, (a,), bw)


def sqrt(a, eps: float = 0.0) -> Tensor:
    """Elementwise sqrt(a + eps); eps > 0 keeps the gradient finite at 0."""
    a = as_tensor(a)
    out_value = np.sqrt(a.value + eps)

    def bw(out):
        a.accumulate_grad(out.grad * 0.5 / out.value)

    return Tensor(out_value, (a,), bw)


def softmax_columns(e) -> Tensor:
    """Column-wise softmax of an N x S matrix: each column sums to 1.

    Normalization runs over the row (token) axis with max-subtraction and a
    float64 denominator for stability under large-magnitude logits.
    """
    e = as_tensor(e)
    if e.value.ndim != 2 or e.value.size == 0:
        raise DimensionError(
            f"softmax_columns needs a non-empty 2-D matrix, got shape {e.value.shape}"
        )
    shifted = e.value.astype(np.float64)
    shifted -= shifted.max(axis=0, keepdims=True)
    ex = np.exp(shifted)
    out64 = ex / ex.sum(axis=0, keepdims=True)
    out_value = out64.astype(e.value.dtype)

    def bw(out):
        g = out.grad.astype(np.float64)
        dot = (out64 * g).sum(axis=0, keepdims=True)
        e.accumulate_grad(out64 * (g - dot))

    return Tensor(out_value, (e,), bw)


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Per-row normalization over the feature axis, then an affine map.

    Each row is shifted to mean 0 and scaled to unit variance (population
    variance plus ``eps``) before ``gain``/``bias`` are applied.
    """
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    if x.value.ndim != 2:
        raise DimensionError(f"layer_norm needs a 2-D input, got shape {x.value.shape}")
    cols = x.value.shape[1]
    if cols < 2:
        raise DegenerateInputError(
            f"layer_norm over {cols} feature(s) is degenerate; need at least 2"
        )
    if gain.value.size != cols or bias.value.size != cols:
        raise DimensionError(
            f"gain/bias sizes {gain.value.size}/{bias.value.size} do not match {cols} columns"
        )
    g_row = gain.value.reshape(1, cols)
    b_row = bias.value.reshape(1, cols)

    x64 = x.value.astype(np.float64)
    mu = x64.mean(axis=1, keepdims=True)
    var = ((x64 - mu) ** 2).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x64 - mu) * inv
    out_value = (xhat * g_row + b_row).astype(x.value.dtype)

    def bw(out):
        g = out.grad.astype(np.float64)
        gxhat = g * g_row
        m1 = gxhat.mean(axis=1, keepdims=True)
        m2 = (gxhat * xhat).mean(axis=1, keepdims=True)
        x.accumulate_grad(inv * (gxhat - m1 - xhat * m2))
        gain.accumulate_grad((g * xhat).sum(axis=0).reshape(gain.value.shape))
        bias.accumulate_grad(g.sum(axis=0).reshape(bias.value.shape))

    return Tensor(out_value, (x, gain, bias), bw)


def l2_normalize(x) -> Tensor:
    """Normalize the whole array to unit Euclidean norm; rejects near-zero input."""
    x = as_tensor(x)
    norm = float(np.sqrt(np.sum(x.value.astype(np.float64) ** 2)))
    if norm <= 1e-12:
        raise DegenerateInputError(f"cannot normalize vector with norm {norm:.3e}")
    out64 = x.value.astype(np.float64) / norm
    out_value = out64.astype(x.value.dtype)

    def bw(out):
        g = out.grad.astype(np.float64)
        proj = np.sum(out64 * g)
        x.accumulate_grad((g - out64 * proj) / norm)

    return Tensor(out_value, (x,), bw)


def l2_normalize_rows(x) -> Tensor:
    """Normalize each row to unit norm; rows with norm below 1e-12 pass through as zeros."""
    x = as_tensor(x)
    if x.value.ndim != 2:
        raise DimensionError(f"l2_normalize_rows needs a 2-D input, got {x.value.shape}")
    x64 = x.value.astype(np.float64)
    norms = np.sqrt((x64**2).sum(axis=1, keepdims=True))
    live = norms > 1e-12
    safe = np.where(live, norms, 1.0)
    out64 = np.where(live, x64 / safe, 0.0)
    out_value = out64.astype(x.value.dtype)

    def bw(out):
        g = out.grad.astype(np.float64)
        proj = (out64 * g).sum(axis=1, keepdims=True)
        x.accumulate_grad(np.where(live, (g - out64 * proj) / safe, 0.0))

    return Tensor(out_value, (x,), bw)


def mlp_forward(x, layers: Sequence, activation: str = "tanh") -> Tensor:
    """Apply a stack of (weight, bias) layers; the final layer has no activation.

    ``layers`` holds (W, b) pairs with W of shape (in, out) and b of shape
    (1, out); consecutive widths must chain with the input's column count.
    """
    if activation not in ("tanh", "relu"):
        raise ConfigurationError(f"unknown activation {activation!r}")
    act = tanh if activation == "tanh" else relu
    h = as_tensor(x)
    n_layers = len(layers)
    if n_layers == 0:
        raise ConfigurationError("mlp_forward needs at least one layer")
    for i, (w, b) in enumerate(layers):
        w, b = as_tensor(w), as_tensor(b)
        if h.value.shape[1] != w.value.shape[0]:
            raise ConfigurationError(
                f"layer {i}: input width {h.value.shape[1]} does not chain with "
                f"weight shape {w.value.shape}"
            )
        h = add(matmul(h, w), b)
        if i < n_layers - 1:
            h = act(h)
    return h


def _topo_order(root: Tensor) -> list:
    """Parents-first ordering of the graph reachable from root (iterative DFS)."""
    order = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in visited:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate gradients of everything the scalar loss depends on.

    Repeated calls without clearing gradients accumulate, which batch loops
    rely on; parameters are cleared by the optimizer step.
    """
    if loss.value.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.value.shape}")
    order = _topo_order(loss)
    for node in order:
        if node._parents:
            node._grad = None
    loss.accumulate_grad(np.ones_like(loss.value))
    for node in reversed(order):
        if node._backward is not None:
            node._backward(node)


def finite_difference_grad(
    f: Callable[[], float], param: np.ndarray, h: float = 1e-3
) -> np.ndarray:
    """Central-difference gradient estimate of f with respect to param.

    ``param`` is perturbed in place entry by entry and restored afterwards;
    ``f`` must be deterministic and read the array by reference.
    """
    if not 1e-5 <= h <= 1e-2:
        raise ContractError(f"step size {h} outside [1e-5, 1e-2]")
    grad = np.zeros(param.shape, dtype=np.float64)
    flat = param.reshape(-1)
    gflat = grad.reshape(-1)
    for k in range(flat.size):
        saved = flat[k]
        flat[k] = saved + h
        f_plus = f()
        flat[k] = saved - h
        f_minus = f()
        flat[k] = saved
        gflat[k] = (f_plus - f_minus) / (2.0 * h)
    return grad
