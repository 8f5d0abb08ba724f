"""Dense float64 tensors with reverse-mode automatic differentiation.

The operation set is exactly what the models in this package need: conv2d,
max pooling, dense layers, softmax/log-softmax, elementwise arithmetic and a
few reductions. Everything is float64 and shape-strict: elementwise ops never
broadcast, mismatches raise :class:`ShapeError` naming both shapes.

Convolution uses the cross-correlation convention (no kernel flip).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from fuselab.errors import ContractError, DegenerateInputError, NonFiniteError, ShapeError

Array = np.ndarray


class Tensor:
    """N-dimensional float64 array with an optional gradient buffer.

    Tensors produced by the ops below remember their inputs and a backward
    rule, forming an implicit acyclic graph that :func:`backward` walks in
    reverse topological order.
    """

    __slots__ = ("data", "grad", "requires_grad", "op", "_inputs", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: Array | None = None
        self.requires_grad = requires_grad
        self.op = "leaf"
        self._inputs: tuple[Tensor, ...] = ()
        self._backward: Callable[[Array], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def assert_finite(self, context: str = "tensor") -> "Tensor":
        if not np.all(np.isfinite(self.data)):
            raise NonFiniteError(f"{context}: non-finite value in tensor of shape {self.shape}")
        return self

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

    # Small-expression conveniences; all shape-strict.
    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __mul__(self, other: "Tensor") -> "Tensor":
        return mul(self, other)

    def __neg__(self) -> "Tensor":
        return scale(self, -1.0)

    def sum(self) -> "Tensor":
        return sum_all(self)

    def mean(self) -> "Tensor":
        return mean_all(self)


@dataclass
class Graph:
    """Recorded operations of one forward pass, inputs before outputs."""

    nodes: list[Tensor]

    @classmethod
    def from_root(cls, root: Tensor) -> "Graph":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for inp in node._inputs:
                if id(inp) not in seen:
                    stack.append((inp, False))
        return cls(order)


def backward(loss: Tensor, graph: Graph | None = None) -> None:
    """Populate ``grad`` on every tensor the scalar ``loss`` depends on.

    Gradients accumulate additively across fan-out, so each node's rule runs
    exactly once, in reverse topological order.
    """
    if loss.data.ndim != 0:
        raise ContractError(f"backward: loss must be scalar, got shape {loss.shape}")
    if graph is None:
        graph = Graph.from_root(loss)
    loss.grad = np.ones((), dtype=np.float64)
    for node in reversed(graph.nodes):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


def _accumulate(t: Tensor, g: Array) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _node(data: Array, op: str, inputs: Sequence[Tensor], rule: Callable[[Array], None]) -> Tensor:
    out = Tensor(data)
    out.op = op
    if any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._inputs = tuple(inputs)
        out._backward = rule
    return out


def _require_same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape("add", a, b)

    def rule(g: Array) -> None:
        _accumulate(a, g)
        _accumulate(b, g)

    return _node(a.data + b.data, "add", (a, b), rule)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape("sub", a, b)

    def rule(g: Array) -> None:
        _accumulate(a, g)
        _accumulate(b, -g)

    return _node(a.data - b.data, "sub", (a, b), rule)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape("mul", a, b)

    def rule(g: Array) -> None:
        _accumulate(a, g * b.data)
        _accumulate(b, g * a.data)

    return _node(a.data * b.data, "mul", (a, b), rule)


def scale(x: Tensor, c: float) -> Tensor:
    def rule(g: Array) -> None:
        _accumulate(x, g * c)

    return _node(x.data * c, "scale", (x,), rule)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def rule(g: Array) -> None:
        _accumulate(x, g * mask)

    return _node(np.maximum(x.data, 0.0), "relu", (x,), rule)


def log(x: Tensor) -> Tensor:
    def rule(g: Array) -> None:
        _accumulate(x, g / x.data)

    return _node(np.log(x.data), "log", (x,), rule)


def exp(x: Tensor) -> Tensor:
    out_data = np.exp(x.data)

    def rule(g: Array) -> None:
        _accumulate(x, g * out_data)

    return _node(out_data, "exp", (x,), rule)


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    # Gradient passes only where the value was left unchanged.
    inside = (x.data > lo) & (x.data < hi)

    def rule(g: Array) -> None:
        _accumulate(x, g * inside)

    return _node(np.clip(x.data, lo, hi), "clip", (x,), rule)


# ---------------------------------------------------------------------------
# reductions and reshaping


def sum_all(x: Tensor) -> Tensor:
    def rule(g: Array) -> None:
        _accumulate(x, np.full_like(x.data, float(g)))

    return _node(np.asarray(x.data.sum()), "sum", (x,), rule)


def mean_all(x: Tensor) -> Tensor:
    n = x.data.size

    def rule(g: Array) -> None:
        _accumulate(x, np.full_like(x.data, float(g) / n))

    return _node(np.asarray(x.data.mean()), "mean", (x,), rule)


def flatten(x: Tensor) -> Tensor:
    """Collapse to rank 1, or to (batch, features) for rank-4 input."""
    if x.ndim == 4:
        new_shape: tuple[int, ...] = (x.shape[0], -1)
    else:
        new_shape = (-1,)
    out_data = x.data.reshape(new_shape)

    def rule(g: Array) -> None:
        _accumulate(x, g.reshape(x.shape))

    return _node(out_data, "flatten", (x,), rule)


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    out_data = x.data.reshape(shape)

    def rule(g: Array) -> None:
        _accumulate(x, g.reshape(x.shape))

    return _node(out_data, "reshape", (x,), rule)


def transpose(x: Tensor) -> Tensor:
    if x.ndim != 2:
        raise ShapeError(f"transpose: expected rank 2, got shape {x.shape}")

    def rule(g: Array) -> None:
        _accumulate(x, g.T)

    return _node(x.data.T, "transpose", (x,), rule)


def concat(a: Tensor, b: Tensor) -> Tensor:
    """Join two rank-1 tensors; entries of ``a`` come first."""
    if a.ndim != 1 or b.ndim != 1:
        raise ShapeError(f"concat: expected two rank-1 tensors, got shapes {a.shape} and {b.shape}")
    n = a.shape[0]

    def rule(g: Array) -> None:
        _accumulate(a, g[:n])
        _accumulate(b, g[n:])

    return _node(np.concatenate([a.data, b.data]), "concat", (a, b), rule)


def concat_cols(a: Tensor, b: Tensor) -> Tensor:
    """Batched concat: (N, na) and (N, nb) to (N, na+nb)."""
    if a.ndim != 2 or b.ndim != 2 or a.shape[0] != b.shape[0]:
        raise ShapeError(f"concat_cols: incompatible shapes {a.shape} and {b.shape}")
    n = a.shape[1]

    def rule(g: Array) -> None:
        _accumulate(a, g[:, :n])
        _accumulate(b, g[:, n:])

    return _node(np.concatenate([a.data, b.data], axis=1), "concat_cols", (a, b), rule)


def gather_rows(x: Tensor, indices: Sequence[int]) -> Tensor:
    """Pick x[i, indices[i]] for each row, yielding a rank-1 tensor."""
    if x.ndim != 2:
        raise ShapeError(f"gather_rows: expected rank 2, got shape {x.shape}")
    idx = np.asarray(indices, dtype=np.intp)
    if idx.shape != (x.shape[0],):
        raise ShapeError(f"gather_rows: {len(idx)} indices for {x.shape[0]} rows")
    rows = np.arange(x.shape[0])

    def rule(g: Array) -> None:
        if x.requires_grad:
            gx = np.zeros_like(x.data)
            gx[rows, idx] = g
            _accumulate(x, gx)

    return _node(x.data[rows, idx], "gather_rows", (x,), rule)


def take(x: Tensor, index: int) -> Tensor:
    """Extract one entry of a rank-1 tensor as a scalar."""
    if x.ndim != 1:
        raise ShapeError(f"take: expected rank 1, got shape {x.shape}")

    def rule(g: Array) -> None:
        if x.requires_grad:
            gx = np.zeros_like(x.data)
            gx[index] = g
            _accumulate(x, gx)

    return _node(np.asarray(x.data[index]), "take", (x,), rule)


# ---------------------------------------------------------------------------
# linear layers


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not chain")

    def rule(g: Array) -> None:
        _accumulate(a, g @ b.data.T)
        _accumulate(b, a.data.T @ g)

    return _node(a.data @ b.data, "matmul", (a, b), rule)


def dense(x: Tensor, weights: Tensor, bias: Tensor) -> Tensor:
    """Affine map W·x + b; x may be a single vector (n,) or a batch (N, n)."""
    if weights.ndim != 2 or bias.ndim != 1 or weights.shape[0] != bias.shape[0]:
        raise ShapeError(f"dense: weights {weights.shape} and bias {bias.shape} disagree")
    m, n = weights.shape
    if x.ndim == 1:
        if x.shape[0] != n:
            raise ShapeError(f"dense: input {x.shape} does not match weights {weights.shape}")
        out_data = weights.data @ x.data + bias.data

        def rule(g: Array) -> None:
            _accumulate(x, weights.data.T @ g)
            _accumulate(weights, np.outer(g, x.data))
            _accumulate(bias, g)

        return _node(out_data, "dense", (x, weights, bias), rule)
    if x.ndim == 2:
        if x.shape[1] != n:
            raise ShapeError(f"dense: input {x.shape} does not match weights {weights.shape}")
        out_data = x.data @ weights.data.T + bias.data

        def rule(g: Array) -> None:
            _accumulate(x, g @ weights.data)
            _accumulate(weights, g.T @ x.data)
            _accumulate(bias, g.sum(axis=0))

        return _node(out_data, "dense", (x, weights, bias), rule)
    raise ShapeError(f"dense: expected rank 1 or 2 input, got shape {x.shape}")


# ---------------------------------------------------------------------------
# softmax family


def _rows(x: Tensor, op: str) -> Array:
    if x.ndim == 1:
        return x.data[None, :]
    if x.ndim == 2:
        return x.data
    raise ShapeError(f"{op}: expected rank 1 or 2, got shape {x.shape}")


def softmax(logits: Tensor) -> Tensor:
    """Row-wise softmax with max-subtraction for stability."""
    z = _rows(logits, "softmax")
    e = np.exp(z - z.max(axis=1, keepdims=True))
    y = e / e.sum(axis=1, keepdims=True)
    out_data = y[0] if logits.ndim == 1 else y

    def rule(g: Array) -> None:
        g2 = g[None, :] if logits.ndim == 1 else g
        dot = (g2 * y).sum(axis=1, keepdims=True)
        gx = y * (g2 - dot)
        _accumulate(logits, gx[0] if logits.ndim == 1 else gx)

    return _node(out_data, "softmax", (logits,), rule)


def log_softmax(logits: Tensor) -> Tensor:
    z = _rows(logits, "log_softmax")
    shifted = z - z.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    y = shifted - logsum
    out_data = y[0] if logits.ndim == 1 else y

    def rule(g: Array) -> None:
        g2 = g[None, :] if logits.ndim == 1 else g
        gx = g2 - np.exp(y) * g2.sum(axis=1, keepdims=True)
        _accumulate(logits, gx[0] if logits.ndim == 1 else gx)

    return _node(out_data, "log_softmax", (logits,), rule)


def l2_normalize_rows(x: Tensor) -> Tensor:
    """Scale each row of (N, d) to unit L2 norm."""
    if x.ndim != 2:
        raise ShapeError(f"l2_normalize_rows: expected rank 2, got shape {x.shape}")
    norms = np.linalg.norm(x.data, axis=1, keepdims=True)
    if np.any(norms == 0.0):
        raise DegenerateInputError("l2_normalize_rows: zero-norm row")
    y = x.data / norms

    def rule(g: Array) -> None:
        dot = (g * y).sum(axis=1, keepdims=True)
        _accumulate(x, (g - y * dot) / norms)

    return _node(y, "l2_normalize_rows", (x,), rule)


# ---------------------------------------------------------------------------
# convolution and pooling


def _as_batch(x: Tensor, op: str) -> tuple[Array, bool]:
    if x.ndim == 3:
        return x.data[None], True
    if x.ndim == 4:
        return x.data, False
    raise ShapeError(f"{op}: expected rank 3 (C,H,W) or 4 (N,C,H,W) input, got shape {x.shape}")


def conv2d(x: Tensor, kernels: Tensor, bias: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation plus per-channel bias.

    ``x`` is (C_in, H, W) or batched (N, C_in, H, W); ``kernels`` is
    (C_out, C_in, kH, kW); ``bias`` is (C_out,). Output spatial extent is
    floor((H + 2*padding - kH) / stride) + 1.
    """
    if stride < 1:
        raise ContractError(f"conv2d: stride must be >= 1, got {stride}")
    if kernels.ndim != 4:
        raise ShapeError(f"conv2d: kernels must be rank 4, got shape {kernels.shape}")
    if bias.shape != (kernels.shape[0],):
        raise ShapeError(f"conv2d: bias {bias.shape} does not match kernels {kernels.shape}")
    xb, squeeze = _as_batch(x, "conv2d")
    co, ci, kh, kw = kernels.shape
    if xb.shape[1] != ci:
        raise ShapeError(f"conv2d: input {x.shape} does not match kernels {kernels.shape}")
    hp, wp = xb.shape[2] + 2 * padding, xb.shape[3] + 2 * padding
    if kh > hp or kw > wp:
        raise ShapeError(
            f"conv2d: kernel {kernels.shape} larger than padded input {x.shape} (padding={padding})"
        )
    if padding:
        xb = np.pad(xb, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    windows = sliding_window_view(xb, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    # windows: (N, C_in, H', W', kH, kW)
    out = np.tensordot(windows, kernels.data, axes=([1, 4, 5], [1, 2, 3]))
    out = np.ascontiguousarray(out.transpose(0, 3, 1, 2)) + bias.data[None, :, None, None]
    n, _, ho, wo = out.shape

    def rule(g: Array) -> None:
        gb = g[None] if squeeze else g
        if kernels.requires_grad:
            _accumulate(kernels, np.tensordot(gb, windows, axes=([0, 2, 3], [0, 2, 3])))
        if bias.requires_grad:
            _accumulate(bias, gb.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            spread = np.tensordot(gb, kernels.data, axes=([1], [0]))  # (N,H',W',C_in,kH,kW)
            spread = spread.transpose(0, 3, 1, 2, 4, 5)
            gxp = np.zeros((n, ci, hp, wp))
            for u in range(kh):
                for v in range(kw):
                    gxp[:, :, u : u + stride * ho : stride, v : v + stride * wo : stride] += spread[
                        :, :, :, :, u, v
                    ]
            gx = gxp[:, :, padding : hp - padding, padding : wp - padding] if padding else gxp
            _accumulate(x, gx[0] if squeeze else gx)

    return _node(out[0] if squeeze else out, "conv2d", (x, kernels, bias), rule)


def maxpool2d(x: Tensor, window: int, stride: int) -> Tensor:
    """Max over window x window patches; gradient goes to the first (row-major) argmax."""
    if window < 1 or stride < 1:
        raise ContractError(f"maxpool2d: window/stride must be >= 1, got {window}/{stride}")
    xb, squeeze = _as_batch(x, "maxpool2d")
    n, c, h, w = xb.shape
    if window > h or window > w:
        raise ShapeError(f"maxpool2d: window {window} exceeds input extent {x.shape}")
    windows = sliding_window_view(xb, (window, window), axis=(2, 3))[:, :, ::stride, ::stride]
    ho, wo = windows.shape[2], windows.shape[3]
    flat = windows.reshape(n, c, ho, wo, window * window)
    arg = flat.argmax(axis=4)  # first occurrence in row-major window order
    out = np.take_along_axis(flat, arg[..., None], axis=4)[..., 0]

    def rule(g: Array) -> None:
        if not x.requires_grad:
            return
        gb = g[None] if squeeze else g
        ni, cj, ii, jj = np.indices(arg.shape, sparse=True)
        rows = ii * stride + arg // window
        cols = jj * stride + arg % window
        gx = np.zeros_like(xb)
        np.add.at(gx, (ni, cj, rows, cols), gb)
        _accumulate(x, gx[0] if squeeze else gx)

    return _node(out[0] if squeeze else out, "maxpool2d", (x,), rule)
