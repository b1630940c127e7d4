"""Dense tensors with tape-based reverse-mode differentiation.

A ``Graph`` is a per-thread tape: while one is active (``with Graph() as g``),
every op touching a tensor that requires gradients appends a node holding the
values its backward rule needs. ``backward`` replays the tape in reverse
append order, which makes gradient accumulation deterministic. Tapes are
rebuilt on every forward pass, so recurrent nets simply unroll onto one tape.

Gradient claims are checked against ``finite_diff_jacobian``, a central
finite-difference oracle that never touches the tape.
"""

from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np

from . import kernels

FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))

_tls = threading.local()


def _graph_stack() -> list:
    stack = getattr(_tls, "stack", None)
    if stack is None:
        stack = _tls.stack = []
    return stack


def _active_graph():
    stack = _graph_stack()
    return stack[-1] if stack else None


class Tensor:
    """N-dimensional float array, optionally tracked on the active tape.

    Treat instances as immutable: ops never modify operands, and callers must
    not write through ``data`` once a tensor participates in a graph.
    """

    __slots__ = ("data", "requires_grad", "graph")

    def __init__(self, data, requires_grad: bool = False, *, allow_nonfinite: bool = False):
        arr = np.asarray(data)
        if arr.dtype not in FLOAT_DTYPES:
            arr = arr.astype(np.float64)
        if not allow_nonfinite and not np.all(np.isfinite(arr)):
            raise ValueError("tensor rejects non-finite elements at construction")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.graph = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype.name})"

    # small conveniences; the op functions below are the real API
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, shape):
        return reshape(self, shape)

    def item(self) -> float:
        return float(self.data)


def zeros(shape, dtype=np.float64, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad)


def zeros_like(t: Tensor, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros_like(t.data), requires_grad)


def ones_like(t: Tensor, requires_grad: bool = False) -> Tensor:
    return Tensor(np.ones_like(t.data), requires_grad)


class _Node:
    __slots__ = ("outputs", "inputs", "backward_fn", "multi")

    def __init__(self, outputs: tuple[Tensor, ...], inputs: tuple[Tensor, ...], backward_fn, multi: bool):
        self.outputs = outputs
        self.inputs = inputs
        self.backward_fn = backward_fn
        self.multi = multi


class Graph:
    """Append-only tape of recorded ops; confined to one thread."""

    def __init__(self):
        self._nodes: list[_Node] = []

    def __enter__(self) -> "Graph":
        _graph_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        popped = _graph_stack().pop()
        assert popped is self, "graph contexts must nest"

    def __len__(self) -> int:
        return len(self._nodes)

    def _record(self, outputs: tuple[Tensor, ...], inputs: tuple[Tensor, ...], backward_fn, multi: bool) -> None:
        for out in outputs:
            out.graph = self
        self._nodes.append(_Node(outputs, inputs, backward_fn, multi))

    def backprop(self, output: Tensor, seed: np.ndarray) -> dict[Tensor, np.ndarray]:
        """Accumulate d(seed . output)/d(tensor) for every reached tensor.

        Walks the tape once in reverse append order; a node contributes to its
        inputs exactly when gradient has reached any of its outputs.
        """
        if output.graph is not self:
            raise ValueError("output does not belong to this graph")
        if seed.shape != output.data.shape:
            raise ValueError(
                f"seed shape {seed.shape} does not match output shape {output.data.shape}"
            )
        grads: dict[int, np.ndarray] = {id(output): seed}
        holders: dict[int, Tensor] = {id(output): output}
        get = grads.get
        for node in reversed(self._nodes):
            if node.multi:
                gs = tuple(get(id(o)) for o in node.outputs)
                if all(g is None for g in gs):
                    continue
                contributions = node.backward_fn(gs)
            else:
                g_out = get(id(node.outputs[0]))
                if g_out is None:
                    continue
                contributions = node.backward_fn(g_out)
            for inp, g_in in zip(node.inputs, contributions):
                if g_in is None:
                    continue
                key = id(inp)
                held = get(key)
                if held is None:
                    grads[key] = g_in
                    holders[key] = inp
                else:
                    grads[key] = held + g_in
        return {holders[key]: arr for key, arr in grads.items()}


class _Paused:
    """Context that makes recording inert (used by the finite-difference oracle)."""

    def __enter__(self):
        _graph_stack().append(None)
        return self

    def __exit__(self, exc_type, exc, tb):
        _graph_stack().pop()


def pause_recording() -> _Paused:
    return _Paused()


def _wants_grad(*tensors: Tensor) -> bool:
    return any(t.requires_grad for t in tensors)


def _make(out_data, inputs: tuple[Tensor, ...], backward_fn) -> Tensor:
    graph = _active_graph()
    track = graph is not None and _wants_grad(*inputs)
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.requires_grad = track
    out.graph = None
    if track:
        graph._record((out,), inputs, backward_fn, multi=False)
    return out


def _make_multi(out_datas, inputs: tuple[Tensor, ...], backward_fn) -> tuple[Tensor, ...]:
    """Record one node producing several outputs; backward_fn receives a
    tuple of per-output gradients (None where unreached)."""
    graph = _active_graph()
    track = graph is not None and _wants_grad(*inputs)
    outs = []
    for data in out_datas:
        t = Tensor.__new__(Tensor)
        t.data = data
        t.requires_grad = track
        t.graph = None
        outs.append(t)
    outs = tuple(outs)
    if track:
        graph._record(outs, inputs, backward_fn, multi=True)
    return outs


def _as_const(value, dtype):
    """Coerce a python scalar / ndarray into a fixed (non-differentiated) array."""
    return np.asarray(value, dtype=dtype)


def _check_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.data.shape != b.data.shape and a.data.ndim != 0 and b.data.ndim != 0:
        raise ValueError(f"{op}: operand shapes {a.data.shape} and {b.data.shape} differ")


def _binary_parts(a, b, op: str):
    """Split a binary op's operands into (tensor, tensor) or (tensor, const)."""
    a_is_t = isinstance(a, Tensor)
    b_is_t = isinstance(b, Tensor)
    if a_is_t and b_is_t:
        _check_same_shape(a, b, op)
        return a, b, None, None
    if a_is_t:
        const = _as_const(b, a.dtype)
        if np.broadcast_shapes(a.data.shape, const.shape) != a.data.shape:
            raise ValueError(
                f"{op}: constant of shape {const.shape} does not broadcast onto {a.data.shape}"
            )
        return a, None, None, const
    if b_is_t:
        const = _as_const(a, b.dtype)
        if np.broadcast_shapes(b.data.shape, const.shape) != b.data.shape:
            raise ValueError(
                f"{op}: constant of shape {const.shape} does not broadcast onto {b.data.shape}"
            )
        return None, b, const, None
    raise TypeError(f"{op}: at least one operand must be a Tensor")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum g down to `shape` (inverse of a scalar-with-tensor broadcast)."""
    if g.shape == shape:
        return g
    if shape == ():
        return np.asarray(g.sum())
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def add(a, b) -> Tensor:
    at, bt, ac, bc = _binary_parts(a, b, "add")
    if at is not None and bt is not None:
        out = at.data + bt.data

        def bwd(g):
            return (
                _unbroadcast(g, at.data.shape) if at.requires_grad else None,
                _unbroadcast(g, bt.data.shape) if bt.requires_grad else None,
            )

        return _make(out, (at, bt), bwd)
    t, c = (at, bc) if at is not None else (bt, ac)
    return _make(t.data + c, (t,), lambda g: (g,))


def sub(a, b) -> Tensor:
    at, bt, ac, bc = _binary_parts(a, b, "sub")
    if at is not None and bt is not None:
        out = at.data - bt.data

        def bwd(g):
            return (
                _unbroadcast(g, at.data.shape) if at.requires_grad else None,
                _unbroadcast(-g, bt.data.shape) if bt.requires_grad else None,
            )

        return _make(out, (at, bt), bwd)
    if at is not None:
        return _make(at.data - bc, (at,), lambda g: (g,))
    return _make(ac - bt.data, (bt,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    at, bt, ac, bc = _binary_parts(a, b, "mul")
    if at is not None and bt is not None:
        out = at.data * bt.data
        a_data, b_data = at.data, bt.data

        def bwd(g):
            return (
                _unbroadcast(g * b_data, a_data.shape) if at.requires_grad else None,
                _unbroadcast(g * a_data, b_data.shape) if bt.requires_grad else None,
            )

        return _make(out, (at, bt), bwd)
    t, c = (at, bc) if at is not None else (bt, ac)
    return _make(t.data * c, (t,), lambda g: (g * c,))


def div(a, b) -> Tensor:
    at, bt, ac, bc = _binary_parts(a, b, "div")
    if at is not None and bt is not None:
        out = at.data / bt.data
        b_data = bt.data

        def bwd(g):
            return (
                _unbroadcast(g / b_data, at.data.shape) if at.requires_grad else None,
                _unbroadcast(-g * out / b_data, b_data.shape) if bt.requires_grad else None,
            )

        return _make(out, (at, bt), bwd)
    if at is not None:
        return _make(at.data / bc, (at,), lambda g: (g / bc,))
    out = ac / bt.data
    b_data = bt.data
    return _make(out, (bt,), lambda g: (-g * out / b_data,))


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def relu(a: Tensor) -> Tensor:
    out = np.maximum(a.data, 0.0)
    mask = a.data > 0.0
    return _make(out, (a,), lambda g: (g * mask,))


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    # tanh form: overflow-free and one vector op instead of branchy exp
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid(a: Tensor) -> Tensor:
    out = _sigmoid_np(a.data)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if not isinstance(a, Tensor) or not isinstance(b, Tensor):
        raise TypeError("matmul expects two tensors")
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ValueError(
            f"matmul is defined for matrices, got shapes {a.data.shape} and {b.data.shape}"
        )
    if a.data.shape[1] != b.data.shape[0]:
        raise ValueError(
            f"matmul inner extents differ: {a.data.shape} vs {b.data.shape}"
        )
    a_data, b_data = a.data, b.data

    def bwd(g):
        return (
            g @ b_data.T if a.requires_grad else None,
            a_data.T @ g if b.requires_grad else None,
        )

    return _make(a_data @ b_data, (a, b), bwd)


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ValueError(f"transpose expects a matrix, got shape {a.data.shape}")
    return _make(a.data.T, (a,), lambda g: (g.T,))


def linear(x: Tensor, w: Tensor) -> Tensor:
    """x[B, in] @ w[out, in].T in a single tape node (the dense hot path)."""
    if x.data.ndim != 2 or w.data.ndim != 2 or x.data.shape[1] != w.data.shape[1]:
        raise ValueError(
            f"linear expects [B,in] and [out,in], got {x.data.shape} and {w.data.shape}"
        )
    x_data, w_data = x.data, w.data

    def bwd(g):
        return (
            g @ w_data if x.requires_grad else None,
            g.T @ x_data if w.requires_grad else None,
        )

    return _make(x_data @ w_data.T, (x, w), bwd)


def conv2d(x: Tensor, w: Tensor, bias: Tensor, stride: int, padding: int) -> Tensor:
    """Cross-correlation of [N,C,H,W] (or [C,H,W]) input with [F,C,kh,kw] filters."""
    squeeze = x.data.ndim == 3
    x4 = x.data[None] if squeeze else x.data
    if x4.ndim != 4 or w.data.ndim != 4:
        raise ValueError(
            f"conv2d expects [N,C,H,W] input and [F,C,kh,kw] filters, got "
            f"{x.data.shape} and {w.data.shape}"
        )
    n, c, h, wid = x4.shape
    f, cw, kh, kw = w.data.shape
    if c != cw:
        raise ValueError(f"conv2d channel mismatch: input has {c}, filters expect {cw}")
    if bias.data.shape != (f,):
        raise ValueError(f"conv2d bias shape {bias.data.shape} != ({f},)")
    oh = kernels.conv_output_size(h, kh, stride, padding)
    ow = kernels.conv_output_size(wid, kw, stride, padding)

    cols = kernels.im2col(x4, kh, kw, stride, padding)  # [C*kh*kw, N*oh*ow]
    w2 = w.data.reshape(f, c * kh * kw)
    out2 = w2 @ cols + bias.data[:, None]  # one GEMM for the whole batch
    out = np.ascontiguousarray(out2.reshape(f, n, oh, ow).transpose(1, 0, 2, 3))

    def bwd(g):
        g4 = g[None] if squeeze else g
        g2 = np.ascontiguousarray(g4.transpose(1, 0, 2, 3)).reshape(f, n * oh * ow)
        gx = None
        if x.requires_grad:
            gcols = w2.T @ g2
            gx = kernels.col2im(gcols, x4.shape, kh, kw, stride, padding)
            if squeeze:
                gx = gx[0]
        gw = (g2 @ cols.T).reshape(f, c, kh, kw) if w.requires_grad else None
        gb = g2.sum(axis=1) if bias.requires_grad else None
        return (gx, gw, gb)

    return _make(out[0] if squeeze else out, (x, w, bias), bwd)


def concat(parts: Sequence[Tensor], axis: int) -> Tensor:
    if not parts:
        raise ValueError("concat of an empty list")
    ndim = parts[0].data.ndim
    axis = axis % ndim
    ref = list(parts[0].data.shape)
    for p in parts[1:]:
        other = list(p.data.shape)
        if len(other) != ndim or [e for i, e in enumerate(other) if i != axis] != [
            e for i, e in enumerate(ref) if i != axis
        ]:
            raise ValueError(
                f"concat: shape {tuple(other)} incompatible with {tuple(ref)} off axis {axis}"
            )
    out = np.concatenate([p.data for p in parts], axis=axis)
    offsets = np.cumsum([p.data.shape[axis] for p in parts])[:-1]

    def bwd(g):
        pieces = np.split(g, offsets, axis=axis)
        return tuple(
            piece if p.requires_grad else None for p, piece in zip(parts, pieces)
        )

    return _make(out, tuple(parts), bwd)


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice [start, start+length) along one axis."""
    axis = axis % a.data.ndim
    if start < 0 or start + length > a.data.shape[axis]:
        raise ValueError(
            f"narrow [{start}:{start + length}) exceeds extent {a.data.shape[axis]}"
        )
    index = tuple(
        slice(start, start + length) if i == axis else slice(None)
        for i in range(a.data.ndim)
    )
    a_shape = a.data.shape

    def bwd(g):
        full = np.zeros(a_shape, dtype=g.dtype)
        full[index] = g
        return (full,)

    return _make(a.data[index], (a,), bwd)


def reshape(a: Tensor, shape) -> Tensor:
    orig = a.data.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(orig),))


def expand(a: Tensor, shape) -> Tensor:
    """Broadcast to `shape`; the backward pass sums over the expanded axes."""
    shape = tuple(shape)
    orig = a.data.shape
    out = np.broadcast_to(a.data, shape)
    return _make(out, (a,), lambda g: (_unbroadcast(g, orig),))


def _normalize_axes(axes, ndim: int) -> tuple[int, ...]:
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    norm = tuple(ax % ndim for ax in axes)
    if len(set(norm)) != len(norm):
        raise ValueError(f"reduction axes {axes} contain duplicates")
    for ax in norm:
        if not 0 <= ax < ndim:
            raise ValueError(f"axis {ax} out of range for {ndim}-d tensor")
    return norm


def _expand_reduced(g: np.ndarray, shape: tuple[int, ...], axes, keepdims: bool) -> np.ndarray:
    if not keepdims:
        for ax in sorted(axes):
            g = np.expand_dims(g, ax)
    return np.broadcast_to(g, shape)


def reduce_sum(a: Tensor, axes=None, keepdims: bool = False) -> Tensor:
    axes = _normalize_axes(axes, a.data.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)
    shape = a.data.shape
    return _make(out, (a,), lambda g: (_expand_reduced(g, shape, axes, keepdims),))


def reduce_mean(a: Tensor, axes=None, keepdims: bool = False) -> Tensor:
    axes = _normalize_axes(axes, a.data.ndim)
    count = int(np.prod([a.data.shape[ax] for ax in axes])) if axes else 1
    out = a.data.mean(axis=axes, keepdims=keepdims)
    shape = a.data.shape

    def bwd(g):
        return (_expand_reduced(g, shape, axes, keepdims) / count,)

    return _make(out, (a,), bwd)


def reduce_max(a: Tensor, axes=None, keepdims: bool = False) -> Tensor:
    """Max over axes; ties route the subgradient to the lowest flattened index."""
    axes = _normalize_axes(axes, a.data.ndim)
    ndim = a.data.ndim
    out = a.data.max(axis=axes, keepdims=keepdims)
    kept = tuple(i for i in range(ndim) if i not in axes)
    perm = kept + axes
    permuted = np.transpose(a.data, perm)
    outer_shape = permuted.shape[: len(kept)]
    flat = permuted.reshape(int(np.prod(outer_shape, dtype=np.int64)) if kept else 1, -1)
    argmax = flat.argmax(axis=1)  # first maximizer, hence lowest index on ties

    def bwd(g):
        g_flat = g.reshape(-1)
        scatter = np.zeros_like(flat)
        scatter[np.arange(flat.shape[0]), argmax] = g_flat
        scatter = scatter.reshape(outer_shape + tuple(a.data.shape[ax] for ax in axes))
        inv = np.argsort(perm)
        return (np.transpose(scatter, inv),)

    return _make(out, (a,), bwd)


def gather_rows(a: Tensor, indices: np.ndarray) -> Tensor:
    """Select rows of a 2-d tensor; backward scatter-adds into the source."""
    if a.data.ndim < 1:
        raise ValueError("gather_rows needs at least one axis")
    idx = np.asarray(indices)
    if idx.size and (idx.min() < 0 or idx.max() >= a.data.shape[0]):
        raise ValueError(
            f"gather indices out of range [0, {a.data.shape[0]}) for shape {a.data.shape}"
        )
    a_shape = a.data.shape

    def bwd(g):
        full = np.zeros(a_shape, dtype=g.dtype)
        np.add.at(full, idx, g)
        return (full,)

    return _make(a.data[idx], (a,), bwd)


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """x[..., D] + b[D], the one sanctioned tensor-tensor broadcast."""
    if b.data.ndim != 1 or x.data.shape[-1] != b.data.shape[0]:
        raise ValueError(
            f"add_bias: bias {b.data.shape} does not match trailing extent of {x.data.shape}"
        )
    lead = tuple(range(x.data.ndim - 1))

    def bwd(g):
        return (
            g if x.requires_grad else None,
            g.sum(axis=lead) if b.requires_grad else None,
        )

    return _make(x.data + b.data, (x, b), bwd)


def lstm_gates(pre: Tensor, c: Tensor) -> tuple[Tensor, Tensor]:
    """Fused LSTM cell tail: gate preactivations [..., 4U] (input, forget,
    cell, output order) applied to the previous cell state [..., U].

    Returns (h', c') from one tape node; the hand-written backward is
    covered by the finite-difference oracle in the tests.
    """
    u = c.data.shape[-1]
    if pre.data.shape[-1] != 4 * u or pre.data.shape[:-1] != c.data.shape[:-1]:
        raise ValueError(
            f"lstm_gates: preactivation {pre.data.shape} does not match cell {c.data.shape}"
        )
    p = pre.data
    gi = _sigmoid_np(p[..., :u])
    gf = _sigmoid_np(p[..., u : 2 * u])
    gg = np.tanh(p[..., 2 * u : 3 * u])
    go = _sigmoid_np(p[..., 3 * u :])
    c_old = c.data
    c_new = gf * c_old + gi * gg
    tc = np.tanh(c_new)
    h_new = go * tc

    def bwd(gs):
        gh, gc = gs
        # gradient into the new cell value, combining both output paths
        gc2 = gc if gc is not None else 0.0
        if gh is not None:
            gc2 = gc2 + gh * go * (1.0 - tc * tc)
        g_pre = None
        if pre.requires_grad:
            g_pre = np.empty_like(p)
            g_pre[..., :u] = gc2 * gg * gi * (1.0 - gi)
            g_pre[..., u : 2 * u] = gc2 * c_old * gf * (1.0 - gf)
            g_pre[..., 2 * u : 3 * u] = gc2 * gi * (1.0 - gg * gg)
            g_pre[..., 3 * u :] = 0.0 if gh is None else gh * tc * go * (1.0 - go)
        return (g_pre, gc2 * gf if c.requires_grad else None)

    return _make_multi((h_new, c_new), (pre, c), bwd)


def split_steps(x: Tensor, axis: int = 1) -> tuple[Tensor, ...]:
    """Unstack x along one axis into views, as a single tape node.

    The backward pass stacks the collected output gradients (zeros where an
    output was never reached), so slicing a [B,T,D] activation into T step
    tensors costs one node instead of T scatter nodes.
    """
    axis = axis % x.data.ndim
    moved = np.moveaxis(x.data, axis, 0)
    count = moved.shape[0]
    piece_shape = moved.shape[1:]

    def bwd(gs):
        stacked = np.stack(
            [g if g is not None else np.zeros(piece_shape, dtype=x.dtype) for g in gs]
        )
        return (np.moveaxis(stacked, 0, axis),)

    return _make_multi(tuple(moved[i] for i in range(count)), (x,), bwd)


def backward(output: Tensor, seed: np.ndarray | None = None) -> dict[Tensor, np.ndarray]:
    """Gradients of a scalar output w.r.t. every tensor its tape reached.

    A non-scalar output requires an explicit seed (vector-Jacobian product).
    """
    if not isinstance(output, Tensor):
        raise TypeError("backward expects a Tensor")
    if output.graph is None:
        raise ValueError("backward on a detached tensor (no graph recorded it)")
    if seed is None:
        if output.data.size != 1:
            raise ValueError(
                f"backward without a seed needs a scalar output, got shape {output.data.shape}"
            )
        seed = np.ones_like(output.data)
    else:
        seed = np.asarray(seed, dtype=output.dtype).reshape(output.data.shape)
    return output.graph.backprop(output, seed)


def jacobian(f: Callable[[Tensor], Tensor], x: Tensor) -> np.ndarray:
    """[m, n] matrix of d f(x)_j / d x_i via one seeded backward pass per row."""
    probe = x if x.requires_grad else Tensor(x.data, requires_grad=True)
    with Graph() as graph:
        y = f(probe)
    if not isinstance(y, Tensor):
        raise TypeError("jacobian target must return a Tensor")
    if y.graph is not graph:
        raise ValueError("jacobian: output is not connected to the probed input")
    m, n = y.data.size, probe.data.size
    jac = np.zeros((m, n), dtype=np.float64)
    seed = np.zeros(y.data.shape, dtype=y.dtype)
    flat = seed.reshape(-1)
    for j in range(m):
        flat[j] = 1.0
        table = graph.backprop(y, seed.copy())
        gx = table.get(probe)
        if gx is None:
            raise ValueError("jacobian: output is not connected to the probed input")
        jac[j] = gx.reshape(-1)
        flat[j] = 0.0
    return jac


def finite_diff_jacobian(
    f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-5
) -> np.ndarray:
    """Central-difference Jacobian; the independent oracle for backward passes."""
    if eps <= 0:
        raise ValueError("finite difference step must be positive")
    base = np.array(x.data, dtype=np.float64)
    flat = base.reshape(-1)
    cols = []
    with pause_recording():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = np.array(f(Tensor(base)).data, dtype=np.float64)
            flat[i] = orig - eps
            lo = np.array(f(Tensor(base)).data, dtype=np.float64)
            flat[i] = orig
            if not (np.all(np.isfinite(hi)) and np.all(np.isfinite(lo))):
                raise ValueError(f"non-finite function output while probing input {i}")
            cols.append((hi - lo).reshape(-1) / (2.0 * eps))
    return np.stack(cols, axis=1)


def max_jacobian_error(
    f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-5
) -> float:
    """Max absolute disagreement between the tape and the finite-difference oracle."""
    return float(np.abs(jacobian(f, x) - finite_diff_jacobian(f, x, eps)).max())
