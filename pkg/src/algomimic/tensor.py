"""Dense float64 tensors with reverse-mode automatic differentiation.

The engine is deliberately small: row-major numpy storage, no views, no
implicit broadcasting beyond scalars, and a tape built from per-op backward
closures.  `Tensor.backward()` walks the recorded graph once in reverse
topological order, accumulating gradients additively, so shared
subexpressions behave exactly like their unrolled-tree equivalent.

Every op validates its inputs and checks the result for NaN/Inf; a non-finite
value anywhere is an error state, never a sentinel.
"""

from __future__ import annotations

from contextlib import contextmanager

import numpy as np


class NumericsError(RuntimeError):
    """Shape mismatch, non-finite value, or invalid op argument."""


_grad_enabled = True


@contextmanager
def no_grad():
    """Disable tape recording inside the block (pure inference)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _check_finite(arr: np.ndarray, what: str) -> None:
    # isfinite(sum) is one pass; any NaN/Inf in the array poisons the sum.
    with np.errstate(all="ignore"):  # probing for inf/NaN is the point here
        if arr.size and not np.isfinite(arr.sum()):
            raise NumericsError(f"non-finite values in {what}")


class Tensor:
    """A float64 array plus optional autodiff bookkeeping."""

    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64, copy=True, order="C")
        _check_finite(arr, name or "tensor")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None

    # -- construction of op results -------------------------------------

    @staticmethod
    def _result(arr: np.ndarray, parents: tuple["Tensor", ...], backward, op: str) -> "Tensor":
        out = Tensor.__new__(Tensor)
        arr = np.ascontiguousarray(arr, dtype=np.float64)
        _check_finite(arr, f"result of {op}")
        out.data = arr
        out.grad = None
        out.name = None
        grad_parents = tuple(p for p in parents if p.requires_grad)
        if _grad_enabled and grad_parents:
            out.requires_grad = True
            out._parents = grad_parents
            out._backward = backward
        else:
            out.requires_grad = False
            out._parents = ()
            out._backward = None
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def copy(self) -> "Tensor":
        return Tensor(self.data, requires_grad=self.requires_grad, name=self.name)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad}{tag})"

    # -- backward pass ----------------------------------------------------

    def backward(self) -> None:
        """Accumulate gradients of this scalar into every reachable tensor."""
        if self.data.size != 1:
            raise NumericsError(
                f"backward requires a scalar loss, got shape {self.data.shape}"
            )
        if not self.requires_grad:
            raise NumericsError("backward on a tensor with no recorded graph")

        # Iterative post-order DFS: parents appear before consumers in `topo`.
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))

        flowing: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(topo):
            g = flowing.pop(id(node), None)
            if g is None:
                continue
            node.grad = g if node.grad is None else node.grad + g
            if node._backward is not None:
                node._backward(g, flowing)

    def zero_grad(self) -> None:
        self.grad = None

    # -- operator sugar ---------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis: int | None = None):
        return reduce_sum(self, axis)

    def max(self, axis: int):
        return reduce_max(self, axis)

    def relu(self):
        return relu(self)

    def sigmoid(self):
        return sigmoid(self)

    def log(self):
        return log(self)


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64))


def _accum(flowing: dict[int, np.ndarray], t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    key = id(t)
    if key in flowing:
        flowing[key] = flowing[key] + g
    else:
        flowing[key] = g


# -- primitives -----------------------------------------------------------


def _rowwise_matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # Single-column products go through multiply+row-sum: BLAS gemv results
    # depend on a row's position in the matrix at the last bit, which would
    # break bit-exact equality under node relabelling.
    if b.shape[1] == 1:
        return (a * b[:, 0]).sum(axis=1, keepdims=True)
    return a @ b


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise NumericsError(
            f"matmul dimension mismatch: {a.data.shape} @ {b.data.shape}"
        )
    out_data = _rowwise_matmul(a.data, b.data)

    def backward(g, flowing):
        _accum(flowing, a, g @ b.data.T)
        _accum(flowing, b, a.data.T @ g)

    return Tensor._result(out_data, (a, b), backward, "matmul")


def affine(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """x @ w + row-broadcast bias; the one fused layer primitive."""
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    if x.data.ndim != 2 or w.data.ndim != 2 or x.data.shape[1] != w.data.shape[0]:
        raise NumericsError(
            f"affine dimension mismatch: {x.data.shape} @ {w.data.shape}"
        )
    if b.data.shape != (w.data.shape[1],):
        raise NumericsError(
            f"affine bias shape {b.data.shape} incompatible with weight {w.data.shape}"
        )
    out_data = _rowwise_matmul(x.data, w.data) + b.data

    def backward(g, flowing):
        _accum(flowing, x, g @ w.data.T)
        _accum(flowing, w, x.data.T @ g)
        _accum(flowing, b, g.sum(axis=0))

    return Tensor._result(out_data, (x, w, b), backward, "affine")


def _binary_shapes(a: Tensor, b: Tensor, op: str) -> None:
    # equal shapes, or one side is a scalar; no other broadcasting exists.
    if a.data.shape == b.data.shape:
        return
    if a.data.size == 1 or b.data.size == 1:
        return
    raise NumericsError(f"{op} shape mismatch: {a.data.shape} vs {b.data.shape}")


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    return np.asarray(g.sum()).reshape(shape)  # scalar operand collects everything


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes(a, b, "add")
    out_data = a.data + b.data

    def backward(g, flowing):
        _accum(flowing, a, _reduce_to(g, a.data.shape))
        _accum(flowing, b, _reduce_to(g, b.data.shape))

    return Tensor._result(out_data, (a, b), backward, "add")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes(a, b, "mul")
    out_data = a.data * b.data

    def backward(g, flowing):
        _accum(flowing, a, _reduce_to(g * b.data, a.data.shape))
        _accum(flowing, b, _reduce_to(g * a.data, b.data.shape))

    return Tensor._result(out_data, (a, b), backward, "mul")


def neg(x) -> Tensor:
    x = as_tensor(x)

    def backward(g, flowing):
        _accum(flowing, x, -g)

    return Tensor._result(-x.data, (x,), backward, "neg")


def relu(x) -> Tensor:
    x = as_tensor(x)
    out_data = np.maximum(x.data, 0.0)

    def backward(g, flowing):
        _accum(flowing, x, g * (x.data > 0.0))

    return Tensor._result(out_data, (x,), backward, "relu")


def _stable_sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0.0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    s = _stable_sigmoid(x.data)

    def backward(g, flowing):
        _accum(flowing, x, g * s * (1.0 - s))

    return Tensor._result(s, (x,), backward, "sigmoid")


def log(x) -> Tensor:
    x = as_tensor(x)
    if np.any(x.data <= 0.0):
        raise NumericsError("log requires strictly positive inputs")

    def backward(g, flowing):
        _accum(flowing, x, g / x.data)

    return Tensor._result(np.log(x.data), (x,), backward, "log")


def clip(x, lo: float, hi: float) -> Tensor:
    """Clamp to [lo, hi]; gradient passes only where the input was in range."""
    x = as_tensor(x)
    if not lo < hi:
        raise NumericsError(f"clip bounds must satisfy lo < hi, got [{lo}, {hi}]")
    out_data = np.clip(x.data, lo, hi)
    inside = (x.data >= lo) & (x.data <= hi)

    def backward(g, flowing):
        _accum(flowing, x, g * inside)

    return Tensor._result(out_data, (x,), backward, "clip")


def _check_axis(x: Tensor, axis: int, op: str) -> None:
    if not isinstance(axis, int) or not 0 <= axis < x.data.ndim:
        raise NumericsError(f"{op} axis {axis} out of range for shape {x.data.shape}")
    if x.data.shape[axis] == 0:
        raise NumericsError(f"{op} over empty axis {axis} of shape {x.data.shape}")


def reduce_sum(x, axis: int | None = None) -> Tensor:
    x = as_tensor(x)
    if axis is None:
        if x.data.size == 0:
            raise NumericsError("sum of an empty tensor")
        out_data = np.asarray(x.data.sum())

        def backward(g, flowing):
            _accum(flowing, x, np.broadcast_to(g, x.data.shape).copy())

        return Tensor._result(out_data, (x,), backward, "sum")

    _check_axis(x, axis, "sum")
    out_data = x.data.sum(axis=axis)

    def backward_axis(g, flowing):
        _accum(flowing, x, np.broadcast_to(np.expand_dims(g, axis), x.data.shape).copy())

    return Tensor._result(out_data, (x,), backward_axis, "sum")


def reduce_max(x, axis: int) -> Tensor:
    """Max along `axis`; gradient flows to the first maximal element only."""
    x = as_tensor(x)
    _check_axis(x, axis, "max")
    out_data = x.data.max(axis=axis)
    argmax = x.data.argmax(axis=axis)  # first index on ties

    def backward(g, flowing):
        dx = np.zeros_like(x.data)
        np.put_along_axis(
            dx, np.expand_dims(argmax, axis), np.expand_dims(g, axis), axis
        )
        _accum(flowing, x, dx)

    return Tensor._result(out_data, (x,), backward, "max")


def gather_rows(x: Tensor, index) -> Tensor:
    x = as_tensor(x)
    idx = np.asarray(index, dtype=np.int64)
    if x.data.ndim != 2 or idx.ndim != 1:
        raise NumericsError(
            f"gather_rows expects a matrix and an index vector, got {x.data.shape} / {idx.shape}"
        )
    if idx.size and (idx.min() < 0 or idx.max() >= x.data.shape[0]):
        raise NumericsError(
            f"gather_rows index out of range for {x.data.shape[0]} rows"
        )
    out_data = x.data[idx]

    def backward(g, flowing):
        dx = np.zeros_like(x.data)
        np.add.at(dx, idx, g)
        _accum(flowing, x, dx)

    return Tensor._result(out_data, (x,), backward, "gather_rows")


def concat_cols(parts: list[Tensor]) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    if not parts:
        raise NumericsError("concat_cols of nothing")
    rows = parts[0].data.shape[0]
    for p in parts:
        if p.data.ndim != 2 or p.data.shape[0] != rows:
            raise NumericsError(
                f"concat_cols row mismatch: {[tuple(q.data.shape) for q in parts]}"
            )
    out_data = np.concatenate([p.data for p in parts], axis=1)
    widths = [p.data.shape[1] for p in parts]
    offsets = np.cumsum([0] + widths)

    def backward(g, flowing):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            _accum(flowing, p, g[:, lo:hi])

    return Tensor._result(out_data, tuple(parts), backward, "concat_cols")


def segment_max(messages: Tensor, segment, n_segments: int, default: Tensor) -> Tensor:
    """Per-segment channelwise max of message rows.

    Segments with no incoming row take `default` instead.  Gradient flows to
    the first row (in input order) attaining each (segment, channel) max.
    """
    messages, default = as_tensor(messages), as_tensor(default)
    seg = np.asarray(segment, dtype=np.int64)
    if messages.data.ndim != 2 or seg.ndim != 1 or seg.shape[0] != messages.data.shape[0]:
        raise NumericsError(
            f"segment_max shapes: messages {messages.data.shape}, segment {seg.shape}"
        )
    h = messages.data.shape[1]
    if default.data.shape not in ((h,), (1, h)):
        raise NumericsError(
            f"segment_max default shape {default.data.shape} does not match width {h}"
        )
    if seg.size and (seg.min() < 0 or seg.max() >= n_segments):
        raise NumericsError(f"segment index out of range for {n_segments} segments")

    default_row = default.data.reshape(h)
    out_data = np.full((n_segments, h), -np.inf)
    e = messages.data.shape[0]
    if e:
        np.maximum.at(out_data, seg, messages.data)
    counts = np.bincount(seg, minlength=n_segments)
    empty = counts == 0
    out_data[empty] = default_row

    if e:
        edge_ids = np.arange(e, dtype=np.int64)
        first_hit = np.full((n_segments, h), e, dtype=np.int64)
        hits = np.where(
            messages.data == out_data[seg], edge_ids[:, None], e
        )
        np.minimum.at(first_hit, seg, hits)
    else:
        first_hit = None

    def backward(g, flowing):
        if e:
            dm = g[seg] * (edge_ids[:, None] == first_hit[seg])
            _accum(flowing, messages, dm)
        if empty.any():
            dd = g[empty].sum(axis=0)
            _accum(flowing, default, dd.reshape(default.data.shape))

    return Tensor._result(out_data, (messages, default), backward, "segment_max")


def pad_scatter(values: Tensor, rows, cols, shape: tuple[int, int]) -> Tensor:
    """Place a vector of values into a zero matrix at (rows[i], cols[i])."""
    values = as_tensor(values)
    r = np.asarray(rows, dtype=np.int64)
    c = np.asarray(cols, dtype=np.int64)
    flat = values.data.reshape(-1)
    if r.shape != flat.shape or c.shape != flat.shape:
        raise NumericsError(
            f"pad_scatter index shapes {r.shape}/{c.shape} vs {flat.shape} values"
        )
    n, m = shape
    if r.size:
        if r.min() < 0 or r.max() >= n or c.min() < 0 or c.max() >= m:
            raise NumericsError(f"pad_scatter index out of range for shape {shape}")
        if np.unique(np.stack([r, c], axis=1), axis=0).shape[0] != r.size:
            raise NumericsError("pad_scatter received duplicate (row, col) slots")
    out_data = np.zeros(shape)
    out_data[r, c] = flat

    def backward(g, flowing):
        _accum(flowing, values, g[r, c].reshape(values.data.shape))

    return Tensor._result(out_data, (values,), backward, "pad_scatter")


# -- losses ---------------------------------------------------------------


def _sorted_row_sum(a: np.ndarray) -> np.ndarray:
    # Value-sorted accumulation: bit-identical for any column permutation.
    return np.sort(a, axis=1).sum(axis=1)


def masked_softmax(scores: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Row softmax over valid entries only (plain numpy; zero where masked)."""
    neg = np.where(mask, scores, -np.inf)
    rowmax = neg.max(axis=1, keepdims=True)
    exps = np.where(mask, np.exp(scores - rowmax), 0.0)
    denom = _sorted_row_sum(exps)
    return exps / denom[:, None]


def softmax_cross_entropy_rows(scores: Tensor, targets, mask) -> Tensor:
    """Per-row stabilized cross-entropy over masked score rows.

    scores: [n, m]; targets: [n] column indices; mask: [n, m] booleans with at
    least one valid entry per row.  Returns the [n] per-row losses.
    """
    scores = as_tensor(scores)
    t = np.asarray(targets, dtype=np.int64)
    m = np.asarray(mask, dtype=bool)
    if scores.data.ndim != 2 or m.shape != scores.data.shape or t.shape != (scores.data.shape[0],):
        raise NumericsError(
            f"cross-entropy shapes: scores {scores.data.shape}, mask {m.shape}, targets {t.shape}"
        )
    if not m.any(axis=1).all():
        raise NumericsError("cross-entropy row with no valid entries")
    if t.min() < 0 or t.max() >= scores.data.shape[1]:
        raise NumericsError("cross-entropy target index out of range")
    rows = np.arange(t.shape[0])
    if not m[rows, t].all():
        raise NumericsError("cross-entropy target outside the valid mask")

    neg = np.where(m, scores.data, -np.inf)
    rowmax = neg.max(axis=1)
    exps = np.where(m, np.exp(scores.data - rowmax[:, None]), 0.0)
    denom = _sorted_row_sum(exps)
    losses = np.log(denom) + rowmax - scores.data[rows, t]
    probs = exps / denom[:, None]

    def backward(g, flowing):
        ds = probs * g[:, None]
        ds[rows, t] -= g
        _accum(flowing, scores, ds)

    return Tensor._result(losses, (scores,), backward, "softmax_cross_entropy")


def softmax_cross_entropy(scores: Tensor, target_index: int, mask=None) -> Tensor:
    """Cross-entropy of one masked score vector against a target index."""
    scores = as_tensor(scores)
    if scores.data.ndim != 1:
        raise NumericsError(
            f"softmax_cross_entropy expects a vector, got shape {scores.data.shape}"
        )
    m = np.ones(scores.data.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    wide = Tensor._result(
        scores.data.reshape(1, -1),
        (scores,),
        lambda g, flowing: _accum(flowing, scores, g.reshape(scores.data.shape)),
        "reshape",
    )
    per_row = softmax_cross_entropy_rows(wide, [int(target_index)], m.reshape(1, -1))
    return reduce_sum(per_row)


def bce_with_logits(logits: Tensor, targets) -> Tensor:
    """Elementwise stable binary cross-entropy from logits.

    loss = max(x, 0) - x*y + log(1 + exp(-|x|)); gradient is sigmoid(x) - y.
    """
    logits = as_tensor(logits)
    y = np.asarray(targets, dtype=np.float64)
    if y.shape != logits.data.shape:
        raise NumericsError(
            f"bce shapes differ: logits {logits.data.shape}, targets {y.shape}"
        )
    x = logits.data
    out_data = np.maximum(x, 0.0) - x * y + np.log1p(np.exp(-np.abs(x)))

    def backward(g, flowing):
        _accum(flowing, logits, g * (_stable_sigmoid(x) - y))

    return Tensor._result(out_data, (logits,), backward, "bce_with_logits")
