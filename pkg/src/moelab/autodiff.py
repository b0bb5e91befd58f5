"""Dense float64 tensors with reverse-mode differentiation on an explicit tape.

The engine is deliberately small: values live in numpy arrays, and every
differentiable operation executed inside a ``with Tape():`` block appends one
node to the active tape. Because nodes are recorded in execution order, the
tape is already topologically sorted and the backward pass is a single
reverse sweep that visits each node exactly once.

Masking convention: "minus infinity" is represented by the most negative
finite float64 (``NEG_INF``). ``softmax`` treats any entry at or below that
sentinel as masked and produces an exact 0.0 there, rather than relying on
exp() underflow.
"""

from __future__ import annotations

import threading

import numpy as np

from .errors import ContractError, DimensionError, NumericError, ParameterError

# Mask sentinel: most negative finite float64. Kept finite so tensors never
# hold actual infinities; softmax special-cases it.
NEG_INF = float(np.finfo(np.float64).min)

_STATE = threading.local()


def _tape_stack() -> list:
    stack = getattr(_STATE, "stack", None)
    if stack is None:
        stack = []
        _STATE.stack = stack
    return stack


def active_tape():
    """Return the innermost active Tape on this thread, or None."""
    stack = _tape_stack()
    return stack[-1] if stack else None


class _Node:
    __slots__ = ("out", "parents", "backward")

    def __init__(self, out, parents, backward):
        self.out = out
        self.parents = parents
        self.backward = backward


class Tape:
    """Ordered record of differentiable operations.

    Operations executed inside a ``with Tape() as tape:`` block append nodes
    in execution order, so every node's parents precede it. A tape is
    confined to the thread that opened it; independent tapes on separate
    threads may run concurrently.
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _tape_stack().pop()
        if popped is not self:
            raise ContractError("tape context exited out of order")
        return False

    def __len__(self) -> int:
        return len(self.nodes)

    def backward(self, loss: "Tensor") -> None:
        """Accumulate gradients of a scalar loss into every reachable
        requires_grad tensor. Repeated calls accumulate; use zero_grad()
        between steps."""
        _run_backward(self, loss)


class Tensor:
    """Dense float64 array, optionally participating in gradient taping.

    ``grad`` is None until a backward pass reaches the tensor; afterwards it
    holds the accumulated adjoint with the same shape as ``data``.
    """

    __slots__ = ("data", "requires_grad", "grad", "_tape")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._tape: Tape | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def values(self) -> np.ndarray:
        """Flat row-major view of the stored values."""
        return self.data.reshape(-1)

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        """Run the backward pass from this scalar on the tape it was
        recorded on."""
        if self._tape is None:
            raise ContractError("backward() target was not produced on a tape")
        self._tape.backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(out: Tensor, parents: tuple[Tensor, ...], backward_fn) -> Tensor:
    tape = active_tape()
    if tape is None or not any(p.requires_grad for p in parents):
        return out
    out.requires_grad = True
    out._tape = tape
    tape.nodes.append(_Node(out, parents, backward_fn))
    return out


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    g = np.asarray(g, dtype=np.float64).reshape(t.data.shape)
    t.grad = np.array(g) if t.grad is None else t.grad + g


def _run_backward(tape: Tape, loss: Tensor) -> None:
    if not isinstance(loss, Tensor):
        raise ContractError("backward() requires a Tensor loss")
    if loss.size != 1:
        raise ContractError(f"backward() requires a scalar loss, got shape {loss.shape}")
    if loss._tape is not tape:
        raise ContractError("loss was not produced on this tape")

    # Transient adjoints keyed by tensor identity; .grad is only touched at
    # the end so a previous backward pass can never leak into this one.
    adjoints: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    holders: dict[int, Tensor] = {id(loss): loss}

    for node in reversed(tape.nodes):
        g = adjoints.pop(id(node.out), None)
        if g is None:
            continue  # not on the path from the loss
        holders.pop(id(node.out), None)
        if node.out.requires_grad:
            _accumulate(node.out, g)
        for parent, pg in zip(node.parents, node.backward(g)):
            if pg is None:
                continue
            pid = id(parent)
            if pid in adjoints:
                adjoints[pid] = adjoints[pid] + pg
            else:
                adjoints[pid] = pg
                holders[pid] = parent

    # Whatever remains belongs to leaf tensors (no producing node).
    for pid, g in adjoints.items():
        leaf = holders[pid]
        if leaf.requires_grad:
            _accumulate(leaf, g)


def backward(loss: Tensor) -> None:
    """Free-function form of Tensor.backward()."""
    loss.backward()


# ---------------------------------------------------------------------------
# Operations
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of two 2-D tensors."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise DimensionError(f"matmul needs 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} vs {b.shape}")
    out = Tensor(a.data @ b.data)

    def back(g):
        return g @ b.data.T, a.data.T @ g

    return _record(out, (a, b), back)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum of two same-shape tensors."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"add shapes differ: {a.shape} vs {b.shape}")
    out = Tensor(a.data + b.data)
    return _record(out, (a, b), lambda g: (g, g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product of two same-shape tensors."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"mul shapes differ: {a.shape} vs {b.shape}")
    out = Tensor(a.data * b.data)
    return _record(out, (a, b), lambda g: (g * b.data, g * a.data))


def scale(a: Tensor, c: float) -> Tensor:
    """Multiply a tensor by a python scalar."""
    a = _as_tensor(a)
    c = float(c)
    out = Tensor(a.data * c)
    return _record(out, (a,), lambda g: (g * c,))


def relu(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(np.maximum(a.data, 0.0))
    positive = a.data > 0
    return _record(out, (a,), lambda g: (g * positive,))


def reduce_sum(a: Tensor) -> Tensor:
    """Sum of all entries, as a scalar tensor."""
    a = _as_tensor(a)
    out = Tensor(np.sum(a.data))
    return _record(out, (a,), lambda g: (np.broadcast_to(g, a.shape),))


def reduce_mean(a: Tensor) -> Tensor:
    return scale(reduce_sum(a), 1.0 / a.size)


def mean_rows(a: Tensor) -> Tensor:
    """Column means of a 2-D tensor: [B, C] -> [C]."""
    a = _as_tensor(a)
    if a.data.ndim != 2:
        raise DimensionError(f"mean_rows needs a 2-D tensor, got {a.shape}")
    rows = a.shape[0]
    out = Tensor(a.data.mean(axis=0))
    return _record(out, (a,), lambda g: (np.broadcast_to(g / rows, a.shape),))


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Softmax along an axis, with exact zeros at masked entries.

    Entries at or below NEG_INF are masked: they contribute nothing to the
    normalization, their outputs are exactly 0.0, and no gradient flows to
    them. Slices that are entirely masked produce all-zero output (the
    bypass case). Unmasked slices sum to 1 along the axis.
    """
    a = _as_tensor(a)
    data = a.data
    if np.isnan(data).any() or np.isposinf(data).any():
        raise NumericError("softmax input must be NaN-free and below +inf")
    masked = data <= NEG_INF
    safe = np.where(masked, -np.inf, data)
    mx = np.max(safe, axis=axis, keepdims=True)
    mx = np.where(np.isfinite(mx), mx, 0.0)  # fully-masked slices
    z = np.where(masked, -np.inf, np.where(masked, 0.0, data) - mx)
    e = np.exp(z)
    denom = e.sum(axis=axis, keepdims=True)
    y = np.divide(e, denom, out=np.zeros_like(e), where=denom > 0)
    out = Tensor(y)

    def back(g):
        inner = (g * y).sum(axis=axis, keepdims=True)
        return (y * (g - inner),)

    return _record(out, (a,), back)


def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean negative log-likelihood of integer targets under row softmax.

    logits: [B, V]; targets: integer array of length B.
    """
    logits = _as_tensor(logits)
    if logits.data.ndim != 2:
        raise DimensionError(f"cross_entropy needs 2-D logits, got {logits.shape}")
    t = np.asarray(targets)
    if t.ndim != 1 or t.shape[0] != logits.shape[0]:
        raise DimensionError(
            f"targets of shape {t.shape} do not match logits {logits.shape}"
        )
    if t.min(initial=0) < 0 or t.max(initial=0) >= logits.shape[1]:
        raise ParameterError("target ids out of vocabulary range")
    z = logits.data
    if np.isnan(z).any():
        raise NumericError("cross_entropy input contains NaN")
    mx = z.max(axis=1, keepdims=True)
    lse = mx[:, 0] + np.log(np.exp(z - mx).sum(axis=1))
    rows = np.arange(z.shape[0])
    out = Tensor(np.mean(lse - z[rows, t]))

    def back(g):
        p = np.exp(z - lse[:, None])
        p[rows, t] -= 1.0
        return (float(g) * p / z.shape[0],)

    return _record(out, (logits,), back)


def topk_mask(logits: Tensor, k: int) -> tuple[tuple[int, ...], Tensor]:
    """Keep the k largest entries of a 1-D tensor, mask the rest to NEG_INF.

    Returns (indices, masked). Indices are ordered by descending value, ties
    broken by lowest index first. Gradient flows only through the kept
    entries; the mask is a stop-gradient on the rest.
    """
    logits = _as_tensor(logits)
    if logits.data.ndim != 1:
        raise DimensionError(f"topk_mask needs a 1-D tensor, got {logits.shape}")
    c = logits.shape[0]
    if not 1 <= k <= c:
        raise ParameterError(f"k={k} out of range [1, {c}]")
    order = np.argsort(-logits.data, kind="stable")
    idx = order[:k]
    masked = np.full(c, NEG_INF)
    masked[idx] = logits.data[idx]
    out = Tensor(masked)

    def back(g):
        z = np.zeros(c)
        z[idx] = g[idx]
        return (z,)

    return tuple(int(i) for i in idx), _record(out, (logits,), back)


def gather_rows(a: Tensor, idx) -> Tensor:
    """Select rows of a 2-D tensor by integer index (duplicates allowed)."""
    a = _as_tensor(a)
    if a.data.ndim != 2:
        raise DimensionError(f"gather_rows needs a 2-D tensor, got {a.shape}")
    idx = np.asarray(idx, dtype=np.intp)
    if idx.ndim != 1:
        raise DimensionError(f"row index must be 1-D, got shape {idx.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[0]):
        raise ParameterError("row index out of range")
    out = Tensor(a.data[idx])

    def back(g):
        z = np.zeros_like(a.data)
        np.add.at(z, idx, g)
        return (z,)

    return _record(out, (a,), back)


def scatter_rows(rows: Tensor, idx, num_rows: int) -> Tensor:
    """Place rows into a zero [num_rows, d] tensor; duplicate indices add."""
    rows = _as_tensor(rows)
    if rows.data.ndim != 2:
        raise DimensionError(f"scatter_rows needs a 2-D tensor, got {rows.shape}")
    idx = np.asarray(idx, dtype=np.intp)
    if idx.shape != (rows.shape[0],):
        raise DimensionError(
            f"index of shape {idx.shape} does not match rows {rows.shape}"
        )
    if idx.size and (idx.min() < 0 or idx.max() >= num_rows):
        raise ParameterError("scatter index out of range")
    z = np.zeros((num_rows, rows.shape[1]))
    np.add.at(z, idx, rows.data)
    out = Tensor(z)
    return _record(out, (rows,), lambda g: (g[idx],))


def gather_elems(a: Tensor, row_idx, col_idx) -> Tensor:
    """Pick entries a[row_idx[i], col_idx[i]] of a 2-D tensor into a vector.

    col_idx may be a single int, broadcast against row_idx.
    """
    a = _as_tensor(a)
    if a.data.ndim != 2:
        raise DimensionError(f"gather_elems needs a 2-D tensor, got {a.shape}")
    rows = np.asarray(row_idx, dtype=np.intp)
    cols = np.broadcast_to(np.asarray(col_idx, dtype=np.intp), rows.shape)
    out = Tensor(a.data[rows, cols])

    def back(g):
        z = np.zeros_like(a.data)
        np.add.at(z, (rows, cols), g)
        return (z,)

    return _record(out, (a,), back)


def mul_colvec(a: Tensor, v: Tensor) -> Tensor:
    """Scale each row of a 2-D tensor by the matching entry of a vector."""
    a, v = _as_tensor(a), _as_tensor(v)
    if a.data.ndim != 2 or v.data.ndim != 1 or v.shape[0] != a.shape[0]:
        raise DimensionError(f"mul_colvec shapes incompatible: {a.shape} vs {v.shape}")
    out = Tensor(a.data * v.data[:, None])

    def back(g):
        return g * v.data[:, None], (g * a.data).sum(axis=1)

    return _record(out, (a, v), back)


def sum_cols(a: Tensor, col_mask) -> Tensor:
    """Row-wise sum over a boolean column subset of a 2-D tensor: -> [B]."""
    a = _as_tensor(a)
    mask = np.asarray(col_mask, dtype=bool)
    if a.data.ndim != 2 or mask.shape != (a.shape[1],):
        raise DimensionError(f"sum_cols mask {mask.shape} does not fit {a.shape}")
    out = Tensor(a.data[:, mask].sum(axis=1))

    def back(g):
        z = np.zeros_like(a.data)
        z[:, mask] = g[:, None]
        return (z,)

    return _record(out, (a,), back)


def masked_fill(a: Tensor, mask, value: float) -> Tensor:
    """Replace entries where mask is True by a constant; stop-gradient there."""
    a = _as_tensor(a)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != a.shape:
        raise DimensionError(f"mask shape {mask.shape} does not match {a.shape}")
    out = Tensor(np.where(mask, value, a.data))
    keep = ~mask
    return _record(out, (a,), lambda g: (g * keep,))
