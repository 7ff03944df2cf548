"""Small reverse-mode differentiation engine over dense numpy arrays.

Every primitive computes its forward value eagerly and, when a :class:`Tape`
is active and any input requires a gradient, appends a closure that applies
the reverse rule. Ops are recorded in execution order, so replaying the list
backwards is a valid reverse topological order.

Arrays are 2-D (rows x columns) except for the memory buffers and the stacked
per-action transition weights, which are 3-D. Broadcasting is limited to a
``(1, n)`` row or a ``(m, 1)`` column against an ``(m, n)`` matrix.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import expit

# Forward ops on a tape run under this error state, so overflow raises
# instead of producing inf. Use ``guard()`` for tape-free evaluation.
_FP_STATE = dict(over="raise", invalid="raise", divide="raise", under="ignore")

_ACTIVE: list["Tape"] = []


class ShapeError(ValueError):
    """Operand shapes are incompatible for a primitive."""

    def __init__(self, op: str, *shapes):
        self.op = op
        self.shapes = shapes
        super().__init__(f"{op}: incompatible shapes {', '.join(str(s) for s in shapes)}")


class NonFiniteError(FloatingPointError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "is_leaf")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self.is_leaf = True

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        tag = f" {self.name}" if self.name else ""
        return f"Tensor{tag}(shape={self.data.shape}, requires_grad={self.requires_grad})"


class Tape:
    """Ordered record of reverse rules. Use as a context manager."""

    def __init__(self):
        self.ops: list[Callable[[], None]] = []
        self.leaves: dict[int, Tensor] = {}
        self.nodes: list[Tensor] = []
        self.buffers: list[Buffer] = []

    def __enter__(self) -> "Tape":
        _ACTIVE.append(self)
        self._err = np.errstate(**_FP_STATE)
        self._err.__enter__()
        return self

    def __exit__(self, *exc) -> None:
        self._err.__exit__(*exc)
        _ACTIVE.remove(self)

    def record(self, out: Tensor, inputs: Sequence, rule: Callable[[], None]) -> None:
        for t in inputs:
            if t.is_leaf and t.requires_grad:
                self.leaves[id(t)] = t
        out.is_leaf = False
        self.nodes.append(out)
        self.ops.append(rule)

    def backward(self, loss: Tensor) -> dict[int, np.ndarray]:
        return backward(self, loss)


def _tape() -> Tape | None:
    return _ACTIVE[-1] if _ACTIVE else None


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)



def guard():
    """Error state that turns floating-point overflow into an exception."""
    return np.errstate(**_FP_STATE)


def _check(op: str, arr: np.ndarray) -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"{op}: non-finite value in forward output")


def _acc(x: np.ndarray):
    # reductions accumulate in 64-bit even when storage is 32-bit
    return None if x.dtype == np.float64 else np.float64


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=t.data.dtype, copy=True)
    else:
        t.grad += g


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back to an operand's shape."""
    if g.shape == shape:
        return g
    if shape[0] == 1 and g.shape[0] != 1:
        g = g.sum(axis=0, keepdims=True, dtype=_acc(g))
    if len(shape) > 1 and shape[1] == 1 and g.shape[1] != 1:
        g = g.sum(axis=1, keepdims=True, dtype=_acc(g))
    return g


def _broadcast_ok(a: np.ndarray, b: np.ndarray) -> bool:
    if a.shape == b.shape:
        return True
    if a.ndim != 2 or b.ndim != 2:
        return False
    rows = b.shape[0] in (1, a.shape[0]) and a.shape[0] >= b.shape[0]
    cols = b.shape[1] in (1, a.shape[1]) and a.shape[1] >= b.shape[1]
    return rows and cols


def _result(op: str, data: np.ndarray, inputs: Sequence[Tensor]) -> tuple[Tensor, Tape | None]:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out.is_leaf = True
    if _ACTIVE:
        for t in inputs:
            if t.requires_grad:
                out.requires_grad = True
                return out, _ACTIVE[-1]
    out.requires_grad = False
    if not _ACTIVE and not np.isfinite(data).all():
        # a Tape raises at the faulting numpy call; without one, check the result
        raise NonFiniteError(f"{op}: non-finite value in forward output")
    return out, None


# --------------------------------------------------------------------------
# primitives


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)
    out, tape = _result("matmul", a.data @ b.data, (a, b))
    if tape:
        def rule():
            g = out.grad
            if g is None:
                return
            if a.requires_grad:
                _accum(a, g @ b.data.T)
            if b.requires_grad:
                _accum(b, a.data.T @ g)
        tape.record(out, (a, b), rule)
    return out


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if not _broadcast_ok(a.data, b.data):
        raise ShapeError("add", a.shape, b.shape)
    out, tape = _result("add", a.data + b.data, (a, b))
    if tape:
        def rule():
            g = out.grad
            if g is None:
                return
            _accum(a, g)
            if b.requires_grad:
                _accum(b, _reduce_to(g, b.data.shape))
        tape.record(out, (a, b), rule)
    return out


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if not _broadcast_ok(a.data, b.data):
        raise ShapeError("sub", a.shape, b.shape)
    out, tape = _result("sub", a.data - b.data, (a, b))
    if tape:
        def rule():
            g = out.grad
            if g is None:
                return
            _accum(a, g)
            if b.requires_grad:
                _accum(b, -_reduce_to(g, b.data.shape))
        tape.record(out, (a, b), rule)
    return out


def scale(a, c: float) -> Tensor:
    a = _as_tensor(a)
    out, tape = _result("scale", a.data * c, (a,))
    if tape:
        def rule():
            if out.grad is not None:
                _accum(a, out.grad * c)
        tape.record(out, (a,), rule)
    return out


def elementwise_mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if not _broadcast_ok(a.data, b.data):
        raise ShapeError("elementwise_mul", a.shape, b.shape)
    out, tape = _result("elementwise_mul", a.data * b.data, (a, b))
    if tape:
        def rule():
            g = out.grad
            if g is None:
                return
            if a.requires_grad:
                _accum(a, g * b.data)
            if b.requires_grad:
                _accum(b, _reduce_to(g * a.data, b.data.shape))
        tape.record(out, (a, b), rule)
    return out


def relu(a) -> Tensor:
    a = _as_tensor(a)
    if _ReluProbe.stack:
        _ReluProbe.stack[-1].patterns.append((a.data > 0).tobytes())
    out, tape = _result("relu", np.maximum(a.data, 0.0), (a,))
    if tape:
        def rule():
            if out.grad is not None:
                _accum(a, out.grad * (a.data > 0))
        tape.record(out, (a,), rule)
    return out


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    y = expit(a.data)
    out, tape = _result("sigmoid", y, (a,))
    if tape:
        def rule():
            if out.grad is not None:
                _accum(a, out.grad * y * (1.0 - y))
        tape.record(out, (a,), rule)
    return out


def row_softmax(a, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over each row. Entries where ``mask`` is False get weight 0.

    A row with no unmasked entry is an error: the caller is expected to use
    an empty-store sentinel instead.
    """
    a = _as_tensor(a)
    x = a.data
    if x.ndim != 2:
        raise ShapeError("row_softmax", a.shape)
    if mask is not None:
        if mask.shape != x.shape:
            raise ShapeError("row_softmax", a.shape, mask.shape)
        if not mask.any(axis=1).all():
            raise ValueError("row_softmax: a row has every entry masked")
        x = np.where(mask, x, -np.inf)
    m = x.max(axis=1, keepdims=True)
    e = np.exp(x - m)
    y = (e / e.sum(axis=1, keepdims=True, dtype=_acc(e))).astype(a.data.dtype, copy=False)
    out, tape = _result("row_softmax", y, (a,))
    if tape:
        def rule():
            g = out.grad
            if g is None:
                return
            inner = (g * y).sum(axis=1, keepdims=True, dtype=_acc(y))
            _accum(a, y * (g - inner))
        tape.record(out, (a,), rule)
    return out


def fixed_layernorm(a, eps: float = 0.0) -> Tensor:
    """Per-row z-score with no learned gain or bias."""
    a = _as_tensor(a)
    x = a.data
    if x.ndim != 2 or x.shape[1] < 2:
        raise ShapeError("fixed_layernorm", a.shape)
    acc = _acc(x)
    xc = x - x.mean(axis=1, keepdims=True, dtype=acc)
    var = (xc * xc).mean(axis=1, keepdims=True, dtype=acc)
    if eps == 0.0 and (var <= 0).any():
        raise ValueError("fixed_layernorm: constant row has no z-score")
    inv = 1.0 / np.sqrt(var + eps)
    y = (xc * inv).astype(x.dtype, copy=False)
    out, tape = _result("fixed_layernorm", y, (a,))
    if tape:
        def rule():
            g = out.grad
            if g is None:
                return
            gm = g.mean(axis=1, keepdims=True, dtype=acc)
            gy = (g * y).mean(axis=1, keepdims=True, dtype=acc)
            _accum(a, inv * (g - gm - y * gy))
        tape.record(out, (a,), rule)
    return out


def cross_entropy_logits(logits, targets) -> Tensor:
    """Per-row cross entropy ``-log softmax(logits)[target]``, shape (rows, 1)."""
    z = _as_tensor(logits)
    t = np.asarray(targets, dtype=np.int64).reshape(-1)
    if z.data.ndim != 2 or t.shape[0] != z.data.shape[0]:
        raise ShapeError("cross_entropy_logits", z.shape, t.shape)
    if t.size and (t.min() < 0 or t.max() >= z.data.shape[1]):
        raise ValueError("cross_entropy_logits: target id out of range")
    x = z.data
    m = x.max(axis=1, keepdims=True)
    e = np.exp(x - m)
    s = e.sum(axis=1, keepdims=True, dtype=_acc(e))
    rows = np.arange(x.shape[0])
    ce = (np.log(s) + m - x[rows, t][:, None]).astype(x.dtype, copy=False)
    out, tape = _result("cross_entropy_logits", ce, (z,))
    if tape:
        def rule():
            g = out.grad
            if g is None:
                return
            p = e / s
            p[rows, t] -= 1.0
            _accum(z, p * g)
        tape.record(out, (z,), rule)
    return out


def concat_rows(parts: Sequence) -> Tensor:
    ts = [_as_tensor(p) for p in parts]
    if not ts or any(t.data.ndim != 2 or t.data.shape[1] != ts[0].data.shape[1] for t in ts):
        raise ShapeError("concat_rows", *(t.shape for t in ts))
    out, tape = _result("concat_rows", np.concatenate([t.data for t in ts], axis=0), ts)
    if tape:
        bounds = np.cumsum([0] + [t.data.shape[0] for t in ts])

        def rule():
            g = out.grad
            if g is None:
                return
            for t, lo, hi in zip(ts, bounds[:-1], bounds[1:]):
                if t.requires_grad:
                    _accum(t, g[lo:hi])
        tape.record(out, ts, rule)
    return out


def sum_rows(a) -> Tensor:
    """Sum over rows; (m, n) -> (1, n)."""
    a = _as_tensor(a)
    if a.data.ndim != 2:
        raise ShapeError("sum_rows", a.shape)
    y = a.data.sum(axis=0, keepdims=True, dtype=_acc(a.data)).astype(a.data.dtype, copy=False)
    out, tape = _result("sum_rows", y, (a,))
    if tape:
        def rule():
            if out.grad is not None:
                _accum(a, np.broadcast_to(out.grad, a.data.shape))
        tape.record(out, (a,), rule)
    return out


def sum_cols(a) -> Tensor:
    """Sum over columns; (m, n) -> (m, 1)."""
    a = _as_tensor(a)
    if a.data.ndim != 2:
        raise ShapeError("sum_cols", a.shape)
    y = a.data.sum(axis=1, keepdims=True, dtype=_acc(a.data)).astype(a.data.dtype, copy=False)
    out, tape = _result("sum_cols", y, (a,))
    if tape:
        def rule():
            if out.grad is not None:
                _accum(a, np.broadcast_to(out.grad, a.data.shape))
        tape.record(out, (a,), rule)
    return out


def sum_squares(a) -> Tensor:
    """Sum of squared entries of an array of any rank, as (1, 1)."""
    a = _as_tensor(a)
    x = a.data
    y = np.array([[np.vdot(x, x)]], dtype=x.dtype)
    out, tape = _result("sum_squares", y, (a,))
    if tape:
        def rule():
            if out.grad is not None:
                _accum(a, 2.0 * out.grad[0, 0] * x)
        tape.record(out, (a,), rule)
    return out


def total(a) -> Tensor:
    """Sum of every entry as a (1, 1) tensor."""
    return sum_cols(sum_rows(a))


def indexed_matmul(x, weights, index) -> Tensor:
    """Row ``i`` of ``x`` times ``weights[index[i]]``.

    ``weights`` is a stack (k, n, m); used for action-conditioned transitions.
    """
    x, w = _as_tensor(x), _as_tensor(weights)
    idx = np.asarray(index, dtype=np.int64).reshape(-1)
    if (x.data.ndim != 2 or w.data.ndim != 3 or idx.shape[0] != x.data.shape[0]
            or x.data.shape[1] != w.data.shape[1]):
        raise ShapeError("indexed_matmul", x.shape, w.shape, idx.shape)
    if idx.size and (idx.min() < 0 or idx.max() >= w.data.shape[0]):
        raise IndexError(f"indexed_matmul: index out of range for {w.data.shape[0]} matrices")
    sel = w.data[idx]
    y = np.matmul(x.data[:, None, :], sel)[:, 0, :]
    out, tape = _result("indexed_matmul", y, (x, w))
    if tape:
        def rule():
            g = out.grad
            if g is None:
                return
            if x.requires_grad:
                _accum(x, np.matmul(g[:, None, :], sel.transpose(0, 2, 1))[:, 0, :])
            if w.requires_grad:
                gw = np.zeros_like(w.data)
                for k in np.unique(idx):
                    rows = idx == k
                    gw[k] = x.data[rows].T @ g[rows]
                _accum(w, gw)
        tape.record(out, (x, w), rule)
    return out


# --------------------------------------------------------------------------
# growing row buffers for causal memory


class Buffer:
    """Preallocated (rows, capacity, width) store written one slot at a time.

    Each slot is written once and afterwards only read through a prefix. In
    the reverse pass every read of a slot runs before the rule of the write
    that filled it. Reads do not materialise their (rows, n, width) gradient;
    they log a per-slot coefficient vector and a width vector, and the write
    rule for slot ``s`` contracts the logged pairs at ``s`` only.
    """

    __slots__ = ("data", "grad", "requires_grad", "name", "is_leaf", "filled",
                 "_coef", "_vecs", "_nlog")

    def __init__(self, rows: int, capacity: int, width: int, dtype=np.float64, name=None):
        self.data = np.zeros((rows, capacity, width), dtype=dtype)
        self.grad = None
        self.requires_grad = False
        self.name = name
        self.is_leaf = False
        self.filled = 0
        self.reset_grad()

    @property
    def shape(self):
        return self.data.shape

    def reset_grad(self) -> None:
        self._coef = None
        self._vecs = None
        self._nlog = 0

    def log_grad(self, coef: np.ndarray, vec: np.ndarray) -> None:
        """Add ``coef[:, s] * vec`` to the gradient of every slot ``s < coef.shape[1]``."""
        rows, cap, width = self.data.shape
        if self._coef is None or self._nlog == self._coef.shape[2]:
            size = max(16, 2 * self._nlog)
            coef_new = np.zeros((rows, cap, size), dtype=self.data.dtype)
            vecs_new = np.zeros((rows, size, width), dtype=self.data.dtype)
            if self._coef is not None:
                coef_new[:, :, : self._nlog] = self._coef[:, :, : self._nlog]
                vecs_new[:, : self._nlog] = self._vecs[:, : self._nlog]
            self._coef, self._vecs = coef_new, vecs_new
        r = self._nlog
        self._coef[:, : coef.shape[1], r] = coef
        self._vecs[:, r] = vec
        self._nlog += 1

    def slot_grad(self, slot: int) -> np.ndarray | None:
        if self._nlog == 0:
            return None
        r = self._nlog
        return np.matmul(self._coef[:, slot, None, :r], self._vecs[:, :r])[:, 0, :]


def buffer_write(buf: Buffer, slot: int, rows) -> None:
    rows = _as_tensor(rows)
    if rows.data.shape != (buf.data.shape[0], buf.data.shape[2]) or not 0 <= slot < buf.data.shape[1]:
        raise ShapeError("buffer_write", buf.shape, rows.shape, slot)
    if slot != buf.filled:
        raise ValueError(f"buffer_write: slot {slot} written out of order (next is {buf.filled})")
    _check("buffer_write", rows.data)
    buf.data[:, slot, :] = rows.data
    buf.filled += 1
    tape = _tape()
    if tape is not None and rows.requires_grad:
        if not buf.requires_grad:
            buf.requires_grad = True
            tape.buffers.append(buf)
        if rows.is_leaf:
            tape.leaves[id(rows)] = rows

        def rule():
            g = buf.slot_grad(slot)
            if g is not None:
                _accum(rows, g)
        tape.ops.append(rule)


def prefix_dot(q, buf: Buffer, n: int) -> Tensor:
    """Similarities of each query row with the first ``n`` slots of its buffer row."""
    q = _as_tensor(q)
    if q.data.shape != (buf.data.shape[0], buf.data.shape[2]) or not 0 < n <= buf.filled:
        raise ShapeError("prefix_dot", q.shape, buf.shape, n)
    keys = buf.data[:, :n, :]
    y = np.matmul(keys, q.data[:, :, None])[:, :, 0]
    out, tape = _result("prefix_dot", y, (q, buf))
    if tape:
        def rule():
            g = out.grad
            if g is None:
                return
            if q.requires_grad:
                _accum(q, np.matmul(g[:, None, :], keys)[:, 0, :])
            if buf.requires_grad:
                buf.log_grad(g, q.data)
        tape.record(out, (q,), rule)
    return out


def prefix_weighted_sum(w, buf: Buffer, n: int) -> Tensor:
    """Per-row weighted sum of the first ``n`` buffer slots; (rows, n) -> (rows, width)."""
    w = _as_tensor(w)
    if w.data.shape != (buf.data.shape[0], n) or not 0 < n <= buf.filled:
        raise ShapeError("prefix_weighted_sum", w.shape, buf.shape, n)
    vals = buf.data[:, :n, :]
    y = np.matmul(w.data[:, None, :], vals)[:, 0, :]
    out, tape = _result("prefix_weighted_sum", y, (w, buf))
    if tape:
        def rule():
            g = out.grad
            if g is None:
                return
            if w.requires_grad:
                _accum(w, np.matmul(vals, g[:, :, None])[:, :, 0])
            if buf.requires_grad:
                buf.log_grad(w.data, g)
        tape.record(out, (w,), rule)
    return out


# --------------------------------------------------------------------------
# reverse pass and checking


def backward(tape: Tape, loss: Tensor) -> dict[int, np.ndarray]:
    """Run the reverse pass; returns ``{id(leaf): grad}`` for every leaf on the tape.

    Leaf gradients are also left in ``leaf.grad``.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward: loss must be scalar, got shape {loss.data.shape}")
    if loss.is_leaf or not loss.requires_grad:
        raise ValueError("backward: loss was not produced on this tape")
    for leaf in tape.leaves.values():
        leaf.grad = None
    for node in tape.nodes:
        node.grad = None
    for buf in tape.buffers:
        buf.reset_grad()
    loss.grad = np.ones_like(loss.data)
    for rule in reversed(tape.ops):
        rule()
    grads = {}
    for key, leaf in tape.leaves.items():
        grads[key] = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)
    return grads


@dataclass
class GradCheckReport:
    max_rel_error: dict[str, float] = field(default_factory=dict)
    tolerance: float = 1e-4
    excluded: dict[str, int] = field(default_factory=dict)

    @property
    def worst(self) -> float:
        return max(self.max_rel_error.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.worst < self.tolerance

    def __str__(self) -> str:
        lines = [f"{k}: {v:.3e}" for k, v in self.max_rel_error.items()]
        lines.append(f"worst {self.worst:.3e} vs tol {self.tolerance:.1e}: {'PASS' if self.passed else 'FAIL'}")
        return "\n".join(lines)


def grad_check(fn: Callable[[], Tensor], params: Iterable[Tensor], step: float = 1e-5,
               tolerance: float = 1e-4, names: Sequence[str] | None = None,
               skip_zero_relu_inputs: bool = True, floor: float = 1e-6) -> GradCheckReport:
    """Compare reverse-mode gradients with central differences.

    ``fn`` must rebuild the computation from ``params`` each call and return a
    scalar tensor. Relative error per entry is ``|a - n| / max(|a| + |n|, floor)``;
    the floor sits above the ~1e-10 roundoff of a central difference at
    ``step=1e-5`` so near-zero entries are compared absolutely.
    Entries whose perturbation moves some relu input across 0 within ``step``
    are excluded (the function is not differentiable there).
    """
    params = list(params)
    names = list(names) if names is not None else [p.name or f"p{i}" for i, p in enumerate(params)]
    with Tape() as tape:
        loss = fn()
    grads = backward(tape, loss)
    report = GradCheckReport(tolerance=tolerance)
    for name, p in zip(names, params):
        analytic = grads.get(id(p), np.zeros_like(p.data)).reshape(-1)
        flat = p.data.reshape(-1)
        worst = 0.0
        skipped = 0
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + step
            with _ReluProbe() as probe_hi:
                hi = float(fn().data.reshape(-1)[0])
            flat[j] = orig - step
            with _ReluProbe() as probe_lo:
                lo = float(fn().data.reshape(-1)[0])
            flat[j] = orig
            if skip_zero_relu_inputs and probe_hi.signs != probe_lo.signs:
                skipped += 1
                continue
            num = (hi - lo) / (2 * step)
            err = abs(analytic[j] - num) / max(abs(analytic[j]) + abs(num), floor)
            worst = max(worst, err)
        report.max_rel_error[name] = worst
        if skipped:
            report.excluded[name] = skipped
    return report


class _ReluProbe:
    """Records relu activation patterns during a forward pass."""

    stack: list["_ReluProbe"] = []

    def __init__(self):
        self.patterns: list[bytes] = []

    def __enter__(self):
        _ReluProbe.stack.append(self)
        return self

    def __exit__(self, *exc):
        _ReluProbe.stack.remove(self)

    @property
    def signs(self) -> tuple[bytes, ...]:
        return tuple(self.patterns)
