"""Reverse-mode automatic differentiation on an append-only tape.

Nodes hold dense numpy values (0-d scalars, vectors or matrices). Elementwise
binary ops require identical shapes; there is no implicit broadcasting. The
tape can be recorded once and replayed on new inputs with :func:`eval_graph`,
or used define-by-run, as the training loop does.

Example::

    tape = Tape()
    x1, x2 = tape.input(3.0), tape.input(4.0)
    tape.output(x1 * x2)
    eval_graph(tape, [3.0, 4.0])   # -> array([12.])
"""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np
import scipy.linalg

from .errors import EvaluationError, OracleError

__all__ = [
    "Tape", "Var", "eval_graph", "grad", "jacobian", "batch_jacobian",
    "finite_diff_jacobian", "exp", "log", "tanh", "sigmoid", "softplus",
    "relu", "clip", "smooth_leaky_relu", "square", "reciprocal", "sum", "matmul",
    "linear", "logabsdet",
]

FD_STEP = 1e-5


def _sigmoid(a):
    # exp(-|a|) never overflows
    e = np.exp(-np.abs(a))
    return np.where(a >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def _softplus(a):
    return np.maximum(a, 0.0) + np.log1p(np.exp(-np.abs(a)))


def _sleaky_forward(vals, attrs):
    a = vals[0]
    alpha = attrs["alpha"]
    e = np.exp(-np.abs(a))
    sig = np.where(a >= 0, 1.0, e) / (1.0 + e)
    attrs["slope"] = alpha + (1.0 - alpha) * sig
    return alpha * a + (1.0 - alpha) * (np.maximum(a, 0.0) + np.log1p(e))


def _unbroadcast_matmul_a(g, a, b):
    if a.ndim == 1 and b.ndim == 2:
        return g @ b.T
    if a.ndim == 2 and b.ndim == 1:
        return np.outer(g, b)
    if a.ndim == 1 and b.ndim == 1:
        return g * b
    return g @ b.T


def _unbroadcast_matmul_b(g, a, b):
    if a.ndim == 1 and b.ndim == 2:
        return np.outer(a, g)
    if a.ndim == 2 and b.ndim == 1:
        return a.T @ g
    if a.ndim == 1 and b.ndim == 1:
        return g * a
    return a.T @ g


def _sum_backward(g, a, attrs):
    axis = attrs.get("axis")
    if axis is None:
        return (np.full(a.shape, g, dtype=float),)
    return (np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(),)


def _getitem_backward(g, a, attrs):
    out = np.zeros(a.shape)
    np.add.at(out, attrs["key"], g)
    return (out,)


def _linear_forward(vals, attrs):
    x, w, b = vals
    return x @ w.T + b


def _linear_backward(g, vals, y, attrs):
    x, w, _ = vals
    if x.ndim == 1:
        return g @ w, np.outer(g, x), g
    return g @ w, g.T @ x, g.sum(axis=0)


def _logabsdet_forward(vals, attrs):
    lu, _ = scipy.linalg.lu_factor(vals[0], check_finite=False)
    return np.sum(np.log(np.abs(np.diag(lu))))


def _logabsdet_backward(g, vals, y, attrs):
    return (g * np.linalg.inv(vals[0]).T,)


# op name -> (forward(values, attrs), backward(g, values, out, attrs) -> grads)
_OPS: dict[str, tuple[Callable, Callable]] = {
    "add": (lambda v, at: v[0] + v[1], lambda g, v, y, at: (g, g)),
    "sub": (lambda v, at: v[0] - v[1], lambda g, v, y, at: (g, -g)),
    "mul": (lambda v, at: v[0] * v[1], lambda g, v, y, at: (g * v[1], g * v[0])),
    "neg": (lambda v, at: -v[0], lambda g, v, y, at: (-g,)),
    "scale": (lambda v, at: v[0] * at["c"], lambda g, v, y, at: (g * at["c"],)),
    "shift": (lambda v, at: v[0] + at["c"], lambda g, v, y, at: (g,)),
    "exp": (lambda v, at: np.exp(v[0]), lambda g, v, y, at: (g * y,)),
    "log": (lambda v, at: np.log(v[0]), lambda g, v, y, at: (g / v[0],)),
    "tanh": (lambda v, at: np.tanh(v[0]), lambda g, v, y, at: (g * (1.0 - y * y),)),
    "sigmoid": (lambda v, at: _sigmoid(v[0]), lambda g, v, y, at: (g * y * (1.0 - y),)),
    "softplus": (lambda v, at: _softplus(v[0]), lambda g, v, y, at: (g * _sigmoid(v[0]),)),
    "relu": (lambda v, at: np.maximum(v[0], 0.0), lambda g, v, y, at: (g * (v[0] > 0),)),
    "clip": (
        lambda v, at: np.clip(v[0], at["lo"], at["hi"]),
        lambda g, v, y, at: (g * ((v[0] > at["lo"]) & (v[0] < at["hi"])),),
    ),
    "sleaky": (_sleaky_forward, lambda g, v, y, at: (g * at["slope"],)),
    "square": (lambda v, at: v[0] * v[0], lambda g, v, y, at: (2.0 * g * v[0],)),
    "reciprocal": (lambda v, at: 1.0 / v[0], lambda g, v, y, at: (-g * y * y,)),
    "sum": (
        lambda v, at: np.sum(v[0], axis=at.get("axis")),
        lambda g, v, y, at: _sum_backward(g, v[0], at),
    ),
    "getitem": (lambda v, at: v[0][at["key"]], lambda g, v, y, at: _getitem_backward(g, v[0], at)),
    "matmul": (
        lambda v, at: v[0] @ v[1],
        lambda g, v, y, at: (_unbroadcast_matmul_a(g, v[0], v[1]), _unbroadcast_matmul_b(g, v[0], v[1])),
    ),
    "linear": (_linear_forward, _linear_backward),
    "logabsdet": (_logabsdet_forward, _logabsdet_backward),
}

_ELEMENTWISE_BINARY = {"add", "sub", "mul"}


class _Node:
    __slots__ = ("op", "args", "value", "attrs")

    def __init__(self, op, args, value, attrs):
        self.op = op
        self.args = args
        self.value = value
        self.attrs = attrs


class Tape:
    """Append-only computation graph.

    Node indices are topologically ordered by construction: a node can only
    reference nodes that already exist.
    """

    def __init__(self, check_finite: bool = True):
        self.nodes: list[_Node] = []
        self.input_ids: list[int] = []
        self.output_ids: list[int] = []
        self.check_finite = check_finite

    def __len__(self):
        return len(self.nodes)

    def _push(self, op, args, value, attrs=None):
        idx = len(self.nodes)
        if self.check_finite and not np.all(np.isfinite(value)):
            raise EvaluationError(f"node {idx} ({op}) produced a non-finite value")
        self.nodes.append(_Node(op, args, value, attrs or {}))
        return Var(self, idx)

    def input(self, value) -> "Var":
        var = self._push("input", (), np.asarray(value, dtype=float))
        self.input_ids.append(var.idx)
        return var

    def const(self, value) -> "Var":
        return self._push("const", (), np.asarray(value, dtype=float))

    def output(self, var: "Var") -> "Var":
        self.output_ids.append(var.idx)
        return var

    def apply(self, op: str, *args: "Var", **attrs) -> "Var":
        vals = [self.nodes[a.idx].value for a in args]
        if op in _ELEMENTWISE_BINARY and vals[0].shape != vals[1].shape:
            raise ValueError(f"{op}: shape mismatch {vals[0].shape} vs {vals[1].shape}")
        value = _OPS[op][0](vals, attrs)
        return self._push(op, tuple(a.idx for a in args), value, attrs)

    def backward(self, root: "Var", seed=None) -> list:
        """Single reverse sweep from ``root``; returns the adjoint of every node
        (``None`` where the root does not depend on the node)."""
        nodes = self.nodes
        adj: list = [None] * (root.idx + 1)
        rv = nodes[root.idx].value
        adj[root.idx] = np.ones_like(rv) if seed is None else np.asarray(seed, dtype=float)
        for i in range(root.idx, -1, -1):
            g = adj[i]
            if g is None:
                continue
            node = nodes[i]
            if not node.args:
                continue
            vals = [nodes[a].value for a in node.args]
            grads = _OPS[node.op][1](g, vals, node.value, node.attrs)
            for a, ga in zip(node.args, grads):
                if adj[a] is None:
                    adj[a] = ga
                else:
                    adj[a] = adj[a] + ga
        return adj

    def gradients(self, root: "Var", wrt: Sequence["Var"], seed=None) -> list[np.ndarray]:
        adj = self.backward(root, seed)
        out = []
        for v in wrt:
            g = adj[v.idx] if v.idx < len(adj) else None
            out.append(np.zeros_like(v.value) if g is None else g)
        return out


class Var:
    """Handle to one tape node with arithmetic operator overloads."""

    __slots__ = ("tape", "idx")

    def __init__(self, tape: Tape, idx: int):
        self.tape = tape
        self.idx = idx

    @property
    def value(self) -> np.ndarray:
        return self.tape.nodes[self.idx].value

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Var(#{self.idx}, shape={self.shape})"

    def _lift(self, other):
        if isinstance(other, Var):
            return other
        return self.tape.const(other)

    def __add__(self, other):
        if isinstance(other, Var):
            return self.tape.apply("add", self, other)
        if np.ndim(other) == 0:
            return self.tape.apply("shift", self, c=float(other))
        return self.tape.apply("add", self, self._lift(other))

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Var):
            return self.tape.apply("sub", self, other)
        if np.ndim(other) == 0:
            return self.tape.apply("shift", self, c=-float(other))
        return self.tape.apply("sub", self, self._lift(other))

    def __rsub__(self, other):
        if np.ndim(other) == 0:
            return self.tape.apply("shift", self.tape.apply("neg", self), c=float(other))
        return self._lift(other) - self

    def __mul__(self, other):
        if isinstance(other, Var):
            return self.tape.apply("mul", self, other)
        if np.ndim(other) == 0:
            return self.tape.apply("scale", self, c=float(other))
        return self.tape.apply("mul", self, self._lift(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        if not isinstance(other, Var) and np.ndim(other) == 0:
            return self.tape.apply("scale", self, c=1.0 / float(other))
        return self * reciprocal(self._lift(other))

    def __rtruediv__(self, other):
        if np.ndim(other) == 0:
            return reciprocal(self) * float(other)
        return self._lift(other) * reciprocal(self)

    def __neg__(self):
        return self.tape.apply("neg", self)

    def __pow__(self, p):
        if p != 2:
            raise NotImplementedError("only squaring is supported")
        return self.tape.apply("square", self)

    def __matmul__(self, other):
        return self.tape.apply("matmul", self, self._lift(other))

    def __getitem__(self, key):
        return self.tape.apply("getitem", self, key=key)


def exp(a: Var) -> Var:
    return a.tape.apply("exp", a)


def log(a: Var) -> Var:
    return a.tape.apply("log", a)


def tanh(a: Var) -> Var:
    return a.tape.apply("tanh", a)


def sigmoid(a: Var) -> Var:
    return a.tape.apply("sigmoid", a)


def softplus(a: Var) -> Var:
    return a.tape.apply("softplus", a)


def relu(a: Var) -> Var:
    return a.tape.apply("relu", a)


def smooth_leaky_relu(a: Var, alpha: float) -> Var:
    return a.tape.apply("sleaky", a, alpha=float(alpha))


def clip(a: Var, lo: float, hi: float) -> Var:
    """Clamp to ``[lo, hi]``; the gradient is zero where clamping is active."""
    return a.tape.apply("clip", a, lo=float(lo), hi=float(hi))


def square(a: Var) -> Var:
    return a.tape.apply("square", a)


def reciprocal(a: Var) -> Var:
    return a.tape.apply("reciprocal", a)


def sum(a: Var, axis=None) -> Var:  # noqa: A001 - mirrors numpy
    return a.tape.apply("sum", a, axis=axis)


def matmul(a: Var, b: Var) -> Var:
    return a.tape.apply("matmul", a, b)


def linear(x: Var, w: Var, b: Var) -> Var:
    """``x @ w.T + b`` for a single vector or a row-batch ``x``."""
    return x.tape.apply("linear", x, w, b)


def logabsdet(m: Var) -> Var:
    """log|det m| via LU with partial pivoting; gradient is ``inv(m).T``."""
    return m.tape.apply("logabsdet", m)


# --- replay API -------------------------------------------------------------

def eval_graph(tape: Tape, inputs: Sequence) -> np.ndarray:
    """Re-run the recorded graph on new input values; returns the flattened
    concatenation of the declared outputs."""
    if len(inputs) != len(tape.input_ids):
        raise ValueError(f"tape declares {len(tape.input_ids)} inputs, got {len(inputs)}")
    for idx, val in zip(tape.input_ids, inputs):
        tape.nodes[idx].value = np.asarray(val, dtype=float)
    with np.errstate(all="ignore"):
        for i, node in enumerate(tape.nodes):
            if node.args:
                vals = [tape.nodes[a].value for a in node.args]
                node.value = _OPS[node.op][0](vals, node.attrs)
            if not np.all(np.isfinite(node.value)):
                raise EvaluationError(f"node {i} ({node.op}) produced a non-finite value")
    return np.concatenate([np.ravel(tape.nodes[i].value) for i in tape.output_ids])


def _output_slots(tape: Tape):
    slots = []
    for oid in tape.output_ids:
        shape = tape.nodes[oid].value.shape
        for flat in range(int(np.prod(shape))):
            slots.append((oid, shape, flat))
    return slots


def _sweep_inputs(tape: Tape, oid: int, shape, flat: int) -> np.ndarray:
    seed = np.zeros(shape)
    seed.flat[flat] = 1.0
    adj = tape.backward(Var(tape, oid), seed)
    parts = []
    for iid in tape.input_ids:
        g = adj[iid] if iid < len(adj) else None
        size = tape.nodes[iid].value.size
        parts.append(np.zeros(size) if g is None else np.ravel(g))
    return np.concatenate(parts)


def grad(tape: Tape, inputs: Sequence, output_index: int = 0) -> np.ndarray:
    """Gradient of one (flattened) output entry w.r.t. all flattened inputs."""
    eval_graph(tape, inputs)
    slots = _output_slots(tape)
    if not 0 <= output_index < len(slots):
        raise IndexError(f"output index {output_index} out of range ({len(slots)} outputs)")
    return _sweep_inputs(tape, *slots[output_index])


def jacobian(tape: Tape, inputs: Sequence) -> np.ndarray:
    """Full Jacobian, one reverse sweep per output entry."""
    eval_graph(tape, inputs)
    return np.array([_sweep_inputs(tape, *slot) for slot in _output_slots(tape)])


def batch_jacobian(fn: Callable[[Var], Var], points: np.ndarray) -> np.ndarray:
    """Per-row Jacobians of a row-independent map applied to a batch.

    ``fn`` takes a ``(B, d_in)`` Var and returns a ``(B, d_out)`` Var whose row
    ``i`` depends only on input row ``i``. Costs ``d_out`` reverse sweeps
    regardless of ``B``. Returns an array of shape ``(B, d_out, d_in)``.
    """
    points = np.atleast_2d(np.asarray(points, dtype=float))
    tape = Tape(check_finite=False)
    z = tape.input(points)
    y = fn(z)
    b, d_out = y.shape
    jac = np.empty((b, d_out, points.shape[1]))
    for k in range(d_out):
        seed = np.zeros((b, d_out))
        seed[:, k] = 1.0
        jac[:, k, :] = tape.gradients(y, [z], seed)[0]
    return jac


def finite_diff_jacobian(f: Callable[[np.ndarray], np.ndarray], point, step: float = FD_STEP) -> np.ndarray:
    """Central-difference Jacobian estimate of ``f`` at ``point``."""
    if step <= 0:
        raise ValueError("step must be positive")
    point = np.asarray(point, dtype=float)
    cols = []
    for j in range(point.size):
        e = np.zeros_like(point)
        e.flat[j] = step
        try:
            with np.errstate(all="ignore"):
                hi = np.ravel(f(point + e))
                lo = np.ravel(f(point - e))
        except Exception as exc:  # the oracle must not mask the cause
            raise OracleError(f"map undefined near probe {j}: {exc}") from exc
        if not (np.all(np.isfinite(hi)) and np.all(np.isfinite(lo))):
            raise OracleError(f"map returned non-finite values at probe {j}")
        cols.append((hi - lo) / (2.0 * step))
    return np.stack(cols, axis=1)
