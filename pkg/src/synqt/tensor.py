"""Dense float64 tensors with a recording gradient tape.

Every differentiable primitive declares which values it keeps for the
backward pass.  The active tape counts those scalars as they are retained --
parameters are excluded (they live in memory regardless of training), and a
value shared by several consumers is counted once.  That running total,
``Tape.saved_scalar_count``, is the measured side of the activation-memory
ledger in :mod:`synqt.accounting`.
"""

import itertools
import math

import numpy as np

from . import kernels


class ShapeError(ValueError):
    """Operand shapes violate an operation's contract."""


class TapeError(RuntimeError):
    """Gradient-tape contract violation (e.g. backward on a non-scalar)."""


_serials = itertools.count(1)
_TAPES = []


class Tensor:
    """Row-major float64 array, optionally recorded on the active tape.

    ``requires_grad`` marks tensors that participate in backward;
    ``is_param`` marks weights (trainable or frozen), which never count
    toward retained-activation totals.
    """

    __slots__ = ("data", "requires_grad", "is_param", "serial", "node")

    def __init__(self, data, requires_grad=False, is_param=False):
        arr = np.asarray(data, dtype=np.float64)
        if not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.is_param = bool(is_param)
        self.serial = next(_serials)
        self.node = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def numel(self):
        return self.data.size

    def item(self):
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        flags = []
        if self.requires_grad:
            flags.append("grad")
        if self.is_param:
            flags.append("param")
        tag = ",".join(flags) or "const"
        return f"Tensor(shape={self.shape}, {tag})"


def parameter(data):
    """A trainable weight tensor."""
    return Tensor(data, requires_grad=True, is_param=True)


def frozen(data):
    """A weight tensor excluded from gradients (and from activation counts)."""
    return Tensor(data, requires_grad=False, is_param=True)


class Node:
    __slots__ = ("out_serial", "backward_fn", "saved_scalars")

    def __init__(self, out_serial, backward_fn, saved_scalars):
        self.out_serial = out_serial
        self.backward_fn = backward_fn
        self.saved_scalars = saved_scalars


class Tape:
    """Ordered record of primitives; parents always precede consumers."""

    def __init__(self):
        self.nodes = []
        self.saved_scalar_count = 0
        self._seen = set()
        self._pending = 0

    def __enter__(self):
        _TAPES.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _TAPES.pop()
        if popped is not self:
            raise TapeError("tape context exited out of order")
        return False

    def retain(self, t):
        """Keep a tensor's values for backward; count new non-parameter scalars."""
        if not t.is_param and t.serial not in self._seen:
            self._seen.add(t.serial)
            self._pending += t.data.size
        return t.data

    def retain_private(self, arr):
        """Keep an op-internal array (not an op output); always counted."""
        self._pending += arr.size
        return arr

    def record(self, out, backward_fn):
        node = Node(out.serial, backward_fn, self._pending)
        self._pending = 0
        self.saved_scalar_count += node.saved_scalars
        out.node = node
        self.nodes.append(node)


def active_tape():
    return _TAPES[-1] if _TAPES else None


def _tracking(*tensors):
    """The active tape if this op's output participates in backward, else None."""
    tape = active_tape()
    if tape is None:
        return None
    for t in tensors:
        if t.requires_grad:
            return tape
    return None


def backward(loss, tape=None):
    """Walk the tape in reverse and return a map {tensor: grad Tensor}.

    Only tensors with ``requires_grad`` appear in the map; frozen weights and
    no-grad values never receive a gradient buffer.
    """
    if tape is None:
        tape = active_tape()
    if tape is None:
        raise TapeError("backward requires an active tape")
    if loss.numel != 1:
        raise TapeError(f"backward expects a scalar loss, got shape {loss.shape}")

    grads = {loss.serial: np.ones((1, 1))}
    holders = {loss.serial: loss}

    def accum(t, g):
        if not t.requires_grad:
            return
        s = t.serial
        if s in grads:
            grads[s] = grads[s] + g
        else:
            grads[s] = g
            holders[s] = t

    for node in reversed(tape.nodes):
        g = grads.get(node.out_serial)
        if g is None:
            continue
        node.backward_fn(g, accum)

    return {holders[s]: Tensor(a) for s, a in grads.items()}


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------

def matmul(a, b, transpose_b=False):
    """``a @ b`` (or ``a @ b.T``); each operand is retained only if the other
    side needs a gradient."""
    ad, bd = a.data, b.data
    if ad.ndim != 2 or bd.ndim != 2:
        raise ShapeError(f"matmul needs 2-D operands, got {a.shape} and {b.shape}")
    inner = bd.shape[1] if transpose_b else bd.shape[0]
    if ad.shape[1] != inner:
        raise ShapeError(f"matmul mismatch: {a.shape} x {b.shape}"
                         f"{'^T' if transpose_b else ''}")
    out_data = ad @ (bd.T if transpose_b else bd)
    tape = _tracking(a, b)
    if tape is None:
        return Tensor(out_data)
    out = Tensor(out_data, requires_grad=True)
    a_saved = tape.retain(a) if b.requires_grad else None
    b_saved = tape.retain(b) if a.requires_grad else None

    def bwd(g, accum):
        if a.requires_grad:
            accum(a, g @ b_saved if transpose_b else g @ b_saved.T)
        if b.requires_grad:
            accum(b, g.T @ a_saved if transpose_b else a_saved.T @ g)

    tape.record(out, bwd)
    return out


def _reduce_to(g, shape):
    if g.shape == shape:
        return g
    if shape == (1, 1):
        return g.sum().reshape(1, 1)
    if shape[0] == 1 and shape[1] == g.shape[1]:
        return g.sum(axis=0, keepdims=True)
    raise ShapeError(f"cannot reduce grad {g.shape} to {shape}")


def _check_broadcast(a, b, op):
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"{op} needs 2-D operands, got {a.shape} and {b.shape}")
    if b.shape == a.shape or b.shape == (1, 1):
        return
    if b.shape == (1, a.shape[1]):
        return
    raise ShapeError(f"{op} mismatch: {a.shape} vs {b.shape}")


def add(a, b):
    """Elementwise sum; ``b`` may be a row vector or scalar broadcast over ``a``."""
    _check_broadcast(a, b, "add")
    out_data = a.data + b.data
    tape = _tracking(a, b)
    if tape is None:
        return Tensor(out_data)
    out = Tensor(out_data, requires_grad=True)
    b_shape = b.shape

    def bwd(g, accum):
        if a.requires_grad:
            accum(a, g)
        if b.requires_grad:
            accum(b, _reduce_to(g, b_shape))

    tape.record(out, bwd)
    return out


def mul(a, b):
    """Elementwise product with the same broadcast rules as :func:`add`."""
    _check_broadcast(a, b, "mul")
    out_data = a.data * b.data
    tape = _tracking(a, b)
    if tape is None:
        return Tensor(out_data)
    out = Tensor(out_data, requires_grad=True)
    a_saved = tape.retain(a) if b.requires_grad else None
    b_saved = tape.retain(b) if a.requires_grad else None
    b_shape = b.shape

    def bwd(g, accum):
        if a.requires_grad:
            accum(a, g * b_saved)
        if b.requires_grad:
            accum(b, _reduce_to(g * a_saved, b_shape))

    tape.record(out, bwd)
    return out


def scale(x, s):
    """Multiply by a compile-time Python scalar; nothing retained."""
    s = float(s)
    out_data = x.data * s
    tape = _tracking(x)
    if tape is None:
        return Tensor(out_data)
    out = Tensor(out_data, requires_grad=True)

    def bwd(g, accum):
        accum(x, g * s)

    tape.record(out, bwd)
    return out


def gelu(x):
    """Exact (erf) GELU; retains its input for backward."""
    out_data = kernels.gelu_fwd(x.data)
    tape = _tracking(x)
    if tape is None:
        return Tensor(out_data)
    out = Tensor(out_data, requires_grad=True)
    x_saved = tape.retain(x)

    def bwd(g, accum):
        accum(x, kernels.gelu_bwd(x_saved, g))

    tape.record(out, bwd)
    return out


def sigmoid(x):
    """Logistic function; retains its output for backward."""
    out_data = kernels.sigmoid_fwd(x.data)
    tape = _tracking(x)
    if tape is None:
        return Tensor(out_data)
    out = Tensor(out_data, requires_grad=True)
    tape.retain(out)
    y_saved = out.data

    def bwd(g, accum):
        accum(x, kernels.sigmoid_bwd(y_saved, g))

    tape.record(out, bwd)
    return out


def softmax_rows(x):
    """Row-stabilized softmax; each row sums to one.  Retains its output."""
    if x.data.ndim != 2:
        raise ShapeError(f"softmax_rows needs a 2-D input, got {x.shape}")
    out_data = kernels.softmax_rows_fwd(x.data)
    tape = _tracking(x)
    if tape is None:
        return Tensor(out_data)
    out = Tensor(out_data, requires_grad=True)
    tape.retain(out)
    y_saved = out.data

    def bwd(g, accum):
        accum(x, kernels.softmax_rows_bwd(y_saved, g))

    tape.record(out, bwd)
    return out


def layernorm(x, gamma, beta, eps=1e-6):
    """Per-row normalization then affine.  Retains the normalized rows and the
    per-row inverse stddev."""
    if x.data.ndim != 2:
        raise ShapeError(f"layernorm needs a 2-D input, got {x.shape}")
    d = x.shape[1]
    if gamma.shape != (1, d) or beta.shape != (1, d):
        raise ShapeError(f"layernorm affine shapes {gamma.shape}/{beta.shape} "
                         f"do not match width {d}")
    out_data, xhat, rstd = kernels.layernorm_fwd(x.data, gamma.data, beta.data, eps)
    tape = _tracking(x, gamma, beta)
    if tape is None:
        return Tensor(out_data)
    out = Tensor(out_data, requires_grad=True)
    xhat = tape.retain_private(xhat)
    rstd = tape.retain_private(rstd)
    gamma_saved = gamma.data

    def bwd(g, accum):
        dx, dgamma, dbeta = kernels.layernorm_bwd(xhat, rstd, gamma_saved, g)
        if x.requires_grad:
            accum(x, dx)
        if gamma.requires_grad:
            accum(gamma, dgamma)
        if beta.requires_grad:
            accum(beta, dbeta)

    tape.record(out, bwd)
    return out


def mean_rows(x):
    """Mean over rows -> a single row; nothing retained."""
    out_data = x.data.mean(axis=0, keepdims=True)
    tape = _tracking(x)
    if tape is None:
        return Tensor(out_data)
    out = Tensor(out_data, requires_grad=True)
    rows = x.shape[0]

    def bwd(g, accum):
        accum(x, np.repeat(g / rows, rows, axis=0))

    tape.record(out, bwd)
    return out


def sum_all(x):
    """Sum of all elements -> 1x1; nothing retained."""
    out_data = np.array([[x.data.sum()]])
    tape = _tracking(x)
    if tape is None:
        return Tensor(out_data)
    out = Tensor(out_data, requires_grad=True)
    shape = x.shape

    def bwd(g, accum):
        accum(x, np.full(shape, g[0, 0]))

    tape.record(out, bwd)
    return out


def concat_rows(tensors):
    """Stack rows; backward slices the gradient back apart."""
    datas = [t.data for t in tensors]
    cols = datas[0].shape[1]
    for d in datas:
        if d.ndim != 2 or d.shape[1] != cols:
            raise ShapeError(f"concat_rows width mismatch: {[t.shape for t in tensors]}")
    out_data = np.concatenate(datas, axis=0)
    tape = _tracking(*tensors)
    if tape is None:
        return Tensor(out_data)
    out = Tensor(out_data, requires_grad=True)
    sizes = [d.shape[0] for d in datas]

    def bwd(g, accum):
        at = 0
        for t, n in zip(tensors, sizes):
            if t.requires_grad:
                accum(t, g[at:at + n, :])
            at += n

    tape.record(out, bwd)
    return out


def concat_cols(tensors):
    datas = [t.data for t in tensors]
    rows = datas[0].shape[0]
    for d in datas:
        if d.ndim != 2 or d.shape[0] != rows:
            raise ShapeError(f"concat_cols height mismatch: {[t.shape for t in tensors]}")
    out_data = np.concatenate(datas, axis=1)
    tape = _tracking(*tensors)
    if tape is None:
        return Tensor(out_data)
    out = Tensor(out_data, requires_grad=True)
    sizes = [d.shape[1] for d in datas]

    def bwd(g, accum):
        at = 0
        for t, n in zip(tensors, sizes):
            if t.requires_grad:
                accum(t, g[:, at:at + n])
            at += n

    tape.record(out, bwd)
    return out


def concat(tensors, axis):
    if axis == 0:
        return concat_rows(tensors)
    if axis == 1:
        return concat_cols(tensors)
    raise ShapeError(f"concat axis must be 0 or 1, got {axis}")


def slice_rows(x, start, stop):
    out_data = x.data[start:stop, :].copy()
    tape = _tracking(x)
    if tape is None:
        return Tensor(out_data)
    out = Tensor(out_data, requires_grad=True)
    shape = x.shape

    def bwd(g, accum):
        full = np.zeros(shape)
        full[start:stop, :] = g
        accum(x, full)

    tape.record(out, bwd)
    return out


def slice_cols(x, start, stop):
    out_data = x.data[:, start:stop].copy()
    tape = _tracking(x)
    if tape is None:
        return Tensor(out_data)
    out = Tensor(out_data, requires_grad=True)
    shape = x.shape

    def bwd(g, accum):
        full = np.zeros(shape)
        full[:, start:stop] = g
        accum(x, full)

    tape.record(out, bwd)
    return out


def cross_entropy(logits, label):
    """Negative log softmax probability of ``label``.  Retains the probability
    row for backward."""
    if logits.data.ndim != 2 or logits.shape[0] != 1:
        raise ShapeError(f"cross_entropy expects a 1xC logit row, got {logits.shape}")
    n = logits.shape[1]
    label = int(label)
    if label < 0 or label >= n:
        raise IndexError(f"label {label} out of range for {n} classes")
    row = logits.data[0]
    hi = row.max()
    lse = hi + math.log(np.exp(row - hi).sum())
    out_data = np.array([[lse - row[label]]])
    tape = _tracking(logits)
    if tape is None:
        return Tensor(out_data)
    out = Tensor(out_data, requires_grad=True)
    probs = tape.retain_private(np.exp(row - lse).reshape(1, n))

    def bwd(g, accum):
        d = probs.copy()
        d[0, label] -= 1.0
        accum(logits, g[0, 0] * d)

    tape.record(out, bwd)
    return out


# ---------------------------------------------------------------------------
# finite-difference checking
# ---------------------------------------------------------------------------

def grad_check(f, params, eps=1e-5):
    """Max relative error between tape gradients of ``f()`` and central
    differences over every element of ``params``.

    ``f`` must rebuild its graph from the parameter tensors on each call; the
    difference quotients rerun it outside any tape.  The error for element i
    is ``|a_i - c_i| / (|a_i| + |c_i| + 1e-12)``.
    """
    if isinstance(params, Tensor):
        params = [params]
    with Tape() as tape:
        loss = f()
        gm = backward(loss, tape)
    worst = 0.0
    for p in params:
        analytic = gm[p].data.reshape(-1) if p in gm else np.zeros(p.numel)
        flat = p.data.reshape(-1)
        numeric = np.empty(flat.size)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = f().item()
            flat[i] = orig - eps
            f_minus = f().item()
            flat[i] = orig
            numeric[i] = (f_plus - f_minus) / (2.0 * eps)
        rel = np.abs(analytic - numeric) / (np.abs(analytic) + np.abs(numeric) + 1e-12)
        worst = max(worst, float(rel.max()))
    return worst
