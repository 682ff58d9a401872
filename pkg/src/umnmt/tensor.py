"""Reverse-mode automatic differentiation over dense numpy arrays.

Tensors are thin wrappers around 2-D (or scalar / 1-D bias) float arrays.
Each op records a backward closure; ``backward`` walks the graph once in
reverse topological order.  Parameters are leaves created with ``param`` and
accumulate into their persistent ``grad`` buffer.  Everything is
single-threaded within one graph; tensors without a graph are immutable by
convention and freely shareable.

Row-wise hot loops (softmax, layer norm, fused cross-entropy) are delegated
to :mod:`umnmt.kernels`.  Matrix products go through BLAS.
"""

from contextlib import contextmanager

import numpy as np

from . import kernels
from .errors import NumericsError, ShapeError, UmnmtError


class Node:
    __slots__ = ("parents", "backward_fn")

    def __init__(self, parents, backward_fn):
        self.parents = parents
        self.backward_fn = backward_fn


class Tensor:
    __slots__ = ("data", "grad", "node", "is_param", "backward_done")

    def __init__(self, data, node=None, is_param=False):
        self.data = data
        self.node = node
        self.is_param = is_param
        self.grad = np.zeros_like(data) if is_param else None
        self.backward_done = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        kind = "param" if self.is_param else ("node" if self.node else "const")
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, {kind})"


_GRAD_ENABLED = True


@contextmanager
def no_grad():
    """Inference mode: ops inside build no backward records."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def constant(data, dtype=np.float64):
    return Tensor(np.ascontiguousarray(data, dtype=dtype))


def param(data, dtype=np.float64):
    return Tensor(np.ascontiguousarray(data, dtype=dtype), is_param=True)


def _check_finite(arr, what):
    if not np.all(np.isfinite(arr)):
        raise NumericsError(f"non-finite values produced by {what}")
    return arr


def _make(data, parents, backward_fn, what):
    _check_finite(data, what)
    if _GRAD_ENABLED and any(p.node is not None or p.is_param for p in parents):
        return Tensor(data, node=Node(tuple(parents), backward_fn))
    return Tensor(data)


# ---------------------------------------------------------------------------
# core ops
# ---------------------------------------------------------------------------

_mm = kernels.mm


def matmul(a, b):
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul operands incompatible", a.shape, b.shape)
    out = _mm(a.data, b.data)

    def backward_fn(dout):
        return _mm(dout, b.data.T), _mm(a.data.T, dout)

    return _make(out, (a, b), backward_fn, "matmul")


def add(a, b):
    if a.shape == b.shape:
        def backward_fn(dout):
            return dout, dout
    elif a.data.ndim == 2 and b.data.ndim == 1 and a.shape[1] == b.shape[0]:
        def backward_fn(dout):
            return dout, dout.sum(axis=0)
    else:
        raise ShapeError("add needs equal shapes or matrix + row bias", a.shape, b.shape)
    return _make(a.data + b.data, (a, b), backward_fn, "add")


def mul(a, b):
    if a.shape != b.shape:
        raise ShapeError("mul needs equal shapes", a.shape, b.shape)
    out = a.data * b.data

    def backward_fn(dout):
        return dout * b.data, dout * a.data

    return _make(out, (a, b), backward_fn, "mul")


def affine(x, w, b):
    """Fused x @ w + row-bias b."""
    if x.data.ndim != 2 or x.shape[1] != w.shape[0] or b.shape != (w.shape[1],):
        raise ShapeError("affine operands incompatible", x.shape, w.shape, b.shape)
    out = _mm(x.data, w.data)
    out += b.data

    def backward_fn(dout):
        return _mm(dout, w.data.T), _mm(x.data.T, dout), dout.sum(axis=0)

    return _make(out, (x, w, b), backward_fn, "affine")


def scale(a, s):
    s = float(s)

    def backward_fn(dout):
        return (dout * s,)

    return _make(a.data * s, (a,), backward_fn, "scale")


def transpose(a):
    out = np.ascontiguousarray(a.data.T)

    def backward_fn(dout):
        return (np.ascontiguousarray(dout.T),)

    return _make(out, (a,), backward_fn, "transpose")


def relu(a):
    keep = a.data > 0
    out = np.where(keep, a.data, 0.0)

    def backward_fn(dout):
        return (dout * keep,)

    return _make(out, (a,), backward_fn, "relu")


def concat_rows(parts):
    parts = list(parts)
    width = parts[0].shape[1]
    for p in parts:
        if p.data.ndim != 2 or p.shape[1] != width:
            raise ShapeError("concat_rows needs matching widths", parts[0].shape, p.shape)
    counts = [p.shape[0] for p in parts]
    out = np.concatenate([p.data for p in parts], axis=0)

    def backward_fn(dout):
        grads = []
        at = 0
        for n in counts:
            grads.append(dout[at:at + n])
            at += n
        return tuple(grads)

    return _make(out, tuple(parts), backward_fn, "concat_rows")


def slice_rows(a, start, stop):
    if not (0 <= start <= stop <= a.shape[0]):
        raise ShapeError(f"slice_rows [{start}:{stop}] out of range", a.shape)
    out = np.ascontiguousarray(a.data[start:stop])

    def backward_fn(dout):
        da = np.zeros_like(a.data)
        da[start:stop] = dout
        return (da,)

    return _make(out, (a,), backward_fn, "slice_rows")


def slice_cols(a, start, stop):
    if not (0 <= start <= stop <= a.shape[1]):
        raise ShapeError(f"slice_cols [{start}:{stop}] out of range", a.shape)
    out = np.ascontiguousarray(a.data[:, start:stop])

    def backward_fn(dout):
        da = np.zeros_like(a.data)
        da[:, start:stop] = dout
        return (da,)

    return _make(out, (a,), backward_fn, "slice_cols")


def embedding_lookup(table, ids):
    ids = np.asarray(ids, dtype=np.int64)
    if ids.ndim != 1:
        raise ShapeError("embedding ids must be 1-D", ids.shape)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(f"embedding id out of range for table of {table.shape[0]} rows")
    out = table.data[ids]

    def backward_fn(dout):
        dt = np.zeros_like(table.data)
        np.add.at(dt, ids, dout)
        return (dt,)

    return _make(out, (table,), backward_fn, "embedding_lookup")


def sum_all(a):
    out = np.asarray(a.data.sum(), dtype=a.dtype)

    def backward_fn(dout):
        return (np.broadcast_to(dout, a.shape).astype(a.dtype),)

    return _make(out, (a,), backward_fn, "sum_all")


def softmax_rows(x):
    if x.data.ndim != 2:
        raise ShapeError("softmax_rows needs a matrix", x.shape)
    y = kernels.softmax_fwd(x.data)

    def backward_fn(dout):
        return (kernels.softmax_bwd(y, dout),)

    return _make(y, (x,), backward_fn, "softmax_rows")


def layer_norm_rows(x, gain, bias, eps=1e-5):
    if eps <= 0:
        raise UmnmtError("layer_norm eps must be positive")
    if x.data.ndim != 2 or gain.shape != (x.shape[1],) or bias.shape != (x.shape[1],):
        raise ShapeError("layer_norm operands incompatible", x.shape, gain.shape)
    y, xhat, rstd = kernels.layer_norm_fwd(x.data, gain.data, bias.data, eps)

    def backward_fn(dout):
        return kernels.layer_norm_bwd(xhat, gain.data, rstd, dout)

    return _make(y, (x, gain, bias), backward_fn, "layer_norm_rows")


def dropout(x, p, rng):
    if not 0.0 <= p < 1.0:
        raise UmnmtError(f"dropout p must be in [0, 1), got {p}")
    if p == 0.0:
        return x
    inv = 1.0 / (1.0 - p)
    mask = (rng.random(x.shape) >= p).astype(x.dtype) * inv
    out = x.data * mask

    def backward_fn(dout):
        return (dout * mask,)

    return _make(out, (x,), backward_fn, "dropout")


def cross_entropy_rows(logits, targets, ignore_id=-1):
    """Mean cross-entropy of row-wise softmax against integer targets,
    averaged over rows whose target differs from ``ignore_id``."""
    targets = np.asarray(targets, dtype=np.int64)
    if logits.data.ndim != 2 or targets.shape != (logits.shape[0],):
        raise ShapeError("cross_entropy_rows operands incompatible", logits.shape, targets.shape)
    if targets.size and targets.max() >= logits.shape[1]:
        raise ShapeError(f"target id exceeds vocab of {logits.shape[1]}")
    loss_sum, count, probs = kernels.xent_fwd(logits.data, targets, ignore_id)
    denom = max(count, 1)
    out = np.asarray(loss_sum / denom, dtype=logits.dtype)

    def backward_fn(dout):
        if count == 0:
            return (np.zeros_like(logits.data),)
        return (kernels.xent_bwd(probs, targets, ignore_id, float(dout) / denom),)

    return _make(out, (logits,), backward_fn, "cross_entropy_rows")


def attention(q, k, v, n_heads, batch=1, mask=None, scores_out=None):
    """Fused multi-head scaled-dot attention over a padded batch.

    ``q`` is (batch*Tq, d); ``k`` and ``v`` are (batch*Tk, d).  ``mask`` is an
    additive float array broadcastable to (batch, n_heads, Tq, Tk); masked
    slots carry a large negative value.  When ``scores_out`` is a list the
    row-stochastic weights (batch, n_heads, Tq, Tk) are appended to it.
    """
    d = q.shape[1]
    if d % n_heads != 0:
        raise ShapeError(f"width {d} not divisible by {n_heads} heads")
    if k.shape != v.shape or k.shape[1] != d:
        raise ShapeError("attention operands incompatible", q.shape, k.shape, v.shape)
    if q.shape[0] % batch or k.shape[0] % batch:
        raise ShapeError("rows not divisible by batch", q.shape, k.shape)
    tq = q.shape[0] // batch
    tk = k.shape[0] // batch
    dh = d // n_heads
    inv = 1.0 / np.sqrt(dh)

    scores = kernels.attn_scores(q.data, k.data, batch, n_heads, inv)
    if mask is not None:
        scores = scores + mask
    weights = kernels.softmax_fwd(
        np.ascontiguousarray(scores.reshape(-1, tk))
    ).reshape(batch, n_heads, tq, tk)
    if scores_out is not None:
        scores_out.append(weights.copy())
    out = kernels.attn_ctx(weights, v.data, batch, n_heads)

    def backward_fn(dout):
        def split(t2d, tlen):
            return t2d.reshape(batch, tlen, n_heads, dh).transpose(0, 2, 1, 3)

        q4, k4, v4 = split(q.data, tq), split(k.data, tk), split(v.data, tk)
        dctx = dout.reshape(batch, tq, n_heads, dh).transpose(0, 2, 1, 3)
        dweights = _mm(dctx, v4.transpose(0, 1, 3, 2))
        dv4 = _mm(weights.transpose(0, 1, 3, 2), dctx)
        dscores = kernels.softmax_bwd(
            np.ascontiguousarray(weights.reshape(-1, tk)),
            np.ascontiguousarray(dweights.reshape(-1, tk)),
        ).reshape(batch, n_heads, tq, tk) * inv
        dq4 = _mm(dscores, k4)
        dk4 = _mm(dscores.transpose(0, 1, 3, 2), q4)

        def join(t4, tlen):
            return np.ascontiguousarray(t4.transpose(0, 2, 1, 3).reshape(batch * tlen, d))

        return join(dq4, tq), join(dk4, tk), join(dv4, tk)

    return _make(out, (q, k, v), backward_fn, "attention")


def stop_gradient(x):
    """Forward identity whose backward contributes nothing upstream."""
    return Tensor(x.data)


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------

class Graph:
    """Reverse-topological schedule of the backward records reachable from a
    root tensor.  Each record is visited exactly once, after all consumers."""

    def __init__(self, root):
        order = []
        seen = set()
        stack = [(root, False)]
        while stack:
            t, expanded = stack.pop()
            if expanded:
                order.append(t)
                continue
            if id(t) in seen or t.node is None:
                continue
            seen.add(id(t))
            stack.append((t, True))
            for p in t.node.parents:
                stack.append((p, False))
        self.order = order  # topological: parents before consumers

    def run(self, root, seed):
        grads = {id(root): seed}
        for t in reversed(self.order):
            dout = grads.pop(id(t), None)
            if dout is None:
                continue
            for parent, g in zip(t.node.parents, t.node.backward_fn(dout)):
                if g is None:
                    continue
                if parent.node is not None:
                    key = id(parent)
                    if key in grads:
                        grads[key] = grads[key] + g
                    else:
                        grads[key] = g
                elif parent.is_param:
                    parent.grad += g


def backward(loss):
    """Accumulate d(loss)/d(param) into every reachable parameter's grad.

    Calling backward twice on the same loss tensor raises: double backward is
    unsupported and silently doubled grads are worse than an error.
    """
    if loss.data.size != 1:
        raise UmnmtError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    if loss.backward_done:
        raise UmnmtError("backward already ran on this loss; zero grads and rebuild the graph")
    loss.backward_done = True
    if loss.node is None:
        return
    seed = np.ones_like(loss.data)
    Graph(loss).run(loss, seed)


def zero_grads(params):
    for p in params:
        p.grad[...] = 0.0


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

def grad_check(f, inputs, eps=1e-6):
    """Max relative error between analytic and central-difference gradients.

    ``f`` takes no arguments, reads the (float64) param tensors in ``inputs``,
    and returns a scalar Tensor; it must be deterministic across calls.
    Error metric per entry: |a - n| / max(1, |a|, |n|).
    """
    if not 1e-7 <= eps <= 1e-4:
        raise UmnmtError(f"grad_check eps {eps} outside [1e-7, 1e-4]")
    zero_grads(inputs)
    backward(f())
    analytic = [p.grad.copy() for p in inputs]
    worst = 0.0
    for p, a in zip(inputs, analytic):
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + eps
            up = float(f().data)
            flat[i] = keep - eps
            down = float(f().data)
            flat[i] = keep
            numeric = (up - down) / (2.0 * eps)
            ai = float(a.reshape(-1)[i])
            err = abs(ai - numeric) / max(1.0, abs(ai), abs(numeric))
            worst = max(worst, err)
    zero_grads(inputs)
    return worst
