"""Hot numeric kernels: row softmax, layer norm, fused softmax cross-entropy,
and the Adam update.

Every kernel has two interchangeable implementations: a numba ``@njit`` one
and a pure-numpy one.  Selection happens once at import time via the
``UMNMT_NUMBA`` environment variable:

    UMNMT_NUMBA=0      force the numpy path
    UMNMT_NUMBA=1      force numba (ImportError if numba is missing)
    unset / auto       numba when importable, numpy otherwise

``BACKEND`` records the active choice.  Both paths implement identical
arithmetic (no fastmath: results must be deterministic and pass 64-bit
gradient checks).  Matrix products are deliberately absent here; those go
through BLAS.  ``benchmarks/bench_kernels.py`` compares the two paths.
"""

import os

import numpy as np

__all__ = [
    "BACKEND",
    "softmax_fwd",
    "softmax_bwd",
    "layer_norm_fwd",
    "layer_norm_bwd",
    "xent_fwd",
    "xent_bwd",
    "adam_step",
    "attn_scores",
    "attn_ctx",
    "get_kernels",
]


# ---------------------------------------------------------------------------
# numpy reference implementations
# ---------------------------------------------------------------------------

def mm(a, b):
    """Matrix product (batched over leading dims) that never hands BLAS a
    single-row or single-column problem: m=1 / n=1 dispatch to GEMV, whose
    accumulation order differs from GEMM and would break the exact
    incremental-vs-full decoding equivalence.  Singleton dims are padded by
    duplication and sliced off."""
    m, n = a.shape[-2], b.shape[-1]
    if m == 1:
        a = np.concatenate([a, a], axis=-2)
    if n == 1:
        b = np.concatenate([b, b], axis=-1)
    out = a @ b
    if m == 1 or n == 1:
        out = np.ascontiguousarray(out[..., :m, :n])
    return out


def _softmax_fwd_np(x):
    m = np.max(x, axis=1, keepdims=True)
    y = np.exp(x - m)
    y /= np.sum(y, axis=1, keepdims=True)
    return y


def _softmax_bwd_np(y, dy):
    inner = np.sum(y * dy, axis=1, keepdims=True)
    return y * (dy - inner)


def _layer_norm_fwd_np(x, gain, bias, eps):
    mean = np.mean(x, axis=1, keepdims=True)
    var = np.mean((x - mean) ** 2, axis=1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean) * rstd
    return xhat * gain + bias, xhat, rstd[:, 0]


def _layer_norm_bwd_np(xhat, gain, rstd, dy):
    dxhat = dy * gain
    m1 = np.mean(dxhat, axis=1, keepdims=True)
    m2 = np.mean(dxhat * xhat, axis=1, keepdims=True)
    dx = (dxhat - m1 - xhat * m2) * rstd[:, None]
    dgain = np.sum(dy * xhat, axis=0)
    dbias = np.sum(dy, axis=0)
    return dx, dgain, dbias


def _xent_fwd_np(logits, targets, ignore_id):
    m = np.max(logits, axis=1)
    lse = m + np.log(np.sum(np.exp(logits - m[:, None]), axis=1))
    probs = np.exp(logits - lse[:, None])
    counted = targets != ignore_id
    n = int(np.sum(counted))
    safe = np.where(counted, targets, 0)
    losses = lse - logits[np.arange(logits.shape[0]), safe]
    loss_sum = float(np.sum(losses[counted]))
    return loss_sum, n, probs


def _xent_bwd_np(probs, targets, ignore_id, scale):
    dl = probs * scale
    counted = targets != ignore_id
    rows = np.arange(probs.shape[0])
    safe = np.where(counted, targets, 0)
    dl[rows, safe] -= scale
    dl[~counted] = 0.0
    return dl


def _adam_step_np(p, g, m, v, lr, beta1, beta2, eps, bc1, bc2):
    m *= beta1
    m += (1.0 - beta1) * g
    v *= beta2
    v += (1.0 - beta2) * g * g
    p -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)


def _attn_scores_np(q2d, k2d, batch, n_heads, inv):
    tq = q2d.shape[0] // batch
    tk = k2d.shape[0] // batch
    dh = q2d.shape[1] // n_heads
    q4 = q2d.reshape(batch, tq, n_heads, dh).transpose(0, 2, 1, 3)
    k4 = k2d.reshape(batch, tk, n_heads, dh).transpose(0, 2, 1, 3)
    # multiply-and-reduce, not GEMM: each (query, key) dot is bit-identical
    # whatever tq/tk are, keeping incremental decoding exactly equal to a
    # masked full-width pass
    return (q4[:, :, :, None, :] * k4[:, :, None, :, :]).sum(axis=-1) * inv


def _attn_ctx_np(weights, v2d, batch, n_heads):
    tk = v2d.shape[0] // batch
    d = v2d.shape[1]
    dh = d // n_heads
    tq = weights.shape[2]
    v4 = v2d.reshape(batch, tk, n_heads, dh).transpose(0, 2, 1, 3)
    ctx = mm(weights, v4)
    return np.ascontiguousarray(ctx.transpose(0, 2, 1, 3).reshape(batch * tq, d))


_NUMPY = {
    "softmax_fwd": _softmax_fwd_np,
    "softmax_bwd": _softmax_bwd_np,
    "layer_norm_fwd": _layer_norm_fwd_np,
    "layer_norm_bwd": _layer_norm_bwd_np,
    "xent_fwd": _xent_fwd_np,
    "xent_bwd": _xent_bwd_np,
    "adam_step": _adam_step_np,
    "attn_scores": _attn_scores_np,
    "attn_ctx": _attn_ctx_np,
}


# ---------------------------------------------------------------------------
# numba implementations
# ---------------------------------------------------------------------------

def _build_numba_kernels():
    from numba import njit

    @njit(cache=True)
    def softmax_fwd(x):
        n, d = x.shape
        y = np.empty_like(x)
        for i in range(n):
            m = x[i, 0]
            for j in range(1, d):
                if x[i, j] > m:
                    m = x[i, j]
            s = 0.0
            for j in range(d):
                e = np.exp(x[i, j] - m)
                y[i, j] = e
                s += e
            for j in range(d):
                y[i, j] /= s
        return y

    @njit(cache=True)
    def softmax_bwd(y, dy):
        n, d = y.shape
        dx = np.empty_like(y)
        for i in range(n):
            inner = 0.0
            for j in range(d):
                inner += y[i, j] * dy[i, j]
            for j in range(d):
                dx[i, j] = y[i, j] * (dy[i, j] - inner)
        return dx

    @njit(cache=True)
    def layer_norm_fwd(x, gain, bias, eps):
        n, d = x.shape
        y = np.empty_like(x)
        xhat = np.empty_like(x)
        rstd = np.empty(n, dtype=x.dtype)
        for i in range(n):
            mean = 0.0
            for j in range(d):
                mean += x[i, j]
            mean /= d
            var = 0.0
            for j in range(d):
                t = x[i, j] - mean
                var += t * t
            var /= d
            r = 1.0 / np.sqrt(var + eps)
            rstd[i] = r
            for j in range(d):
                h = (x[i, j] - mean) * r
                xhat[i, j] = h
                y[i, j] = h * gain[j] + bias[j]
        return y, xhat, rstd

    @njit(cache=True)
    def layer_norm_bwd(xhat, gain, rstd, dy):
        n, d = xhat.shape
        dx = np.empty_like(xhat)
        dgain = np.zeros(d, dtype=xhat.dtype)
        dbias = np.zeros(d, dtype=xhat.dtype)
        for i in range(n):
            m1 = 0.0
            m2 = 0.0
            for j in range(d):
                dh = dy[i, j] * gain[j]
                m1 += dh
                m2 += dh * xhat[i, j]
            m1 /= d
            m2 /= d
            for j in range(d):
                dh = dy[i, j] * gain[j]
                dx[i, j] = (dh - m1 - xhat[i, j] * m2) * rstd[i]
                dgain[j] += dy[i, j] * xhat[i, j]
                dbias[j] += dy[i, j]
        return dx, dgain, dbias

    @njit(cache=True)
    def xent_fwd(logits, targets, ignore_id):
        n, d = logits.shape
        probs = np.empty_like(logits)
        loss_sum = 0.0
        count = 0
        for i in range(n):
            m = logits[i, 0]
            for j in range(1, d):
                if logits[i, j] > m:
                    m = logits[i, j]
            s = 0.0
            for j in range(d):
                s += np.exp(logits[i, j] - m)
            lse = m + np.log(s)
            for j in range(d):
                probs[i, j] = np.exp(logits[i, j] - lse)
            t = targets[i]
            if t != ignore_id:
                loss_sum += lse - logits[i, t]
                count += 1
        return loss_sum, count, probs

    @njit(cache=True)
    def xent_bwd(probs, targets, ignore_id, scale):
        n, d = probs.shape
        dl = np.empty_like(probs)
        for i in range(n):
            t = targets[i]
            if t == ignore_id:
                for j in range(d):
                    dl[i, j] = 0.0
            else:
                for j in range(d):
                    dl[i, j] = probs[i, j] * scale
                dl[i, t] -= scale
        return dl

    @njit(cache=True)
    def adam_step(p, g, m, v, lr, beta1, beta2, eps, bc1, bc2):
        for i in range(p.shape[0]):
            m[i] = beta1 * m[i] + (1.0 - beta1) * g[i]
            v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i]
            p[i] -= lr * (m[i] / bc1) / (np.sqrt(v[i] / bc2) + eps)

    @njit(cache=True)
    def attn_scores(q2d, k2d, batch, n_heads, inv):
        # sequential dot per (query, key): results do not depend on tq/tk,
        # which the incremental-vs-full decoding equivalence relies on
        tq = q2d.shape[0] // batch
        tk = k2d.shape[0] // batch
        dh = q2d.shape[1] // n_heads
        out = np.empty((batch, n_heads, tq, tk), dtype=q2d.dtype)
        for b in range(batch):
            for h in range(n_heads):
                c0 = h * dh
                for i in range(tq):
                    qrow = b * tq + i
                    for j in range(tk):
                        krow = b * tk + j
                        acc = 0.0
                        for c in range(dh):
                            acc += q2d[qrow, c0 + c] * k2d[krow, c0 + c]
                        out[b, h, i, j] = acc * inv
        return out

    @njit(cache=True)
    def attn_ctx(weights, v2d, batch, n_heads):
        tk = v2d.shape[0] // batch
        d = v2d.shape[1]
        dh = d // n_heads
        tq = weights.shape[2]
        out = np.empty((batch * tq, d), dtype=v2d.dtype)
        for b in range(batch):
            for h in range(n_heads):
                c0 = h * dh
                for i in range(tq):
                    orow = b * tq + i
                    for c in range(dh):
                        acc = 0.0
                        for j in range(tk):
                            acc += weights[b, h, i, j] * v2d[b * tk + j, c0 + c]
                        out[orow, c0 + c] = acc
        return out

    return {
        "softmax_fwd": softmax_fwd,
        "softmax_bwd": softmax_bwd,
        "layer_norm_fwd": layer_norm_fwd,
        "layer_norm_bwd": layer_norm_bwd,
        "xent_fwd": xent_fwd,
        "xent_bwd": xent_bwd,
        # benchmarks/bench_kernels.py: BLAS beats the jitted loops for the
        # context product (pure GEMM) and vectorized numpy beats the scalar
        # div/sqrt loop of adam, so the "numba" table keeps the numpy
        # implementations for those two
        "adam_step": _adam_step_np,
        "attn_scores": attn_scores,
        "attn_ctx": _attn_ctx_np,
        "adam_step_jit": adam_step,
        "attn_ctx_jit": attn_ctx,
    }


def _select_backend():
    flag = os.environ.get("UMNMT_NUMBA", "auto").strip().lower()
    if flag in ("0", "false", "off", "numpy"):
        return "numpy", _NUMPY
    try:
        kernels = _build_numba_kernels()
        return "numba", kernels
    except ImportError:
        if flag in ("1", "true", "on", "numba"):
            raise
        return "numpy", _NUMPY


def get_kernels(backend):
    """Kernel table for an explicit backend ("numpy" or "numba"); used by the
    fallback-equivalence tests and the benchmark."""
    if backend == "numpy":
        return _NUMPY
    if backend == "numba":
        return _build_numba_kernels()
    raise ValueError(f"unknown kernel backend {backend!r}")


BACKEND, _ACTIVE = _select_backend()

softmax_fwd = _ACTIVE["softmax_fwd"]
softmax_bwd = _ACTIVE["softmax_bwd"]
layer_norm_fwd = _ACTIVE["layer_norm_fwd"]
layer_norm_bwd = _ACTIVE["layer_norm_bwd"]
xent_fwd = _ACTIVE["xent_fwd"]
xent_bwd = _ACTIVE["xent_bwd"]
adam_step = _ACTIVE["adam_step"]
attn_scores = _ACTIVE["attn_scores"]
attn_ctx = _ACTIVE["attn_ctx"]
