"""Numeric kernels for the hot elementwise/rowwise paths.

Matrix products stay on NumPy (BLAS).  The loops that dominate the rest of
the runtime -- GELU, row softmax, layer norm, sigmoid and the AdamW update --
have numba-compiled kernels with pure-NumPy twins.  Set ``SYNQT_PURE_NUMPY=1``
to force the NumPy path; ``BACKEND`` records which one is active.
``benchmarks/bench_kernels.py`` times the two side by side.
"""

import math
import os

import numpy as np

# tanh-form GELU constants
GELU_C = math.sqrt(2.0 / math.pi)
GELU_A = 0.044715


# ---------------------------------------------------------------------------
# pure-NumPy implementations
# ---------------------------------------------------------------------------

def _gelu_fwd_np(x):
    return 0.5 * x * (1.0 + np.tanh(GELU_C * (x + GELU_A * x ** 3)))


def _gelu_bwd_np(x, g):
    t = np.tanh(GELU_C * (x + GELU_A * x ** 3))
    inner = GELU_C * (1.0 + 3.0 * GELU_A * x * x)
    return g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * inner)


def _softmax_rows_fwd_np(x):
    shifted = x - x.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def _softmax_rows_bwd_np(y, g):
    dot = (g * y).sum(axis=1, keepdims=True)
    return y * (g - dot)


def _layernorm_fwd_np(x, gamma, beta, eps):
    mean = x.mean(axis=1, keepdims=True)
    var = ((x - mean) ** 2).mean(axis=1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean) * rstd
    return xhat * gamma + beta, xhat, np.ascontiguousarray(rstd[:, 0])


def _layernorm_bwd_np(xhat, rstd, gamma, g):
    gg = g * gamma
    m1 = gg.mean(axis=1, keepdims=True)
    m2 = (gg * xhat).mean(axis=1, keepdims=True)
    dx = (gg - m1 - xhat * m2) * rstd[:, None]
    dgamma = (g * xhat).sum(axis=0, keepdims=True)
    dbeta = g.sum(axis=0, keepdims=True)
    return dx, dgamma, dbeta


def _sigmoid_fwd_np(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _sigmoid_bwd_np(y, g):
    return g * y * (1.0 - y)


def _adamw_np(p, g, m, v, t, lr, beta1, beta2, eps, wd):
    m *= beta1
    m += (1.0 - beta1) * g
    v *= beta2
    v += (1.0 - beta2) * g * g
    mhat = m / (1.0 - beta1 ** t)
    vhat = v / (1.0 - beta2 ** t)
    p -= lr * (mhat / (np.sqrt(vhat) + eps) + wd * p)


_NUMPY_IMPLS = (
    _gelu_fwd_np, _gelu_bwd_np,
    _softmax_rows_fwd_np, _softmax_rows_bwd_np,
    _layernorm_fwd_np, _layernorm_bwd_np,
    _sigmoid_fwd_np, _sigmoid_bwd_np,
    _adamw_np,
)


# ---------------------------------------------------------------------------
# numba implementations
# ---------------------------------------------------------------------------

def _build_numba_impls():
    from numba import njit

    @njit(cache=True)
    def gelu_fwd(x):
        out = np.empty_like(x)
        flat_x = x.ravel()
        flat_o = out.ravel()
        for i in range(flat_x.size):
            xv = flat_x[i]
            flat_o[i] = 0.5 * xv * (1.0 + math.tanh(GELU_C * (xv + GELU_A * xv ** 3)))
        return out

    @njit(cache=True)
    def gelu_bwd(x, g):
        out = np.empty_like(x)
        fx, fg, fo = x.ravel(), g.ravel(), out.ravel()
        for i in range(fx.size):
            xv = fx[i]
            t = math.tanh(GELU_C * (xv + GELU_A * xv ** 3))
            inner = GELU_C * (1.0 + 3.0 * GELU_A * xv * xv)
            fo[i] = fg[i] * (0.5 * (1.0 + t) + 0.5 * xv * (1.0 - t * t) * inner)
        return out

    @njit(cache=True)
    def softmax_rows_fwd(x):
        rows, cols = x.shape
        out = np.empty_like(x)
        for r in range(rows):
            hi = x[r, 0]
            for c in range(1, cols):
                if x[r, c] > hi:
                    hi = x[r, c]
            tot = 0.0
            for c in range(cols):
                e = math.exp(x[r, c] - hi)
                out[r, c] = e
                tot += e
            inv = 1.0 / tot
            for c in range(cols):
                out[r, c] *= inv
        return out

    @njit(cache=True)
    def softmax_rows_bwd(y, g):
        rows, cols = y.shape
        out = np.empty_like(y)
        for r in range(rows):
            dot = 0.0
            for c in range(cols):
                dot += g[r, c] * y[r, c]
            for c in range(cols):
                out[r, c] = y[r, c] * (g[r, c] - dot)
        return out

    @njit(cache=True)
    def layernorm_fwd(x, gamma, beta, eps):
        rows, cols = x.shape
        out = np.empty_like(x)
        xhat = np.empty_like(x)
        rstd = np.empty(rows)
        for r in range(rows):
            mean = 0.0
            for c in range(cols):
                mean += x[r, c]
            mean /= cols
            var = 0.0
            for c in range(cols):
                dv = x[r, c] - mean
                var += dv * dv
            var /= cols
            rs = 1.0 / math.sqrt(var + eps)
            rstd[r] = rs
            for c in range(cols):
                xh = (x[r, c] - mean) * rs
                xhat[r, c] = xh
                out[r, c] = xh * gamma[0, c] + beta[0, c]
        return out, xhat, rstd

    @njit(cache=True)
    def layernorm_bwd(xhat, rstd, gamma, g):
        rows, cols = xhat.shape
        dx = np.empty_like(xhat)
        dgamma = np.zeros((1, cols))
        dbeta = np.zeros((1, cols))
        for r in range(rows):
            m1 = 0.0
            m2 = 0.0
            for c in range(cols):
                gg = g[r, c] * gamma[0, c]
                m1 += gg
                m2 += gg * xhat[r, c]
            m1 /= cols
            m2 /= cols
            for c in range(cols):
                gg = g[r, c] * gamma[0, c]
                dx[r, c] = (gg - m1 - xhat[r, c] * m2) * rstd[r]
                dgamma[0, c] += g[r, c] * xhat[r, c]
                dbeta[0, c] += g[r, c]
        return dx, dgamma, dbeta

    @njit(cache=True)
    def sigmoid_fwd(x):
        out = np.empty_like(x)
        fx, fo = x.ravel(), out.ravel()
        for i in range(fx.size):
            xv = fx[i]
            if xv >= 0.0:
                fo[i] = 1.0 / (1.0 + math.exp(-xv))
            else:
                e = math.exp(xv)
                fo[i] = e / (1.0 + e)
        return out

    @njit(cache=True)
    def sigmoid_bwd(y, g):
        out = np.empty_like(y)
        fy, fg, fo = y.ravel(), g.ravel(), out.ravel()
        for i in range(fy.size):
            fo[i] = fg[i] * fy[i] * (1.0 - fy[i])
        return out

    @njit(cache=True)
    def adamw(p, g, m, v, t, lr, beta1, beta2, eps, wd):
        bc1 = 1.0 - beta1 ** t
        bc2 = 1.0 - beta2 ** t
        fp, fg, fm, fv = p.ravel(), g.ravel(), m.ravel(), v.ravel()
        for i in range(fp.size):
            fm[i] = beta1 * fm[i] + (1.0 - beta1) * fg[i]
            fv[i] = beta2 * fv[i] + (1.0 - beta2) * fg[i] * fg[i]
            mhat = fm[i] / bc1
            vhat = fv[i] / bc2
            fp[i] -= lr * (mhat / (math.sqrt(vhat) + eps) + wd * fp[i])

    return (gelu_fwd, gelu_bwd, softmax_rows_fwd, softmax_rows_bwd,
            layernorm_fwd, layernorm_bwd, sigmoid_fwd, sigmoid_bwd, adamw)


BACKEND = "numpy"
_impls = _NUMPY_IMPLS
if os.environ.get("SYNQT_PURE_NUMPY", "") in ("", "0"):
    try:
        _impls = _build_numba_impls()
        BACKEND = "numba"
    except Exception:  # numba missing or failed to compile: stay on NumPy
        _impls = _NUMPY_IMPLS

(gelu_fwd, gelu_bwd,
 softmax_rows_fwd, softmax_rows_bwd,
 layernorm_fwd, layernorm_bwd,
 sigmoid_fwd, sigmoid_bwd,
 adamw_update) = _impls

numpy_impls = {
    "gelu_fwd": _gelu_fwd_np,
    "gelu_bwd": _gelu_bwd_np,
    "softmax_rows_fwd": _softmax_rows_fwd_np,
    "softmax_rows_bwd": _softmax_rows_bwd_np,
    "layernorm_fwd": _layernorm_fwd_np,
    "layernorm_bwd": _layernorm_bwd_np,
    "sigmoid_fwd": _sigmoid_fwd_np,
    "sigmoid_bwd": _sigmoid_bwd_np,
    "adamw_update": _adamw_np,
}

active_impls = {
    "gelu_fwd": gelu_fwd,
    "gelu_bwd": gelu_bwd,
    "softmax_rows_fwd": softmax_rows_fwd,
    "softmax_rows_bwd": softmax_rows_bwd,
    "layernorm_fwd": layernorm_fwd,
    "layernorm_bwd": layernorm_bwd,
    "sigmoid_fwd": sigmoid_fwd,
    "sigmoid_bwd": sigmoid_bwd,
    "adamw_update": adamw_update,
}
