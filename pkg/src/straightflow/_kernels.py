"""Row-wise kernels used by the velocity network: layer norm, softmax, GELU.

Each kernel has a numba implementation and a pure-numpy one.  The numba
path is used when numba imports and ``STRAIGHTFLOW_BACKEND`` is not set to
``numpy``.  All kernels take and return C-contiguous 2-D float64 arrays.
"""
import math
import os

import numpy as np

LN_EPS = 1e-6
_GELU_K = math.sqrt(2.0 / math.pi)
_GELU_C = 0.044715


# --- numpy reference path -------------------------------------------------

def np_layernorm_fwd(x):
    mu = x.mean(axis=1, keepdims=True)
    xc = x - mu
    rstd = 1.0 / np.sqrt((xc * xc).mean(axis=1, keepdims=True) + LN_EPS)
    return xc * rstd, rstd[:, 0]


def np_layernorm_bwd(dy, y, rstd):
    d = dy.shape[1]
    return rstd[:, None] * (dy - dy.sum(axis=1, keepdims=True) / d
                            - y * (dy * y).sum(axis=1, keepdims=True) / d)


def np_softmax_fwd(s):
    e = np.exp(s - s.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def np_softmax_bwd(dp, p):
    return p * (dp - (dp * p).sum(axis=1, keepdims=True))


def np_gelu_fwd(x):
    """Tanh-approximate GELU written as x * sigmoid(2z); also returns the sigmoid."""
    sg = 1.0 / (1.0 + np.exp(-2.0 * _GELU_K * (x + _GELU_C * x ** 3)))
    return x * sg, sg


def np_gelu_bwd(dy, x, sg):
    return dy * (sg + x * sg * (1.0 - sg) * 2.0 * _GELU_K * (1.0 + 3.0 * _GELU_C * x * x))


# --- numba path -----------------------------------------------------------

try:
    from numba import njit
    HAS_NUMBA = True
except ImportError:  # pragma: no cover
    HAS_NUMBA = False

if HAS_NUMBA:
    @njit(cache=True)
    def nb_layernorm_fwd(x):
        m, d = x.shape
        y = np.empty_like(x)
        rstd = np.empty(m)
        for i in range(m):
            mu = 0.0
            for j in range(d):
                mu += x[i, j]
            mu /= d
            var = 0.0
            for j in range(d):
                c = x[i, j] - mu
                var += c * c
            r = 1.0 / math.sqrt(var / d + LN_EPS)
            rstd[i] = r
            for j in range(d):
                y[i, j] = (x[i, j] - mu) * r
        return y, rstd

    @njit(cache=True)
    def nb_layernorm_bwd(dy, y, rstd):
        m, d = dy.shape
        dx = np.empty_like(dy)
        for i in range(m):
            s1 = 0.0
            s2 = 0.0
            for j in range(d):
                s1 += dy[i, j]
                s2 += dy[i, j] * y[i, j]
            s1 /= d
            s2 /= d
            for j in range(d):
                dx[i, j] = rstd[i] * (dy[i, j] - s1 - y[i, j] * s2)
        return dx

    @njit(cache=True)
    def nb_softmax_fwd(s):
        m, d = s.shape
        p = np.empty_like(s)
        for i in range(m):
            mx = s[i, 0]
            for j in range(1, d):
                if s[i, j] > mx:
                    mx = s[i, j]
            tot = 0.0
            for j in range(d):
                e = math.exp(s[i, j] - mx)
                p[i, j] = e
                tot += e
            for j in range(d):
                p[i, j] /= tot
        return p

    @njit(cache=True)
    def nb_softmax_bwd(dp, p):
        m, d = p.shape
        ds = np.empty_like(p)
        for i in range(m):
            acc = 0.0
            for j in range(d):
                acc += dp[i, j] * p[i, j]
            for j in range(d):
                ds[i, j] = p[i, j] * (dp[i, j] - acc)
        return ds

    @njit(cache=True)
    def nb_gelu_fwd(x):
        m, d = x.shape
        y = np.empty_like(x)
        sg = np.empty_like(x)
        for i in range(m):
            for j in range(d):
                v = x[i, j]
                s = 1.0 - 1.0 / (math.exp(2.0 * _GELU_K * (v + _GELU_C * v * v * v)) + 1.0)
                sg[i, j] = s
                y[i, j] = v * s
        return y, sg

    @njit(cache=True)
    def nb_gelu_bwd(dy, x, sg):
        m, d = x.shape
        dx = np.empty_like(x)
        for i in range(m):
            for j in range(d):
                v = x[i, j]
                s = sg[i, j]
                dx[i, j] = dy[i, j] * (s + v * s * (1.0 - s) * 2.0 * _GELU_K * (1.0 + 3.0 * _GELU_C * v * v))
        return dx


def _select(name):
    want = name or os.environ.get("STRAIGHTFLOW_BACKEND", "numba")
    if want not in ("numba", "numpy"):
        raise ValueError(f"unknown backend {want!r}")
    return "numba" if (want == "numba" and HAS_NUMBA) else "numpy"


BACKEND = _select(None)


def kernels(backend=None):
    """Mapping of kernel name to implementation for ``backend``."""
    prefix = "nb_" if _select(backend) == "numba" else "np_"
    g = globals()
    return {k: g[prefix + k] for k in ("layernorm_fwd", "layernorm_bwd", "softmax_fwd",
                                       "softmax_bwd", "gelu_fwd", "gelu_bwd")}


_active = kernels(BACKEND)
layernorm_fwd = _active["layernorm_fwd"]
layernorm_bwd = _active["layernorm_bwd"]
softmax_fwd = _active["softmax_fwd"]
softmax_bwd = _active["softmax_bwd"]
gelu_fwd = _active["gelu_fwd"]
gelu_bwd = _active["gelu_bwd"]
