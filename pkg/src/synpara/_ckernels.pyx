# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled twin of synpara._pykernels.

Same signatures and semantics as the numpy backend; see that module for the
argument contracts. All 2-D inputs must be C-contiguous float64.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport exp, log, pow, sqrt, tanh

BACKEND_NAME = "c"

cdef double GELU_C = 0.7978845608028654  # sqrt(2/pi)
cdef double GELU_A = 0.044715


def gelu_fwd(double[:, ::1] x):
    cdef Py_ssize_t n = x.shape[0], d = x.shape[1], i, j
    out = np.empty((n, d), dtype=np.float64)
    cdef double[:, ::1] y = out
    cdef double v, t
    for i in range(n):
        for j in range(d):
            v = x[i, j]
            t = tanh(GELU_C * (v + GELU_A * v * v * v))
            y[i, j] = 0.5 * v * (1.0 + t)
    return out


def gelu_bwd(double[:, ::1] x, double[:, ::1] gout):
    cdef Py_ssize_t n = x.shape[0], d = x.shape[1], i, j
    out = np.empty((n, d), dtype=np.float64)
    cdef double[:, ::1] g = out
    cdef double v, v2, t, dinner
    for i in range(n):
        for j in range(d):
            v = x[i, j]
            v2 = v * v
            t = tanh(GELU_C * (v + GELU_A * v * v2))
            dinner = GELU_C * (1.0 + 3.0 * GELU_A * v2)
            g[i, j] = gout[i, j] * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * dinner)
    return out


def softmax_fwd(double[:, ::1] x):
    cdef Py_ssize_t n = x.shape[0], d = x.shape[1], i, j
    out = np.empty((n, d), dtype=np.float64)
    cdef double[:, ::1] y = out
    cdef double mx, s
    for i in range(n):
        mx = x[i, 0]
        for j in range(1, d):
            if x[i, j] > mx:
                mx = x[i, j]
        s = 0.0
        for j in range(d):
            y[i, j] = exp(x[i, j] - mx)
            s += y[i, j]
        for j in range(d):
            y[i, j] /= s
    return out


def softmax_bwd(double[:, ::1] y, double[:, ::1] gout):
    cdef Py_ssize_t n = y.shape[0], d = y.shape[1], i, j
    out = np.empty((n, d), dtype=np.float64)
    cdef double[:, ::1] g = out
    cdef double inner
    for i in range(n):
        inner = 0.0
        for j in range(d):
            inner += gout[i, j] * y[i, j]
        for j in range(d):
            g[i, j] = y[i, j] * (gout[i, j] - inner)
    return out


def layer_norm_fwd(double[:, ::1] x, double[::1] gamma, double[::1] beta, double eps):
    cdef Py_ssize_t n = x.shape[0], d = x.shape[1], i, j
    y_out = np.empty((n, d), dtype=np.float64)
    mean_out = np.empty(n, dtype=np.float64)
    rstd_out = np.empty(n, dtype=np.float64)
    cdef double[:, ::1] y = y_out
    cdef double[::1] mean = mean_out
    cdef double[::1] rstd = rstd_out
    cdef double mu, var, c, r
    for i in range(n):
        mu = 0.0
        for j in range(d):
            mu += x[i, j]
        mu /= d
        var = 0.0
        for j in range(d):
            c = x[i, j] - mu
            var += c * c
        var /= d
        r = 1.0 / sqrt(var + eps)
        mean[i] = mu
        rstd[i] = r
        for j in range(d):
            y[i, j] = (x[i, j] - mu) * r * gamma[j] + beta[j]
    return y_out, mean_out, rstd_out


def layer_norm_bwd(double[:, ::1] x, double[::1] gamma, double[::1] mean,
                   double[::1] rstd, double[:, ::1] gout):
    cdef Py_ssize_t n = x.shape[0], d = x.shape[1], i, j
    gx_out = np.empty((n, d), dtype=np.float64)
    ggamma_out = np.zeros(d, dtype=np.float64)
    gbeta_out = np.zeros(d, dtype=np.float64)
    cdef double[:, ::1] gx = gx_out
    cdef double[::1] ggamma = ggamma_out
    cdef double[::1] gbeta = gbeta_out
    cdef double m1, m2, xhat, gxhat, r
    for i in range(n):
        r = rstd[i]
        m1 = 0.0
        m2 = 0.0
        for j in range(d):
            xhat = (x[i, j] - mean[i]) * r
            gxhat = gout[i, j] * gamma[j]
            m1 += gxhat
            m2 += gxhat * xhat
            ggamma[j] += gout[i, j] * xhat
            gbeta[j] += gout[i, j]
        m1 /= d
        m2 /= d
        for j in range(d):
            xhat = (x[i, j] - mean[i]) * r
            gxhat = gout[i, j] * gamma[j]
            gx[i, j] = r * (gxhat - m1 - xhat * m2)
    return gx_out, ggamma_out, gbeta_out


def cross_entropy_fwd(double[:, ::1] logits, cnp.int64_t[::1] targets, long ignore_id):
    cdef Py_ssize_t n = logits.shape[0], d = logits.shape[1], i, j
    probs_out = np.empty((n, d), dtype=np.float64)
    cdef double[:, ::1] probs = probs_out
    cdef double mx, s, loss = 0.0
    cdef long n_kept = 0
    for i in range(n):
        mx = logits[i, 0]
        for j in range(1, d):
            if logits[i, j] > mx:
                mx = logits[i, j]
        s = 0.0
        for j in range(d):
            probs[i, j] = exp(logits[i, j] - mx)
            s += probs[i, j]
        for j in range(d):
            probs[i, j] /= s
        if targets[i] != ignore_id:
            n_kept += 1
            loss += log(s) + mx - logits[i, targets[i]]
    if n_kept == 0:
        return 0.0, probs_out, 0
    return loss / n_kept, probs_out, n_kept


def cross_entropy_bwd(double[:, ::1] probs, cnp.int64_t[::1] targets,
                      long ignore_id, long n_kept, double gscale):
    cdef Py_ssize_t n = probs.shape[0], d = probs.shape[1], i, j
    out = np.zeros((n, d), dtype=np.float64)
    cdef double[:, ::1] g = out
    cdef double scale
    if n_kept == 0:
        return out
    scale = gscale / n_kept
    for i in range(n):
        if targets[i] == ignore_id:
            continue
        for j in range(d):
            g[i, j] = probs[i, j] * scale
        g[i, targets[i]] -= scale
    return out


def adamw_update(double[::1] param, double[::1] grad, double[::1] m, double[::1] v,
                 long step, double lr, double beta1, double beta2, double eps,
                 double weight_decay):
    cdef Py_ssize_t n = param.shape[0], i
    cdef double bc1 = 1.0 - pow(beta1, step)
    cdef double bc2 = 1.0 - pow(beta2, step)
    cdef double mhat, vhat
    if weight_decay != 0.0:
        for i in range(n):
            param[i] -= lr * weight_decay * param[i]
    for i in range(n):
        m[i] = beta1 * m[i] + (1.0 - beta1) * grad[i]
        v[i] = beta2 * v[i] + (1.0 - beta2) * grad[i] * grad[i]
        mhat = m[i] / bc1
        vhat = v[i] / bc2
        param[i] -= lr * mhat / (sqrt(vhat) + eps)
