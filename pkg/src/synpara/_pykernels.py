"""Numpy implementations of the hot numeric kernels.

This is the fallback backend; `synpara._ckernels` is the compiled twin with
identical signatures and semantics. Every function takes C-contiguous
float64 arrays. 2-D arguments are (rows, cols) with the reduced/normalized
axis last; callers are responsible for collapsing leading dimensions.
"""

from __future__ import annotations

import numpy as np

BACKEND_NAME = "py"

_GELU_C = 0.7978845608028654  # sqrt(2/pi)
_GELU_A = 0.044715


def gelu_fwd(x):
    t = np.tanh(_GELU_C * (x + _GELU_A * x * x * x))
    return 0.5 * x * (1.0 + t)


def gelu_bwd(x, gout):
    x2 = x * x
    t = np.tanh(_GELU_C * (x + _GELU_A * x * x2))
    dinner = _GELU_C * (1.0 + 3.0 * _GELU_A * x2)
    return gout * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner)


def softmax_fwd(x):
    shifted = x - x.max(axis=1, keepdims=True)
    y = np.exp(shifted)
    y /= y.sum(axis=1, keepdims=True)
    return y


def softmax_bwd(y, gout):
    inner = (gout * y).sum(axis=1, keepdims=True)
    return y * (gout - inner)


def layer_norm_fwd(x, gamma, beta, eps):
    mean = x.mean(axis=1)
    centered = x - mean[:, None]
    var = (centered * centered).mean(axis=1)
    rstd = 1.0 / np.sqrt(var + eps)
    y = centered * rstd[:, None] * gamma + beta
    return y, mean, rstd


def layer_norm_bwd(x, gamma, mean, rstd, gout):
    xhat = (x - mean[:, None]) * rstd[:, None]
    gxhat = gout * gamma
    m1 = gxhat.mean(axis=1, keepdims=True)
    m2 = (gxhat * xhat).mean(axis=1, keepdims=True)
    gx = rstd[:, None] * (gxhat - m1 - xhat * m2)
    ggamma = (gout * xhat).sum(axis=0)
    gbeta = gout.sum(axis=0)
    return gx, ggamma, gbeta


def cross_entropy_fwd(logits, targets, ignore_id):
    """Mean NLL over rows whose target != ignore_id.

    Returns (loss, probs, n_kept); probs are full softmax rows, saved for
    the backward pass. Rows are reduced with log-sum-exp for stability.
    """
    maxes = logits.max(axis=1, keepdims=True)
    shifted = logits - maxes
    expx = np.exp(shifted)
    sums = expx.sum(axis=1)
    probs = expx / sums[:, None]
    keep = targets != ignore_id
    n_kept = int(keep.sum())
    if n_kept == 0:
        return 0.0, probs, 0
    rows = np.nonzero(keep)[0]
    lse = np.log(sums[rows]) + maxes[rows, 0]
    picked = logits[rows, targets[rows]]
    loss = float((lse - picked).sum() / n_kept)
    return loss, probs, n_kept


def cross_entropy_bwd(probs, targets, ignore_id, n_kept, gscale):
    glogits = np.zeros_like(probs)
    if n_kept == 0:
        return glogits
    keep = targets != ignore_id
    rows = np.nonzero(keep)[0]
    glogits[rows] = probs[rows]
    glogits[rows, targets[rows]] -= 1.0
    glogits[rows] *= gscale / n_kept
    return glogits


def adamw_update(param, grad, m, v, step, lr, beta1, beta2, eps, weight_decay):
    """One decoupled-weight-decay Adam step, in place on flat float64 views.

    Decay is applied to the parameter before the moment update, so zero-grad
    parameters still shrink geometrically when weight_decay > 0.
    """
    if weight_decay != 0.0:
        param -= lr * weight_decay * param
    m *= beta1
    m += (1.0 - beta1) * grad
    v *= beta2
    v += (1.0 - beta2) * grad * grad
    mhat = m / (1.0 - beta1**step)
    vhat = v / (1.0 - beta2**step)
    param -= lr * mhat / (np.sqrt(vhat) + eps)
