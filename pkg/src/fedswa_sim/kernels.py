"""Per-batch loss/gradient kernels and small reductions.

Every kernel exists twice: an explicit-loop version that numba compiles, and a
vectorised numpy version used when numba is disabled. Both compute the same
mathematical quantity; only the floating-point summation order differs, so
each backend is bit-reproducible on its own.
"""
import math

import numpy as np

from ._accel import NUMBA_ENABLED, jit

# ---------------------------------------------------------------- reductions


def _loop_dot(x, y):
    acc = 0.0
    for j in range(x.shape[0]):
        acc += x[j] * y[j]
    return acc


def _np_dot(x, y):
    return float(np.dot(x, y))


def _loop_mean_rows(vs):
    m, d = vs.shape
    out = np.zeros(d)
    for i in range(m):
        for j in range(d):
            out[j] += vs[i, j]
    for j in range(d):
        out[j] /= m
    return out


def _np_mean_rows(vs):
    out = vs[0].copy()
    for i in range(1, vs.shape[0]):
        out += vs[i]
    out /= vs.shape[0]
    return out


# ------------------------------------------------------------- quadratic loss
# per-sample loss 0.5 * (theta - x)^T A (theta - x); with clip > 0 the loss
# turns linear in the A-norm once that norm exceeds clip (Huber-style), which
# bounds the per-sample gradient norm by clip * sqrt(max eig A).


def _loop_quad(A, X, idx, theta, clip):
    d = theta.shape[0]
    B = idx.shape[0]
    grad = np.zeros(d)
    r = np.empty(d)
    ar = np.empty(d)
    loss = 0.0
    for b in range(B):
        s = idx[b]
        for j in range(d):
            r[j] = theta[j] - X[s, j]
        q = 0.0
        for j in range(d):
            acc = 0.0
            for l in range(d):
                acc += A[j, l] * r[l]
            ar[j] = acc
            q += r[j] * acc
        scale = 1.0
        if clip > 0.0 and q > clip * clip:
            nrm = math.sqrt(q)
            scale = clip / nrm
            loss += clip * nrm - 0.5 * clip * clip
        else:
            loss += 0.5 * q
        for j in range(d):
            grad[j] += scale * ar[j]
    for j in range(d):
        grad[j] /= B
    return loss / B, grad


def _np_quad(A, X, idx, theta, clip):
    R = theta[None, :] - X[idx]
    AR = R @ A.T
    q = np.einsum("bj,bj->b", R, AR)
    if clip > 0.0:
        nrm = np.sqrt(q)
        big = q > clip * clip
        scale = np.where(big, clip / np.where(big, nrm, 1.0), 1.0)
        losses = np.where(big, clip * nrm - 0.5 * clip * clip, 0.5 * q)
    else:
        scale = np.ones_like(q)
        losses = 0.5 * q
    grad = (scale[:, None] * AR).mean(axis=0)
    return float(losses.mean()), grad


# ------------------------------------------------------------ logistic loss


def _loop_logreg(X, y, idx, theta, reg):
    p = theta.shape[0]
    B = idx.shape[0]
    grad = np.zeros(p)
    loss = 0.0
    for b in range(B):
        s = idx[b]
        z = 0.0
        for j in range(p):
            z += X[s, j] * theta[j]
        # numerically stable softplus(z) - y z
        if z > 0.0:
            sp = z + math.log1p(math.exp(-z))
            sig = 1.0 / (1.0 + math.exp(-z))
        else:
            ez = math.exp(z)
            sp = math.log1p(ez)
            sig = ez / (1.0 + ez)
        loss += sp - y[s] * z
        res = sig - y[s]
        for j in range(p):
            grad[j] += res * X[s, j]
    sq = 0.0
    for j in range(p):
        grad[j] = grad[j] / B + reg * theta[j]
        sq += theta[j] * theta[j]
    return loss / B + 0.5 * reg * sq, grad


def _np_logreg(X, y, idx, theta, reg):
    Xb = X[idx]
    yb = y[idx]
    z = Xb @ theta
    sp = np.logaddexp(0.0, z)
    sig = np.exp(z - sp)
    loss = float(np.mean(sp - yb * z)) + 0.5 * reg * float(theta @ theta)
    grad = Xb.T @ (sig - yb) / len(idx) + reg * theta
    return loss, grad


# ---------------------------------------------------- one-hidden-layer MLP
# parameter layout: W1 (H x p) row-major, b1 (H), W2 (C x H) row-major, b2 (C)


def _loop_mlp(X, y, idx, theta, hidden, classes):
    p = X.shape[1]
    H = hidden
    C = classes
    o_b1 = H * p
    o_w2 = o_b1 + H
    o_b2 = o_w2 + C * H
    B = idx.shape[0]
    grad = np.zeros(theta.shape[0])
    h = np.empty(H)
    logits = np.empty(C)
    dh = np.empty(H)
    loss = 0.0
    for b in range(B):
        s = idx[b]
        for u in range(H):
            acc = theta[o_b1 + u]
            for j in range(p):
                acc += theta[u * p + j] * X[s, j]
            h[u] = math.tanh(acc)
        zmax = -1e300
        for c in range(C):
            acc = theta[o_b2 + c]
            for u in range(H):
                acc += theta[o_w2 + c * H + u] * h[u]
            logits[c] = acc
            if acc > zmax:
                zmax = acc
        tot = 0.0
        for c in range(C):
            tot += math.exp(logits[c] - zmax)
        lse = zmax + math.log(tot)
        lab = y[s]
        loss += lse - logits[lab]
        for u in range(H):
            dh[u] = 0.0
        for c in range(C):
            dz = math.exp(logits[c] - lse)
            if c == lab:
                dz -= 1.0
            grad[o_b2 + c] += dz
            for u in range(H):
                grad[o_w2 + c * H + u] += dz * h[u]
                dh[u] += dz * theta[o_w2 + c * H + u]
        for u in range(H):
            da = dh[u] * (1.0 - h[u] * h[u])
            grad[o_b1 + u] += da
            for j in range(p):
                grad[u * p + j] += da * X[s, j]
    for j in range(grad.shape[0]):
        grad[j] /= B
    return loss / B, grad


def _np_mlp(X, y, idx, theta, hidden, classes):
    p = X.shape[1]
    H, C = hidden, classes
    W1 = theta[: H * p].reshape(H, p)
    b1 = theta[H * p : H * p + H]
    W2 = theta[H * p + H : H * p + H + C * H].reshape(C, H)
    b2 = theta[H * p + H + C * H :]
    Xb = X[idx]
    yb = y[idx]
    B = len(idx)
    h = np.tanh(Xb @ W1.T + b1)
    logits = h @ W2.T + b2
    zmax = logits.max(axis=1, keepdims=True)
    lse = zmax[:, 0] + np.log(np.exp(logits - zmax).sum(axis=1))
    loss = float(np.mean(lse - logits[np.arange(B), yb]))
    dz = np.exp(logits - lse[:, None])
    dz[np.arange(B), yb] -= 1.0
    dz /= B
    gW2 = dz.T @ h
    gb2 = dz.sum(axis=0)
    da = (dz @ W2) * (1.0 - h * h)
    gW1 = da.T @ Xb
    gb1 = da.sum(axis=0)
    return loss, np.concatenate([gW1.ravel(), gb1, gW2.ravel(), gb2])


LOOP_IMPLS = {
    "dot": _loop_dot,
    "mean_rows": _loop_mean_rows,
    "quad": _loop_quad,
    "logreg": _loop_logreg,
    "mlp": _loop_mlp,
}
NUMPY_IMPLS = {
    "dot": _np_dot,
    "mean_rows": _np_mean_rows,
    "quad": _np_quad,
    "logreg": _np_logreg,
    "mlp": _np_mlp,
}

if NUMBA_ENABLED:
    JIT_IMPLS = {name: jit(fn) for name, fn in LOOP_IMPLS.items()}
    _active = JIT_IMPLS
else:
    JIT_IMPLS = {}
    _active = NUMPY_IMPLS

dot_kernel = _active["dot"]
mean_rows = _active["mean_rows"]
quad_loss_grad = _active["quad"]
logreg_loss_grad = _active["logreg"]
mlp_loss_grad = _active["mlp"]
