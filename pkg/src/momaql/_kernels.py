"""Hot kernels (MMD estimators, SiLU), each in a numba and a numpy flavour.

Family codes: 0 = rbf, 1 = negative squared distance, 2 = laplacian.
``sigmas`` is a 1-d array of bandwidths; rbf/laplacian values are averaged
over it (a single entry is the plain kernel). Gradients are taken with respect
to the first argument of the kernel.

The public names at the bottom dispatch on ``_accel.USE_NUMBA``.
"""
import math

import numpy as np
from scipy.special import expit

from . import _accel
from ._accel import njit

RBF, NEG_SQ_DIST, LAPLACIAN = 0, 1, 2

_PAIR_CHUNK = 512


# ---------------------------------------------------------------- numba ----


@njit
def _k_and_grad_nb(x, y, family, sigmas, grad):
    d = x.shape[0]
    d2 = 0.0
    for c in range(d):
        diff = x[c] - y[c]
        d2 += diff * diff
    if family == NEG_SQ_DIST:
        for c in range(d):
            grad[c] = -2.0 * (x[c] - y[c])
        return -d2
    ns = sigmas.shape[0]
    val = 0.0
    coef = 0.0
    if family == RBF:
        for q in range(ns):
            s2 = sigmas[q] * sigmas[q]
            e = math.exp(-0.5 * d2 / s2)
            val += e
            coef -= e / s2
    else:
        dist = math.sqrt(d2)
        for q in range(ns):
            e = math.exp(-dist / sigmas[q])
            val += e
            if dist > 0.0:
                coef -= e / (sigmas[q] * dist)
    val /= ns
    coef /= ns
    for c in range(d):
        grad[c] = coef * (x[c] - y[c])
    return val


@njit
def _k_nb(x, y, family, sigmas):
    d = x.shape[0]
    d2 = 0.0
    for c in range(d):
        diff = x[c] - y[c]
        d2 += diff * diff
    if family == NEG_SQ_DIST:
        return -d2
    ns = sigmas.shape[0]
    val = 0.0
    if family == RBF:
        for q in range(ns):
            val += math.exp(-0.5 * d2 / (sigmas[q] * sigmas[q]))
    else:
        dist = math.sqrt(d2)
        for q in range(ns):
            val += math.exp(-dist / sigmas[q])
    return val / ns


@njit
def grouped_vstat_numba(u, v, w, family, sigmas):
    n_groups, m, d = u.shape
    grad_u = np.zeros_like(u)
    g = np.empty(d)
    total = 0.0
    for i in range(n_groups):
        acc = 0.0
        for j in range(m):
            for k in range(m):
                acc += _k_and_grad_nb(u[i, j], u[i, k], family, sigmas, g)
                for c in range(d):
                    grad_u[i, j, c] += 2.0 * g[c]
                acc += _k_nb(v[i, j], v[i, k], family, sigmas)
                acc -= 2.0 * _k_and_grad_nb(u[i, j], v[i, k], family, sigmas, g)
                for c in range(d):
                    grad_u[i, j, c] -= 2.0 * g[c]
        total += w[i] * acc / (m * m)
        scale = w[i] / (m * m * n_groups)
        for j in range(m):
            for c in range(d):
                grad_u[i, j, c] *= scale
    return total / n_groups, grad_u


@njit
def pair_sum_numba(x, y, family, sigmas, exclude_diag):
    # with exclude_diag, x and y are the same sample: sum j > i and double
    n = x.shape[0]
    p = y.shape[0]
    d = x.shape[1]
    ns = sigmas.shape[0]
    scales = np.empty(ns)
    for q in range(ns):
        scales[q] = -0.5 / (sigmas[q] * sigmas[q]) if family == RBF else -1.0 / sigmas[q]
    total = 0.0
    for i in range(n):
        row = 0.0
        for j in range(i + 1 if exclude_diag else 0, p):
            d2 = 0.0
            for c in range(d):
                diff = x[i, c] - y[j, c]
                d2 += diff * diff
            if family == NEG_SQ_DIST:
                row -= d2
                continue
            arg = d2 if family == RBF else math.sqrt(d2)
            for q in range(ns):
                row += math.exp(scales[q] * arg)
        total += row
    if family != NEG_SQ_DIST:
        total /= ns
    return 2.0 * total if exclude_diag else total


# ---------------------------------------------------------------- numpy ----


def _kmat_numpy(x, y, family, sigmas, want_grad):
    diff = x[..., :, None, :] - y[..., None, :, :]
    d2 = np.einsum("...c,...c->...", diff, diff)
    if family == NEG_SQ_DIST:
        return -d2, (-2.0 * diff if want_grad else None)
    val = np.zeros_like(d2)
    coef = np.zeros_like(d2)
    if family == RBF:
        for s in sigmas:
            e = np.exp(-0.5 * d2 / (s * s))
            val += e
            coef -= e / (s * s)
    else:
        dist = np.sqrt(d2)
        safe = np.where(dist > 0.0, dist, 1.0)
        for s in sigmas:
            e = np.exp(-dist / s)
            val += e
            coef -= np.where(dist > 0.0, e / (s * safe), 0.0)
    val /= len(sigmas)
    if not want_grad:
        return val, None
    coef /= len(sigmas)
    return val, coef[..., None] * diff


def grouped_vstat_numpy(u, v, w, family, sigmas):
    n_groups, m, _ = u.shape
    k_uu, g_uu = _kmat_numpy(u, u, family, sigmas, True)
    k_vv, _ = _kmat_numpy(v, v, family, sigmas, False)
    k_uv, g_uv = _kmat_numpy(u, v, family, sigmas, True)
    per_group = (k_uu.sum(axis=(1, 2)) + k_vv.sum(axis=(1, 2))
                 - 2.0 * k_uv.sum(axis=(1, 2))) / (m * m)
    loss = float(np.mean(w * per_group))
    scale = (w / (m * m * n_groups))[:, None, None]
    grad_u = scale * (2.0 * g_uu.sum(axis=2) - 2.0 * g_uv.sum(axis=2))
    return loss, grad_u


def pair_sum_numpy(x, y, family, sigmas, exclude_diag):
    # with exclude_diag, x and y are the same sample: sum j > i and double
    total = 0.0
    for start in range(0, x.shape[0], _PAIR_CHUNK):
        block = x[start:start + _PAIR_CHUNK]
        d2 = np.zeros((block.shape[0], y.shape[0]))
        for c in range(x.shape[1]):
            diff = block[:, c, None] - y[None, :, c]
            d2 += diff * diff
        if family == NEG_SQ_DIST:
            k = -d2
        else:
            arg = d2 if family == RBF else np.sqrt(d2)
            k = np.zeros_like(d2)
            for s in sigmas:
                k += np.exp(arg * (-0.5 / (s * s) if family == RBF else -1.0 / s))
            k /= len(sigmas)
        if exclude_diag:
            k = np.triu(k, start + 1)
        total += float(k.sum())
    return 2.0 * total if exclude_diag else total


# ----------------------------------------------------------------- silu ----


@njit
def _sigmoid_nb(z):
    if z >= 0.0:
        return 1.0 / (1.0 + math.exp(-z))
    e = math.exp(z)
    return e / (1.0 + e)


@njit
def silu_numba(z):
    out = np.empty_like(z)
    zf = z.ravel()
    of = out.ravel()
    for i in range(zf.shape[0]):
        of[i] = zf[i] * _sigmoid_nb(zf[i])
    return out


@njit
def silu_sig_numba(z):
    out = np.empty_like(z)
    sig = np.empty_like(z)
    zf = z.ravel()
    of = out.ravel()
    sf = sig.ravel()
    for i in range(zf.shape[0]):
        sf[i] = _sigmoid_nb(zf[i])
        of[i] = zf[i] * sf[i]
    return out, sig


@njit
def silu_grad_numba(z, sig, g):
    out = np.empty_like(z)
    zf = z.ravel()
    sf = sig.ravel()
    gf = g.ravel()
    of = out.ravel()
    for i in range(zf.shape[0]):
        sg = sf[i]
        of[i] = gf[i] * (sg * (1.0 + zf[i] * (1.0 - sg)))
    return out


def silu_numpy(z):
    return z * expit(z)


def silu_sig_numpy(z):
    sig = expit(z)
    return z * sig, sig


def silu_grad_numpy(z, sig, g):
    return g * (sig * (1.0 + z * (1.0 - sig)))


# -------------------------------------------------------------- dispatch ---


def grouped_vstat(u, v, w, family, sigmas):
    """Weighted grouped MMD^2 V-statistic and its gradient w.r.t. ``u``.

    Args:
        u: (G, M, d) samples of the differentiated branch.
        v: (G, M, d) samples of the constant branch.
        w: (G,) per-group weights.
        family: kernel family code.
        sigmas: (q,) bandwidths.

    Returns:
        ``(loss, grad_u)`` with ``loss`` the mean over groups.
    """
    u = np.ascontiguousarray(u, dtype=np.float64)
    v = np.ascontiguousarray(v, dtype=np.float64)
    w = np.ascontiguousarray(w, dtype=np.float64)
    sigmas = np.ascontiguousarray(sigmas, dtype=np.float64)
    if _accel.USE_NUMBA:
        loss, grad = grouped_vstat_numba(u, v, w, int(family), sigmas)
        return float(loss), grad
    return grouped_vstat_numpy(u, v, w, int(family), sigmas)


def pair_sum(x, y, family, sigmas, exclude_diag=False):
    """Sum of ``k(x_i, y_j)`` over all pairs.

    ``exclude_diag`` skips ``i == j`` and assumes ``y`` is the same sample as
    ``x`` (the symmetric half is summed once and doubled).
    """
    x = np.ascontiguousarray(x, dtype=np.float64)
    y = np.ascontiguousarray(y, dtype=np.float64)
    if exclude_diag and x.shape != y.shape:
        raise ValueError("exclude_diag needs x and y to be the same sample")
    sigmas = np.ascontiguousarray(sigmas, dtype=np.float64)
    if _accel.USE_NUMBA:
        return float(pair_sum_numba(x, y, int(family), sigmas, bool(exclude_diag)))
    return pair_sum_numpy(x, y, int(family), sigmas, bool(exclude_diag))


def silu(z):
    z = np.ascontiguousarray(z, dtype=np.float64)
    return silu_numba(z) if _accel.USE_NUMBA else silu_numpy(z)


def silu_sig(z):
    """``(silu(z), sigmoid(z))``; the sigmoid is kept for the backward pass."""
    z = np.ascontiguousarray(z, dtype=np.float64)
    return silu_sig_numba(z) if _accel.USE_NUMBA else silu_sig_numpy(z)


def silu_grad(z, sig, g):
    """``g * d silu(z) / dz`` given ``sig = sigmoid(z)``."""
    z = np.ascontiguousarray(z, dtype=np.float64)
    g = np.ascontiguousarray(g, dtype=np.float64)
    return silu_grad_numba(z, sig, g) if _accel.USE_NUMBA else silu_grad_numpy(z, sig, g)
