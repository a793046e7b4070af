"""Mixture log-likelihood and posterior statistics under per-point noise.

Every observation ``x_i`` sees component ``j`` as ``N(R_i m_j, T_ij)`` with
``T_ij = R_i V_j R_i^T + S_i``. All routines here work on stacks of points
and components at once, chunked over points to bound memory.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from . import linalg
from .core import NotPositiveDefiniteError
from .data import as_dataset

LOG_2PI = np.log(2.0 * np.pi)
CHUNK = 4096


@dataclass(frozen=True)
class ComponentPosterior:
    """Responsibilities ``r``, conditional means ``b`` and covariances ``B``
    of the latent vector, plus the log mixture density of each point.

    For a single point the arrays have shapes (K,), (K, d), (K, d, d) and
    ``logdens`` is a float; batched results carry a leading point axis.
    """

    r: np.ndarray
    b: np.ndarray
    B: np.ndarray
    logdens: np.ndarray


def convolved_cov(V, point):
    """``R V R^T + S`` for one point."""
    V = np.asarray(V, dtype=float)
    if point.R is None:
        return V + point.S
    T = point.R @ V @ point.R.T + point.S
    return 0.5 * (T + T.T)


def _convolve(params, X, S, R):
    """Residuals, ``R V`` and Cholesky factors of ``T`` for every (point, component)."""
    m, V = params.means, params.covs
    if R is None:
        e = X[:, None, :] - m[None, :, :]
        RV = None
        T = V[None, :, :, :] + S[:, None, :, :]
    else:
        e = X[:, None, :] - np.einsum("nab,kb->nka", R, m)
        RV = np.einsum("nab,kbc->nkac", R, V)
        T = np.einsum("nkac,nbc->nkab", RV, R) + S[:, None, :, :]
        T = 0.5 * (T + np.swapaxes(T, -1, -2))
    return e, RV, T


def _factor(T, offset):
    try:
        return linalg.cholesky(T)
    except NotPositiveDefiniteError as exc:
        i, j = exc.index
        raise NotPositiveDefiniteError(
            f"convolved covariance for point {offset + i}, component {j} "
            "is not positive definite",
            point=offset + i,
            component=j,
        ) from None


def _log_joint(params, X, S, R, offset=0):
    """``log alpha_j + log N(x_i | R_i m_j, T_ij)`` with intermediates."""
    e, RV, T = _convolve(params, X, S, R)
    L = _factor(T, offset)
    w = linalg.solve_lower(L, e)
    d_obs = X.shape[1]
    logdet = 2.0 * np.log(np.diagonal(L, axis1=-2, axis2=-1)).sum(-1)
    lognorm = -0.5 * (d_obs * LOG_2PI + logdet + np.einsum("nka,nka->nk", w, w))
    with np.errstate(divide="ignore"):
        log_alpha = np.log(params.alpha)
    return log_alpha[None, :] + lognorm, e, RV, L, w


def _chunks(n, size=CHUNK):
    for start in range(0, n, size):
        yield start, min(start + size, n)


def _arrays(data):
    data = as_dataset(data)
    return data.X, data.S, data.R


def point_log_likelihood(params, data):
    """Log mixture density of each point, shape (N,)."""
    X, S, R = _arrays(data)
    out = np.empty(X.shape[0], dtype=np.result_type(X, params.means))
    for a, b in _chunks(X.shape[0]):
        logp, *_ = _log_joint(params, X[a:b], S[a:b], None if R is None else R[a:b], a)
        out[a:b] = logsumexp(logp, axis=1)
    return out


def log_likelihood(params, data):
    """Total log-likelihood summed over points."""
    return float(np.sum(point_log_likelihood(params, data)))


def mean_log_likelihood(params, data):
    """Log-likelihood per point, in nats."""
    return float(np.mean(point_log_likelihood(params, data)))


def posterior_arrays(params, X, S, R=None, offset=0):
    """Batched E-step on raw arrays; returns a ``ComponentPosterior`` with a
    leading point axis."""
    logp, e, RV, L, w = _log_joint(params, X, S, R, offset)
    logdens = logsumexp(logp, axis=1)
    r = np.exp(logp - logdens[:, None])
    Tinv_e = linalg.solve_lower_t(L, w)
    V = params.covs[None]
    if RV is None:
        # R = I: V T^{-1} e and V - V T^{-1} V
        b = params.means[None] + np.einsum("nkab,nkb->nka", np.broadcast_to(V, L.shape), Tinv_e)
        A = linalg.solve_lower(L, np.broadcast_to(V, L.shape))
    else:
        b = params.means[None] + np.einsum("nkab,nka->nkb", RV, Tinv_e)
        A = linalg.solve_lower(L, RV)
    B = V - np.einsum("nkai,nkaj->nkij", A, A)
    B = 0.5 * (B + np.swapaxes(B, -1, -2))
    return ComponentPosterior(r, b, B, logdens)


def e_step_batch(params, data):
    X, S, R = _arrays(data)
    parts = [
        posterior_arrays(params, X[a:b], S[a:b], None if R is None else R[a:b], a)
        for a, b in _chunks(X.shape[0])
    ]
    if len(parts) == 1:
        return parts[0]
    return ComponentPosterior(
        *(np.concatenate([getattr(p, f) for p in parts]) for f in ("r", "b", "B", "logdens"))
    )


def e_step(params, point):
    """Posterior responsibilities and latent moments for a single point."""
    post = e_step_batch(params, [point])
    return ComponentPosterior(post.r[0], post.b[0], post.B[0], float(post.logdens[0]))
