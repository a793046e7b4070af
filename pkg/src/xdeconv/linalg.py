"""Batched Cholesky factorisation and triangular solves over leading axes."""

from __future__ import annotations

import numpy as np

from .core import NotPositiveDefiniteError

JITTER = 1e-9


def cholesky(T, jitter=JITTER):
    """Lower Cholesky factors of a stack of matrices ``T[..., d, d]``.

    A matrix whose factorisation fails is retried once with
    ``jitter * mean(diag) * I`` added. A second failure raises
    ``NotPositiveDefiniteError`` whose ``index`` attribute is the position of
    the matrix in the leading axes.
    """
    try:
        L = np.linalg.cholesky(T)
    except np.linalg.LinAlgError:
        L = _cholesky_retry(T, jitter)
    if not np.all(np.isfinite(L)):
        bad = np.argwhere(~np.isfinite(L).all(axis=(-1, -2)))[0]
        err = NotPositiveDefiniteError("matrix has non-finite entries")
        err.index = tuple(int(i) for i in bad)
        raise err
    return L


def _cholesky_retry(T, jitter):
    batch_shape = T.shape[:-2]
    d = T.shape[-1]
    flat = T.reshape(-1, d, d)
    out = np.empty_like(flat)
    eye = np.eye(d, dtype=T.dtype)
    for n, A in enumerate(flat):
        try:
            out[n] = np.linalg.cholesky(A)
            continue
        except np.linalg.LinAlgError:
            pass
        scale = np.mean(np.diag(A))
        try:
            out[n] = np.linalg.cholesky(A + jitter * scale * eye)
        except np.linalg.LinAlgError:
            err = NotPositiveDefiniteError("matrix is not positive definite")
            err.index = tuple(int(i) for i in np.unravel_index(n, batch_shape))
            raise err from None
    return out.reshape(T.shape)


def solve_lower(L, b):
    """Solve ``L x = b`` by forward substitution.

    ``b`` is either a stack of vectors ``[..., d]`` or matrices ``[..., d, k]``;
    leading axes broadcast against ``L``.
    """
    is_vec = b.ndim == L.ndim - 1
    B = b[..., None] if is_vec else b
    d = L.shape[-1]
    shape = np.broadcast_shapes(L.shape[:-2], B.shape[:-2]) + B.shape[-2:]
    x = np.empty(shape, dtype=np.result_type(L, B))
    for i in range(d):
        acc = B[..., i, :]
        if i:
            acc = acc - np.einsum("...j,...jk->...k", L[..., i, :i], x[..., :i, :])
        x[..., i, :] = acc / L[..., i, i, None]
    return x[..., 0] if is_vec else x


def solve_lower_t(L, b):
    """Solve ``L^T x = b`` by back substitution (same shape rules as above)."""
    is_vec = b.ndim == L.ndim - 1
    B = b[..., None] if is_vec else b
    d = L.shape[-1]
    shape = np.broadcast_shapes(L.shape[:-2], B.shape[:-2]) + B.shape[-2:]
    x = np.empty(shape, dtype=np.result_type(L, B))
    for i in range(d - 1, -1, -1):
        acc = B[..., i, :]
        if i < d - 1:
            acc = acc - np.einsum(
                "...j,...jk->...k", L[..., i + 1 :, i], x[..., i + 1 :, :]
            )
        x[..., i, :] = acc / L[..., i, i, None]
    return x[..., 0] if is_vec else x


def outer(a, b=None):
    b = a if b is None else b
    return a[..., :, None] * b[..., None, :]
