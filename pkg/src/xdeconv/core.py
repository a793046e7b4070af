"""Shared types for the deconvolution fitters.

Mixture parameters live in two coordinate systems: the constrained form
(``GmmParams``) used by EM and for evaluation, and an unconstrained form
(``UnconstrainedParams``) used by gradient descent. ``constrain`` and
``unconstrain`` map between them.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import softmax

LOGDIAG_CLAMP = 30.0


class XDError(Exception):
    """Base class for errors raised by this package."""


class NotPositiveDefiniteError(XDError, np.linalg.LinAlgError):
    """A covariance that must be positive definite is not.

    ``point`` and ``component`` identify the offending matrix when known.
    """

    def __init__(self, message, point=None, component=None):
        super().__init__(message)
        self.point = point
        self.component = component


class DegenerateComponentError(XDError):
    def __init__(self, message, component, iteration=None):
        super().__init__(message)
        self.component = component
        self.iteration = iteration
        self.report = None


class NonFiniteError(XDError):
    def __init__(self, message, iteration=None):
        super().__init__(message)
        self.iteration = iteration
        self.report = None


@dataclass(frozen=True)
class NoisyPoint:
    """One observation ``x = R v + eps`` with ``eps ~ N(0, S)``.

    ``R=None`` stands for the identity projection.
    """

    x: np.ndarray
    S: np.ndarray
    R: np.ndarray | None = None

    def __post_init__(self):
        x = np.atleast_1d(np.asarray(self.x, dtype=float))
        S = np.atleast_2d(np.asarray(self.S, dtype=float))
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "S", S)
        if S.shape != (x.size, x.size):
            raise ValueError(f"S has shape {S.shape}, expected {(x.size, x.size)}")
        if self.R is not None:
            R = np.atleast_2d(np.asarray(self.R, dtype=float))
            if R.shape[0] != x.size:
                raise ValueError(f"R has {R.shape[0]} rows, expected {x.size}")
            object.__setattr__(self, "R", R)
        check_psd(S)

    @property
    def d_obs(self):
        return self.x.size

    @property
    def d_latent(self):
        return self.d_obs if self.R is None else self.R.shape[1]


def check_psd(S, atol=1e-9):
    """Raise ``NotPositiveDefiniteError`` unless ``S`` is symmetric PSD."""
    S = np.asarray(S)
    if not np.allclose(S, S.T, rtol=0.0, atol=atol):
        raise NotPositiveDefiniteError("noise covariance is not symmetric")
    if S.size and not np.all(np.isfinite(S)):
        raise NotPositiveDefiniteError("noise covariance has non-finite entries")
    if S.size:
        eig = np.linalg.eigvalsh(S)
        # eigvalsh is accurate to roughly eps * ||S||
        if eig[0] < -1e-12 * max(1.0, abs(eig[-1])):
            raise NotPositiveDefiniteError(
                f"noise covariance has negative eigenvalue {eig[0]:.3g}"
            )


@dataclass(frozen=True)
class GmmParams:
    """Mixture weights ``alpha`` (K,), means (K, d) and covariances (K, d, d)."""

    alpha: np.ndarray
    means: np.ndarray
    covs: np.ndarray

    def __post_init__(self):
        alpha = np.asarray(self.alpha)
        means = np.asarray(self.means)
        covs = np.asarray(self.covs)
        if means.ndim != 2 or alpha.shape != means.shape[:1]:
            raise ValueError(
                f"inconsistent shapes alpha={alpha.shape} means={means.shape}"
            )
        if covs.shape != means.shape + means.shape[1:]:
            raise ValueError(f"covs has shape {covs.shape}, means {means.shape}")
        object.__setattr__(self, "alpha", alpha)
        object.__setattr__(self, "means", means)
        object.__setattr__(self, "covs", covs)

    @property
    def K(self):
        return self.alpha.shape[0]

    @property
    def d(self):
        return self.means.shape[1]

    def check(self, atol=1e-9):
        """Validate weights and positive definiteness; return self."""
        if not np.all(np.isfinite(self.alpha)) or np.any(self.alpha <= 0):
            raise XDError("mixture weights must be strictly positive")
        if abs(self.alpha.sum() - 1.0) > atol:
            raise XDError(f"mixture weights sum to {self.alpha.sum()!r}")
        if not np.all(np.isfinite(self.means)):
            raise XDError("means contain non-finite values")
        for j, V in enumerate(self.covs):
            try:
                np.linalg.cholesky(V)
            except np.linalg.LinAlgError:
                raise NotPositiveDefiniteError(
                    f"covariance of component {j} is not positive definite",
                    component=j,
                ) from None
        return self

    def permuted(self, order):
        order = np.asarray(order)
        return GmmParams(self.alpha[order], self.means[order], self.covs[order])

    def astype(self, dtype):
        return GmmParams(
            self.alpha.astype(dtype), self.means.astype(dtype), self.covs.astype(dtype)
        )

    def to_dict(self):
        return {
            "k": int(self.K),
            "d": int(self.d),
            "alpha": self.alpha.tolist(),
            "means": self.means.tolist(),
            "covs": self.covs.tolist(),
        }

    @classmethod
    def from_dict(cls, obj):
        K, d = int(obj["k"]), int(obj["d"])
        alpha = np.asarray(obj["alpha"], dtype=float).reshape(K)
        means = np.asarray(obj["means"], dtype=float).reshape(K, d)
        covs = np.asarray(obj["covs"], dtype=float).reshape(K, d, d)
        return cls(alpha, means, covs)


def save_checkpoint(params, path):
    # json writes floats with repr, which round-trips doubles exactly
    Path(path).write_text(json.dumps(params.to_dict()) + "\n")


def load_checkpoint(path):
    return GmmParams.from_dict(json.loads(Path(path).read_text()))


@dataclass(frozen=True)
class UnconstrainedParams:
    """Logits, means, strictly-lower Cholesky entries and log Cholesky diagonal."""

    z: np.ndarray
    means: np.ndarray
    chol_lower: np.ndarray
    chol_logdiag: np.ndarray

    @property
    def K(self):
        return self.z.shape[0]

    @property
    def d(self):
        return self.means.shape[1]

    def arrays(self):
        return (self.z, self.means, self.chol_lower, self.chol_logdiag)

    @classmethod
    def from_arrays(cls, arrays):
        return cls(*arrays)

    def map(self, fn, *others):
        """Apply ``fn`` field-wise across this and other instances."""
        fields = zip(self.arrays(), *(o.arrays() for o in others))
        return UnconstrainedParams(*(fn(*f) for f in fields))

    def to_vector(self):
        rows, cols = np.tril_indices(self.d, -1)
        return np.concatenate(
            [
                self.z,
                self.means.ravel(),
                self.chol_lower[:, rows, cols].ravel(),
                self.chol_logdiag.ravel(),
            ]
        )

    @classmethod
    def from_vector(cls, vec, K, d):
        rows, cols = np.tril_indices(d, -1)
        n_low = rows.size
        vec = np.asarray(vec, dtype=float)
        z = vec[:K]
        means = vec[K : K + K * d].reshape(K, d)
        off = K + K * d
        chol_lower = np.zeros((K, d, d))
        chol_lower[:, rows, cols] = vec[off : off + K * n_low].reshape(K, n_low)
        off += K * n_low
        logdiag = vec[off : off + K * d].reshape(K, d)
        return cls(z.copy(), means.copy(), chol_lower, logdiag.copy())


def cholesky_factors(u):
    """Lower-triangular factors ``L_j`` with ``exp`` of the clamped log-diagonal."""
    d = u.d
    L = np.tril(u.chol_lower, -1)
    diag = np.exp(np.clip(u.chol_logdiag, -LOGDIAG_CLAMP, LOGDIAG_CLAMP))
    idx = np.arange(d)
    L[:, idx, idx] = diag
    return L


def constrain(u):
    L = cholesky_factors(u)
    covs = L @ np.swapaxes(L, -1, -2)
    return GmmParams(softmax(u.z), u.means.copy(), covs)


def unconstrain(p):
    if np.any(p.alpha <= 0):
        raise XDError("mixture weights must be strictly positive")
    logits = np.log(p.alpha)
    z = logits - logits.mean()
    K, d = p.K, p.d
    chol_lower = np.zeros((K, d, d))
    logdiag = np.zeros((K, d))
    for j, V in enumerate(p.covs):
        try:
            L = np.linalg.cholesky(V)
        except np.linalg.LinAlgError:
            raise NotPositiveDefiniteError(
                f"covariance of component {j} is not positive definite", component=j
            ) from None
        chol_lower[j] = np.tril(L, -1)
        logdiag[j] = np.log(np.diag(L))
    return UnconstrainedParams(z, p.means.copy(), chol_lower, logdiag)


@dataclass(frozen=True)
class SuffStatAccumulator:
    """Running sums ``q_hat``, ``s_hat``, ``S_hat`` of the online EM.

    ``covs`` optionally carries the centred covariance ``S_hat/q_hat - m m^T``
    computed without cancellation; the stable M-step reads it in place of
    recomputing from ``S_hat``.
    """

    q_hat: np.ndarray
    s_hat: np.ndarray
    S_hat: np.ndarray
    covs: np.ndarray | None = field(default=None, compare=False)

    @property
    def means(self):
        return self.s_hat / self.q_hat[:, None]

    def centred_covs(self):
        if self.covs is not None:
            return self.covs
        m = self.means
        return self.S_hat / self.q_hat[:, None, None] - m[:, :, None] * m[:, None, :]

    @classmethod
    def from_params(cls, params, batch_size):
        """Seed the sums so that ``q_hat`` totals ``batch_size`` and the
        normalised statistics reproduce ``params`` exactly."""
        q = params.alpha * batch_size
        m = params.means
        s = q[:, None] * m
        S = q[:, None, None] * (params.covs + m[:, :, None] * m[:, None, :])
        return cls(q, s, S, params.covs.copy())
