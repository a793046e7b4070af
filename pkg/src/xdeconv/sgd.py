"""Minibatch gradient fitting of the reparameterised mixture with Adam."""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass

import numpy as np
from scipy.special import logsumexp

from . import linalg
from .core import LOGDIAG_CLAMP, NonFiniteError, UnconstrainedParams, XDError
from .core import cholesky_factors, constrain, unconstrain
from .data import as_dataset
from .likelihood import _log_joint, mean_log_likelihood
from .report import EpochRecord, FitReport, schedule_value


@dataclass(frozen=True)
class SgdConfig:
    """Settings for ``fit_sgd``. Without an explicit ``lr_schedule`` the
    learning rate starts at ``lr`` and drops tenfold at each epoch in
    ``lr_drop_at``."""

    batch_size: int = 500
    epochs: int = 20
    lr: float = 1e-2
    lr_drop_at: tuple = (10,)
    lr_schedule: tuple | None = None
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    reg_w: float = 1e-3
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("Adam betas must lie in [0, 1)")
        for _, lr in self.schedule():
            if lr < 0:
                raise ValueError(f"negative learning rate {lr}")

    def schedule(self):
        if self.lr_schedule is not None:
            return tuple((int(e), float(v)) for e, v in self.lr_schedule)
        out = [(0, self.lr)]
        lr = self.lr
        for epoch in sorted(self.lr_drop_at):
            lr /= 10
            out.append((int(epoch), lr))
        return tuple(out)

    def to_dict(self):
        out = asdict(self)
        out["lr_drop_at"] = list(self.lr_drop_at)
        out["lr_schedule"] = [list(p) for p in self.schedule()]
        return out


def _penalty(covs_trace, reg_w):
    return float(np.sum(reg_w / covs_trace))


def loss(u, batch, reg_w=0.0):
    """Mean negative log-likelihood over ``batch`` plus ``sum_j reg_w / tr V_j``."""
    data = as_dataset(batch)
    p = constrain(u)
    logp, *_ = _log_joint(p, data.X, data.S, data.R)
    nll = -float(np.mean(logsumexp(logp, axis=1)))
    return nll + _penalty(np.trace(p.covs, axis1=1, axis2=2), reg_w)


def loss_grad(u, batch, reg_w=0.0):
    """Loss and its exact gradient with respect to every unconstrained field."""
    data = as_dataset(batch)
    X, S, R = data.X, data.S, data.R
    n = X.shape[0]
    L = cholesky_factors(u)
    p = constrain(u)
    logp, _, _, LT, w = _log_joint(p, X, S, R)
    ll = logsumexp(logp, axis=1)
    r = np.exp(logp - ll[:, None])
    traces = np.trace(p.covs, axis1=1, axis2=2)
    value = -float(np.mean(ll)) + _penalty(traces, reg_w)

    # d log N / d T = (T^-1 e e^T T^-1 - T^-1) / 2
    Tinv_e = linalg.solve_lower_t(LT, w)
    eye = np.broadcast_to(np.eye(LT.shape[-1]), LT.shape)
    Linv = linalg.solve_lower(LT, eye)
    Tinv = np.einsum("nkai,nkaj->nkij", Linv, Linv)
    G = 0.5 * (linalg.outer(Tinv_e) - Tinv)

    coef = -r / n
    if R is None:
        g_means = np.einsum("nk,nka->ka", coef, Tinv_e)
        g_V = np.einsum("nk,nkab->kab", coef, G)
    else:
        g_means = np.einsum("nk,nab,nka->kb", coef, R, Tinv_e, optimize=True)
        g_V = np.einsum("nk,nai,nkab,nbj->kij", coef, R, G, R, optimize=True)
    g_V = g_V - (reg_w / traces**2)[:, None, None] * np.eye(u.d)
    g_z = -(r.mean(axis=0) - p.alpha)

    # V = L L^T with symmetric dV gives dL = 2 dV L
    g_L = 2.0 * g_V @ L
    g_lower = np.tril(g_L, -1)
    diag = np.diagonal(L, axis1=1, axis2=2)
    inside = np.abs(u.chol_logdiag) <= LOGDIAG_CLAMP
    g_logdiag = np.diagonal(g_L, axis1=1, axis2=2) * diag * inside
    return value, UnconstrainedParams(g_z, g_means, g_lower, g_logdiag)


@dataclass(frozen=True)
class AdamState:
    m: UnconstrainedParams
    v: UnconstrainedParams
    t: int = 0

    @classmethod
    def zeros(cls, u):
        zero = u.map(np.zeros_like)
        return cls(zero, zero, 0)


def adam_step(u, grad, state, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam update; returns ``(u', state')``."""
    t = state.t + 1
    m = state.m.map(lambda m_, g: beta1 * m_ + (1 - beta1) * g, grad)
    v = state.v.map(lambda v_, g: beta2 * v_ + (1 - beta2) * g * g, grad)
    bc1 = 1 - beta1**t
    bc2 = 1 - beta2**t
    u_new = u.map(
        lambda x, m_, v_: x - lr * (m_ / bc1) / (np.sqrt(v_ / bc2) + eps), m, v
    )
    return u_new, AdamState(m, v, t)


def _finite(value, grad):
    return np.isfinite(value) and all(np.all(np.isfinite(a)) for a in grad.arrays())


def fit_sgd(data, init, cfg=SgdConfig(), callbacks=(), val_data=None):
    """Fit by minibatch Adam on the unconstrained parameters.

    A non-finite loss or gradient aborts the fit with ``NonFiniteError``
    carrying the iteration index and the partial report.
    """
    data = as_dataset(data)
    n = len(data)
    if n == 0:
        raise ValueError("no data")
    init.check()
    report = FitReport(method="sgd", config=cfg.to_dict())
    report.initial_train_ll = mean_log_likelihood(init, data)
    rng = np.random.default_rng(cfg.seed)
    u = unconstrain(init)
    state = AdamState.zeros(u)
    schedule = cfg.schedule()
    M = min(cfg.batch_size, n)
    params = init
    clock = 0.0
    iteration = 0
    try:
        for epoch in range(cfg.epochs):
            lr = schedule_value(schedule, epoch)
            start = time.perf_counter()
            perm = rng.permutation(n)
            for a in range(0, n, M):
                batch = data.subset(perm[a : a + M])
                value, grad = loss_grad(u, batch, cfg.reg_w)
                if not _finite(value, grad):
                    raise NonFiniteError(
                        f"non-finite loss or gradient at iteration {iteration}",
                        iteration=iteration,
                    )
                u, state = adam_step(u, grad, state, lr, cfg.beta1, cfg.beta2, cfg.eps)
                iteration += 1
            clock += time.perf_counter() - start
            params = constrain(u).check()
            record = EpochRecord(epoch + 1, mean_log_likelihood(params, data), clock)
            report.epochs.append(record)
            for cb in callbacks:
                cb(epoch + 1, params, record)
    except XDError as exc:
        report.fail(exc, params)
        exc.report = report
        raise
    report.finish(params, data, val_data)
    return report
