"""Batch and minibatch (online) EM for the deconvolution mixture model."""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass, replace

import numpy as np

from .core import DegenerateComponentError, GmmParams, SuffStatAccumulator, XDError
from .data import as_dataset
from .likelihood import _chunks, mean_log_likelihood, posterior_arrays
from .linalg import outer
from .report import EpochRecord, FitReport, schedule_value

Q_FLOOR = 1e-8


@dataclass(frozen=True)
class EmConfig:
    """Settings for ``fit_em``.

    ``step_schedule`` holds ``(epoch, step_size)`` breakpoints; when left as
    ``None`` it starts at ``step_size`` and halves at each epoch listed in
    ``halve_step_at``. Batch mode ignores step sizes and batch size.
    """

    mode: str = "minibatch"
    batch_size: int = 500
    step_size: float = 1e-2
    halve_step_at: tuple = (10,)
    step_schedule: tuple | None = None
    epochs: int = 20
    reg_w: float = 1e-3
    seed: int = 0

    def __post_init__(self):
        if self.mode not in ("batch", "minibatch"):
            raise ValueError(f"unknown EM mode {self.mode!r}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if self.reg_w < 0:
            raise ValueError("reg_w must be non-negative")
        for _, lam in self.schedule():
            if not 0 < lam <= 1:
                raise ValueError(f"step size {lam} outside (0, 1]")

    def schedule(self):
        if self.step_schedule is not None:
            return tuple((int(e), float(v)) for e, v in self.step_schedule)
        out = [(0, self.step_size)]
        lam = self.step_size
        for epoch in sorted(self.halve_step_at):
            lam /= 2
            out.append((int(epoch), lam))
        return tuple(out)

    def to_dict(self):
        out = asdict(self)
        out["halve_step_at"] = list(self.halve_step_at)
        out["step_schedule"] = [list(p) for p in self.schedule()]
        return out


@dataclass(frozen=True)
class MinibatchStats:
    """Per-component sums over a minibatch.

    ``q``, ``s``, ``S`` are the responsibility, first- and second-moment sums;
    ``covs`` is the same second moment centred on ``s/q`` and accumulated
    without cancellation. ``posterior`` keeps the per-point E-step output
    when the stats come from a single chunk.
    """

    q: np.ndarray
    s: np.ndarray
    S: np.ndarray
    covs: np.ndarray
    n: int
    posterior: object = None

    @property
    def means(self):
        q = self.q[:, None]
        return np.divide(self.s, q, out=np.zeros_like(self.s), where=q > 0)

    def scaled(self, factor):
        """Stats of a batch with every responsibility multiplied by ``factor``."""
        return replace(self, q=self.q * factor, s=self.s * factor, S=self.S * factor)

    def combine(self, other):
        q = self.q + other.q
        safe = np.where(q > 0, q, 1.0)
        wa = (self.q / safe)[:, None]
        wb = (other.q / safe)[:, None]
        m = wa * self.means + wb * other.means
        da = self.means - m
        db = other.means - m
        covs = wa[..., None] * (self.covs + outer(da)) + wb[..., None] * (
            other.covs + outer(db)
        )
        return MinibatchStats(
            q, self.s + other.s, self.S + other.S, covs, self.n + other.n
        )


def _stats_from_posterior(post):
    r, b, B = post.r, post.b, post.B
    q = r.sum(axis=0)
    s = np.einsum("nk,nka->ka", r, b)
    S = np.einsum("nk,nkab->kab", r, outer(b) + B)
    safe = np.where(q > 0, q, 1.0)
    m = s / safe[:, None]
    db = b - m[None]
    covs = np.einsum("nk,nkab->kab", r, outer(db) + B) / safe[:, None, None]
    return q, s, S, covs


def minibatch_stats(params, batch, keep_posterior=True):
    """Responsibility-weighted sums of posterior moments over ``batch``."""
    data = as_dataset(batch)
    if len(data) == 0:
        raise ValueError("empty minibatch")
    X, S, R = data.X, data.S, data.R
    total = None
    for a, b in _chunks(len(data)):
        post = posterior_arrays(params, X[a:b], S[a:b], None if R is None else R[a:b], a)
        stats = MinibatchStats(*_stats_from_posterior(post), n=b - a, posterior=post)
        total = stats if total is None else total.combine(stats)
    if not keep_posterior:
        total = replace(total, posterior=None)
    return total


def accumulate(acc, stats, lam):
    """Blend running sums with a new minibatch: ``(1 - lam) acc + lam stats``."""
    if acc.q_hat.shape != stats.q.shape:
        raise ValueError("component counts differ")
    return SuffStatAccumulator(
        (1 - lam) * acc.q_hat + lam * stats.q,
        (1 - lam) * acc.s_hat + lam * stats.s,
        (1 - lam) * acc.S_hat + lam * stats.S,
    )


def _check_mass(q, batch_size, iteration=None):
    floor = Q_FLOOR * batch_size
    bad = np.flatnonzero(~(q > floor))
    if bad.size:
        j = int(bad[0])
        where = "" if iteration is None else f" at iteration {iteration}"
        raise DegenerateComponentError(
            f"component {j} has responsibility mass {q[j]:.3g}{where}",
            component=j,
            iteration=iteration,
        )


def m_step_naive(acc, batch_size):
    """Parameters straight from normalised sums; cancels badly in low precision."""
    _check_mass(acc.q_hat, batch_size)
    q = acc.q_hat
    m = acc.s_hat / q[:, None]
    V = acc.S_hat / q[:, None, None] - outer(m)
    return GmmParams(q / batch_size, m, V)


def adjust(V, s, c, d):
    """``s (V + c c^T) - d d^T`` evaluated as a symmetric difference of products.

    With ``a = sqrt(s) c`` the outer-product part is
    ``((a - d)(a + d)^T + (a + d)(a - d)^T) / 2``, which avoids forming the two
    large squares separately when ``a`` and ``d`` are close. Leading axes of
    all arguments broadcast.
    """
    s = np.asarray(s)
    a = np.sqrt(s)[..., None] * c
    lo = a - d
    hi = a + d
    return s[..., None, None] * V + 0.5 * (outer(lo, hi) + outer(hi, lo))


def m_step_stable(acc_prev, stats, lam, batch_size, reg_w=0.0, iteration=None):
    """Online M-step with the covariance recentred instead of differenced.

    Returns the new parameters (with ``reg_w * I`` added to each covariance)
    and the updated accumulator, whose ``covs`` hold the unregularised
    covariances for the next step.
    """
    q_prev = acc_prev.q_hat
    m_prev = acc_prev.means
    V_prev = acc_prev.centred_covs()
    q_b = stats.q
    m_b = stats.means
    V_b = stats.covs

    q_t = (1 - lam) * q_prev + lam * q_b
    _check_mass(q_t, batch_size, iteration)
    s_t = (1 - lam) * acc_prev.s_hat + lam * stats.s
    m_t = s_t / q_t[:, None]

    # Both adjustments are expressed relative to the new mean. The combined
    # update is translation invariant, and this removes the first-order error
    # that rounding in m_t would otherwise introduce.
    zero = np.zeros_like(m_t)
    V_t = (1 - lam) * adjust(V_prev, q_prev / q_t, m_prev - m_t, zero) + lam * adjust(
        V_b, q_b / q_t, m_b - m_t, zero
    )
    acc = SuffStatAccumulator(q_t, s_t, q_t[:, None, None] * (V_t + outer(m_t)), V_t)
    covs = V_t + reg_w * np.eye(V_t.shape[-1], dtype=V_t.dtype)
    return GmmParams(q_t / batch_size, m_t, covs), acc


def fit_em(data, init, cfg=EmConfig(), callbacks=(), val_data=None):
    """Fit by batch EM or minibatch online EM.

    Each epoch record holds the mean training log-likelihood after the epoch
    and the cumulative time spent in parameter updates. A failing fit raises
    with the partial report attached as ``exc.report``.
    """
    data = as_dataset(data)
    n = len(data)
    if n == 0:
        raise ValueError("no data")
    init.check()
    method = "batch-em" if cfg.mode == "batch" else "minibatch-em"
    report = FitReport(method=method, config=cfg.to_dict())
    report.initial_train_ll = mean_log_likelihood(init, data)
    rng = np.random.default_rng(cfg.seed)
    params = init
    M = n if cfg.mode == "batch" else min(cfg.batch_size, n)
    acc = SuffStatAccumulator.from_params(init, M)
    schedule = cfg.schedule()
    if cfg.mode == "minibatch" and n % M:
        report.notes.append(
            f"final minibatch of each epoch has {n % M} points; its statistics "
            f"are rescaled to batch size {M}"
        )
    clock = 0.0
    iteration = 0
    try:
        for epoch in range(cfg.epochs):
            start = time.perf_counter()
            if cfg.mode == "batch":
                stats = minibatch_stats(params, data, keep_posterior=False)
                params, acc = m_step_stable(acc, stats, 1.0, n, cfg.reg_w, iteration)
                iteration += 1
            else:
                lam = schedule_value(schedule, epoch)
                perm = rng.permutation(n)
                for a in range(0, n, M):
                    batch = data.subset(perm[a : a + M])
                    stats = minibatch_stats(params, batch, keep_posterior=False)
                    if stats.n != M:
                        stats = stats.scaled(M / stats.n)
                    params, acc = m_step_stable(acc, stats, lam, M, cfg.reg_w, iteration)
                    iteration += 1
            clock += time.perf_counter() - start
            params.check(atol=1e-6)
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
