"""Datasets of noisy observations: CSV ingestion, splits, synthetic data."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import GmmParams, NoisyPoint, NotPositiveDefiniteError, XDError, check_psd

MISSING_VARIANCE = 1e12
NOISELESS_VARIANCE = 1e-2


class DataError(XDError):
    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


@dataclass(frozen=True)
class Dataset:
    """Observations ``X`` (N, d_obs), noise covariances ``S`` (N, d_obs, d_obs)
    and optional projections ``R`` (N, d_obs, d_latent); ``R=None`` is the
    identity."""

    X: np.ndarray
    S: np.ndarray
    R: np.ndarray | None = None
    names: tuple = ()
    has_noise: tuple = ()

    def __post_init__(self):
        X = np.asarray(self.X)
        S = np.asarray(self.S)
        if X.ndim != 2:
            raise ValueError(f"X must be 2-D, got shape {X.shape}")
        n, d = X.shape
        if S.shape != (n, d, d):
            raise ValueError(f"S has shape {S.shape}, expected {(n, d, d)}")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "S", S)
        if self.R is not None:
            R = np.asarray(self.R)
            if R.ndim == 2:
                R = np.broadcast_to(R, (n,) + R.shape)
            if R.shape[:2] != (n, d):
                raise ValueError(f"R has shape {R.shape}, expected ({n}, {d}, *)")
            object.__setattr__(self, "R", R)
        object.__setattr__(self, "names", tuple(self.names))
        object.__setattr__(self, "has_noise", tuple(self.has_noise))

    def __len__(self):
        return self.X.shape[0]

    @property
    def d_obs(self):
        return self.X.shape[1]

    @property
    def d_latent(self):
        return self.d_obs if self.R is None else self.R.shape[2]

    @property
    def points(self):
        for i in range(len(self)):
            yield NoisyPoint(self.X[i], self.S[i], None if self.R is None else self.R[i])

    def subset(self, idx):
        return Dataset(
            self.X[idx],
            self.S[idx],
            None if self.R is None else self.R[idx],
            self.names,
            self.has_noise,
        )

    def check(self):
        for i, S in enumerate(self.S):
            try:
                check_psd(S)
            except NotPositiveDefiniteError as exc:
                raise DataError(f"point {i}: {exc}") from None
        return self

    @classmethod
    def from_points(cls, points):
        points = list(points)
        if not points:
            raise ValueError("no points")
        X = np.stack([p.x for p in points])
        S = np.stack([p.S for p in points])
        Rs = [p.R for p in points]
        if all(R is None for R in Rs):
            R = None
        else:
            R = np.stack([np.eye(p.d_obs) if p.R is None else p.R for p in points])
        return cls(X, S, R)


def as_dataset(data):
    if isinstance(data, Dataset):
        return data
    if isinstance(data, NoisyPoint):
        return Dataset.from_points([data])
    return Dataset.from_points(data)


@dataclass(frozen=True)
class Schema:
    """Column layout of a CSV catalogue.

    ``columns`` lists feature names in order; ``has_noise`` flags which of
    them carry an ``<name>_err`` column. ``projection`` optionally gives one
    d_obs x d_latent matrix shared by every row.
    """

    columns: tuple
    has_noise: dict = field(default_factory=dict)
    d_latent: int | None = None
    projection: list | None = None

    def __post_init__(self):
        object.__setattr__(self, "columns", tuple(self.columns))
        flags = {c: bool(self.has_noise.get(c, True)) for c in self.columns}
        object.__setattr__(self, "has_noise", flags)
        if self.d_latent is None:
            d_latent = (
                len(self.columns) if self.projection is None else len(self.projection[0])
            )
            object.__setattr__(self, "d_latent", d_latent)
        if self.projection is None and self.d_latent != len(self.columns):
            raise DataError("d_latent differs from column count but no projection given")

    @classmethod
    def load(cls, path):
        obj = json.loads(Path(path).read_text())
        return cls(
            obj["columns"],
            obj.get("has_noise", {}),
            obj.get("d_latent"),
            obj.get("projection"),
        )

    def to_dict(self):
        out = {
            "columns": list(self.columns),
            "has_noise": dict(self.has_noise),
            "d_latent": self.d_latent,
        }
        if self.projection is not None:
            out["projection"] = self.projection
        return out

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")


def _is_missing(field_):
    s = field_.strip()
    return s == "" or s.lower() == "nan"


def _parse(field_, name, line):
    try:
        value = float(field_)
    except ValueError:
        raise DataError(f"non-numeric value {field_!r} in column {name!r}", line) from None
    if math.isnan(value):
        return None
    return value


def _corr_column(header_index, a, b):
    for key in (f"{a}_{b}_corr", f"{b}_{a}_corr"):
        if key in header_index:
            return header_index[key]
    return None


def load_csv(path, schema):
    """Read a catalogue into a ``Dataset``.

    A missing value (empty field or NaN) becomes 0 with variance 1e12 and no
    correlations. A column without noise gets variance 1e-2. A present value
    whose ``_err`` is missing is treated as missing.
    """
    if not isinstance(schema, Schema):
        schema = Schema.load(schema)
    cols = schema.columns
    d = len(cols)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError("empty file", 1) from None
        index = {name.strip(): k for k, name in enumerate(header)}
        for c in cols:
            if c not in index:
                raise DataError(f"missing column {c!r}", 1)
            if schema.has_noise[c] and f"{c}_err" not in index:
                raise DataError(f"missing column {c}_err", 1)
        corr_cols = {}
        for a in range(d):
            for b in range(a + 1, d):
                k = _corr_column(index, cols[a], cols[b])
                if k is not None:
                    corr_cols[a, b] = k

        xs, Ss = [], []
        for row in reader:
            line = reader.line_num
            if not row:
                continue
            if len(row) != len(header):
                raise DataError(
                    f"expected {len(header)} fields, found {len(row)}", line
                )
            x = np.zeros(d)
            S = np.zeros((d, d))
            sigma = np.full(d, np.nan)
            for k, c in enumerate(cols):
                raw = row[index[c]]
                value = None if _is_missing(raw) else _parse(raw, c, line)
                err = None
                if value is not None and schema.has_noise[c]:
                    raw_err = row[index[f"{c}_err"]]
                    err = None if _is_missing(raw_err) else _parse(raw_err, f"{c}_err", line)
                    if err is not None and err < 0:
                        raise DataError(f"negative error in column {c}_err", line)
                    if err is None:
                        value = None
                if value is None:
                    S[k, k] = MISSING_VARIANCE
                elif schema.has_noise[c]:
                    x[k] = value
                    S[k, k] = err * err
                    sigma[k] = err
                else:
                    x[k] = value
                    S[k, k] = NOISELESS_VARIANCE
            for (a, b), k in corr_cols.items():
                if np.isnan(sigma[a]) or np.isnan(sigma[b]) or _is_missing(row[k]):
                    continue
                rho = _parse(row[k], header[k], line)
                if rho is None:
                    continue
                if not -1.0 <= rho <= 1.0:
                    raise DataError(f"correlation {rho} outside [-1, 1]", line)
                S[a, b] = S[b, a] = rho * sigma[a] * sigma[b]
            try:
                check_psd(S)
            except NotPositiveDefiniteError as exc:
                raise DataError(str(exc), line) from None
            xs.append(x)
            Ss.append(S)
    if not xs:
        raise DataError("no data rows", 2)
    X = np.array(xs)
    S = np.array(Ss)
    R = None if schema.projection is None else np.asarray(schema.projection, dtype=float)
    return Dataset(X, S, R, cols, tuple(schema.has_noise[c] for c in cols))


def _exact_factor(v0, matches):
    """Search a few ulps around ``v0`` for a value accepted by ``matches``."""
    candidates = [v0]
    lo = hi = v0
    for _ in range(4):
        lo = np.nextafter(lo, -np.inf)
        hi = np.nextafter(hi, np.inf)
        candidates += [lo, hi]
    for v in candidates:
        if matches(v):
            return v
    return v0


def _fmt(v):
    return repr(float(v))


def write_csv(data, path, schema):
    """Write ``data`` in the layout ``load_csv`` reads.

    Values are chosen so that reloading reproduces ``X`` and ``S`` bit for bit
    whenever the noise was itself produced from standard deviations and
    correlations.
    """
    cols = schema.columns
    d = len(cols)
    if data.d_obs != d:
        raise DataError(f"dataset has {data.d_obs} columns, schema {d}")
    header = []
    for c in cols:
        header.append(c)
        if schema.has_noise[c]:
            header.append(f"{c}_err")
    pairs = [(a, b) for a in range(d) for b in range(a + 1, d)]
    has_corr = [
        (a, b)
        for a, b in pairs
        if schema.has_noise[cols[a]] and schema.has_noise[cols[b]]
        and np.any(data.S[:, a, b] != 0)
    ]
    header += [f"{cols[a]}_{cols[b]}_corr" for a, b in has_corr]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for x, S in zip(data.X, data.S):
            row = []
            sigma = np.full(d, np.nan)
            for k, c in enumerate(cols):
                missing = x[k] == 0 and S[k, k] == MISSING_VARIANCE
                if missing:
                    row.append("")
                    if schema.has_noise[c]:
                        row.append("")
                    continue
                row.append(_fmt(x[k]))
                if schema.has_noise[c]:
                    var = S[k, k]
                    s = _exact_factor(math.sqrt(var), lambda v: v * v == var)
                    sigma[k] = s
                    row.append(_fmt(s))
                elif S[k, k] != NOISELESS_VARIANCE:
                    raise DataError(
                        f"column {c!r} is noiseless but has variance {S[k, k]!r}"
                    )
            for a, b in has_corr:
                if np.isnan(sigma[a]) or np.isnan(sigma[b]) or S[a, b] == 0:
                    row.append("")
                    continue
                sa, sb = sigma[a], sigma[b]
                cov = S[a, b]
                rho = _exact_factor(cov / (sa * sb), lambda v: v * sa * sb == cov)
                row.append(_fmt(rho))
            w.writerow(row)


def split(data, fractions=(0.8, 0.1, 0.1), seed=0):
    """Shuffle with ``seed`` and cut into contiguous parts of the given sizes."""
    fractions = np.asarray(fractions, dtype=float)
    if np.any(fractions <= 0) or abs(fractions.sum() - 1.0) > 1e-9:
        raise ValueError(f"fractions must be positive and sum to 1, got {fractions}")
    n = len(data)
    raw = fractions * n
    sizes = np.floor(raw + 1e-9).astype(int)
    remainder = n - sizes.sum()
    # largest remainder first; ties go to the earlier part
    order = np.argsort(-(raw - sizes), kind="stable")
    sizes[order[:remainder]] += 1
    if np.any(sizes == 0):
        raise ValueError(f"split of {n} rows by {fractions.tolist()} leaves an empty part")
    perm = np.random.default_rng(seed).permutation(n)
    bounds = np.cumsum(sizes)[:-1]
    return tuple(data.subset(np.sort(idx)) for idx in np.split(perm, bounds))


def _psd_sqrt(S):
    w, U = np.linalg.eigh(S)
    return U * np.sqrt(np.clip(w, 0.0, None))


def generate_synthetic(truth, n, seed=0, noise_cov=None, sigma_range=None, projection=None):
    """Draw ``x = R v + eps`` with ``v`` from ``truth``.

    Noise is either a fixed covariance ``noise_cov`` or independent per-axis
    standard deviations drawn uniformly from ``sigma_range`` for each point.
    Returns ``(dataset, truth)``.
    """
    rng = np.random.default_rng(seed)
    v, _ = _draw(truth, n, rng)
    if projection is not None:
        R = np.asarray(projection, dtype=float)
        x = v @ R.T
    else:
        R = None
        x = v
    d_obs = x.shape[1]
    if sigma_range is not None:
        lo, hi = sigma_range
        sigma = rng.uniform(lo, hi, size=(n, d_obs))
        S = np.zeros((n, d_obs, d_obs))
        idx = np.arange(d_obs)
        S[:, idx, idx] = sigma * sigma
        x = x + sigma * rng.standard_normal((n, d_obs))
    else:
        S0 = np.zeros((d_obs, d_obs)) if noise_cov is None else np.asarray(noise_cov, float)
        A = _psd_sqrt(S0)
        x = x + rng.standard_normal((n, d_obs)) @ A.T
        S = np.broadcast_to(S0, (n, d_obs, d_obs)).copy()
    names = tuple(f"x{k}" for k in range(d_obs))
    data = Dataset(x, S, R, names, (True,) * d_obs)
    return data, truth


def _draw(params, n, rng):
    labels = rng.choice(params.K, size=n, p=params.alpha / params.alpha.sum())
    L = np.linalg.cholesky(params.covs)
    z = rng.standard_normal((n, params.d))
    v = params.means[labels] + np.einsum("nij,nj->ni", L[labels], z)
    return v, labels


def sample_model(params, n, seed=0, return_labels=False):
    """Ancestral samples from the mixture: a component, then its Gaussian."""
    v, labels = _draw(params, n, np.random.default_rng(seed))
    return (v, labels) if return_labels else v


def three_blobs(d=3):
    """A well-separated three-component mixture used by ``gen --preset``."""
    if d < 2:
        raise ValueError("three_blobs needs d >= 2")
    alpha = np.array([0.5, 0.3, 0.2])
    means = np.zeros((3, d))
    means[1, :2] = (8.0, 6.0)
    means[2, :2] = (-7.0, 5.0)
    if d > 2:
        means[2, 2] = 6.0
    covs = np.stack([np.eye(d) * s for s in (1.0, 0.5, 1.5)])
    covs[0, 0, 1] = covs[0, 1, 0] = 0.6
    covs[1, 0, 1] = covs[1, 1, 0] = -0.2
    return GmmParams(alpha, means, covs).check()


PRESETS = {"three-blobs": three_blobs}
