"""Forecast accuracy and calibration metrics: MSE, MNLL and coverage."""

from __future__ import annotations

import dataclasses
import json
import math
import warnings

import numpy as np
from scipy.special import logsumexp

from .errors import ContractViolation, EmptyDataError

REPORT_SCHEMA_VERSION = 1


def _mask(mask, shape):
    if mask is None:
        return np.ones(shape, dtype=bool)
    m = np.asarray(mask, dtype=bool)
    if m.shape != shape:
        raise ContractViolation(f"mask shape {m.shape} != {shape}")
    return m


def _observed(truth, mask):
    truth = np.asarray(truth, dtype=np.float64)
    m = _mask(mask, truth.shape) & np.isfinite(truth)
    if not m.any():
        raise EmptyDataError("no unmasked entries to score")
    return truth, m


def mse(pred_mean, truth, mask=None, axis=None):
    """Mean squared error over unmasked entries (per column with ``axis=0``)."""
    pred_mean = np.asarray(pred_mean, dtype=np.float64)
    truth, m = _observed(truth, mask)
    if pred_mean.shape != truth.shape:
        raise ContractViolation(f"prediction shape {pred_mean.shape} != truth shape {truth.shape}")
    sq = np.where(m, (pred_mean - np.where(m, truth, 0.0)) ** 2, 0.0)
    if axis is None:
        return float(sq.sum() / m.sum())
    with np.errstate(invalid="ignore"):
        return sq.sum(axis=axis) / m.sum(axis=axis)


def _entry_nll(ensemble, truth, noise_R):
    """-log (1/S) sum_s N(y; x_s, R_j) for every (n, j)."""
    R = np.broadcast_to(np.asarray(noise_R, dtype=np.float64), truth.shape[-1:])
    ll = -0.5 * (np.log(2 * np.pi * R) + (truth[None] - ensemble) ** 2 / R)
    return -(logsumexp(ll, axis=0) - math.log(ensemble.shape[0]))


def _check_ensemble(ensemble, truth):
    ens = np.asarray(ensemble, dtype=np.float64)
    if ens.ndim == truth.ndim:
        ens = ens[None]
    if ens.shape[0] < 1 or ens.shape[1:] != truth.shape:
        raise ContractViolation(f"ensemble shape {ens.shape} incompatible with truth {truth.shape}")
    return ens


def mnll(ensemble, truth, noise_R, mask=None, axis=None):
    """Mean over unmasked entries of the per-entry mixture negative log-likelihood.

    Each entry's predictive density is the equal-weight mixture of
    N(x_snj, R_j) over the S ensemble members.
    """
    truth, m = _observed(truth, mask)
    ens = _check_ensemble(ensemble, truth)
    nll = np.where(m, _entry_nll(ens, np.where(m, truth, 0.0), noise_R), 0.0)
    if axis is None:
        return float(nll.sum() / m.sum())
    with np.errstate(invalid="ignore"):
        return nll.sum(axis=axis) / m.sum(axis=axis)


def coverage(ensemble, truth, level=0.95, mask=None, noise_R=None, rng=0, mode="quantile", axis=None):
    """Fraction of unmasked truth entries inside the central predictive interval.

    Noise draws N(0, R_j) are added to each ensemble member when ``noise_R`` is
    given. ``mode="quantile"`` uses empirical order-statistic quantiles (linear
    interpolation) at ``(1 -/+ level) / 2``; ``mode="stddev"`` uses mean +/- 2
    predictive standard deviations and ignores ``level``.
    """
    if not 0.0 < level < 1.0:
        raise ContractViolation("coverage level must lie in (0, 1)")
    truth, m = _observed(truth, mask)
    ens = _check_ensemble(ensemble, truth)
    if ens.shape[0] < 20:
        warnings.warn(f"coverage from only {ens.shape[0]} samples is unreliable", stacklevel=2)
    if noise_R is not None:
        gen = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
        R = np.broadcast_to(np.asarray(noise_R, dtype=np.float64), truth.shape[-1:])
        ens = ens + gen.standard_normal(ens.shape) * np.sqrt(R)
    if mode == "quantile":
        lo, hi = np.quantile(ens, [(1 - level) / 2, (1 + level) / 2], axis=0)
    elif mode == "stddev":
        mu, sd = ens.mean(axis=0), ens.std(axis=0)
        lo, hi = mu - 2 * sd, mu + 2 * sd
    else:
        raise ContractViolation(f"unknown coverage mode {mode!r}")
    inside = np.where(m, (truth >= lo) & (truth <= hi), False)
    if axis is None:
        return float(inside.sum() / m.sum())
    with np.errstate(invalid="ignore"):
        return inside.sum(axis=axis) / m.sum(axis=axis)


@dataclasses.dataclass
class MetricsReport:
    mse: float
    mnll: float
    coverage: float
    n_divergent: int
    coverage_level: float = 0.95
    coverage_mode: str = "quantile"
    per_dimension: dict = dataclasses.field(default_factory=dict)
    extra: dict = dataclasses.field(default_factory=dict)

    def __post_init__(self):
        if not 0.0 <= self.coverage <= 1.0 or self.mse < 0:
            raise ContractViolation("invalid metrics report values")

    def to_dict(self):
        out = {
            "schema_version": REPORT_SCHEMA_VERSION,
            "mse": self.mse,
            "mnll": self.mnll,
            "coverage": self.coverage,
            "coverage_level": self.coverage_level,
            "coverage_mode": self.coverage_mode,
            "n_divergent": self.n_divergent,
            "per_dimension": self.per_dimension,
        }
        out.update(self.extra)
        return out


def evaluate_ensemble(ensemble, truth, noise_R, mask=None, level=0.95, mode="quantile", rng=0,
                      n_divergent=0) -> MetricsReport:
    truth = np.asarray(truth, dtype=np.float64)
    ens = _check_ensemble(ensemble, truth)
    mean = ens.mean(axis=0)
    per_dim = {
        "mse": [float(v) for v in mse(mean, truth, mask, axis=0)],
        "mnll": [float(v) for v in mnll(ens, truth, noise_R, mask, axis=0)],
        "coverage": [float(v) for v in coverage(ens, truth, level, mask, noise_R, rng, mode, axis=0)],
    }
    return MetricsReport(
        mse=mse(mean, truth, mask),
        mnll=mnll(ens, truth, noise_R, mask),
        coverage=coverage(ens, truth, level, mask, noise_R, rng, mode),
        n_divergent=int(n_divergent),
        coverage_level=level,
        coverage_mode=mode,
        per_dimension=per_dim,
    )


def _encode(obj, indent, level):
    pad = " " * (indent * (level + 1))
    end = " " * (indent * level)
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = [f"{pad}{json.dumps(str(k))}: {_encode(obj[k], indent, level + 1)}" for k in sorted(obj)]
        return "{\n" + ",\n".join(items) + "\n" + end + "}"
    if isinstance(obj, (list, tuple)):
        if not obj:
            return "[]"
        return "[" + ", ".join(_encode(v, indent, level + 1) for v in obj) + "]"
    if isinstance(obj, bool) or obj is None:
        return {True: "true", False: "false", None: "null"}[obj]
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        if not math.isfinite(v):
            return "null"
        return format(v, ".17g")
    if isinstance(obj, str):
        return json.dumps(obj)
    raise TypeError(f"cannot encode {type(obj).__name__}")


def dumps_report(obj, indent=2) -> str:
    """Stable JSON text: sorted keys, floats at 17 significant digits."""
    return _encode(obj, indent, 0) + "\n"
