"""Kaplan-Meier product-limit estimation with Greenwood variance."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import Dataset
from .errors import DataError


@dataclass(frozen=True)
class KmCurve:
    """Step function: ``survival[j]`` holds on ``[times[j], times[j+1])``.

    ``times`` are the distinct observed times; the curve drops only where
    ``n_event > 0``.
    """

    times: np.ndarray
    survival: np.ndarray
    n_risk: np.ndarray
    n_event: np.ndarray
    variance: np.ndarray

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        idx = np.searchsorted(self.times, t, side="right") - 1
        out = np.where(idx >= 0, self.survival[np.maximum(idx, 0)], 1.0)
        return out if out.ndim else float(out)

    def median(self) -> float:
        hit = np.nonzero(self.survival <= 0.5 + 1e-12)[0]
        return float(self.times[hit[0]]) if hit.size else float("nan")


def km_estimate(time, event) -> KmCurve:
    time = np.asarray(time, dtype=float)
    event = np.asarray(event, dtype=int)
    if time.size == 0:
        raise DataError("Kaplan-Meier needs at least one observation")
    times, inverse = np.unique(time, return_inverse=True)
    n_event = np.bincount(inverse, weights=event, minlength=times.size)
    n_total = np.bincount(inverse, minlength=times.size)
    n_risk = n_total[::-1].cumsum()[::-1].astype(float)
    surv = np.cumprod(1.0 - n_event / n_risk)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(n_risk > n_event, n_event / (n_risk * (n_risk - n_event)), 0.0)
    variance = surv**2 * np.cumsum(terms)
    return KmCurve(times, surv, n_risk, n_event.astype(float), variance)


def fit_km(d: Dataset, group) -> KmCurve:
    """Product-limit estimate for one ``(study, exposure)`` group.

    Either member may be None to pool over it.
    """
    study, exposure = group
    m = d.mask(study, exposure)
    if not m.any():
        raise DataError(f"empty group {group!r}")
    return km_estimate(d.time[m], d.event[m])
