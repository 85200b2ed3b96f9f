"""Study-level effect measures computed from pairs of standardized curves."""
from __future__ import annotations

import csv
import io
from dataclasses import asdict, dataclass

import numpy as np
from scipy import integrate

from .cox import fit_cox
from .data import Dataset
from .errors import DataError, FitError
from .flexph import FlexPhModel
from .standardize import StandardizedCurve

KINDS = ("risk_difference", "survival_ratio", "marginal_log_hr", "rmst_difference",
         "crude_log_hr", "conditional_log_hr")

# stored as logs, pooled on the log scale and displayed exponentiated
LOG_KINDS = ("marginal_log_hr", "crude_log_hr", "conditional_log_hr")


@dataclass
class ContrastEstimate:
    kind: str
    study: str
    horizon: float | None
    value: float
    se: float = float("nan")
    approach: str = ""

    def __post_init__(self):
        if self.kind not in KINDS:
            raise DataError(f"unknown contrast kind {self.kind!r}")
        if self.se < 0:
            raise DataError("standard error must be nonnegative")

    @property
    def scale(self) -> str:
        return "log" if self.kind in LOG_KINDS else "identity"

    def to_dict(self):
        return asdict(self)


def _values(c, t):
    if isinstance(c, StandardizedCurve):
        return c.at(t)
    raise TypeError("expected a StandardizedCurve")


def _common_grid(c1: StandardizedCurve, c0: StandardizedCurve):
    """Both curves on the union of their grids, restricted to the overlap."""
    if c1.t_grid.shape == c0.t_grid.shape and np.array_equal(c1.t_grid, c0.t_grid):
        return c1.t_grid, c1.survival, c0.survival
    lo = max(c1.t_grid[0], c0.t_grid[0])
    hi = min(c1.t_grid[-1], c0.t_grid[-1])
    t = np.union1d(c1.t_grid, c0.t_grid)
    t = t[(t >= lo) & (t <= hi)]
    return t, np.interp(t, c1.t_grid, c1.survival), np.interp(t, c0.t_grid, c0.survival)


def risk_difference(c1: StandardizedCurve, c0: StandardizedCurve, t: float) -> float:
    """``S1(t) - S0(t)``."""
    return float(_values(c1, t) - _values(c0, t))


def survival_ratio(c1: StandardizedCurve, c0: StandardizedCurve, t: float) -> float:
    s0 = _values(c0, t)
    if s0 <= 0:
        raise DataError(f"reference survival is zero at t={t}")
    return float(_values(c1, t) / s0)


def marginal_hr(c1: StandardizedCurve, c0: StandardizedCurve, window, weighted: bool = False,
                bounds=(1e-6, 1 - 1e-6)) -> float:
    """Constant hazard ratio best matching two curves over ``window``.

    The log HR minimises the squared gap between the log cumulative hazards
    at grid points in ``(0, window]`` where both curves lie inside
    ``bounds``. With ``weighted`` each point is weighted by the probability
    mass the two curves lose around it.
    """
    lo_w, hi_w = (0.0, float(window)) if np.isscalar(window) else (float(window[0]), float(window[1]))
    t, s1, s0 = _common_grid(c1, c0)
    lo, hi = bounds
    ok = (t > lo_w) & (t <= hi_w + 1e-12) & (s1 > lo) & (s1 < hi) & (s0 > lo) & (s0 < hi)
    if not ok.any():
        raise DataError(f"no grid points in window {window} where both curves lie inside {bounds}")
    gap = np.log(-np.log(s1[ok])) - np.log(-np.log(s0[ok]))
    if weighted:
        drop = np.abs(np.gradient(s1, t)) + np.abs(np.gradient(s0, t)) if t.size > 1 else np.ones(t.size)
        w = drop[ok]
        if w.sum() <= 0:
            w = np.ones(gap.size)
        return float(np.exp(np.sum(w * gap) / w.sum()))
    return float(np.exp(gap.mean()))


def rmst_difference(c1: StandardizedCurve, c0: StandardizedCurve, tau: float) -> float:
    """``int_0^tau (S1 - S0) dt`` by the trapezoid rule on the shared grid.

    A curve whose grid starts after 0 is extended with S(0) = 1.
    """
    t, s1, s0 = _common_grid(c1, c0)
    if tau > t[-1] + 1e-12 or tau < 0:
        raise DataError(f"restriction time {tau} outside the curve grid")
    inside = t < tau
    tt = np.concatenate([[0.0] if t[0] > 0 else [], t[inside], [tau]])
    diff = np.concatenate([[0.0] if t[0] > 0 else [], (s1 - s0)[inside], [np.interp(tau, t, s1 - s0)]])
    return float(integrate.trapezoid(diff, tt))


def crude_hr(d: Dataset, s) -> ContrastEstimate:
    """Unadjusted Cox log hazard ratio of exposure within one study (Wald SE)."""
    si = d.study_index(s)
    m = d.study == si
    for e in (0, 1):
        g = m & (d.exposure == e)
        if not g.any():
            raise DataError(f"study {d.study_labels[si]!r} has no patients with exposure {e}")
        if not d.event[g].any():
            raise FitError(f"monotone likelihood: no events with exposure {e} in study {d.study_labels[si]!r}")
    res = fit_cox(d.time[m], d.event[m], d.exposure[m].astype(float), names=("exposure",))
    return ContrastEstimate("crude_log_hr", d.study_labels[si], None, float(res.coef[0]), float(res.se[0]), "crude")


def conditional_hr(m: FlexPhModel, s) -> ContrastEstimate:
    """``psi_s`` with its model-based standard error."""
    value, se = m.conditional_log_hr(s)
    return ContrastEstimate("conditional_log_hr", m.study_labels[m.study_index(s)], None, value, se, "model")


def contrast_table(estimates) -> str:
    """Delimited table: one row per study, one column per (kind, approach, horizon)."""
    estimates = list(estimates)
    studies = list(dict.fromkeys(e.study for e in estimates))
    cols = list(dict.fromkeys((e.kind, e.approach, e.horizon) for e in estimates))
    cell = {(e.study, e.kind, e.approach, e.horizon): e for e in estimates}
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    header = ["study"]
    for kind, approach, horizon in cols:
        tag = f"{kind}[{approach}]" + ("" if horizon is None else f"@{horizon:g}")
        header += [tag, f"{tag}_se"]
    w.writerow(header)
    for s in studies:
        row = [s]
        for key in cols:
            e = cell.get((s, *key))
            row += ["", ""] if e is None else [f"{e.value:.6f}", f"{e.se:.6f}"]
        w.writerow(row)
    return buf.getvalue()
