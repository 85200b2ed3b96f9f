"""
Stratified Cox partial likelihood with Breslow ties.

Used for the censoring-informativeness diagnostic (censoring treated as the
event) and for the crude per-study hazard ratios.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import stats

from .data import Dataset
from .errors import DataError, FitError


@dataclass(frozen=True)
class CoxResult:
    names: tuple
    coef: np.ndarray
    cov: np.ndarray
    loglik: float
    n_iter: int

    @property
    def se(self):
        return np.sqrt(np.diag(self.cov))

    def hr_table(self, scales=None, level=0.95):
        """Rows of ``(name, per, hr, lo, hi)``; ``scales`` maps a covariate to
        the increment its HR is reported for (e.g. 10 for age per decade)."""
        scales = scales or {}
        zq = stats.norm.ppf(0.5 + level / 2)
        rows = []
        for name, b, se in zip(self.names, self.coef, self.se):
            per = float(scales.get(name, 1.0))
            rows.append((name, per, float(np.exp(per * b)), float(np.exp(per * (b - zq * se))),
                         float(np.exp(per * (b + zq * se)))))
        return rows


def partial_loglik(beta, time, event, x, strata=None, derivatives=True):
    """Breslow log partial likelihood and, optionally, its score and information."""
    beta = np.asarray(beta, dtype=float)
    x = np.asarray(x, dtype=float).reshape(len(time), -1)
    strata = np.zeros(len(time), dtype=int) if strata is None else np.asarray(strata)
    p = x.shape[1]
    ll, score, info = 0.0, np.zeros(p), np.zeros((p, p))
    for s in np.unique(strata):
        m = strata == s
        t, ev, xs = time[m], event[m], x[m]
        order = np.argsort(-t, kind="stable")
        t, ev, xs = t[order], ev[order], xs[order]
        eta = xs @ beta
        shift = eta.max()
        w = np.exp(eta - shift)
        s0 = np.cumsum(w)
        # risk set of a time = every row up to its last tie in descending order
        last = np.searchsorted(-t, -t, side="right") - 1
        evm = ev == 1
        if not evm.any():
            continue
        d_times, first = np.unique(t[evm], return_index=True)
        ev_idx = np.nonzero(evm)[0]
        # per distinct event time: tie count, covariate sum and risk-set index
        inv = np.searchsorted(d_times, t[evm])
        d_count = np.bincount(inv, minlength=d_times.size)
        x_sum = np.zeros((d_times.size, p))
        np.add.at(x_sum, inv, xs[evm])
        r_idx = np.zeros(d_times.size, dtype=int)
        r_idx[inv] = last[ev_idx]
        ll += float(np.sum(x_sum @ beta) - np.sum(d_count * (np.log(s0[r_idx]) + shift)))
        if derivatives:
            s1 = np.cumsum(w[:, None] * xs, axis=0)
            s2 = np.cumsum(w[:, None, None] * xs[:, :, None] * xs[:, None, :], axis=0)
            xbar = s1[r_idx] / s0[r_idx, None]
            score += np.sum(x_sum - d_count[:, None] * xbar, axis=0)
            second = s2[r_idx] / s0[r_idx, None, None] - xbar[:, :, None] * xbar[:, None, :]
            info += np.sum(d_count[:, None, None] * second, axis=0)
    if derivatives:
        return ll, score, info
    return ll


def fit_cox(time, event, x, strata=None, names=None, max_iter=50, tol=1e-9) -> CoxResult:
    """Newton-Raphson maximisation of the Breslow partial likelihood."""
    time = np.asarray(time, dtype=float)
    event = np.asarray(event, dtype=int)
    x = np.asarray(x, dtype=float).reshape(len(time), -1)
    p = x.shape[1]
    names = tuple(names) if names is not None else tuple(f"x{j}" for j in range(p))
    if event.sum() == 0:
        raise FitError("no events: partial likelihood is flat")
    beta = np.zeros(p)
    ll, score, info = partial_loglik(beta, time, event, x, strata)
    for it in range(1, max_iter + 1):
        try:
            step = np.linalg.solve(info, score)
        except np.linalg.LinAlgError:
            raise FitError("singular information matrix (collinear or constant covariate)", beta) from None
        ll_new = -np.inf
        half = 1.0
        while half > 1e-10:
            trial = beta + half * step
            ll_new = partial_loglik(trial, time, event, x, strata, derivatives=False)
            if ll_new >= ll - 1e-12:
                break
            half *= 0.5
        beta = trial
        converged = abs(ll_new - ll) < tol * max(1.0, abs(ll)) and np.max(np.abs(half * step)) < 1e-6
        ll, score, info = partial_loglik(beta, time, event, x, strata)
        if np.max(np.abs(beta)) > 30:
            raise FitError("monotone likelihood: coefficients diverge", beta)
        if converged or np.max(np.abs(score)) < 1e-10:
            cov = np.linalg.inv(info)
            if np.any(np.sqrt(np.abs(np.diag(cov))) > 1e3):
                raise FitError("monotone likelihood: a coefficient is unbounded", beta)
            return CoxResult(names, beta, cov, ll, it)
    raise FitError(f"Cox fit did not converge in {max_iter} iterations", beta, float(np.max(np.abs(score))))


def censoring_diagnostic(d: Dataset) -> CoxResult:
    """Cox model for the censoring times, stratified by study, on Z and E.

    Hazard ratios above one mean the covariate shortens follow-up.
    """
    censored = 1 - d.event
    if censored.sum() == 0:
        raise DataError("no censored observations: censoring model is undefined")
    x = np.column_stack([d.z, d.exposure])
    names = (*d.schema.names, "exposure")
    return fit_cox(d.time, censored, x, strata=d.study, names=names)
