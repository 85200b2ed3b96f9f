"""
Leave-one-out jackknife standard errors for pipeline estimands.

An estimand is any deterministic callable ``Dataset -> float`` (or 1-d
array). :class:`PipelineEstimand` wraps the usual fit -> standardize ->
contrast chain so replicates can warm-start from the full-data fit with the
spline knots frozen.
"""
from __future__ import annotations

import csv
import io
import logging
import multiprocessing as mp
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from .data import Dataset
from .errors import DataError, FitError, IpdError
from .flexph import FitOptions, FlexPhModel, fit_flexph

log = logging.getLogger(__name__)

REPLICATE_ERRORS = (IpdError, ArithmeticError, np.linalg.LinAlgError)


@dataclass
class JackknifeResult:
    estimate: float | np.ndarray
    se: float | np.ndarray
    replicates: np.ndarray
    failures: int
    n_used: int

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        reps = self.replicates.reshape(len(self.replicates), -1)
        w.writerow(["replicate"] + [f"value{j}" for j in range(reps.shape[1])])
        for i, row in enumerate(reps):
            w.writerow([i] + ["" if np.isnan(v) else repr(float(v)) for v in row])
        return buf.getvalue()


class PipelineEstimand:
    """``statistic(model, dataset)`` evaluated on a fresh flexible PH fit.

    With ``refit=False`` replicates only re-average: the full-data model is
    reused and ``statistic`` is re-evaluated on the reduced dataset.
    """

    def __init__(self, statistic, options: FitOptions = FitOptions(), refit: bool = True,
                 basis=None, init: FlexPhModel | None = None):
        self.statistic = statistic
        self.options = options
        self.refit = refit
        self.basis = basis
        self.init = init

    def fit(self, d: Dataset) -> FlexPhModel:
        if not self.refit and self.init is not None:
            return self.init
        return fit_flexph(d, self.options, basis=self.basis, init=self.init)

    def __call__(self, d: Dataset):
        return self.statistic(self.fit(d), d)

    def prepare(self, d: Dataset):
        """Fit on the full data; returns ``(full_value, frozen_estimand)``."""
        model = fit_flexph(d, self.options, basis=self.basis, init=self.init)
        frozen = PipelineEstimand(self.statistic, self.options, self.refit, model.basis, model)
        return self.statistic(model, d), frozen


# worker-process state, set once per pool by _init_worker
_STATE: dict = {}


def _init_worker(d, estimand, units):
    _STATE.update(d=d, estimand=estimand, units=units)


def _replicate(i, d, estimand, units):
    keep = np.ones(d.n, dtype=bool)
    keep[units[i]] = False
    try:
        return np.atleast_1d(np.asarray(estimand(d.subset(keep)), dtype=float))
    except REPLICATE_ERRORS as exc:
        log.debug("replicate %d failed: %s", i, exc)
        return None


def _run_chunk(indices):
    return [(i, _replicate(i, _STATE["d"], _STATE["estimand"], _STATE["units"])) for i in indices]


def jackknife(d: Dataset, estimand, jobs: int = 1, groups=None, max_failure_rate: float = 0.05,
              chunk_size: int | None = None) -> JackknifeResult:
    """Delete-one jackknife of ``estimand`` over subjects (or over ``groups``).

    Replicates run on ``jobs`` worker processes and are reduced in unit
    order, so the result does not depend on scheduling.
    """
    if d.n < 3:
        raise DataError("jackknife needs at least 3 subjects")
    if hasattr(estimand, "prepare"):
        full, estimand = estimand.prepare(d)
    else:
        full = estimand(d)
    full = np.atleast_1d(np.asarray(full, dtype=float))
    if groups is None:
        units = [np.array([i]) for i in range(d.n)]
    else:
        groups = np.asarray(groups)
        if groups.shape != (d.n,):
            raise DataError("groups must give one label per subject")
        units = [np.nonzero(groups == g)[0] for g in dict.fromkeys(groups.tolist())]
    n_units = len(units)
    reps = np.full((n_units, full.size), np.nan)
    ok = np.zeros(n_units, dtype=bool)

    if jobs <= 1:
        results = ((i, _replicate(i, d, estimand, units)) for i in range(n_units))
    else:
        size = chunk_size or max(1, n_units // (jobs * 4))
        chunks = [list(range(a, min(a + size, n_units))) for a in range(0, n_units, size)]
        ctx = mp.get_context("fork") if "fork" in mp.get_all_start_methods() else None
        with ProcessPoolExecutor(max_workers=jobs, mp_context=ctx, initializer=_init_worker,
                                 initargs=(d, estimand, units)) as pool:
            results = [r for chunk in pool.map(_run_chunk, chunks) for r in chunk]
    for i, value in results:
        if value is not None and value.shape == full.shape and np.all(np.isfinite(value)):
            reps[i] = value
            ok[i] = True

    failures = int(n_units - ok.sum())
    if failures > max_failure_rate * n_units:
        raise FitError(f"{failures} of {n_units} jackknife replicates failed")
    if failures:
        warnings.warn(f"{failures} of {n_units} jackknife replicates failed; SE uses the rest",
                      RuntimeWarning, stacklevel=2)
    used = reps[ok]
    n = used.shape[0]
    se = np.sqrt((n - 1) / n * np.sum((used - used.mean(axis=0)) ** 2, axis=0))
    if full.size == 1:
        return JackknifeResult(float(full[0]), float(se[0]), reps[:, 0], failures, n)
    return JackknifeResult(full, se, reps, failures, n)


def delta_method_se(model: FlexPhModel, d: Dataset, statistic, step: float = 1e-5):
    """Model-based SE of ``statistic(model, d)`` by a finite-difference delta method.

    Vector statistics give a vector of SEs. Used as a cheap alternative to,
    and a comparison value for, jackknife SEs.
    """
    if model.cov is None:
        raise DataError("model carries no covariance matrix")
    theta = model.theta
    k, m, p = model.k, model.basis.dim, len(model.beta)
    free = np.nonzero(np.diag(model.cov) > 0)[0]
    size = np.atleast_1d(np.asarray(statistic(model, d), dtype=float)).size
    jac = np.zeros((size, theta.size))

    def at(th):
        return replace(model, zeta=th[:k * m].reshape(k, m), beta=th[k * m:k * m + p], psi=th[k * m + p:])

    for j in free:
        e = np.zeros(theta.size)
        e[j] = step * max(1.0, abs(theta[j]))
        hi = np.atleast_1d(np.asarray(statistic(at(theta + e), d), dtype=float))
        lo = np.atleast_1d(np.asarray(statistic(at(theta - e), d), dtype=float))
        jac[:, j] = (hi - lo) / (2 * e[j])
    se = np.sqrt(np.maximum(np.einsum("ij,jk,ik->i", jac, model.cov, jac), 0.0))
    return float(se[0]) if size == 1 else se
