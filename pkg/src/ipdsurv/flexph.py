"""
Study-stratified flexible parametric proportional hazards model.

The log cumulative hazard of subject ``i`` in study ``s`` is

    log H_i(t) = zeta_s . v(log t) + beta . Z_i + psi_s * E_i

with ``v`` a natural cubic spline basis shared by all studies. The hazard is
``h = H * (d log H / d log t) / t``; it is only a valid hazard where the
spline slope is positive, so the fit penalises negative slopes and
prediction replaces any residual negative hazard by the smallest positive
fitted hazard.
"""
from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .data import CovariateSchema, Dataset
from .errors import DataError, FitError
from .spline import SplineBasis

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
_FINE_POINTS = 401


@dataclass(frozen=True)
class FitOptions:
    n_internal_knots: int = 1
    penalty_weight: float = 1e3
    penalty_points: int = 101
    max_iter: int = 200
    gtol: float = 1e-6
    ftol: float = 1e-10
    common_psi: bool = False
    covariates: bool = True
    exposure: bool = True

    @classmethod
    def from_dict(cls, doc):
        return cls(**(doc or {}))


@dataclass(frozen=True, eq=False)
class FlexPhModel:
    zeta: np.ndarray
    beta: np.ndarray
    psi: np.ndarray
    basis: SplineBasis
    schema: CovariateSchema
    study_labels: tuple
    tau: np.ndarray
    loglik: float
    converged: bool
    min_observed_hazard: float
    cov: np.ndarray | None = None
    n_iter: int = 0
    grad_norm: float = 0.0
    psi_free: np.ndarray | None = None
    options: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in ("zeta", "beta", "psi", "tau"):
            a = np.array(getattr(self, name), dtype=float)
            a.setflags(write=False)
            object.__setattr__(self, name, a)
        object.__setattr__(self, "zeta", self.zeta.reshape(len(self.study_labels), self.basis.dim))
        if self.psi_free is None:
            object.__setattr__(self, "psi_free", np.ones(self.k, dtype=bool))

    @property
    def k(self) -> int:
        return len(self.study_labels)

    @property
    def theta(self) -> np.ndarray:
        """All parameters in the order zeta (row-major), beta, psi."""
        return np.concatenate([self.zeta.ravel(), self.beta, self.psi])

    def study_index(self, label) -> int:
        if isinstance(label, (int, np.integer)) and not isinstance(label, bool):
            if 0 <= label < self.k:
                return int(label)
            raise DataError(f"unknown study index {label}")
        try:
            return self.study_labels.index(str(label))
        except ValueError:
            raise DataError(f"unknown study {label!r}") from None

    # --- baseline pieces ------------------------------------------------------

    def log_cumhaz_baseline(self, s, t):
        v, _ = self.basis.evaluate(np.log(t))
        return v @ self.zeta[s]

    def slope(self, s, log_t):
        """Derivative of the baseline log cumulative hazard w.r.t. log t."""
        _, dv = self.basis.evaluate(log_t)
        return dv @ self.zeta[s]

    def has_negative_hazard(self, s, t_max) -> bool:
        if self.zeta[s, 1] <= 0:
            return True
        lo, hi = self.basis.boundary_knots
        top = min(np.log(t_max), hi) if t_max > 0 else lo
        if top <= lo:
            return False
        xs = np.append(np.linspace(lo, top, _FINE_POINTS), top)
        return bool(np.any(self.slope(s, xs) <= 0))

    def baseline_pieces(self, s, t):
        """Split the clamped baseline cumulative hazard into ``(A, L)``.

        For a subject with linear predictor ``lp`` the clamped cumulative
        hazard is ``exp(lp) * A(t) + min_observed_hazard * L(t)``: ``A``
        accumulates the baseline increments where the hazard is positive and
        ``L`` the time spent where it is not.
        """
        s = self.study_index(s)
        t = np.asarray(t, dtype=float)
        a = np.zeros(t.shape)
        el = np.zeros(t.shape)
        pos = t > 0
        if not pos.any():
            return a, el
        tp = t[pos]
        t_max = tp.max()
        if not self.has_negative_hazard(s, t_max):
            a[pos] = np.exp(self.log_cumhaz_baseline(s, tp))
            return a, el
        lo, hi = self.basis.boundary_knots
        fine = np.exp(np.linspace(lo, hi, _FINE_POINTS))
        pts = np.unique(np.concatenate([tp, fine[fine <= t_max]]))
        h = np.exp(self.log_cumhaz_baseline(s, pts))
        inc = np.diff(h, prepend=0.0)
        if self.zeta[s, 1] <= 0:
            inc[0] = -1.0
        dt = np.diff(pts, prepend=0.0)
        neg = inc <= 0
        a_cum = np.cumsum(np.where(neg, 0.0, inc))
        l_cum = np.cumsum(np.where(neg, dt, 0.0))
        idx = np.searchsorted(pts, tp)
        a[pos] = a_cum[idx]
        el[pos] = l_cum[idx]
        return a, el

    # --- prediction ---------------------------------------------------------------

    def linear_predictor(self, z, e, psi_study):
        z = np.atleast_2d(np.asarray(z, dtype=float))
        psi = self.psi[np.asarray(psi_study)]
        return z @ self.beta + psi * np.asarray(e, dtype=float)

    def survival_matrix(self, z, e, strata, psi_study, t):
        """Survival for each row of ``z`` (rows) on grid ``t`` (columns).

        ``e``, ``strata`` and ``psi_study`` broadcast against the rows;
        ``strata`` picks the baseline and ``psi_study`` the exposure effect.
        """
        z = np.atleast_2d(np.asarray(z, dtype=float))
        n = z.shape[0]
        t = np.asarray(t, dtype=float)
        strata = np.broadcast_to(np.asarray(strata), (n,))
        lp = np.broadcast_to(self.linear_predictor(z, e, psi_study), (n,))
        out = np.empty((n, t.size))
        for s in np.unique(strata):
            rows = strata == s
            a, el = self.baseline_pieces(int(s), t)
            cum = np.exp(lp[rows])[:, None] * a[None, :] + self.min_observed_hazard * el[None, :]
            out[rows] = np.exp(-cum)
        return out

    def mean_survival(self, z, e, strata, psi_study, t, block: int = 128):
        """Row average of :meth:`survival_matrix`, accumulated in row blocks so
        large populations never materialise the full matrix."""
        z = np.atleast_2d(np.asarray(z, dtype=float))
        n = z.shape[0]
        t = np.asarray(t, dtype=float)
        strata = np.broadcast_to(np.asarray(strata), (n,))
        risk = np.exp(np.broadcast_to(self.linear_predictor(z, e, psi_study), (n,)))
        total = np.zeros(t.size)
        for s in np.unique(strata):
            a, el = self.baseline_pieces(int(s), t)
            floor = self.min_observed_hazard * el
            r = risk[strata == s]
            for i in range(0, r.size, block):
                cum = np.multiply.outer(r[i:i + block], a)
                cum += floor
                np.exp(-cum, out=cum)
                total += cum.sum(axis=0)
        return total / n

    def predict_survival(self, z, e, s, target_psi_study=None, t_grid=()):
        """Survival of one covariate profile in baseline stratum ``s`` with the
        exposure effect of ``target_psi_study`` (defaults to ``s``)."""
        s = self.study_index(s)
        ts = s if target_psi_study is None else self.study_index(target_psi_study)
        z = np.asarray(z, dtype=float).reshape(1, -1)
        if z.shape[1] != len(self.beta):
            raise DataError(f"profile has {z.shape[1]} covariates, model has {len(self.beta)}")
        return self.survival_matrix(z, e, s, ts, t_grid)[0]

    def conditional_log_hr(self, s):
        s = self.study_index(s)
        return float(self.psi[s]), self.psi_se(s)

    def psi_se(self, s) -> float:
        if self.cov is None:
            return float("nan")
        j = self.zeta.size + len(self.beta) + self.study_index(s)
        return float(np.sqrt(max(self.cov[j, j], 0.0)))

    # --- serialization ---------------------------------------------------------------

    def to_dict(self):
        return {
            "schema_version": SCHEMA_VERSION,
            "study_labels": list(self.study_labels),
            "basis": self.basis.to_dict(),
            "centering": self.schema.to_dict(),
            "zeta": self.zeta.tolist(),
            "beta": self.beta.tolist(),
            "psi": self.psi.tolist(),
            "psi_free": [bool(v) for v in self.psi_free],
            "tau": self.tau.tolist(),
            "cov": None if self.cov is None else np.asarray(self.cov).tolist(),
            "min_observed_hazard": self.min_observed_hazard,
            "convergence": {
                "converged": self.converged,
                "loglik": self.loglik,
                "n_iter": self.n_iter,
                "grad_norm": self.grad_norm,
            },
            "options": dict(self.options),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1)

    @classmethod
    def from_dict(cls, doc):
        if doc.get("schema_version") != SCHEMA_VERSION:
            raise DataError(f"unsupported model schema version {doc.get('schema_version')!r}")
        conv = doc["convergence"]
        return cls(
            zeta=np.array(doc["zeta"]),
            beta=np.array(doc["beta"]),
            psi=np.array(doc["psi"]),
            basis=SplineBasis.from_dict(doc["basis"]),
            schema=CovariateSchema.from_dict(doc["centering"]),
            study_labels=tuple(doc["study_labels"]),
            tau=np.array(doc["tau"]),
            loglik=conv["loglik"],
            converged=conv["converged"],
            min_observed_hazard=doc["min_observed_hazard"],
            cov=None if doc["cov"] is None else np.array(doc["cov"]),
            n_iter=conv["n_iter"],
            grad_norm=conv["grad_norm"],
            psi_free=np.array(doc["psi_free"], dtype=bool),
            options=doc.get("options", {}),
        )

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))

    @cached_property
    def _hash(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()[:16]

    def model_hash(self) -> str:
        return self._hash


# --- likelihood ---------------------------------------------------------------------


class Likelihood:
    """Penalised negative log-likelihood over the free parameters.

    The linear predictor and the spline slope are both linear in the
    parameters, ``eta = X theta`` and ``g = D theta``, which keeps the
    gradient and Hessian to a few matrix products.
    """

    def __init__(self, d: Dataset, basis: SplineBasis, options: FitOptions = FitOptions()):
        if np.any(d.time <= 0):
            raise DataError("fitting requires strictly positive times")
        self.d = d
        self.basis = basis
        self.options = options
        k, m = d.k, basis.dim
        self.k, self.m = k, m
        x = np.log(d.time)
        v, dv = basis.evaluate(x)
        onehot = np.zeros((d.n, k))
        onehot[np.arange(d.n), d.study] = 1.0
        blocks_x = [(onehot[:, :, None] * v[:, None, :]).reshape(d.n, k * m)]
        blocks_d = [(onehot[:, :, None] * dv[:, None, :]).reshape(d.n, k * m)]
        names = [f"zeta[{d.study_labels[s]}][{j}]" for s in range(k) for j in range(m)]

        # full parameter vector: zeta, beta, psi; `free` selects the estimated ones
        p = d.p
        free = np.ones(k * m + p + k, dtype=bool)
        if not options.covariates:
            free[k * m:k * m + p] = False
        psi_free = np.zeros(k, dtype=bool)
        if options.exposure:
            for s in range(k):
                e = d.exposure[d.study == s]
                psi_free[s] = e.size > 0 and 0 < e.sum() < e.size
                if not psi_free[s]:
                    log.warning("study %s lacks one exposure level; its exposure effect is fixed at 0",
                                d.study_labels[s])
        free[k * m + p:] = psi_free
        self.psi_free = psi_free
        blocks_x.append(d.z)
        blocks_d.append(np.zeros((d.n, p)))
        names += [f"beta[{nm}]" for nm in d.schema.names]
        blocks_x.append(onehot * d.exposure[:, None])
        blocks_d.append(np.zeros((d.n, k)))
        names += [f"psi[{lab}]" for lab in d.study_labels]
        self.full_x = np.hstack(blocks_x)
        self.full_d = np.hstack(blocks_d)
        self.common_psi = options.common_psi and options.exposure
        if self.common_psi:
            # one shared exposure column replaces the per-study ones
            self.x = np.hstack([self.full_x[:, :k * m + p][:, free[:k * m + p]], d.exposure[:, None].astype(float)])
            self.dmat = np.hstack([self.full_d[:, :k * m + p][:, free[:k * m + p]], np.zeros((d.n, 1))])
            self.names = [nm for nm, f in zip(names[:k * m + p], free[:k * m + p]) if f] + ["psi"]
        else:
            self.x = self.full_x[:, free]
            self.dmat = self.full_d[:, free]
            self.names = [nm for nm, f in zip(names, free) if f]
        self.free = free
        self.logt = x
        self.delta = d.event.astype(float)
        self.events = self.delta > 0

        lo, hi = basis.boundary_knots
        grid = np.linspace(lo, hi, options.penalty_points)
        _, dvg = basis.evaluate(grid)
        g = len(grid)
        pen = np.zeros((k * g, self.x.shape[1]))
        for s in range(k):
            pen[s * g:(s + 1) * g, s * m:(s + 1) * m] = dvg
        self.pen = pen
        self.weight = options.penalty_weight

    @property
    def size(self) -> int:
        return self.x.shape[1]

    def expand(self, theta_free):
        """Map the free parameter vector to ``(zeta, beta, psi)``."""
        k, m, p = self.k, self.m, self.d.p
        full = np.zeros(k * m + p + k)
        if self.common_psi:
            nfree = self.free[:k * m + p].sum()
            full[:k * m + p][self.free[:k * m + p]] = theta_free[:nfree]
            full[k * m + p:] = np.where(self.psi_free, theta_free[-1], 0.0)
        else:
            full[self.free] = theta_free
        return full[:k * m].reshape(k, m), full[k * m:k * m + p], full[k * m + p:]

    def compress(self, zeta, beta, psi):
        k, m, p = self.k, self.m, self.d.p
        full = np.concatenate([np.ravel(zeta), beta, psi])
        if self.common_psi:
            head = full[:k * m + p][self.free[:k * m + p]]
            shared = np.mean(psi[self.psi_free]) if self.psi_free.any() else 0.0
            return np.append(head, shared)
        return full[self.free]

    def loglik(self, theta):
        """Unpenalised log-likelihood (-inf where an event has non-positive hazard)."""
        eta = self.x @ theta
        g = self.dmat[self.events] @ theta
        if np.any(g <= 0):
            return -np.inf
        with np.errstate(over="ignore"):
            cum = np.exp(eta)
        ll = np.sum(eta[self.events] + np.log(g) - self.logt[self.events]) - cum.sum()
        return float(ll) if np.isfinite(ll) else -np.inf

    def penalty(self, theta):
        neg = np.minimum(self.pen @ theta, 0.0)
        return self.weight * float(neg @ neg)

    def objective(self, theta):
        ll = self.loglik(theta)
        if not np.isfinite(ll):
            return np.inf
        return -ll + self.penalty(theta)

    def score(self, theta):
        """Gradient of the unpenalised log-likelihood."""
        eta = self.x @ theta
        g = self.dmat @ theta
        r = self.delta - np.exp(eta)
        with np.errstate(divide="ignore"):
            w = np.where(self.events, self.delta / g, 0.0)
        return self.x.T @ r + self.dmat.T @ w

    def gradient(self, theta):
        neg = np.minimum(self.pen @ theta, 0.0)
        return -self.score(theta) + 2 * self.weight * (self.pen.T @ neg)

    def information(self, theta):
        """Negative Hessian of the unpenalised log-likelihood."""
        eta = self.x @ theta
        g = self.dmat @ theta
        cum = np.exp(eta)
        w = np.where(self.events, self.delta / np.where(self.events, g, 1.0) ** 2, 0.0)
        return (self.x * cum[:, None]).T @ self.x + (self.dmat * w[:, None]).T @ self.dmat

    def hessian(self, theta):
        """Hessian of the penalised objective."""
        active = (self.pen @ theta) < 0
        pa = self.pen[active]
        return self.information(theta) + 2 * self.weight * pa.T @ pa

    def start(self):
        """Per-study least squares of log Nelson-Aalen on the basis; beta = psi = 0."""
        d, basis = self.d, self.basis
        zeta = np.zeros((self.k, self.m))
        for s in range(self.k):
            m = d.study == s
            t, ev = d.time[m], d.event[m]
            order = np.argsort(t, kind="stable")
            t, ev = t[order], ev[order]
            at_risk = np.arange(t.size, 0, -1)
            na = np.cumsum(ev / at_risk)
            sel = (ev == 1) & (na > 0)
            fallback = np.zeros(self.m)
            fallback[0] = np.log(ev.sum() / t.sum())
            fallback[1] = 1.0
            times = np.unique(t[sel])
            if times.size > self.m:
                v, dv = basis.evaluate(np.log(t[sel]))
                coef, *_ = np.linalg.lstsq(v, np.log(na[sel]), rcond=None)
                _, dv_all = basis.evaluate(np.log(t[ev == 1]))
                if np.all(dv_all @ coef > 0) and np.all(np.isfinite(coef)):
                    zeta[s] = coef
                    continue
            zeta[s] = fallback
        return self.compress(zeta, np.zeros(d.p), np.zeros(self.k))


# --- optimizer ------------------------------------------------------------------------


@dataclass
class OptimResult:
    theta: np.ndarray
    fun: float
    grad: np.ndarray
    n_iter: int
    converged: bool


def _inverse_pd(h):
    try:
        c = np.linalg.cholesky(h)
    except np.linalg.LinAlgError:
        w, v = np.linalg.eigh(h)
        w = np.maximum(w, 1e-8 * max(1.0, np.abs(w).max()))
        return (v / w) @ v.T
    ci = np.linalg.inv(c)
    return ci.T @ ci


def minimize_newton(lik: Likelihood, theta0, options: FitOptions) -> OptimResult:
    """Damped Newton-Raphson with Armijo backtracking on the penalised objective.

    Stops when the gradient max-norm drops below ``gtol`` or the relative
    objective change stays below ``ftol`` for two consecutive steps.
    """
    theta = np.array(theta0, dtype=float)
    f = lik.objective(theta)
    if not np.isfinite(f):
        raise FitError("starting values give a non-positive hazard at an event time", theta)
    g = lik.gradient(theta)
    small = 0
    for n in range(1, options.max_iter + 1):
        if np.max(np.abs(g)) < options.gtol:
            return OptimResult(theta, f, g, n - 1, True)
        direction = -_inverse_pd(lik.hessian(theta)) @ g
        slope = g @ direction
        step = 1.0
        while step > 1e-14:
            trial = theta + step * direction
            f_new = lik.objective(trial)
            if f_new <= f + 1e-4 * step * slope:
                break
            step *= 0.5
        else:
            # no representable decrease left along the Newton direction
            return OptimResult(theta, f, g, n, np.max(np.abs(g)) < np.sqrt(options.gtol))
        rel = abs(f - f_new) / max(1.0, abs(f))
        theta, f, g = trial, f_new, lik.gradient(trial)
        small = small + 1 if rel < options.ftol else 0
        if small >= 2:
            return OptimResult(theta, f, g, n, True)
    return OptimResult(theta, f, g, options.max_iter, np.max(np.abs(g)) < options.gtol)


# --- fitting ---------------------------------------------------------------------


def _min_hazard(zeta, beta, psi, d: Dataset, basis: SplineBasis) -> float:
    best = np.inf
    lp = d.z @ beta + psi[d.study] * d.exposure
    for s in range(d.k):
        m = d.study == s
        ev_t = np.unique(d.time[m & (d.event == 1)])
        if ev_t.size == 0:
            continue
        v, dv = basis.evaluate(np.log(ev_t))
        h0 = np.exp(v @ zeta[s]) * (dv @ zeta[s]) / ev_t
        h0 = h0[h0 > 0]
        if h0.size:
            best = min(best, np.exp(lp[m].min()) * h0.min())
    return float(best) if np.isfinite(best) else 1e-12


def fit_flexph(d: Dataset, options: FitOptions = FitOptions(), basis: SplineBasis | None = None,
               init: FlexPhModel | None = None) -> FlexPhModel:
    """Maximum-likelihood fit of the stratified flexible parametric PH model.

    ``basis`` freezes the knots (otherwise they are placed on the pooled log
    event times); ``init`` warm-starts from an earlier fit.
    """
    for s in range(d.k):
        if not np.any((d.study == s) & (d.event == 1)):
            raise FitError(f"study {d.study_labels[s]!r} has no events")
    if basis is None:
        basis = SplineBasis.from_event_times(d.time[d.event == 1], options.n_internal_knots)
    lik = Likelihood(d, basis, options)
    theta0 = None
    if init is not None:
        theta0 = lik.compress(init.zeta, init.beta if options.covariates else np.zeros(d.p),
                              init.psi if options.exposure else np.zeros(d.k))
        if not np.isfinite(lik.objective(theta0)):
            theta0 = None
    if theta0 is None:
        theta0 = lik.start()
    res = minimize_newton(lik, theta0, options)
    if not res.converged:
        raise FitError(
            f"no convergence after {res.n_iter} iterations (gradient max-norm {np.max(np.abs(res.grad)):.3g})",
            res.theta, float(np.max(np.abs(res.grad))),
        )
    zeta, beta, psi = lik.expand(res.theta)
    cov_free = _inverse_pd(lik.hessian(res.theta))
    cov = _expand_cov(lik, cov_free)
    opts = {k: getattr(options, k) for k in options.__dataclass_fields__}
    return FlexPhModel(
        zeta=zeta, beta=beta, psi=psi, basis=basis, schema=d.schema, study_labels=d.study_labels,
        tau=d.tau, loglik=lik.loglik(res.theta), converged=True,
        min_observed_hazard=_min_hazard(zeta, beta, psi, d, basis), cov=cov, n_iter=res.n_iter,
        grad_norm=float(np.max(np.abs(res.grad))), psi_free=lik.psi_free, options=opts,
    )


def _expand_cov(lik: Likelihood, cov_free):
    k, m, p = lik.k, lik.m, lik.d.p
    size = k * m + p + k
    cov = np.zeros((size, size))
    if lik.common_psi:
        head = np.nonzero(lik.free[:k * m + p])[0]
        psi_idx = k * m + p + np.nonzero(lik.psi_free)[0]
        # the shared psi maps onto every free per-study psi slot
        jac = np.zeros((size, lik.size))
        jac[head, np.arange(head.size)] = 1.0
        jac[psi_idx, -1] = 1.0
        return jac @ cov_free @ jac.T
    idx = np.nonzero(lik.free)[0]
    cov[np.ix_(idx, idx)] = cov_free
    return cov
