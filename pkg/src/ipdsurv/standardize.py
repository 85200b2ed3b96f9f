"""
Standardized (g-computation) survival curves from a fitted model.

Every marginal curve is an exact empirical mean of model-based conditional
survival curves; the approaches differ only in who is averaged over and
which baseline / exposure effect each person is given:

======== ====================== ================ =================
approach population             baseline         exposure effect
======== ====================== ================ =================
0        study s, observed E=e  study s          own (observed E)
A        study s                study s          study s, set e
B        all studies            study s          study s, set e
C        all studies            own study        study s, set e
D        all studies with E=j   study s          study s, set e
======== ====================== ================ =================
"""
from __future__ import annotations

import csv
import io
import json
import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize

from .data import Dataset
from .errors import DataError
from .flexph import FlexPhModel

log = logging.getLogger(__name__)

APPROACHES = ("0", "A", "B", "C", "D")


@dataclass(frozen=True, eq=False)
class StandardizedCurve:
    approach: str
    target_study: str
    set_exposure: int | None
    reference: str
    t_grid: np.ndarray
    survival: np.ndarray
    extrapolated: np.ndarray
    reference_exposure: int | None = None
    n_reference: int = 0
    model_hash: str = ""

    def at(self, t):
        """Linear interpolation of the curve at ``t`` (inside the grid only)."""
        t = np.asarray(t, dtype=float)
        if np.any(t < self.t_grid[0] - 1e-12) or np.any(t > self.t_grid[-1] + 1e-12):
            raise DataError(f"time {t} outside the curve grid [{self.t_grid[0]}, {self.t_grid[-1]}]")
        out = np.interp(t, self.t_grid, self.survival)
        return out if out.ndim else float(out)

    @property
    def key(self) -> str:
        parts = [self.approach, self.target_study]
        if self.set_exposure is not None:
            parts.append(f"e{self.set_exposure}")
        if self.reference_exposure is not None:
            parts.append(f"j{self.reference_exposure}")
        return "/".join(parts)

    def to_dict(self):
        return {
            "approach": self.approach,
            "target_study": self.target_study,
            "set_exposure": self.set_exposure,
            "reference_exposure": self.reference_exposure,
            "reference": self.reference,
            "n_reference": self.n_reference,
            "model_hash": self.model_hash,
            "t_grid": [float(v) for v in self.t_grid],
            "survival": [float(v) for v in self.survival],
            "extrapolated": [bool(v) for v in self.extrapolated],
        }

    @classmethod
    def from_dict(cls, doc):
        return cls(doc["approach"], doc["target_study"], doc["set_exposure"], doc["reference"],
                   np.array(doc["t_grid"]), np.array(doc["survival"]), np.array(doc["extrapolated"], dtype=bool),
                   doc.get("reference_exposure"), doc.get("n_reference", 0), doc.get("model_hash", ""))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["time", "survival", "extrapolated"])
        for t, s, x in zip(self.t_grid, self.survival, self.extrapolated):
            w.writerow([f"{t:.6g}", f"{s:.10f}", int(x)])
        return buf.getvalue()

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


@dataclass(frozen=True)
class CovariateProfile:
    z: np.ndarray
    provenance: str = "explicit"
    quantile: float | None = None
    subject_id: str | None = None


def _check(m: FlexPhModel, d: Dataset):
    if tuple(m.schema.names) != tuple(d.schema.names):
        raise DataError("dataset covariates do not match the model")
    if not np.allclose(m.schema.offsets, d.schema.offsets, rtol=0, atol=1e-9):
        raise DataError("dataset centering differs from the centering stored with the model")
    if tuple(m.study_labels) != tuple(d.study_labels):
        raise DataError("dataset studies do not match the model")


def _grid(t_grid):
    t = np.asarray(t_grid, dtype=float)
    if t.ndim != 1 or t.size == 0 or np.any(np.diff(t) < 0) or t[0] < 0:
        raise DataError("time grid must be a nonempty, sorted, nonnegative vector")
    return t


def _mean_curve(m, z, e, strata, psi_study, t):
    curve = m.mean_survival(z, e, strata, psi_study, t)
    assert np.all(np.diff(curve) <= 1e-12) and np.all((curve >= 0) & (curve <= 1))
    return curve


def _curve(m, approach, s, e, reference, t, surv, tau, n, j=None):
    return StandardizedCurve(approach, m.study_labels[s], e, reference, t, surv, t > tau + 1e-9,
                             j, int(n), m.model_hash())


def standardize_0(m: FlexPhModel, d: Dataset, s, e, t_grid) -> StandardizedCurve:
    """Mean over the observed (s, e) subgroup, each keeping its own exposure."""
    _check(m, d)
    s = d.study_index(s)
    t = _grid(t_grid)
    rows = (d.study == s) & (d.exposure == int(e))
    if not rows.any():
        raise DataError(f"empty subgroup: study {d.study_labels[s]!r}, exposure {e}")
    curve = _mean_curve(m, d.z[rows], d.exposure[rows], s, s, t)
    return _curve(m, "0", s, int(e), f"study {d.study_labels[s]}, observed exposure {int(e)}",
                  t, curve, m.tau[s], rows.sum())


def standardize_A(m: FlexPhModel, d: Dataset, s, e, t_grid) -> StandardizedCurve:
    """Whole study ``s`` with exposure set to ``e``."""
    _check(m, d)
    s = d.study_index(s)
    t = _grid(t_grid)
    rows = d.study == s
    if not rows.any():
        raise DataError(f"study {d.study_labels[s]!r} has no records")
    curve = _mean_curve(m, d.z[rows], e, s, s, t)
    return _curve(m, "A", s, int(e), f"study {d.study_labels[s]}", t, curve, m.tau[s], rows.sum())


def standardize_B(m: FlexPhModel, d: Dataset, s, e, t_grid) -> StandardizedCurve:
    """All patients moved to study ``s`` (its baseline and exposure effect)."""
    _check(m, d)
    s = d.study_index(s)
    t = _grid(t_grid)
    curve = _mean_curve(m, d.z, e, s, s, t)
    return _curve(m, "B", s, int(e), "all studies", t, curve, m.tau[s], d.n)


def standardize_C(m: FlexPhModel, d: Dataset, s, e, t_grid) -> StandardizedCurve:
    """All patients keep their own baseline; only study ``s``'s exposure effect is transported."""
    _check(m, d)
    s = d.study_index(s)
    t = _grid(t_grid)
    curve = _mean_curve(m, d.z, e, d.study, s, t)
    tau = np.nanmin(m.tau[np.unique(d.study)])
    return _curve(m, "C", s, int(e), "all studies, own baselines", t, curve, tau, d.n)


def standardize_D(m: FlexPhModel, d: Dataset, s, e, j, t_grid) -> StandardizedCurve:
    """Patients of all studies with observed exposure ``j``, moved to study ``s`` with exposure set to ``e``."""
    _check(m, d)
    s = d.study_index(s)
    t = _grid(t_grid)
    rows = d.exposure == int(j)
    if not rows.any():
        raise DataError(f"no patients with exposure {j}")
    curve = _mean_curve(m, d.z[rows], e, s, s, t)
    return _curve(m, "D", s, int(e), f"all studies, observed exposure {int(j)}", t, curve, m.tau[s],
                  rows.sum(), int(j))


def standardize(m: FlexPhModel, d: Dataset, approach: str, s, e, t_grid, j=None) -> StandardizedCurve:
    approach = str(approach).upper()
    if approach == "0":
        return standardize_0(m, d, s, e, t_grid)
    if approach == "A":
        return standardize_A(m, d, s, e, t_grid)
    if approach == "B":
        return standardize_B(m, d, s, e, t_grid)
    if approach == "C":
        return standardize_C(m, d, s, e, t_grid)
    if approach == "D":
        return standardize_D(m, d, s, e, e if j is None else j, t_grid)
    raise DataError(f"unknown approach {approach!r}; expected one of {', '.join(APPROACHES)}")


def standardize_profile(m: FlexPhModel, profile: CovariateProfile, s, e, t_grid) -> StandardizedCurve:
    """Conditional curve of a single covariate profile; no averaging."""
    s = m.study_index(s)
    t = _grid(t_grid)
    z = np.asarray(profile.z, dtype=float)
    if z.size != len(m.beta):
        raise DataError(f"profile has {z.size} covariates, model has {len(m.beta)}")
    surv = m.predict_survival(z, e, s, s, t)
    ref = profile.provenance if profile.quantile is None else f"prognostic score q={profile.quantile:g}"
    return _curve(m, "profile", s, int(e), ref, t, surv, m.tau[s], 1)


def select_profile(m: FlexPhModel, d: Dataset, q: float) -> CovariateProfile:
    """Covariates of the real patient at the ``q`` quantile of ``beta . Z``.

    Uses the lower nearest rank, ``floor(q * (n - 1))``; ties go to the first
    patient in data order.
    """
    if not 0 < q < 1:
        raise DataError("quantile must lie strictly between 0 and 1")
    if d.n == 0:
        raise DataError("empty dataset")
    scores = d.z @ m.beta
    order = np.argsort(scores, kind="stable")
    i = order[int(np.floor(q * (d.n - 1)))]
    return CovariateProfile(d.z[i].copy(), "prognostic-score quantile", q, str(d.subject_ids[i]))


# --- positivity ----------------------------------------------------------------------------


@dataclass
class PositivityReport:
    columns: list
    rows: list
    flagged: list = field(default_factory=list)
    warnings: list = field(default_factory=list)

    def to_text(self) -> str:
        lines = ["\t".join(self.columns)]
        for r in self.rows:
            lines.append("\t".join(f"{v:.4f}" if isinstance(v, float) else str(v) for v in r))
        for w in self.warnings:
            lines.append(f"# warning: {w}")
        return "\n".join(lines) + "\n"


def _multinomial_propensity(x, y, k):
    """Softmax regression of study membership; first study is the reference."""
    n, p = x.shape
    onehot = np.zeros((n, k))
    onehot[np.arange(n), y] = 1.0

    def unpack(w):
        return np.vstack([np.zeros(p), w.reshape(k - 1, p)])

    def loss(w):
        eta = x @ unpack(w).T
        lse = np.logaddexp.reduce(eta, axis=1)
        prob = np.exp(eta - lse[:, None])
        val = np.sum(lse) - np.sum(eta * onehot)
        grad = ((prob - onehot).T @ x)[1:]
        return val, grad.ravel()

    res = optimize.minimize(loss, np.zeros((k - 1) * p), jac=True, method="L-BFGS-B",
                            options={"maxiter": 1000, "gtol": 1e-8})
    eta = x @ unpack(res.x).T
    prob = np.exp(eta - np.logaddexp.reduce(eta, axis=1)[:, None])
    return prob, res


def positivity_diagnostic(d: Dataset, floor: float = 0.01) -> PositivityReport:
    """Propensity of membership in each study, summarised per (study, exposure).

    Subgroups whose 5th-percentile propensity for some target study falls
    below ``floor`` are flagged; nothing here blocks the analysis.
    """
    if d.k < 2:
        raise DataError("positivity diagnostic needs at least two studies")
    report_warnings = []
    if d.p == 0:
        share = np.bincount(d.study, minlength=d.k) / d.n
        prob = np.tile(share, (d.n, 1))
    else:
        sd = d.z.std(axis=0)
        sd[sd == 0] = 1.0
        x = np.column_stack([np.ones(d.n), (d.z - d.z.mean(axis=0)) / sd])
        prob, res = _multinomial_propensity(x, d.study, d.k)
        if not res.success or prob.min() < 1e-6 or np.max(np.abs(res.x)) > 15:
            msg = "possible separation: study membership is (nearly) determined by the covariates"
            warnings.warn(msg, RuntimeWarning, stacklevel=2)
            report_warnings.append(msg)
    columns = ["study", "exposure", "target_study", "n", "min", "q5", "median", "q95", "max", "flag"]
    rows, flagged = [], []
    for s in range(d.k):
        for e in (0, 1):
            m = (d.study == s) & (d.exposure == e)
            for target in range(d.k):
                if not m.any():
                    rows.append([d.study_labels[s], e, d.study_labels[target], 0] + [float("nan")] * 5 + [""])
                    continue
                pr = prob[m, target]
                qs = np.quantile(pr, [0.05, 0.5, 0.95])
                flag = bool(qs[0] < floor)
                rows.append([d.study_labels[s], e, d.study_labels[target], int(m.sum()), float(pr.min()),
                             float(qs[0]), float(qs[1]), float(qs[2]), float(pr.max()), "LOW" if flag else ""])
                if flag:
                    flagged.append((d.study_labels[s], e, d.study_labels[target]))
    if flagged:
        log.warning("positivity: %d (study, exposure, target) combinations below floor %g", len(flagged), floor)
    return PositivityReport(columns, rows, flagged, report_warnings)
