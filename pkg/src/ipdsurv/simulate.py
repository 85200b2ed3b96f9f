"""
Synthetic multi-study survival data with a known generating model.

Each study has its own Weibull baseline ``S0(t) = exp(-(t / scale)^shape)``,
its own exposure effect ``psi_s`` and its own covariate mix; covariate
effects are shared. Censoring combines an administrative horizon with an
exponential censoring time whose log-rate depends on the covariates.

Random numbers come from numpy's counter-based Philox generator, consumed in
a fixed order, so a seed fully determines the dataset on every platform.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import integrate

from .contrast import marginal_hr
from .data import BINARY, CONTINUOUS, CovariateSchema, Dataset
from .errors import DataError
from .standardize import StandardizedCurve

COVARIATES = ("z", "x")


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(int(seed) % 2**64))


def _per_study(value, k, name):
    arr = np.atleast_1d(np.asarray(value, dtype=float))
    if arr.size == 1:
        arr = np.repeat(arr, k)
    if arr.size != k:
        raise DataError(f"{name} needs 1 or {k} values, got {arr.size}")
    return tuple(float(v) for v in arr)


@dataclass(frozen=True)
class ScenarioSpec:
    """Generating model for :func:`generate`.

    Covariates: ``z ~ N(z_mean_s, 1)`` and ``x ~ Bernoulli(binary_prob_s)``.
    Exposure: ``logit P(E=1) = logit(exposure_prob_s) + confounding * (z - z_mean_s + x - binary_prob_s)``.
    Censoring: exponential with rate ``censor_rate_s * exp(censor_coef . (z, x))``,
    then administrative at ``tau_s``.
    """

    n: tuple
    shape: tuple = (1.0,)
    scale: tuple = (50.0,)
    beta: tuple = (0.5, 0.5)
    psi: tuple = (0.0,)
    binary_prob: tuple = (0.5,)
    z_mean: tuple = (0.0,)
    exposure_prob: tuple = (0.5,)
    confounding: float = 0.0
    censor_rate: tuple = (0.0,)
    censor_coef: tuple = (0.0, 0.0)
    tau: tuple = (float("inf"),)
    seed: int = 0
    labels: tuple = ()

    def __post_init__(self):
        n = tuple(int(v) for v in np.atleast_1d(self.n))
        k = len(n)
        object.__setattr__(self, "n", n)
        for name in ("shape", "scale", "psi", "binary_prob", "z_mean", "exposure_prob", "censor_rate", "tau"):
            object.__setattr__(self, name, _per_study(getattr(self, name), k, name))
        object.__setattr__(self, "beta", _per_study(self.beta, 2, "beta"))
        object.__setattr__(self, "censor_coef", _per_study(self.censor_coef, 2, "censor_coef"))
        labels = tuple(str(v) for v in self.labels) or tuple(f"S{s + 1}" for s in range(k))
        if len(labels) != k:
            raise DataError("one label per study required")
        object.__setattr__(self, "labels", labels)
        if min(n) <= 0 or min(self.shape) <= 0 or min(self.scale) <= 0 or min(self.tau) <= 0:
            raise DataError("sizes, Weibull shapes/scales and horizons must be positive")
        if not all(0 <= p <= 1 for p in self.binary_prob + self.exposure_prob):
            raise DataError("probabilities must lie in [0, 1]")

    @property
    def k(self) -> int:
        return len(self.n)

    @classmethod
    def from_dict(cls, doc):
        doc = dict(doc)
        for key, val in doc.items():
            if isinstance(val, list):
                doc[key] = tuple(val)
        return cls(**doc)

    def to_dict(self):
        out = asdict(self)
        out["tau"] = [None if np.isinf(v) else v for v in self.tau]
        return out


@dataclass(frozen=True, eq=False)
class TruthRecord:
    """Generating parameters plus the realised covariates, exposures and event times."""

    spec: ScenarioSpec
    study: np.ndarray
    exposure: np.ndarray
    z: np.ndarray
    latent_time: np.ndarray = field(repr=False)

    def cumhaz(self, t, z, e, s, psi_study=None):
        """True cumulative hazard, rows of ``z`` against grid ``t``."""
        sp = self.spec
        t = np.asarray(t, dtype=float)
        z = np.atleast_2d(z)
        s = np.broadcast_to(np.asarray(s), (z.shape[0],))
        ps = s if psi_study is None else np.broadcast_to(np.asarray(psi_study), (z.shape[0],))
        shape = np.asarray(sp.shape)[s]
        scale = np.asarray(sp.scale)[s]
        lp = z @ np.asarray(sp.beta) + np.asarray(sp.psi)[ps] * np.broadcast_to(e, (z.shape[0],))
        return (t[None, :] / scale[:, None]) ** shape[:, None] * np.exp(lp)[:, None]

    def survival(self, t, z, e, s, psi_study=None):
        return np.exp(-self.cumhaz(t, z, e, s, psi_study))

    def curve(self, approach: str, s: int, e: int, t, j: int | None = None):
        """True standardized curve: the approach's average applied to closed-form survival."""
        approach = str(approach).upper()
        t = np.asarray(t, dtype=float)
        if approach == "0":
            rows = (self.study == s) & (self.exposure == e)
            return self.survival(t, self.z[rows], self.exposure[rows], s).mean(axis=0)
        if approach == "A":
            rows = self.study == s
            return self.survival(t, self.z[rows], e, s).mean(axis=0)
        if approach == "B":
            return self.survival(t, self.z, e, s).mean(axis=0)
        if approach == "C":
            return self.survival(t, self.z, e, self.study, s).mean(axis=0)
        if approach == "D":
            rows = self.exposure == (e if j is None else j)
            return self.survival(t, self.z[rows], e, s).mean(axis=0)
        raise DataError(f"unknown approach {approach!r}")

    def to_dict(self):
        return {"spec": self.spec.to_dict(), "n": int(self.study.size)}


def generate(spec: ScenarioSpec):
    """Draw a dataset; returns ``(Dataset, TruthRecord)`` with raw (uncentered) covariates."""
    rng = make_rng(spec.seed)
    beta = np.asarray(spec.beta)
    gamma = np.asarray(spec.censor_coef)
    cols = {k: [] for k in ("study", "e", "z", "x", "t", "c")}
    for s in range(spec.k):
        n = spec.n[s]
        z = rng.normal(spec.z_mean[s], 1.0, n)
        x = (rng.random(n) < spec.binary_prob[s]).astype(float)
        p0 = spec.exposure_prob[s]
        if p0 in (0.0, 1.0):
            e = np.full(n, int(p0))
            rng.random(n)
        else:
            logit = np.log(p0 / (1 - p0)) + spec.confounding * (z - spec.z_mean[s] + x - spec.binary_prob[s])
            e = (rng.random(n) < 1 / (1 + np.exp(-logit))).astype(int)
        lp = beta[0] * z + beta[1] * x + spec.psi[s] * e
        t = spec.scale[s] * (rng.exponential(1.0, n) / np.exp(lp)) ** (1 / spec.shape[s])
        draw = rng.exponential(1.0, n)
        rate = spec.censor_rate[s] * np.exp(gamma[0] * z + gamma[1] * x)
        with np.errstate(divide="ignore"):
            c = np.where(rate > 0, draw / np.where(rate > 0, rate, 1.0), np.inf)
        cols["study"].append(np.full(n, s))
        cols["e"].append(e)
        cols["z"].append(z)
        cols["x"].append(x)
        cols["t"].append(t)
        cols["c"].append(np.minimum(c, spec.tau[s]))
    study = np.concatenate(cols["study"])
    e = np.concatenate(cols["e"])
    zmat = np.column_stack([np.concatenate(cols["z"]), np.concatenate(cols["x"])])
    latent = np.concatenate(cols["t"])
    cens = np.concatenate(cols["c"])
    time = np.minimum(latent, cens)
    event = (latent <= cens).astype(int)
    schema = CovariateSchema(COVARIATES, (CONTINUOUS, BINARY))
    ids = [f"{spec.labels[s]}-{i + 1}" for s in range(spec.k) for i in range(spec.n[s])]
    d = Dataset(ids, study, e, zmat, time, event, schema, spec.labels)
    return d, TruthRecord(spec, study, e, zmat, latent)


TRUE_KINDS = ("risk_difference", "survival_ratio", "rmst_difference", "marginal_log_hr", "conditional_log_hr")


def true_contrast(truth: TruthRecord, kind: str, approach: str, s: int, t: float, j: int | None = None,
                  grid_points: int = 2001) -> float:
    """Exact (or fine-grid numerical) value of a contrast of exposure 1 vs 0.

    ``t`` is the time point for risk differences and ratios, the restriction
    time for RMST and the window end for the marginal HR.
    """
    if kind not in TRUE_KINDS:
        raise DataError(f"no true value available for contrast {kind!r}")
    if kind == "conditional_log_hr":
        return float(truth.spec.psi[s])
    def c(e, tt):
        return truth.curve(approach, s, e, tt, j)
    if kind == "risk_difference":
        return float(c(1, [t])[0] - c(0, [t])[0])
    if kind == "survival_ratio":
        return float(c(1, [t])[0] / c(0, [t])[0])
    grid = np.linspace(0.0, t, grid_points)
    if kind == "rmst_difference":
        return float(integrate.trapezoid(c(1, grid) - c(0, grid), grid))
    curves = [StandardizedCurve(str(approach), truth.spec.labels[s], e, "truth", grid, c(e, grid),
                                np.zeros(grid.size, bool)) for e in (1, 0)]
    return float(np.log(marginal_hr(curves[0], curves[1], t)))


def truth_json(truth: TruthRecord) -> str:
    return json.dumps(truth.to_dict(), sort_keys=True, indent=1)
