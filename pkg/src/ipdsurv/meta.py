"""
Two-stage pooling of study-level estimates.

DerSimonian-Laird between-study variance, optional Knapp-Hartung t-based
interval and a Riley-type prediction interval for a new study.
"""
from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .errors import DataError

Z975 = 1.959964


@dataclass(frozen=True)
class MetaInput:
    values: np.ndarray
    se: np.ndarray
    labels: tuple
    scale: str = "identity"
    sizes: np.ndarray | None = None

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        se = np.asarray(self.se, dtype=float)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "se", se)
        object.__setattr__(self, "labels", tuple(str(v) for v in self.labels))
        if self.sizes is not None:
            object.__setattr__(self, "sizes", np.asarray(self.sizes, dtype=float))
        if self.scale not in ("identity", "log"):
            raise DataError(f"unknown scale {self.scale!r}")
        if not (values.shape == se.shape == (len(self.labels),)):
            raise DataError("values, standard errors and labels must have equal length")
        if np.any(~np.isfinite(values)) or np.any(~(se > 0)):
            raise DataError("every study needs a finite value and a positive standard error")

    @property
    def k(self) -> int:
        return len(self.values)

    @property
    def variances(self):
        return self.se**2

    def subset(self, keep):
        keep = np.asarray(keep)
        return MetaInput(self.values[keep], self.se[keep], tuple(np.array(self.labels)[keep]), self.scale,
                         None if self.sizes is None else self.sizes[keep])


@dataclass
class MetaResult:
    pooled: float
    se: float
    ci95: tuple
    tau2: float
    q: float
    i2: float
    weights: np.ndarray
    k: int
    random_effects: bool
    knapp_hartung: bool
    scale: str = "identity"
    prediction_interval: tuple | None = None
    pi_note: str = ""
    labels: tuple = ()
    notes: list = field(default_factory=list)

    def display(self, value):
        return float(np.exp(value)) if self.scale == "log" else float(value)

    @property
    def pooled_display(self):
        return self.display(self.pooled)

    @property
    def ci_display(self):
        return tuple(self.display(v) for v in self.ci95)

    @property
    def pi_display(self):
        if self.prediction_interval is None:
            return None
        return tuple(self.display(v) for v in self.prediction_interval)

    def to_dict(self):
        return {
            "pooled": self.pooled,
            "se": self.se,
            "ci95": list(self.ci95),
            "tau2": self.tau2,
            "q": self.q,
            "i2": self.i2,
            "weights": [float(w) for w in self.weights],
            "k": self.k,
            "random_effects": self.random_effects,
            "knapp_hartung": self.knapp_hartung,
            "scale": self.scale,
            "prediction_interval": None if self.prediction_interval is None else list(self.prediction_interval),
            "pi_note": self.pi_note,
            "labels": list(self.labels),
            "display": {
                "pooled": self.pooled_display,
                "ci95": list(self.ci_display),
                "prediction_interval": None if self.pi_display is None else list(self.pi_display),
            },
        }


def _q_stat(y, v):
    w = 1.0 / v
    ybar = np.sum(w * y) / np.sum(w)
    return float(np.sum(w * (y - ybar) ** 2)), w


def dl_tau2(inputs: MetaInput) -> float:
    """DerSimonian-Laird moment estimate of the between-study variance."""
    if inputs.k < 2:
        raise DataError("need at least two studies")
    q, w = _q_stat(inputs.values, inputs.variances)
    c = np.sum(w) - np.sum(w**2) / np.sum(w)
    return float(max(0.0, (q - (inputs.k - 1)) / c))


def i_squared(q: float, k: int) -> float:
    if q <= 0:
        return 0.0
    return float(max(0.0, (q - (k - 1)) / q) * 100.0)


def pool(inputs: MetaInput, re: bool = True, kh: bool = True, kh_truncate: bool = False,
         prediction: bool = True, weighting: str = "inverse_variance") -> MetaResult:
    """Pool study estimates.

    ``weighting="sample_size"`` weights studies by ``inputs.sizes`` instead of
    inverse variances (the variance of the pooled value is then the
    corresponding weighted-sum variance).
    """
    k = inputs.k
    if k < 2:
        raise DataError("pooling needs at least two studies")
    y, v = inputs.values, inputs.variances
    q, _ = _q_stat(y, v)
    tau2 = dl_tau2(inputs) if re else 0.0
    if weighting == "inverse_variance":
        w = 1.0 / (v + tau2)
        pooled = float(np.sum(w * y) / np.sum(w))
        var = 1.0 / np.sum(w)
    elif weighting == "sample_size":
        if inputs.sizes is None:
            raise DataError("sample-size weighting needs study sizes")
        w = inputs.sizes.astype(float)
        pooled = float(np.sum(w * y) / np.sum(w))
        var = float(np.sum(w**2 * (v + tau2)) / np.sum(w) ** 2)
    else:
        raise DataError(f"unknown weighting {weighting!r}")
    if kh:
        # Knapp-Hartung: inflate the variance by the weighted residual dispersion
        w_iv = 1.0 / (v + tau2)
        scale = float(np.sum(w_iv * (y - pooled) ** 2) / (k - 1))
        var_kh = scale * var
        if kh_truncate:
            var_kh = max(var_kh, var)
        se = float(np.sqrt(var_kh))
        crit = stats.t.ppf(0.975, k - 1)
    else:
        se = float(np.sqrt(var))
        crit = stats.norm.ppf(0.975)
    res = MetaResult(
        pooled=pooled, se=se, ci95=(pooled - crit * se, pooled + crit * se), tau2=tau2, q=q,
        i2=i_squared(q, k), weights=w / np.sum(w), k=k, random_effects=re, knapp_hartung=kh,
        scale=inputs.scale, labels=inputs.labels,
    )
    if prediction:
        res.prediction_interval, res.pi_note = prediction_interval(res, k)
    return res


def prediction_interval(r: MetaResult, k: int):
    """``pooled +/- t_{k-2} sqrt(tau2 + se^2)``; ``(None, reason)`` when k < 3."""
    if k < 3:
        return None, "prediction interval needs at least 3 studies"
    half = stats.t.ppf(0.975, k - 2) * np.sqrt(r.tau2 + r.se**2)
    return (r.pooled - half, r.pooled + half), ""


def se_from_ci(lo: float, hi: float, scale: str = "identity") -> float:
    """Standard error implied by a symmetric 95% interval."""
    if scale == "log":
        if not (lo > 0 and hi > 0):
            raise DataError("log-scale interval bounds must be positive")
        f_lo, f_hi = np.log(lo), np.log(hi)
    elif scale == "identity":
        f_lo, f_hi = lo, hi
    else:
        raise DataError(f"unknown scale {scale!r}")
    if hi < lo:
        raise DataError(f"interval upper bound {hi} below lower bound {lo}")
    if hi == lo:
        warnings.warn("degenerate interval: standard error is 0", RuntimeWarning, stacklevel=2)
        return 0.0
    return float((f_hi - f_lo) / (2 * Z975))


def read_meta_csv(path, delimiter: str = ",") -> dict:
    """Published aggregate estimates, columns ``study,value,lo,hi,scale`` with
    an optional ``estimand`` column grouping rows into separate analyses.

    Values and bounds are given on the display scale (ratios, not logs).
    """
    groups: dict = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh, delimiter=delimiter)
        need = {"study", "value", "lo", "hi", "scale"}
        missing = need - set(reader.fieldnames or [])
        if missing:
            raise DataError(f"aggregate file lacks columns: {', '.join(sorted(missing))}")
        for row in reader:
            line = reader.line_num
            try:
                value, lo, hi = float(row["value"]), float(row["lo"]), float(row["hi"])
            except ValueError:
                raise DataError("non-numeric value or bound", line) from None
            scale = row["scale"].strip()
            key = (row.get("estimand") or "estimate").strip()
            g = groups.setdefault(key, {"labels": [], "values": [], "se": [], "scale": scale})
            if g["scale"] != scale:
                raise DataError(f"mixed scales within estimand {key!r}", line)
            g["labels"].append(row["study"].strip())
            g["values"].append(np.log(value) if scale == "log" else value)
            g["se"].append(se_from_ci(lo, hi, scale))
    return {key: MetaInput(np.array(g["values"]), np.array(g["se"]), tuple(g["labels"]), g["scale"])
            for key, g in groups.items()}


def result_json(results: dict) -> str:
    return json.dumps({k: r.to_dict() for k, r in results.items()}, sort_keys=True, indent=1)
