"""
Command-line front end: ``ipdsurv <command> [--config run.yaml] [overrides]``.

Commands read and write artifacts in one output directory::

    validate     validation.json
    describe     describe.csv, describe.txt, positivity.txt
    censor       censored.csv (administrative censoring at censor_tau)
    fit          model.json, model_summary.csv
    standardize  curves.json, curves.csv                   (needs model.json)
    contrast     contrasts.json, contrasts.csv             (needs model.json, curves.json)
    pool         pooled.json, pooled.csv                   (needs contrasts.json, or --aggregate)
    forest       forest_<kind>.svg, forest.txt             (needs pooled.json)
    simulate     data.csv, truth.json
    run          validate .. forest in sequence

Exit codes: 0 success, 2 missing upstream artifact, 3 invalid config or
data, 4 numerical failure. Failures print one JSON line on stderr.
"""
from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import io
import json
import logging
import sys
import warnings
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from .contrast import (
    LOG_KINDS, ContrastEstimate, conditional_hr, crude_hr, marginal_hr, risk_difference, rmst_difference,
    survival_ratio,
)
from .data import (
    ColumnMapping, Dataset, administrative_censor, center_covariates, describe, load_dataset, write_dataset,
)
from .errors import DataError, FitError, IpdError, MissingArtifactError
from .flexph import FitOptions, FlexPhModel, fit_flexph
from .forest import ForestPanel, render_forest
from .meta import MetaInput, MetaResult, pool, read_meta_csv
from .simulate import ScenarioSpec, generate, truth_json
from .standardize import APPROACHES, StandardizedCurve, positivity_diagnostic, standardize
from .uncertainty import PipelineEstimand, delta_method_se, jackknife

log = logging.getLogger("ipdsurv")

EXIT_OK, EXIT_MISSING, EXIT_INVALID, EXIT_NUMERICAL = 0, 2, 3, 4
CURVE_KINDS = ("risk_difference", "survival_ratio", "marginal_log_hr", "rmst_difference")
STANDARD_COLUMNS = {"study": "study", "exposure": "exposure", "time": "time", "event": "event", "subject_id": "id"}
# settings that cannot change any number in the outputs stay out of the hash
UNHASHED = ("input", "output", "jobs")


@dataclass
class RunConfig:
    input: str | None = None
    columns: dict | None = None
    delimiter: str = ","
    approaches: tuple = APPROACHES
    times: tuple = (12.0, 24.0, 36.0)
    hr_windows: tuple = (36.0, 60.0)
    rmst_horizons: tuple = ()
    estimands: tuple = ("risk_difference", "marginal_log_hr")
    reference_exposure: int = 1
    censor_tau: float | None = None
    grid_points: int = 200
    follow_up: str = "reverse_km"
    fit: dict = field(default_factory=dict)
    pool: dict = field(default_factory=lambda: {"random_effects": True, "knapp_hartung": True,
                                                "kh_truncate": False, "prediction": True})
    uncertainty: dict = field(default_factory=lambda: {"method": "jackknife", "refit": True,
                                                       "max_failure_rate": 0.05})
    jobs: int = 1
    output: str = "ipdsurv-out"
    seed: int = 0
    simulate: dict | None = None

    @classmethod
    def from_dict(cls, doc) -> "RunConfig":
        doc = dict(doc or {})
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(doc) - known)
        if unknown:
            raise DataError(f"unknown config keys: {', '.join(unknown)}")
        base = cls()
        for key in ("pool", "uncertainty"):
            if key in doc:
                doc[key] = {**getattr(base, key), **(doc[key] or {})}
        for key in ("approaches", "times", "hr_windows", "rmst_horizons", "estimands"):
            if key in doc:
                doc[key] = tuple(doc[key] or ())
        cfg = cls(**doc)
        cfg.validate()
        return cfg

    def validate(self):
        self.approaches = tuple(str(a).upper() for a in self.approaches)
        bad = [a for a in self.approaches if a not in APPROACHES]
        if bad or not self.approaches:
            raise DataError(f"approaches must be a nonempty subset of {', '.join(APPROACHES)}")
        self.estimands = tuple(self.estimands)
        if not self.estimands or any(e not in CURVE_KINDS for e in self.estimands):
            raise DataError(f"estimands must be a nonempty subset of {', '.join(CURVE_KINDS)}")
        for name in ("times", "hr_windows", "rmst_horizons"):
            vals = tuple(float(v) for v in getattr(self, name))
            if any(not v > 0 for v in vals):
                raise DataError(f"{name} must be positive")
            setattr(self, name, vals)
        if "risk_difference" in self.estimands or "survival_ratio" in self.estimands:
            if not self.times:
                raise DataError("risk differences and ratios need at least one time point")
        if "marginal_log_hr" in self.estimands and not self.hr_windows:
            raise DataError("marginal hazard ratios need at least one window")
        if "rmst_difference" in self.estimands and not self.rmst_horizons:
            raise DataError("RMST differences need at least one horizon")
        if self.censor_tau is not None and not float(self.censor_tau) > 0:
            raise DataError("censor_tau must be positive")
        if self.reference_exposure not in (0, 1):
            raise DataError("reference_exposure must be 0 or 1")
        if int(self.grid_points) < 2:
            raise DataError("grid_points must be at least 2")
        if self.uncertainty.get("method") not in ("jackknife", "delta", "none"):
            raise DataError("uncertainty.method must be jackknife, delta or none")
        FitOptions.from_dict(self.fit)

    def to_dict(self):
        out = asdict(self)
        for key, val in out.items():
            if isinstance(val, tuple):
                out[key] = list(val)
        return out

    @property
    def hash(self) -> str:
        doc = {k: v for k, v in self.to_dict().items() if k not in UNHASHED}
        return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()[:16]

    @property
    def horizon(self) -> float:
        return max(self.times + self.hr_windows + self.rmst_horizons)

    def grid(self, event_times=()):
        """0, ``grid_points`` equally spaced times up to the horizon, the
        requested time points and every observed event time inside."""
        h = self.horizon
        ev = np.asarray(event_times, dtype=float)
        t = np.concatenate([[0.0], np.linspace(h / int(self.grid_points), h, int(self.grid_points)),
                            self.times + self.hr_windows + self.rmst_horizons, ev[ev <= h]])
        return np.unique(t)


# --- config assembly ---------------------------------------------------------------------------


def _set_path(doc, dotted, value):
    keys = dotted.split(".")
    node = doc
    for k in keys[:-1]:
        node = node.setdefault(k, {})
        if not isinstance(node, dict):
            raise DataError(f"cannot set {dotted!r}: {k!r} is not a section")
    node[keys[-1]] = value


def load_config(args) -> tuple[RunConfig, Path]:
    """Config file (if any) overlaid with command-line flags; relative paths
    in the file resolve against the file's directory."""
    doc, root = {}, Path.cwd()
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise MissingArtifactError(f"config file {path} not found")
        try:
            doc = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
        except yaml.YAMLError as exc:
            raise DataError(f"config is not valid YAML: {exc}".replace("\n", " ")) from None
        if not isinstance(doc, dict):
            raise DataError("config must be a mapping")
        root = path.resolve().parent
        for key in ("input", "output"):
            if doc.get(key):
                doc[key] = str(root / doc[key])
    doc = copy.deepcopy(doc)
    flags = {
        "input": args.input, "output": args.output, "jobs": args.jobs, "seed": args.seed,
        "censor_tau": args.censor_tau,
        "approaches": _csv_list(args.approaches), "times": _csv_list(args.times, float),
        "hr_windows": _csv_list(args.hr_windows, float), "estimands": _csv_list(args.estimands),
    }
    for key, val in flags.items():
        if val is not None:
            doc[key] = val
    if args.fixed_effects:
        _set_path(doc, "pool.random_effects", False)
    if args.no_kh:
        _set_path(doc, "pool.knapp_hartung", False)
    if args.no_pi:
        _set_path(doc, "pool.prediction", False)
    if args.se_method:
        _set_path(doc, "uncertainty.method", args.se_method)
    for item in args.set or ():
        if "=" not in item:
            raise DataError(f"--set expects key=value, got {item!r}")
        key, raw = item.split("=", 1)
        _set_path(doc, key.strip(), yaml.safe_load(raw))
    return RunConfig.from_dict(doc), root


def _csv_list(text, cast=str):
    if text is None:
        return None
    return [cast(v.strip()) for v in text.split(",") if v.strip()]


# --- artifact I/O -----------------------------------------------------------------------------


class Run:
    """One command invocation: config, output directory and provenance."""

    def __init__(self, cfg: RunConfig, command: str):
        self.cfg = cfg
        self.command = command
        self.out = Path(cfg.output)
        self.written: list = []
        self.data_hash = None
        self.model_hash = None

    def provenance(self):
        return {"config_hash": self.cfg.hash, "data_hash": self.data_hash, "model_hash": self.model_hash,
                "version": __version__}

    def _stamp(self):
        p = self.provenance()
        return " ".join(f"{k}={p[k]}" for k in sorted(p))

    def write(self, name, text):
        self.out.mkdir(parents=True, exist_ok=True)
        path = self.out / name
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        self.written.append(name)

    def write_json(self, name, doc):
        doc = {**doc, "provenance": self.provenance()}
        self.write(name, json.dumps(doc, sort_keys=True, indent=1, allow_nan=True) + "\n")

    def write_csv(self, name, text):
        self.write(name, f"# {self._stamp()}\n{text}")

    def write_svg(self, name, svg):
        head, rest = svg.split("\n", 1)
        self.write(name, f"{head}\n<!-- {self._stamp()} -->\n{rest}")

    def read_json(self, name, producer):
        path = self.out / name
        if not path.is_file():
            raise MissingArtifactError(f"{path} not found; run `ipdsurv {producer}` first")
        return json.loads(path.read_text(encoding="utf-8"))

    # --- data and model ----------------------------------------------------------------

    def mapping(self, path) -> ColumnMapping:
        cols = dict(self.cfg.columns or {})
        if not cols.get("covariates") or cols.get("binary") == "auto":
            header, rows = _peek(path, self.cfg.delimiter)
            for key, default in STANDARD_COLUMNS.items():
                cols.setdefault(key, default if default in header else None)
            used = {cols[k] for k in STANDARD_COLUMNS}
            if not cols.get("covariates"):
                cols["covariates"] = [h for h in header if h not in used]
            if cols.get("binary") in (None, "auto"):
                cols["binary"] = [c for c in cols["covariates"] if _looks_binary(rows, header.index(c))]
        try:
            return ColumnMapping.from_dict(cols)
        except TypeError as exc:
            raise DataError(f"bad column mapping: {exc}") from None

    def dataset(self, censor: bool = True) -> Dataset:
        if not self.cfg.input:
            raise DataError("no input file given (config `input` or --input)")
        path = Path(self.cfg.input)
        if not path.is_file():
            raise MissingArtifactError(f"input file {path} not found")
        self.data_hash = hashlib.sha256(path.read_bytes()).hexdigest()[:16]
        d = load_dataset(path, self.mapping(path), self.cfg.delimiter)
        if censor and self.cfg.censor_tau is not None:
            d = administrative_censor(d, float(self.cfg.censor_tau))
        return d

    def model(self) -> FlexPhModel:
        doc = self.read_json("model.json", "fit")
        if doc["provenance"]["config_hash"] != self.cfg.hash or doc["provenance"]["data_hash"] != self.data_hash:
            raise MissingArtifactError("model.json was fitted under a different config or input; rerun `ipdsurv fit`")
        m = FlexPhModel.from_dict(doc["model"])
        self.model_hash = m.model_hash()
        return m

    def centered(self, d: Dataset, m: FlexPhModel) -> Dataset:
        return center_covariates(d, offsets=m.schema.offsets)


def _peek(path, delimiter, limit=1000):
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh, delimiter=delimiter)
        header = [h.strip() for h in next(reader, [])]
        rows = [r for _, r in zip(range(limit), reader)]
    if not header:
        raise DataError("input file is empty")
    return header, rows


def _looks_binary(rows, j):
    vals = {r[j].strip() for r in rows if j < len(r) and r[j].strip()}
    try:
        return bool(vals) and {float(v) for v in vals} <= {0.0, 1.0}
    except ValueError:
        return False


# --- contrasts as one vector statistic -----------------------------------------------------------


def _usable_studies(d: Dataset):
    """Studies with both exposure levels present; the others have no exposure contrast."""
    return [s for s in range(d.k) if d.mask(s, 0).any() and d.mask(s, 1).any()]


@dataclass(frozen=True)
class ContrastPlan:
    """Fixed, ordered list of curve-based contrasts; the jackknife statistic."""

    studies: tuple
    approaches: tuple
    estimands: tuple
    times: tuple
    hr_windows: tuple
    rmst_horizons: tuple
    reference_exposure: int
    grid: tuple

    @classmethod
    def from_config(cls, cfg: RunConfig, d: Dataset):
        return cls(tuple(_usable_studies(d)), cfg.approaches, cfg.estimands, cfg.times, cfg.hr_windows,
                   cfg.rmst_horizons, cfg.reference_exposure, tuple(cfg.grid(d.time[d.event == 1])))

    def items(self):
        """``(study, approach, kind, horizon)`` in output order."""
        out = []
        for s in self.studies:
            for a in self.approaches:
                for kind in CURVE_KINDS:
                    if kind not in self.estimands:
                        continue
                    hs = {"risk_difference": self.times, "survival_ratio": self.times,
                          "marginal_log_hr": self.hr_windows, "rmst_difference": self.rmst_horizons}[kind]
                    out += [(s, a, kind, h) for h in hs]
        return out

    def curves(self, m: FlexPhModel, d: Dataset):
        t = np.asarray(self.grid)
        out = {}
        for s in self.studies:
            for a in self.approaches:
                for e in (1, 0):
                    j = self.reference_exposure if a == "D" else None
                    out[(s, a, e)] = standardize(m, d, a, s, e, t, j)
        return out

    @staticmethod
    def evaluate(c1, c0, kind, h):
        if kind == "risk_difference":
            return risk_difference(c1, c0, h)
        if kind == "survival_ratio":
            return survival_ratio(c1, c0, h)
        if kind == "marginal_log_hr":
            return float(np.log(marginal_hr(c1, c0, h)))
        return rmst_difference(c1, c0, h)

    def values(self, curves):
        return np.array([self.evaluate(curves[(s, a, 1)], curves[(s, a, 0)], kind, h)
                         for s, a, kind, h in self.items()])

    def __call__(self, m: FlexPhModel, d: Dataset):
        return self.values(self.curves(m, d))


# --- commands --------------------------------------------------------------------------------------


def cmd_validate(run: Run):
    """Check the input file and column mapping."""
    d = run.dataset(censor=False)
    missing_level = [d.study_labels[s] for s in range(d.k) if s not in _usable_studies(d)]
    no_events = [d.study_labels[s] for s in range(d.k) if not d.event[d.study == s].any()]
    doc = {
        "n": d.n, "k": d.k, "studies": list(d.study_labels), "covariates": list(d.schema.names),
        "covariate_kinds": list(d.schema.kinds), "excluded": d.excluded, "events": int(d.event.sum()),
        "studies_missing_an_exposure_level": missing_level, "studies_without_events": no_events,
    }
    run.write_json("validation.json", doc)
    if no_events:
        raise DataError(f"studies without events cannot be modelled: {', '.join(no_events)}")


def cmd_describe(run: Run):
    """Per study and exposure summary plus positivity diagnostic."""
    d = run.dataset()
    table = describe(d, run.cfg.follow_up)
    run.write_csv("describe.csv", table.to_csv())
    run.write("describe.txt", f"# {run._stamp()}\n{table.to_text()}")
    if d.k >= 2 and d.p > 0:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            rep = positivity_diagnostic(center_covariates(d))
        run.write("positivity.txt", f"# {run._stamp()}\n{rep.to_text()}")


def cmd_censor(run: Run):
    """Write the input administratively censored at censor_tau."""
    if run.cfg.censor_tau is None:
        raise DataError("censor needs censor_tau (config) or --censor-tau")
    raw = run.dataset(censor=False)
    d = administrative_censor(raw, float(run.cfg.censor_tau))
    run.out.mkdir(parents=True, exist_ok=True)
    write_dataset(d, run.out / "censored.csv", uncenter=False)
    run.written.append("censored.csv")
    changed = int(np.sum(raw.event != d.event) + np.sum((raw.event == d.event) & (raw.time != d.time)))
    run.write_json("censor.json", {"tau": float(run.cfg.censor_tau), "records_truncated": changed,
                                   "events_removed": int(raw.event.sum() - d.event.sum())})


def cmd_fit(run: Run):
    """Fit the stratified flexible parametric PH model."""
    d = center_covariates(run.dataset())
    m = fit_flexph(d, FitOptions.from_dict(run.cfg.fit))
    run.model_hash = m.model_hash()
    run.write_json("model.json", {"model": m.to_dict()})
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["term", "study", "estimate", "se", "hr", "hr_lo", "hr_hi"])
    k_m = m.zeta.size
    for j, name in enumerate(m.schema.names):
        se = float(np.sqrt(max(m.cov[k_m + j, k_m + j], 0.0)))
        w.writerow(_coef_row(name, "", m.beta[j], se))
    for s, lab in enumerate(m.study_labels):
        se = m.psi_se(s) if m.psi_free[s] else float("nan")
        w.writerow(_coef_row("exposure", lab, m.psi[s], se))
    w.writerow(["loglik", "", f"{m.loglik:.6f}", "", "", "", ""])
    w.writerow(["n_iter", "", m.n_iter, "", "", "", ""])
    run.write_csv("model_summary.csv", buf.getvalue())


def _coef_row(term, study, b, se):
    lo, hi = b - 1.959964 * se, b + 1.959964 * se
    return [term, study, f"{b:.6f}", f"{se:.6f}", f"{np.exp(b):.4f}", f"{np.exp(lo):.4f}", f"{np.exp(hi):.4f}"]


def cmd_standardize(run: Run):
    """Standardized survival curves for every approach, study and exposure."""
    raw = run.dataset()
    m = run.model()
    d = run.centered(raw, m)
    plan = ContrastPlan.from_config(run.cfg, d)
    t = np.asarray(plan.grid)
    curves = []
    for s in range(d.k):
        for a in run.cfg.approaches:
            for e in (0, 1):
                if a == "0" and not d.mask(s, e).any():
                    continue
                j = run.cfg.reference_exposure if a == "D" else None
                curves.append(standardize(m, d, a, s, e, t, j))
    run.write_json("curves.json", {"curves": [c.to_dict() for c in curves], "studies_contrasted":
                                   [d.study_labels[s] for s in plan.studies]})
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["approach", "study", "exposure", "reference_exposure", "time", "survival", "extrapolated"])
    for c in curves:
        for ti, si, xi in zip(c.t_grid, c.survival, c.extrapolated):
            w.writerow([c.approach, c.target_study, c.set_exposure,
                        "" if c.reference_exposure is None else c.reference_exposure,
                        f"{ti:.6g}", f"{si:.10f}", int(xi)])
    run.write_csv("curves.csv", buf.getvalue())


def _estimate_ses(run: Run, plan: ContrastPlan, m: FlexPhModel, d: Dataset):
    unc = run.cfg.uncertainty
    method = unc.get("method", "jackknife")
    n_items = len(plan.items())
    if method == "none" or n_items == 0:
        return np.full(n_items, np.nan), None
    if method == "delta":
        return np.atleast_1d(delta_method_se(m, d, plan)), None
    est = PipelineEstimand(plan, FitOptions.from_dict(run.cfg.fit), refit=bool(unc.get("refit", True)),
                           basis=m.basis, init=m)
    res = jackknife(d, est, jobs=int(run.cfg.jobs), max_failure_rate=float(unc.get("max_failure_rate", 0.05)))
    return np.atleast_1d(res.se), res


def cmd_contrast(run: Run):
    """Study-level contrasts with standard errors."""
    raw = run.dataset()
    m = run.model()
    d = run.centered(raw, m)
    doc = run.read_json("curves.json", "standardize")
    if doc["provenance"]["model_hash"] != run.model_hash:
        raise MissingArtifactError("curves.json belongs to a different model; rerun `ipdsurv standardize`")
    stored = {}
    for c in map(StandardizedCurve.from_dict, doc["curves"]):
        stored[(d.study_index(c.target_study), c.approach, c.set_exposure)] = c
    plan = ContrastPlan.from_config(run.cfg, d)
    try:
        values = plan.values(stored)
    except KeyError as exc:
        raise MissingArtifactError(f"curves.json lacks curve {exc}; rerun `ipdsurv standardize`") from None
    ses, jk = _estimate_ses(run, plan, m, d)
    estimates = []
    for (s, a, kind, h), v, se in zip(plan.items(), values, ses):
        estimates.append(ContrastEstimate(kind, d.study_labels[s], h, float(v), float(se), a))
    for s in plan.studies:
        estimates.append(crude_hr(d, s))
        estimates.append(conditional_hr(m, s))
    _write_contrasts(run, estimates)
    if jk is not None:
        run.write_csv("jackknife_replicates.csv", jk.to_csv())


def _write_contrasts(run: Run, estimates):
    run.write_json("contrasts.json", {"estimates": [e.to_dict() for e in estimates],
                                      "se_method": run.cfg.uncertainty.get("method")})
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["study", "kind", "approach", "horizon", "value", "se", "display", "display_lo", "display_hi"])
    for e in estimates:
        lo, hi = e.value - 1.959964 * e.se, e.value + 1.959964 * e.se
        disp = [np.exp(v) if e.kind in LOG_KINDS else v for v in (e.value, lo, hi)]
        w.writerow([e.study, e.kind, e.approach, "" if e.horizon is None else f"{e.horizon:g}",
                    f"{e.value:.6f}", f"{e.se:.6f}", *(f"{v:.4f}" for v in disp)])
    run.write_csv("contrasts.csv", buf.getvalue())


def _group_key(e):
    h = e.get("horizon")
    return f"{e['kind']}[{e['approach']}]" + ("" if h is None else f"@{h:g}")


def _pool_group(inputs: MetaInput, opts):
    if inputs.k < 2:
        return None, "single study: no pooled estimate"
    r = pool(inputs, re=opts.get("random_effects", True), kh=opts.get("knapp_hartung", True),
             kh_truncate=opts.get("kh_truncate", False), prediction=opts.get("prediction", True))
    return r, r.pi_note


def cmd_pool(run: Run, aggregate=None):
    """Random-effects pooling of study-level contrasts."""
    groups = {}
    if aggregate:
        if not Path(aggregate).is_file():
            raise MissingArtifactError(f"aggregate file {aggregate} not found")
        run.data_hash = hashlib.sha256(Path(aggregate).read_bytes()).hexdigest()[:16]
        groups = read_meta_csv(aggregate)
    else:
        doc = run.read_json("contrasts.json", "contrast")
        prov = doc["provenance"]
        run.data_hash, run.model_hash = prov["data_hash"], prov["model_hash"]
        if prov["config_hash"] != run.cfg.hash:
            raise MissingArtifactError("contrasts.json was made under a different config; rerun `ipdsurv contrast`")
        collected = {}
        for e in doc["estimates"]:
            collected.setdefault(_group_key(e), []).append(e)
        for key, rows in collected.items():
            rows = [r for r in rows if np.isfinite(r["se"]) and r["se"] > 0]
            if not rows:
                continue
            scale = "log" if rows[0]["kind"] in LOG_KINDS else "identity"
            groups[key] = MetaInput([r["value"] for r in rows], [r["se"] for r in rows],
                                    tuple(r["study"] for r in rows), scale)
    if not groups:
        raise DataError("nothing to pool: no estimates with a positive standard error")
    out = {}
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["estimand", "k", "pooled", "lo", "hi", "tau2", "i2", "pi_lo", "pi_hi", "note"])
    for key, inp in groups.items():
        r, note = _pool_group(inp, run.cfg.pool)
        out[key] = {"inputs": {"values": inp.values.tolist(), "se": inp.se.tolist(), "labels": list(inp.labels),
                               "scale": inp.scale},
                    "result": None if r is None else r.to_dict(), "note": note}
        if r is None:
            w.writerow([key, inp.k, "", "", "", "", "", "", "", note])
            continue
        pi = r.pi_display or ("", "")
        w.writerow([key, r.k, f"{r.pooled_display:.4f}", f"{r.ci_display[0]:.4f}", f"{r.ci_display[1]:.4f}",
                    f"{r.tau2:.6f}", f"{r.i2:.2f}", *(v if v == "" else f"{v:.4f}" for v in pi), note])
    run.write_json("pooled.json", {"estimands": out, "options": run.cfg.pool})
    run.write_csv("pooled.csv", buf.getvalue())


def _result_from_dict(doc) -> MetaResult:
    r = dict(doc)
    r.pop("display")
    r["weights"] = np.array(r["weights"])
    r["ci95"] = tuple(r["ci95"])
    r["labels"] = tuple(r["labels"])
    if r["prediction_interval"] is not None:
        r["prediction_interval"] = tuple(r["prediction_interval"])
    return MetaResult(**r)


def cmd_forest(run: Run):
    """Forest plots of pooled estimands."""
    doc = run.read_json("pooled.json", "pool")
    prov = doc["provenance"]
    run.data_hash, run.model_hash = prov["data_hash"], prov["model_hash"]
    by_kind = {}
    for key, g in doc["estimands"].items():
        inp = g["inputs"]
        panel = ForestPanel(key, MetaInput(inp["values"], inp["se"], tuple(inp["labels"]), inp["scale"]),
                            None if g["result"] is None else _result_from_dict(g["result"]))
        by_kind.setdefault(key.split("[")[0], []).append(panel)
    texts = []
    for kind, panels in by_kind.items():
        svg, text = render_forest(panels, kind.replace("_", " "))
        run.write_svg(f"forest_{kind}.svg", svg)
        texts.append(text)
    run.write("forest.txt", f"# {run._stamp()}\n" + "\n".join(texts))


def cmd_simulate(run: Run):
    """Draw a synthetic dataset from the `simulate` config section."""
    spec_doc = dict(run.cfg.simulate or {})
    if not spec_doc:
        raise DataError("simulate needs a `simulate` section describing the scenario")
    spec_doc.setdefault("seed", run.cfg.seed)
    try:
        spec = ScenarioSpec.from_dict(spec_doc)
    except TypeError as exc:
        raise DataError(f"bad simulate section: {exc}") from None
    d, truth = generate(spec)
    run.out.mkdir(parents=True, exist_ok=True)
    write_dataset(d, run.out / "data.csv")
    run.written.append("data.csv")
    run.data_hash = hashlib.sha256((run.out / "data.csv").read_bytes()).hexdigest()[:16]
    run.write("truth.json", truth_json(truth))


def cmd_run(run: Run):
    """validate, describe, fit, standardize, contrast, pool and forest in sequence."""
    for name in ("validate", "describe", "fit", "standardize", "contrast", "pool", "forest"):
        COMMANDS[name](run)


COMMANDS = {
    "validate": cmd_validate, "describe": cmd_describe, "censor": cmd_censor, "fit": cmd_fit,
    "standardize": cmd_standardize, "contrast": cmd_contrast, "pool": cmd_pool, "forest": cmd_forest,
    "simulate": cmd_simulate, "run": cmd_run,
}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="ipdsurv", description="Standardized survival curves for IPD meta-analysis.")
    ap.add_argument("--version", action="version", version=f"ipdsurv {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)
    for name, fn in COMMANDS.items():
        p = sub.add_parser(name, help=fn.__doc__)
        p.add_argument("-c", "--config", help="YAML run configuration")
        p.add_argument("-i", "--input", help="IPD file (delimited text)")
        p.add_argument("-o", "--output", help="output directory")
        p.add_argument("-j", "--jobs", type=int, help="parallel jackknife workers")
        p.add_argument("--seed", type=int)
        p.add_argument("--censor-tau", type=float, help="administrative censoring horizon")
        p.add_argument("--approaches", help="comma list, e.g. 0,A,C")
        p.add_argument("--times", help="comma list of time points")
        p.add_argument("--hr-windows", help="comma list of marginal-HR window ends")
        p.add_argument("--estimands", help="comma list of curve contrasts")
        p.add_argument("--fixed-effects", action="store_true", help="pool with a fixed-effect model")
        p.add_argument("--no-kh", action="store_true", help="normal instead of Knapp-Hartung interval")
        p.add_argument("--no-pi", action="store_true", help="skip prediction intervals")
        p.add_argument("--se-method", choices=("jackknife", "delta", "none"))
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config key (dotted)")
        p.add_argument("-v", "--verbose", action="store_true")
        if name == "pool":
            p.add_argument("--aggregate", help="pool published estimates (study,value,lo,hi,scale) instead")
    return ap


def _fail(command, code, exc):
    doc = {"command": command, "error": type(exc).__name__, "exit_code": code, "message": str(exc)}
    print(json.dumps(doc, sort_keys=True), file=sys.stderr)
    return code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        cfg, _ = load_config(args)
        run = Run(cfg, args.command)
        if args.command == "pool":
            cmd_pool(run, args.aggregate)
        else:
            COMMANDS[args.command](run)
    except MissingArtifactError as exc:
        return _fail(args.command, EXIT_MISSING, exc)
    except (FitError, ArithmeticError, np.linalg.LinAlgError) as exc:
        return _fail(args.command, EXIT_NUMERICAL, exc)
    except (IpdError, ValueError) as exc:
        return _fail(args.command, EXIT_INVALID, exc)
    print(json.dumps({"command": args.command, "outputs": run.written, **run.provenance()}, sort_keys=True))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
