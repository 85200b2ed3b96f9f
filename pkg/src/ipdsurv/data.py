"""
Individual patient data: records, validation, CSV ingestion, centering,
administrative censoring and descriptive summaries.

A :class:`Dataset` stores its columns as read-only numpy arrays so that the
fitting code can work on them directly; :attr:`Dataset.records` gives the
row view when one is needed.
"""
from __future__ import annotations

import csv
import io
import logging
from collections import Counter
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np

from .errors import DataError

log = logging.getLogger(__name__)

MISSING_TOKENS = frozenset({"", "na", "nan", "null", "none", "."})

CONTINUOUS = "continuous"
BINARY = "binary"


def _frozen(a, dtype=None):
    a = np.array(a, dtype=dtype)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class IpdRecord:
    subject_id: str
    study: str
    exposure: int
    covariates: tuple
    time: float
    event: int


@dataclass(frozen=True)
class CovariateSchema:
    names: tuple = ()
    kinds: tuple = ()
    offsets: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "names", tuple(self.names))
        object.__setattr__(self, "kinds", tuple(self.kinds))
        offsets = tuple(float(o) for o in self.offsets) or (0.0,) * len(self.names)
        object.__setattr__(self, "offsets", offsets)
        if not (len(self.names) == len(self.kinds) == len(self.offsets)):
            raise DataError("covariate names, kinds and offsets must have equal length")
        for kind in self.kinds:
            if kind not in (CONTINUOUS, BINARY):
                raise DataError(f"unknown covariate kind {kind!r}")

    def __len__(self):
        return len(self.names)

    def to_dict(self):
        return {"names": list(self.names), "kinds": list(self.kinds), "offsets": list(self.offsets)}

    @classmethod
    def from_dict(cls, doc):
        return cls(tuple(doc["names"]), tuple(doc["kinds"]), tuple(doc["offsets"]))


@dataclass(frozen=True, eq=False)
class Dataset:
    """Validated, immutable collection of patient records.

    ``study`` holds dense indices ``0..k-1`` into ``study_labels``; labels are
    ordered by first appearance in the source file.
    """

    subject_ids: np.ndarray
    study: np.ndarray
    exposure: np.ndarray
    z: np.ndarray
    time: np.ndarray
    event: np.ndarray
    schema: CovariateSchema
    study_labels: tuple
    excluded: dict = field(default_factory=dict)

    def __post_init__(self):
        n = len(self.time)
        z = np.asarray(self.z, dtype=float).reshape(n, len(self.schema))
        object.__setattr__(self, "subject_ids", _frozen([str(s) for s in self.subject_ids], object))
        object.__setattr__(self, "study", _frozen(self.study, np.int64))
        object.__setattr__(self, "exposure", _frozen(self.exposure, np.int64))
        object.__setattr__(self, "z", _frozen(z, float))
        object.__setattr__(self, "time", _frozen(self.time, float))
        object.__setattr__(self, "event", _frozen(self.event, np.int64))
        object.__setattr__(self, "study_labels", tuple(str(s) for s in self.study_labels))
        for name in ("subject_ids", "study", "exposure", "event"):
            if len(getattr(self, name)) != n:
                raise DataError(f"column {name} has length {len(getattr(self, name))}, expected {n}")
        if n == 0:
            raise DataError("dataset is empty")
        if not np.all(np.isfinite(self.time)) or np.any(self.time < 0):
            raise DataError("times must be finite and nonnegative")
        if not np.all(np.isin(self.exposure, (0, 1))):
            raise DataError("exposure must be 0/1")
        if not np.all(np.isin(self.event, (0, 1))):
            raise DataError("event must be 0/1")
        if not np.all(np.isfinite(self.z)):
            raise DataError("covariates contain missing or non-finite values")
        if self.study.min() < 0 or self.study.max() >= len(self.study_labels):
            raise DataError("study index outside the label table")

    # --- shape ---------------------------------------------------------------

    @property
    def n(self) -> int:
        return len(self.time)

    @property
    def k(self) -> int:
        return len(self.study_labels)

    @property
    def p(self) -> int:
        return len(self.schema)

    @property
    def tau(self) -> np.ndarray:
        """Per-study maximum observed time (nan for a study with no records)."""
        out = np.full(self.k, np.nan)
        for s in range(self.k):
            m = self.study == s
            if m.any():
                out[s] = self.time[m].max()
        return out

    @property
    def records(self) -> list:
        return [
            IpdRecord(
                str(self.subject_ids[i]),
                self.study_labels[self.study[i]],
                int(self.exposure[i]),
                tuple(float(v) for v in self.z[i]),
                float(self.time[i]),
                int(self.event[i]),
            )
            for i in range(self.n)
        ]

    def study_index(self, label) -> int:
        """Map a study label (or an int index) to its dense index."""
        if isinstance(label, (int, np.integer)) and not isinstance(label, bool):
            if 0 <= label < self.k:
                return int(label)
            raise DataError(f"unknown study index {label}")
        try:
            return self.study_labels.index(str(label))
        except ValueError:
            raise DataError(f"unknown study {label!r}") from None

    def mask(self, study=None, exposure=None) -> np.ndarray:
        m = np.ones(self.n, dtype=bool)
        if study is not None:
            m &= self.study == self.study_index(study)
        if exposure is not None:
            m &= self.exposure == int(exposure)
        return m

    def subset(self, mask) -> "Dataset":
        """Rows selected by a boolean mask or index array; study labels are kept."""
        idx = np.arange(self.n)[mask]
        return Dataset(
            self.subject_ids[idx], self.study[idx], self.exposure[idx], self.z[idx],
            self.time[idx], self.event[idx], self.schema, self.study_labels, dict(self.excluded),
        )

    def drop(self, i: int) -> "Dataset":
        keep = np.ones(self.n, dtype=bool)
        keep[i] = False
        return self.subset(keep)

    def with_columns(self, **cols) -> "Dataset":
        return replace(self, **cols)

    @classmethod
    def from_records(cls, records: Iterable[IpdRecord], schema: CovariateSchema) -> "Dataset":
        records = list(records)
        labels = list(dict.fromkeys(r.study for r in records))
        return cls(
            [r.subject_id for r in records],
            [labels.index(r.study) for r in records],
            [r.exposure for r in records],
            np.array([r.covariates for r in records], dtype=float).reshape(len(records), len(schema)),
            [r.time for r in records],
            [r.event for r in records],
            schema,
            tuple(labels),
        )


# --- ingestion ----------------------------------------------------------------


@dataclass(frozen=True)
class ColumnMapping:
    """Which file columns feed which fields.

    ``binary`` lists the covariates treated as 0/1; every other covariate is
    continuous. ``studies``, when given, is the closed set of allowed study
    labels and fixes their order.
    """

    study: str
    exposure: str
    time: str
    event: str
    covariates: tuple = ()
    binary: tuple = ()
    subject_id: str | None = None
    studies: tuple | None = None

    @classmethod
    def from_dict(cls, doc):
        doc = dict(doc)
        for key in ("covariates", "binary", "studies"):
            if doc.get(key) is not None:
                doc[key] = tuple(str(v) for v in doc[key])
        return cls(**doc)


def _parse_float(raw, column, line):
    try:
        return float(raw)
    except ValueError:
        raise DataError(f"column {column!r}: cannot parse {raw!r} as a number", line) from None


def _parse_binary(raw, column, line):
    v = _parse_float(raw, column, line)
    if v not in (0.0, 1.0):
        raise DataError(f"column {column!r}: expected 0 or 1, got {raw!r}", line)
    return int(v)


def load_dataset(path, mapping: ColumnMapping, delimiter: str = ",") -> Dataset:
    """Read a delimited file into a validated, complete-case :class:`Dataset`.

    Rows with a missing value in any mapped column are dropped and counted
    per column in ``Dataset.excluded``.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        return read_dataset(fh, mapping, delimiter)


def read_dataset(fh, mapping: ColumnMapping, delimiter: str = ",") -> Dataset:
    reader = csv.DictReader(fh, delimiter=delimiter)
    header = reader.fieldnames or []
    needed = [mapping.study, mapping.exposure, mapping.time, mapping.event, *mapping.covariates]
    if mapping.subject_id:
        needed.append(mapping.subject_id)
    absent = [c for c in needed if c not in header]
    if absent:
        raise DataError(f"missing columns: {', '.join(absent)}")
    unknown_binary = set(mapping.binary) - set(mapping.covariates)
    if unknown_binary:
        raise DataError(f"binary covariates not in covariate list: {sorted(unknown_binary)}")

    labels = list(mapping.studies) if mapping.studies else []
    closed = mapping.studies is not None
    ids, study, expo, z, time, event = [], [], [], [], [], []
    excluded = Counter()
    n_rows = 0
    for row in reader:
        line = reader.line_num
        n_rows += 1
        if None in row:
            raise DataError("row has more fields than the header", line)
        missing = [c for c in needed if row.get(c) is None or row[c].strip().lower() in MISSING_TOKENS]
        if missing:
            for c in missing:
                excluded[c] += 1
            continue
        label = row[mapping.study].strip()
        if label not in labels:
            if closed:
                raise DataError(f"unknown study label {label!r}", line)
            labels.append(label)
        t = _parse_float(row[mapping.time], mapping.time, line)
        if not np.isfinite(t) or t < 0:
            raise DataError(f"time must be a nonnegative number, got {row[mapping.time]!r}", line)
        zi = []
        for c in mapping.covariates:
            if c in mapping.binary:
                zi.append(float(_parse_binary(row[c], c, line)))
            else:
                v = _parse_float(row[c], c, line)
                if not np.isfinite(v):
                    raise DataError(f"column {c!r}: non-finite value", line)
                zi.append(v)
        study.append(labels.index(label))
        expo.append(_parse_binary(row[mapping.exposure], mapping.exposure, line))
        event.append(_parse_binary(row[mapping.event], mapping.event, line))
        time.append(t)
        z.append(zi)
        ids.append(row[mapping.subject_id].strip() if mapping.subject_id else str(n_rows))

    if not time:
        raise DataError("no complete rows in input")
    n_excluded = n_rows - len(time)
    if n_excluded:
        detail = ", ".join(f"{c}: {excluded[c]}" for c in sorted(excluded))
        log.info("%d excluded (missing values; %s)", n_excluded, detail)
    kinds = tuple(BINARY if c in mapping.binary else CONTINUOUS for c in mapping.covariates)
    schema = CovariateSchema(tuple(mapping.covariates), kinds)
    exc = {"rows": n_excluded, **{c: excluded[c] for c in sorted(excluded)}}
    return Dataset(ids, study, expo, np.array(z, dtype=float).reshape(len(time), len(kinds)),
                   time, event, schema, tuple(labels), exc)


def write_dataset(d: Dataset, path, delimiter: str = ",", uncenter: bool = True) -> None:
    """Write ``d`` in the ingestion schema (columns: id, study, exposure, time, event, covariates)."""
    z = d.z + np.asarray(d.schema.offsets) if uncenter else d.z
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, delimiter=delimiter, lineterminator="\n")
        w.writerow(["id", "study", "exposure", "time", "event", *d.schema.names])
        for i in range(d.n):
            w.writerow([d.subject_ids[i], d.study_labels[d.study[i]], int(d.exposure[i]),
                        repr(float(d.time[i])), int(d.event[i]), *(repr(float(v)) for v in z[i])])


def mapping_for_written(d: Dataset) -> ColumnMapping:
    """Column mapping matching the layout produced by :func:`write_dataset`."""
    binary = tuple(n for n, k in zip(d.schema.names, d.schema.kinds) if k == BINARY)
    return ColumnMapping("study", "exposure", "time", "event", d.schema.names, binary, "id")


# --- transformations ------------------------------------------------------------


def center_covariates(d: Dataset, center_binary: bool = False, offsets: Sequence[float] | None = None) -> Dataset:
    """Subtract pooled means from continuous covariates.

    Offsets accumulate in the schema, so ``z + offsets`` always recovers the
    raw values. Passing ``offsets`` re-applies a known centering (e.g. the one
    stored with a fitted model) to raw data.
    """
    prior = np.asarray(d.schema.offsets, dtype=float)
    if offsets is not None:
        target = np.asarray(offsets, dtype=float)
        shift = target - prior
    else:
        shift = np.zeros(d.p)
        for j, kind in enumerate(d.schema.kinds):
            if kind == CONTINUOUS or center_binary:
                shift[j] = d.z[:, j].mean()
        target = prior + shift
    z = d.z - shift
    schema = CovariateSchema(d.schema.names, d.schema.kinds, tuple(target))
    return replace(d, z=z, schema=schema)


def administrative_censor(d: Dataset, tau: float) -> Dataset:
    """Censor every record followed beyond ``tau`` at ``tau``."""
    if not tau > 0:
        raise DataError("censoring horizon must be positive")
    over = d.time > tau
    return replace(d, time=np.where(over, tau, d.time), event=np.where(over, 0, d.event))


# --- descriptive summaries --------------------------------------------------------


def km_median(time, event) -> float:
    """Smallest time at which the product-limit estimate reaches 0.5 or below."""
    time = np.asarray(time, float)
    event = np.asarray(event, int)
    s = 1.0
    for t in np.unique(time[event == 1]):
        at_risk = np.sum(time >= t)
        s *= 1.0 - np.sum((time == t) & (event == 1)) / at_risk
        if s <= 0.5 + 1e-12:
            return float(t)
    return float("nan")


def median_follow_up(time, event, method: str = "reverse_km") -> float:
    if method == "reverse_km":
        return km_median(time, 1 - np.asarray(event))
    if method == "raw":
        return float(np.median(time))
    raise ValueError(f"unknown follow-up method {method!r}")


@dataclass
class SummaryTable:
    columns: list
    rows: list

    def to_text(self) -> str:
        cells = [self.columns] + [[_fmt_cell(v) for v in r] for r in self.rows]
        widths = [max(len(r[j]) for r in cells) for j in range(len(self.columns))]
        lines = []
        for r in cells:
            lines.append("  ".join(c.rjust(w) if j else c.ljust(w) for j, (c, w) in enumerate(zip(r, widths))))
        return "\n".join(lines) + "\n"

    def to_csv(self, delimiter=",") -> str:
        buf = io.StringIO()
        w = csv.writer(buf, delimiter=delimiter, lineterminator="\n")
        w.writerow(self.columns)
        for r in self.rows:
            w.writerow([_fmt_cell(v) for v in r])
        return buf.getvalue()

    def row(self, **where):
        idx = {c: j for j, c in enumerate(self.columns)}
        for r in self.rows:
            if all(r[idx[c]] == v for c, v in where.items()):
                return dict(zip(self.columns, r))
        raise KeyError(where)


def _fmt_cell(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return "" if np.isnan(v) else f"{v:.1f}"
    return str(v)


def describe(d: Dataset, follow_up: str = "reverse_km") -> SummaryTable:
    """Per (study, exposure) overview of events, follow-up and covariates."""
    columns = ["study", "exposure", "n", "deaths", "fu_median", "fu_max", "event_max"]
    for name, kind in zip(d.schema.names, d.schema.kinds):
        if kind == CONTINUOUS:
            columns += [f"{name}_median_q10_q90", f"{name}_mean_sd"]
        else:
            columns += [f"{name}_count"]
    z = d.z + np.asarray(d.schema.offsets)
    rows = []
    for s in range(d.k):
        for e in (0, 1):
            m = (d.study == s) & (d.exposure == e)
            n = int(m.sum())
            row = [d.study_labels[s], e, n]
            if n == 0:
                rows.append(row + [None] * (len(columns) - 3))
                continue
            t, ev = d.time[m], d.event[m]
            deaths = int(ev.sum())
            row += [
                f"{deaths} ({100.0 * deaths / n:.0f}%)",
                median_follow_up(t, ev, follow_up),
                float(t.max()),
                float(t[ev == 1].max()) if deaths else float("nan"),
            ]
            for j, kind in enumerate(d.schema.kinds):
                col = z[m, j]
                if kind == CONTINUOUS:
                    q10, q50, q90 = np.quantile(col, [0.1, 0.5, 0.9])
                    sd = col.std(ddof=1) if n > 1 else 0.0
                    row += [f"{q50:.0f} ({q10:.0f}-{q90:.0f})", f"{col.mean():.0f} ({sd:.0f})"]
                else:
                    c = int(col.sum())
                    row += [f"{c} ({100.0 * c / n:.0f}%)"]
            rows.append(row)
    return SummaryTable(columns, rows)
