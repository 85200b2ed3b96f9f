"""Restricted (natural) cubic spline basis on the log-time scale."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import FitError


@dataclass(frozen=True)
class SplineBasis:
    """Natural cubic spline in ``x = log t``.

    Columns are ``[1, x, s_1(x), ..., s_m(x)]`` with one truncated-power term
    per internal knot, each combined with the boundary terms so that the
    spline is linear beyond the boundary knots.
    """

    boundary_knots: tuple
    internal_knots: tuple = ()

    def __post_init__(self):
        lo, hi = (float(v) for v in self.boundary_knots)
        inner = tuple(float(v) for v in self.internal_knots)
        object.__setattr__(self, "boundary_knots", (lo, hi))
        object.__setattr__(self, "internal_knots", inner)
        knots = (lo, *inner, hi)
        if not all(a < b for a, b in zip(knots, knots[1:])):
            raise FitError(f"spline knots must be strictly increasing, got {knots}")

    @classmethod
    def from_event_times(cls, times, n_internal: int = 1) -> "SplineBasis":
        """Boundary knots at the extreme log event times, internal knots at
        equally spaced centiles (one knot: the median)."""
        x = np.log(np.asarray(times, dtype=float))
        if x.size < 2:
            raise FitError("need at least two event times to place spline knots")
        centiles = np.linspace(0, 100, n_internal + 2)[1:-1]
        inner = np.percentile(x, centiles) if n_internal else ()
        return cls((x.min(), x.max()), tuple(inner))

    @property
    def dim(self) -> int:
        return len(self.internal_knots) + 2

    def _lambdas(self):
        lo, hi = self.boundary_knots
        return [(hi - k) / (hi - lo) for k in self.internal_knots]

    def evaluate(self, x):
        """Basis values and first derivatives with respect to ``x``."""
        x = np.atleast_1d(np.asarray(x, dtype=float))
        lo, hi = self.boundary_knots
        v = np.empty((x.size, self.dim))
        dv = np.empty((x.size, self.dim))
        v[:, 0], dv[:, 0] = 1.0, 0.0
        v[:, 1], dv[:, 1] = x, 1.0
        plo = np.maximum(x - lo, 0.0)
        phi = np.maximum(x - hi, 0.0)
        for j, (k, lam) in enumerate(zip(self.internal_knots, self._lambdas()), start=2):
            pk = np.maximum(x - k, 0.0)
            v[:, j] = pk**3 - lam * plo**3 - (1 - lam) * phi**3
            dv[:, j] = 3 * (pk**2 - lam * plo**2 - (1 - lam) * phi**2)
        return v, dv

    def second_derivative(self, x):
        x = np.atleast_1d(np.asarray(x, dtype=float))
        lo, hi = self.boundary_knots
        d2 = np.zeros((x.size, self.dim))
        plo = np.maximum(x - lo, 0.0)
        phi = np.maximum(x - hi, 0.0)
        for j, (k, lam) in enumerate(zip(self.internal_knots, self._lambdas()), start=2):
            d2[:, j] = 6 * (np.maximum(x - k, 0.0) - lam * plo - (1 - lam) * phi)
        return d2

    def to_dict(self):
        return {"boundary_knots": list(self.boundary_knots), "internal_knots": list(self.internal_knots)}

    @classmethod
    def from_dict(cls, doc):
        return cls(tuple(doc["boundary_knots"]), tuple(doc["internal_knots"]))


def natural_spline_basis(log_t, basis: SplineBasis):
    """Values and log-time derivatives of ``basis`` at ``log_t``."""
    return basis.evaluate(log_t)
