"""Error functionals, empirical moments and log-log rate fitting."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .errors import InvalidInputError
from .model import Ensemble


def _states(ens) -> np.ndarray:
    if isinstance(ens, Ensemble):
        return ens.states
    arr = np.asarray(ens, dtype=float)
    return arr[:, None] if arr.ndim == 1 else arr


def lp_coupled_error(ens_small, ens_proxy, p: float) -> float:
    """``((1/n) sum_i |x_small^i - x_proxy^i|^p)^(1/p)`` over the small system's indices."""
    small, proxy = _states(ens_small), _states(ens_proxy)
    if p < 1:
        raise InvalidInputError(f"p must be >= 1, got {p}")
    if small.shape[1] != proxy.shape[1]:
        raise InvalidInputError(f"state dimensions differ: {small.shape[1]} vs {proxy.shape[1]}")
    n = small.shape[0]
    if n > proxy.shape[0]:
        raise InvalidInputError(f"small system has {n} particles, more than the proxy's {proxy.shape[0]}")
    dist = np.linalg.norm(small - proxy[:n], axis=1)
    return float(np.mean(dist**p) ** (1.0 / p))


def wasserstein_1d(samples_a, samples_b, p: float = 1.0) -> float:
    """Exact p-Wasserstein distance between two equal-size 1-D empirical measures."""
    a = np.sort(np.asarray(samples_a, dtype=float).ravel())
    b = np.sort(np.asarray(samples_b, dtype=float).ravel())
    if p < 1:
        raise InvalidInputError(f"p must be >= 1, got {p}")
    if a.size == 0 or a.size != b.size:
        raise InvalidInputError(f"need equal, nonzero sample counts, got {a.size} and {b.size}")
    return float(np.mean(np.abs(a - b) ** p) ** (1.0 / p))


def empirical_moment(ens, p: float) -> float:
    x = _states(ens)
    if not p > 0:
        raise InvalidInputError(f"p must be positive, got {p}")
    if not np.all(np.isfinite(x)):
        raise InvalidInputError("ensemble contains non-finite values")
    return float(np.mean(np.linalg.norm(x, axis=1) ** p))


def fit_rate(points: Sequence[Tuple[float, float]]) -> Tuple[float, float, float]:
    """Least-squares line through ``(log x, log y)``.

    Returns ``(slope, intercept, r_squared)``.
    """
    pts = np.asarray(points, dtype=float)
    if pts.ndim != 2 or pts.shape[1] != 2:
        raise InvalidInputError("points must be a sequence of (x, y) pairs")
    if np.any(pts <= 0) or not np.all(np.isfinite(pts)):
        raise InvalidInputError("rate fitting needs strictly positive, finite abscissae and values")
    if np.unique(pts[:, 0]).size < 2:
        raise InvalidInputError("rate fitting needs at least two distinct abscissae")
    lx, ly = np.log(pts[:, 0]), np.log(pts[:, 1])
    mx, my = lx.mean(), ly.mean()
    dx, dy = lx - mx, ly - my
    slope = float(np.dot(dx, dy) / np.dot(dx, dx))
    intercept = float(my - slope * mx)
    resid = ly - (intercept + slope * lx)
    ss_res, ss_tot = float(np.dot(resid, resid)), float(np.dot(dy, dy))
    if ss_tot == 0.0:
        r_squared = 1.0 if ss_res == 0.0 else 0.0
    else:
        r_squared = min(1.0, max(0.0, 1.0 - ss_res / ss_tot))
    return slope, intercept, r_squared


@dataclass(frozen=True)
class ErrorSample:
    particle_count: int
    proxy_count: int
    p: float
    value: float
    seed: int


@dataclass(frozen=True)
class RateRow:
    abscissa: float
    error_mean: float
    error_stderr: float
    reps: int


@dataclass
class RateReport:
    study: str
    p: float
    rows: List[RateRow] = field(default_factory=list)
    slope: Optional[float] = None
    intercept: Optional[float] = None
    r_squared: Optional[float] = None
    note: str = ""

    def fit(self) -> "RateReport":
        """Fit on rows with positive mean error; zero rows (self-coupling) are skipped."""
        usable = [(r.abscissa, r.error_mean) for r in self.rows if r.error_mean > 0]
        try:
            self.slope, self.intercept, self.r_squared = fit_rate(usable)
            self.note = ""
        except InvalidInputError as exc:
            self.slope = self.intercept = self.r_squared = None
            self.note = f"no measurable error: {exc}"
        return self

    def to_dict(self) -> dict:
        return {
            "study": self.study,
            "p": self.p,
            "rows": [vars(r).copy() for r in self.rows],
            "slope": self.slope,
            "intercept": self.intercept,
            "r_squared": self.r_squared,
            "note": self.note,
        }


def summarize(values: Sequence[float]) -> Tuple[float, float]:
    """Mean and standard error (zero for a single value)."""
    v = np.asarray(values, dtype=float)
    mean = float(np.mean(v))
    stderr = float(np.std(v, ddof=1) / np.sqrt(v.size)) if v.size > 1 else 0.0
    return mean, stderr
