"""
Motion Model
============
Six independent Student-t marginals, one per DoF (t_x, t_y, t_z, alpha,
beta, gamma). Fitted once from example motions, then sampled to drive
training-data synthesis.

Fitting is per-DoF maximum likelihood by EM over the Gaussian scale-mixture
form of the t distribution:
    E-step   w_i   = (nu + 1) / (nu + ((x_i - loc) / scale)^2)
    M-step   loc   = sum(w x) / sum(w)
             scale = sqrt(mean(w (x - loc)^2))
             nu    = root of the EM degrees-of-freedom equation in [NU_MIN, NU_MAX],
                     with the E-step weights (and the nu behind them) held fixed
stopping when the relative log-likelihood change drops below 1e-10 or after
500 iterations. nu pinned at NU_MAX means the data is effectively Gaussian;
that is reported, not raised.

Record format (save/load): ``<dof>.<param> = <float>`` lines, params
nu/loc/scale and optionally lower/upper. Lines starting with # are comments.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence, Union

import numpy as np
from scipy import optimize, special, stats

from src.models.se3 import DOF_NAMES, Motion6DoF
from src.utils.errors import FormatError, InputError

logger = logging.getLogger(__name__)

NU_MIN = 0.5
NU_MAX = 1000.0
SCALE_FLOOR = 1e-12
MIN_SAMPLES = 30
MAX_ITERATIONS = 500
REL_TOL = 1e-10
_MAX_REJECTION_ROUNDS = 10_000


@dataclass(frozen=True)
class StudentTMarginal:
    nu: float
    loc: float
    scale: float
    lower: Optional[float] = None
    upper: Optional[float] = None

    def __post_init__(self):
        if not (self.nu > 0 and math.isfinite(self.nu)):
            raise InputError(f"nu must be positive, got {self.nu}")
        if not (self.scale > 0 and math.isfinite(self.scale)):
            raise InputError(f"scale must be positive, got {self.scale}")
        if not math.isfinite(self.loc):
            raise InputError(f"loc must be finite, got {self.loc}")
        if (self.lower is None) != (self.upper is None):
            raise InputError("truncation needs both lower and upper bounds")
        if self.lower is not None and not (self.lower < self.loc < self.upper):
            raise InputError(f"bounds [{self.lower}, {self.upper}] must satisfy lower < loc < upper")
        for name in ("nu", "loc", "scale", "lower", "upper"):
            value = getattr(self, name)
            if value is not None:
                object.__setattr__(self, name, float(value))

    @property
    def truncated(self) -> bool:
        return self.lower is not None

    def logpdf(self, x: np.ndarray) -> np.ndarray:
        return stats.t.logpdf(x, self.nu, loc=self.loc, scale=self.scale)

    def draw(self, rng: np.random.Generator, size: int = 1) -> np.ndarray:
        x = self.loc + self.scale * rng.standard_t(self.nu, size=size)
        if not self.truncated:
            return x
        for _ in range(_MAX_REJECTION_ROUNDS):
            bad = (x < self.lower) | (x > self.upper)
            if not bad.any():
                return x
            x[bad] = self.loc + self.scale * rng.standard_t(self.nu, size=int(bad.sum()))
        raise InputError(f"rejection sampling could not meet bounds [{self.lower}, {self.upper}]")


@dataclass(frozen=True)
class MarginalFitReport:
    iterations: int
    log_likelihood: float
    converged: bool
    nu_at_upper_bound: bool
    degenerate: bool


def _em_nu_update(mean_logw_minus_w: float, nu_prev: float) -> float:
    """Solve the EM equation for nu with the E-step weights, and the nu that
    produced them, held fixed; clamps to [NU_MIN, NU_MAX] when there is no
    interior root."""
    const = 1.0 + mean_logw_minus_w + special.digamma((nu_prev + 1.0) / 2.0) - math.log((nu_prev + 1.0) / 2.0)

    def f(nu: float) -> float:
        return -special.digamma(nu / 2.0) + math.log(nu / 2.0) + const

    # f is decreasing in nu
    if f(NU_MAX) >= 0.0:
        return NU_MAX
    if f(NU_MIN) <= 0.0:
        return NU_MIN
    return optimize.brentq(f, NU_MIN, NU_MAX, xtol=1e-12, rtol=1e-12)


def _initial_nu(x: np.ndarray) -> float:
    # moment match on excess kurtosis, 6 / (nu - 4)
    k = stats.kurtosis(x, fisher=True, bias=True)
    if not np.isfinite(k) or k <= 0:
        return NU_MAX
    return float(np.clip(4.0 + 6.0 / k, 2.5, NU_MAX))


def _em_step(x: np.ndarray, loc: float, scale: float, nu: float) -> tuple[float, float, float]:
    """One EM iteration; never lowers the t log-likelihood."""
    d2 = ((x - loc) / scale) ** 2
    w = (nu + 1.0) / (nu + d2)
    loc_new = float(np.sum(w * x) / np.sum(w))
    scale_new = max(math.sqrt(float(np.mean(w * (x - loc_new) ** 2))), SCALE_FLOOR)
    return loc_new, scale_new, _em_nu_update(float(np.mean(np.log(w) - w)), nu)


def fit_marginal(x: np.ndarray) -> tuple[StudentTMarginal, MarginalFitReport]:
    x = np.asarray(x, dtype=float).ravel()
    if x.size < MIN_SAMPLES:
        raise InputError(f"need at least {MIN_SAMPLES} samples to fit, got {x.size}")
    if not np.all(np.isfinite(x)):
        raise InputError("samples contain non-finite values")

    loc = float(np.median(x))
    spread = float(np.std(x))
    if spread <= SCALE_FLOOR:
        marginal = StudentTMarginal(NU_MAX, loc, SCALE_FLOOR)
        return marginal, MarginalFitReport(0, math.inf, True, True, True)

    mad = float(stats.median_abs_deviation(x, scale="normal"))
    scale = mad if mad > SCALE_FLOOR else spread
    nu = _initial_nu(x)
    ll = float(np.sum(stats.t.logpdf(x, nu, loc=loc, scale=scale)))
    converged = False
    it = 0
    for it in range(1, MAX_ITERATIONS + 1):
        loc, scale, nu = _em_step(x, loc, scale, nu)

        ll_new = float(np.sum(stats.t.logpdf(x, nu, loc=loc, scale=scale)))
        change = abs(ll_new - ll) / max(abs(ll), 1e-300)
        ll = ll_new
        if change < REL_TOL:
            converged = True
            break

    at_bound = nu >= NU_MAX
    report = MarginalFitReport(it, ll, converged, at_bound, False)
    return StudentTMarginal(float(nu), float(loc), float(scale)), report


@dataclass(frozen=True)
class MotionModel:
    """One ``StudentTMarginal`` per DoF, in ``DOF_NAMES`` order."""

    marginals: tuple[StudentTMarginal, ...]
    fit_reports: tuple[MarginalFitReport, ...] = field(default=(), compare=False)

    def __post_init__(self):
        if len(self.marginals) != 6:
            raise InputError(f"motion model needs 6 marginals, got {len(self.marginals)}")
        object.__setattr__(self, "marginals", tuple(self.marginals))

    def __getitem__(self, dof: str) -> StudentTMarginal:
        return self.marginals[DOF_NAMES.index(dof)]

    @classmethod
    def from_params(cls, params: dict) -> "MotionModel":
        """User-specified parameters, e.g. {"t_z": {"nu": 3, "loc": 0.8, "scale": 0.1}, ...}."""
        missing = [d for d in DOF_NAMES if d not in params]
        if missing:
            raise InputError(f"motion model parameters missing for {missing}")
        return cls(tuple(StudentTMarginal(**{k: float(v) for k, v in params[d].items()}) for d in DOF_NAMES))

    def with_bounds(self, bounds: dict) -> "MotionModel":
        """Copy with truncation bounds, ``{"t_z": (lo, hi), ...}``."""
        marginals = []
        for name, m in zip(DOF_NAMES, self.marginals):
            lo, hi = bounds.get(name, (m.lower, m.upper))
            marginals.append(StudentTMarginal(m.nu, m.loc, m.scale, lo, hi))
        return MotionModel(tuple(marginals), self.fit_reports)

    def to_params(self) -> dict:
        out = {}
        for name, m in zip(DOF_NAMES, self.marginals):
            out[name] = {"nu": m.nu, "loc": m.loc, "scale": m.scale}
            if m.truncated:
                out[name].update(lower=m.lower, upper=m.upper)
        return out


def _as_sample_matrix(samples: Union[Sequence[Motion6DoF], np.ndarray]) -> np.ndarray:
    if isinstance(samples, np.ndarray):
        X = np.asarray(samples, dtype=float)
    else:
        X = np.array([m.as_array() for m in samples], dtype=float).reshape(-1, 6)
    if X.ndim != 2 or X.shape[1] != 6:
        raise InputError(f"samples must be an (N, 6) array or Motion6DoF list, got shape {X.shape}")
    return X


def fit(samples: Union[Sequence[Motion6DoF], np.ndarray]) -> MotionModel:
    X = _as_sample_matrix(samples)
    if X.shape[0] < MIN_SAMPLES:
        raise InputError(f"need at least {MIN_SAMPLES} motions to fit a motion model, got {X.shape[0]}")
    marginals, reports = [], []
    for k, name in enumerate(DOF_NAMES):
        m, rep = fit_marginal(X[:, k])
        if rep.degenerate:
            logger.warning("%s is constant (%.6g); scale clamped to %g", name, m.loc, SCALE_FLOOR)
        elif rep.nu_at_upper_bound:
            logger.warning("%s: nu reached %g, data is effectively Gaussian", name, NU_MAX)
        if not rep.converged:
            logger.warning("%s: EM stopped after %d iterations without converging", name, rep.iterations)
        logger.info("%s: nu=%.4g loc=%.6g scale=%.6g (%d iterations)", name, m.nu, m.loc, m.scale, rep.iterations)
        marginals.append(m)
        reports.append(rep)
    return MotionModel(tuple(marginals), tuple(reports))


def sample(model: MotionModel, rng: np.random.Generator) -> Motion6DoF:
    return Motion6DoF(*[float(m.draw(rng, 1)[0]) for m in model.marginals])


def sample_many(model: MotionModel, rng: np.random.Generator, n: int) -> np.ndarray:
    """(n, 6) draws, column-wise per DoF."""
    return np.column_stack([m.draw(rng, n) for m in model.marginals])


_PARAMS = ("nu", "loc", "scale")


def dumps(model: MotionModel) -> str:
    lines = ["# Student-t motion model, one marginal per DoF"]
    for name, m in zip(DOF_NAMES, model.marginals):
        for p in _PARAMS:
            lines.append(f"{name}.{p} = {getattr(m, p)!r}")
        if m.truncated:
            lines.append(f"{name}.lower = {m.lower!r}")
            lines.append(f"{name}.upper = {m.upper!r}")
    return "\n".join(lines) + "\n"


def loads(text: str, path: Optional[str] = None) -> MotionModel:
    values: dict[str, dict[str, float]] = {d: {} for d in DOF_NAMES}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise FormatError(f"expected 'key = value', got {line!r}", path, lineno)
        key, value = (s.strip() for s in line.split("=", 1))
        dof, _, param = key.partition(".")
        if dof not in values or param not in _PARAMS + ("lower", "upper"):
            raise FormatError(f"unknown field {key!r}", path, lineno)
        try:
            values[dof][param] = float(value)
        except ValueError:
            raise FormatError(f"field {key!r} is not a number: {value!r}", path, lineno) from None
    for dof in DOF_NAMES:
        for p in _PARAMS:
            if p not in values[dof]:
                raise FormatError(f"missing field {dof}.{p}", path)
    try:
        return MotionModel.from_params(values)
    except InputError as exc:
        raise FormatError(str(exc), path) from None


def save(model: MotionModel, path: Union[str, Path]) -> None:
    Path(path).write_text(dumps(model), encoding="utf-8")


def load(path: Union[str, Path]) -> MotionModel:
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"No such motion model file: {p}")
    return loads(p.read_text(encoding="utf-8"), str(p))


def motions_as_matrix(motions: Iterable[Motion6DoF]) -> np.ndarray:
    return _as_sample_matrix(list(motions))
