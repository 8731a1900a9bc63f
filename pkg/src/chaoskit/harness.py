"""Convergence studies: propagation of chaos in N, strong order in dt, moment audits."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import List, Optional, Tuple

import numpy as np

from .engine import NoisePlan, TimeGrid, simulate
from .errors import ConfigError, DivergenceError
from .metrics import RateReport, RateRow, empirical_moment, lp_coupled_error, summarize
from .model import DEFAULT_GAMMA, SCENARIOS, ModelSpec, build_scenario

log = logging.getLogger(__name__)

STUDIES = ("poc_in_N", "strong_in_dt", "moment_audit")


@dataclass(frozen=True)
class ExperimentConfig:
    scenario: str
    study: str = "poc_in_N"
    d: int = 1
    p_values: Tuple[float, ...] = (2.0,)
    particle_counts: Tuple[int, ...] = ()
    proxy_count: Optional[int] = None
    dt: Optional[float] = None
    dt_ladder: Tuple[float, ...] = ()
    n_particles: Optional[int] = None
    reference_dt: Optional[float] = None
    T: float = 1.0
    seeds: Tuple[int, ...] = ()
    repetitions: int = 4
    gamma: float = DEFAULT_GAMMA

    def __post_init__(self):
        for name in ("p_values", "particle_counts", "dt_ladder", "seeds"):
            object.__setattr__(self, name, tuple(getattr(self, name)))

    @property
    def label(self) -> str:
        return f"{self.study}:{self.scenario}:d{self.d}"

    def resolved_seeds(self) -> Tuple[int, ...]:
        return self.seeds if self.seeds else tuple(range(self.repetitions))

    def steps_for(self, dt: float, key: str = "dt") -> int:
        m = self.T / dt
        if not math.isfinite(m) or m < 1 or abs(m - round(m)) > 1e-9 * m:
            raise ConfigError(key, f"T/dt must be a positive integer, got T={self.T}, dt={dt}")
        return int(round(m))

    def validate(self, allow_self_coupling: bool = False) -> "ExperimentConfig":
        if self.scenario not in SCENARIOS:
            raise ConfigError("scenario", f"unknown scenario {self.scenario!r}; choose from {sorted(SCENARIOS)}")
        if self.study not in STUDIES:
            raise ConfigError("study", f"must be one of {STUDIES}, got {self.study!r}")
        if int(self.d) != self.d or self.d < 1:
            raise ConfigError("d", "must be a positive integer")
        if SCENARIOS[self.scenario].scalar_only and self.d != 1:
            raise ConfigError("d", f"scenario {self.scenario} is scalar, d must be 1")
        if not self.T > 0:
            raise ConfigError("T", "must be positive")
        if not self.p_values:
            raise ConfigError("p_values", "must not be empty")
        if self.repetitions < 1:
            raise ConfigError("repetitions", "must be a positive integer")
        if self.seeds:
            if len(self.seeds) != self.repetitions:
                raise ConfigError("seeds", f"{len(self.seeds)} seeds given but repetitions is {self.repetitions}")
            if len(set(self.seeds)) != len(self.seeds):
                raise ConfigError("seeds", "seeds must be distinct")
        if not 0 < self.gamma <= 0.5:
            raise ConfigError("gamma", "must lie in (0, 1/2]")

        if self.study == "poc_in_N":
            if any(p < 2 for p in self.p_values):
                raise ConfigError("p_values", "PoC norms must be >= 2")
            self._check_counts(allow_self_coupling)
            if self.dt is None:
                raise ConfigError("dt", "required for poc_in_N")
            self.steps_for(self.dt)
        elif self.study == "strong_in_dt":
            if any(p < 1 for p in self.p_values):
                raise ConfigError("p_values", "norms must be >= 1")
            self._check_ladder()
            if self.n_particles is None or self.n_particles < 1:
                raise ConfigError("n_particles", "required positive particle count for strong_in_dt")
        else:
            if any(p <= 0 for p in self.p_values):
                raise ConfigError("p_values", "moment orders must be positive")
            if self.dt_ladder:
                self._check_ladder()
                if self.n_particles is None or self.n_particles < 1:
                    raise ConfigError("n_particles", "required when auditing over dt_ladder")
            elif self.particle_counts:
                if self.dt is None:
                    raise ConfigError("dt", "required when auditing over particle_counts")
                self.steps_for(self.dt)
                if any(n < 1 for n in self.particle_counts):
                    raise ConfigError("particle_counts", "counts must be positive")
            else:
                raise ConfigError("dt_ladder", "moment_audit needs dt_ladder or particle_counts")
        return self

    def _check_counts(self, allow_self_coupling: bool) -> None:
        counts = self.particle_counts
        if not counts:
            raise ConfigError("particle_counts", "must not be empty")
        if any(int(n) != n or n < 2 for n in counts):
            raise ConfigError("particle_counts", "counts must be integers >= 2")
        if list(counts) != sorted(set(counts)):
            raise ConfigError("particle_counts", "must be strictly ascending")
        if self.proxy_count is None:
            raise ConfigError("proxy_count", "required for poc_in_N")
        limit = max(counts)
        if self.proxy_count < limit or (self.proxy_count == limit and not allow_self_coupling):
            raise ConfigError("proxy_count", f"proxy_count must exceed every particle count (max {limit})")

    def finest_steps(self) -> int:
        """Step count of the reference grid of a dt study (finest ladder entry by default)."""
        if self.reference_dt is not None:
            return self.steps_for(self.reference_dt, "reference_dt")
        return self.steps_for(self.dt_ladder[0], "dt_ladder")

    def _check_ladder(self) -> None:
        ladder = self.dt_ladder
        if len(ladder) < 2:
            raise ConfigError("dt_ladder", "needs at least two step sizes")
        if list(ladder) != sorted(set(ladder)):
            raise ConfigError("dt_ladder", "must be strictly ascending")
        if self.reference_dt is not None and self.reference_dt > ladder[0]:
            raise ConfigError("reference_dt", "must not be coarser than the finest ladder entry")
        finest = self.finest_steps()
        for dt in ladder:
            if finest % self.steps_for(dt, "dt_ladder"):
                raise ConfigError("dt_ladder", f"step count for dt={dt} does not divide the reference step count {finest}")


def _run(model, n, grid, plan, gamma, **context):
    try:
        return simulate(model, n, grid, plan, "terminal", gamma).terminal
    except DivergenceError as exc:
        exc.context.update(context)
        raise


def _model(config, model):
    return build_scenario(config.scenario, config.d) if model is None else model


def run_poc_study(config: ExperimentConfig, allow_self_coupling: bool = False,
                  model: Optional[ModelSpec] = None) -> List[RateReport]:
    """Coupled PoC error against a shared proxy, one report per norm ``p``.

    ``model`` replaces the named scenario (the name still labels the report).
    """
    config = config.validate(allow_self_coupling)
    if config.study != "poc_in_N":
        raise ConfigError("study", "run_poc_study needs study poc_in_N")
    model = _model(config, model)
    m = config.steps_for(config.dt)
    grid = TimeGrid(config.T, m)
    seeds = config.resolved_seeds()
    # errors[p][count] -> per-seed values, filled in seed order
    errors = {p: {n: [] for n in config.particle_counts} for p in config.p_values}
    for seed in seeds:
        plan = NoisePlan(seed, m, model.noise_dim, config.T)
        proxy = _run(model, config.proxy_count, grid, plan, config.gamma, seed=seed, N=config.proxy_count)
        for n in config.particle_counts:
            small = _run(model, n, grid, plan, config.gamma, seed=seed, N=n)
            for p in config.p_values:
                errors[p][n].append(lp_coupled_error(small, proxy, p))
        log.info("seed %s done", seed)
    return [_report(config, p, errors[p]) for p in config.p_values]


def run_dt_study(config: ExperimentConfig, model: Optional[ModelSpec] = None) -> List[RateReport]:
    """Coupled strong error of each ladder step size against a reference run.

    The reference uses ``reference_dt`` when set, else the finest ladder entry
    (whose own row is then exactly zero and left out of the fit). Coarse
    increments are sums of the reference increments.
    """
    config = config.validate()
    if config.study != "strong_in_dt":
        raise ConfigError("study", "run_dt_study needs study strong_in_dt")
    model = _model(config, model)
    finest = config.finest_steps()
    fine_grid = TimeGrid(config.T, finest)
    errors = {p: {dt: [] for dt in config.dt_ladder} for p in config.p_values}
    for seed in config.resolved_seeds():
        plan = NoisePlan(seed, finest, model.noise_dim, config.T)
        reference = _run(model, config.n_particles, fine_grid, plan, config.gamma, seed=seed, dt=fine_grid.dt)
        for dt in config.dt_ladder:
            grid = TimeGrid(config.T, config.steps_for(dt, "dt_ladder"))
            coarse = reference if grid.step_count == finest else _run(
                model, config.n_particles, grid, plan, config.gamma, seed=seed, dt=dt)
            for p in config.p_values:
                errors[p][dt].append(lp_coupled_error(coarse, reference, p))
    return [_report(config, p, errors[p]) for p in config.p_values]


def _report(config: ExperimentConfig, p: float, table: dict) -> RateReport:
    rows = []
    for x, values in table.items():
        mean, stderr = summarize(values)
        rows.append(RateRow(float(x), mean, stderr, len(values)))
    return RateReport(config.label, float(p), rows).fit()


@dataclass(frozen=True)
class MomentRow:
    abscissa: float
    p: float
    moment_mean: float
    moment_stderr: float
    moment_max: float
    reps: int
    finite: bool


@dataclass
class MomentAudit:
    study: str
    rows: List[MomentRow] = field(default_factory=list)
    divergences: List[str] = field(default_factory=list)

    @property
    def all_finite(self) -> bool:
        return all(r.finite for r in self.rows) and not self.divergences

    @property
    def max_moment(self) -> float:
        return max(r.moment_max for r in self.rows)

    def to_dict(self) -> dict:
        return {
            "study": self.study,
            "rows": [vars(r).copy() for r in self.rows],
            "divergences": list(self.divergences),
            "all_finite": self.all_finite,
        }


def run_moment_audit(config: ExperimentConfig, model: Optional[ModelSpec] = None) -> MomentAudit:
    """Terminal empirical moments over a dt ladder or a particle-count ladder.

    Divergence is recorded as a non-finite entry, never raised.
    """
    config = config.validate()
    model = _model(config, model)
    if config.dt_ladder:
        finest = config.finest_steps()
        cells = [(dt, config.n_particles, config.steps_for(dt, "dt_ladder")) for dt in config.dt_ladder]
    else:
        finest = config.steps_for(config.dt)
        cells = [(n, n, finest) for n in config.particle_counts]
    audit = MomentAudit(config.label)
    values = {(x, p): [] for x, _, _ in cells for p in config.p_values}
    for seed in config.resolved_seeds():
        plan = NoisePlan(seed, finest, model.noise_dim, config.T)
        for x, n, m in cells:
            try:
                terminal = simulate(model, n, TimeGrid(config.T, m), plan, "terminal", config.gamma).terminal
                moments = {p: empirical_moment(terminal, p) for p in config.p_values}
            except DivergenceError as exc:
                audit.divergences.append(f"seed={seed} abscissa={x}: {exc}")
                moments = {p: math.inf for p in config.p_values}
            for p in config.p_values:
                values[(x, p)].append(moments[p])
    for x, _, _ in cells:
        for p in config.p_values:
            v = np.asarray(values[(x, p)])
            finite = bool(np.all(np.isfinite(v)))
            mean, stderr = summarize(v) if finite else (math.inf, math.inf)
            audit.rows.append(MomentRow(float(x), float(p), mean, stderr, float(v.max()), v.size, finite))
    return audit


def run_study(config: ExperimentConfig):
    if config.study == "poc_in_N":
        return run_poc_study(config)
    if config.study == "strong_in_dt":
        return run_dt_study(config)
    return run_moment_audit(config)


def with_overrides(config: ExperimentConfig, **changes) -> ExperimentConfig:
    return replace(config, **changes)
