"""Counter-based Brownian increments and the tamed Euler-Maruyama particle stepper.

Each particle ``i`` owns a Philox stream keyed by ``(master_seed, i)``. The
fine-grid increment for step ``n`` and component ``k`` is read from raw
output position ``n * m0 + k`` of lane 0 and mapped to a normal by the
inverse CDF; lane 1 feeds the initial condition. Nothing depends on the
particle count, so systems of different sizes built from the same plan are
synchronously coupled. Coarse increments are sums of fine ones, taken
pairwise level by level so that grids ``M`` and ``2M`` stay exactly
consistent.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional

import numpy as np
from numpy.random import Generator, Philox
from scipy.special import ndtri

from .errors import DivergenceError, InvalidInputError
from .model import DEFAULT_GAMMA, Ensemble, ModelSpec, interaction_terms, tame_drift

NOISE_LANE = 0
INIT_LANE = 1

_MASK64 = (1 << 64) - 1


@dataclass(frozen=True)
class NoisePlan:
    master_seed: int
    fine_step_count: int
    noise_dim: int
    horizon: float = 1.0

    def __post_init__(self):
        if self.fine_step_count < 1:
            raise InvalidInputError("fine_step_count must be positive")
        if self.noise_dim < 1:
            raise InvalidInputError("noise_dim must be positive")
        if not self.horizon > 0:
            raise InvalidInputError("horizon must be positive")

    @property
    def fine_dt(self) -> float:
        return self.horizon / self.fine_step_count

    def _bit_generator(self, i: int, lane: int) -> Philox:
        if i < 0:
            raise InvalidInputError(f"particle index must be nonnegative, got {i}")
        return Philox(key=[self.master_seed & _MASK64, i], counter=[0, 0, 0, lane])

    def fine_increments(self, i: int) -> np.ndarray:
        """All fine-grid increments of particle ``i``, shape ``(M_fine, m0)``."""
        count = self.fine_step_count * self.noise_dim
        raw = self._bit_generator(i, NOISE_LANE).random_raw(count)
        # 53-bit midpoint uniforms lie strictly inside (0, 1).
        u = ((raw >> np.uint64(11)).astype(float) + 0.5) * 2.0**-53
        z = ndtri(u)
        return (np.sqrt(self.fine_dt) * z).reshape(self.fine_step_count, self.noise_dim)

    def initial_rng(self, i: int) -> Generator:
        return Generator(self._bit_generator(i, INIT_LANE))


@dataclass(frozen=True)
class TimeGrid:
    horizon: float
    step_count: int

    def __post_init__(self):
        if not self.horizon > 0:
            raise InvalidInputError("horizon must be positive")
        if int(self.step_count) != self.step_count or self.step_count < 0:
            raise InvalidInputError("step_count must be a nonnegative integer")

    @property
    def dt(self) -> float:
        if self.step_count == 0:
            return self.horizon
        return self.horizon / self.step_count

    def time(self, n: int) -> float:
        return n * self.dt

    def grid_time(self, t: float) -> float:
        """Largest grid point not exceeding ``t``."""
        return np.floor(t / self.dt) * self.dt

    def check_plan(self, plan: NoisePlan) -> None:
        if self.step_count == 0:
            return
        if plan.fine_step_count % self.step_count:
            raise InvalidInputError(
                f"grid with {self.step_count} steps does not divide the plan's "
                f"{plan.fine_step_count} fine steps"
            )
        if not np.isclose(plan.horizon, self.horizon, rtol=0, atol=1e-12 * self.horizon):
            raise InvalidInputError(f"grid horizon {self.horizon} differs from plan horizon {plan.horizon}")


def _coarsen(fine: np.ndarray, fine_count: int, count: int) -> np.ndarray:
    if count == fine_count:
        return fine
    if fine_count % (2 * count) == 0:
        sub = _coarsen(fine, fine_count, 2 * count)
        return sub[:, 0::2] + sub[:, 1::2]
    ratio = fine_count // count
    blocks = fine.reshape(fine.shape[0], count, ratio, fine.shape[-1])
    return np.add.accumulate(blocks, axis=2)[:, :, -1]


def increments(plan: NoisePlan, particles, grid: TimeGrid) -> np.ndarray:
    """Coarse increments for the given particle indices, shape ``(len, M, m0)``."""
    grid.check_plan(plan)
    particles = list(particles)
    if grid.step_count == 0:
        return np.zeros((len(particles), 0, plan.noise_dim))
    fine = np.stack([plan.fine_increments(i) for i in particles])
    return _coarsen(fine, plan.fine_step_count, grid.step_count)


def brownian_increment(plan: NoisePlan, i: int, n: int, grid: TimeGrid) -> np.ndarray:
    if not 0 <= n < grid.step_count:
        raise InvalidInputError(f"step index {n} outside [0, {grid.step_count})")
    return increments(plan, [i], grid)[0, n]


def initial_ensemble(model: ModelSpec, n_particles: int, plan: NoisePlan, grid: TimeGrid) -> Ensemble:
    if n_particles < 1:
        raise InvalidInputError("particle count must be at least 1")
    states = np.stack([
        np.asarray(model.initial_sampler(plan.initial_rng(i)), dtype=float).reshape(model.state_dim)
        for i in range(n_particles)
    ])
    return Ensemble(states, 0, grid.dt)


def step(ens: Ensemble, model: ModelSpec, grid: TimeGrid, plan: Optional[NoisePlan] = None,
         gamma: float = DEFAULT_GAMMA, dW: Optional[np.ndarray] = None, tamed: bool = True) -> Ensemble:
    """Advance every particle by one tamed Euler-Maruyama step.

    All interaction terms read the frozen input ensemble. ``dW`` (shape
    ``(N, m0)``) overrides the increments drawn from ``plan``.
    """
    n = ens.time_index
    if n >= grid.step_count:
        raise InvalidInputError(f"ensemble at index {n} is already at the end of the grid")
    if ens.state_dim != model.state_dim:
        raise InvalidInputError("ensemble and model dimensions differ")
    x = ens.states
    if dW is None:
        if plan is None:
            raise InvalidInputError("either a noise plan or explicit increments are required")
        dW = increments(plan, range(ens.particle_count), grid)[:, n]
    dW = np.asarray(dW, dtype=float)
    if dW.shape != (ens.particle_count, model.noise_dim):
        raise InvalidInputError(f"increments have shape {dW.shape}, expected {(ens.particle_count, model.noise_dim)}")
    dt = grid.dt
    a = np.asarray(model.drift(x), dtype=float)
    if not np.all(np.isfinite(a)):
        _raise_divergence(a, n, "drift evaluation")
    drift = tame_drift(a, dt, gamma) if tamed else a
    f, g = interaction_terms(model, x)
    new = x + drift * dt + f * dt + np.einsum("ndm,nm->nd", g, dW)
    if not np.all(np.isfinite(new)):
        _raise_divergence(new, n + 1, "state update")
    return Ensemble(new, n + 1, dt)


def _raise_divergence(values: np.ndarray, step_index: int, where: str):
    bad = np.flatnonzero(~np.all(np.isfinite(values.reshape(values.shape[0], -1)), axis=1))
    particle = int(bad[0])
    raise DivergenceError(
        f"non-finite value in {where} for particle {particle} at step {step_index}",
        particle=particle, step=step_index,
    )


@dataclass(frozen=True)
class Trajectory:
    ensembles: List[Ensemble]

    def __post_init__(self):
        idx = [e.time_index for e in self.ensembles]
        if not idx or any(b <= a for a, b in zip(idx, idx[1:])):
            raise InvalidInputError("trajectory time indices must be strictly increasing")
        if len({e.particle_count for e in self.ensembles}) != 1:
            raise InvalidInputError("particle count must be constant along a trajectory")

    @property
    def terminal(self) -> Ensemble:
        return self.ensembles[-1]

    @property
    def initial(self) -> Ensemble:
        return self.ensembles[0]


def simulate(model: ModelSpec, n_particles: int, grid: TimeGrid, plan: NoisePlan,
             mode: str = "terminal", gamma: float = DEFAULT_GAMMA, tamed: bool = True) -> Trajectory:
    """Run the particle system from ``t=0`` to the grid horizon.

    ``mode="full"`` keeps every grid ensemble, ``"terminal"`` only the last one.
    """
    if mode not in ("terminal", "full"):
        raise InvalidInputError(f"mode must be 'terminal' or 'full', got {mode!r}")
    if plan.noise_dim != model.noise_dim:
        raise InvalidInputError("plan and model noise dimensions differ")
    grid.check_plan(plan)
    ens = initial_ensemble(model, n_particles, plan, grid)
    dW = increments(plan, range(n_particles), grid)
    kept = [ens]
    for n in range(grid.step_count):
        ens = step(ens, model, grid, gamma=gamma, dW=dW[:, n], tamed=tamed)
        if mode == "full":
            kept.append(ens)
    if mode == "terminal":
        kept = [ens]
    return Trajectory(kept)
