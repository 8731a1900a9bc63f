"""Model specifications for McKean-Vlasov SDEs and their particle interaction terms.

Every coefficient function is vectorised over leading axes:

* drift ``a(x)`` maps ``(..., d) -> (..., d)``;
* a drift kernel maps ``(x, y_1, ..., y_q)`` with each argument ``(..., d)``
  to ``(..., d)``; a diffusion kernel maps them to ``(..., d, m0)``;
* outer functions ``A``/``B`` act on the aggregated kernel values (for the
  multi-kernel form they receive one aggregate per kernel).

Empirical averages include the self term ``j == i`` and accumulate in
ascending particle order (lexicographic order for tuples), so a particle's
interaction term does not depend on how the ensemble is split into blocks.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence, Union

import numpy as np
from scipy.special import expit

from ._parallel import ordered_map
from .errors import InvalidInputError, ResourceLimitError

Array = np.ndarray

DEFAULT_GAMMA = 0.5
DEFAULT_MAX_TUPLES = 2**26

# Upper bound on kernel evaluations held in memory at once.
_BLOCK_ELEMENTS = 2**22


def tame_drift(a_value, dt: float, gamma: float = DEFAULT_GAMMA) -> Array:
    """Return ``a / (1 + dt**gamma * |a|)``.

    ``a_value`` may be a scalar, a vector, or a stack of vectors (norm taken
    over the last axis). The result never exceeds ``min(|a|, dt**-gamma)``.
    """
    a = np.asarray(a_value, dtype=float)
    if not dt > 0:
        raise InvalidInputError(f"step size must be positive, got {dt}")
    if not 0 < gamma <= 0.5:
        raise InvalidInputError(f"gamma must lie in (0, 1/2], got {gamma}")
    if not np.all(np.isfinite(a)):
        raise InvalidInputError("drift value contains non-finite entries")
    if a.ndim == 0:
        size = np.abs(a)
    else:
        size = np.linalg.norm(a, axis=-1, keepdims=True)
    return a / (1.0 + dt**gamma * size)


# ---------------------------------------------------------------------------
# coefficient forms


@dataclass(frozen=True)
class SingleKernel:
    """``f = A(mean_j kappa(x, x_j))``, ``g = B(mean_j zeta(x, x_j))``."""

    outer_drift: Callable[[Array], Array]
    kernel_drift: Callable[[Array, Array], Array]
    outer_diff: Callable[[Array], Array]
    kernel_diff: Callable[[Array, Array], Array]

    @property
    def order(self) -> int:
        return 1


@dataclass(frozen=True)
class MultiKernel:
    """``f = A(mean kappa_1, ..., mean kappa_q)`` and likewise for ``g``."""

    outer_drift: Callable[..., Array]
    kernels_drift: Sequence[Callable[[Array, Array], Array]]
    outer_diff: Callable[..., Array]
    kernels_diff: Sequence[Callable[[Array, Array], Array]]

    def __post_init__(self):
        object.__setattr__(self, "kernels_drift", tuple(self.kernels_drift))
        object.__setattr__(self, "kernels_diff", tuple(self.kernels_diff))
        if len(self.kernels_drift) < 1 or len(self.kernels_diff) < 1:
            raise InvalidInputError("MultiKernel needs at least one drift and one diffusion kernel")
        if len(self.kernels_drift) != len(self.kernels_diff):
            raise InvalidInputError("MultiKernel drift and diffusion kernel counts differ")

    @property
    def q(self) -> int:
        return len(self.kernels_drift)

    @property
    def order(self) -> int:
        return 1


@dataclass(frozen=True)
class HigherOrder:
    """Kernels of ``q + 1`` arguments averaged over all ``N**q`` tuples."""

    q: int
    outer_drift: Callable[[Array], Array]
    kernel_drift: Callable[..., Array]
    outer_diff: Callable[[Array], Array]
    kernel_diff: Callable[..., Array]
    max_tuples: int = DEFAULT_MAX_TUPLES

    def __post_init__(self):
        if int(self.q) != self.q or self.q < 1:
            raise InvalidInputError(f"HigherOrder needs an integer q >= 1, got {self.q}")

    @property
    def order(self) -> int:
        return self.q


CoefficientForm = Union[SingleKernel, MultiKernel, HigherOrder]


@dataclass(frozen=True)
class AssumptionMeta:
    """Constants used only by assumption-validation tests."""

    one_sided_lipschitz: float
    growth_exponent: float
    kernel_lipschitz: tuple = ()


def standard_normal_sampler(d: int) -> Callable[[np.random.Generator], Array]:
    def sample(rng: np.random.Generator) -> Array:
        return rng.standard_normal(d)

    return sample


@dataclass(frozen=True)
class ModelSpec:
    state_dim: int
    noise_dim: int
    drift: Callable[[Array], Array]
    interaction: CoefficientForm
    initial_sampler: Callable[[np.random.Generator], Array]
    assumption_meta: Optional[AssumptionMeta] = None
    name: str = "custom"

    def __post_init__(self):
        if self.state_dim < 1 or self.noise_dim < 1:
            raise InvalidInputError("state_dim and noise_dim must be >= 1")
        d, m0 = self.state_dim, self.noise_dim
        zero = np.zeros(d)
        a0 = np.asarray(self.drift(zero), dtype=float)
        if a0.shape != (d,) or not np.all(np.isfinite(a0)):
            raise InvalidInputError("drift at the origin must be a finite vector of length state_dim")
        interaction_terms(self, zero[None, :])


@dataclass(frozen=True)
class Ensemble:
    """Particle states ``(N, d)`` at grid index ``time_index``. Immutable."""

    states: Array
    time_index: int = 0
    step_size: float = 1.0

    def __post_init__(self):
        states = np.array(self.states, dtype=float)
        if states.ndim == 1:
            states = states[:, None]
        if states.ndim != 2 or states.shape[0] < 1:
            raise InvalidInputError(f"states must be an (N, d) array with N >= 1, got shape {states.shape}")
        if not np.all(np.isfinite(states)):
            raise InvalidInputError("ensemble states must be finite")
        if self.time_index < 0:
            raise InvalidInputError("time_index must be nonnegative")
        if not self.step_size > 0:
            raise InvalidInputError("step_size must be positive")
        states.setflags(write=False)
        object.__setattr__(self, "states", states)

    @property
    def particle_count(self) -> int:
        return self.states.shape[0]

    @property
    def state_dim(self) -> int:
        return self.states.shape[1]

    def head(self, n: int) -> "Ensemble":
        return Ensemble(self.states[:n], self.time_index, self.step_size)


# ---------------------------------------------------------------------------
# empirical aggregation


def _check_cost(n: int, q: int, limit: Optional[int]) -> None:
    if limit is not None and q * np.log2(n) > np.log2(limit):
        raise ResourceLimitError(
            f"order-{q} interaction over {n} particles needs {n}**{q} kernel evaluations "
            f"per particle, above the ceiling of {limit}; reduce N or raise max_tuples"
        )


def _aggregate_block(kernel, x: Array, states: Array, q: int) -> Array:
    n, d = states.shape
    b = x.shape[0]
    # x varies along axis 0, y_m along axis m + 1.
    xs = x.reshape((b,) + (1,) * q + (d,))
    ys = [states.reshape((1,) + (1,) * m + (n,) + (1,) * (q - m - 1) + (d,)) for m in range(q)]
    values = np.asarray(kernel(xs, *ys), dtype=float)
    lead = (b,) + (n,) * q
    values = np.broadcast_to(values, lead + values.shape[len(lead):])
    flat = values.reshape((b, n**q) + values.shape[len(lead):])
    # add.accumulate is strictly sequential, giving ascending-index sums.
    total = np.add.accumulate(flat, axis=1)[:, -1]
    return total / float(n) ** q


@dataclass(frozen=True)
class SplitKernel:
    """Kernel whose entries come either from ``x`` alone or from a pairwise part.

    ``combine(local(x), pairwise(x, y...))`` is the full kernel value;
    ``combine`` must pick each output entry from one of its two arguments, so
    averaging over partners only has to touch the pairwise part.
    """

    local: Callable[[Array], Array]
    pairwise: Callable[..., Array]
    combine: Callable[[Array, Array], Array]

    def __call__(self, x, *ys):
        return self.combine(self.local(x), self.pairwise(x, *ys))


def aggregate_all(kernel, x: Array, states: Array, q: int = 1, width: int = 1,
                  max_tuples: Optional[int] = DEFAULT_MAX_TUPLES) -> Array:
    """Empirical kernel averages for every row of ``x`` against ``states``.

    Returns ``(B, *k)`` where row ``b`` is
    ``N**-q * sum over (j_1..j_q) of kernel(x[b], states[j_1], ..., states[j_q])``.
    """
    x = np.asarray(x, dtype=float)
    states = np.asarray(states, dtype=float)
    n = states.shape[0]
    _check_cost(n, q, max_tuples)
    if isinstance(kernel, SplitKernel):
        pair = aggregate_all(kernel.pairwise, x, states, q, x.shape[-1], max_tuples)
        return np.asarray(kernel.combine(kernel.local(x), pair), dtype=float)
    block = max(1, _BLOCK_ELEMENTS // (n**q * max(1, width)))
    starts = range(0, x.shape[0], block)
    parts = ordered_map(lambda s: _aggregate_block(kernel, x[s:s + block], states, q), starts)
    return np.concatenate(parts, axis=0)


def _ensemble_row(i: int, ens: Ensemble) -> Array:
    if not 0 <= i < ens.particle_count:
        raise InvalidInputError(f"particle index {i} outside [0, {ens.particle_count})")
    return ens.states[i:i + 1]


def aggregate_single(kernel, i: int, ens: Ensemble) -> Array:
    return aggregate_all(kernel, _ensemble_row(i, ens), ens.states, 1)[0]


def aggregate_multi(kernels, i: int, ens: Ensemble) -> list:
    kernels = list(kernels)
    if not kernels:
        raise InvalidInputError("kernel list is empty")
    row = _ensemble_row(i, ens)
    return [aggregate_all(k, row, ens.states, 1)[0] for k in kernels]


def aggregate_higher(kernel, q: int, i: int, ens: Ensemble,
                     max_tuples: Optional[int] = DEFAULT_MAX_TUPLES) -> Array:
    if int(q) != q or q < 1:
        raise InvalidInputError(f"q must be a positive integer, got {q}")
    return aggregate_all(kernel, _ensemble_row(i, ens), ens.states, int(q), max_tuples=max_tuples)[0]


def interaction_terms(model: ModelSpec, states: Array, x: Optional[Array] = None):
    """Drift ``(B, d)`` and diffusion ``(B, d, m0)`` interaction terms.

    ``x`` defaults to ``states``; all aggregates read the empirical measure of
    ``states``.
    """
    states = np.asarray(states, dtype=float)
    x = states if x is None else np.asarray(x, dtype=float)
    d, m0 = model.state_dim, model.noise_dim
    if states.ndim != 2 or states.shape[1] != d or x.ndim != 2 or x.shape[1] != d:
        raise InvalidInputError(f"states must have shape (N, {d})")
    form = model.interaction
    if isinstance(form, SingleKernel):
        drift = form.outer_drift(aggregate_all(form.kernel_drift, x, states, 1, d))
        diff = form.outer_diff(aggregate_all(form.kernel_diff, x, states, 1, d * m0))
    elif isinstance(form, MultiKernel):
        drift = form.outer_drift(*[aggregate_all(k, x, states, 1, d) for k in form.kernels_drift])
        diff = form.outer_diff(*[aggregate_all(k, x, states, 1, d * m0) for k in form.kernels_diff])
    elif isinstance(form, HigherOrder):
        drift = form.outer_drift(aggregate_all(form.kernel_drift, x, states, form.q, d, form.max_tuples))
        diff = form.outer_diff(aggregate_all(form.kernel_diff, x, states, form.q, d * m0, form.max_tuples))
    else:
        raise InvalidInputError(f"unsupported coefficient form {type(form).__name__}")
    drift, diff = np.asarray(drift, dtype=float), np.asarray(diff, dtype=float)
    if drift.shape != (x.shape[0], d):
        raise InvalidInputError(f"drift interaction has shape {drift.shape[1:]}, expected {(d,)}")
    if diff.shape != (x.shape[0], d, m0):
        raise InvalidInputError(f"diffusion interaction has shape {diff.shape[1:]}, expected {(d, m0)}")
    return drift, diff


def eval_interaction(model: ModelSpec, i: int, ens: Ensemble):
    """Interaction drift ``(d,)`` and diffusion ``(d, m0)`` seen by particle ``i``."""
    if ens.state_dim != model.state_dim:
        raise InvalidInputError(
            f"ensemble dimension {ens.state_dim} does not match model dimension {model.state_dim}"
        )
    drift, diff = interaction_terms(model, ens.states, _ensemble_row(i, ens))
    return drift[0], diff[0]


# ---------------------------------------------------------------------------
# built-in scenarios


def _poly_drift(power: int):
    def drift(x):
        return x - x**power

    return drift


def _identity(u):
    return u


def _column_matrix(x):
    d = x.shape[-1]
    return np.broadcast_to(x[..., None, :], x.shape[:-1] + (d, d))


def _replace_diagonal(matrix, diag):
    d = matrix.shape[-1]
    matrix, diag = np.broadcast_arrays(matrix, diag[..., :, None])
    return np.where(np.eye(d, dtype=bool), diag, matrix)


def _diag_matrix_kernel(diag_fn):
    """Kernel whose (k, l) entry is ``x_l`` off the diagonal and ``diag_fn(x_k, y_k)`` on it."""
    return SplitKernel(local=_column_matrix, pairwise=diag_fn, combine=_replace_diagonal)


def _example1(d: int) -> ModelSpec:
    form = SingleKernel(
        outer_drift=expit,
        kernel_drift=lambda x, y: np.arctan(x + y),
        outer_diff=np.sin,
        kernel_diff=lambda x, y: np.sqrt(x**2 + y**2)[..., None],
    )
    return ModelSpec(1, 1, _poly_drift(3), form, standard_normal_sampler(1),
                     AssumptionMeta(1.0, 3.0, (1.0, 1.0)), name="example1")


def _example2(d: int) -> ModelSpec:
    form = SingleKernel(
        outer_drift=np.sin,
        kernel_drift=lambda x, y: np.sign(x) * np.abs(x + y),
        outer_diff=np.cos,
        kernel_diff=_diag_matrix_kernel(lambda x, y: np.sqrt(x**2 + y**2)),
    )
    return ModelSpec(d, d, _poly_drift(3), form, standard_normal_sampler(d),
                     AssumptionMeta(1.0, 3.0), name="example2")


def _example3(d: int) -> ModelSpec:
    form = MultiKernel(
        # logistic of the difference of the two aggregates, as in the simulated scheme
        outer_drift=lambda u1, u2: expit(u1 - u2),
        kernels_drift=(lambda x, y: np.arctan(x + y), lambda x, y: np.arctan(x - y)),
        outer_diff=lambda v1, v2: np.sqrt(v1**2 + v2**2),
        kernels_diff=(
            _diag_matrix_kernel(lambda x, y: np.abs(x + y)),
            _diag_matrix_kernel(lambda x, y: np.abs(x - y)),
        ),
    )
    return ModelSpec(d, d, _poly_drift(5), form, standard_normal_sampler(d),
                     AssumptionMeta(1.0, 5.0), name="example3")


def _example4(d: int) -> ModelSpec:
    form = HigherOrder(
        q=2,
        outer_drift=np.tanh,
        kernel_drift=lambda x, y, z: np.abs(x + y + z),
        outer_diff=expit,
        kernel_diff=lambda x, y, z: ((x + y) / np.sqrt(1.0 + x**2 + y**2 + z**2))[..., None],
    )
    return ModelSpec(1, 1, _poly_drift(5), form, standard_normal_sampler(1),
                     AssumptionMeta(1.0, 5.0), name="example4")


@dataclass(frozen=True)
class ScenarioInfo:
    name: str
    builder: Callable[[int], ModelSpec]
    scalar_only: bool
    summary: str
    reference_setup: dict = field(default_factory=dict)


SCENARIOS = {
    "example1": ScenarioInfo(
        "example1", _example1, True,
        "scalar; a(x)=x-x^3, A=logistic, kappa=arctan(x+y), B=sin, zeta=sqrt(x^2+y^2)",
        {"dt": 2.0**-10, "proxy_count": 2**11, "particle_counts": [2**7, 2**8, 2**9, 2**10]},
    ),
    "example2": ScenarioInfo(
        "example2", _example2, False,
        "d-dim, m0=d; a(x)=x-x^3, A=sin, kappa_k=sign(x_k)|x_k+y_k|, B=cos, "
        "zeta: diagonal sqrt(x_k^2+y_k^2), off-diagonal column x_l",
        {"dt": 2.0**-10, "proxy_count": 2**11, "particle_counts": [2**7, 2**8, 2**9, 2**10]},
    ),
    "example3": ScenarioInfo(
        "example3", _example3, False,
        "d-dim, m0=d, two kernels; a(x)=x-x^5, A=logistic(u1-u2), kappa=arctan(x+y), arctan(x-y), "
        "B=sqrt(v1^2+v2^2), zeta diagonals |x_k+y_k|, |x_k-y_k|",
        {"dt": 2.0**-10, "proxy_count": 2**11, "particle_counts": [2**7, 2**8, 2**9, 2**10]},
    ),
    "example4": ScenarioInfo(
        "example4", _example4, True,
        "scalar, second-order interaction; a(x)=x-x^5, A=tanh, kappa=|x+y+z|, B=logistic, "
        "zeta=(x+y)/sqrt(1+x^2+y^2+z^2)",
        {"dt": 2.0**-10, "proxy_count": 2**8, "particle_counts": [2**4, 2**5, 2**6, 2**7]},
    ),
}


def build_scenario(name: str, d: int = 1) -> ModelSpec:
    """Construct a built-in scenario. Initial laws are i.i.d. standard normal."""
    info = SCENARIOS.get(name)
    if info is None:
        raise InvalidInputError(f"unknown scenario {name!r}; choose from {sorted(SCENARIOS)}")
    if int(d) != d or d < 1:
        raise InvalidInputError(f"dimension must be a positive integer, got {d}")
    if info.scalar_only and d != 1:
        raise InvalidInputError(f"scenario {name!r} is scalar; d must be 1, got {d}")
    return info.builder(int(d))
