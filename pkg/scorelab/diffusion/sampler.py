# Copyright The ScoreLab team.
#
# Licensed under the Apache License, Version 2.0 (the "License");
# you may not use this file except in compliance with the License.
# You may obtain a copy of the License at
#
#     http://www.apache.org/licenses/LICENSE-2.0
#
# Unless required by applicable law or agreed to in writing, software
# distributed under the License is distributed on an "AS IS" BASIS,
# WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
# See the License for the specific language governing permissions and
# limitations under the License.
"""Reverse-time samplers: the DDPM update and an exponential integrator of the reverse OU SDE.

Step ``k`` (``1 <= k <= K``) moves the state from ``times[k]`` down to ``times[k - 1]`` with
``delta = times[k] - times[k - 1]``. For a score value ``s = s(x, times[k])``:

* ``ddpm``: ``x' = (x - beta / sqrt(1 - alpha_bar) * eps_hat) / sqrt(alpha) + sqrt(beta) z`` with
  ``eps_hat = -sigma_{t_k} s``, which simplifies to ``exp(delta) (x + beta s) + sqrt(beta) z``.
* ``exponential``: ``x' = exp(delta) x + 2 (exp(delta) - 1) s + sqrt(exp(2 delta) - 1) z``, the exact
  solution of the reverse SDE over the step with the score frozen at ``times[k]``.

The last step (``k = 1``) uses ``z = 0``.
"""
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Tuple, Union

import numpy as np
from pytorch_lightning.utilities import rank_zero_info

from scorelab.core.exceptions import ConfigurationError, ContractError, DivergenceError, DivisionGuardError
from scorelab.core.registry import LabRegistry
from scorelab.diffusion.ou import forward_sample, TimeGrid
from scorelab.diffusion.targets import (
    gaussian_score_coefficients,
    GaussianMixtureTarget,
    marginal_at,
    sample_p0,
    true_score,
)

REVERSE_STEPS = LabRegistry("reverse_steps", kind="reverse step")

ScoreFn = Callable[[np.ndarray, float], np.ndarray]
LinearScoreFn = Callable[[float], Tuple[np.ndarray, np.ndarray]]

_INITS = ("exact", "standard_normal")


@dataclass(frozen=True)
class OracleScore:
    """The exact score ``grad log p_t`` of ``target`` as a score source."""

    target: GaussianMixtureTarget

    def __call__(self, x: np.ndarray, t: float) -> np.ndarray:
        return true_score(self.target, x, t)

    def linear_coefficients(self, t: float) -> Tuple[np.ndarray, np.ndarray]:
        return gaussian_score_coefficients(self.target, t)


def _step_scalars(grid: TimeGrid, k: int) -> Tuple[float, float, float]:
    if not 1 <= k <= grid.K:
        raise ContractError(f"Reverse step index must lie in [1, {grid.K}], found {k}")
    beta, alpha, alpha_bar = grid.ddpm_coeffs[k]
    if alpha_bar >= 1.0:
        raise DivisionGuardError(f"alpha_bar = 1 at step {k}: sigma_t vanishes at t={grid.times[k]}")
    return float(beta), float(alpha), float(alpha_bar)


def reverse_step_ddpm(x_t: np.ndarray, k: int, eps_hat: np.ndarray, z: np.ndarray, grid: TimeGrid) -> np.ndarray:
    """One DDPM ancestral step ``mu_tilde + sqrt(beta_k) z`` from ``times[k]`` to ``times[k - 1]``."""
    beta, alpha, alpha_bar = _step_scalars(grid, k)
    mu = (x_t - beta / math.sqrt(1.0 - alpha_bar) * eps_hat) / math.sqrt(alpha)
    return mu + math.sqrt(beta) * z


def reverse_step_exponential(
    x_t: np.ndarray, k: int, score_value: np.ndarray, z: np.ndarray, grid: TimeGrid
) -> np.ndarray:
    """One exponential-integrator step of the reverse OU SDE with the score frozen at ``times[k]``."""
    _step_scalars(grid, k)
    delta = float(grid.times[k] - grid.times[k - 1])
    growth = math.expm1(delta)
    return (1.0 + growth) * x_t + 2.0 * growth * score_value + math.sqrt(math.expm1(2.0 * delta)) * z


@REVERSE_STEPS(name="ddpm", eps_parametrized=True)
def _ddpm_from_score(x_t: np.ndarray, k: int, score_value: np.ndarray, z: np.ndarray, grid: TimeGrid) -> np.ndarray:
    sigma = math.sqrt(1.0 - grid.ddpm_coeffs[k, 2]) if 1 <= k <= grid.K else 0.0
    return reverse_step_ddpm(x_t, k, -sigma * score_value, z, grid)


REVERSE_STEPS(reverse_step_exponential, name="exponential", eps_parametrized=False)


def step_affine_map(grid: TimeGrid, k: int, variant: str) -> Tuple[float, float, float]:
    """``(a, c, v)`` with ``x' = a x + c s + sqrt(v) z`` for step ``k``; ``v`` is 0 on the last step."""
    beta, alpha, _ = _step_scalars(grid, k)
    if variant == "ddpm":
        a = 1.0 / math.sqrt(alpha)
        c, v = a * beta, beta
    elif variant == "exponential":
        delta = float(grid.times[k] - grid.times[k - 1])
        a, c, v = math.exp(delta), 2.0 * math.expm1(delta), math.expm1(2.0 * delta)
    else:
        raise ConfigurationError(f"Unknown reverse step {variant!r}, use one of {REVERSE_STEPS.available_keys()}")
    if k == 1:
        v = 0.0
    return a, c, v


@dataclass(frozen=True)
class SharedNoise:
    """Pre-drawn randomness for a reverse run so paired runs can share it.

    Args:
        init: ``(n, d)`` standard normal draws used for the initial state.
        steps: ``(K, n, d)`` standard normal draws; ``steps[K - k]`` drives step ``k``.
        x0: ``(n, d)`` draws from ``p_0`` coupling the exact initial state ``e^-T x0 + sigma_T init``.
    """

    init: np.ndarray
    steps: np.ndarray
    x0: Optional[np.ndarray] = None

    @property
    def n(self) -> int:
        return self.init.shape[0]


def draw_noise(
    rng: np.random.Generator,
    K: int,
    n: int,
    d: int,
    target: Optional[GaussianMixtureTarget] = None,
) -> SharedNoise:
    x0 = sample_p0(target, n, rng) if target is not None else None
    init = rng.standard_normal((n, d))
    steps = rng.standard_normal((K, n, d))
    return SharedNoise(init=init, steps=steps, x0=x0)


@dataclass(frozen=True)
class ReverseRunSpec:
    """Everything needed to run the reverse process.

    Args:
        grid: Time grid shared with training.
        score: ``"oracle"`` for the exact score of ``target``, or any callable ``(x, t) -> score``
            (a :class:`~scorelab.score.model.ScoreModel` or an :class:`OracleScore`).
        n_samples: Number of independent paths.
        init: ``"exact"`` draws the initial state from ``p_{t_K}``; ``"standard_normal"`` from ``N(0, I)``.
        variant: Key in ``REVERSE_STEPS``.
        target: Data distribution, required for the oracle score and the exact initialization.
    """

    grid: TimeGrid
    score: Union[str, ScoreFn] = "oracle"
    n_samples: int = 10_000
    init: str = "exact"
    variant: str = "ddpm"
    target: Optional[GaussianMixtureTarget] = None
    d: Optional[int] = None

    def __post_init__(self):
        if not (isinstance(self.n_samples, (int, np.integer)) and self.n_samples >= 1):
            raise ConfigurationError(f"`n_samples` must be a positive integer, found {self.n_samples}")
        if self.init not in _INITS:
            raise ConfigurationError(f"`init` must be one of {_INITS}, found {self.init!r}")
        REVERSE_STEPS.resolve(self.variant)
        if self.target is None and (self.init == "exact" or self.score == "oracle"):
            raise ConfigurationError("The oracle score and the exact initialization both need a `target`")
        if isinstance(self.score, str) and self.score != "oracle":
            raise ConfigurationError(f"Score sources given by name must be 'oracle', found {self.score!r}")
        if self.d is None:
            if self.target is None:
                raise ConfigurationError("Set `d` when no target is attached to the run")
            object.__setattr__(self, "d", self.target.d)

    @property
    def score_fn(self) -> ScoreFn:
        if isinstance(self.score, str):
            return OracleScore(self.target)
        return getattr(self.score, "evaluate", self.score)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "grid": self.grid.to_dict(),
            "score": self.score if isinstance(self.score, str) else type(self.score).__name__,
            "n_samples": int(self.n_samples),
            "init": self.init,
            "variant": self.variant,
            "target": self.target.to_dict() if self.target is not None else None,
            "d": int(self.d),
        }


@dataclass
class StepTelemetry:
    """Per-step record of score usage; ``gap_sq`` holds ``||s - s_ref||^2`` per path when a reference is given."""

    k: int
    t: float
    delta_t: float
    score_calls: int
    mean_score_sq: float
    gap_sq: Optional[np.ndarray] = field(default=None, repr=False)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "k": self.k,
            "t": self.t,
            "delta_t": self.delta_t,
            "score_calls": self.score_calls,
            "mean_score_sq": self.mean_score_sq,
        }


@dataclass
class GenerationResult:
    samples: np.ndarray
    telemetry: List[StepTelemetry]

    @property
    def score_calls(self) -> int:
        return sum(s.score_calls for s in self.telemetry)

    def drift_gaps(self) -> Tuple[np.ndarray, np.ndarray]:
        """Stack the recorded ``||s - s_ref||^2`` into ``(K, n)`` in forward time order, with the matching deltas."""
        if any(s.gap_sq is None for s in self.telemetry):
            raise ContractError("This run did not record a reference score")
        ordered = sorted(self.telemetry, key=lambda s: s.k)
        return np.stack([s.gap_sq for s in ordered]), np.array([s.delta_t for s in ordered])


def initial_state(spec: ReverseRunSpec, noise: SharedNoise) -> np.ndarray:
    if spec.init == "standard_normal":
        return noise.init.copy()
    if noise.x0 is None:
        raise ContractError("Exact initialization needs the coupled `x0` draws in the shared noise")
    return forward_sample(noise.x0, spec.grid.t_last, noise.init)


def _run_paths(
    spec: ReverseRunSpec,
    x: np.ndarray,
    steps: np.ndarray,
    reference: Optional[ScoreFn],
) -> Tuple[np.ndarray, List[StepTelemetry]]:
    grid = spec.grid
    step = REVERSE_STEPS.get(spec.variant)
    score_fn = spec.score_fn
    telemetry = []
    for k in range(grid.K, 0, -1):
        t = float(grid.times[k])
        score_value = np.asarray(score_fn(x, t), dtype=np.float64)
        gap_sq = None
        if reference is not None:
            gap_sq = np.sum((score_value - reference(x, t))**2, axis=1)
        z = steps[grid.K - k] if k > 1 else np.zeros_like(x)
        x = step(x, k, score_value, z, grid)
        if not np.all(np.isfinite(x)):
            raise DivergenceError(f"Non-finite reverse state after step {k} (t={t})", step=k)
        telemetry.append(
            StepTelemetry(
                k=k,
                t=t,
                delta_t=float(grid.times[k] - grid.times[k - 1]),
                score_calls=x.shape[0],
                mean_score_sq=float(np.mean(np.sum(score_value**2, axis=1))),
                gap_sq=gap_sq,
            )
        )
    return x, telemetry


def _merge_telemetry(chunks: List[List[StepTelemetry]]) -> List[StepTelemetry]:
    merged = []
    for per_step in zip(*chunks):
        calls = sum(s.score_calls for s in per_step)
        gaps = None if per_step[0].gap_sq is None else np.concatenate([s.gap_sq for s in per_step])
        merged.append(
            StepTelemetry(
                k=per_step[0].k,
                t=per_step[0].t,
                delta_t=per_step[0].delta_t,
                score_calls=calls,
                mean_score_sq=sum(s.mean_score_sq * s.score_calls for s in per_step) / calls,
                gap_sq=gaps,
            )
        )
    return merged


def generate(
    spec: ReverseRunSpec,
    rng: Optional[np.random.Generator] = None,
    noise: Optional[SharedNoise] = None,
    reference: Optional[ScoreFn] = None,
    workers: int = 1,
) -> GenerationResult:
    """Run ``K`` reverse steps from the configured initialization down to ``t0``.

    Args:
        spec: The run description.
        rng: Stream used to draw the noise when ``noise`` is not given.
        noise: Pre-drawn noise, shared between paired runs.
        reference: Optional second score field evaluated along the same trajectories; the per-path
            squared drift gap lands in the telemetry for trajectory-KL accounting.
        workers: Paths are split in this many contiguous chunks run on a thread pool. The noise is
            drawn up front, so the output does not depend on ``workers``.
    """
    grid = spec.grid
    if noise is None:
        if rng is None:
            raise ContractError("`generate` needs either an `rng` or pre-drawn `noise`")
        noise = draw_noise(rng, grid.K, spec.n_samples, spec.d, spec.target if spec.init == "exact" else None)
    if noise.init.shape != (spec.n_samples, spec.d) or noise.steps.shape != (grid.K, spec.n_samples, spec.d):
        raise ContractError(
            f"Shared noise of shape {noise.init.shape} / {noise.steps.shape} does not match "
            f"n_samples={spec.n_samples}, d={spec.d}, K={grid.K}"
        )
    if reference is not None:
        reference = getattr(reference, "evaluate", reference)
    x = initial_state(spec, noise)

    if workers <= 1:
        samples, telemetry = _run_paths(spec, x, noise.steps, reference)
        return GenerationResult(samples=samples, telemetry=telemetry)

    bounds = np.linspace(0, spec.n_samples, min(workers, spec.n_samples) + 1).astype(int)
    slices = [slice(lo, hi) for lo, hi in zip(bounds[:-1], bounds[1:])]
    rank_zero_info(f"Generating {spec.n_samples} paths in {len(slices)} chunks")
    with ThreadPoolExecutor(max_workers=workers) as pool:
        results = list(pool.map(lambda s: _run_paths(spec, x[s], noise.steps[:, s], reference), slices))
    samples = np.concatenate([r[0] for r in results])
    return GenerationResult(samples=samples, telemetry=_merge_telemetry([r[1] for r in results]))


def reverse_gaussian_moments(
    grid: TimeGrid,
    linear_score: LinearScoreFn,
    init_mean: np.ndarray,
    init_cov: np.ndarray,
    variant: str = "ddpm",
) -> Tuple[np.ndarray, np.ndarray]:
    """Exact law of the sampler output when the score is affine, ``s(x, t) = A(t) x + b(t)``.

    Both reverse steps are affine in ``x`` with Gaussian noise, so a Gaussian initial law stays Gaussian
    and its mean and covariance can be pushed through the grid exactly.
    """
    mean = np.asarray(init_mean, dtype=np.float64).copy()
    cov = np.atleast_2d(np.asarray(init_cov, dtype=np.float64)).copy()
    eye = np.eye(mean.shape[0])
    for k in range(grid.K, 0, -1):
        A, b = linear_score(float(grid.times[k]))
        a, c, v = step_affine_map(grid, k, variant)
        M = a * eye + c * np.asarray(A)
        mean = M @ mean + c * np.asarray(b)
        cov = M @ cov @ M.T + v * eye
    return mean, 0.5 * (cov + cov.T)


def exact_init_moments(target: GaussianMixtureTarget, grid: TimeGrid) -> Tuple[np.ndarray, np.ndarray]:
    return marginal_at(target, grid.t_last).component()
