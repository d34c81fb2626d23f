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
"""Denoising score matching objectives and constant-step SGD with increasing batches ``b_i = ceil(beta i)``."""
import json
import math
import os
from abc import ABC, abstractmethod
from dataclasses import asdict, dataclass, field
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
from pytorch_lightning.utilities import rank_zero_info, rank_zero_warn

from scorelab.core.exceptions import (
    ConfigurationError,
    ContractError,
    DivergenceError,
    DivisionGuardError,
    DomainError,
    NumericHealthError,
)
from scorelab.core.utils import ArrayLike, as_points, check_finite, check_time, mean_and_stderr, split_rng
from scorelab.diffusion.ou import sigma_sq, TimeGrid
from scorelab.diffusion.targets import GaussianMixtureTarget, marginal_at, sample_marginal, sample_p0, true_score
from scorelab.score.model import empirical_linear_minimizer, LinearScoreModel, ScoreModel

_MODES = ("shared", "per_timestep")


@dataclass(frozen=True)
class TrainConfig:
    """SGD settings.

    Args:
        eta: Constant step size.
        beta_batch: Batch growth rate, ``b_i = ceil(beta_batch * i)``.
        budget: Total number of samples SGD may consume.
        grid: Time grid whose times are used for training.
        seed: Seed of the minibatch stream.
        mode: ``shared`` trains one network on all grid times, ``per_timestep`` one model per time.
        smoothness_L_hat: Estimated smoothness; ``eta > 1 / smoothness_L_hat`` only warns.
        eval_every: Population loss is recorded every this many iterations (and at the last one).
    """

    eta: float
    beta_batch: float = 1.0
    budget: int = 10_000
    grid: Optional[TimeGrid] = None
    seed: int = 0
    mode: str = "shared"
    smoothness_L_hat: Optional[float] = None
    eval_every: int = 1

    def __post_init__(self):
        if not (math.isfinite(self.eta) and self.eta > 0):
            raise ConfigurationError(f"`eta` must be positive, found {self.eta}")
        if not (math.isfinite(self.beta_batch) and self.beta_batch > 0):
            raise ConfigurationError(f"`beta_batch` must be positive, found {self.beta_batch}")
        if not (isinstance(self.budget, (int, np.integer)) and self.budget >= 1):
            raise ConfigurationError(f"The sample budget must be a positive integer, found {self.budget}")
        if self.mode not in _MODES:
            raise ConfigurationError(f"`mode` must be one of {_MODES}, found {self.mode!r}")
        if self.eval_every < 1:
            raise ConfigurationError(f"`eval_every` must be positive, found {self.eval_every}")


@dataclass
class TraceRecord:
    iteration: int
    batch_size: int
    loss: float
    population_loss: Optional[float]
    grad_norm: float
    samples_used: int


@dataclass
class SGDTrace:
    """Per-iteration history of an SGD run.

    ``population_loss`` of record ``i`` is measured at the iterate produced by iteration ``i``;
    ``initial_population_loss`` belongs to the starting point. On the quadratic testbed ``rate_bound``
    holds the unrolled bound on the final suboptimality.
    """

    records: List[TraceRecord] = field(default_factory=list)
    initial_population_loss: Optional[float] = None
    optimum: Optional[float] = None
    optimum_source: str = "none"
    rate_bound: Optional[float] = None

    def __len__(self) -> int:
        return len(self.records)

    @property
    def samples_used(self) -> int:
        return self.records[-1].samples_used if self.records else 0

    @property
    def batch_sizes(self) -> np.ndarray:
        return np.array([r.batch_size for r in self.records], dtype=np.int64)

    def population_losses(self) -> np.ndarray:
        return np.array([np.nan if r.population_loss is None else r.population_loss for r in self.records])

    def suboptimality(self) -> np.ndarray:
        """``Delta_i = L(theta_i) - L*`` for every recorded iterate (needs a known or estimated optimum)."""
        if self.optimum is None:
            raise ContractError("The trace carries no optimum, `Delta_i` is undefined")
        return self.population_losses() - self.optimum

    def final_suboptimality(self) -> float:
        return float(self.suboptimality()[-1])

    def save(self, directory: str, filename: str = "trace.jsonl") -> str:
        os.makedirs(directory, exist_ok=True)
        path = os.path.join(directory, filename)
        with open(path, "w") as fp:
            for record in self.records:
                fp.write(json.dumps(asdict(record), sort_keys=True) + "\n")
        meta = {
            "initial_population_loss": self.initial_population_loss,
            "optimum": self.optimum,
            "optimum_source": self.optimum_source,
            "rate_bound": self.rate_bound,
        }
        with open(os.path.join(directory, "trace_meta.json"), "w") as fp:
            json.dump(meta, fp, indent=2, sort_keys=True)
        return path

    @classmethod
    def load(cls, directory: str, filename: str = "trace.jsonl") -> "SGDTrace":
        with open(os.path.join(directory, filename)) as fp:
            records = [TraceRecord(**json.loads(line)) for line in fp if line.strip()]
        meta_path = os.path.join(directory, "trace_meta.json")
        meta = {}
        if os.path.exists(meta_path):
            with open(meta_path) as fp:
                meta = json.load(fp)
        return cls(records=records, **meta)


def batch_schedule(beta: float, budget: int) -> List[int]:
    """The schedule ``b_i = ceil(beta i)``, stopped before the cumulative size would exceed ``budget``.

    >>> batch_schedule(1.0, 10)
    [1, 2, 3, 4]
    """
    sizes, used, i = [], 0, 1
    while True:
        b = int(math.ceil(beta * i))
        if used + b > budget:
            return sizes
        sizes.append(b)
        used += b
        i += 1


def recursion_bound(delta_i: float, eta: float, mu: float, L: float, noise_var: float, b_i: int) -> float:
    """One-step bound ``(1 - eta mu) Delta_i + L eta^2 sigma^2 / (2 b_i)``."""
    return (1.0 - eta * mu) * delta_i + L * eta**2 * noise_var / (2.0 * b_i)


def unrolled_rate_bound(
    delta_1: float,
    eta: float,
    mu: float,
    L: float,
    noise_var: float,
    beta: float,
    iterations: int,
) -> float:
    """Bound on ``Delta`` after ``iterations`` updates: ``rho^I Delta_1 + L eta sigma^2 / (2 beta mu I)``."""
    if iterations < 1:
        return delta_1
    rho = 1.0 - eta * mu
    return rho**iterations * delta_1 + L * eta * noise_var / (2.0 * beta * mu * iterations)


class LossOracle(ABC):
    """Source of losses and gradients over a flat parameter vector."""

    @property
    @abstractmethod
    def dim(self) -> int:
        """Number of parameters."""

    @abstractmethod
    def minibatch(self, theta: np.ndarray, batch_size: int, rng: np.random.Generator) -> Tuple[float, np.ndarray]:
        """Stochastic loss and gradient from ``batch_size`` fresh samples."""

    @abstractmethod
    def population(self, theta: np.ndarray) -> Tuple[float, np.ndarray]:
        """Deterministic (exact or fixed-sample) loss and gradient."""

    def optimum(self) -> Tuple[Optional[float], str]:
        """``(L*, source)``; ``source`` is ``closed_form``, ``mc`` or ``none``."""
        return None, "none"

    def minimizer(self) -> Optional[np.ndarray]:
        return None

    def hessian(self) -> Optional[np.ndarray]:
        return None

    def smoothness(self) -> Optional[float]:
        hess = self.hessian()
        return None if hess is None else float(np.max(np.linalg.eigvalsh(hess)))


class QuadraticOracle(LossOracle):
    """``L(theta) = 0.5 (theta - theta*)^T H (theta - theta*) + L*`` with additive gradient noise.

    Minibatch gradients carry isotropic Gaussian noise of total variance ``sigma^2 / b``.
    """

    def __init__(
        self,
        hessian: ArrayLike,
        theta_star: Optional[ArrayLike] = None,
        sigma: float = 0.0,
        L_star: float = 0.0,
    ):
        H = np.atleast_2d(np.asarray(hessian, dtype=np.float64))
        if H.shape[0] != H.shape[1] or np.max(np.abs(H - H.T)) > 1e-12:
            raise ConfigurationError("The quadratic testbed needs a symmetric Hessian")
        self.H = H
        self.theta_star = np.zeros(H.shape[0]) if theta_star is None else np.asarray(theta_star, dtype=np.float64)
        self.sigma = float(sigma)
        self.L_star = float(L_star)

    @classmethod
    def scalar(cls, lam: float, sigma: float = 0.0) -> "QuadraticOracle":
        return cls([[lam]], sigma=sigma)

    @property
    def dim(self) -> int:
        return self.H.shape[0]

    def population(self, theta: np.ndarray) -> Tuple[float, np.ndarray]:
        diff = np.asarray(theta, dtype=np.float64) - self.theta_star
        grad = self.H @ diff
        return float(0.5 * diff @ grad + self.L_star), grad

    def minibatch(self, theta: np.ndarray, batch_size: int, rng: np.random.Generator) -> Tuple[float, np.ndarray]:
        loss, grad = self.population(theta)
        noise = rng.standard_normal(self.dim) * self.sigma / math.sqrt(batch_size * self.dim)
        return loss, grad + noise

    def optimum(self) -> Tuple[Optional[float], str]:
        return self.L_star, "closed_form"

    def minimizer(self) -> Optional[np.ndarray]:
        return self.theta_star.copy()

    def hessian(self) -> Optional[np.ndarray]:
        return self.H.copy()


def _loss_and_grad(
    model: ScoreModel,
    theta: np.ndarray,
    loss_fn: Callable[[ScoreModel], torch.Tensor],
) -> Tuple[float, np.ndarray]:
    model.set_flat_params(theta)
    params = list(model.parameters())
    loss = loss_fn(model)
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    flat = torch.cat([(torch.zeros_like(p) if g is None else g).reshape(-1) for g, p in zip(grads, params)])
    return float(loss.detach()), flat.numpy()


@dataclass(frozen=True)
class DenoisingBatch:
    """Training items ``(x0_i, t_i, noise_i)``; ``x_t = e^-t x0 + sigma_t noise``."""

    x0: np.ndarray
    t: np.ndarray
    noise: np.ndarray

    def __post_init__(self):
        noise = as_points(self.noise)
        x0 = as_points(self.x0, noise.shape[1])
        t = np.broadcast_to(np.asarray(self.t, dtype=np.float64), (noise.shape[0], )).copy()
        if x0.shape != noise.shape:
            raise ContractError(f"x0 has shape {x0.shape} but noise has shape {noise.shape}")
        object.__setattr__(self, "x0", x0)
        object.__setattr__(self, "noise", noise)
        object.__setattr__(self, "t", t)

    def __len__(self) -> int:
        return self.noise.shape[0]

    @property
    def x_t(self) -> np.ndarray:
        return np.exp(-self.t)[:, None] * self.x0 + np.sqrt(sigma_sq(self.t))[:, None] * self.noise

    def subset(self, index: np.ndarray) -> "DenoisingBatch":
        return DenoisingBatch(x0=self.x0[index], t=self.t[index], noise=self.noise[index])


def draw_denoising_batch(
    target: GaussianMixtureTarget,
    times: Sequence[float],
    n: int,
    rng: np.random.Generator,
) -> DenoisingBatch:
    """Fresh items with ``x0 ~ p_0``, ``t`` uniform over ``times`` and standard normal noise."""
    x0 = sample_p0(target, n, rng)
    times = np.asarray(times, dtype=np.float64)
    t = times[rng.integers(0, times.size, size=n)] if times.size > 1 else np.full(n, float(times[0]))
    noise = rng.standard_normal((n, target.d))
    return DenoisingBatch(x0=x0, t=t, noise=noise)


def _check_batch(batch: DenoisingBatch, grid: Optional[TimeGrid]) -> None:
    if len(batch) == 0:
        raise ContractError("The denoising batch is empty")
    for name, arr in (("x0", batch.x0), ("t", batch.t), ("noise", batch.noise)):
        if not np.all(np.isfinite(arr)):
            raise NumericHealthError(f"Non-finite entries in batch `{name}`")
    if np.any(batch.t < 0):
        raise DomainError("Batch times must be non-negative")
    if np.any(sigma_sq(batch.t) == 0):
        raise DivisionGuardError("sigma_t = 0 for a batch item at t = 0")
    if grid is not None and (np.any(batch.t < grid.times[0] - 1e-12) or np.any(batch.t > grid.times[-1] + 1e-12)):
        raise DomainError(f"Batch times must lie within [{grid.times[0]}, {grid.times[-1]}]")


def denoising_loss_tensor(model: ScoreModel, batch: DenoisingBatch) -> torch.Tensor:
    x_t = torch.as_tensor(batch.x_t)
    t = torch.as_tensor(batch.t)
    eps_hat = model.eps(x_t, t)
    return ((torch.as_tensor(batch.noise) - eps_hat)**2).sum(dim=1).mean()


def denoising_loss(
    model: ScoreModel,
    batch: DenoisingBatch,
    grid: Optional[TimeGrid] = None,
) -> Tuple[float, np.ndarray]:
    """Mean of ``||noise_i - eps_theta(x_{t_i}, t_i)||^2`` over the batch and its parameter gradient."""
    _check_batch(batch, grid)
    model.check_health()
    return _loss_and_grad(model, model.flat_params(), lambda m: denoising_loss_tensor(m, batch))


def population_score_loss(
    model: ScoreModel,
    target: GaussianMixtureTarget,
    t: float,
    mc_n: int,
    rng: np.random.Generator,
) -> Tuple[float, float]:
    """Monte-Carlo ``E_{x ~ p_t} ||s_theta(x, t) - grad log p_t(x)||^2`` with its standard error."""
    if mc_n < 100:
        raise DomainError(f"`mc_n` must be at least 100, found {mc_n}")
    t = check_time(t)
    x = sample_marginal(target, t, mc_n, rng)
    sq = np.sum((model.evaluate(x, t) - true_score(target, x, t))**2, axis=1)
    return mean_and_stderr(sq)


def bayes_denoising_loss(target: GaussianMixtureTarget, t: float, x: Optional[np.ndarray] = None) -> Tuple[float, str]:
    """Smallest achievable denoising loss at ``t``: ``d - sigma_t^2 E||grad log p_t||^2``.

    Closed form for a single Gaussian, otherwise a Monte-Carlo estimate over ``x``.
    """
    s2 = float(sigma_sq(t))
    if target.is_gaussian:
        _, cov = marginal_at(target, t).component()
        return target.d - s2 * float(np.trace(np.linalg.inv(cov))), "closed_form"
    if x is None:
        raise ContractError("A Monte-Carlo sample is needed for mixture targets")
    return target.d - s2 * float(np.mean(np.sum(true_score(target, x, t)**2, axis=1))), "mc"


class ScoreLossOracle(LossOracle):
    """Score-matching loss at one time against the exact score.

    ``population`` uses a fixed Monte-Carlo sample of ``p_t`` drawn at construction, so it is a
    deterministic function of ``theta``; ``minibatch`` draws fresh points.
    """

    def __init__(
        self,
        model: ScoreModel,
        target: GaussianMixtureTarget,
        t: float,
        mc_n: int,
        rng: np.random.Generator,
    ):
        if mc_n < 100:
            raise DomainError(f"`mc_n` must be at least 100, found {mc_n}")
        self.model = model.with_params(model.flat_params())
        self.target = target
        self.t = check_time(t)
        self.x = sample_marginal(target, self.t, mc_n, rng)
        self.s_star = true_score(target, self.x, self.t)

    @property
    def dim(self) -> int:
        return self.model.num_params

    def _loss(self, x: np.ndarray, s_star: np.ndarray) -> Callable[[ScoreModel], torch.Tensor]:
        x, s_star = torch.as_tensor(x), torch.as_tensor(s_star)
        return lambda m: ((m(x, self.t) - s_star)**2).sum(dim=1).mean()

    def population(self, theta: np.ndarray) -> Tuple[float, np.ndarray]:
        return _loss_and_grad(self.model, theta, self._loss(self.x, self.s_star))

    def minibatch(self, theta: np.ndarray, batch_size: int, rng: np.random.Generator) -> Tuple[float, np.ndarray]:
        x = sample_marginal(self.target, self.t, batch_size, rng)
        return _loss_and_grad(self.model, theta, self._loss(x, true_score(self.target, x, self.t)))

    def _design(self) -> np.ndarray:
        return np.concatenate([self.x, np.ones((self.x.shape[0], 1))], axis=1)

    def minimizer(self) -> Optional[np.ndarray]:
        if not isinstance(self.model, LinearScoreModel):
            return None
        coef, *_ = np.linalg.lstsq(self._design(), self.s_star, rcond=None)
        d = self.model.d
        return np.concatenate([coef[:d].T.reshape(-1), coef[d]])

    def optimum(self) -> Tuple[Optional[float], str]:
        theta = self.minimizer()
        if theta is None:
            return None, "none"
        return self.population(theta)[0], "closed_form"

    def hessian(self) -> Optional[np.ndarray]:
        if not isinstance(self.model, LinearScoreModel):
            return None
        # parameters are A (row-major) then b; row j of A and b_j see the same design
        design = self._design()
        gram = 2.0 * design.T @ design / design.shape[0]
        d = self.model.d
        H = np.zeros((d * d + d, d * d + d))
        for j in range(d):
            idx = list(range(j * d, (j + 1) * d)) + [d * d + j]
            H[np.ix_(idx, idx)] = gram
        return H


class DenoisingOracle(LossOracle):
    """Denoising objective with fresh samples from ``target`` at times drawn uniformly from ``times``.

    ``population`` uses the identity ``denoising = sigma_t^2 * score loss + Bayes loss`` on a fixed
    evaluation sample of at most ``eval_times`` times, so ``population - optimum`` is an exact
    non-negative score-loss proxy rather than the difference of two noisy estimates.
    """

    def __init__(
        self,
        model: ScoreModel,
        target: GaussianMixtureTarget,
        times: Sequence[float],
        mc_n: int = 10_000,
        rng: Optional[np.random.Generator] = None,
        eval_times: int = 16,
    ):
        self.model = model.with_params(model.flat_params())
        self.target = target
        self.times = np.asarray(times, dtype=np.float64)
        if self.times.size == 0 or np.any(sigma_sq(self.times) == 0):
            raise DivisionGuardError("Denoising needs times with sigma_t > 0")
        rng = split_rng(0) if rng is None else rng
        picks = np.unique(np.linspace(0, self.times.size - 1, min(eval_times, self.times.size)).round().astype(int))
        self.eval_times = self.times[picks]
        per_t = max(mc_n // self.eval_times.size, 100)
        self.eval_x = [sample_marginal(target, t, per_t, rng) for t in self.eval_times]
        self.eval_s = [true_score(target, x, t) for x, t in zip(self.eval_x, self.eval_times)]

    @property
    def dim(self) -> int:
        return self.model.num_params

    def minibatch(self, theta: np.ndarray, batch_size: int, rng: np.random.Generator) -> Tuple[float, np.ndarray]:
        batch = draw_denoising_batch(self.target, self.times, batch_size, rng)
        return _loss_and_grad(self.model, theta, lambda m: denoising_loss_tensor(m, batch))

    def _bayes(self) -> Tuple[float, str]:
        values = [bayes_denoising_loss(self.target, t, x) for t, x in zip(self.eval_times, self.eval_x)]
        return float(np.mean([v for v, _ in values])), values[0][1]

    def population(self, theta: np.ndarray) -> Tuple[float, np.ndarray]:
        tensors = [(torch.as_tensor(x), torch.as_tensor(s)) for x, s in zip(self.eval_x, self.eval_s)]
        weights = sigma_sq(self.eval_times)

        def loss_fn(m: ScoreModel) -> torch.Tensor:
            terms = [
                w * ((m(x, float(t)) - s)**2).sum(dim=1).mean()
                for w, t, (x, s) in zip(weights, self.eval_times, tensors)
            ]
            return torch.stack(terms).mean()

        loss, grad = _loss_and_grad(self.model, theta, loss_fn)
        return loss + self._bayes()[0], grad

    def optimum(self) -> Tuple[Optional[float], str]:
        # the Bayes loss is attained only when the family contains the exact score at every time
        if isinstance(self.model, LinearScoreModel) and self.target.is_gaussian and self.eval_times.size == 1:
            return self._bayes()
        return None, "none"


def _quadratic_rate_bound(
    config: TrainConfig,
    oracle: QuadraticOracle,
    initial: float,
    iterations: int,
) -> Optional[float]:
    eig = np.linalg.eigvalsh(oracle.H)
    mu, L = float(eig.min()), float(eig.max())
    if mu <= 0 or config.eta * mu > 1:
        return None
    delta_1 = initial - oracle.L_star
    return unrolled_rate_bound(delta_1, config.eta, mu, L, oracle.sigma**2, config.beta_batch, iterations)


class EmpiricalDenoisingOracle(LossOracle):
    """Empirical denoising risk on a fixed training sample; minibatches are drawn from that sample."""

    def __init__(self, model: ScoreModel, batch: DenoisingBatch):
        _check_batch(batch, None)
        self.model = model.with_params(model.flat_params())
        self.batch = batch

    @property
    def dim(self) -> int:
        return self.model.num_params

    def population(self, theta: np.ndarray) -> Tuple[float, np.ndarray]:
        return _loss_and_grad(self.model, theta, lambda m: denoising_loss_tensor(m, self.batch))

    def minibatch(self, theta: np.ndarray, batch_size: int, rng: np.random.Generator) -> Tuple[float, np.ndarray]:
        index = rng.integers(0, len(self.batch), size=batch_size)
        sub = self.batch.subset(index)
        return _loss_and_grad(self.model, theta, lambda m: denoising_loss_tensor(m, sub))

    def minimizer(self) -> Optional[np.ndarray]:
        """Least-squares ERM for an affine model trained at a single time."""
        times = np.unique(self.batch.t)
        if not isinstance(self.model, LinearScoreModel) or times.size != 1:
            return None
        return empirical_linear_minimizer(self.batch.x0, self.batch.noise, float(times[0])).flat_params()

    def optimum(self) -> Tuple[Optional[float], str]:
        theta = self.minimizer()
        if theta is None:
            return None, "none"
        return self.population(theta)[0], "closed_form"


def sgd_pl_run(
    config: TrainConfig,
    loss_oracle: LossOracle,
    init: ArrayLike,
    rng: Optional[np.random.Generator] = None,
) -> Tuple[SGDTrace, np.ndarray]:
    """Constant-step SGD with ``b_i = ceil(beta i)`` until the sample budget is exhausted.

    Returns the trace and the final parameters. A non-finite loss or iterate raises
    :class:`~scorelab.core.exceptions.DivergenceError` carrying the partial trace.
    """
    theta = np.array(init, dtype=np.float64).reshape(-1)
    if theta.size != loss_oracle.dim:
        raise ContractError(f"`init` has {theta.size} entries, the oracle expects {loss_oracle.dim}")
    rng = split_rng(config.seed) if rng is None else rng

    L_hat = config.smoothness_L_hat or loss_oracle.smoothness()
    if L_hat is not None and config.eta > 1.0 / L_hat:
        rank_zero_warn(
            f"Step size eta={config.eta} exceeds 1/L_hat={1.0 / L_hat:.6g}, the rate guarantee does not apply"
        )

    optimum, source = loss_oracle.optimum()
    trace = SGDTrace(optimum=optimum, optimum_source=source)
    trace.initial_population_loss = loss_oracle.population(theta)[0]

    schedule = batch_schedule(config.beta_batch, config.budget)
    used = 0
    for i, b in enumerate(schedule, start=1):
        loss, grad = loss_oracle.minibatch(theta, b, rng)
        if not (math.isfinite(loss) and np.all(np.isfinite(grad))):
            raise DivergenceError(f"Non-finite loss at iteration {i}", trace=trace)
        theta = theta - config.eta * grad
        if not np.all(np.isfinite(theta)):
            raise DivergenceError(f"Non-finite iterate after iteration {i}", trace=trace)
        used += b
        population = None
        if i % config.eval_every == 0 or i == len(schedule):
            population = loss_oracle.population(theta)[0]
        trace.records.append(
            TraceRecord(
                iteration=i,
                batch_size=b,
                loss=float(loss),
                population_loss=population,
                grad_norm=float(np.linalg.norm(grad)),
                samples_used=used,
            )
        )
    if isinstance(loss_oracle, QuadraticOracle):
        trace.rate_bound = _quadratic_rate_bound(config, loss_oracle, trace.initial_population_loss, len(schedule))
    rank_zero_info(f"SGD finished after {len(trace)} iterations using {used} of {config.budget} samples")
    return trace, theta


@dataclass(frozen=True)
class OptimumEstimate:
    loss: float
    theta: np.ndarray
    grad_norm: float
    converged: bool
    source: str = "proxy"


def estimate_optimal_loss(
    oracle: LossOracle,
    init: ArrayLike,
    max_iter: int = 500,
    tolerance_grad: float = 1e-10,
    converged_below: float = 1e-6,
) -> OptimumEstimate:
    """Full-batch L-BFGS on ``oracle.population``, giving ``L*_proxy`` and the converged parameters."""
    theta = torch.tensor(np.asarray(init, dtype=np.float64).reshape(-1), requires_grad=True)
    optimizer = torch.optim.LBFGS(
        [theta],
        lr=1.0,
        max_iter=max_iter,
        tolerance_grad=tolerance_grad,
        tolerance_change=1e-16,
        history_size=50,
        line_search_fn="strong_wolfe",
    )

    def closure() -> torch.Tensor:
        optimizer.zero_grad()
        loss, grad = oracle.population(theta.detach().numpy().copy())
        theta.grad = torch.as_tensor(grad)
        return torch.tensor(loss, dtype=torch.float64)

    optimizer.step(closure)
    final = theta.detach().numpy().copy()
    loss, grad = oracle.population(final)
    check_finite(np.array([loss]), "the optimal-loss proxy")
    grad_norm = float(np.linalg.norm(grad))
    return OptimumEstimate(loss=loss, theta=final, grad_norm=grad_norm, converged=grad_norm <= converged_below)


@dataclass(frozen=True)
class ProbeReport:
    pl_ratio_min: float
    smoothness_L_hat: float
    grad_var_hat: float
    optimum: float
    optimum_source: str
    skipped: int

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


def oracle_probes(
    oracle: LossOracle,
    theta: ArrayLike,
    rng: np.random.Generator,
    n_probes: int = 16,
    radius: float = 1.0,
    batch_size: int = 32,
    grad_replicates: int = 200,
) -> ProbeReport:
    """Empirical PL ratio, smoothness and gradient variance of ``oracle`` around ``theta``.

    PL probes sit around the minimizer when it is known, along random directions plus every Hessian
    eigen-direction when the Hessian is known, so on quadratics ``pl_ratio_min`` is the smallest eigenvalue.
    """
    theta = np.asarray(theta, dtype=np.float64).reshape(-1)
    optimum, source = oracle.optimum()
    if optimum is None:
        estimate = estimate_optimal_loss(oracle, theta)
        if not estimate.converged:
            rank_zero_warn(f"Optimal-loss proxy did not converge (grad norm {estimate.grad_norm:.3g})")
        optimum, source = estimate.loss, "proxy"
        centre = estimate.theta
    else:
        centre = oracle.minimizer()
        centre = theta if centre is None else centre

    directions = rng.standard_normal((n_probes, oracle.dim))
    hess = oracle.hessian()
    if hess is not None:
        directions = np.concatenate([directions, np.linalg.eigh(hess)[1].T])
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)

    ratios, skipped = [], 0
    for direction in directions:
        loss, grad = oracle.population(centre + radius * direction)
        gap = loss - optimum
        if gap < 1e-12:
            skipped += 1
            continue
        ratios.append(0.5 * float(grad @ grad) / gap)

    smoothness = 0.0
    for _ in range(n_probes):
        a = centre + radius * rng.standard_normal(oracle.dim)
        b = centre + radius * rng.standard_normal(oracle.dim)
        ga, gb = oracle.population(a)[1], oracle.population(b)[1]
        smoothness = max(smoothness, float(np.linalg.norm(ga - gb) / np.linalg.norm(a - b)))

    full = oracle.population(theta)[1]
    deviations = [oracle.minibatch(theta, batch_size, rng)[1] - full for _ in range(grad_replicates)]
    grad_var = float(np.mean([d @ d for d in deviations]))

    return ProbeReport(
        pl_ratio_min=float(min(ratios)) if ratios else float("nan"),
        smoothness_L_hat=smoothness,
        grad_var_hat=grad_var,
        optimum=float(optimum),
        optimum_source=source,
        skipped=skipped,
    )


def assumption_probes(
    model: ScoreModel,
    target: GaussianMixtureTarget,
    t: float,
    probe_n: int,
    rng: np.random.Generator,
    **kwargs,
) -> ProbeReport:
    """PL ratio, smoothness and gradient variance of the score loss at time ``t`` around ``model``."""
    if probe_n < 100:
        raise DomainError(f"`probe_n` must be at least 100, found {probe_n}")
    oracle = ScoreLossOracle(model, target, t, probe_n, rng)
    return oracle_probes(oracle, model.flat_params(), rng, **kwargs)
