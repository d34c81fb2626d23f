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
"""Paired-run split of the sampler error into discretization, score and initialization legs.

Every leg compares two reverse runs that differ in one ingredient only:

* discretization: oracle score on the ``K`` step grid against a ``k_ref`` step reference;
* score: oracle against the learned score, same noise, exact initialization;
* init: exact ``p_{t_K}`` against ``N(0, I)`` initialization, learned score, same noise.

For a Gaussian target and an affine score every law involved is Gaussian and the legs are exact.
"""
import math
from dataclasses import dataclass
from typing import Any, Dict, Optional, Sequence, Tuple

import numpy as np

from scorelab.core.exceptions import DomainError
from scorelab.core.utils import ArrayLike, split_rng
from scorelab.diffusion.ou import make_time_grid, TimeGrid
from scorelab.diffusion.sampler import (
    draw_noise,
    exact_init_moments,
    generate,
    LinearScoreFn,
    OracleScore,
    reverse_gaussian_moments,
    ReverseRunSpec,
)
from scorelab.diffusion.targets import gaussian, GaussianMixtureTarget, marginal_at, sample_marginal, sample_p0
from scorelab.metrics.girsanov import girsanov_kl_from_run, GirsanovKL
from scorelab.metrics.tv import gaussian_tv_available, tv_histogram, tv_targets, TVEstimate
from scorelab.score.model import LinearScoreModel, TimestepScoreBank

K_REF = 8192
# (steps x paths x d) floats drawn at once by the reference run
_REF_CHUNK_FLOATS = 2 * 10**7


@dataclass(frozen=True)
class LegReport:
    leg_discretization: TVEstimate
    leg_score: TVEstimate
    leg_init: TVEstimate
    total_direct: TVEstimate
    girsanov: Optional[GirsanovKL] = None
    reference_residual: Optional[TVEstimate] = None
    leg_early_stop: Optional[TVEstimate] = None
    total_to_data: Optional[TVEstimate] = None

    @property
    def legs(self) -> Tuple[TVEstimate, ...]:
        return self.leg_discretization, self.leg_score, self.leg_init

    @property
    def sum_of_legs(self) -> float:
        return sum(leg.value for leg in self.legs)

    @staticmethod
    def _combined(estimates: Sequence[TVEstimate]) -> float:
        return math.sqrt(sum(e.stderr**2 for e in estimates))

    def triangle_holds(self, slack: float = 3.0) -> bool:
        """``TV(p_t0, p_hat_t0) <= sum of legs + slack * combined stderr``."""
        se = self._combined(self.legs + (self.total_direct,))
        return self.total_direct.value <= self.sum_of_legs + slack * se

    def data_triangle_holds(self, slack: float = 3.0) -> bool:
        """``TV(p_0, p_hat_t0) <= TV(p_0, p_t0) + TV(p_t0, p_hat_t0) + slack * combined stderr``."""
        if self.leg_early_stop is None or self.total_to_data is None:
            return True
        se = self._combined((self.leg_early_stop, self.total_direct, self.total_to_data))
        return self.total_to_data.value <= self.leg_early_stop.value + self.total_direct.value + slack * se

    def pinsker_holds(self, slack: float = 3.0) -> bool:
        if self.girsanov is None:
            return True
        return self.leg_score.value <= self.girsanov.tv_pinsker + slack * self.leg_score.stderr

    def to_dict(self) -> Dict[str, Any]:
        out = {
            "leg_discretization": self.leg_discretization.to_dict(),
            "leg_score": self.leg_score.to_dict(),
            "leg_init": self.leg_init.to_dict(),
            "total_direct": self.total_direct.to_dict(),
            "sum_of_legs": self.sum_of_legs,
            "triangle_holds": self.triangle_holds(),
        }
        for name in ("girsanov", "reference_residual", "leg_early_stop", "total_to_data"):
            value = getattr(self, name)
            out[name] = None if value is None else value.to_dict()
        return out


def linear_score_fn(model: Any) -> Optional[LinearScoreFn]:
    """``t -> (A(t), b(t))`` for affine score sources, ``None`` otherwise."""
    if isinstance(model, OracleScore):
        return model.linear_coefficients
    if isinstance(model, LinearScoreModel):
        return lambda t: model.coefficients()
    if isinstance(model, TimestepScoreBank) and all(isinstance(m, LinearScoreModel) for m in model.models):
        return lambda t: model.model_at(t).coefficients()
    return None


def _law_tv(a: GaussianMixtureTarget, b: GaussianMixtureTarget, rng: np.random.Generator, n: int) -> TVEstimate:
    if a.d <= 2 or (a.is_gaussian and b.is_gaussian and gaussian_tv_available(a.covariances[0], b.covariances[0])):
        return tv_targets(a, b)
    return tv_histogram(sample_p0(a, n, rng), sample_p0(b, n, rng))


def _generate_chunked(spec: ReverseRunSpec, seed: int, key: int) -> np.ndarray:
    grid = spec.grid
    chunk = max(1, _REF_CHUNK_FLOATS // (grid.K * spec.d))
    out = []
    for i, start in enumerate(range(0, spec.n_samples, chunk)):
        size = min(chunk, spec.n_samples - start)
        part = ReverseRunSpec(grid, spec.score, size, spec.init, spec.variant, spec.target, spec.d)
        rng = split_rng(seed, key, i)
        noise = draw_noise(rng, grid.K, size, spec.d, spec.target)
        out.append(generate(part, noise=noise).samples)
    return np.concatenate(out)


def tv_legs(
    target: GaussianMixtureTarget,
    model: Any,
    grid: TimeGrid,
    n_samples: int,
    seed: int,
    variant: str = "ddpm",
    k_ref: int = K_REF,
    bins: Optional[int] = None,
    early_stop: bool = False,
    workers: int = 1,
) -> LegReport:
    """Estimate the three legs of ``TV(p_t0, p_hat_t0)`` and the direct value.

    Args:
        target: Analytic data distribution, so ``p_t0`` and ``p_T`` are known.
        model: Learned score (a score model or any ``(x, t) -> score`` callable).
        grid: Sampling grid.
        n_samples: Paths per run.
        seed: Master seed; runs use substreams of it.
        variant: Reverse step key.
        k_ref: Steps of the reference run standing in for the continuous process.
        bins: Histogram bins per axis (default rule when ``None``).
        early_stop: Also report ``TV(p_0, p_t0)`` and ``TV(p_0, p_hat_t0)``.
        workers: Thread pool width of each sampler run.
    """
    oracle = OracleScore(target)
    if isinstance(model, str) and model == "oracle":
        model = oracle
    model_fn = linear_score_fn(model)
    p_t0 = marginal_at(target, grid.t0)

    # Q-measure paths: the learned process with the oracle evaluated alongside
    noise = draw_noise(split_rng(seed, 0), grid.K, n_samples, target.d, target)
    learned = ReverseRunSpec(grid, model, n_samples, "exact", variant, target)
    tilde = generate(learned, noise=noise, reference=oracle, workers=workers)
    girsanov = girsanov_kl_from_run(tilde, grid)

    if target.is_gaussian and model_fn is not None:
        init_mean, init_cov = exact_init_moments(target, grid)
        dis_law = gaussian(*reverse_gaussian_moments(grid, oracle.linear_coefficients, init_mean, init_cov, variant))
        tilde_law = gaussian(*reverse_gaussian_moments(grid, model_fn, init_mean, init_cov, variant))
        hat_law = gaussian(*reverse_gaussian_moments(grid, model_fn, np.zeros(target.d), np.eye(target.d), variant))
        rng = split_rng(seed, 1)
        report = LegReport(
            leg_discretization=_law_tv(p_t0, dis_law, rng, n_samples),
            leg_score=_law_tv(dis_law, tilde_law, rng, n_samples),
            leg_init=_law_tv(tilde_law, hat_law, rng, n_samples),
            total_direct=_law_tv(p_t0, hat_law, rng, n_samples),
            girsanov=girsanov,
        )
        if early_stop:
            report = LegReport(
                *report.legs,
                report.total_direct,
                girsanov=girsanov,
                leg_early_stop=_law_tv(target, p_t0, rng, n_samples),
                total_to_data=_law_tv(target, hat_law, rng, n_samples),
            )
        return report

    dis = generate(ReverseRunSpec(grid, "oracle", n_samples, "exact", variant, target), noise=noise, workers=workers)
    hat_spec = ReverseRunSpec(grid, model, n_samples, "standard_normal", variant, target)
    hat = generate(hat_spec, noise=noise, workers=workers)
    ref_grid = make_time_grid(grid.T, k_ref, grid.t0, grid.kappa_stop, grid.spacing)
    reference = _generate_chunked(ReverseRunSpec(ref_grid, "oracle", n_samples, "exact", variant, target), seed, 4)
    exact = sample_marginal(target, grid.t0, n_samples, split_rng(seed, 2))

    leg_early_stop = total_to_data = None
    if early_stop:
        data = sample_p0(target, n_samples, split_rng(seed, 3))
        leg_early_stop = tv_targets(target, p_t0) if target.d <= 2 else tv_histogram(data, exact, bins)
        total_to_data = tv_histogram(data, hat.samples, bins)
    return LegReport(
        leg_discretization=tv_histogram(reference, dis.samples, bins),
        leg_score=tv_histogram(dis.samples, tilde.samples, bins),
        leg_init=tv_histogram(tilde.samples, hat.samples, bins),
        total_direct=tv_histogram(exact, hat.samples, bins),
        girsanov=girsanov,
        reference_residual=tv_histogram(reference, exact, bins),
        leg_early_stop=leg_early_stop,
        total_to_data=total_to_data,
    )


def early_stopping_tv(target: GaussianMixtureTarget, t0: float) -> TVEstimate:
    """``TV(p_0, p_t0)`` from the analytic marginals."""
    if target.d > 2 and not target.is_gaussian:
        raise DomainError("Analytic early stopping TV needs d <= 2 or a Gaussian target")
    return tv_targets(target, marginal_at(target, t0))


@dataclass(frozen=True)
class EarlyStoppingFit:
    """``C`` with ``TV(p_0, p_t0) <= C sqrt(t0) log(1 / t0)`` anchored at the largest ``t0``."""

    C: float
    violations: int

    @staticmethod
    def envelope_shape(t0: ArrayLike) -> np.ndarray:
        t0 = np.asarray(t0, dtype=np.float64)
        return np.sqrt(t0) * np.log(1.0 / t0)


def fit_early_stopping(t0s: ArrayLike, tvs: ArrayLike, tolerance: float = 1e-9) -> EarlyStoppingFit:
    t0s, tvs = np.asarray(t0s, dtype=np.float64), np.asarray(tvs, dtype=np.float64)
    if np.any(t0s <= 0) or np.any(t0s >= 1):
        raise DomainError("The early stopping envelope is fitted on 0 < t0 < 1")
    shape = EarlyStoppingFit.envelope_shape(t0s)
    i = int(np.argmax(t0s))
    C = float(tvs[i] / shape[i])
    return EarlyStoppingFit(C=C, violations=int(np.sum(tvs > C * shape + tolerance)))


def direct_tvs(
    target: GaussianMixtureTarget,
    model: Any,
    grid: TimeGrid,
    n_samples: int,
    seed: int,
    variant: str = "ddpm",
    init: str = "standard_normal",
    bins: Optional[int] = None,
    early_stop: bool = False,
    workers: int = 1,
) -> Dict[str, TVEstimate]:
    """``TV(p_t0, p_hat_t0)`` alone, plus the data-side values when ``early_stop`` is set.

    Exact for a Gaussian target with an affine score, otherwise a histogram against exact ``p_t0`` draws.
    """
    if isinstance(model, str) and model == "oracle":
        model = OracleScore(target)
    model_fn = linear_score_fn(model)
    p_t0 = marginal_at(target, grid.t0)
    out: Dict[str, TVEstimate] = {}

    if target.is_gaussian and model_fn is not None:
        if init == "exact":
            init_mean, init_cov = exact_init_moments(target, grid)
        else:
            init_mean, init_cov = np.zeros(target.d), np.eye(target.d)
        hat_law = gaussian(*reverse_gaussian_moments(grid, model_fn, init_mean, init_cov, variant))
        rng = split_rng(seed, 1)
        out["total_direct"] = _law_tv(p_t0, hat_law, rng, n_samples)
        if early_stop:
            out["leg_early_stop"] = _law_tv(target, p_t0, rng, n_samples)
            out["total_to_data"] = _law_tv(target, hat_law, rng, n_samples)
        return out

    noise = draw_noise(split_rng(seed, 0), grid.K, n_samples, target.d, target)
    hat = generate(ReverseRunSpec(grid, model, n_samples, init, variant, target), noise=noise, workers=workers)
    exact = sample_marginal(target, grid.t0, n_samples, split_rng(seed, 2))
    out["total_direct"] = tv_histogram(exact, hat.samples, bins)
    if early_stop:
        data = sample_p0(target, n_samples, split_rng(seed, 3))
        out["leg_early_stop"] = tv_targets(target, p_t0) if target.d <= 2 else tv_histogram(data, exact, bins)
        out["total_to_data"] = tv_histogram(data, hat.samples, bins)
    return out
