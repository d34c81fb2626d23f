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
"""Gaussian-mixture data distributions with exact time-t marginals and scores."""
import math
from dataclasses import dataclass, field
from typing import Any, Dict, Optional, Sequence, Tuple

import numpy as np
from scipy.spatial.distance import cdist
from scipy.special import logsumexp

from scorelab.core.exceptions import ConfigurationError, DomainError
from scorelab.core.registry import LabRegistry
from scorelab.core.utils import ArrayLike, as_points, check_time, split_rng
from scorelab.diffusion.ou import ou_marginal_params

TARGET_PRESETS = LabRegistry("targets", kind="target preset")

_MAX_DIM = 3


@dataclass(frozen=True)
class GaussianMixtureTarget:
    """Mixture ``sum_i w_i N(mu_i, Sigma_i)`` in ``R^d`` with ``1 <= d <= 3``.

    Args:
        weights: Mixture weights, non-negative and summing to one.
        means: ``(m, d)`` component means.
        covariances: ``(m, d, d)`` symmetric positive-definite covariances.
    """

    weights: np.ndarray
    means: np.ndarray
    covariances: np.ndarray
    _chol: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        weights = np.asarray(self.weights, dtype=np.float64).ravel()
        means = np.asarray(self.means, dtype=np.float64)
        if means.ndim == 1:
            means = means.reshape(len(weights), -1)
        covariances = np.asarray(self.covariances, dtype=np.float64)
        m, d = means.shape
        if covariances.ndim == 1:
            covariances = covariances.reshape(m, 1, 1)
        if covariances.ndim == 2 and d == 1:
            covariances = covariances.reshape(m, 1, 1)

        if not 1 <= d <= _MAX_DIM:
            raise ConfigurationError(f"Targets support 1 <= d <= {_MAX_DIM}, found d={d}")
        if weights.shape != (m, ) or covariances.shape != (m, d, d):
            raise ConfigurationError(
                f"Inconsistent mixture shapes: weights {weights.shape}, means {means.shape}, "
                f"covariances {covariances.shape}"
            )
        if np.any(weights < 0) or abs(weights.sum() - 1.0) > 1e-12:
            raise ConfigurationError(f"Mixture weights must be non-negative and sum to 1, found {weights}")
        if not (np.all(np.isfinite(means)) and np.all(np.isfinite(covariances))):
            raise ConfigurationError("Mixture means and covariances must be finite")
        if np.max(np.abs(covariances - np.swapaxes(covariances, 1, 2))) > 1e-12:
            raise ConfigurationError("Mixture covariances must be symmetric")
        if np.min(np.linalg.eigvalsh(covariances)) <= 0:
            raise ConfigurationError("Mixture covariances must be positive definite")

        for name, value in (("weights", weights), ("means", means), ("covariances", covariances)):
            value.setflags(write=False)
            object.__setattr__(self, name, value)
        object.__setattr__(self, "_chol", np.linalg.cholesky(covariances))

    @property
    def d(self) -> int:
        return self.means.shape[1]

    @property
    def n_components(self) -> int:
        return self.means.shape[0]

    @property
    def is_gaussian(self) -> bool:
        return int(np.count_nonzero(self.weights)) == 1

    def component(self, index: Optional[int] = None) -> Tuple[np.ndarray, np.ndarray]:
        """Mean and covariance of a component (the single active one by default)."""
        if index is None:
            if not self.is_gaussian:
                raise DomainError("This target is not a single Gaussian")
            index = int(np.flatnonzero(self.weights)[0])
        return self.means[index], self.covariances[index]

    def mean(self) -> np.ndarray:
        return self.weights @ self.means

    def second_moment(self) -> float:
        mean_sq = np.einsum("ij,ij->i", self.means, self.means)
        return float(np.sum(self.weights * (mean_sq + np.trace(self.covariances, axis1=1, axis2=2))))

    def to_dict(self) -> Dict[str, Any]:
        return {
            "weights": self.weights.tolist(),
            "means": self.means.tolist(),
            "covariances": self.covariances.tolist(),
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "GaussianMixtureTarget":
        return cls(weights=data["weights"], means=data["means"], covariances=data["covariances"])


def gaussian(mean: ArrayLike, cov: ArrayLike) -> GaussianMixtureTarget:
    mean = np.atleast_1d(np.asarray(mean, dtype=np.float64))
    cov = np.asarray(cov, dtype=np.float64)
    if cov.ndim < 2:
        cov = np.diag(np.broadcast_to(cov, mean.shape)).astype(np.float64)
    return GaussianMixtureTarget(weights=[1.0], means=mean[None], covariances=cov[None])


def sample_p0(target: GaussianMixtureTarget, n: int, rng: np.random.Generator) -> np.ndarray:
    """Draw ``n`` i.i.d. points from ``target``."""
    if n < 1:
        raise DomainError(f"`n` must be at least 1, found {n}")
    labels = rng.choice(target.n_components, size=n, p=target.weights)
    noise = rng.standard_normal((n, target.d))
    return target.means[labels] + np.einsum("nij,nj->ni", target._chol[labels], noise)


def marginal_at(target: GaussianMixtureTarget, t: float) -> GaussianMixtureTarget:
    """Law of ``x_t`` when ``x_0 ~ target``: means shrink by ``e^-t`` and covariances mix toward ``I``."""
    params = ou_marginal_params(t)
    eye = np.eye(target.d)
    return GaussianMixtureTarget(
        weights=target.weights,
        means=params.shrink * target.means,
        covariances=params.shrink**2 * target.covariances + params.sigma_t_sq * eye,
    )


def _component_log_densities(target: GaussianMixtureTarget, x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Per-component ``log w_i + log N(x; m_i, C_i)`` and the whitened residuals ``C_i^{-1}(x - m_i)``."""
    n, d = x.shape
    log_terms = np.empty((n, target.n_components))
    precision_residuals = np.empty((target.n_components, n, d))
    with np.errstate(divide="ignore"):
        log_weights = np.log(target.weights)
    for i in range(target.n_components):
        chol = target._chol[i]
        diff = x - target.means[i]
        solved = np.linalg.solve(chol, diff.T)
        log_det = 2.0 * np.sum(np.log(np.diag(chol)))
        log_terms[:, i] = log_weights[i] - 0.5 * (np.sum(solved**2, axis=0) + log_det + d * math.log(2 * math.pi))
        precision_residuals[i] = np.linalg.solve(chol.T, solved).T
    return log_terms, precision_residuals


def log_density(target: GaussianMixtureTarget, x: ArrayLike, t: float = 0.0) -> np.ndarray:
    """``log p_t(x)`` for each row of ``x``."""
    marginal = marginal_at(target, check_time(t)) if t > 0 else target
    log_terms, _ = _component_log_densities(marginal, as_points(x, target.d))
    return logsumexp(log_terms, axis=1)


def density(target: GaussianMixtureTarget, x: ArrayLike, t: float = 0.0) -> np.ndarray:
    return np.exp(log_density(target, x, t))


def true_score(target: GaussianMixtureTarget, x: ArrayLike, t: float) -> np.ndarray:
    """Exact ``grad_x log p_t(x)`` with responsibilities normalised in log space."""
    marginal = marginal_at(target, check_time(t))
    x = as_points(x, target.d)
    log_terms, precision_residuals = _component_log_densities(marginal, x)
    responsibilities = np.exp(log_terms - logsumexp(log_terms, axis=1, keepdims=True))
    return -np.einsum("ni,ind->nd", responsibilities, precision_residuals)


def gaussian_score_coefficients(target: GaussianMixtureTarget, t: float) -> Tuple[np.ndarray, np.ndarray]:
    """``(A, b)`` with ``true_score(x, t) = A x + b`` for a single-Gaussian ``target``."""
    mean, cov = marginal_at(target, t).component()
    precision = np.linalg.inv(cov)
    return -precision, precision @ mean


def sample_marginal(target: GaussianMixtureTarget, t: float, n: int, rng: np.random.Generator) -> np.ndarray:
    return sample_p0(marginal_at(target, t), n, rng)


@dataclass(frozen=True)
class AssumptionReport:
    """Witnesses for the bounded-second-moment and sub-Gaussian hypotheses."""

    second_moment: float
    subgaussian_proxy: float
    probe_s: np.ndarray = field(repr=False)
    tail_prob: np.ndarray = field(repr=False)


def subgaussian_proxy(norms: np.ndarray, probes: int = 64) -> Tuple[float, np.ndarray, np.ndarray]:
    """Smallest ``c`` with ``P(||x|| >= s) <= 2 exp(-s^2 / c^2)`` on a probe grid of ``s`` values."""
    norms = np.sort(np.asarray(norms, dtype=np.float64))
    s = np.linspace(0.0, norms[-1], probes)
    tail = 1.0 - np.searchsorted(norms, s, side="left") / norms.size
    mask = (tail > 0) & (s > 0)
    # tail <= 1 < 2 so the log is strictly positive
    c = np.max(s[mask] / np.sqrt(np.log(2.0 / tail[mask]))) if np.any(mask) else 0.0
    return float(c), s, tail


def assumption_diagnostics(
    target: GaussianMixtureTarget,
    n: int = 10**6,
    rng: Optional[np.random.Generator] = None,
) -> AssumptionReport:
    rng = split_rng(0) if rng is None else rng
    norms = np.linalg.norm(sample_p0(target, n, rng), axis=1)
    c, s, tail = subgaussian_proxy(norms)
    return AssumptionReport(second_moment=target.second_moment(), subgaussian_proxy=c, probe_s=s, tail_prob=tail)


def energy_distance(a: np.ndarray, b: np.ndarray) -> float:
    """Energy statistic ``2 E|X - Y| - E|X - X'| - E|Y - Y'|`` (V-statistic)."""
    a = as_points(a)
    b = as_points(b, a.shape[1])
    return float(2.0 * cdist(a, b).mean() - cdist(a, a).mean() - cdist(b, b).mean())


def pushforward_test(
    a: np.ndarray,
    b: np.ndarray,
    rng: np.random.Generator,
    permutations: int = 199,
) -> Tuple[float, float]:
    """Energy-distance two-sample test; returns ``(statistic, permutation p-value)``."""
    a = as_points(a)
    b = as_points(b, a.shape[1])
    pooled = np.concatenate([a, b])
    dist = cdist(pooled, pooled)
    n_a, n_b = a.shape[0], b.shape[0]

    def statistic(labels: np.ndarray) -> float:
        in_a = labels.astype(np.float64)
        in_b = 1.0 - in_a
        cross = in_a @ dist @ in_b / (n_a * n_b)
        within_a = in_a @ dist @ in_a / n_a**2
        within_b = in_b @ dist @ in_b / n_b**2
        return 2.0 * cross - within_a - within_b

    labels = np.concatenate([np.ones(n_a, dtype=bool), np.zeros(n_b, dtype=bool)])
    observed = statistic(labels)
    exceed = sum(statistic(rng.permutation(labels)) >= observed for _ in range(permutations))
    return float(observed), (exceed + 1.0) / (permutations + 1.0)


@TARGET_PRESETS(name="standard_normal")
def standard_normal(d: int = 1) -> GaussianMixtureTarget:
    return gaussian(np.zeros(d), np.eye(d))


@TARGET_PRESETS(name="gaussian_1d")
def gaussian_1d(mean: float = 1.0, var: float = 0.5) -> GaussianMixtureTarget:
    return gaussian([mean], [[var]])


@TARGET_PRESETS(name="bimodal_1d")
def bimodal_1d(separation: float = 2.0, var: float = 1.0) -> GaussianMixtureTarget:
    return GaussianMixtureTarget(
        weights=[0.5, 0.5],
        means=[[-separation], [separation]],
        covariances=[[[var]], [[var]]],
    )


@TARGET_PRESETS(name="mixture_2d")
def mixture_2d() -> GaussianMixtureTarget:
    return GaussianMixtureTarget(
        weights=[0.3, 0.7],
        means=[[-1.5, 0.5], [1.0, -0.5]],
        covariances=[[[0.4, 0.1], [0.1, 0.3]], [[0.6, -0.2], [-0.2, 0.5]]],
    )


def build_target(name: Optional[str] = None, spec: Optional[Dict[str, Any]] = None, **kwargs) -> GaussianMixtureTarget:
    """Resolve a target from an explicit ``spec`` dict or a preset ``name``."""
    if spec:
        return GaussianMixtureTarget.from_dict(spec)
    if name is None:
        raise ConfigurationError("A target needs either a preset `name` or explicit mixture parameters")
    return TARGET_PRESETS.resolve(name)(**kwargs)


def probe_points(target: GaussianMixtureTarget, t: float, per_axis: int = 41, width: float = 6.0) -> np.ndarray:
    """Regular probe grid covering ``mean +/- width * std`` of the time-t marginal."""
    marginal = marginal_at(target, t)
    centre = marginal.mean()
    spread = math.sqrt(max(float(np.max(np.diagonal(marginal.covariances, axis1=1, axis2=2))), 1e-12))
    spread += float(np.max(np.abs(marginal.means - centre)))
    axes: Sequence[np.ndarray] = [np.linspace(c - width * spread, c + width * spread, per_axis) for c in centre]
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([m.ravel() for m in mesh], axis=1)
