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
"""Total variation between low dimensional laws: histograms, adaptive quadrature and Gaussian closed forms."""
import math
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, Optional, Sequence, Tuple

import numpy as np
from pytorch_lightning.utilities import rank_zero_warn
from scipy import integrate
from scipy.special import erf
from scipy.stats import norm

from scorelab.core.exceptions import ContractError, CoverageError, DomainError
from scorelab.core.utils import ArrayLike, as_points
from scorelab.diffusion.targets import density, GaussianMixtureTarget

Density = Callable[[np.ndarray], np.ndarray]
Box = Sequence[Tuple[float, float]]

BOX_MASS = 0.999
SENSITIVITY_WARNING = 0.05
COVERAGE_TOLERANCE = 1e-4


@dataclass(frozen=True)
class TVEstimate:
    """A total variation value with how it was obtained.

    ``stderr`` bounds the Monte-Carlo fluctuation of sample based estimates, ``bias_bound`` is the spread
    across bin resolutions (histograms) or the absolute quadrature tolerance.
    """

    value: float
    method: str
    stderr: float = 0.0
    bias_bound: float = 0.0
    resolution: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "value", float(min(max(self.value, 0.0), 1.0)))

    def to_dict(self) -> Dict[str, Any]:
        return {
            "value": self.value,
            "method": self.method,
            "stderr": self.stderr,
            "bias_bound": self.bias_bound,
            "resolution": self.resolution,
        }


def default_bins(n: int, d: int) -> int:
    """Bins per axis, ``ceil(n^(1 / (d + 2)))``.

    >>> default_bins(10**6, 1)
    100
    """
    # integer root first so exact powers do not round up
    root = round(n**(1.0 / (d + 2)))
    return int(root) if root**(d + 2) == n else int(math.ceil(n**(1.0 / (d + 2))))


def _shared_box(pooled: np.ndarray) -> np.ndarray:
    tail = 0.5 * (1.0 - BOX_MASS)
    lo, hi = np.quantile(pooled, [tail, 1.0 - tail], axis=0)
    flat = hi <= lo
    lo, hi = np.where(flat, lo - 0.5, lo), np.where(flat, hi + 0.5, hi)
    return np.stack([lo, hi], axis=1)


def _histogram_tv(a: np.ndarray, b: np.ndarray, box: np.ndarray, bins: int) -> float:
    # points outside the box fall into the edge bins so every sample is counted
    a = np.clip(a, box[:, 0], box[:, 1])
    b = np.clip(b, box[:, 0], box[:, 1])
    counts_a, _ = np.histogramdd(a, bins=bins, range=box)
    counts_b, _ = np.histogramdd(b, bins=bins, range=box)
    return 0.5 * float(np.sum(np.abs(counts_a / a.shape[0] - counts_b / b.shape[0])))


def tv_histogram(samples_a: ArrayLike, samples_b: ArrayLike, bins: Optional[int] = None) -> TVEstimate:
    """Histogram TV on a shared box holding 99.9% of the pooled mass per axis.

    The estimate is also computed at half and at double ``bins``; their spread is reported as ``bias_bound``.
    """
    a, b = np.asarray(samples_a, dtype=np.float64), np.asarray(samples_b, dtype=np.float64)
    if a.size == 0 or b.size == 0:
        raise ContractError("Both sample sets must be non-empty")
    a = as_points(a)
    b = as_points(b, a.shape[1])
    d = a.shape[1]
    if d > 3:
        raise DomainError(f"Histogram TV supports d <= 3, found d={d}")
    if min(len(a), len(b)) < 1000:
        rank_zero_warn(f"Histogram TV on {min(len(a), len(b))} samples is coarse; use at least 1000")
    bins = default_bins(min(len(a), len(b)), d) if bins is None else int(bins)
    if bins < 1:
        raise ContractError(f"`bins` must be positive, found {bins}")

    box = _shared_box(np.concatenate([a, b]))
    value = _histogram_tv(a, b, box, bins)
    half = _histogram_tv(a, b, box, max(bins // 2, 1))
    double = _histogram_tv(a, b, box, 2 * bins)
    spread = max(value, half, double) - min(value, half, double)
    if spread > SENSITIVITY_WARNING:
        rank_zero_warn(f"Histogram TV varies by {spread:.3f} across bin resolutions")
    return TVEstimate(
        value=value,
        method="histogram",
        # a single sample moves the estimate by at most 1/n, so McDiarmid bounds the fluctuation
        stderr=0.5 * math.sqrt(1.0 / len(a) + 1.0 / len(b)),
        bias_bound=spread,
        resolution={
            "bins": bins,
            "n_a": int(len(a)),
            "n_b": int(len(b)),
            "half_bins": half,
            "double_bins": double,
            "box": box.tolist(),
        },
    )


def _integrate(fn: Callable[[np.ndarray], float], box: np.ndarray, tol: float) -> float:
    if len(box) == 1:
        (lo, hi), = box
        value, _ = integrate.quad(lambda u: fn(np.array([[u]])), lo, hi, epsabs=tol, epsrel=0.0, limit=500)
        return value
    (lo0, hi0), (lo1, hi1) = box
    value, _ = integrate.dblquad(lambda v, u: fn(np.array([[u, v]])), lo0, hi0, lo1, hi1, epsabs=tol, epsrel=0.0)
    return value


def tv_quadrature(density_a: Density, density_b: Density, box: Box, tol: float = 1e-6) -> TVEstimate:
    """``1/2 int |p_a - p_b|`` over ``box`` by adaptive quadrature (``d <= 2``).

    Raises:
        CoverageError: ``box`` misses more than ``1e-4`` of either mass.
    """
    box = np.atleast_2d(np.asarray(box, dtype=np.float64))
    if box.shape[1] != 2 or np.any(box[:, 1] <= box[:, 0]):
        raise ContractError(f"`box` must list increasing (lo, hi) pairs per axis, found {box.tolist()}")
    if len(box) > 2:
        raise DomainError(f"Quadrature TV supports d <= 2, found d={len(box)}; use the histogram estimator")

    for name, dens in (("first", density_a), ("second", density_b)):
        mass = _integrate(lambda x: float(dens(x)[0]), box, tol)
        if 1.0 - mass > COVERAGE_TOLERANCE:
            raise CoverageError(f"The box holds only {mass:.6f} of the {name} density")

    value = 0.5 * _integrate(lambda x: abs(float(density_a(x)[0]) - float(density_b(x)[0])), box, tol)
    return TVEstimate(
        value=value,
        method="quadrature-analytic",
        bias_bound=tol,
        resolution={"box": box.tolist(), "tol": tol},
    )


def _tv_1d_gaussians(m1: float, s1: float, m2: float, s2: float) -> float:
    # the log density ratio is a quadratic whose real roots split the line into sign-constant pieces
    a = 0.5 / s2**2 - 0.5 / s1**2
    b = m1 / s1**2 - m2 / s2**2
    c = 0.5 * m2**2 / s2**2 - 0.5 * m1**2 / s1**2 + math.log(s2 / s1)
    if abs(a) < 1e-14 * max(1.0 / s1**2, 1.0 / s2**2):
        roots = [] if b == 0 else [-c / b]
    else:
        disc = b * b - 4 * a * c
        roots = [] if disc < 0 else sorted([(-b - math.sqrt(disc)) / (2 * a), (-b + math.sqrt(disc)) / (2 * a)])
    edges = [-math.inf] + roots + [math.inf]
    total = 0.0
    for lo, hi in zip(edges[:-1], edges[1:]):
        mass_a = norm.cdf(hi, m1, s1) - norm.cdf(lo, m1, s1)
        mass_b = norm.cdf(hi, m2, s2) - norm.cdf(lo, m2, s2)
        total += max(mass_a - mass_b, 0.0)
    return total


def gaussian_tv_available(cov_a: ArrayLike, cov_b: ArrayLike) -> bool:
    cov_a, cov_b = np.atleast_2d(cov_a), np.atleast_2d(cov_b)
    return cov_a.shape[0] == 1 or bool(np.allclose(cov_a, cov_b, rtol=1e-12, atol=1e-14))


def gaussian_tv(mean_a: ArrayLike, cov_a: ArrayLike, mean_b: ArrayLike, cov_b: ArrayLike) -> TVEstimate:
    """Exact TV between Gaussians in 1d, or in any dimension when the covariances agree.

    >>> round(gaussian_tv([0.0], [[1.0]], [1.0], [[1.0]]).value, 4)
    0.3829
    """
    mean_a = np.atleast_1d(np.asarray(mean_a, dtype=np.float64))
    mean_b = np.atleast_1d(np.asarray(mean_b, dtype=np.float64))
    cov_a = np.atleast_2d(np.asarray(cov_a, dtype=np.float64))
    cov_b = np.atleast_2d(np.asarray(cov_b, dtype=np.float64))
    if mean_a.shape != mean_b.shape or cov_a.shape != cov_b.shape:
        raise ContractError("Both Gaussians must live in the same dimension")
    if not gaussian_tv_available(cov_a, cov_b):
        raise DomainError("The Gaussian closed form needs d = 1 or equal covariances")
    if mean_a.size == 1:
        value = _tv_1d_gaussians(mean_a[0], math.sqrt(cov_a[0, 0]), mean_b[0], math.sqrt(cov_b[0, 0]))
    else:
        diff = mean_a - mean_b
        delta = math.sqrt(float(diff @ np.linalg.solve(cov_a, diff)))
        value = float(erf(delta / (2.0 * math.sqrt(2.0))))
    return TVEstimate(value=value, method="closed-form-gaussian")


def target_box(*targets: GaussianMixtureTarget, width: float = 10.0) -> np.ndarray:
    """Axis-aligned box reaching ``width`` standard deviations past every component of every target."""
    lo, hi = [], []
    for target in targets:
        sd = np.sqrt(np.diagonal(target.covariances, axis1=1, axis2=2))
        lo.append(np.min(target.means - width * sd, axis=0))
        hi.append(np.max(target.means + width * sd, axis=0))
    return np.stack([np.min(lo, axis=0), np.max(hi, axis=0)], axis=1)


def tv_targets(target_a: GaussianMixtureTarget, target_b: GaussianMixtureTarget, tol: float = 1e-6) -> TVEstimate:
    """TV between two analytic mixtures, in closed form when possible, else by quadrature."""
    if target_a.d != target_b.d:
        raise ContractError(f"Dimensions differ: {target_a.d} and {target_b.d}")
    if target_a.is_gaussian and target_b.is_gaussian:
        (m_a, c_a), (m_b, c_b) = target_a.component(), target_b.component()
        if gaussian_tv_available(c_a, c_b):
            return gaussian_tv(m_a, c_a, m_b, c_b)
    return tv_quadrature(
        lambda x: density(target_a, x),
        lambda x: density(target_b, x),
        target_box(target_a, target_b),
        tol=tol,
    )
