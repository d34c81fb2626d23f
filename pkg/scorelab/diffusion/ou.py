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
"""Forward Ornstein-Uhlenbeck dynamics ``dx = -x dt + sqrt(2) dB`` and the discrete time grids."""
import math
from dataclasses import dataclass, field
from typing import Any, Dict, Tuple

import numpy as np

from scorelab.core.exceptions import ConfigurationError, DomainError
from scorelab.core.registry import LabRegistry
from scorelab.core.utils import ArrayLike, check_time

GRID_SPACINGS = LabRegistry("grid_spacings", kind="grid spacing")


@dataclass(frozen=True)
class OUMarginalParams:
    """Coefficients of ``x_t = shrink * x_0 + sqrt(sigma_t_sq) * noise``."""

    shrink: float
    sigma_t_sq: float

    @property
    def sigma_t(self) -> float:
        return math.sqrt(self.sigma_t_sq)


def ou_marginal_params(t: float) -> OUMarginalParams:
    """
    >>> ou_marginal_params(0.0)
    OUMarginalParams(shrink=1.0, sigma_t_sq=0.0)
    """
    t = check_time(t)
    # expm1 keeps sigma_t_sq accurate for small t
    return OUMarginalParams(shrink=math.exp(-t), sigma_t_sq=-math.expm1(-2.0 * t))


def sigma_sq(t: ArrayLike) -> np.ndarray:
    """Vectorised ``1 - exp(-2t)``."""
    return -np.expm1(-2.0 * np.asarray(t, dtype=np.float64))


def forward_sample(x0: ArrayLike, t: float, noise: ArrayLike) -> np.ndarray:
    """Push ``x0`` through the closed-form OU marginal at time ``t`` using the given standard normal ``noise``."""
    x0 = np.asarray(x0, dtype=np.float64)
    noise = np.asarray(noise, dtype=np.float64)
    if x0.shape != noise.shape:
        raise DomainError(f"x0 has shape {x0.shape} but noise has shape {noise.shape}")
    params = ou_marginal_params(t)
    return params.shrink * x0 + params.sigma_t * noise


@dataclass(frozen=True)
class TimeGrid:
    """Discretization ``t0 = times[0] < ... < times[K] = T - kappa_stop`` shared by training and sampling.

    ``ddpm_coeffs`` holds one ``(beta, alpha, alpha_bar)`` row per grid time. Row ``k >= 1`` belongs to the
    reverse step from ``times[k]`` down to ``times[k - 1]``; row ``0`` anchors the product so that
    ``alpha_bar`` at every grid time equals ``exp(-2 t)``.
    """

    T: float
    K: int
    t0: float
    kappa_stop: float
    times: np.ndarray = field(repr=False)
    spacing: str = "uniform"

    def __post_init__(self):
        times = np.asarray(self.times, dtype=np.float64)
        times.setflags(write=False)
        object.__setattr__(self, "times", times)

    @property
    def deltas(self) -> np.ndarray:
        return np.diff(self.times)

    @property
    def t_last(self) -> float:
        return float(self.times[-1])

    @property
    def ddpm_coeffs(self) -> np.ndarray:
        log_alpha = -2.0 * np.concatenate([self.times[:1], self.deltas])
        alpha_bar = np.exp(-2.0 * self.times)
        return np.stack([-np.expm1(log_alpha), np.exp(log_alpha), alpha_bar], axis=1)

    def sigma_sq(self) -> np.ndarray:
        return sigma_sq(self.times)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "T": self.T,
            "K": self.K,
            "t0": self.t0,
            "kappa_stop": self.kappa_stop,
            "spacing": self.spacing,
            "times": self.times.tolist(),
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "TimeGrid":
        return cls(
            T=float(data["T"]),
            K=int(data["K"]),
            t0=float(data["t0"]),
            kappa_stop=float(data["kappa_stop"]),
            times=np.asarray(data["times"], dtype=np.float64),
            spacing=data.get("spacing", "uniform"),
        )


@GRID_SPACINGS(name="uniform")
def _uniform_times(start: float, stop: float, K: int) -> np.ndarray:
    return np.linspace(start, stop, K + 1)


@GRID_SPACINGS(name="geometric")
def _geometric_times(start: float, stop: float, K: int, ratio: float = None) -> np.ndarray:
    # deltas grow by a constant ratio away from t0, so the finest steps sit where sigma_t^2 is smallest
    if K == 1:
        return np.array([start, stop])
    if ratio is None:
        ratio = (stop / start)**(1.0 / K)
    if abs(ratio - 1.0) < 1e-12:
        return np.linspace(start, stop, K + 1)
    first = (stop - start) * (ratio - 1.0) / (ratio**K - 1.0)
    deltas = first * ratio**np.arange(K)
    times = start + np.concatenate([[0.0], np.cumsum(deltas)])
    times[-1] = stop
    return times


def make_time_grid(T: float, K: int, t0: float, kappa_stop: float = 0.0, spacing: str = "uniform") -> TimeGrid:
    """Build a :class:`TimeGrid` on ``[t0, T - kappa_stop]`` with ``K`` steps.

    Args:
        T: Horizon.
        K: Number of reverse steps.
        t0: Early-stopping time.
        kappa_stop: Gap between the last grid time and ``T``.
        spacing: Key in ``GRID_SPACINGS`` (``uniform`` or ``geometric``).
    """
    if not (isinstance(K, (int, np.integer)) and K >= 1):
        raise ConfigurationError(f"`K` must be a positive integer, found {K}")
    if not all(math.isfinite(v) for v in (T, t0, kappa_stop)):
        raise ConfigurationError("`T`, `t0` and `kappa_stop` must be finite")
    if kappa_stop < 0:
        raise ConfigurationError(f"`kappa_stop` must be non-negative, found {kappa_stop}")
    stop = T - kappa_stop
    if not 0 < t0 < stop:
        raise ConfigurationError(f"Need 0 < t0 < T - kappa_stop, found t0={t0}, T - kappa_stop={stop}")
    times = GRID_SPACINGS.resolve(spacing)(float(t0), float(stop), int(K))
    times[0] = t0
    times[-1] = stop
    return TimeGrid(T=float(T), K=int(K), t0=float(t0), kappa_stop=float(kappa_stop), times=times, spacing=spacing)


def grid_step(grid: TimeGrid, k: int) -> Tuple[float, float]:
    """Return ``(t_k, t_{k-1})`` for reverse step ``k`` in ``1..K``."""
    if not 1 <= k <= grid.K:
        raise DomainError(f"Reverse step index must lie in [1, {grid.K}], found {k}")
    return float(grid.times[k]), float(grid.times[k - 1])
