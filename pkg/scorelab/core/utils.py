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
import math
from typing import Sequence, Tuple, Union

import numpy as np

from scorelab.core.exceptions import DomainError, NumericHealthError

ArrayLike = Union[float, Sequence[float], np.ndarray]


def split_rng(seed: int, *keys: int) -> np.random.Generator:
    """Derive an independent generator for ``keys`` from the master ``seed``.

    The same ``(seed, keys)`` always yields the same stream, and distinct key tuples never share one.

    >>> float(split_rng(7, 1, 2).standard_normal()) == float(split_rng(7, 1, 2).standard_normal())
    True
    """
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in keys)))


def child_seed(rng: np.random.Generator) -> int:
    """Draw a 63-bit seed from ``rng`` (used to seed ``torch.Generator`` objects)."""
    return int(rng.integers(0, 2**63 - 1))


def as_points(x: ArrayLike, d: int = None) -> np.ndarray:
    """Promote ``x`` to a float64 ``(n, d)`` array."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(1, -1) if d is None or arr.shape[0] == d else arr.reshape(-1, 1)
    if arr.ndim != 2:
        raise DomainError(f"Expected points of shape (n, d), found {arr.shape}")
    if d is not None and arr.shape[1] != d:
        raise DomainError(f"Expected points in R^{d}, found dimension {arr.shape[1]}")
    return arr


def check_time(t: float, name: str = "t") -> float:
    t = float(t)
    if not math.isfinite(t) or t < 0:
        raise DomainError(f"`{name}` must be a finite non-negative time, found {t}")
    return t


def check_finite(arr: np.ndarray, what: str) -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise NumericHealthError(f"Non-finite values detected in {what}")
    return arr


def pairwise_sum(values: np.ndarray) -> float:
    """Sum ``values`` with a fixed pairwise reduction tree, independent of how the work was split."""
    values = np.asarray(values, dtype=np.float64).ravel()
    if values.size == 0:
        return 0.0
    while values.size > 1:
        if values.size % 2:
            values = np.append(values, 0.0)
        values = values[0::2] + values[1::2]
    return float(values[0])


def mean_and_stderr(values: np.ndarray) -> Tuple[float, float]:
    """Monte-Carlo mean and standard error of the mean of a 1d sample."""
    values = np.asarray(values, dtype=np.float64).ravel()
    n = values.size
    mean = pairwise_sum(values) / n
    if n < 2:
        return mean, float("inf")
    return mean, float(np.std(values, ddof=1) / math.sqrt(n))


def fit_loglog_slope(x: ArrayLike, y: ArrayLike) -> Tuple[float, float]:
    """Least-squares slope and intercept of ``log y`` against ``log x``."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.size < 2:
        raise DomainError("A slope needs at least two points")
    if np.any(x <= 0) or np.any(y <= 0):
        raise DomainError("Log-log fits need strictly positive data")
    slope, intercept = np.polyfit(np.log(x), np.log(y), 1)
    return float(slope), float(intercept)
