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
from dataclasses import dataclass
from typing import Optional

import numpy as np

from scorelab.core.exceptions import ContractError
from scorelab.core.utils import ArrayLike, mean_and_stderr
from scorelab.diffusion.ou import TimeGrid
from scorelab.diffusion.sampler import GenerationResult

# squared diffusion coefficient of the reverse OU SDE
DIFFUSION_SQ = 2.0


@dataclass(frozen=True)
class GirsanovKL:
    kl: float
    stderr: float

    @property
    def tv_pinsker(self) -> float:
        return min(1.0, math.sqrt(max(self.kl, 0.0) / 2.0))

    def to_dict(self):
        return {"kl": self.kl, "stderr": self.stderr, "tv_pinsker": self.tv_pinsker}


def girsanov_kl(gap_sq: ArrayLike, deltas: ArrayLike, grid: Optional[TimeGrid] = None) -> GirsanovKL:
    """Discrete trajectory KL ``1/2 sum_k E ||sigma_k (s_theta - s*)||^2 delta_k`` with ``sigma_k^2 = 2``.

    Args:
        gap_sq: ``(K, n)`` squared drift gaps ``||s_theta - s*||^2`` along ``n`` paths of the learned process.
        deltas: ``(K,)`` step lengths matching the rows of ``gap_sq``.
        grid: When given, ``deltas`` must be its step lengths.
    """
    gap_sq = np.asarray(gap_sq, dtype=np.float64)
    deltas = np.asarray(deltas, dtype=np.float64).ravel()
    if gap_sq.ndim != 2 or gap_sq.shape[0] != deltas.size:
        raise ContractError(f"Drift gaps of shape {gap_sq.shape} do not align with {deltas.size} step lengths")
    if grid is not None and (deltas.size != grid.K or not np.allclose(deltas, grid.deltas, rtol=1e-12, atol=0.0)):
        raise ContractError("The step lengths do not belong to the given grid")
    per_path = 0.5 * DIFFUSION_SQ * deltas @ gap_sq
    kl, stderr = mean_and_stderr(per_path)
    return GirsanovKL(kl=kl, stderr=stderr)


def girsanov_kl_from_run(result: GenerationResult, grid: Optional[TimeGrid] = None) -> GirsanovKL:
    """Trajectory KL from a run that evaluated a reference score along its paths."""
    gap_sq, deltas = result.drift_gaps()
    return girsanov_kl(gap_sq, deltas, grid)
