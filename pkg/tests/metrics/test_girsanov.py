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

import numpy as np
import pytest

from scorelab.core.exceptions import ContractError
from scorelab.core.utils import split_rng
from scorelab.diffusion.ou import make_time_grid
from scorelab.diffusion.sampler import generate, OracleScore, ReverseRunSpec
from scorelab.diffusion.targets import standard_normal
from scorelab.metrics.girsanov import DIFFUSION_SQ, girsanov_kl, girsanov_kl_from_run, GirsanovKL
from scorelab.score.model import LinearScoreModel


def test_constant_gap():
    deltas = np.array([0.1, 0.2, 0.3])
    result = girsanov_kl(np.full((3, 50), 0.5), deltas)
    assert DIFFUSION_SQ == 2.0
    assert result.kl == pytest.approx(0.5 * 0.6)
    assert result.stderr == pytest.approx(0.0, abs=1e-15)
    assert result.tv_pinsker == pytest.approx(math.sqrt(0.15))


def test_pinsker_is_capped():
    assert GirsanovKL(kl=10.0, stderr=0.0).tv_pinsker == 1.0
    assert GirsanovKL(kl=-1e-18, stderr=0.0).tv_pinsker == 0.0
    assert set(GirsanovKL(kl=0.5, stderr=0.1).to_dict()) == {"kl", "stderr", "tv_pinsker"}


def test_alignment_errors():
    grid = make_time_grid(1.0, 4, 0.1)
    with pytest.raises(ContractError):
        girsanov_kl(np.zeros((3, 10)), np.ones(4))
    with pytest.raises(ContractError):
        girsanov_kl(np.zeros(4), np.ones(4))
    with pytest.raises(ContractError):
        girsanov_kl(np.zeros((4, 10)), np.ones(4), grid)
    assert girsanov_kl(np.zeros((4, 10)), grid.deltas, grid).kl == 0.0


def test_from_run_with_shifted_linear_score():
    target = standard_normal(1)
    grid = make_time_grid(2.0, 10, 0.1)
    model = LinearScoreModel.from_coefficients([[-1.0]], [0.3])
    spec = ReverseRunSpec(grid, model, 500, "exact", "ddpm", target)
    run = generate(spec, split_rng(0), reference=OracleScore(target))
    result = girsanov_kl_from_run(run, grid)
    # the gap is 0.3 on every path, so the KL is 0.09 times the covered time
    assert result.kl == pytest.approx(0.09 * 1.9, rel=1e-9)


def test_oracle_against_itself_is_zero():
    target = standard_normal(2)
    grid = make_time_grid(1.0, 6, 0.05)
    spec = ReverseRunSpec(grid, "oracle", 200, "exact", "exponential", target)
    run = generate(spec, split_rng(1), reference=OracleScore(target))
    assert girsanov_kl_from_run(run).kl == 0.0
