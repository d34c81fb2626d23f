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

from scorelab.core.exceptions import ConfigurationError, DomainError
from scorelab.core.utils import split_rng
from scorelab.diffusion.ou import forward_sample, grid_step, make_time_grid, ou_marginal_params, sigma_sq, TimeGrid


@pytest.mark.parametrize(
    "t, shrink, sigma_t_sq",
    [
        (0.0, 1.0, 0.0),
        (math.log(2.0), 0.5, 0.75),
        (50.0, math.exp(-50.0), 1.0),
    ],
)
def test_ou_marginal_params(t, shrink, sigma_t_sq):
    params = ou_marginal_params(t)
    assert params.shrink == pytest.approx(shrink, rel=1e-14, abs=0.0)
    assert params.sigma_t_sq == pytest.approx(sigma_t_sq, abs=1e-12)


@pytest.mark.parametrize("t", [-0.1, math.nan, math.inf])
def test_ou_marginal_params_raises(t):
    with pytest.raises(DomainError):
        ou_marginal_params(t)


def test_shrink_and_variance_sum_to_one():
    for t in np.geomspace(1e-8, 40.0, 50):
        params = ou_marginal_params(t)
        assert params.shrink**2 + params.sigma_t_sq == pytest.approx(1.0, abs=1e-15)
    np.testing.assert_allclose(sigma_sq([0.0, math.log(2.0)]), [0.0, 0.75], atol=1e-15)


def test_forward_sample():
    np.testing.assert_array_equal(forward_sample([2.0], 0.0, [5.0]), [2.0])
    np.testing.assert_allclose(forward_sample([0.0, 0.0], math.log(2.0), [1.0, -1.0]), [0.75**0.5, -0.75**0.5])
    with pytest.raises(DomainError, match="shape"):
        forward_sample([0.0, 0.0], 1.0, [1.0])


def test_forward_sample_moments():
    n = 10**5
    noise = split_rng(0).standard_normal((n, 1))
    x = forward_sample(np.full((n, 1), 3.0), 1.0, noise)
    se_mean = math.sqrt((1 - math.exp(-2)) / n)
    assert abs(x.mean() - 3 * math.exp(-1)) < 3 * se_mean
    se_var = (1 - math.exp(-2)) * math.sqrt(2.0 / n)
    assert abs(x.var(ddof=1) - (1 - math.exp(-2))) < 3 * se_var


def test_semigroup_moments():
    n = 10**5
    rng = split_rng(1)
    x0 = np.full((n, 1), 2.0)
    two_stage = forward_sample(forward_sample(x0, 0.3, rng.standard_normal((n, 1))), 0.5, rng.standard_normal((n, 1)))
    one_stage = forward_sample(x0, 0.8, rng.standard_normal((n, 1)))
    var = 1 - math.exp(-1.6)
    assert abs(two_stage.mean() - one_stage.mean()) < 4 * math.sqrt(2 * var / n)
    assert abs(two_stage.var() - one_stage.var()) < 4 * var * math.sqrt(4.0 / n)


def test_make_time_grid_uniform():
    grid = make_time_grid(5.0, 1, 0.1)
    np.testing.assert_allclose(grid.times, [0.1, 5.0])
    np.testing.assert_allclose(grid.deltas, [4.9])

    grid = make_time_grid(2.0, 4, 0.2, kappa_stop=0.2)
    np.testing.assert_allclose(grid.deltas, [0.4] * 4)
    assert grid.t_last == pytest.approx(1.8)
    assert grid.deltas.sum() == pytest.approx(1.8 - 0.2)


def test_make_time_grid_geometric():
    grid = make_time_grid(2.0, 4, 0.01, spacing="geometric")
    deltas = grid.deltas
    assert np.all(np.diff(deltas) > 0)
    ratios = deltas[1:] / deltas[:-1]
    np.testing.assert_allclose(ratios, ratios[0], rtol=1e-9)
    assert grid.times[0] == 0.01
    assert grid.times[-1] == 2.0


def test_ddpm_coefficients_match_ou():
    grid = make_time_grid(5.0, 64, 1e-3)
    beta, alpha, alpha_bar = grid.ddpm_coeffs.T
    assert np.all((alpha_bar > 0) & (alpha_bar < 1))
    np.testing.assert_allclose(alpha_bar, np.exp(-2 * grid.times), rtol=0, atol=1e-12)
    np.testing.assert_allclose(np.cumprod(alpha), alpha_bar, rtol=1e-12)
    np.testing.assert_allclose(beta, 1 - alpha, atol=1e-15)


@pytest.mark.parametrize(
    "kwargs",
    [
        dict(T=1.0, K=0, t0=0.1),
        dict(T=1.0, K=4, t0=0.0),
        dict(T=1.0, K=4, t0=1.0),
        dict(T=1.0, K=4, t0=0.5, kappa_stop=0.5),
        dict(T=1.0, K=4, t0=0.1, kappa_stop=-0.1),
        dict(T=1.0, K=4, t0=0.1, spacing="cosine"),
    ],
)
def test_make_time_grid_raises(kwargs):
    with pytest.raises(ConfigurationError):
        make_time_grid(**kwargs)


def test_time_grid_round_trip():
    grid = make_time_grid(3.0, 8, 0.05, kappa_stop=0.1, spacing="geometric")
    restored = TimeGrid.from_dict(grid.to_dict())
    np.testing.assert_array_equal(restored.times, grid.times)
    assert (restored.T, restored.K, restored.t0, restored.kappa_stop) == (3.0, 8, 0.05, 0.1)
    assert grid_step(grid, 1) == (grid.times[1], grid.times[0])
    with pytest.raises(DomainError):
        grid_step(grid, 0)
