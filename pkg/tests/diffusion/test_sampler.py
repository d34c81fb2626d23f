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

from scorelab.core.exceptions import ConfigurationError, ContractError, DivergenceError, DivisionGuardError
from scorelab.core.utils import fit_loglog_slope, split_rng
from scorelab.diffusion.ou import make_time_grid, TimeGrid
from scorelab.diffusion.sampler import (
    draw_noise,
    exact_init_moments,
    generate,
    OracleScore,
    reverse_gaussian_moments,
    reverse_step_ddpm,
    reverse_step_exponential,
    ReverseRunSpec,
    step_affine_map,
)
from scorelab.diffusion.targets import gaussian_1d, marginal_at, mixture_2d, standard_normal
from scorelab.metrics.tv import gaussian_tv


def test_ddpm_step_with_zero_noise_prediction_rescales():
    grid = make_time_grid(1.0, 4, 0.2)
    x = np.array([[1.0], [-2.0]])
    out = reverse_step_ddpm(x, 2, np.zeros_like(x), np.zeros_like(x), grid)
    np.testing.assert_allclose(out, x * math.exp(0.2), rtol=1e-14)


def test_steps_match_affine_map():
    grid = make_time_grid(2.0, 5, 0.1)
    rng = split_rng(0)
    x, s, z = rng.standard_normal((3, 7, 2))
    for k in (2, 5):
        sigma = math.sqrt(1.0 - grid.ddpm_coeffs[k, 2])
        a, c, v = step_affine_map(grid, k, "ddpm")
        np.testing.assert_allclose(reverse_step_ddpm(x, k, -sigma * s, z, grid), a * x + c * s + math.sqrt(v) * z)
        a, c, v = step_affine_map(grid, k, "exponential")
        np.testing.assert_allclose(reverse_step_exponential(x, k, s, z, grid), a * x + c * s + math.sqrt(v) * z)
    assert step_affine_map(grid, 1, "ddpm")[2] == 0.0
    with pytest.raises(ConfigurationError):
        step_affine_map(grid, 1, "heun")


def test_step_guards():
    grid = make_time_grid(1.0, 4, 0.2)
    x = np.zeros((1, 1))
    for k in (0, 5):
        with pytest.raises(ContractError):
            reverse_step_ddpm(x, k, x, x, grid)
    degenerate = TimeGrid(T=1.0, K=2, t0=0.0, kappa_stop=0.0, times=np.array([0.0, 0.0, 1.0]))
    with pytest.raises(DivisionGuardError):
        reverse_step_ddpm(x, 1, x, x, degenerate)
    with pytest.raises(DivisionGuardError):
        reverse_step_exponential(x, 1, x, x, degenerate)


def test_ddpm_preserves_standard_normal_up_to_the_last_step():
    grid = make_time_grid(5.0, 64, 1e-3)
    target = standard_normal()
    _, cov = reverse_gaussian_moments(grid, OracleScore(target).linear_coefficients, np.zeros(1), np.eye(1))
    last_delta = grid.times[1] - grid.times[0]
    assert cov[0, 0] == pytest.approx(math.exp(-2 * last_delta), rel=1e-12)

    n = 10**5
    samples = generate(ReverseRunSpec(grid, n_samples=n, target=target), rng=split_rng(1)).samples
    var = math.exp(-2 * last_delta)
    assert abs(samples.mean()) < 4 * math.sqrt(var / n)
    assert abs(samples.var(ddof=1) - var) < 4 * var * math.sqrt(2.0 / n)


def test_exponential_stays_near_standard_normal():
    grid = make_time_grid(5.0, 256, 1e-3)
    target = standard_normal()
    mean, cov = reverse_gaussian_moments(
        grid, OracleScore(target).linear_coefficients, np.zeros(1), np.eye(1), variant="exponential"
    )
    assert mean[0] == 0.0
    assert abs(cov[0, 0] - 1.0) < 5 * grid.deltas.max()


@pytest.mark.parametrize("variant", ["ddpm", "exponential"])
def test_generate_matches_closed_form_moments(variant):
    grid = make_time_grid(5.0, 128, 1e-3)
    target = gaussian_1d()
    n = 40_000
    spec = ReverseRunSpec(grid, n_samples=n, target=target, variant=variant)
    samples = generate(spec, rng=split_rng(2)).samples
    init_mean, init_cov = exact_init_moments(target, grid)
    mean, cov = reverse_gaussian_moments(grid, OracleScore(target).linear_coefficients, init_mean, init_cov, variant)
    var = cov[0, 0]
    assert abs(samples.mean() - mean[0]) < 4 * math.sqrt(var / n)
    assert abs(samples.var(ddof=1) - var) < 4 * var * math.sqrt(2.0 / n)


def test_discretization_error_decreases_with_K():
    target = gaussian_1d()
    oracle = OracleScore(target)
    p_t0 = marginal_at(target, 1e-3).component()
    Ks = [16, 64, 256, 1024]
    tvs = []
    for K in Ks:
        grid = make_time_grid(5.0, K, 1e-3)
        mean, cov = reverse_gaussian_moments(grid, oracle.linear_coefficients, *exact_init_moments(target, grid))
        tvs.append(gaussian_tv(mean, cov, *p_t0).value)
    assert tvs[-1] < tvs[1] < tvs[0]
    slope, _ = fit_loglog_slope(Ks, tvs)
    assert slope <= -0.25
    assert tvs[2] < 0.05


def test_variants_agree_to_second_order():
    target = standard_normal()
    deltas, gaps = [], []
    for K in (32, 64, 128, 256):
        grid = make_time_grid(2.0, K, 1e-3)
        noise = draw_noise(split_rng(3, K), K, 20_000, 1, target)
        outs = [
            generate(ReverseRunSpec(grid, n_samples=20_000, target=target, variant=v), noise=noise).samples
            for v in ("ddpm", "exponential")
        ]
        deltas.append(grid.deltas.max())
        gaps.append(float(np.mean((outs[0] - outs[1])**2)))
    slope, _ = fit_loglog_slope(deltas, gaps)
    assert 1.7 <= slope <= 2.3


def test_single_step_grid():
    grid = make_time_grid(1.0, 1, 0.1)
    target = gaussian_1d()
    noise = draw_noise(split_rng(4), 1, 5, 1)
    spec = ReverseRunSpec(grid, n_samples=5, init="standard_normal", target=target)
    out = generate(spec, noise=noise)
    a, c, v = step_affine_map(grid, 1, "ddpm")
    assert v == 0.0
    expected = a * noise.init + c * OracleScore(target)(noise.init, 1.0)
    np.testing.assert_allclose(out.samples, expected, rtol=1e-12)
    assert out.score_calls == 5
    assert [s.k for s in out.telemetry] == [1]


def test_generate_is_independent_of_workers():
    grid = make_time_grid(3.0, 16, 0.01)
    spec = ReverseRunSpec(grid, n_samples=1000, target=mixture_2d(), variant="exponential")
    serial = generate(spec, rng=split_rng(5), reference=OracleScore(mixture_2d()))
    threaded = generate(spec, rng=split_rng(5), reference=OracleScore(mixture_2d()), workers=3)
    np.testing.assert_allclose(serial.samples, threaded.samples, rtol=0, atol=1e-12)
    assert serial.score_calls == threaded.score_calls == 16 * 1000
    for a, b in zip(serial.telemetry, threaded.telemetry):
        assert a.k == b.k
        assert a.mean_score_sq == pytest.approx(b.mean_score_sq, rel=1e-12)

    gaps, deltas = serial.drift_gaps()
    assert gaps.shape == (16, 1000)
    np.testing.assert_allclose(gaps, 0.0, atol=1e-20)
    np.testing.assert_allclose(deltas, grid.deltas)


def test_drift_gaps_need_a_reference():
    grid = make_time_grid(1.0, 2, 0.1)
    result = generate(ReverseRunSpec(grid, n_samples=3, target=gaussian_1d()), rng=split_rng(6))
    with pytest.raises(ContractError):
        result.drift_gaps()


def test_generate_raises_on_divergence():
    grid = make_time_grid(1.0, 4, 0.1)

    def broken(x, t):
        return np.full_like(x, np.nan)

    spec = ReverseRunSpec(grid, score=broken, n_samples=10, init="standard_normal", d=1)
    with pytest.raises(DivergenceError) as err:
        generate(spec, rng=split_rng(7))
    assert err.value.step == 4


def test_generate_contracts():
    grid = make_time_grid(1.0, 4, 0.1)
    spec = ReverseRunSpec(grid, n_samples=10, target=gaussian_1d())
    with pytest.raises(ContractError):
        generate(spec)
    with pytest.raises(ContractError):
        generate(spec, noise=draw_noise(split_rng(8), 3, 10, 1, gaussian_1d()))
    with pytest.raises(ContractError):
        generate(spec, noise=draw_noise(split_rng(8), 4, 10, 1))


@pytest.mark.parametrize(
    "kwargs",
    [
        dict(n_samples=0, target=gaussian_1d()),
        dict(init="prior", target=gaussian_1d()),
        dict(variant="heun", target=gaussian_1d()),
        dict(target=None),
        dict(score="learned", target=gaussian_1d()),
        dict(score=lambda x, t: -x, init="standard_normal"),
    ],
)
def test_reverse_run_spec_raises(kwargs):
    with pytest.raises(ConfigurationError):
        ReverseRunSpec(make_time_grid(1.0, 4, 0.1), **kwargs)


def test_reverse_run_spec_to_dict():
    spec = ReverseRunSpec(make_time_grid(1.0, 4, 0.1), n_samples=3, target=gaussian_1d(), variant="exponential")
    data = spec.to_dict()
    assert data["score"] == "oracle"
    assert data["variant"] == "exponential"
    assert data["d"] == 1
    assert data["grid"]["K"] == 4
