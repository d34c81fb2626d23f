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
import os

import numpy as np
import pytest

from scorelab.core.exceptions import (
    ConfigurationError,
    ContractError,
    DivergenceError,
    DivisionGuardError,
    DomainError,
    NumericHealthError,
)
from scorelab.core.utils import fit_loglog_slope, split_rng
from scorelab.diffusion.ou import make_time_grid
from scorelab.diffusion.targets import gaussian_1d, gaussian_score_coefficients, mixture_2d, standard_normal
from scorelab.score.model import LinearScoreModel, MLPScoreModel
from scorelab.score.training import (
    assumption_probes,
    batch_schedule,
    bayes_denoising_loss,
    DenoisingBatch,
    DenoisingOracle,
    denoising_loss,
    draw_denoising_batch,
    EmpiricalDenoisingOracle,
    estimate_optimal_loss,
    oracle_probes,
    population_score_loss,
    QuadraticOracle,
    recursion_bound,
    ScoreLossOracle,
    sgd_pl_run,
    SGDTrace,
    TrainConfig,
    unrolled_rate_bound,
)


def test_denoising_loss_of_zero_model():
    batch = DenoisingBatch(x0=[[0.3]], t=[0.5], noise=[[1.0]])
    loss, grad = denoising_loss(LinearScoreModel(1), batch)
    assert loss == 1.0
    assert grad.shape == (2, )


def test_denoising_loss_averages_items():
    model = LinearScoreModel(1, A=[[-0.7]], b=[0.2])
    first = DenoisingBatch(x0=[[0.3]], t=[0.5], noise=[[1.0]])
    second = DenoisingBatch(x0=[[-1.2]], t=[1.5], noise=[[-0.4]])
    both = DenoisingBatch(x0=[[0.3], [-1.2]], t=[0.5, 1.5], noise=[[1.0], [-0.4]])
    expected = 0.5 * (denoising_loss(model, first)[0] + denoising_loss(model, second)[0])
    assert denoising_loss(model, both)[0] == pytest.approx(expected, abs=1e-12)


def test_oracle_beats_perturbed_models():
    batch = draw_denoising_batch(standard_normal(), [0.5], 10**4, split_rng(0))
    oracle_loss, _ = denoising_loss(LinearScoreModel(1, A=[[-1.0]]), batch)
    rng = split_rng(1)
    for _ in range(50):
        direction = rng.standard_normal(2)
        delta = 0.3 * direction / np.linalg.norm(direction)
        perturbed = LinearScoreModel(1, A=[[-1.0 + delta[0]]], b=[delta[1]])
        assert oracle_loss <= denoising_loss(perturbed, batch)[0]


def test_denoising_loss_guards():
    model = LinearScoreModel(1)
    with pytest.raises(DivisionGuardError):
        denoising_loss(model, DenoisingBatch(x0=[[0.3]], t=[0.0], noise=[[1.0]]))
    with pytest.raises(NumericHealthError):
        denoising_loss(model, DenoisingBatch(x0=[[math.nan]], t=[0.5], noise=[[1.0]]))
    with pytest.raises(DomainError):
        denoising_loss(model, DenoisingBatch(x0=[[0.3]], t=[3.0], noise=[[1.0]]), make_time_grid(2.0, 4, 0.1))
    with pytest.raises(ContractError):
        DenoisingBatch(x0=[[0.3, 0.1]], t=[0.5], noise=[[1.0]])


def test_draw_denoising_batch():
    times = [0.1, 0.5, 2.0]
    batch = draw_denoising_batch(mixture_2d(), times, 500, split_rng(2))
    assert len(batch) == 500
    assert batch.x0.shape == batch.noise.shape == (500, 2)
    assert set(np.unique(batch.t)) == set(times)
    shrink = np.exp(-batch.t)[:, None]
    np.testing.assert_allclose(batch.x_t, shrink * batch.x0 + np.sqrt(1 - shrink**2) * batch.noise, atol=1e-14)


def test_population_score_loss():
    target = gaussian_1d()
    A, b = gaussian_score_coefficients(target, 0.4)
    loss, stderr = population_score_loss(LinearScoreModel(1, A=A, b=b), target, 0.4, 1000, split_rng(3))
    assert loss == pytest.approx(0.0, abs=1e-12)

    n = 20_000
    loss, stderr = population_score_loss(LinearScoreModel(2), standard_normal(2), 0.7, n, split_rng(4))
    assert abs(loss - 2.0) < 4 * stderr

    loss, _ = population_score_loss(LinearScoreModel(2, A=-np.eye(2)), standard_normal(2), 0.7, 1000, split_rng(5))
    assert loss == pytest.approx(0.0, abs=1e-20)

    with pytest.raises(DomainError):
        population_score_loss(LinearScoreModel(1), target, 0.4, 99, split_rng(6))


def test_bayes_denoising_loss_closed_form():
    value, source = bayes_denoising_loss(standard_normal(2), 0.5)
    assert source == "closed_form"
    assert value == pytest.approx(2 * math.exp(-1.0), rel=1e-12)
    with pytest.raises(ContractError):
        bayes_denoising_loss(mixture_2d(), 0.5)


def test_batch_schedule():
    sizes = batch_schedule(2.5, 100)
    assert sizes == [math.ceil(2.5 * i) for i in range(1, len(sizes) + 1)]
    assert sum(sizes) <= 100 < sum(sizes) + math.ceil(2.5 * (len(sizes) + 1))

    sizes = np.array(batch_schedule(1.0, 10**6))
    cumulative = np.cumsum(sizes)
    iterations = np.unique(np.geomspace(100, len(sizes), 20).astype(int))
    slope, _ = fit_loglog_slope(iterations, cumulative[iterations - 1])
    assert slope == pytest.approx(2.0, abs=0.1)


def test_sgd_newton_step_on_quadratic():
    config = TrainConfig(eta=0.5, budget=1)
    trace, theta = sgd_pl_run(config, QuadraticOracle.scalar(2.0), [3.0], split_rng(7))
    np.testing.assert_array_equal(theta, [0.0])
    assert len(trace) == 1
    assert trace.records[0].population_loss == 0.0
    assert trace.initial_population_loss == 9.0
    assert trace.optimum_source == "closed_form"
    assert trace.final_suboptimality() == 0.0
    assert trace.rate_bound == 0.0


def test_sgd_rate_on_noisy_quadratic():
    budgets = [10**3, 10**4, 10**5, 10**6]
    oracle = QuadraticOracle.scalar(1.0, sigma=1.0)
    means = []
    for n in budgets:
        finals = []
        for r in range(30):
            config = TrainConfig(eta=0.5, budget=n, eval_every=10**9)
            trace, _ = sgd_pl_run(config, oracle, [1.0], split_rng(8, n, r))
            finals.append(trace.final_suboptimality())
        means.append(np.mean(finals))
    slope, _ = fit_loglog_slope(budgets, means)
    assert -0.65 <= slope <= -0.35


def test_unrolled_rate_bound():
    assert unrolled_rate_bound(2.0, 0.5, 1.0, 1.0, 1.0, 1.0, 0) == 2.0
    assert unrolled_rate_bound(2.0, 0.5, 1.0, 1.0, 1.0, 1.0, 2) == pytest.approx(0.25 * 2.0 + 0.25 / 2)


def test_quadratic_trace_reports_unrolled_bound():
    oracle = QuadraticOracle.scalar(1.0, sigma=1.0)
    config = TrainConfig(eta=0.5, budget=10**4, eval_every=10**9)
    finals, bounds = [], set()
    for r in range(30):
        trace, _ = sgd_pl_run(config, oracle, [1.0], split_rng(10, r))
        finals.append(trace.final_suboptimality())
        bounds.add(trace.rate_bound)
    assert len(bounds) == 1
    bound = bounds.pop()
    iterations = len(batch_schedule(1.0, 10**4))
    assert bound == pytest.approx(unrolled_rate_bound(0.5, 0.5, 1.0, 1.0, 1.0, 1.0, iterations))
    assert np.mean(finals) <= bound + 3 * np.std(finals) / math.sqrt(len(finals))


def test_one_step_recursion_bound():
    rng = split_rng(9)
    eta, sigma, b, reps = 0.5, 1.0, 4, 400
    for _ in range(20):
        lams = rng.uniform(0.2, 2.0, size=3)
        oracle = QuadraticOracle(np.diag(lams), sigma=sigma)
        theta = rng.standard_normal(3)
        delta = oracle.population(theta)[0]
        after = []
        for _ in range(reps):
            _, grad = oracle.minibatch(theta, b, rng)
            after.append(oracle.population(theta - eta * grad)[0])
        bound = recursion_bound(delta, eta, lams.min(), lams.max(), sigma**2, b)
        assert np.mean(after) <= bound + 3 * np.std(after) / math.sqrt(reps)


def test_population_loss_trends_down():
    dim = 200
    oracle = QuadraticOracle(np.diag(np.linspace(0.5, 1.0, dim)), sigma=1.0)
    config = TrainConfig(eta=1.0, budget=300 * 301 // 2)
    trace, _ = sgd_pl_run(config, oracle, np.ones(dim), split_rng(10))
    assert len(trace) == 300
    losses = trace.population_losses()
    medians = [np.median(losses[i:i + 50]) for i in range(0, 300, 50)]
    assert all(later <= earlier for earlier, later in zip(medians, medians[1:]))


class _BrokenOracle(QuadraticOracle):

    def minibatch(self, theta, batch_size, rng):
        if batch_size >= 3:
            return math.nan, np.full(self.dim, math.nan)
        return super().minibatch(theta, batch_size, rng)


def test_sgd_divergence_carries_trace():
    with pytest.raises(DivergenceError) as err:
        sgd_pl_run(TrainConfig(eta=0.1, budget=100), _BrokenOracle([[1.0]]), [1.0], split_rng(11))
    assert len(err.value.trace) == 2


def test_sgd_warns_on_large_step():
    with pytest.warns(UserWarning, match="exceeds"):
        sgd_pl_run(TrainConfig(eta=1.0, budget=3), QuadraticOracle.scalar(4.0), [1.0], split_rng(12))


def test_sgd_rejects_bad_init():
    with pytest.raises(ContractError):
        sgd_pl_run(TrainConfig(eta=0.1, budget=3), QuadraticOracle.scalar(1.0), [1.0, 2.0], split_rng(13))


@pytest.mark.parametrize(
    "kwargs",
    [
        dict(eta=0.0),
        dict(eta=0.1, beta_batch=-1.0),
        dict(eta=0.1, budget=0),
        dict(eta=0.1, mode="adam"),
        dict(eta=0.1, eval_every=0),
    ],
)
def test_train_config_raises(kwargs):
    with pytest.raises(ConfigurationError):
        TrainConfig(**kwargs)


def test_trace_round_trip(tmpdir):
    trace, _ = sgd_pl_run(TrainConfig(eta=0.2, budget=20, eval_every=2), QuadraticOracle.scalar(1.0, 0.5), [1.0],
                          split_rng(14))
    path = trace.save(str(tmpdir))
    assert os.path.basename(path) == "trace.jsonl"
    restored = SGDTrace.load(str(tmpdir))
    assert restored.records == trace.records
    assert restored.optimum == 0.0
    np.testing.assert_array_equal(restored.batch_sizes, [1, 2, 3, 4, 5])
    # odd iterations before the last skip the population loss
    assert np.isnan(restored.population_losses()[0])
    assert not np.isnan(restored.population_losses()[-1])
    with pytest.raises(ContractError):
        SGDTrace().suboptimality()


def test_denoising_minimizer_matches_least_squares():
    batch = draw_denoising_batch(gaussian_1d(), [0.3], 2000, split_rng(15))
    oracle = EmpiricalDenoisingOracle(LinearScoreModel(1), batch)
    estimate = estimate_optimal_loss(oracle, np.zeros(2))
    assert estimate.converged
    np.testing.assert_allclose(estimate.theta, oracle.minimizer(), atol=1e-6)
    assert oracle.optimum()[0] == pytest.approx(estimate.loss, abs=1e-10)


def test_probes_on_quadratic():
    report = oracle_probes(QuadraticOracle.scalar(3.0), [1.0], split_rng(16), grad_replicates=10)
    assert report.pl_ratio_min == pytest.approx(3.0, rel=1e-12)
    assert report.smoothness_L_hat == pytest.approx(3.0, rel=1e-12)
    assert report.optimum_source == "closed_form"


def test_gradient_variance_scales_inversely_with_batch():
    oracle = QuadraticOracle(np.eye(4), sigma=2.0)
    small = oracle_probes(oracle, np.ones(4), split_rng(17), batch_size=32, grad_replicates=2000)
    large = oracle_probes(oracle, np.ones(4), split_rng(18), batch_size=64, grad_replicates=2000)
    assert small.grad_var_hat == pytest.approx(4.0 / 32, rel=0.1)
    assert 0.4 <= large.grad_var_hat / small.grad_var_hat <= 0.6


def test_assumption_probes_linear_family():
    target, t = gaussian_1d(), 0.5
    model = LinearScoreModel(1, A=[[0.5]], b=[1.0])
    rng = split_rng(19)
    oracle = ScoreLossOracle(model, target, t, 500, rng)
    expected = oracle_probes(oracle, model.flat_params(), rng, grad_replicates=20)
    report = assumption_probes(model, target, t, 500, split_rng(19), grad_replicates=20)
    assert report == expected
    assert report.pl_ratio_min == pytest.approx(np.linalg.eigvalsh(oracle.hessian()).min(), abs=1e-6)
    assert report.pl_ratio_min > 0
    with pytest.raises(DomainError):
        assumption_probes(model, target, t, 50, split_rng(19))


def test_denoising_oracle_population_gap_is_score_loss():
    target = gaussian_1d()
    model = LinearScoreModel(1, A=[[-0.5]], b=[0.1])
    oracle = DenoisingOracle(model, target, [0.8], mc_n=4000, rng=split_rng(20))
    optimum, source = oracle.optimum()
    assert source == "closed_form"
    gap = oracle.population(model.flat_params())[0] - optimum
    score_loss, _ = population_score_loss(model, target, 0.8, 4000, split_rng(20))
    assert gap == pytest.approx((1 - math.exp(-1.6)) * score_loss, rel=1e-10)
    assert oracle.optimum() == bayes_denoising_loss(target, 0.8)


def test_mlp_trains_on_empirical_oracle():
    batch = draw_denoising_batch(gaussian_1d(), [0.5], 512, split_rng(21))
    model = MLPScoreModel(1, depth=2, width=8, seed=0)
    oracle = EmpiricalDenoisingOracle(model, batch)
    trace, theta = sgd_pl_run(TrainConfig(eta=0.05, budget=512 * 4), oracle, model.flat_params(), split_rng(22))
    assert oracle.population(theta)[0] < trace.initial_population_loss
    assert oracle.optimum() == (None, "none")
