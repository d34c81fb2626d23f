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
"""Numeric checks of the auxiliary inequalities used by the sample complexity argument."""
import math
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence

import numpy as np
import pandas as pd
from pytorch_lightning.utilities import rank_zero_info
from scipy import integrate
from scipy.special import erfcx
from scipy.stats import norm

from scorelab.core.exceptions import ConfigurationError, DomainError
from scorelab.core.utils import ArrayLike, as_points, fit_loglog_slope, mean_and_stderr, split_rng
from scorelab.diffusion.targets import (
    gaussian,
    gaussian_score_coefficients,
    GaussianMixtureTarget,
    sample_marginal,
    true_score,
)
from scorelab.score.decomposition import linear_gap_closed_form
from scorelab.score.model import linear_growth_certificate, LinearScoreModel, MLPScoreModel, ScoreModel
from scorelab.score.training import LossOracle, population_score_loss, QuadraticOracle, ScoreLossOracle

# beyond this the direct ratio pdf / sf loses digits
_MILLS_SWITCH = 8.0


@dataclass(frozen=True)
class LemmaCheckResult:
    """Outcome of one check.

    ``kind="equality"`` passes when the relative error is within ``tolerance``; ``kind="upper_bound"``
    passes when ``numeric <= analytic + tolerance``.
    """

    lemma: str
    analytic: float
    numeric: float
    tolerance: float
    kind: str = "equality"
    detail: Dict[str, Any] = field(default_factory=dict)

    @property
    def abs_error(self) -> float:
        return abs(self.analytic - self.numeric)

    @property
    def rel_error(self) -> float:
        return self.abs_error / max(abs(self.analytic), 1e-300)

    @property
    def slack(self) -> float:
        return self.analytic - self.numeric

    @property
    def passed(self) -> bool:
        if self.kind == "upper_bound":
            return self.numeric <= self.analytic + self.tolerance
        return self.rel_error <= self.tolerance

    def to_dict(self) -> Dict[str, Any]:
        return {
            "lemma": self.lemma,
            "kind": self.kind,
            "analytic": self.analytic,
            "numeric": self.numeric,
            "abs_error": self.abs_error,
            "rel_error": self.rel_error,
            "tolerance": self.tolerance,
            "passed": self.passed,
            "detail": self.detail,
        }


def mills_ratio(u: ArrayLike) -> np.ndarray:
    """Gaussian hazard ``phi(u) / (1 - Phi(u))``, via ``erfcx`` for large ``u``.

    >>> round(float(mills_ratio(1.0)), 4)
    1.5251
    """
    u = np.asarray(u, dtype=np.float64)
    direct = norm.pdf(np.minimum(u, _MILLS_SWITCH)) / norm.sf(np.minimum(u, _MILLS_SWITCH))
    # sf(u) = erfcx(u / sqrt 2) exp(-u^2 / 2) / 2 cancels the exponential of the density
    scaled = math.sqrt(2.0 / math.pi) / erfcx(u / math.sqrt(2.0))
    return np.where(u > _MILLS_SWITCH, scaled, direct)


def truncated_second_moment(mu: float, sigma: float, a: float) -> float:
    """``E[X^2 | |X - mu| > a]`` for ``X ~ N(mu, sigma^2)``: ``mu^2 + sigma^2 + sigma a M(a / sigma)``.

    >>> truncated_second_moment(2.0, 1.0, 0.0)
    5.0
    """
    if not sigma > 0:
        raise DomainError(f"`sigma` must be positive, found {sigma}")
    if a < 0:
        raise DomainError(f"The truncation radius must be non-negative, found {a}")
    if a == 0:
        return float(mu**2 + sigma**2)
    return float(mu**2 + sigma**2 + sigma * a * mills_ratio(a / sigma))


def truncated_second_moment_quadrature(mu: float, sigma: float, a: float) -> float:
    """Quadrature oracle for :func:`truncated_second_moment`.

    Both tails are integrated relative to the density at the truncation point, ``w`` measuring the
    standardized distance past it, so deep truncations keep full precision.
    """
    u = a / sigma

    def numerator(w: float) -> float:
        z = u + w
        return ((mu + sigma * z)**2 + (mu - sigma * z)**2) * math.exp(-u * w - 0.5 * w * w)

    num, _ = integrate.quad(numerator, 0.0, math.inf, epsabs=0.0, epsrel=1e-13, limit=200)
    den, _ = integrate.quad(lambda w: math.exp(-u * w - 0.5 * w * w), 0.0, math.inf, epsabs=0.0, epsrel=1e-13)
    return num / (2.0 * den)


def truncated_moment_check(mu: float, sigma: float, a: float, tolerance: float = 1e-6) -> LemmaCheckResult:
    return LemmaCheckResult(
        lemma="truncated_second_moment",
        analytic=truncated_second_moment(mu, sigma, a),
        numeric=truncated_second_moment_quadrature(mu, sigma, a),
        tolerance=tolerance,
        detail={"mu": mu, "sigma": sigma, "a": a},
    )


def default_kappa_grid(points: int = 200) -> np.ndarray:
    return np.geomspace(0.01, 50.0, points)


def mills_ratio_bound_check(kappa_grid: Sequence[float], tolerance: float = 0.0) -> List[LemmaCheckResult]:
    """``phi(kappa) / (1 - Phi(kappa)) <= kappa + 1 / kappa`` at every grid point."""
    kappas = np.asarray(kappa_grid, dtype=np.float64).ravel()
    if kappas.size == 0:
        raise ConfigurationError("The kappa grid is empty")
    if np.any(kappas <= 0):
        raise DomainError("Every kappa must be positive")
    ratios = mills_ratio(kappas)
    return [
        LemmaCheckResult(
            lemma="mills_ratio_bound",
            analytic=float(k + 1.0 / k),
            numeric=float(r),
            tolerance=tolerance,
            kind="upper_bound",
            detail={"kappa": float(k)},
        ) for k, r in zip(kappas, ratios)
    ]


def _scalar_outputs(model: ScoreModel, x: np.ndarray, t: float, output: int) -> np.ndarray:
    return model.evaluate(x, t)[:, output]


def massart_rademacher_check(
    model_a: ScoreModel,
    model_b: ScoreModel,
    x: ArrayLike,
    t: float,
    replicates: int,
    rng: np.random.Generator,
    output: int = 0,
    slack: float = 3.0,
) -> LemmaCheckResult:
    """Monte-Carlo ``E_sigma max_theta sum_i f_theta(x_i) sigma_i`` over the two-element class.

    Passes when the estimate is at most ``max_theta ||f_theta||_2`` (with ``slack`` standard errors). For MLP
    pairs the estimate must also sit below the larger ``(BW)^L (d + L / W)`` certificate of the two networks;
    both bounds and their slacks are reported in ``detail``.
    """
    x = as_points(x, model_a.d)
    if len(x) < 100:
        raise DomainError(f"The Rademacher check needs at least 100 points, found {len(x)}")
    F = np.stack([_scalar_outputs(model_a, x, t, output), _scalar_outputs(model_b, x, t, output)])
    signs = rng.choice(np.array([-1.0, 1.0]), size=(replicates, len(x)))
    estimate, stderr = mean_and_stderr(np.max(signs @ F.T, axis=1))
    norm_bound = float(np.max(np.linalg.norm(F, axis=1)))

    detail: Dict[str, Any] = {
        "n": len(x),
        "replicates": replicates,
        "stderr": stderr,
        "norm_bound": norm_bound,
        "norm_slack": norm_bound - estimate,
    }
    bound = norm_bound
    if all(isinstance(m, MLPScoreModel) for m in (model_a, model_b)):
        certificate = max(linear_growth_certificate(m).massart_bound for m in (model_a, model_b))
        detail.update(massart_certificate=certificate, certificate_slack=certificate - estimate)
        bound = min(bound, certificate)
    return LemmaCheckResult(
        lemma="massart_extension",
        analytic=bound,
        numeric=estimate,
        tolerance=slack * stderr,
        kind="upper_bound",
        detail=detail,
    )


def massart_sample(d: int, n: int, rng: np.random.Generator) -> np.ndarray:
    """Points in ``[-1, 1]^d``; with ``t <= 1`` every network feature lies in ``[-1, 1]``."""
    return rng.uniform(-1.0, 1.0, size=(n, d))


def exact_linear_score_loss(model: LinearScoreModel, target: GaussianMixtureTarget, t: float) -> float:
    """``E_{x ~ p_t} ||A x + b - grad log p_t(x)||^2`` in closed form for a single Gaussian."""
    exact = LinearScoreModel.from_coefficients(*gaussian_score_coefficients(target, t))
    return linear_gap_closed_form(model, exact, target, t)


@dataclass
class GapProbe:
    table: pd.DataFrame
    slope: Optional[float]
    population_loss: float
    population_stderr: float


def generalization_gap_probe(
    model: ScoreModel,
    target: GaussianMixtureTarget,
    t: float,
    n_grid: Sequence[int],
    replicates: int,
    rng: np.random.Generator,
    population_mc: int = 10**6,
) -> GapProbe:
    """``|L_hat_n(theta) - L(theta)|`` for a frozen model across sample sizes.

    Columns: ``n, gap_median, gap_mean, gap_stderr, signed_var``. ``signed_var`` is the replicate variance
    of ``L_hat_n - L``, which scales as ``1 / n``.
    """
    n_grid = [int(n) for n in n_grid]
    if not n_grid or any(b <= a for a, b in zip(n_grid, n_grid[1:])):
        raise ConfigurationError(f"`n_grid` must be a non-empty ascending list, found {n_grid}")
    if isinstance(model, LinearScoreModel) and target.is_gaussian:
        population, population_se = exact_linear_score_loss(model, target, t), 0.0
    else:
        population, population_se = population_score_loss(model, target, t, population_mc, rng)
    rows = []
    for n in n_grid:
        signed = np.empty(replicates)
        for r in range(replicates):
            x = sample_marginal(target, t, n, rng)
            signed[r] = np.mean(np.sum((model.evaluate(x, t) - true_score(target, x, t))**2, axis=1)) - population
        gap = np.abs(signed)
        mean, se = mean_and_stderr(gap)
        rows.append({
            "n": n,
            "gap_median": float(np.median(gap)),
            "gap_mean": mean,
            "gap_stderr": se,
            "signed_var": float(np.var(signed, ddof=1)) if replicates > 1 else math.nan,
        })
    table = pd.DataFrame(rows)
    slope = fit_loglog_slope(table["n"], table["gap_median"])[0] if len(table) >= 2 else None
    return GapProbe(table=table, slope=slope, population_loss=population, population_stderr=population_se)


def quadratic_growth_check(
    oracle: LossOracle,
    n_probes: int,
    rng: np.random.Generator,
    radius: float = 1.0,
    tolerance: float = 1e-9,
) -> LemmaCheckResult:
    """``||theta - theta*||^2 <= (2 / mu) (L(theta) - L*)`` on random probes around the minimizer.

    ``mu`` is the smallest Hessian eigenvalue; the oracle must expose its minimizer and Hessian.
    """
    theta_star, hessian = oracle.minimizer(), oracle.hessian()
    if theta_star is None or hessian is None:
        raise DomainError("Quadratic growth needs an oracle with a closed-form minimizer and Hessian")
    mu = float(np.linalg.eigvalsh(hessian)[0])
    if not mu > 0:
        raise DomainError(f"The loss is not strongly convex around its minimizer (mu={mu})")
    constant = 2.0 / mu
    base, _ = oracle.population(theta_star)
    worst, worst_ratio = -math.inf, 0.0
    for _ in range(n_probes):
        direction = rng.standard_normal(theta_star.shape)
        theta = theta_star + radius * (0.5 + 0.5 * rng.uniform()) * direction / np.linalg.norm(direction)
        loss, _ = oracle.population(theta)
        lhs = float(np.sum((theta - theta_star)**2))
        rhs = constant * abs(loss - base)
        excess = (lhs - rhs) / max(rhs, 1e-300)
        if excess > worst:
            worst, worst_ratio = excess, lhs / max(rhs, 1e-300)
    return LemmaCheckResult(
        lemma="quadratic_growth",
        analytic=1.0,
        numeric=worst_ratio,
        tolerance=tolerance,
        kind="upper_bound",
        detail={"mu": mu, "constant": constant, "probes": n_probes},
    )


def linear_growth_check(model: MLPScoreModel, n_points: int, rng: np.random.Generator) -> LemmaCheckResult:
    """``|f_j(x, t)| <= C_theta (1 + ||x||)`` on random points at nine times spanning ``[0, t_max]``."""
    cert = linear_growth_certificate(model)
    x = 3.0 * rng.standard_normal((n_points, model.d))
    scale = 1.0 + np.linalg.norm(x, axis=1, keepdims=True)
    ratio = max(float(np.max(np.abs(model.evaluate(x, t)) / scale)) for t in np.linspace(0.0, model.t_max, 9))
    return LemmaCheckResult(
        lemma="linear_growth",
        analytic=cert.C_theta,
        numeric=ratio,
        tolerance=0.0,
        kind="upper_bound",
        detail={"B": cert.B, "W": cert.W, "L": cert.L},
    )


@dataclass
class LemmaReport:
    results: List[LemmaCheckResult]

    @property
    def all_passed(self) -> bool:
        return all(r.passed for r in self.results)

    @property
    def failures(self) -> List[LemmaCheckResult]:
        return [r for r in self.results if not r.passed]

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame([{k: v for k, v in r.to_dict().items() if k != "detail"} for r in self.results])

    def summary(self) -> pd.DataFrame:
        """One row per lemma with the number of checks, failures and the largest relative error."""
        frame = self.to_frame()
        grouped = frame.groupby("lemma", sort=True)
        return pd.DataFrame({
            "checks": grouped.size(),
            "failed": grouped["passed"].apply(lambda s: int((~s.astype(bool)).sum())),
            "max_rel_error": grouped["rel_error"].max(),
        }).reset_index()

    def to_dict(self) -> Dict[str, Any]:
        return {"all_passed": self.all_passed, "results": [r.to_dict() for r in self.results]}


TRUNCATION_GRID = [(mu, sigma, a) for mu in (-3.0, 0.0, 3.0) for sigma in (0.5, 1.0, 2.0)
                   for a in (0.0, 0.5, 1.0, 2.0, 5.0)]


def run_lemma_suite(
    tolerance_scale: float = 1.0,
    seed: int = 0,
    kappa_grid: Optional[Sequence[float]] = None,
    massart_replicates: int = 2000,
    gap_replicates: int = 100,
) -> LemmaReport:
    """Every lemma check with its default tolerance multiplied by ``tolerance_scale``."""
    kappas = default_kappa_grid() if kappa_grid is None else kappa_grid
    results: List[LemmaCheckResult] = []

    results += [truncated_moment_check(mu, s, a, 1e-6 * tolerance_scale) for mu, s, a in TRUNCATION_GRID]
    results += mills_ratio_bound_check(kappas, tolerance=0.0 if tolerance_scale >= 0 else tolerance_scale)

    rng = split_rng(seed, 0)
    model_a = MLPScoreModel(1, depth=3, width=16, activation="gelu", seed=seed)
    model_b = MLPScoreModel(1, depth=3, width=16, activation="gelu", seed=seed + 1)
    sample = massart_sample(1, 1000, rng)
    results.append(massart_rademacher_check(model_a, model_b, sample, 0.5, massart_replicates, rng))
    results.append(linear_growth_check(model_a, 2000, rng))

    results.append(quadratic_growth_check(QuadraticOracle.scalar(2.0), 100, rng, tolerance=1e-9 * tolerance_scale))
    linear_loss = ScoreLossOracle(LinearScoreModel(1), gaussian([1.0], [[0.5]]), 0.5, 10_000, split_rng(seed, 1))
    results.append(quadratic_growth_check(linear_loss, 100, rng, tolerance=1e-9 * tolerance_scale))

    probe = generalization_gap_probe(
        LinearScoreModel(1, A=[[-0.5]], b=[0.2]),
        gaussian([1.0], [[0.5]]),
        0.5,
        [100, 1000, 10_000],
        gap_replicates,
        split_rng(seed, 2),
        population_mc=10**5,
    )
    results.append(
        LemmaCheckResult(
            lemma="generalization_gap_rate",
            analytic=-0.5,
            numeric=float(probe.slope),
            tolerance=0.3 * tolerance_scale,
            kind="equality",
            detail={"table": probe.table.to_dict(orient="list")},
        )
    )
    report = LemmaReport(results)
    rank_zero_info(f"Lemma suite: {len(report.results) - len(report.failures)}/{len(report.results)} checks passed")
    return report
