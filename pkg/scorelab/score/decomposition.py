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
"""Per-step score error ``A(k)``, its approximation/statistical/optimization split and truncated scores."""
import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from pytorch_lightning.utilities import rank_zero_warn
from scipy.stats import norm

from scorelab.core.exceptions import ConfigurationError, ContractError, DomainError
from scorelab.core.utils import ArrayLike, as_points, check_time, fit_loglog_slope, mean_and_stderr, split_rng
from scorelab.diffusion.ou import forward_sample, ou_marginal_params, TimeGrid
from scorelab.diffusion.targets import GaussianMixtureTarget, marginal_at, sample_marginal, sample_p0, true_score
from scorelab.score.model import closed_form_minimizers, LinearScoreModel, ScoreModel, TimestepScoreBank
from scorelab.score.training import (
    DenoisingBatch,
    EmpiricalDenoisingOracle,
    estimate_optimal_loss,
    ScoreLossOracle,
)

REPORT_COLUMNS = [
    "k",
    "t",
    "delta_t",
    "A",
    "A_stderr",
    "e_approx",
    "e_approx_stderr",
    "e_stat",
    "e_stat_stderr",
    "e_opt",
    "e_opt_stderr",
    "flagged",
]


def estimate_A(
    model: ScoreModel,
    target: GaussianMixtureTarget,
    t_k: float,
    mc_n: int,
    rng: np.random.Generator,
) -> Tuple[float, float]:
    """Monte-Carlo ``E_{x ~ p_{t_k}} ||s(x, t_k) - grad log p_{t_k}(x)||^2`` and its standard error."""
    if mc_n < 1000:
        raise DomainError(f"`mc_n` must be at least 1000, found {mc_n}")
    t_k = check_time(t_k, "t_k")
    x = sample_marginal(target, t_k, mc_n, rng)
    return mean_and_stderr(np.sum((model.evaluate(x, t_k) - true_score(target, x, t_k))**2, axis=1))


@dataclass(frozen=True)
class Decomposition:
    """Component estimates at one time, all computed on the same Monte-Carlo draws."""

    t: float
    A: float
    A_stderr: float
    e_approx: float
    e_approx_stderr: float
    e_stat: float
    e_stat_stderr: float
    e_opt: float
    e_opt_stderr: float
    mode: str
    trusted: bool = True
    e_stat_closed_form: Optional[float] = None

    @property
    def combined_stderr(self) -> float:
        parts = self.e_approx_stderr**2 + self.e_stat_stderr**2 + self.e_opt_stderr**2
        return math.sqrt(self.A_stderr**2 + 16.0 * parts)

    def inequality_holds(self, slack: float = 3.0) -> bool:
        """``A <= 4 (e_approx + e_stat + e_opt) + slack * combined stderr``."""
        return self.A <= 4.0 * (self.e_approx + self.e_stat + self.e_opt) + slack * self.combined_stderr

    def negative_beyond(self, slack: float = 3.0) -> bool:
        pairs = [
            (self.A, self.A_stderr),
            (self.e_approx, self.e_approx_stderr),
            (self.e_stat, self.e_stat_stderr),
            (self.e_opt, self.e_opt_stderr),
        ]
        return any(value < -slack * stderr for value, stderr in pairs)


def linear_gap_closed_form(
    model_a: LinearScoreModel,
    model_b: LinearScoreModel,
    target: GaussianMixtureTarget,
    t: float,
) -> float:
    """Exact ``E_{x ~ p_t} ||(A_a - A_b) x + (b_a - b_b)||^2`` for a single-Gaussian ``target``."""
    A_a, b_a = model_a.coefficients()
    A_b, b_b = model_b.coefficients()
    dA, db = A_a - A_b, b_a - b_b
    mean, cov = marginal_at(target, t).component()
    shift = dA @ mean + db
    return float(np.trace(dA @ cov @ dA.T) + shift @ shift)


def _converged_proxy(oracle, init: np.ndarray, what: str, tolerance: float = 1e-6) -> Tuple[np.ndarray, bool]:
    estimate = estimate_optimal_loss(oracle, init, converged_below=tolerance)
    if not estimate.converged:
        rank_zero_warn(
            f"The {what} proxy did not converge (gradient norm {estimate.grad_norm:.3g}); flagged as untrusted"
        )
    return estimate.theta, estimate.converged


def decompose(
    model_hat: ScoreModel,
    target: GaussianMixtureTarget,
    t_k: float,
    sample_used: DenoisingBatch,
    mc_n: int,
    rng: np.random.Generator,
    family: Optional[ScoreModel] = None,
    proxy_scale: int = 100,
) -> Decomposition:
    """Split the score error at ``t_k`` into approximation, statistical and optimization parts.

    Args:
        model_hat: The trained model.
        target: Data distribution.
        t_k: Time of the estimate.
        sample_used: The training items at ``t_k``; ``theta_b`` is fit on them.
        mc_n: Monte-Carlo size of every expectation.
        rng: Random stream.
        family: Template of the parametric family. A :class:`LinearScoreModel` on a single-Gaussian
            target selects the closed-form oracle mode; anything else uses converged proxies, with
            ``theta_a`` fit on ``proxy_scale`` times the training sample size.
    """
    t_k = check_time(t_k, "t_k")
    family = model_hat if family is None else family
    oracle_mode = isinstance(family, LinearScoreModel) and target.is_gaussian
    trusted = True
    closed_form = None
    if oracle_mode:
        pair = closed_form_minimizers(target, t_k, sample_used.x0, sample_used.noise)
        model_a, model_b = pair.theta_a, pair.theta_b
        closed_form = linear_gap_closed_form(model_a, model_b, target, t_k)
    else:
        proxy_rng = split_rng(int(rng.integers(0, 2**32)), 0)
        population = ScoreLossOracle(family, target, t_k, max(proxy_scale * len(sample_used), 100), proxy_rng)
        theta_a, ok_a = _converged_proxy(population, family.flat_params(), "population minimizer")
        theta_b, ok_b = _converged_proxy(EmpiricalDenoisingOracle(family, sample_used), theta_a, "empirical minimizer")
        model_a, model_b = family.with_params(theta_a), family.with_params(theta_b)
        trusted = ok_a and ok_b

    x = sample_marginal(target, t_k, mc_n, rng)
    s_star = true_score(target, x, t_k)
    s_a, s_b, s_hat = model_a.evaluate(x, t_k), model_b.evaluate(x, t_k), model_hat.evaluate(x, t_k)

    def sq(u: np.ndarray, v: np.ndarray) -> Tuple[float, float]:
        return mean_and_stderr(np.sum((u - v)**2, axis=1))

    A, A_se = sq(s_hat, s_star)
    e_approx, e_approx_se = sq(s_a, s_star)
    e_stat, e_stat_se = sq(s_a, s_b)
    e_opt, e_opt_se = sq(s_hat, s_b)
    return Decomposition(
        t=t_k,
        A=A,
        A_stderr=A_se,
        e_approx=e_approx,
        e_approx_stderr=e_approx_se,
        e_stat=e_stat,
        e_stat_stderr=e_stat_se,
        e_opt=e_opt,
        e_opt_stderr=e_opt_se,
        mode="oracle" if oracle_mode else "proxy",
        trusted=trusted,
        e_stat_closed_form=closed_form,
    )


def default_trunc_kappa(d: int, n: int, delta: float) -> float:
    """Truncation threshold ``log(d n / delta)``.

    >>> round(default_trunc_kappa(1, 1000, 0.1), 6)
    9.21034
    """
    if d < 1 or n < 1 or not 0 < delta < 1:
        raise ConfigurationError(f"Need d >= 1, n >= 1 and 0 < delta < 1, found d={d}, n={n}, delta={delta}")
    return math.log(d * n / delta)


@dataclass(frozen=True)
class TruncationSpec:
    """Per-coordinate zeroing of scores when ``|(x - e^-t x0) / sigma_t^2|_j >= trunc_kappa``."""

    trunc_kappa: float
    rule: str = "per_coordinate"

    def __post_init__(self):
        if not self.trunc_kappa >= 0:
            raise ConfigurationError(f"`trunc_kappa` must be non-negative, found {self.trunc_kappa}")
        if self.rule != "per_coordinate":
            raise ConfigurationError(f"Only the per-coordinate rule is supported, found {self.rule!r}")

    @classmethod
    def default(cls, d: int, n: int, delta: float) -> "TruncationSpec":
        return cls(trunc_kappa=default_trunc_kappa(d, n, delta))


@dataclass(frozen=True)
class Provenance:
    """Where score evaluations came from: ``x = e^-t x0 + sigma_t noise``."""

    x: np.ndarray
    x0: Optional[np.ndarray]
    t: float


def truncation_mask(provenance: Optional[Provenance]) -> np.ndarray:
    if provenance is None or provenance.x0 is None:
        raise ContractError("Truncation needs the `x0` each point was diffused from")
    x = as_points(provenance.x)
    x0 = as_points(provenance.x0, x.shape[1])
    if x.shape != x0.shape:
        raise ContractError(f"Points of shape {x.shape} do not match their provenance {x0.shape}")
    params = ou_marginal_params(provenance.t)
    if params.sigma_t_sq == 0:
        raise ContractError("Truncation is undefined at t = 0")
    return (x - params.shrink * x0) / params.sigma_t_sq


def truncate_score(values: ArrayLike, provenance: Optional[Provenance], spec: TruncationSpec) -> np.ndarray:
    """Zero coordinate ``j`` of every row whose scaled residual satisfies ``|z_j| >= trunc_kappa``."""
    z = truncation_mask(provenance)
    values = as_points(values, z.shape[1])
    if values.shape != z.shape:
        raise ContractError(f"Values of shape {values.shape} do not match their provenance {z.shape}")
    return np.where(np.abs(z) >= spec.trunc_kappa, 0.0, values)


def _diffused_draws(target: GaussianMixtureTarget, t: float, mc_n: int, rng: np.random.Generator) -> Provenance:
    x0 = sample_p0(target, mc_n, rng)
    noise = rng.standard_normal(x0.shape)
    return Provenance(x=forward_sample(x0, t, noise), x0=x0, t=t)


@dataclass(frozen=True)
class TruncationGap:
    gap: float
    stderr: float
    full_loss: float
    kappa: float


def truncation_gap(
    model: ScoreModel,
    target: GaussianMixtureTarget,
    t: float,
    spec: TruncationSpec,
    mc_n: int,
    rng: np.random.Generator,
) -> TruncationGap:
    """Monte-Carlo ``|L_k(theta) - L'_k(theta)|`` between the score loss and its truncated version."""
    return truncation_gap_curve(model, target, t, [spec.trunc_kappa], mc_n, rng)[0]


def truncation_gap_curve(
    model: ScoreModel,
    target: GaussianMixtureTarget,
    t: float,
    kappas: Sequence[float],
    mc_n: int,
    rng: np.random.Generator,
) -> List[TruncationGap]:
    """Truncation gaps for several thresholds on one set of draws, so the curve is monotone in ``kappa``."""
    if mc_n < 10_000:
        raise DomainError(f"`mc_n` must be at least 10000, found {mc_n}")
    t = check_time(t)
    prov = _diffused_draws(target, t, mc_n, rng)
    residual_sq = (model.evaluate(prov.x, t) - true_score(target, prov.x, t))**2
    z = np.abs(truncation_mask(prov))
    full = float(np.mean(np.sum(residual_sq, axis=1)))
    gaps = []
    for kappa in kappas:
        TruncationSpec(kappa)
        # truncation zeroes both fields on the event, so only the event coordinates contribute
        per_point = np.sum(np.where(z >= kappa, residual_sq, 0.0), axis=1)
        gap, stderr = mean_and_stderr(per_point)
        gaps.append(TruncationGap(gap=gap, stderr=stderr, full_loss=full, kappa=float(kappa)))
    return gaps


@dataclass(frozen=True)
class EnvelopeFit:
    """Fit of ``log gap`` against ``kappa^2`` and the ``C exp(-kappa^2)`` envelope anchored at the smallest kappa."""

    slope: float
    intercept: float
    C: float

    def envelope(self, kappa: ArrayLike) -> np.ndarray:
        return self.C * np.exp(-np.asarray(kappa, dtype=np.float64)**2)


def fit_truncation_envelope(gaps: Sequence[TruncationGap]) -> EnvelopeFit:
    kappas = np.array([g.kappa for g in gaps])
    values = np.array([g.gap for g in gaps])
    if np.any(values <= 0):
        raise DomainError("Every truncation gap must be positive to fit the envelope, increase `mc_n`")
    slope, intercept = np.polyfit(kappas**2, np.log(values), 1)
    i = int(np.argmin(kappas))
    return EnvelopeFit(slope=float(slope), intercept=float(intercept), C=float(values[i] * math.exp(kappas[i]**2)))


@dataclass(frozen=True)
class EventRate:
    rate: float
    stderr: float
    predicted: float
    envelope: float


def truncation_event_rate(
    target: GaussianMixtureTarget,
    t: float,
    spec: TruncationSpec,
    mc_n: int,
    rng: np.random.Generator,
) -> EventRate:
    """Per-coordinate truncation frequency.

    Reported next to the Gaussian prediction ``2 (1 - Phi(kappa sigma_t))`` and the coarser envelope
    ``exp(-kappa^2 (1 - e^-t))``.
    """
    prov = _diffused_draws(target, check_time(t), mc_n, rng)
    hits = (np.abs(truncation_mask(prov)) >= spec.trunc_kappa).astype(np.float64).ravel()
    rate, stderr = mean_and_stderr(hits)
    params = ou_marginal_params(t)
    kappa = spec.trunc_kappa
    return EventRate(
        rate=rate,
        stderr=stderr,
        predicted=float(2.0 * norm.sf(kappa * params.sigma_t)),
        envelope=math.exp(-kappa**2 * (1.0 - params.shrink)),
    )


@dataclass
class ErrorReport:
    """Per-step error estimates on a grid, plus the weighted sum comparator."""

    rows: List[Dict[str, Any]]
    mode: str
    epsilon: Optional[float] = None
    weighted_sum: Optional[float] = None
    integral_bound: Optional[float] = None
    provenance: Dict[str, Any] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.rows)

    def column(self, name: str) -> np.ndarray:
        return np.array([row[name] for row in self.rows], dtype=np.float64)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.rows, columns=REPORT_COLUMNS)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "rows": self.rows,
            "mode": self.mode,
            "epsilon": self.epsilon,
            "weighted_sum": self.weighted_sum,
            "integral_bound": self.integral_bound,
            "provenance": self.provenance,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "ErrorReport":
        return cls(**data)

    def save(self, directory: str) -> Tuple[str, str]:
        os.makedirs(directory, exist_ok=True)
        csv_path = os.path.join(directory, "error_report.csv")
        json_path = os.path.join(directory, "error_report.json")
        self.to_frame().to_csv(csv_path, index=False, float_format="%.17g")
        with open(json_path, "w") as fp:
            json.dump(self.to_dict(), fp, indent=2, sort_keys=True)
        return csv_path, json_path

    @classmethod
    def load(cls, directory: str) -> "ErrorReport":
        with open(os.path.join(directory, "error_report.json")) as fp:
            return cls.from_dict(json.load(fp))


def _row(k: int, delta_t: float, dec: Decomposition, slack: float = 3.0) -> Dict[str, Any]:
    flagged = (not dec.trusted) or dec.negative_beyond(slack) or not dec.inequality_holds(slack)
    if dec.negative_beyond(slack):
        rank_zero_warn(f"Negative component estimate beyond {slack} standard errors at k={k}")
    row = {name: getattr(dec, name) for name in REPORT_COLUMNS[3:-1]}
    row.update(k=k, t=dec.t, delta_t=delta_t, flagged=bool(flagged))
    return {name: row[name] for name in REPORT_COLUMNS}


@dataclass(frozen=True)
class WeightedSum:
    sum: float
    bound: Optional[float]
    integral: Optional[float]
    within_bound: bool


def weighted_error_sum(report: ErrorReport, grid: TimeGrid, epsilon: Optional[float] = None) -> WeightedSum:
    """``sum_k A_k delta_k`` against ``epsilon^2 (T + log(1 / kappa_stop))``.

    ``integral`` is the exact ``int epsilon^2 / (1 - exp(-2 (T - t))) dt`` over ``[t0, T - kappa_stop]``,
    which the closed-form bound dominates.
    """
    if len(report) != grid.K:
        raise ContractError(f"The report has {len(report)} rows but the grid has {grid.K} steps")
    A = report.column("A")
    total = float(np.sum(A * grid.deltas))
    epsilon = report.epsilon if epsilon is None else epsilon
    if epsilon is None:
        return WeightedSum(sum=total, bound=None, integral=None, within_bound=True)
    kappa = grid.kappa_stop
    bound = epsilon**2 * (grid.T + math.log(1.0 / kappa)) if kappa > 0 else math.inf
    lo, hi = grid.T - grid.t_last, grid.T - grid.t0
    integral = math.inf if lo == 0 else 0.5 * epsilon**2 * (
        math.log(math.expm1(2.0 * hi)) - math.log(math.expm1(2.0 * lo))
    )
    return WeightedSum(sum=total, bound=bound, integral=integral, within_bound=total <= bound)


def build_error_report(
    model: ScoreModel,
    target: GaussianMixtureTarget,
    grid: TimeGrid,
    samples: Sequence[DenoisingBatch],
    mc_n: int,
    seed: int,
    family: Optional[ScoreModel] = None,
    epsilon: Optional[float] = None,
    workers: int = 1,
) -> ErrorReport:
    """Decompose the error of ``model`` at every grid time ``times[k]``, ``k = 0..K-1``.

    Each ``k`` uses its own substream of ``seed`` so the rows do not depend on ``workers``.
    """
    if len(samples) != grid.K:
        raise ContractError(f"Expected one training sample per step ({grid.K}), found {len(samples)}")

    def run(k: int) -> Tuple[Dict[str, Any], str]:
        t = float(grid.times[k])
        hat = model.model_at(t) if isinstance(model, TimestepScoreBank) else model
        dec = decompose(hat, target, t, samples[k], mc_n, split_rng(seed, k), family=family)
        return _row(k, float(grid.deltas[k]), dec), dec.mode

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run, range(grid.K)))
    else:
        results = [run(k) for k in range(grid.K)]
    rows = [row for row, _ in results]
    modes = {mode for _, mode in results}
    mode = modes.pop() if len(modes) == 1 else "mixed"
    report = ErrorReport(
        rows=rows,
        mode=mode,
        epsilon=epsilon,
        provenance={"grid": grid.to_dict(), "target": target.to_dict(), "mc_n": mc_n, "seed": seed},
    )
    summary = weighted_error_sum(report, grid, epsilon)
    report.weighted_sum = summary.sum
    report.integral_bound = summary.bound if summary.bound is None or math.isfinite(summary.bound) else None
    return report


def rate_fit(sizes: ArrayLike, errors: ArrayLike) -> float:
    """Log-log slope of an error against the sample size."""
    return fit_loglog_slope(sizes, errors)[0]


def replicate_quantile(values: ArrayLike, delta: float = 0.1) -> float:
    """Empirical ``1 - delta`` quantile across replicates, the point estimate of a high-probability bound."""
    return float(np.quantile(np.asarray(values, dtype=np.float64), 1.0 - delta))
