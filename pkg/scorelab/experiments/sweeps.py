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
"""Scaling sweeps over the target accuracy ``eps`` and the early-stopping time ``t0``.

Every sweep point draws from a substream keyed by its own ``eps`` (or ``t0``) value and replicate,
so dropping a point from the grid leaves the others unchanged.
"""
import math
import os
from concurrent.futures import as_completed, ThreadPoolExecutor
from dataclasses import dataclass
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from pytorch_lightning.utilities import rank_zero_info, rank_zero_warn

from scorelab.core.exceptions import ConfigurationError
from scorelab.core.utils import child_seed, fit_loglog_slope, split_rng
from scorelab.diffusion.ou import sigma_sq, TimeGrid
from scorelab.experiments.config import GridConfig, LabConfig
from scorelab.experiments.pipeline import STAGE_METRICS, train_score, write_json, write_table
from scorelab.experiments.records import RunRecord
from scorelab.metrics.legs import direct_tvs, EarlyStoppingFit, fit_early_stopping, tv_legs
from scorelab.utils.imports import _TQDM_AVAILABLE

if _TQDM_AVAILABLE:
    from tqdm.auto import tqdm
else:
    tqdm = None

MIN_PER_K_BUDGET = 32


@dataclass(frozen=True)
class Prescription:
    epsilon: float
    grid: TimeGrid
    budgets: List[int]

    @property
    def n_total(self) -> int:
        return int(sum(self.budgets))


def accuracy_prescription(
    epsilon: float,
    grid: GridConfig,
    c_T: float = 2.0,
    c_K: float = 16.0,
    c_n: float = 256.0,
    budget_mode: str = "pooled",
) -> Prescription:
    """``T = c_T log(1/eps)``, ``K = ceil(c_K eps^-2)`` and the training budgets per grid time.

    ``pooled`` splits ``ceil(c_n eps^-4)`` items evenly over the ``K + 1`` times; ``per_k`` gives time
    ``t_k`` its own ``max(32, ceil(c_n eps^-4 sigma_{t_k}^4))`` items.
    """
    if not 0 < epsilon < 1:
        raise ConfigurationError(f"`sweep.epsilons`: epsilon must lie in (0, 1), found {epsilon}")
    T = c_T * math.log(1.0 / epsilon)
    K = int(math.ceil(c_K / epsilon**2))
    if not grid.t0 < T - grid.kappa_stop:
        raise ConfigurationError(
            f"`grid.t0`: t0={grid.t0} does not fit below T - kappa_stop={T - grid.kappa_stop:.4g} at eps={epsilon}"
        )
    time_grid = grid.build(T=T, K=K)
    n = c_n / epsilon**4
    if budget_mode == "pooled":
        base, extra = divmod(int(math.ceil(n)), K + 1)
        budgets = [base + (1 if k < extra else 0) for k in range(K + 1)]
    elif budget_mode == "per_k":
        budgets = [max(MIN_PER_K_BUDGET, int(math.ceil(n * s**2))) for s in sigma_sq(time_grid.times)]
    else:
        raise ConfigurationError(f"`sweep.budget_mode`: unknown mode {budget_mode!r}")
    return Prescription(epsilon=float(epsilon), grid=time_grid, budgets=budgets)


def point_seed(seed: int, value: float, replicate: int) -> int:
    """Seed of one sweep point, keyed by the swept value itself rather than its position."""
    return child_seed(split_rng(seed, int(round(value * 1e9)), replicate))


def _run_points(
    points: Sequence[Tuple[float, int]],
    run_point: Callable[[float, int], Dict[str, Any]],
    workers: int,
    on_partial: Callable[[List[Dict[str, Any]]], None],
    desc: str,
) -> List[Dict[str, Any]]:
    rows: List[Dict[str, Any]] = []
    progress = tqdm(total=len(points), desc=desc, leave=False) if tqdm is not None else None
    try:
        if workers > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                futures = [pool.submit(run_point, *p) for p in points]
                for future in as_completed(futures):
                    rows.append(future.result())
                    if progress is not None:
                        progress.update()
        else:
            for p in points:
                rows.append(run_point(*p))
                if progress is not None:
                    progress.update()
    except Exception:
        on_partial(rows)
        raise
    finally:
        if progress is not None:
            progress.close()
    return rows


@dataclass(frozen=True)
class SweepFit:
    """Fitted ``TV <= C eps + floor`` with ``C`` anchored at the largest ``eps``."""

    slope: Optional[float]
    intercept: Optional[float]
    C: float
    violations: int

    def to_dict(self) -> Dict[str, Any]:
        return {"slope": self.slope, "intercept": self.intercept, "C": self.C, "violations": self.violations}


def fit_sweep(table: pd.DataFrame, floor: float = 0.0, slack: float = 3.0) -> SweepFit:
    medians = table.groupby("epsilon")["tv"].median().sort_index()
    eps = medians.index.to_numpy(dtype=np.float64)
    largest = float(eps[-1])
    C = max(float(medians.iloc[-1]) - floor, 0.0) / largest
    bound = C * table["epsilon"] + floor + slack * table["tv_stderr"]
    smaller = table["epsilon"] < largest
    violations = int(((table["tv"] > bound) & smaller).sum())
    slope = intercept = None
    if eps.size >= 2 and np.all(medians.to_numpy() > 0):
        slope, intercept = fit_loglog_slope(eps, medians.to_numpy())
    return SweepFit(slope=slope, intercept=intercept, C=C, violations=violations)


ACCURACY_COLUMNS = ["epsilon", "replicate", "T", "K", "n_total", "tv", "tv_stderr", "tv_method"]


def sweep_accuracy(config: LabConfig, record: Optional[RunRecord] = None) -> Tuple[pd.DataFrame, SweepFit]:
    """Train, sample and measure ``TV(p_t0, p_hat_t0)`` at every ``eps`` of the sweep grid.

    Writes ``sweep_accuracy.{csv,json}`` (one row per point, sorted by ``eps`` then replicate) and
    ``sweep_accuracy_fit.json``. A failing point still leaves the finished rows on disk.
    """
    sweep = config.sweep
    target = config.target.build()
    prescriptions = {
        eps: accuracy_prescription(eps, config.grid, sweep.c_T, sweep.c_K, sweep.c_n, sweep.budget_mode)
        for eps in sweep.epsilons
    }

    def run_point(eps: float, replicate: int) -> Dict[str, Any]:
        prescription = prescriptions[eps]
        seed = point_seed(config.seed, eps, replicate)
        if sweep.score == "oracle":
            model = "oracle"
        else:
            model = train_score(config, target, prescription.grid, seed, prescription.budgets).model
        metric_seed = child_seed(split_rng(seed, STAGE_METRICS))
        row = {
            "epsilon": eps,
            "replicate": replicate,
            "T": prescription.grid.T,
            "K": prescription.grid.K,
            "n_total": 0 if sweep.score == "oracle" else prescription.n_total,
        }
        if sweep.legs:
            legs = tv_legs(target, model, prescription.grid, config.sampling.n_samples, metric_seed,
                           variant=config.sampling.variant, k_ref=config.metrics.k_ref, bins=config.metrics.bins)
            total = legs.total_direct
            row.update(
                leg_discretization=legs.leg_discretization.value,
                leg_score=legs.leg_score.value,
                leg_init=legs.leg_init.value,
                girsanov_kl=legs.girsanov.kl if legs.girsanov is not None else None,
                triangle_holds=legs.triangle_holds(sweep.slack),
            )
        else:
            total = direct_tvs(target, model, prescription.grid, config.sampling.n_samples, metric_seed,
                               variant=config.sampling.variant, init=config.sampling.init,
                               bins=config.metrics.bins)["total_direct"]
        row.update(tv=total.value, tv_stderr=total.stderr, tv_method=total.method)
        rank_zero_info(f"eps={eps} replicate={replicate}: TV={total.value:.5f}")
        return row

    points = [(eps, r) for eps in sweep.epsilons for r in range(sweep.replicates)]

    def to_frame(rows: List[Dict[str, Any]]) -> pd.DataFrame:
        frame = pd.DataFrame(rows)
        if frame.empty:
            return pd.DataFrame(columns=ACCURACY_COLUMNS)
        extra = [c for c in frame.columns if c not in ACCURACY_COLUMNS]
        frame = frame[ACCURACY_COLUMNS + sorted(extra)]
        return frame.sort_values(["epsilon", "replicate"], ascending=[False, True]).reset_index(drop=True)

    def save_partial(rows: List[Dict[str, Any]]) -> None:
        path = write_table(to_frame(rows), config.out, "sweep_accuracy", config.format)
        if record is not None:
            record.add_output("sweep_accuracy", path)

    rows = _run_points(points, run_point, config.workers, save_partial, "sweep-accuracy")
    table = to_frame(rows)
    fit = fit_sweep(table, sweep.approx_floor, sweep.slack)
    if fit.violations:
        rank_zero_warn(f"{fit.violations} sweep rows exceed C * eps + floor with C={fit.C:.4g}")

    os.makedirs(config.out, exist_ok=True)
    table_path = write_table(table, config.out, "sweep_accuracy", config.format)
    fit_path = write_json({"epsilons": list(sweep.epsilons), **fit.to_dict()},
                          os.path.join(config.out, "sweep_accuracy_fit.json"))
    if record is not None:
        record.add_output("sweep_accuracy", table_path)
        record.add_output("sweep_accuracy_fit", fit_path)
    return table, fit


EARLY_STOP_COLUMNS = [
    "t0",
    "replicate",
    "leg_early_stop",
    "leg_discretization",
    "leg_score",
    "leg_init",
    "total_direct",
    "total_to_data",
    "total_to_data_stderr",
    "sum_of_legs",
    "triangle_holds",
    "data_triangle_holds",
]


def sweep_early_stop(config: LabConfig, record: Optional[RunRecord] = None) -> Tuple[pd.DataFrame, EarlyStoppingFit]:
    """Add the ``TV(p_0, p_t0)`` leg over the ``t0`` grid and check both triangle inequalities per row.

    ``T`` and ``K`` come from the grid section; only ``t0`` varies.
    """
    sweep = config.sweep
    target = config.target.build()
    grids = {}
    for t0 in sweep.t0_grid:
        if not t0 < config.grid.T - config.grid.kappa_stop:
            raise ConfigurationError(f"`sweep.t0_grid`: t0={t0} does not fit below T - kappa_stop")
        grids[t0] = config.grid.build(t0=t0)

    def run_point(t0: float, replicate: int) -> Dict[str, Any]:
        grid = grids[t0]
        seed = point_seed(config.seed, t0, replicate)
        model = "oracle" if sweep.score == "oracle" else train_score(config, target, grid, seed).model
        legs = tv_legs(target, model, grid, config.sampling.n_samples, child_seed(split_rng(seed, STAGE_METRICS)),
                       variant=config.sampling.variant, k_ref=config.metrics.k_ref, bins=config.metrics.bins,
                       early_stop=True)
        return {
            "t0": t0,
            "replicate": replicate,
            "leg_early_stop": legs.leg_early_stop.value,
            "leg_discretization": legs.leg_discretization.value,
            "leg_score": legs.leg_score.value,
            "leg_init": legs.leg_init.value,
            "total_direct": legs.total_direct.value,
            "total_to_data": legs.total_to_data.value,
            "total_to_data_stderr": legs.total_to_data.stderr,
            "sum_of_legs": legs.sum_of_legs + legs.leg_early_stop.value,
            "triangle_holds": legs.triangle_holds(sweep.slack),
            "data_triangle_holds": legs.data_triangle_holds(sweep.slack),
        }

    def to_frame(rows: List[Dict[str, Any]]) -> pd.DataFrame:
        frame = pd.DataFrame(rows, columns=EARLY_STOP_COLUMNS)
        return frame.sort_values(["t0", "replicate"], ascending=[False, True]).reset_index(drop=True)

    def save_partial(rows: List[Dict[str, Any]]) -> None:
        path = write_table(to_frame(rows), config.out, "sweep_early_stop", config.format)
        if record is not None:
            record.add_output("sweep_early_stop", path)

    points = [(t0, r) for t0 in sweep.t0_grid for r in range(sweep.replicates)]
    table = to_frame(_run_points(points, run_point, config.workers, save_partial, "sweep-early-stop"))
    if not table["data_triangle_holds"].all():
        rank_zero_warn("TV(p_0, p_hat_t0) exceeds the sum of its legs on some rows")

    medians = table.groupby("t0")["leg_early_stop"].median()
    inside = medians[(medians.index > 0) & (medians.index < 1)]
    fit = fit_early_stopping(inside.index.to_numpy(), inside.to_numpy()) if len(inside) else EarlyStoppingFit(0.0, 0)

    os.makedirs(config.out, exist_ok=True)
    table_path = write_table(table, config.out, "sweep_early_stop", config.format)
    fit_path = write_json(
        {"t0_grid": list(sweep.t0_grid), "C": fit.C, "violations": fit.violations},
        os.path.join(config.out, "sweep_early_stop_fit.json"),
    )
    if record is not None:
        record.add_output("sweep_early_stop", table_path)
        record.add_output("sweep_early_stop_fit", fit_path)
    return table, fit
