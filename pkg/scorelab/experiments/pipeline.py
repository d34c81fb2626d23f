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
"""End-to-end stages: train, generate, decompose.

Each stage draws from its own substream of the master seed, so a stage reruns identically whether
or not the stages before it ran in the same process.
"""
import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from pytorch_lightning.utilities import rank_zero_info

from scorelab.core.exceptions import ConfigurationError, DivergenceError
from scorelab.core.utils import child_seed, split_rng
from scorelab.diffusion.ou import sigma_sq, TimeGrid
from scorelab.diffusion.sampler import generate, ReverseRunSpec
from scorelab.diffusion.targets import GaussianMixtureTarget
from scorelab.experiments.config import LabConfig
from scorelab.experiments.records import RunRecord
from scorelab.metrics.legs import tv_legs
from scorelab.score.decomposition import build_error_report, ErrorReport
from scorelab.score.model import (
    build_score_model,
    load_checkpoint,
    save_checkpoint,
    ScoreModel,
    TimestepScoreBank,
)
from scorelab.score.training import (
    DenoisingBatch,
    draw_denoising_batch,
    EmpiricalDenoisingOracle,
    sgd_pl_run,
    SGDTrace,
    TrainConfig,
)

# substream keys of the master seed
STAGE_DATA, STAGE_INIT, STAGE_SGD, STAGE_SAMPLE, STAGE_DECOMPOSE, STAGE_METRICS = range(6)


def split_budget(n: int, parts: int) -> List[int]:
    """Split ``n`` items as evenly as possible, earlier parts taking the remainder.

    >>> split_budget(10, 3)
    [4, 3, 3]
    """
    base, extra = divmod(int(n), parts)
    return [base + (1 if i < extra else 0) for i in range(parts)]


def training_budgets(config: LabConfig, grid: TimeGrid) -> List[int]:
    return split_budget(config.training.n, grid.K + 1)


def training_batches(
    target: GaussianMixtureTarget,
    grid: TimeGrid,
    budgets: Sequence[int],
    seed: int,
) -> List[DenoisingBatch]:
    """One training sample per grid time; batch ``k`` only depends on ``(seed, k, budgets[k])``."""
    if len(budgets) != grid.K + 1:
        raise ConfigurationError(f"Need one budget per grid time ({grid.K + 1}), found {len(budgets)}")
    smallest = min(budgets)
    if smallest < target.d + 2:
        raise ConfigurationError(
            f"`training.n`: {smallest} items at a grid time is too few for d={target.d}, "
            f"raise the budget or lower `grid.K`"
        )
    return [
        draw_denoising_batch(target, [float(t)], int(n_k), split_rng(seed, STAGE_DATA, k))
        for k, (t, n_k) in enumerate(zip(grid.times, budgets))
    ]


def initial_model(config: LabConfig, d: int, seed: int, t_max: float) -> ScoreModel:
    spec = config.model
    if spec.kind == "linear":
        return build_score_model("linear", d)
    return build_score_model(
        "mlp",
        d,
        depth=spec.depth,
        width=spec.width,
        activation=spec.activation,
        seed=seed,
        t_max=t_max,
    )


@dataclass
class TrainingResult:
    model: ScoreModel
    traces: List[SGDTrace]
    batches: List[DenoisingBatch]


def _fit(
    config: LabConfig,
    model: ScoreModel,
    batch: DenoisingBatch,
    eta: float,
    rng: np.random.Generator,
) -> Tuple[ScoreModel, SGDTrace]:
    training = config.training
    train_config = TrainConfig(
        eta=eta,
        beta_batch=training.beta_batch,
        budget=training.sgd_budget or len(batch),
        mode=config.model.mode,
        eval_every=training.eval_every,
    )
    trace, theta = sgd_pl_run(train_config, EmpiricalDenoisingOracle(model, batch), model.flat_params(), rng)
    return model.with_params(theta), trace


def train_score(
    config: LabConfig,
    target: GaussianMixtureTarget,
    grid: TimeGrid,
    seed: int,
    budgets: Optional[Sequence[int]] = None,
    workers: int = 1,
) -> TrainingResult:
    """Train the configured family on fresh denoising samples at every grid time.

    ``per_timestep`` fits one model per time, stepping with ``eta / sigma_t^2`` when ``scale_eta`` is on;
    ``shared`` fits one network on the pooled sample.
    """
    budgets = training_budgets(config, grid) if budgets is None else list(budgets)
    batches = training_batches(target, grid, budgets, seed)
    init_seed = child_seed(split_rng(seed, STAGE_INIT))
    eta = config.training.eta

    if config.model.mode == "shared":
        pooled = DenoisingBatch(
            x0=np.concatenate([b.x0 for b in batches]),
            t=np.concatenate([b.t for b in batches]),
            noise=np.concatenate([b.noise for b in batches]),
        )
        model = initial_model(config, target.d, init_seed, grid.t_last)
        model, trace = _fit(config, model, pooled, eta, split_rng(seed, STAGE_SGD))
        return TrainingResult(model=model, traces=[trace], batches=batches)

    def fit_one(k: int) -> Tuple[ScoreModel, SGDTrace]:
        t = float(grid.times[k])
        eta_k = eta / float(sigma_sq(t)) if config.training.scale_eta else eta
        model = initial_model(config, target.d, init_seed, grid.t_last)
        return _fit(config, model, batches[k], eta_k, split_rng(seed, STAGE_SGD, k))

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            fitted = list(pool.map(fit_one, range(grid.K + 1)))
    else:
        fitted = [fit_one(k) for k in range(grid.K + 1)]
    bank = TimestepScoreBank(grid.times.tolist(), [m for m, _ in fitted])
    return TrainingResult(model=bank, traces=[tr for _, tr in fitted], batches=batches)


def write_traces(traces: Sequence[SGDTrace], directory: str) -> List[str]:
    if len(traces) == 1:
        return [traces[0].save(directory)]
    return [trace.save(os.path.join(directory, f"k{k:04d}")) for k, trace in enumerate(traces)]


def write_json(data: Dict[str, Any], path: str) -> str:
    with open(path, "w") as fp:
        json.dump(data, fp, indent=2, sort_keys=True)
    return path


def write_table(frame: pd.DataFrame, directory: str, name: str, fmt: str) -> str:
    """``name.csv`` or ``name.json`` (records orientation) depending on ``fmt``."""
    os.makedirs(directory, exist_ok=True)
    path = os.path.join(directory, f"{name}.{fmt}")
    if fmt == "csv":
        frame.to_csv(path, index=False, float_format="%.17g")
    else:
        frame.to_json(path, orient="records", double_precision=15, indent=2)
    return path


def write_samples(samples: np.ndarray, directory: str, fmt: str, meta: Dict[str, Any]) -> List[str]:
    """Sample table with columns ``x0..x{d-1}`` and a ``samples_meta.json`` sidecar."""
    frame = pd.DataFrame(samples, columns=[f"x{j}" for j in range(samples.shape[1])])
    table = write_table(frame, directory, "samples", fmt)
    sidecar = write_json({**meta, "n": int(samples.shape[0]), "d": int(samples.shape[1])},
                         os.path.join(directory, "samples_meta.json"))
    return [table, sidecar]


def run_recorded(command: str, config: LabConfig, body: Callable[[RunRecord], Any]) -> RunRecord:
    """Run ``body`` under a fresh run record, finished as completed, failed or diverged."""
    record = RunRecord.start(command, config)
    rank_zero_info(f"Running `{command}` into {config.out!r} with seed {config.seed}")
    try:
        body(record)
    except DivergenceError:
        record.finish("diverged")
        raise
    except Exception:
        record.finish("failed")
        raise
    record.finish("completed")
    return record


def _train_stage(config: LabConfig, record: RunRecord) -> Tuple[GaussianMixtureTarget, TimeGrid, TrainingResult]:
    target, grid = config.target.build(), config.grid.build()
    result = train_score(config, target, grid, config.seed, workers=config.workers)
    checkpoint = os.path.join(config.out, "checkpoint.json")
    save_checkpoint(result.model, checkpoint)
    record.add_output("checkpoint", checkpoint)
    for i, path in enumerate(write_traces(result.traces, os.path.join(config.out, "traces"))):
        record.add_output(f"trace_{i:04d}", path)
    return target, grid, result


def _model_for(config: LabConfig, checkpoint: Optional[str], record: RunRecord) -> ScoreModel:
    if checkpoint is not None:
        if not os.path.isfile(checkpoint):
            raise ConfigurationError(f"Checkpoint {checkpoint!r} does not exist")
        record.detail["checkpoint"] = os.path.abspath(checkpoint)
        return load_checkpoint(checkpoint)
    return _train_stage(config, record)[2].model


def run_train(config: LabConfig) -> RunRecord:
    """Train per ``config`` and write ``checkpoint.json`` and the SGD traces."""
    return run_recorded("train", config, lambda record: _train_stage(config, record))


def run_generate(config: LabConfig, checkpoint: Optional[str] = None) -> RunRecord:
    """Sample with the trained score (training first unless ``checkpoint`` is given) and measure TV."""

    def body(record: RunRecord) -> None:
        target, grid = config.target.build(), config.grid.build()
        model = _model_for(config, checkpoint, record)
        sampling = config.sampling
        spec = ReverseRunSpec(grid, model, sampling.n_samples, sampling.init, sampling.variant, target)
        result = generate(spec, rng=split_rng(config.seed, STAGE_SAMPLE), workers=config.workers)
        table, sidecar = write_samples(result.samples, config.out, config.format, {"spec": spec.to_dict()})
        record.add_output("samples", table)
        record.add_output("samples_meta", sidecar)

        legs = tv_legs(
            target,
            model,
            grid,
            sampling.n_samples,
            child_seed(split_rng(config.seed, STAGE_METRICS)),
            variant=sampling.variant,
            k_ref=config.metrics.k_ref,
            bins=config.metrics.bins,
            early_stop=True,
            workers=config.workers,
        )
        metrics = {"tv_legs": legs.to_dict(), "pinsker_holds": legs.pinsker_holds()}
        record.add_output("metrics", write_json(metrics, os.path.join(config.out, "metrics.json")))

    return run_recorded("generate", config, body)


def decompose_model(
    config: LabConfig,
    model: ScoreModel,
    target: GaussianMixtureTarget,
    grid: TimeGrid,
    batches: Sequence[DenoisingBatch],
) -> ErrorReport:
    return build_error_report(
        model,
        target,
        grid,
        list(batches[:grid.K]),
        config.metrics.mc_n,
        child_seed(split_rng(config.seed, STAGE_DECOMPOSE)),
        epsilon=config.metrics.epsilon,
        workers=config.workers,
    )


def run_decompose(config: LabConfig, checkpoint: Optional[str] = None) -> RunRecord:
    """Per-step error decomposition of the trained score on the samples it was trained on."""

    def body(record: RunRecord) -> None:
        target, grid = config.target.build(), config.grid.build()
        model = _model_for(config, checkpoint, record)
        # the training draws are a pure function of the seed, so a loaded checkpoint sees its own sample
        batches = training_batches(target, grid, training_budgets(config, grid), config.seed)
        report = decompose_model(config, model, target, grid, batches)
        csv_path, json_path = report.save(config.out)
        record.add_output("error_report_csv", csv_path)
        record.add_output("error_report_json", json_path)
        record.detail["decomposition_mode"] = report.mode

    return run_recorded("decompose", config, body)
