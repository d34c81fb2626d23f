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
import json
import os

import numpy as np
import pandas as pd
import pytest

from scorelab.core.exceptions import ConfigurationError, DivergenceError
from scorelab.diffusion.ou import make_time_grid
from scorelab.diffusion.targets import gaussian_1d
from scorelab.experiments.config import LabConfig
from scorelab.experiments.pipeline import (
    run_decompose,
    run_generate,
    run_recorded,
    run_train,
    split_budget,
    train_score,
    training_batches,
    write_table,
)
from scorelab.experiments.records import RunRecord, sha256_of_file
from scorelab.score.decomposition import ErrorReport
from scorelab.score.model import load_checkpoint, MLPScoreModel, TimestepScoreBank


def tiny_config(tmpdir, name="run", **sections) -> LabConfig:
    """A configuration small enough to run every stage in a few seconds."""
    data = {
        "seed": 7,
        "out": os.path.join(tmpdir, name),
        "target": {"preset": "gaussian_1d"},
        "grid": {"T": 2.0, "K": 4, "t0": 0.05},
        "training": {"n": 500, "eta": 0.1},
        "sampling": {"n_samples": 2000},
        "metrics": {"k_ref": 64, "mc_n": 1000},
    }
    for section, values in sections.items():
        if isinstance(values, dict):
            data.setdefault(section, {}).update(values)
        else:
            data[section] = values
    return LabConfig.from_dict(data)


def test_split_budget():
    assert split_budget(3, 5) == [1, 1, 1, 0, 0]
    assert sum(split_budget(1001, 7)) == 1001


def test_training_batches_are_keyed_by_time():
    target, grid = gaussian_1d(), make_time_grid(2.0, 4, 0.05)
    first = training_batches(target, grid, [100] * 5, seed=3)
    second = training_batches(target, grid, [100, 50, 100, 100, 100], seed=3)
    np.testing.assert_array_equal(first[0].x0, second[0].x0)
    np.testing.assert_array_equal(first[4].noise, second[4].noise)
    assert len(second[1]) == 50
    assert np.all(first[2].t == grid.times[2])
    with pytest.raises(ConfigurationError, match="too few"):
        training_batches(target, grid, [100, 2, 100, 100, 100], seed=3)
    with pytest.raises(ConfigurationError):
        training_batches(target, grid, [100] * 4, seed=3)


def test_train_per_timestep_ignores_workers(tmpdir):
    config = tiny_config(tmpdir)
    target, grid = config.target.build(), config.grid.build()
    serial = train_score(config, target, grid, config.seed)
    threaded = train_score(config, target, grid, config.seed, workers=3)
    assert isinstance(serial.model, TimestepScoreBank)
    assert len(serial.model.models) == grid.K + 1
    assert len(serial.traces) == grid.K + 1
    np.testing.assert_array_equal(serial.model.flat_params(), threaded.model.flat_params())


def test_train_shared_network(tmpdir):
    config = tiny_config(tmpdir, model={"kind": "mlp", "mode": "shared", "depth": 2, "width": 8},
                         training={"eta": 0.01})
    result = train_score(config, config.target.build(), config.grid.build(), config.seed)
    assert isinstance(result.model, MLPScoreModel)
    assert len(result.traces) == 1
    assert result.traces[0].samples_used <= 500


def test_run_train_is_reproducible(tmpdir):
    first = run_train(tiny_config(tmpdir, "a"))
    second = run_train(tiny_config(tmpdir, "b"))
    assert first.status == "completed"
    assert {"checkpoint", "trace_0000", "trace_0004"} <= set(first.outputs)
    assert first.outputs["checkpoint"]["sha256"] == second.outputs["checkpoint"]["sha256"]
    model = load_checkpoint(first.output_path("checkpoint"))
    assert isinstance(model, TimestepScoreBank)
    assert RunRecord.load(first.run_dir).verify() == []


def test_run_generate_from_checkpoint(tmpdir):
    trained = run_train(tiny_config(tmpdir, "train"))
    config = tiny_config(tmpdir, "generate")
    record = run_generate(config, trained.output_path("checkpoint"))
    assert {"samples", "samples_meta", "metrics"} <= set(record.outputs)
    assert record.detail["checkpoint"] == os.path.abspath(trained.output_path("checkpoint"))

    samples = pd.read_csv(record.output_path("samples"))
    assert list(samples.columns) == ["x0"]
    assert len(samples) == 2000
    with open(record.output_path("metrics")) as fp:
        metrics = json.load(fp)
    legs = metrics["tv_legs"]
    assert {"leg_discretization", "leg_score", "leg_init", "total_direct", "leg_early_stop"} <= set(legs)
    assert legs["triangle_holds"] is True

    again = run_generate(tiny_config(tmpdir, "again"), trained.output_path("checkpoint"))
    assert again.outputs["samples"]["sha256"] == record.outputs["samples"]["sha256"]


def test_run_generate_trains_without_checkpoint(tmpdir):
    record = run_generate(tiny_config(tmpdir, format="json"))
    assert "checkpoint" in record.outputs
    assert record.output_path("samples").endswith("samples.json")


def test_missing_checkpoint(tmpdir):
    config = tiny_config(tmpdir)
    with pytest.raises(ConfigurationError, match="does not exist"):
        run_generate(config, os.path.join(tmpdir, "nope.json"))
    assert RunRecord.load(config.out).status == "failed"


def test_run_decompose(tmpdir):
    trained = run_train(tiny_config(tmpdir, "train"))
    record = run_decompose(tiny_config(tmpdir, "decompose"), trained.output_path("checkpoint"))
    report = ErrorReport.load(record.run_dir)
    assert len(report) == 4
    assert record.detail["decomposition_mode"] == report.mode
    assert sha256_of_file(record.output_path("error_report_csv")) == record.outputs["error_report_csv"]["sha256"]


def test_divergence_is_recorded(tmpdir):
    config = tiny_config(tmpdir, training={"eta": 1e30})
    with pytest.raises(DivergenceError):
        run_train(config)
    assert RunRecord.load(config.out).status == "diverged"


def test_run_recorded_marks_failures(tmpdir):
    config = tiny_config(tmpdir)

    def body(record):
        raise RuntimeError("boom")

    with pytest.raises(RuntimeError):
        run_recorded("train", config, body)
    assert RunRecord.load(config.out).status == "failed"


@pytest.mark.parametrize("fmt", ["csv", "json"])
def test_write_table(tmpdir, fmt):
    frame = pd.DataFrame({"a": [1.0 / 3.0, 2.0], "b": [1, 2]})
    path = write_table(frame, os.path.join(tmpdir, "tables"), "numbers", fmt)
    assert path.endswith(f"numbers.{fmt}")
    loaded = pd.read_csv(path) if fmt == "csv" else pd.read_json(path, orient="records")
    np.testing.assert_allclose(loaded["a"].to_numpy(), frame["a"].to_numpy(), rtol=1e-14)
