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
import os

import pytest
import yaml
from pytorch_lightning.utilities.exceptions import MisconfigurationException

from scorelab.core.exceptions import ConfigurationError
from scorelab.experiments.config import (
    dump_config,
    GridConfig,
    LabConfig,
    load_config,
    ModelConfig,
    SweepConfig,
    TargetConfig,
)


def _write(tmpdir, data, name="config.yaml"):
    path = os.path.join(tmpdir, name)
    with open(path, "w") as fp:
        yaml.safe_dump(data, fp)
    return path


def test_defaults_round_trip():
    config = LabConfig()
    assert config.grid.K == 64
    assert config.target.build().d == 1
    assert LabConfig.from_dict(config.to_dict()) == config
    assert isinstance(config.to_dict()["sweep"]["epsilons"], list)


def test_load_with_overrides(tmpdir):
    path = _write(tmpdir, {"seed": 3, "grid": {"K": 8, "T": 2.0}, "training": {"n": 500}})
    config = load_config(path, {"seed": None, "training.n": 900, "out": str(tmpdir)})
    assert config.seed == 3
    assert config.grid.K == 8
    assert config.grid.T == 2.0
    assert config.training.n == 900
    assert config.out == str(tmpdir)


def test_ints_are_accepted_as_floats(tmpdir):
    config = load_config(_write(tmpdir, {"grid": {"T": 3}}))
    assert isinstance(config.grid.T, float)


@pytest.mark.parametrize(
    ["data", "key"],
    [
        ({"training": {"foo": 1}}, "training.foo"),
        ({"training": {"n": "ten"}}, "training.n"),
        ({"training": {"n": True}}, "training.n"),
        ({"training": {"n": 0}}, "training.n"),
        ({"grid": {"t0": 6.0}}, "grid.t0"),
        ({"grid": {"spacing": "cosine"}}, "grid.spacing"),
        ({"model": {"kind": "linear", "mode": "shared"}}, "model.mode"),
        ({"model": {"activation": "swish"}}, "model.activation"),
        ({"sampling": {"variant": "heun"}}, "sampling.variant"),
        ({"metrics": {"mc_n": 10}}, "metrics.mc_n"),
        ({"sweep": {"epsilons": [0.2, 1.5]}}, "sweep.epsilons"),
        ({"sweep": {"epsilons": [0.2, 0.2]}}, "sweep.epsilons"),
        ({"verify": {"kappa_grid": []}}, "verify.kappa_grid"),
        ({"target": {"preset": "banana"}}, "target.preset"),
        ({"format": "parquet"}, "format"),
        ({"seed": -1}, "seed"),
        ({"unknown": 1}, "unknown"),
    ],
)
def test_invalid_values_name_their_key(data, key):
    with pytest.raises(ConfigurationError, match=f"`{key}"):
        LabConfig.from_dict(data)


def test_configuration_errors_are_misconfigurations():
    with pytest.raises(MisconfigurationException):
        LabConfig.from_dict({"workers": 0})


def test_explicit_target():
    target = TargetConfig(preset=None, weights=[1.0], means=[[0.5, 0.0]], covariances=[[[1.0, 0.0], [0.0, 2.0]]])
    assert target.explicit
    assert target.build().d == 2
    with pytest.raises(ConfigurationError, match="weights, means and covariances"):
        TargetConfig(weights=[1.0], means=[[0.0]])
    with pytest.raises(ConfigurationError, match="`target`"):
        TargetConfig(weights=[1.0], means=[[0.0]], covariances=[[[-1.0]]])


def test_preset_params():
    target = TargetConfig(preset="bimodal_1d", params={"separation": 3.0}).build()
    assert target.means[1, 0] == 3.0


def test_grid_build_overrides():
    grid = GridConfig(T=2.0, K=4, t0=0.1).build(K=8)
    assert grid.K == 8
    assert grid.times[0] == pytest.approx(0.1)


def test_section_defaults():
    assert ModelConfig().kind == "linear"
    assert SweepConfig().budget_mode == "pooled"


def test_file_errors(tmpdir):
    with pytest.raises(ConfigurationError, match="does not exist"):
        load_config(os.path.join(tmpdir, "missing.yaml"))
    path = os.path.join(tmpdir, "broken.yaml")
    with open(path, "w") as fp:
        fp.write("grid: [unclosed\n")
    with pytest.raises(ConfigurationError, match="not valid YAML"):
        load_config(path)
    with pytest.raises(ConfigurationError, match="expected a mapping"):
        load_config(_write(tmpdir, {"grid": 5}, "scalar.yaml"))


def test_dump_and_reload(tmpdir):
    config = LabConfig().replace(seed=11, out=str(tmpdir))
    path = os.path.join(tmpdir, "resolved.yaml")
    dump_config(config, path)
    assert load_config(path) == config


_EXAMPLE_CONFIGS = os.path.join(os.path.dirname(__file__), "..", "..", "scorelab_examples", "configs")


@pytest.mark.parametrize("name", ["gaussian_1d.yaml", "bimodal_1d.yaml", "mixture_2d.yaml"])
def test_example_configs_are_valid(name):
    config = load_config(os.path.join(_EXAMPLE_CONFIGS, name))
    assert config.target.build().d in (1, 2)
    assert LabConfig.from_dict(config.to_dict()) == config
