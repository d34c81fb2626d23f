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
import logging

import pytest
from pytorch_lightning.utilities.exceptions import MisconfigurationException

from scorelab.core.exceptions import ConfigurationError
from scorelab.core.registry import LabRegistry
from scorelab.diffusion.ou import GRID_SPACINGS
from scorelab.diffusion.sampler import REVERSE_STEPS
from scorelab.diffusion.targets import TARGET_PRESETS
from scorelab.score.model import ACTIVATIONS


def test_registry_raises():
    steps = LabRegistry("steps")

    @steps
    def euler(x, dt=0.1):
        return x + dt

    with pytest.raises(MisconfigurationException, match="You can only register a function, found: 3"):
        steps(3, name="three")

    steps(euler, name="cho", override=True)

    with pytest.raises(MisconfigurationException, match="Function with name: cho and metadata: {}"):
        steps(euler, name="cho", override=False)

    with pytest.raises(KeyError, match="Found no matches"):
        steps.get("cho", foo="bar")

    steps.remove("cho")
    with pytest.raises(KeyError, match="Key: cho is not in LabRegistry"):
        steps.get("cho")

    with pytest.raises(TypeError, match="name` must be a str"):
        steps(name=float)  # noqa


def test_registry():
    steps = LabRegistry("steps")

    @steps
    def euler(x, dt=0.1):
        return x + dt

    assert steps.get("euler")(1.0, dt=0.5) == 1.5

    steps(euler, name="cho")
    steps(euler, name="cho", override=True)
    assert len(steps.get("cho", strict=False)) == 1

    steps(euler, name="cho", order=1, smooth=True)
    steps(euler, name="cho", order=2, smooth=True)
    function = steps.get("cho", with_metadata=True, order=2)
    assert function["metadata"] == {"order": 2, "smooth": True}
    assert len(steps.get("cho", smooth=True, strict=False)) == 2
    assert steps.metadata("euler") == {}
    assert steps.available_keys() == ["cho", "cho", "cho", "euler"]


def test_registry_resolve():
    spacings = LabRegistry("grid_spacings")
    assert spacings.kind == "grid spacing"

    @spacings(name="uniform")
    def uniform():
        return "uniform"

    assert spacings.resolve("uniform")() == "uniform"
    with pytest.raises(ConfigurationError, match="Unknown grid spacing 'log', use one of \\['uniform'\\]"):
        spacings.resolve("log")


def test_registry_multiple_decorators(caplog):
    steps = LabRegistry("steps", verbose=True)

    with caplog.at_level(logging.INFO):

        @steps
        @steps(name="foo")
        @steps(name="bar", smooth=True)
        def step():
            return 1

    assert len(steps) == 3
    assert "foo" in steps
    assert "step" in steps
    assert "bar" in steps


@pytest.mark.parametrize(
    "registry, keys",
    [
        (ACTIVATIONS, ["gelu", "identity", "relu", "softplus", "tanh"]),
        (GRID_SPACINGS, ["geometric", "uniform"]),
        (REVERSE_STEPS, ["ddpm", "exponential"]),
        (TARGET_PRESETS, ["bimodal_1d", "gaussian_1d", "mixture_2d", "standard_normal"]),
    ],
)
def test_builtin_registries(registry, keys):
    assert registry.available_keys() == keys
