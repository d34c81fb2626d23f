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
"""Experiment configuration: one YAML file validated into frozen dataclasses.

Every section is a dataclass whose defaults are the documented lab defaults. Unknown keys, wrong
types and out-of-range values raise :class:`~scorelab.core.exceptions.ConfigurationError` naming
the dotted key, e.g. ``training.n``.
"""
import dataclasses
import math
from dataclasses import dataclass, field
from typing import Any, ClassVar, Dict, get_args, get_origin, get_type_hints, List, Optional, Tuple, Union

import yaml

from scorelab.core.exceptions import ConfigurationError, ScoreLabError
from scorelab.diffusion.ou import GRID_SPACINGS, make_time_grid, TimeGrid
from scorelab.diffusion.sampler import REVERSE_STEPS
from scorelab.diffusion.targets import build_target, GaussianMixtureTarget, TARGET_PRESETS
from scorelab.score.model import ACTIVATIONS

DEFAULT_EPSILONS = (0.4, 0.3, 0.2, 0.15, 0.1)
DEFAULT_T0_GRID = (0.1, 0.03, 0.01, 0.003, 0.001)
FORMATS = ("csv", "json")


def _require(ok: bool, key: str, message: str) -> None:
    if not ok:
        raise ConfigurationError(f"`{key}`: {message}")


def _positive(value: float) -> bool:
    return math.isfinite(value) and value > 0


@dataclass(frozen=True)
class TargetConfig:
    """Data distribution: a preset from ``TARGET_PRESETS`` or explicit mixture parameters."""

    section: ClassVar[str] = "target"

    preset: Optional[str] = "gaussian_1d"
    params: Dict[str, Any] = field(default_factory=dict)
    weights: Optional[List[float]] = None
    means: Optional[List[List[float]]] = None
    covariances: Optional[List[List[List[float]]]] = None

    def __post_init__(self):
        explicit = [v is not None for v in (self.weights, self.means, self.covariances)]
        _require(all(explicit) or not any(explicit), self.section, "give all of weights, means and covariances")
        if not any(explicit):
            _require(self.preset is not None, f"{self.section}.preset", "a preset or explicit mixture is required")
            _require(
                self.preset in TARGET_PRESETS,
                f"{self.section}.preset",
                f"unknown preset {self.preset!r}, use one of {TARGET_PRESETS.available_keys()}",
            )
        try:
            self.build()
        except ConfigurationError:
            raise
        except (ScoreLabError, ValueError, TypeError) as err:
            raise ConfigurationError(f"`{self.section}`: {err}") from err

    @property
    def explicit(self) -> bool:
        return self.means is not None

    def build(self) -> GaussianMixtureTarget:
        if self.explicit:
            return build_target(spec={"weights": self.weights, "means": self.means, "covariances": self.covariances})
        return build_target(self.preset, **self.params)


@dataclass(frozen=True)
class GridConfig:
    section: ClassVar[str] = "grid"

    T: float = 5.0
    K: int = 64
    t0: float = 1e-3
    kappa_stop: float = 0.0
    spacing: str = "uniform"

    def __post_init__(self):
        _require(self.K >= 1, "grid.K", f"must be positive, found {self.K}")
        _require(_positive(self.T), "grid.T", f"must be positive, found {self.T}")
        _require(math.isfinite(self.kappa_stop) and self.kappa_stop >= 0, "grid.kappa_stop", "must be non-negative")
        _require(0 < self.t0 < self.T - self.kappa_stop, "grid.t0", "need 0 < t0 < T - kappa_stop")
        _require(self.spacing in GRID_SPACINGS, "grid.spacing", f"use one of {GRID_SPACINGS.available_keys()}")

    def build(self, **overrides: Any) -> TimeGrid:
        values = dataclasses.asdict(self)
        values.update(overrides)
        return make_time_grid(**values)


@dataclass(frozen=True)
class ModelConfig:
    """Score family. ``linear`` is the affine oracle family; it has no time input so it is trained per time."""

    section: ClassVar[str] = "model"

    kind: str = "linear"
    depth: int = 3
    width: int = 32
    activation: str = "gelu"
    mode: str = "per_timestep"

    def __post_init__(self):
        _require(self.kind in ("linear", "mlp"), "model.kind", f"use 'linear' or 'mlp', found {self.kind!r}")
        _require(self.mode in ("per_timestep", "shared"), "model.mode", f"unknown mode {self.mode!r}")
        _require(self.depth >= 1 and self.width >= 1, "model.depth", "depth and width must be positive")
        _require(self.activation in ACTIVATIONS, "model.activation", f"use one of {ACTIVATIONS.available_keys()}")
        _require(
            not (self.kind == "linear" and self.mode == "shared"),
            "model.mode",
            "the linear family has no time input, train it with mode 'per_timestep'",
        )


@dataclass(frozen=True)
class TrainingConfig:
    """SGD settings.

    ``n`` is the total number of training items, split evenly over the ``K + 1`` grid times.
    ``sgd_budget`` caps the samples SGD consumes per model and defaults to the size of its training set.
    With ``scale_eta`` the step at time ``t`` is ``eta / sigma_t^2``, matching the curvature of the
    denoising loss of a per-time model.
    """

    section: ClassVar[str] = "training"

    n: int = 10_000
    eta: float = 0.1
    beta_batch: float = 1.0
    sgd_budget: Optional[int] = None
    eval_every: int = 1
    scale_eta: bool = True

    def __post_init__(self):
        _require(self.n >= 1, "training.n", f"the sample budget must be positive, found {self.n}")
        _require(_positive(self.eta), "training.eta", f"must be positive, found {self.eta}")
        _require(_positive(self.beta_batch), "training.beta_batch", f"must be positive, found {self.beta_batch}")
        _require(self.sgd_budget is None or self.sgd_budget >= 1, "training.sgd_budget", "must be positive")
        _require(self.eval_every >= 1, "training.eval_every", "must be positive")


@dataclass(frozen=True)
class SamplingConfig:
    section: ClassVar[str] = "sampling"

    n_samples: int = 10_000
    init: str = "standard_normal"
    variant: str = "ddpm"

    def __post_init__(self):
        _require(self.n_samples >= 1, "sampling.n_samples", "must be positive")
        _require(self.init in ("exact", "standard_normal"), "sampling.init", f"unknown init {self.init!r}")
        _require(self.variant in REVERSE_STEPS, "sampling.variant", f"use one of {REVERSE_STEPS.available_keys()}")


@dataclass(frozen=True)
class MetricsConfig:
    section: ClassVar[str] = "metrics"

    bins: Optional[int] = None
    k_ref: int = 8192
    mc_n: int = 10_000
    epsilon: Optional[float] = None

    def __post_init__(self):
        _require(self.bins is None or self.bins >= 1, "metrics.bins", "must be positive")
        _require(self.k_ref >= 1, "metrics.k_ref", "must be positive")
        _require(self.mc_n >= 1000, "metrics.mc_n", f"must be at least 1000, found {self.mc_n}")
        _require(self.epsilon is None or _positive(self.epsilon), "metrics.epsilon", "must be positive")


@dataclass(frozen=True)
class SweepConfig:
    """Scaling sweeps.

    End-to-end points use ``T = c_T log(1 / eps)``, ``K = ceil(c_K / eps^2)`` and a training budget of
    ``c_n / eps^4`` items, either pooled over the grid times or scaled per time by ``sigma_t^4``.
    """

    section: ClassVar[str] = "sweep"

    epsilons: Tuple[float, ...] = DEFAULT_EPSILONS
    c_T: float = 2.0
    c_K: float = 16.0
    c_n: float = 256.0
    budget_mode: str = "pooled"
    replicates: int = 1
    score: str = "learned"
    t0_grid: Tuple[float, ...] = DEFAULT_T0_GRID
    legs: bool = False
    approx_floor: float = 0.0
    slack: float = 3.0

    def __post_init__(self):
        _require(len(self.epsilons) >= 1, "sweep.epsilons", "at least one epsilon is required")
        _require(all(0 < e < 1 for e in self.epsilons), "sweep.epsilons", "every epsilon must lie in (0, 1)")
        _require(len(set(self.epsilons)) == len(self.epsilons), "sweep.epsilons", "epsilons must be distinct")
        for key in ("c_T", "c_K", "c_n"):
            _require(_positive(getattr(self, key)), f"sweep.{key}", "must be positive")
        _require(self.budget_mode in ("pooled", "per_k"), "sweep.budget_mode", f"unknown mode {self.budget_mode!r}")
        _require(self.replicates >= 1, "sweep.replicates", "must be positive")
        _require(self.score in ("learned", "oracle"), "sweep.score", f"use 'learned' or 'oracle', found {self.score!r}")
        _require(all(t0 > 0 for t0 in self.t0_grid), "sweep.t0_grid", "every t0 must be positive")
        _require(self.approx_floor >= 0, "sweep.approx_floor", "must be non-negative")
        _require(self.slack >= 0, "sweep.slack", "must be non-negative")


@dataclass(frozen=True)
class VerifyConfig:
    section: ClassVar[str] = "verify"

    kappa_grid: Optional[Tuple[float, ...]] = None
    tolerance_scale: float = 1.0
    massart_replicates: int = 2000
    gap_replicates: int = 100

    def __post_init__(self):
        _require(self.kappa_grid is None or len(self.kappa_grid) > 0, "verify.kappa_grid", "the grid is empty")
        _require(self.kappa_grid is None or all(k > 0 for k in self.kappa_grid), "verify.kappa_grid", "need k > 0")
        _require(self.massart_replicates >= 2, "verify.massart_replicates", "need at least 2 replicates")
        _require(self.gap_replicates >= 2, "verify.gap_replicates", "need at least 2 replicates")


@dataclass(frozen=True)
class LabConfig:
    """The resolved configuration of one run, echoed verbatim into its run record."""

    section: ClassVar[str] = ""

    seed: int = 0
    out: str = "runs/default"
    workers: int = 1
    format: str = "csv"
    target: TargetConfig = field(default_factory=TargetConfig)
    grid: GridConfig = field(default_factory=GridConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    sampling: SamplingConfig = field(default_factory=SamplingConfig)
    metrics: MetricsConfig = field(default_factory=MetricsConfig)
    sweep: SweepConfig = field(default_factory=SweepConfig)
    verify: VerifyConfig = field(default_factory=VerifyConfig)

    def __post_init__(self):
        _require(0 <= self.seed < 2**64, "seed", f"must be an unsigned 64 bit integer, found {self.seed}")
        _require(self.workers >= 1, "workers", "must be positive")
        _require(self.format in FORMATS, "format", f"use one of {FORMATS}, found {self.format!r}")

    def to_dict(self) -> Dict[str, Any]:
        return _plain(dataclasses.asdict(self))

    @classmethod
    def from_dict(cls, data: Optional[Dict[str, Any]]) -> "LabConfig":
        return _build(cls, data or {}, "")

    def replace(self, **changes: Any) -> "LabConfig":
        return dataclasses.replace(self, **changes)


def _plain(value: Any) -> Any:
    if isinstance(value, dict):
        return {k: _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    return value


def _check_type(value: Any, hint: Any, key: str) -> Any:
    origin, args = get_origin(hint), get_args(hint)
    if hint is Any:
        return value
    if origin is Union:
        if value is None:
            _require(type(None) in args, key, "may not be null")
            return None
        inner = [a for a in args if a is not type(None)]
        return _check_type(value, inner[0], key)
    if origin in (list, List):
        _require(isinstance(value, (list, tuple)), key, f"expected a list, found {type(value).__name__}")
        return [_check_type(v, args[0], f"{key}[{i}]") for i, v in enumerate(value)] if args else list(value)
    if origin in (tuple, Tuple):
        _require(isinstance(value, (list, tuple)), key, f"expected a list, found {type(value).__name__}")
        return tuple(_check_type(v, args[0], f"{key}[{i}]") for i, v in enumerate(value))
    if origin in (dict, Dict):
        _require(isinstance(value, dict), key, f"expected a mapping, found {type(value).__name__}")
        return dict(value)
    if hint is bool:
        _require(isinstance(value, bool), key, f"expected a boolean, found {value!r}")
        return value
    if hint is int:
        _require(isinstance(value, int) and not isinstance(value, bool), key, f"expected an integer, found {value!r}")
        return value
    if hint is float:
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        _require(ok, key, f"expected a number, found {value!r}")
        return float(value)
    if hint is str:
        _require(isinstance(value, str), key, f"expected a string, found {value!r}")
        return value
    return value


def _build(cls: type, data: Dict[str, Any], prefix: str) -> Any:
    if not isinstance(data, dict):
        raise ConfigurationError(f"`{prefix.rstrip('.') or 'config'}`: expected a mapping, found {type(data).__name__}")
    hints = get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigurationError(f"Unknown config key `{prefix}{unknown[0]}`")
    kwargs = {}
    for name, value in data.items():
        key = f"{prefix}{name}"
        hint = hints[name]
        if dataclasses.is_dataclass(hint):
            kwargs[name] = _build(hint, value or {}, f"{key}.")
        else:
            kwargs[name] = _check_type(value, hint, key)
    return cls(**kwargs)


def _set_dotted(data: Dict[str, Any], dotted: str, value: Any) -> None:
    *parents, leaf = dotted.split(".")
    node = data
    for part in parents:
        node = node.setdefault(part, {})
        if not isinstance(node, dict):
            raise ConfigurationError(f"`{dotted}` overrides a non-mapping value")
    node[leaf] = value


def load_config(path: Optional[str] = None, overrides: Optional[Dict[str, Any]] = None) -> LabConfig:
    """Read ``path`` (YAML) and apply dotted ``overrides`` such as ``{"training.n": 100}``.

    ``None`` override values are skipped, so unset CLI flags keep the file value.
    """
    data: Dict[str, Any] = {}
    if path is not None:
        try:
            with open(path) as fp:
                data = yaml.safe_load(fp) or {}
        except FileNotFoundError as err:
            raise ConfigurationError(f"Config file {path!r} does not exist") from err
        except yaml.YAMLError as err:
            raise ConfigurationError(f"Config file {path!r} is not valid YAML: {err}") from err
    for dotted, value in (overrides or {}).items():
        if value is not None:
            _set_dotted(data, dotted, value)
    return LabConfig.from_dict(data)


def dump_config(config: LabConfig, path: str) -> None:
    with open(path, "w") as fp:
        yaml.safe_dump(config.to_dict(), fp, sort_keys=True)
