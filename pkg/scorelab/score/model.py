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
import base64
import json
import math
from dataclasses import dataclass
from typing import Any, Dict, Optional, Sequence, Tuple, Union

import numpy as np
import torch
from pytorch_lightning.utilities.exceptions import MisconfigurationException
from torch import nn
from torch.nn.utils import parameters_to_vector, vector_to_parameters

from scorelab.core.exceptions import ConfigurationError, DivisionGuardError, NumericHealthError, RankError
from scorelab.core.registry import LabRegistry
from scorelab.core.utils import ArrayLike, as_points, check_time
from scorelab.diffusion.ou import forward_sample, ou_marginal_params
from scorelab.diffusion.targets import gaussian_score_coefficients, GaussianMixtureTarget

ACTIVATIONS = LabRegistry("activations", kind="activation")

TimeLike = Union[float, torch.Tensor]


@ACTIVATIONS(name="gelu", A=0.0, B=1.0, smooth=True)
def _gelu() -> nn.Module:
    return nn.GELU()


@ACTIVATIONS(name="tanh", A=1.0, B=0.0, smooth=True)
def _tanh() -> nn.Module:
    return nn.Tanh()


@ACTIVATIONS(name="softplus", A=math.log(2.0), B=1.0, smooth=True)
def _softplus() -> nn.Module:
    return nn.Softplus()


@ACTIVATIONS(name="identity", A=0.0, B=1.0, smooth=True)
def _identity() -> nn.Module:
    return nn.Identity()


@ACTIVATIONS(name="relu", A=0.0, B=1.0, smooth=False)
def _relu() -> nn.Module:
    return nn.ReLU()


def time_features(t: torch.Tensor) -> torch.Tensor:
    """Fixed embedding ``[t, exp(-t), 1 - exp(-2t)]`` stacked on the last axis."""
    return torch.stack([t, torch.exp(-t), -torch.expm1(-2.0 * t)], dim=-1)


def _to_tensor(x: ArrayLike) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x.to(torch.float64)
    return torch.as_tensor(np.asarray(x, dtype=np.float64))


class ScoreModel(nn.Module):
    """Base class of parametric score fields ``s_theta(x, t)`` acting on ``(n, d)`` float64 tensors."""

    kind: str = "base"

    def __init__(self, d: int):
        super().__init__()
        if d < 1:
            raise ConfigurationError(f"`d` must be positive, found {d}")
        self.d = int(d)

    def hparams(self) -> Dict[str, Any]:
        return {"d": self.d}

    @property
    def num_params(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def flat_params(self) -> np.ndarray:
        return parameters_to_vector(self.parameters()).detach().numpy().copy()

    def set_flat_params(self, theta: ArrayLike) -> "ScoreModel":
        theta = _to_tensor(theta).reshape(-1)
        if theta.numel() != self.num_params:
            raise ConfigurationError(f"Expected {self.num_params} parameters, found {theta.numel()}")
        with torch.no_grad():
            vector_to_parameters(theta, self.parameters())
        return self

    def with_params(self, theta: ArrayLike) -> "ScoreModel":
        """A new model of the same architecture holding ``theta``."""
        return type(self)(**self.hparams()).set_flat_params(theta)

    def check_health(self) -> None:
        for name, p in self.named_parameters():
            if not torch.isfinite(p).all():
                raise NumericHealthError(f"Non-finite values in parameter {name!r}")

    def evaluate(self, x: ArrayLike, t: float) -> np.ndarray:
        """Numpy in, numpy out evaluation without autograd."""
        self.check_health()
        x = as_points(x, self.d)
        with torch.no_grad():
            return self(torch.as_tensor(x), check_time(t)).numpy()

    def eps(self, x: torch.Tensor, t: TimeLike) -> torch.Tensor:
        """Noise prediction ``eps_theta = -sigma_t s_theta``."""
        t = _to_tensor(t)
        sigma = torch.sqrt(-torch.expm1(-2.0 * t))
        if sigma.ndim == 1:
            sigma = sigma[:, None]
        return -sigma * self(x, t)


class LinearScoreModel(ScoreModel):
    """Affine score family ``s(x) = A x + b`` (no time dependence; one model per time)."""

    kind = "linear"

    def __init__(self, d: int, A: Optional[ArrayLike] = None, b: Optional[ArrayLike] = None):
        super().__init__(d)
        A = np.zeros((d, d)) if A is None else np.asarray(A, dtype=np.float64).reshape(d, d)
        b = np.zeros(d) if b is None else np.asarray(b, dtype=np.float64).reshape(d)
        self.A = nn.Parameter(torch.as_tensor(A.copy()))
        self.b = nn.Parameter(torch.as_tensor(b.copy()))

    def forward(self, x: torch.Tensor, t: TimeLike = 0.0) -> torch.Tensor:
        return x @ self.A.T + self.b

    def coefficients(self) -> Tuple[np.ndarray, np.ndarray]:
        return self.A.detach().numpy().copy(), self.b.detach().numpy().copy()

    @classmethod
    def from_coefficients(cls, A: ArrayLike, b: ArrayLike) -> "LinearScoreModel":
        b = np.atleast_1d(np.asarray(b, dtype=np.float64))
        return cls(b.shape[0], A=A, b=b)


class MLPScoreModel(ScoreModel):
    """Feed-forward score network on the input ``[x, t, exp(-t), sigma_t^2]``.

    Args:
        d: Data dimension.
        depth: Number of linear layers (``depth - 1`` hidden layers, each followed by the activation).
        width: Hidden width.
        activation: Key in ``ACTIVATIONS``.
        seed: Seed of the ``torch.Generator`` used for the centered uniform ``1 / sqrt(fan_in)`` initialization.
        t_max: Largest time the model is queried at; enters the linear-growth certificate.
    """

    kind = "mlp"

    def __init__(
        self,
        d: int,
        depth: int = 3,
        width: int = 32,
        activation: str = "gelu",
        seed: int = 0,
        t_max: float = 10.0,
    ):
        super().__init__(d)
        if depth < 1 or width < 1:
            raise ConfigurationError(f"`depth` and `width` must be positive, found {depth} and {width}")
        self.depth = depth
        self.width = width
        self.activation = activation
        self.seed = seed
        self.t_max = float(t_max)

        sizes = [d + 3] + [width] * (depth - 1) + [d]
        self.layers = nn.ModuleList([nn.Linear(i, o).to(torch.float64) for i, o in zip(sizes[:-1], sizes[1:])])
        self.act = ACTIVATIONS.resolve(activation)()
        self.reset_parameters(seed)

    def hparams(self) -> Dict[str, Any]:
        return {
            "d": self.d,
            "depth": self.depth,
            "width": self.width,
            "activation": self.activation,
            "seed": self.seed,
            "t_max": self.t_max,
        }

    def reset_parameters(self, seed: int) -> None:
        gen = torch.Generator().manual_seed(int(seed))
        with torch.no_grad():
            for layer in self.layers:
                bound = 1.0 / math.sqrt(layer.in_features)
                layer.weight.uniform_(-bound, bound, generator=gen)
                layer.bias.uniform_(-bound, bound, generator=gen)

    def forward(self, x: torch.Tensor, t: TimeLike) -> torch.Tensor:
        t = _to_tensor(t)
        if t.ndim == 0:
            t = t.expand(x.shape[0])
        h = torch.cat([x, time_features(t)], dim=-1)
        for layer in self.layers[:-1]:
            h = self.act(layer(h))
        return self.layers[-1](h)


class TimestepScoreBank(ScoreModel):
    """One score model per grid time; queries are routed to the model of the nearest grid time."""

    kind = "bank"

    def __init__(self, times: Sequence[float], models: Sequence[ScoreModel]):
        if len(times) != len(models) or not models:
            raise ConfigurationError("A score bank needs one model per grid time")
        super().__init__(models[0].d)
        self.register_buffer("times", torch.as_tensor(np.asarray(times, dtype=np.float64)))
        self.models = nn.ModuleList(models)

    def hparams(self) -> Dict[str, Any]:
        return {"times": self.times.tolist()}

    def with_params(self, theta: ArrayLike) -> "ScoreModel":
        clone = TimestepScoreBank(self.times.tolist(), [m.with_params(m.flat_params()) for m in self.models])
        return clone.set_flat_params(theta)

    def index_of(self, t: float) -> int:
        return int(torch.argmin(torch.abs(self.times - float(t))))

    def model_at(self, t: float) -> ScoreModel:
        return self.models[self.index_of(t)]

    def forward(self, x: torch.Tensor, t: TimeLike) -> torch.Tensor:
        t = _to_tensor(t)
        if t.ndim == 0:
            return self.model_at(float(t))(x, t)
        out = torch.empty_like(x)
        index = torch.argmin(torch.abs(t[:, None] - self.times[None, :]), dim=1)
        for i in torch.unique(index).tolist():
            mask = index == i
            out[mask] = self.models[i](x[mask], t[mask])
        return out


def grad_params(model: ScoreModel, x: ArrayLike, t: Union[float, ArrayLike], cotangent: ArrayLike) -> np.ndarray:
    """Reverse-mode gradient of ``sum(cotangent * model(x, t))`` with respect to the flat parameter vector."""
    model.check_health()
    x = torch.as_tensor(as_points(x, model.d))
    cot = torch.as_tensor(as_points(cotangent, model.d))
    params = [p for p in model.parameters()]
    out = model(x, _to_tensor(t))
    grads = torch.autograd.grad((out * cot).sum(), params, allow_unused=True)
    grads = [torch.zeros_like(p) if g is None else g for g, p in zip(grads, params)]
    return torch.cat([g.reshape(-1) for g in grads]).numpy()


@dataclass(frozen=True)
class GrowthCertificate:
    """``|f_j(x)| <= C_theta (1 + ||x||)`` for every output coordinate, plus the Massart-style capacity bound."""

    C_theta: float
    massart_bound: float
    B: float
    W: int
    L: int
    d: int


def affine_growth_bound(
    layers: Sequence[Tuple[np.ndarray, np.ndarray]],
    A: float,
    B: float,
) -> Tuple[np.ndarray, np.ndarray]:
    """Per-output ``(c0, c1)`` with ``|f_j(u)| <= c0_j + c1_j ||u||``.

    Every unit is tracked as an affine bound in ``||u||``; a hidden unit maps ``(c0, c1)`` of its
    pre-activation to ``(A + B c0, B c1)`` and a linear layer combines bounds with ``|w|``.
    The last layer is linear.

    >>> unit = (np.array([[1.0]]), np.array([0.0]))
    >>> c0, c1 = affine_growth_bound([unit, unit], 0.0, 1.0)
    >>> float(max(c0.max(), c1.max()))
    1.0
    """
    weight, bias = layers[0]
    c0 = np.abs(bias)
    c1 = np.linalg.norm(weight, axis=1)
    for weight, bias in layers[1:]:
        a0, a1 = A + B * c0, B * c1
        c0 = np.abs(bias) + np.abs(weight) @ a0
        c1 = np.abs(weight) @ a1
    return c0, c1


def linear_growth_certificate(model: MLPScoreModel, t_max: Optional[float] = None) -> GrowthCertificate:
    """Linear-growth constant of ``x -> model(x, t)`` uniformly over ``t in [0, t_max]``."""
    meta = ACTIVATIONS.metadata(model.activation)
    layers = [(layer.weight.detach().numpy(), layer.bias.detach().numpy()) for layer in model.layers]
    c0, c1 = affine_growth_bound(layers, meta["A"], meta["B"])
    t_max = model.t_max if t_max is None else float(t_max)
    # ||u|| <= ||x|| + ||time_features(t)|| and the feature norm is at most sqrt(t_max^2 + 2)
    tau = math.sqrt(t_max**2 + 2.0)
    C = float(np.max(np.maximum(c0 + c1 * tau, c1)))
    B = float(np.max(np.abs(model.flat_params())))
    W, L = model.width, model.depth
    return GrowthCertificate(C_theta=C, massart_bound=massart_bound(B, W, L, model.d), B=B, W=W, L=L, d=model.d)


def massart_bound(B: float, W: int, L: int, d: int) -> float:
    """
    >>> massart_bound(0.5, 4, 2, 1)
    6.0
    """
    return float((B * W)**L * (d + L / W))


@dataclass(frozen=True)
class MinimizerPair:
    theta_a: LinearScoreModel
    theta_b: LinearScoreModel


def denoising_design(x0: ArrayLike, noise: ArrayLike, t: float) -> Tuple[np.ndarray, np.ndarray]:
    """Regression design ``[x_t, 1]`` and the conditional score targets ``-noise / sigma_t``."""
    noise = as_points(noise)
    x0 = as_points(x0, noise.shape[1])
    params = ou_marginal_params(t)
    if params.sigma_t_sq == 0:
        raise DivisionGuardError("sigma_t = 0 at t = 0: the denoising target is undefined")
    x_t = forward_sample(x0, t, noise)
    design = np.concatenate([x_t, np.ones((x_t.shape[0], 1))], axis=1)
    return design, -noise / params.sigma_t


def empirical_linear_minimizer(x0: ArrayLike, noise: ArrayLike, t: float) -> LinearScoreModel:
    design, y = denoising_design(x0, noise, t)
    n, p = design.shape
    if n < p or np.linalg.matrix_rank(design) < p:
        raise RankError(f"Design matrix of shape {design.shape} is rank deficient")
    coef, *_ = np.linalg.lstsq(design, y, rcond=None)
    d = p - 1
    return LinearScoreModel.from_coefficients(coef[:d].T, coef[d])


def closed_form_minimizers(
    target: GaussianMixtureTarget,
    t: float,
    x0: ArrayLike,
    noise: ArrayLike,
) -> MinimizerPair:
    """Population and empirical minimizers of the score loss over the linear family.

    ``theta_a`` is the exact time-``t`` score of the single-Gaussian ``target``. ``theta_b`` is the
    least-squares fit of the denoising targets ``-noise_i / sigma_t`` on ``(x_i, 1)``, the empirical
    risk minimizer of the denoising objective on this sample.
    """
    A_star, b_star = gaussian_score_coefficients(target, t)
    theta_b = empirical_linear_minimizer(x0, noise, t)
    return MinimizerPair(theta_a=LinearScoreModel.from_coefficients(A_star, b_star), theta_b=theta_b)


_MODEL_KINDS = {
    LinearScoreModel.kind: LinearScoreModel,
    MLPScoreModel.kind: MLPScoreModel,
}


def _encode(theta: np.ndarray) -> str:
    return base64.b64encode(np.ascontiguousarray(theta, dtype="<f8").tobytes()).decode("ascii")


def _decode(payload: str) -> np.ndarray:
    return np.frombuffer(base64.b64decode(payload), dtype="<f8").astype(np.float64)


def to_checkpoint(model: ScoreModel) -> Dict[str, Any]:
    if isinstance(model, TimestepScoreBank):
        return {"kind": model.kind, "times": model.times.tolist(), "models": [to_checkpoint(m) for m in model.models]}
    return {"kind": model.kind, "hparams": model.hparams(), "params": _encode(model.flat_params())}


def from_checkpoint(data: Dict[str, Any]) -> ScoreModel:
    kind = data.get("kind")
    if kind == TimestepScoreBank.kind:
        return TimestepScoreBank(data["times"], [from_checkpoint(m) for m in data["models"]])
    if kind not in _MODEL_KINDS:
        raise MisconfigurationException(f"Unknown checkpoint kind {kind!r}")
    return _MODEL_KINDS[kind](**data["hparams"]).set_flat_params(_decode(data["params"]))


def save_checkpoint(model: ScoreModel, path: str) -> None:
    with open(path, "w") as fp:
        json.dump(to_checkpoint(model), fp, indent=2, sort_keys=True)


def load_checkpoint(path: str) -> ScoreModel:
    with open(path) as fp:
        return from_checkpoint(json.load(fp))


def build_score_model(kind: str, d: int, **kwargs) -> ScoreModel:
    if kind not in _MODEL_KINDS:
        raise ConfigurationError(f"Unknown score model kind {kind!r}, use one of {sorted(_MODEL_KINDS)}")
    return _MODEL_KINDS[kind](d=d, **kwargs)
