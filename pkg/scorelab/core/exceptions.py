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
from typing import Any, Optional

import numpy as np
from pytorch_lightning.utilities.exceptions import MisconfigurationException


class ScoreLabError(Exception):
    """Base class for every error raised by ``scorelab``."""


class ConfigurationError(ScoreLabError, MisconfigurationException):
    """An experiment, grid or training configuration violates its constraints."""


class DomainError(ScoreLabError, ValueError):
    """An argument lies outside the mathematical domain of the operation."""


class ContractError(ScoreLabError, ValueError):
    """Inputs that must be aligned (lengths, provenance, sample sets) are not."""


class CoverageError(ScoreLabError, ValueError):
    """A quadrature box misses more probability mass than allowed."""


class RankError(ScoreLabError, np.linalg.LinAlgError):
    """A least-squares design matrix is rank deficient."""


class NumericHealthError(ScoreLabError, ArithmeticError):
    """Non-finite parameters or inputs were detected."""


class DivisionGuardError(NumericHealthError):
    """A quantity that divides (usually ``sigma_t``) is zero."""


class DivergenceError(NumericHealthError):
    """An iteration produced a non-finite value.

    Args:
        message: Human readable description.
        trace: Partial :class:`~scorelab.score.training.SGDTrace` recorded before the failure, if any.
        step: Index of the reverse step that failed, if raised by a sampler.
    """

    def __init__(self, message: str, trace: Optional[Any] = None, step: Optional[int] = None):
        super().__init__(message)
        self.trace = trace
        self.step = step
