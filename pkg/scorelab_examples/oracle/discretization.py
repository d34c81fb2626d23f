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

from scorelab import make_time_grid
from scorelab.core.utils import fit_loglog_slope
from scorelab.diffusion.targets import build_target
from scorelab.metrics.legs import tv_legs

# SCORELAB_TESTING is set in the CI to run faster.
_TESTING = os.getenv("SCORELAB_TESTING", "0") == "1"

# 1. Pick an analytic target. A Gaussian keeps every law of the reverse chain Gaussian, so TV is exact.
target = build_target("gaussian_1d", mean=1.0, var=0.5)

# 2. Run the sampler with the true score on finer and finer grids
steps = [16, 64] if _TESTING else [16, 32, 64, 128, 256, 512]
discretization = []
for K in steps:
    grid = make_time_grid(T=5.0, K=K, t0=1e-3)
    report = tv_legs(target, "oracle", grid, n_samples=10_000, seed=0)
    discretization.append(report.leg_discretization.value)
    print(f"K={K:4d}  discretization={report.leg_discretization.value:.5f}  init={report.leg_init.value:.5f}")

# 3. The discretization leg decays polynomially in the number of steps
slope, _ = fit_loglog_slope(steps, discretization)
print(f"log-log slope of the discretization leg: {slope:.3f}")
