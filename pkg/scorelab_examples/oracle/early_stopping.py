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
import numpy as np

from scorelab.diffusion.targets import build_target
from scorelab.metrics.legs import early_stopping_tv, fit_early_stopping

# 1. A bimodal target, where the forward process blurs the two modes together
target = build_target("bimodal_1d", separation=2.0, var=1.0)

# 2. Distance between the data and its forward marginal at the stopping time
t0s = np.geomspace(0.3, 1e-4, 9)
tvs = [early_stopping_tv(target, t0).value for t0 in t0s]

# 3. Fit the sqrt(t0) log(1 / t0) envelope through the largest t0 and count the points above it
fit = fit_early_stopping(t0s, tvs)
for t0, tv in zip(t0s, tvs):
    print(f"t0={t0:.1e}  TV(p_0, p_t0)={tv:.5f}  envelope={fit.C * fit.envelope_shape(t0):.5f}")
print(f"C={fit.C:.3f}  violations={fit.violations}")
