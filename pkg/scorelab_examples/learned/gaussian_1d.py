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

from scorelab.experiments.config import load_config
from scorelab.experiments.pipeline import run_decompose, run_generate, run_train

# SCORELAB_TESTING is set in the CI to run faster.
_TESTING = os.getenv("SCORELAB_TESTING", "0") == "1"
_CONFIG = os.path.join(os.path.dirname(__file__), "..", "configs", "gaussian_1d.yaml")

# 1. Load the configuration, shrinking it for a smoke run
overrides = {}
if _TESTING:
    overrides = {"grid.K": 8, "training.n": 2000, "sampling.n_samples": 2000, "metrics.mc_n": 1000}
config = load_config(_CONFIG, overrides)

# 2. Train one affine score per grid time
train = run_train(config)
checkpoint = train.output_path("checkpoint")

# 3. Sample with the learned score and split TV(p_t0, p_hat_t0) into its three legs
generate = run_generate(config, checkpoint=checkpoint)
with open(generate.output_path("metrics")) as fp:
    legs = json.load(fp)["tv_legs"]
for name in ("leg_discretization", "leg_score", "leg_init", "total_direct"):
    print(f"{name:>20}: {legs[name]['value']:.5f} ({legs[name]['method']})")

# 4. Per-step decomposition of the score error
decompose = run_decompose(config, checkpoint=checkpoint)
print("error report:", decompose.output_path("error_report_csv"))
