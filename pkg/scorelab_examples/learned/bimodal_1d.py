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

from scorelab.utils.imports import _MATPLOTLIB_AVAILABLE
from scorelab.experiments.config import load_config
from scorelab.experiments.pipeline import run_decompose, run_generate

# SCORELAB_TESTING is set in the CI to run faster.
_TESTING = os.getenv("SCORELAB_TESTING", "0") == "1"
_CONFIG = os.path.join(os.path.dirname(__file__), "..", "configs", "bimodal_1d.yaml")

# 1. Load the configuration: one GELU network shared across the grid times
overrides = {}
if _TESTING:
    overrides = {
        "grid.K": 8,
        "training.n": 2000,
        "training.eval_every": 1,
        "sampling.n_samples": 2000,
        "metrics.k_ref": 64,
        "metrics.mc_n": 1000,
    }
config = load_config(_CONFIG, overrides)

# 2. Train and sample in one go, the paths are compared against a fine-grid reference run
generate = run_generate(config)
with open(generate.output_path("metrics")) as fp:
    metrics = json.load(fp)
print("TV(p_t0, p_hat_t0):", metrics["tv_legs"]["total_direct"]["value"])
print("TV(p_0, p_hat_t0):", metrics["tv_legs"]["total_to_data"]["value"])

# 3. Decompose the score error and plot it next to the SGD traces
run_decompose(config, checkpoint=generate.output_path("checkpoint"))
if _MATPLOTLIB_AVAILABLE:
    from scorelab.experiments.plots import plot_run

    for path in plot_run(config.out):
        print("wrote", path)
