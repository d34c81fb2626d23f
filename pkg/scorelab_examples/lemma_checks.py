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

import pandas as pd

from scorelab.lemmas.oracles import run_lemma_suite

# SCORELAB_TESTING is set in the CI to run faster.
_TESTING = os.getenv("SCORELAB_TESTING", "0") == "1"

# 1. Run every analytic check: truncated moments, the Mills ratio bound, Massart, growth and the gap probe
report = run_lemma_suite(
    massart_replicates=200 if _TESTING else 2000,
    gap_replicates=20 if _TESTING else 100,
)

# 2. One row per lemma
with pd.option_context("display.width", 120):
    print(report.summary())

# 3. Anything that failed, with its measured and bound values
for failure in report.failures:
    print(failure.to_dict())
