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
"""Static SVG figures of a finished run directory."""
import glob
import os
from typing import List, Optional

import numpy as np
import pandas as pd
from pytorch_lightning.utilities.exceptions import MisconfigurationException

from scorelab.experiments.records import RunRecord
from scorelab.score.training import SGDTrace
from scorelab.utils.imports import _MATPLOTLIB_AVAILABLE

if _MATPLOTLIB_AVAILABLE:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
else:
    plt = None

MAX_TRACES = 8
COMPONENTS = ("e_approx", "e_stat", "e_opt")


def _read_table(run_dir: str, name: str) -> Optional[pd.DataFrame]:
    for ext, reader in (("csv", pd.read_csv), ("json", lambda p: pd.read_json(p, orient="records"))):
        path = os.path.join(run_dir, f"{name}.{ext}")
        if os.path.isfile(path):
            return reader(path)
    return None


def _save(fig, path: str) -> str:
    # fixed hash salt and no date keep the SVG bytes a function of the data alone
    with plt.rc_context({"svg.hashsalt": "scorelab", "svg.fonttype": "path"}):
        fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return path


def plot_tv_vs_epsilon(table: pd.DataFrame, path: str) -> str:
    medians = table.groupby("epsilon")["tv"].median().sort_index()
    fig, ax = plt.subplots(figsize=(5, 4))
    ax.loglog(table["epsilon"], table["tv"], "o", alpha=0.4, label="replicates")
    ax.loglog(medians.index, medians.to_numpy(), "-s", label="median")
    largest = float(medians.index[-1])
    ax.loglog(medians.index, medians.iloc[-1] * medians.index / largest, "--", label="C eps")
    ax.set_xlabel("eps")
    ax.set_ylabel("TV(p_t0, p_hat_t0)")
    ax.legend()
    return _save(fig, path)


def plot_decomposition(report: pd.DataFrame, path: str) -> str:
    """Stacked area of the three error components over the step index, with ``A(k)`` on top."""
    fig, ax = plt.subplots(figsize=(6, 4))
    k = report["k"].to_numpy()
    parts = [np.clip(report[c].to_numpy(dtype=np.float64), 0.0, None) for c in COMPONENTS]
    ax.stackplot(k, *parts, labels=COMPONENTS, alpha=0.7)
    ax.plot(k, report["A"].to_numpy(), color="black", lw=1.0, label="A")
    ax.set_yscale("symlog", linthresh=1e-6)
    ax.set_xlabel("k")
    ax.set_ylabel("score error")
    ax.legend()
    return _save(fig, path)


def plot_traces(traces: List[SGDTrace], path: str) -> str:
    fig, ax = plt.subplots(figsize=(6, 4))
    picks = np.unique(np.linspace(0, len(traces) - 1, min(MAX_TRACES, len(traces))).astype(int))
    for i in picks:
        trace = traces[i]
        used = np.array([r.samples_used for r in trace.records], dtype=np.float64)
        losses = trace.population_losses()
        keep = np.isfinite(losses)
        ax.plot(used[keep], losses[keep], lw=1.0, label=f"trace {i}")
    ax.set_xscale("log")
    ax.set_xlabel("samples used")
    ax.set_ylabel("training loss")
    ax.legend(fontsize="small")
    return _save(fig, path)


def _load_traces(run_dir: str) -> List[SGDTrace]:
    root = os.path.join(run_dir, "traces")
    if os.path.isfile(os.path.join(root, "trace.jsonl")):
        return [SGDTrace.load(root)]
    return [SGDTrace.load(os.path.dirname(p)) for p in sorted(glob.glob(os.path.join(root, "k*", "trace.jsonl")))]


def plot_run(run_dir: str, record: Optional[RunRecord] = None) -> List[str]:
    """Write every figure the run directory has inputs for.

    Raises:
        FileNotFoundError: no run record, or none of the figure inputs, is present.
    """
    if not _MATPLOTLIB_AVAILABLE:
        raise MisconfigurationException("You need matplotlib to plot. Please, pip install matplotlib")
    record = RunRecord.load(run_dir) if record is None else record
    written = []

    sweep = _read_table(run_dir, "sweep_accuracy")
    if sweep is not None and sweep["epsilon"].nunique() >= 2:
        written.append(plot_tv_vs_epsilon(sweep, os.path.join(run_dir, "tv_vs_epsilon.svg")))
    report = _read_table(run_dir, "error_report")
    if report is not None and len(report):
        written.append(plot_decomposition(report, os.path.join(run_dir, "decomposition.svg")))
    traces = _load_traces(run_dir)
    if traces:
        written.append(plot_traces(traces, os.path.join(run_dir, "sgd_traces.svg")))

    if not written:
        raise FileNotFoundError(f"{run_dir!r} holds no sweep table, error report or SGD trace to plot")
    for path in written:
        record.add_output(os.path.splitext(os.path.basename(path))[0], path)
    record.save()
    return written
