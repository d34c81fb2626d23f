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
"""``scorelab`` command line.

Exit codes: 0 success, 1 failing lemma checks, 2 invalid configuration or missing inputs, 3 divergence.
"""
import argparse
import os
import sys
from typing import Optional, Sequence

from pytorch_lightning import seed_everything
from pytorch_lightning.utilities import rank_zero_info
from pytorch_lightning.utilities.exceptions import MisconfigurationException

from scorelab.core.exceptions import DivergenceError
from scorelab.experiments.config import FORMATS, LabConfig, load_config
from scorelab.experiments.pipeline import run_decompose, run_generate, run_recorded, run_train, write_table
from scorelab.experiments.plots import plot_run
from scorelab.experiments.records import RunRecord
from scorelab.experiments.sweeps import sweep_accuracy, sweep_early_stop
from scorelab.lemmas.oracles import run_lemma_suite

EXIT_OK, EXIT_LEMMA_FAILED, EXIT_CONFIG, EXIT_DIVERGED = 0, 1, 2, 3
# argparse reports the alias a user typed; dispatch runs on the canonical name
COMMAND_ALIASES = {"sweep-accuracy": "sweep-theorem1", "sweep-early-stop": "sweep-theorem2"}


def _u64(value: str) -> int:
    seed = int(value)
    if not 0 <= seed < 2**64:
        raise argparse.ArgumentTypeError(f"seed must be an unsigned 64 bit integer, found {value}")
    return seed


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=None, help="YAML experiment config; defaults apply when omitted.")
    common.add_argument("--seed", type=_u64, default=None, help="Master seed, overrides the config.")
    common.add_argument("--out", default=None, help="Run directory, overrides the config.")
    common.add_argument("--workers", type=int, default=None, help="Thread pool width, overrides the config.")
    common.add_argument("--format", choices=FORMATS, default=None, help="Table format, overrides the config.")

    parser = argparse.ArgumentParser(prog="scorelab", description="Score-based diffusion sample complexity lab.")
    commands = parser.add_subparsers(dest="command", required=True)
    commands.add_parser("train", parents=[common], help="Train the score model.")
    for name, text in (("generate", "Sample and measure TV."), ("decompose", "Per-step error decomposition.")):
        sub = commands.add_parser(name, parents=[common], help=text)
        sub.add_argument("--checkpoint", default=None, help="Use this checkpoint instead of training.")
    sweeps = (
        ("sweep-theorem1", "sweep-accuracy", "TV against eps under the prescribed T, K, n."),
        ("sweep-theorem2", "sweep-early-stop", "Early-stopping sweep over t0."),
    )
    for name, alias, text in sweeps:
        commands.add_parser(name, aliases=[alias], parents=[common], help=text)
    commands.add_parser("verify", parents=[common], help="Run the lemma checks.")
    plot = commands.add_parser("plot", parents=[common], help="SVG figures of a run directory.")
    plot.add_argument("run_dir", nargs="?", default=None, help="Run directory, defaults to --out.")
    return parser


def resolve_config(args: argparse.Namespace) -> LabConfig:
    overrides = {"seed": args.seed, "out": args.out, "workers": args.workers, "format": args.format}
    return load_config(args.config, overrides)


def _verify(config: LabConfig) -> int:
    verify = config.verify
    outcome = {}

    def body(record: RunRecord) -> None:
        report = run_lemma_suite(
            tolerance_scale=verify.tolerance_scale,
            seed=config.seed,
            kappa_grid=verify.kappa_grid,
            massart_replicates=verify.massart_replicates,
            gap_replicates=verify.gap_replicates,
        )
        summary = report.summary()
        print(summary.to_string(index=False))
        record.add_output("lemma_report", write_table(report.to_frame(), config.out, "lemma_report", config.format))
        record.detail["all_passed"] = report.all_passed
        outcome["passed"] = report.all_passed

    run_recorded("verify", config, body)
    if not outcome["passed"]:
        print("Lemma checks FAILED", file=sys.stderr)
        return EXIT_LEMMA_FAILED
    print("All lemma checks passed")
    return EXIT_OK


def _dispatch(args: argparse.Namespace) -> int:
    if args.command == "plot":
        run_dir = args.run_dir or args.out
        if run_dir is None:
            run_dir = resolve_config(args).out
        for path in plot_run(run_dir):
            print(path)
        return EXIT_OK

    command = COMMAND_ALIASES.get(args.command, args.command)
    config = resolve_config(args)
    seed_everything(config.seed % 2**32)
    if command == "train":
        record = run_train(config)
    elif command == "generate":
        record = run_generate(config, args.checkpoint)
    elif command == "decompose":
        record = run_decompose(config, args.checkpoint)
    elif command == "sweep-theorem1":
        record = run_recorded("sweep-accuracy", config, lambda r: sweep_accuracy(config, r))
    elif command == "sweep-theorem2":
        record = run_recorded("sweep-early-stop", config, lambda r: sweep_early_stop(config, r))
    else:
        return _verify(config)
    rank_zero_info(f"Wrote {len(record.outputs)} outputs to {os.path.abspath(config.out)}")
    print(os.path.join(config.out, "run_record.json"))
    return EXIT_OK


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _dispatch(args)
    except MisconfigurationException as err:
        print(f"Invalid configuration: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as err:
        print(f"Missing input: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as err:
        print(f"Training diverged: {err}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    raise SystemExit(main())
