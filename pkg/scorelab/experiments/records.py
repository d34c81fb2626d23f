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
import datetime
import hashlib
import json
import os
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, List, Optional

from scorelab.__about__ import __version__
from scorelab.core.exceptions import ContractError
from scorelab.experiments.config import LabConfig

RECORD_FILE = "run_record.json"
STATUSES = ("running", "completed", "failed", "diverged")


def _utc_now() -> str:
    return datetime.datetime.now(datetime.timezone.utc).replace(microsecond=0).isoformat()


def sha256_of_file(path: str) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fp:
        for block in iter(lambda: fp.read(1 << 20), b""):
            digest.update(block)
    return digest.hexdigest()


@dataclass
class RunRecord:
    """Provenance of one command run.

    ``outputs`` maps a stage output name to its path (relative to the run directory) and SHA-256 digest.
    The timestamps live only in ``run_record.json``; none of the numeric outputs carries them.
    """

    command: str
    config: Dict[str, Any]
    seed: int
    run_dir: str
    version: str = __version__
    started: str = field(default_factory=_utc_now)
    finished: Optional[str] = None
    status: str = "running"
    outputs: Dict[str, Dict[str, str]] = field(default_factory=dict)
    detail: Dict[str, Any] = field(default_factory=dict)

    @classmethod
    def start(cls, command: str, config: LabConfig) -> "RunRecord":
        os.makedirs(config.out, exist_ok=True)
        return cls(command=command, config=config.to_dict(), seed=config.seed, run_dir=config.out)

    def add_output(self, name: str, path: str) -> None:
        if not os.path.isfile(path):
            raise ContractError(f"Output {name!r} points to a missing file {path!r}")
        self.outputs[name] = {
            "path": os.path.relpath(path, self.run_dir),
            "sha256": sha256_of_file(path),
        }

    def finish(self, status: str = "completed") -> str:
        if status not in STATUSES:
            raise ContractError(f"Unknown run status {status!r}")
        self.status = status
        self.finished = _utc_now()
        return self.save()

    def save(self) -> str:
        path = os.path.join(self.run_dir, RECORD_FILE)
        with open(path, "w") as fp:
            json.dump(asdict(self), fp, indent=2, sort_keys=True)
        return path

    @classmethod
    def load(cls, run_dir: str) -> "RunRecord":
        path = os.path.join(run_dir, RECORD_FILE)
        if not os.path.isfile(path):
            raise FileNotFoundError(f"No run record in {run_dir!r}")
        with open(path) as fp:
            data = json.load(fp)
        data["run_dir"] = run_dir
        return cls(**data)

    def resolved_config(self) -> LabConfig:
        return LabConfig.from_dict(self.config)

    def verify(self) -> List[str]:
        """Names of outputs whose file is missing or no longer matches the recorded digest."""
        broken = []
        for name, entry in sorted(self.outputs.items()):
            path = os.path.join(self.run_dir, entry["path"])
            if not os.path.isfile(path) or sha256_of_file(path) != entry["sha256"]:
                broken.append(name)
        return broken

    def output_path(self, name: str) -> Optional[str]:
        entry = self.outputs.get(name)
        return None if entry is None else os.path.join(self.run_dir, entry["path"])
