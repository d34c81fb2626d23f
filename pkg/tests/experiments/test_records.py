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
import hashlib
import json
import os

import pytest

from scorelab.core.exceptions import ContractError
from scorelab.experiments.config import LabConfig
from scorelab.experiments.records import RECORD_FILE, RunRecord, sha256_of_file


def _config(tmpdir):
    return LabConfig().replace(out=os.path.join(tmpdir, "run"), seed=5)


def _touch(path, text="a,b\n1,2\n"):
    with open(path, "w") as fp:
        fp.write(text)
    return path


def test_sha256_of_file(tmpdir):
    path = _touch(os.path.join(tmpdir, "x.csv"))
    assert sha256_of_file(path) == hashlib.sha256(b"a,b\n1,2\n").hexdigest()


def test_record_life_cycle(tmpdir):
    config = _config(tmpdir)
    record = RunRecord.start("train", config)
    assert os.path.isdir(config.out)
    assert record.status == "running"
    record.add_output("table", _touch(os.path.join(config.out, "table.csv")))
    assert record.outputs["table"]["path"] == "table.csv"
    path = record.finish()
    assert os.path.basename(path) == RECORD_FILE

    with open(path) as fp:
        data = json.load(fp)
    assert data["status"] == "completed"
    assert data["seed"] == 5
    assert data["finished"] is not None

    loaded = RunRecord.load(config.out)
    assert loaded.outputs == record.outputs
    assert loaded.resolved_config() == config
    assert loaded.output_path("table") == os.path.join(config.out, "table.csv")
    assert loaded.output_path("missing") is None


def test_verify_detects_changes(tmpdir):
    config = _config(tmpdir)
    record = RunRecord.start("generate", config)
    first = _touch(os.path.join(config.out, "first.csv"))
    second = _touch(os.path.join(config.out, "second.csv"))
    record.add_output("first", first)
    record.add_output("second", second)
    assert record.verify() == []
    _touch(first, "tampered\n")
    os.remove(second)
    assert record.verify() == ["first", "second"]


def test_record_guards(tmpdir):
    config = _config(tmpdir)
    record = RunRecord.start("train", config)
    with pytest.raises(ContractError):
        record.add_output("ghost", os.path.join(config.out, "ghost.csv"))
    with pytest.raises(ContractError):
        record.finish("exploded")
    with pytest.raises(FileNotFoundError):
        RunRecord.load(os.path.join(tmpdir, "nowhere"))
