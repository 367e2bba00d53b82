#!/usr/bin/env python3
# Copyright 2026 The rpdk Authors. All Rights Reserved.
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

"""Run every report-writing CLI command on a small config and validate the reports."""
import json
import pathlib
import subprocess
import sys

from jsonschema import Draft202012Validator
from referencing import Registry, Resource

COMMANDS = {
    "gradcheck": "gradcheck.json",
    "bench-rp": "bench_rp.json",
    "train-compare": "train_compare.json",
    "eval-occlusion": "eval_occlusion.json",
}


def main() -> int:
    cli, config, schema_dir, out = (pathlib.Path(a) for a in sys.argv[1:5])
    schemas = {p.name: json.loads(p.read_text()) for p in schema_dir.glob("*.schema.json")}
    registry = Registry().with_resources(
        (name, Resource.from_contents(s)) for name, s in schemas.items()
    )
    failures = 0
    for command, report in COMMANDS.items():
        run = subprocess.run([str(cli), command, "--config", str(config), "--out", str(out)],
                             capture_output=True, text=True)
        # exit 1 only means an assertion did not hold on this small config
        if run.returncode not in (0, 1):
            print(f"{command}: exit {run.returncode}\n{run.stdout}{run.stderr}")
            failures += 1
            continue
        schema = schemas[report.replace(".json", ".schema.json")]
        validator = Draft202012Validator(schema, registry=registry)
        errors = sorted(validator.iter_errors(json.loads((out / report).read_text())), key=str)
        for e in errors:
            print(f"{report}: {'/'.join(map(str, e.absolute_path))}: {e.message}")
        print(f"{report}: {'ok' if not errors else 'INVALID'}")
        failures += bool(errors)
    # a report missing a tier must not validate
    broken = json.loads((out / "eval_occlusion.json").read_text())
    del broken["variants"]["with_mefem"]["median"]["hard"]
    validator = Draft202012Validator(schemas["eval_occlusion.schema.json"], registry=registry)
    if validator.is_valid(broken):
        print("eval_occlusion schema accepts a report without the hard tier")
        failures += 1
    return 1 if failures else 0


if __name__ == "__main__":
    sys.exit(main())
