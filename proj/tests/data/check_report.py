#!/usr/bin/env python3
"""Generates a fixture, reconstructs and evaluates it with the CLI, then
validates metrics.json against the report schema."""

import json
import pathlib
import shutil
import subprocess
import sys

import jsonschema


def run(*args):
    proc = subprocess.run(args, capture_output=True, text=True)
    if proc.returncode != 0:
        sys.exit(f"{' '.join(map(str, args))} exited {proc.returncode}:\n{proc.stderr}")
    return proc


def main():
    cli, schema_path, work = sys.argv[1], pathlib.Path(sys.argv[2]), pathlib.Path(sys.argv[3])
    shutil.rmtree(work, ignore_errors=True)
    fixture, out = work / "fixture", work / "run"
    run(cli, "generate", "-o", fixture, "--frames", "8", "--points", "200", "--parallax", "0.02",
        "--prior", "noisy", "--depth-noise", "0.1", "--pixel-noise", "0.5", "--seed", "3")
    run(cli, "validate", fixture)
    run(cli, "reconstruct", fixture / "tracks.txt", "-o", out)
    run(cli, "evaluate", out, fixture)

    schema = json.loads(schema_path.read_text())
    jsonschema.Draft202012Validator.check_schema(schema)
    report = json.loads((out / "metrics.json").read_text())
    jsonschema.validate(report, schema, cls=jsonschema.Draft202012Validator)
    if report["depth"] is None:
        sys.exit("depth block missing although ground-truth depth is available")

    # A broken report must be rejected, otherwise the check proves nothing.
    broken = dict(report)
    del broken["ate"]
    try:
        jsonschema.validate(broken, schema, cls=jsonschema.Draft202012Validator)
    except jsonschema.ValidationError:
        pass
    else:
        sys.exit("schema accepted a report without 'ate'")
    print("report schema ok")


if __name__ == "__main__":
    main()
