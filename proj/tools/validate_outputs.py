#!/usr/bin/env python3
"""Runs every qdiff subcommand on the test fixtures and validates the JSON it
writes against the schemas in schemas/."""

import argparse
import json
import pathlib
import subprocess
import sys
import tempfile

import jsonschema


def load_schemas(root):
    return {p.name.removesuffix(".schema.json"): json.loads(p.read_text()) for p in root.glob("*.schema.json")}


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--cli", required=True)
    ap.add_argument("--fixtures", required=True, type=pathlib.Path)
    ap.add_argument("--schemas", required=True, type=pathlib.Path)
    args = ap.parse_args()

    schemas = load_schemas(args.schemas)
    for s in schemas.values():
        jsonschema.Draft202012Validator.check_schema(s)
    fx = args.fixtures
    failures = 0

    with tempfile.TemporaryDirectory() as tmp:
        tmp = pathlib.Path(tmp)
        ck = tmp / "ck.json"

        def run(argv):
            out = tmp / "out"
            proc = subprocess.run([args.cli, *map(str, argv), "--out", str(out)], capture_output=True, text=True)
            if proc.returncode != 0:
                raise RuntimeError(f"{argv[0]} exited {proc.returncode}: {proc.stderr.strip()}")
            return out.read_text()

        def check(label, schema, docs):
            nonlocal failures
            try:
                for doc in docs:
                    jsonschema.validate(doc, schemas[schema], cls=jsonschema.Draft202012Validator)
                print(f"ok   {label} ({len(docs)} document(s) against {schema})")
            except jsonschema.ValidationError as e:
                failures += 1
                print(f"FAIL {label}: {e.message} at {list(e.absolute_path)}")

        def lines(text):
            return [json.loads(line) for line in text.splitlines() if line.strip()]

        pair = ["--x", fx / "pair_x.txt", "--y", fx / "pair_y.txt", "--t", "0.4"]
        check("kernel", "kernel", lines(run(["kernel", *pair])))
        check("posterior exact", "posterior-record", lines(run(["posterior", *pair])))
        check("posterior exact sidecar", "posterior-diagnostics", [json.loads((tmp / "out.diagnostics.json").read_text())])
        ten = ["--x", fx / "line10.txt", "--y", fx / "line10.txt", "--t", "0.4"]
        check("posterior mcmc", "posterior-record", lines(run(["posterior", *ten, "--mode", "mcmc", "-K", "16"])))
        check("posterior mcmc sidecar", "posterior-diagnostics", [json.loads((tmp / "out.diagnostics.json").read_text())])
        check("score exact", "score", lines(run(["score", *pair])))
        check("score mcmc", "score", lines(run(["score", *ten, "--method", "mcmc"])))
        check("forward", "trajectory-record", lines(run(["forward", "--x0", fx / "three_1d.txt", "--steps", "5", "--trace"])))
        check("reverse", "trajectory-record", lines(run(["reverse", "--data", fx / "tiny_dataset.txt", "--steps", "5"])))
        check("train", "train-summary",
              lines(run(["train", "--data", fx / "tiny_dataset.txt", "--checkpoint", ck, "--iterations", "20", "--hidden", "8"])))
        check("checkpoint", "checkpoint", [json.loads(ck.read_text())])
        check("sample", "sample-record", lines(run(["sample", "--checkpoint", ck, "-n", "3", "--steps", "5"])))
        check("bench-score", "estimator-study", lines(run(["bench-score", "-N", "3", "--k-grid", "4,8", "--replicates", "4"])))
        gen = ["bench-gen", "-N", "2", "-d", "1", "--items", "32", "--iterations", "10", "--hidden", "8", "--steps", "10",
               "--samples", "16", "--reference", "16", "--permutations", "20"]
        check("bench-gen", "generation", lines(run(gen)))
        check("bench-gen control", "generation", lines(run([*gen, "--control"])))

    return 1 if failures else 0


if __name__ == "__main__":
    sys.exit(main())
