#!/usr/bin/env python3
"""End-to-end CLI check: synth a pool, run every analysis, validate report.json."""
import json
import pathlib
import subprocess
import sys
import tempfile

import jsonschema


def run(cli, args, cwd, expect):
    proc = subprocess.run([cli, *args], cwd=cwd, capture_output=True, text=True)
    if proc.returncode != expect:
        sys.exit(f"{' '.join(args)}: exit {proc.returncode}, expected {expect}\n{proc.stderr}")
    return proc


def main():
    cli, schema_path = sys.argv[1], sys.argv[2]
    schema = json.loads(pathlib.Path(schema_path).read_text())
    jsonschema.Draft202012Validator.check_schema(schema)
    with tempfile.TemporaryDirectory() as tmp:
        work = pathlib.Path(tmp)
        run(cli, ["synth", "--out", str(work), "--rows", "600", "--seed", "5"], work, 0)
        train = "max_epochs = 3\nblocks = 2\nhidden_width = 16\n"
        (work / "all.ini").write_text(
            "[run]\nseed = 5\nout = out\n\n"
            "[pool]\ndir = pool\nground_truth = ground_truth.csv\n\n"
            f"[marginal]\n{train}\n[conditional]\n{train}\n"
            "[analysis]\n"
            + "".join(f"{k} = true\n" for k in ("bootstrap", "shuffle", "subsample", "aggregation", "cond_only",
                                                 "perturb", "diagnostics", "bounds", "baselines"))
            + "subsample_repeats = 3\nperturb_draws = 1\nprobe_points = 3\n")
        run(cli, ["run", "--config", "all.ini"], work, 0)
        report = json.loads((work / "out" / "report.json").read_text())
        jsonschema.validate(report, schema, cls=jsonschema.Draft202012Validator)
        for name in ("is_matrix.csv", "scores.csv", "bounds.csv", "curves/shuffle_is.csv", "curves/subsample.csv",
                     "curves/perturb.csv"):
            if not (work / "out" / name).is_file():
                sys.exit(f"missing output {name}")
        first = (work / "out" / "report.json").read_bytes()
        run(cli, ["run", "--config", "all.ini", "--jobs", "2"], work, 0)
        if (work / "out" / "report.json").read_bytes() != first:
            sys.exit("cached rerun changed report.json")

        run(cli, ["score", "--config", "all.ini", "--out", "plain"], work, 0)
        jsonschema.validate(json.loads((work / "plain" / "report.json").read_text()), schema,
                            cls=jsonschema.Draft202012Validator)

        run(cli, ["score", "--config", "missing.ini"], work, 2)
        (work / "bad.ini").write_text("[run]\nbogus = 1\n")
        run(cli, ["score", "--config", "bad.ini"], work, 2)
        (work / "nopool.ini").write_text("[pool]\npaths = a.fsem, b.fsem\n")
        run(cli, ["score", "--config", "nopool.ini"], work, 3)
    print("report schema and CLI exit codes ok")


if __name__ == "__main__":
    main()
