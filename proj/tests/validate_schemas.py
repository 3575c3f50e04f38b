#!/usr/bin/env python3
"""Run the mixinf tool end to end and validate every JSON report against schemas/.

usage: validate_schemas.py <mixinf binary> <schema dir> <work dir>
"""
import json
import random
import shutil
import subprocess
import sys
from pathlib import Path

import jsonschema

TOOL, SCHEMAS, WORK = sys.argv[1], Path(sys.argv[2]), Path(sys.argv[3])
COVERAGE_HEADER = "m,n_i,sigma_v2,sigma_e2,reps,law,seed,method,coverage,se,rel_log_volume,failed_reps"
POWER_HEADER = "delta,method,power,se"

failures = []


def schema(name):
    s = json.loads((SCHEMAS / f"{name}.schema.json").read_text())
    jsonschema.Draft202012Validator.check_schema(s)
    return s


def run(label, args, config, data=None, expect=0, schema_name=None):
    case = WORK / label
    case.mkdir(parents=True, exist_ok=True)
    (case / "config.json").write_text(json.dumps(config))
    cmd = [TOOL, args[0], "--config", str(case / "config.json"), "--out", str(case / "out")] + args[1:]
    if data is not None:
        (case / "data.csv").write_text(data)
        cmd += ["--data", str(case / "data.csv")]
    proc = subprocess.run(cmd, capture_output=True, text=True, timeout=300)
    if proc.returncode != expect:
        failures.append(f"{label}: exit {proc.returncode}, expected {expect}\n{proc.stderr}")
        return None
    report = json.loads(proc.stdout)
    name = schema_name or (args[0] if expect == 0 else "error")
    try:
        jsonschema.validate(report, schema(name))
    except jsonschema.ValidationError as e:
        failures.append(f"{label}: {name} schema violation: {e.message} at {list(e.absolute_path)}")
    if expect == 0:
        on_disk = json.loads((case / "out" / "report.json").read_text())
        if on_disk != report:
            failures.append(f"{label}: report.json differs from stdout")
    return report, case / "out"


def check(cond, message):
    if not cond:
        failures.append(message)


def fixture(seed, clusters=8, size=5, shift=None):
    rng = random.Random(seed)
    lines = ["cluster,y,x1"]
    for i in range(clusters):
        v = rng.gauss(0, 1) + (shift if i == 2 and shift else 0.0)
        for _ in range(size):
            x = rng.gauss(0, 1)
            lines.append(f"area {i},{1 + 0.5 * x + v + rng.gauss(0, 1)!r},{x!r}")
    return "\n".join(lines) + "\n"


def main():
    shutil.rmtree(WORK, ignore_errors=True)
    WORK.mkdir(parents=True)
    data = fixture(1)
    shifted = fixture(2, shift=8.0)
    subset = [f"area {i}" for i in range(8)]
    equal = "cluster,y\n" + "".join(f"area {i},{y}\n" for i in range(8) for y in (1, 2, 4, 3.5))

    run("fit", ["fit"], {"estimator": "reml"}, data)
    run("fit_known", ["fit"], {"estimator": "known", "delta": [1, 1]}, data)
    run("fit_h3", ["fit"], {"estimator": "henderson3", "intercept": False}, data)
    got = run("predict", ["predict"], {}, data)
    if got:
        check((got[1] / "predictions.csv").read_text().startswith("cluster,mu_hat,se_marginal,se_conditional\n"),
              "predict: predictions.csv header")
    run("test", ["test"], {"test": {"L": "within-subset-contrasts", "subset": subset}}, data)
    run("test_rows", ["test", "--alpha", "0.1"], {"law": "marginal", "test": {"L": [[1, -1, 0, 0, 0, 0, 0, 0]]}}, data)
    got = run("tukey", ["tukey"], {"tukey": {"subset": subset[:5]}}, shifted)
    if got:
        stats = [c["statistic"] for c in got[0]["contrasts"]]
        check(stats == sorted(stats, reverse=True), "tukey: contrasts not sorted by statistic")
    got = run("project", ["project"], {"test": {"L": "within-subset-contrasts", "subset": ["area 2", "area 0"]},
                                       "project": {"designated": ["area 2"]}}, shifted)
    if got:
        check(abs(got[0]["retest"]["p_value"] - 0.05) < 1e-6, "project: re-test p-value is not alpha")

    sim = {"seed": 11, "simulate": {"m": 10, "n_i": 5, "sigma_v2": 8, "sigma_e2": 2, "reps": 100, "pilot_reps": 50}}
    got = run("simulate_coverage", ["simulate"], sim)
    again = run("simulate_coverage_again", ["simulate", "--threads", "2"], sim)
    if got and again:
        a, b = (got[1] / "coverage.csv").read_text(), (again[1] / "coverage.csv").read_text()
        check(a.splitlines()[0] == COVERAGE_HEADER, "simulate: coverage.csv header changed")
        check(a == b, "simulate: coverage.csv not deterministic across thread counts")
    got = run("simulate_power", ["simulate", "--seed", "3"],
              {"simulate": {"kind": "power_linear", "m": 10, "reps": 50, "pilot_reps": 20, "estimator": "known"}})
    if got:
        check((got[1] / "power.csv").read_text().splitlines()[0] == POWER_HEADER, "simulate: power.csv header changed")
    run("simulate_tukey", ["simulate"],
        {"seed": 4, "simulate": {"kind": "power_tukey", "m": 8, "reps": 30, "pilot_reps": 10, "grid": [0, 2]}})
    run("simulate_clusterwise", ["simulate"],
        {"seed": 5, "simulate": {"kind": "clusterwise", "m": 10, "reps": 50, "estimator": "known", "pilot_reps": 10}})
    run("simulate_marginal_table", ["simulate", "--fast"],
        {"seed": 6, "simulate": {"kind": "marginal_table", "reps": 40, "estimator": "known",
                                 "cells": [{"m": 4, "n_i": 3}, {"m": 6, "n_i": [2, 2, 2, 9, 9, 9]}]}})

    # Failure paths.
    got = run("missing_y", ["fit"], {}, "cluster,y\na,1\na,2\nb,\nb,3\n", expect=2)
    if got:
        check("row 3" in got[0]["error"]["message"], "missing y: message does not name the row")
    run("unknown_key", ["fit"], {"estimater": "reml"}, data, expect=2)
    run("bad_alpha", ["fit", "--alpha", "1.5"], {}, data, expect=2)
    run("tukey_small_subset", ["tukey"], {"tukey": {"subset": ["area 0"]}}, data, expect=2)
    run("h3_intercept", ["fit"], {"estimator": "henderson3"}, data, expect=3)
    run("nothing_to_project", ["project"], {"test": {"L": "within-subset-contrasts", "subset": ["area 2", "area 0"],
                                                     "a": [0] * 8},
                                            "project": {"designated": ["area 2"]}}, equal, expect=4)
    run("simulate_no_seed", ["simulate"], {"simulate": {"reps": 10}}, expect=2)
    proc = subprocess.run([TOOL, "fit"], capture_output=True, text=True)
    check(proc.returncode == 2, f"missing --config: exit {proc.returncode}, expected 2")

    if failures:
        print("\n".join(failures))
        return 1
    print("all reports validate")
    return 0


if __name__ == "__main__":
    sys.exit(main())
