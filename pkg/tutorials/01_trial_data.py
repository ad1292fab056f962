"""Simulate a trial, write it to CSV, read it back and validate it."""

import tempfile
from pathlib import Path

import numpy as np

from twostage_tmle import SimParams, generate_trial, load_trial_csv, validate, write_trial_csv

trial = generate_trial(SimParams(), seed=7)
print("clusters:", trial.j, "control/treated:", trial.arm_counts())

c = trial.clusters[0]
print(c.id, "arm", c.a, "n", c.n)
print("share measured:", c.delta.mean().round(3))
print("prevalence among measured:", c.y1[c.delta == 1].mean().round(3))

with tempfile.TemporaryDirectory() as tmp:
    path = Path(tmp) / "trial.csv"
    write_trial_csv(trial, path)
    print(path.read_text().splitlines()[0])  # header
    again = load_trial_csv(path)

assert all(np.array_equal(a.y2, b.y2) for a, b in zip(trial.clusters, again.clusters))
report = validate(again)
print("valid:", report.ok, "violations:", len(report.violations))
