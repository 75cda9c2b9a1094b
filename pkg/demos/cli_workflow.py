"""
Command-line workflow
=====================

Write a simulated dataset with a matching model specification, fit it with
``famm fit`` and read the artifacts back. The same steps from a shell::

    famm simulate --scenario 2 --M 10 --ni 3 --write-data sim/
    famm fit --spec sim/spec.json --out fit/
"""

import json
from pathlib import Path

import numpy as np

from famm.cli import main
from famm.io import read_term_estimate

work = Path("cli_demo")
assert main(["simulate", "--scenario", "2", "--M", "10", "--ni", "3", "--write-data", str(work / "sim")]) == 0
print((work / "sim" / "spec.json").read_text()[:300], "...")

assert main(["fit", "--spec", str(work / "sim" / "spec.json"), "--out", str(work / "fit")]) == 0
summary = json.loads((work / "fit" / "summary.json").read_text())
print("spec hash", summary["spec_hash"][:12], "edf", {k: round(v, 2) for k, v in summary["edf"].items()})

header, data = read_term_estimate(work / "fit" / "terms" / "intercept_t.csv")
print(header)
print(np.round(data[:5], 4))
print(sorted(p.name for p in (work / "fit" / "plots").iterdir()))
