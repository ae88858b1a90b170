"""
Looking inside: attention over activities and a w_c sweep
=========================================================

Runs the command line tool end to end in a scratch directory, then reads
back the dumped attention head and the sweep table.
"""
import csv
import tempfile
from pathlib import Path

import numpy as np

from hgarn.cli import main

work = Path(tempfile.mkdtemp())
small = ["--set", "d=16", "--set", "d_u=8", "--set", "d_t=8", "--set", "d_g=8",
         "--set", "hidden=32", "--set", "lr=0.005", "--set", "epochs=4"]

main(["synth", "--out", str(work / "raw.jsonl"), "--users", "15", "--locations", "90",
      "--activities", "6", "--trajectories", "20", "--length", "7"])
main(["prepare", str(work / "raw.jsonl"), "--out", str(work / "ds.jsonl")])
main(["graph", str(work / "ds.jsonl"), "--out", str(work / "g.json")])
main(["train", str(work / "ds.jsonl"), str(work / "g.json"), "--out", str(work / "model")] + small)

# the first |C| rows of the activity layer: who attends to whom
main(["inspect-attention", str(work / "model"), str(work / "ds.jsonl"), str(work / "g.json"),
      "--layer", "act", "--head", "0", "--out", str(work / "att.csv")])
rows = list(csv.reader(open(work / "att.csv")))
names = [r[0] for r in rows]
att = np.array([[float(x) for x in r[1:]] for r in rows])
c = len(names)
print("\nattention to other activities vs. to the activity's own localized copy:")
for i, name in enumerate(names):
    print(f"  {name:4s} others {att[i, :c].sum() - att[i, i]:.2f}  self {att[i, i]:.2f}  copy {att[i, c + i]:.2f}")

main(["sweep", str(work / "ds.jsonl"), "--param", "w_c", "--grid", "0.5,0.7,1.0",
      "--out", str(work / "sweep.csv")] + small)
for r in csv.DictReader(open(work / "sweep.csv")):
    print(f"  w_c={r['value']}: main R@1 {float(r['main_R@1']):.3f}, R@5 {float(r['main_R@5']):.3f}")
