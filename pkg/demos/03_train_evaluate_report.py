"""
Train, evaluate and report
==========================

Drives the ``mvvt`` command line end to end on a desk-sized radish dataset:
generate, train an age model, evaluate on the held-out plant, print the
table. About a minute and a half on one core.
"""

import sys
import tempfile
from pathlib import Path

from mvvt.cli import main

work = Path(sys.argv[1]) if len(sys.argv) > 1 else Path(tempfile.mkdtemp())
data, runs = work / "radish64", work / "runs"


def mvvt(*args):
    print("\n$ mvvt", " ".join(args))
    code = main(list(args))
    if code:
        sys.exit(code)


mvvt("generate", "--config", "desk", "--out", str(data))
for task in ("age", "leaf_count"):
    mvvt("train", "--config", "desk", "--data", str(data), "--task", task, "--out", str(runs / f"train_{task}"))
    mvvt("eval", "--config", "desk", "--data", str(data), "--task", task,
         "--checkpoint", str(runs / f"train_{task}"), "--out", str(runs / f"eval_{task}"))

# merge the per-task metric files into one table (one crop here, so the
# average row repeats it)
mvvt("report", str(runs / "eval_age" / "metrics.csv"), str(runs / "eval_leaf_count" / "metrics.csv"))

# every output directory carries the resolved config that produced it
print((runs / "train_age" / "resolved.cfg").read_text())
