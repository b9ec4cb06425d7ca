"""Forward-Forward on MNIST with paired and with single-phase updates.

The paired baseline sees one positive and one negative example per Adam
step; the sign-flip variant sees just one of them, chosen with probability
b = 0.5, and reweights.  Both get the same number of forward passes.

Uses the IDX files under $FLEXCL_MNIST_DIR when set, otherwise the small
MNIST sample bundled with mlxtend.

    python3 demos/ff_mnist.py [--steps 20000] [--hidden 100]
"""
import argparse

import numpy as np

from flexcl.data import load_mnist_subset
from flexcl.experiments import train_ff
from flexcl.phases import Mode, ScheduleConfig

parser = argparse.ArgumentParser()
parser.add_argument("--steps", type=int, default=20_000)
parser.add_argument("--hidden", type=int, default=100)
parser.add_argument("--seed", type=int, default=0)
args = parser.parse_args()

train, test = load_mnist_subset(4000, 1000, seed=args.seed)
majority = np.bincount(train.labels).argmax()
print(f"{len(train)} training / {len(test)} test images; "
      f"majority-class error {np.mean(test.labels != majority):.3f}")

for mode in (Mode.TWO_TERM_CDK, Mode.ISD_END_OF_PHASE):
    sched = ScheduleConfig(mode=mode, b=0.5, tau=1, k=1, eta=0.002, total_budget=args.steps,
                           budget_unit="time_steps", record_every=args.steps // 4)
    result, _ = train_ff(sched, args.seed, train, test, hidden=(args.hidden, args.hidden))
    steps, err = result.metric_series("time_step")
    print(f"{mode.value:18s} " + "  ".join(f"{s}:{e:.3f}" for s, e in zip(steps, err)))
