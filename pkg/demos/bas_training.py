"""Train a 16-hidden-unit RBM on 4x4 Bars-And-Stripes under each schedule.

Runs CD-100 and the three sign-flip schedules at fixed learning rates and
prints the exact negative log-likelihood as training proceeds.  The default
budget matches the acceptance run and takes under a minute.

    python3 demos/bas_training.py [--phases 100000] [--seed 0]
"""
import argparse
import math

from flexcl.data import generate_bas
from flexcl.experiments import train_rbm
from flexcl.phases import Mode, ScheduleConfig

parser = argparse.ArgumentParser()
parser.add_argument("--phases", type=int, default=100_000)
parser.add_argument("--seed", type=int, default=0)
args = parser.parse_args()

# rates picked by a coarse line search at the full budget
runs = [
    (Mode.TWO_TERM_CDK, 100, 0.0078),
    (Mode.ISD_END_OF_PHASE, 100, 0.0034),
    (Mode.ISD_AOL_FIXED_T, 100, 0.0034),
    (Mode.ISD_AOL_RANDOM_T, 150, 0.0034),
]

n_patterns = len(generate_bas(4))
print(f"NLL floor ln {n_patterns} = {math.log(n_patterns):.4f}\n")
for mode, tau, lr in runs:
    sched = ScheduleConfig(mode=mode, b=0.5, tau=tau, k=100, eta=lr, total_budget=args.phases,
                           budget_unit="phases", record_every=max(1, args.phases // 8))
    result, _ = train_rbm(sched, args.seed)
    steps, nll = result.metric_series("time_step")
    trace = "  ".join(f"{v:.2f}" for v in nll)
    print(f"{mode.value:18s} lr={lr:<7g} {trace}   ({result.time_steps} time steps)")
