"""How the always-on bias shrinks with the learning rate on the two toy chains.

For each eta the phase length is tau = ceil(eta^-1/2).  The deterministic
contraction started at its fixed point gives a bias of order eta^2; the
binary Markov chain started away from equilibrium decays more slowly.

    python3 demos/bias_scaling.py [--trials 10000]
"""
import argparse

import numpy as np

from flexcl.phases import PhaseLengthLaw
from flexcl.theory import (ToyDeterministicSpec, ToyMarkovSpec, measure_bias, scaling_fit,
                           slope_interval, tau_for_eta)

parser = argparse.ArgumentParser()
parser.add_argument("--trials", type=int, default=10_000)
parser.add_argument("--seed", type=int, default=0)
args = parser.parse_args()

etas = [0.1, 0.05, 0.025, 0.0125]
rng = np.random.default_rng(args.seed)

for name, make, law_kind, n in [
    ("deterministic", lambda eta, tau: ToyDeterministicSpec(alpha=1.0, eta=eta, tau=tau),
     "deterministic", 1),
    ("stochastic", lambda eta, tau: ToyMarkovSpec(alpha=0.5, eta=eta, tau=tau, z0=0.0),
     "geometric", args.trials),
]:
    rows = []
    print(f"\n{name} toy")
    print("   eta  tau        bias    envelope")
    for eta in etas:
        tau = tau_for_eta(eta)
        spec = make(eta, tau)
        m = measure_bias(spec, PhaseLengthLaw(law_kind, tau), n, rng)
        rows.append(m)
        print(f"{eta:6.4f} {tau:4d}  {m.bias:10.3e}  {spec.envelope():10.3e}")
    slope = scaling_fit([(m.eta, m.bias) for m in rows])[0]
    line = f"log-log slope {slope:.3f}"
    if n > 1:
        lo, hi = slope_interval(rows, seed=args.seed)
        line += f"  (95% interval {lo:.3f} .. {hi:.3f})"
    print(line)
