"""The one-step attack against a fixed noise level.

After k-1 orthogonal queries answered with noise variance w^2, one final
query correlated with all of them is answered exactly.  Its conditional
squared bias is pinned between (k-1) sigma^4 / (w^2 + sigma^2) and
(k-1) sigma^4 / w^2.  This script estimates it for several noise levels.

    python3 demos/sharpness.py --k 10 --reps 100000
"""

import argparse
import math

from adalab.adversaries import AdversaryConfig
from adalab.harness import ExperimentConfig, estimate_risk
from adalab.mechanisms import MechanismConfig


def main():
    p = argparse.ArgumentParser(description=__doc__.split("\n\n")[0])
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--reps", type=int, default=100_000)
    p.add_argument("--w2", type=float, nargs="+", default=[1.0, 3.0, 10.0, 30.0, 100.0])
    args = p.parse_args()

    k = args.k
    print(f"{'w^2':>7} {'lower':>9} {'estimate':>9} {'± SE':>8} {'upper':>9}")
    for w2 in args.w2:
        mech = MechanismConfig("gaussian_schedule", (math.sqrt(w2),) * (k - 1) + (0.0,))
        cfg = ExperimentConfig(k, 1.0, mech, AdversaryConfig("orthogonal_then_one_step", 1.0),
                               replications=args.reps, seed=int(w2 * 1000))
        r = estimate_risk(cfg).per_round[-1]
        print(f"{w2:>7.1f} {(k - 1) / (w2 + 1):>9.5f} {r.cond_bias_sq_hat:>9.5f} "
              f"{r.cond_bias_sq_se:>8.5f} {(k - 1) / w2:>9.5f}")


if __name__ == "__main__":
    main()
