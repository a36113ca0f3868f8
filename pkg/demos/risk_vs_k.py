"""How fast does the worst-round error grow with the number of queries?

For each k the default Gaussian schedule (noise variance sqrt(k-1) sigma^2 on
every round but the last) plays against the greedy and the Bayes sign
adversaries.  The table compares the estimated max-round MSE with the upper
bound 2 (sqrt(k-1) + 1) sigma^2 and the minimax lower bound, and the fitted
slope in log-log coordinates should sit near one half.

    python3 demos/risk_vs_k.py --reps 4000
"""

import argparse

import numpy as np

from adalab.adversaries import AdversaryConfig
from adalab.harness import ExperimentConfig, sweep
from adalab.mechanisms import default_schedule


def main():
    p = argparse.ArgumentParser(description=__doc__.split("\n\n")[0])
    p.add_argument("--ks", type=int, nargs="+", default=[2, 4, 8, 16, 32, 64])
    p.add_argument("--reps", type=int, default=4000)
    p.add_argument("--workers", type=int, default=None)
    args = p.parse_args()

    for kind in ("k_step_greedy", "bayes_sign"):
        configs = [ExperimentConfig(k, 1.0, default_schedule(k, 1.0), AdversaryConfig(kind, 1.0),
                                    replications=args.reps, seed=k)
                   for k in args.ks]
        reports = sweep(configs, args.workers)
        print(f"\n{kind}")
        print(f"{'k':>5} {'max MSE':>10} {'± SE':>8} {'upper':>8} {'lower':>8}")
        for r in reports:
            b = r.bound_report
            print(f"{r.config.k:>5} {r.max_mse:>10.4f} {r.max_mse_se:>8.4f} "
                  f"{b.k_step_mse:>8.3f} {b.minimax_lower:>8.3f}")
        ks = np.array([r.config.k for r in reports if r.config.k > 2], dtype=float)
        risk = np.array([r.max_mse for r in reports if r.config.k > 2])
        if ks.size >= 2:
            slope = np.polyfit(np.log(ks), np.log(risk), 1)[0]
            print(f"log-log slope for k > 2: {slope:.3f}")


if __name__ == "__main__":
    main()
