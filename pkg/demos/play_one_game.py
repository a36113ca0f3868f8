"""Play a single adaptive game and print the transcript round by round.

The default-schedule Gaussian player answers a k_step_greedy adversary.  Each
row shows the query the adversary picked from the public releases so far, the
noisy answer, and the hidden statistic that answer was built from.

    python3 demos/play_one_game.py --k 6 --kind bayes_sign
"""

import argparse

import numpy as np

from adalab.adversaries import KINDS, AdversaryConfig
from adalab.harness import ExperimentConfig, run_game
from adalab.mechanisms import default_schedule


def main():
    p = argparse.ArgumentParser(description=__doc__.split("\n\n")[0])
    p.add_argument("--k", type=int, default=6)
    p.add_argument("--sigma", type=float, default=1.0)
    p.add_argument("--kind", choices=[k for k in KINDS if k != "fixed_sequence"],
                   default="k_step_greedy")
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args()

    config = ExperimentConfig(args.k, args.sigma, default_schedule(args.k, args.sigma),
                              AdversaryConfig(args.kind, args.sigma), replications=1,
                              seed=args.seed)
    history = run_game(config, 0)
    print(f"{args.kind} against the default Gaussian schedule, k={args.k}")
    print(f"{'round':>5} {'noise sd':>9} {'release':>10} {'statistic':>10}  covariances with history")
    for i, (s, priv) in enumerate(zip(history.shared.rounds, history.player_private), start=1):
        cov = np.array2string(np.asarray(s.query.cov_with_history), precision=3,
                              suppress_small=True)
        print(f"{i:>5} {float(s.noise.scale):>9.3f} {s.release:>10.4f} {priv.phi:>10.4f}  {cov}")
    final = history.player_private[-1]
    print(f"\nThe last round is answered without noise, so its error is the statistic "
          f"itself: {final.phi:+.4f}.")


if __name__ == "__main__":
    main()
