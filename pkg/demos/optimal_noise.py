"""Which noise law hides the sign of a Gaussian statistic best?

For a variance budget w^2 the LP over discretized noise laws minimizes the
margin E[s_hat X] an adversary gets from guessing sign(X) after seeing X + Z.
The script compares the LP optimum with Gaussian noise, uniform noise and the
closed-form lower bound, then draws a coarse histogram of the optimal law.

    python3 demos/optimal_noise.py --w 0.5 2 10
"""

import argparse
import math

import numpy as np

from adalab import signopt
from adalab.mechanisms import NoiseSpec
from adalab.signopt import GridConfig


def histogram(dist, w, bins=24, width=50):
    a = math.sqrt(3) * w
    edges = np.linspace(-1.5 * a, 1.5 * a, bins + 1)
    mass, _ = np.histogram(dist.grid, bins=edges, weights=dist.weights)
    top = mass.max()
    for lo, m in zip(edges, mass):
        print(f"  {lo:>8.2f} | {'#' * int(round(width * m / top))}")


def main():
    p = argparse.ArgumentParser(description=__doc__.split("\n\n")[0])
    p.add_argument("--w", type=float, nargs="+", default=[0.5, 2.0, 10.0])
    p.add_argument("--sigma", type=float, default=1.0)
    p.add_argument("--n-points", type=int, default=1001)
    args = p.parse_args()

    s = args.sigma
    print(f"{'w':>6} {'LP':>9} {'gaussian':>9} {'uniform':>9} {'lower':>9}")
    for w in args.w:
        dist, obj = signopt.solve_optimal_noise(s, w, GridConfig(n_points=args.n_points))
        uni = signopt.margin_risk(NoiseSpec.uniform(w), s) if w > 0 else signopt.expected_abs_normal(s)
        print(f"{w:>6.2f} {obj / 2:>9.5f} {signopt.gaussian_margin(s, w):>9.5f} "
              f"{uni:>9.5f} {signopt.margin_lower_bound(s, w):>9.5f}")
        if w > 0:
            histogram(dist, w)
        if math.sqrt(3) * w > 4 * s:
            print(f"  distance to uniform on {4 * s:g}-wide bins: "
                  f"{signopt.tv_to_uniform(dist, w, 4 * s):.3f}")
        print()


if __name__ == "__main__":
    main()
