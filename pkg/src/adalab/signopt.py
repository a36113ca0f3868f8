"""Noise that best hides the sign of a Gaussian signal.

For a signal ``X ~ N(0, sigma**2)`` observed through ``X + Z`` the best
sign guess ``s_hat = sign(E[X | X + Z])`` achieves margin ``E[s_hat X]``,
which equals half the L1 norm of ``A p`` where ``p`` is the noise law and
``A`` is convolution with the kernel ``K(u) = 2 u n_sigma(u)``::

    (A f)(x) = integral f(x + u) K(u) du.

This module evaluates ``A`` and the margin, solves the discretized problem
of minimizing the margin under a variance budget as a linear program, and
provides the closed-form lower bound and its dual certificate.
"""

from __future__ import annotations

import dataclasses
import warnings
from typing import Callable, Optional

import numpy as np
import scipy.sparse as sp
from scipy import optimize, stats

SQRT3 = np.sqrt(3.0)
KERNEL_CUTOFF = 8.0  # in units of sigma
PANELS = 16
PANEL_ORDER = 32


class InfeasibleProblemError(ValueError):
    """The discretized noise problem has no feasible point."""


class SolverError(RuntimeError):
    """The LP solver stopped without an optimal solution."""


class TruncationError(ValueError):
    """Tabulating a noise law on a grid dropped too much probability."""


class ResolutionWarning(UserWarning):
    """Grid spacing too coarse for accurate quadrature of the kernel."""


@dataclasses.dataclass(frozen=True, eq=False)
class DiscretizedDistribution:
    """Probability weights on a uniform grid.

    The weights are point masses at the grid points (not density values)
    and are normalized to sum to one on construction.
    """

    grid_min: float
    grid_max: float
    n_points: int
    weights: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float).reshape(-1)
        if w.size != self.n_points:
            raise ValueError(f"expected {self.n_points} weights, got {w.size}")
        if self.n_points < 1:
            raise ValueError("n_points must be >= 1")
        if self.n_points > 1 and not self.grid_max > self.grid_min:
            raise ValueError("grid_max must exceed grid_min")
        if np.any(w < 0) or not np.all(np.isfinite(w)):
            raise ValueError("weights must be finite and nonnegative")
        total = w.sum()
        if not total > 0:
            raise ValueError("weights must have positive total mass")
        w = w / total
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)

    @property
    def grid(self) -> np.ndarray:
        return np.linspace(self.grid_min, self.grid_max, self.n_points)

    @property
    def spacing(self) -> float:
        if self.n_points == 1:
            return 0.0
        return (self.grid_max - self.grid_min) / (self.n_points - 1)

    def mean(self) -> float:
        return float(self.weights @ self.grid)

    def variance(self) -> float:
        x = self.grid - self.mean()
        return float(self.weights @ (x * x))

    def support(self, atol: float = 0.0):
        keep = self.weights > atol
        return self.grid[keep], self.weights[keep]

    def to_dict(self) -> dict:
        return {"grid_min": self.grid_min, "grid_max": self.grid_max,
                "n_points": self.n_points, "weights": self.weights.tolist()}

    def __eq__(self, other):
        if not isinstance(other, DiscretizedDistribution):
            return NotImplemented
        return self.to_dict() == other.to_dict()

    __hash__ = None

    @classmethod
    def from_dict(cls, d: dict) -> "DiscretizedDistribution":
        return cls(float(d["grid_min"]), float(d["grid_max"]), int(d["n_points"]),
                   np.asarray(d["weights"], dtype=float))

    @classmethod
    def point_mass(cls, at: float = 0.0) -> "DiscretizedDistribution":
        return cls(at, at, 1, np.ones(1))


@dataclasses.dataclass(frozen=True)
class DualCertificate:
    """Dual variables of the noise problem and the lower bound they prove.

    ``objective_bound`` bounds ``||A p||_1`` from below for every noise law
    with variance at most ``w**2``; the margin bound is half of it.
    """

    u1: float
    v1: float
    v2: float
    objective_bound: float
    w: float

    def __post_init__(self):
        if self.u1 < 0:
            raise ValueError(f"u1 must be >= 0, got {self.u1}")
        expected = -self.u1 * self.w**2 + self.v1
        if not np.isclose(self.objective_bound, expected, rtol=1e-12, atol=1e-15):
            raise ValueError("objective_bound must equal -u1 w**2 + v1")


def kernel(u, sigma: float):
    """``K(u) = 2 u n_sigma(u)``, the kernel of the operator ``A``."""
    u = np.asarray(u, dtype=float)
    return 2.0 * u * np.exp(-0.5 * (u / sigma) ** 2) / (sigma * np.sqrt(2 * np.pi))


def operator_A_apply(f_grid, grid, sigma: float) -> np.ndarray:
    """Apply ``A`` to a function sampled on a uniform grid.

    Uses the trapezoid rule over the grid, which converges geometrically for
    the smooth, rapidly decaying integrand.  Values are accurate at points at
    least ``8 sigma`` away from both ends of the grid; closer to the ends the
    integral is truncated by the grid.
    """
    if not sigma > 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    f = np.asarray(f_grid, dtype=float)
    x = np.asarray(grid, dtype=float)
    if f.shape != x.shape or x.ndim != 1:
        raise ValueError("f_grid and grid must be 1-D arrays of equal length")
    if x.size < 2:
        raise ValueError("grid needs at least two points")
    h = x[1] - x[0]
    if not np.allclose(np.diff(x), h, rtol=1e-9, atol=0):
        raise ValueError("grid must be uniform and increasing")
    if h > sigma / 4:
        warnings.warn(f"grid spacing {h:.4g} exceeds sigma/4 = {sigma / 4:.4g}",
                      ResolutionWarning, stacklevel=2)
    reach = int(np.ceil(KERNEL_CUTOFF * sigma / h))
    offsets = h * np.arange(-reach, reach + 1)
    taps = kernel(offsets, sigma) * h
    padded = np.concatenate([np.zeros(reach), f, np.zeros(reach)])
    # (A f)(x_i) = sum_m f(x_i + m h) K(m h) h
    return np.correlate(padded, taps, mode="valid")


def _half_normal_nodes(sigma: float):
    """Gauss-Legendre panel nodes and weights on ``[0, 8 sigma]``."""
    t, wt = np.polynomial.legendre.leggauss(PANEL_ORDER)
    edges = np.linspace(0.0, KERNEL_CUTOFF * sigma, PANELS + 1)
    half = 0.5 * np.diff(edges)
    mid = 0.5 * (edges[1:] + edges[:-1])
    nodes = (mid[:, None] + half[:, None] * t[None, :]).ravel()
    weights = (half[:, None] * wt[None, :]).ravel()
    return nodes, weights


def operator_A_callable(f: Callable, x, sigma: float) -> np.ndarray:
    """Apply ``A`` to a callable by Gauss-Legendre panels on ``[0, 8 sigma]``.

    Evaluates ``integral_0^inf t q(t) [f(x + t) - f(x - t)] dt`` with ``q``
    the half-normal density.
    """
    x = np.asarray(x, dtype=float)
    t, wt = _half_normal_nodes(sigma)
    q = 2.0 * stats.norm.pdf(t, scale=sigma)
    xx = x[..., None]
    return np.sum(wt * t * q * (f(xx + t) - f(xx - t)), axis=-1)


def _output_grid(lo: float, hi: float, h: float, sigma: float) -> np.ndarray:
    """Evaluation points for ``A p``, twice as fine as the decision grid."""
    pad = KERNEL_CUTOFF * sigma
    step = min(h / 2, sigma / 16) if h > 0 else sigma / 512
    n = int(np.ceil((hi - lo + 2 * pad) / step)) + 1
    return lo - pad + step * np.arange(n)


def _trapezoid_weights(n: int, step: float) -> np.ndarray:
    q = np.full(n, step)
    q[0] = q[-1] = step / 2
    return q


def tabulate(noise, sigma: float, n_points: int = 2001,
             half_width: Optional[float] = None) -> DiscretizedDistribution:
    """Discretize a declared noise law onto a symmetric uniform grid.

    Each grid point receives the probability of its cell.  Raises
    TruncationError when more than 1e-10 of the mass falls off the grid.
    """
    family = noise.family
    if family == "tabulated":
        return noise.table
    if family == "point_mass" or (family in ("gaussian", "uniform") and noise.scale == 0):
        return DiscretizedDistribution.point_mass(float(noise.mean))
    w = float(noise.scale)
    mean = float(noise.mean)
    if half_width is None:
        half_width = SQRT3 * w if family == "uniform" else KERNEL_CUTOFF * w
    x = mean + np.linspace(-half_width, half_width, n_points)
    h = x[1] - x[0]
    edges = np.concatenate([[x[0] - h / 2], x + h / 2])
    if family == "gaussian":
        cdf = stats.norm.cdf(edges, loc=mean, scale=w)
    else:
        a = SQRT3 * w
        cdf = np.clip((edges - mean + a) / (2 * a), 0.0, 1.0)
    mass = np.diff(cdf)
    lost = 1.0 - mass.sum()
    if lost > 1e-10:
        raise TruncationError(
            f"grid of half width {half_width:.4g} drops {lost:.3g} of the noise mass")
    return DiscretizedDistribution(x[0], x[-1], n_points, mass)


def _cells_for(noise, sigma: float, n_points: int) -> int:
    """Cell count keeping a tabulated continuous law finer than ``sigma / 8``.

    A coarse table is a comb of point masses that the sign guess can
    resolve, which would overstate the margin of the continuous law.
    """
    if noise.family not in ("gaussian", "uniform"):
        return n_points
    half = (SQRT3 if noise.family == "uniform" else KERNEL_CUTOFF) * float(noise.scale)
    return max(n_points, int(np.ceil(16 * half / sigma)) + 1)


def margin_risk(p, sigma: float, n_points: int = 2001) -> float:
    """``E[s_hat X]`` for the best sign guess against noise ``p``.

    ``p`` is a DiscretizedDistribution or a NoiseSpec; NoiseSpecs are first
    tabulated with ``n_points`` cells, or more if needed to keep the cells
    narrower than ``sigma / 8``.  The value is ``0.5 ||A p||_1``
    integrated on a grid twice as fine as the noise grid.
    """
    if not sigma > 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    if not isinstance(p, DiscretizedDistribution):
        p = tabulate(p, sigma, _cells_for(p, sigma, n_points))
    x, wts = p.support()
    z = _output_grid(x.min(), x.max(), p.spacing, sigma)
    step = z[1] - z[0]
    quad = _trapezoid_weights(z.size, step)
    total = 0.0
    for chunk in np.array_split(np.arange(z.size), max(1, z.size * x.size // 4_000_000)):
        ap = kernel(x[None, :] - z[chunk, None], sigma) @ wts
        total += quad[chunk] @ np.abs(ap)
    return 0.5 * float(total)


def margin_lower_bound(sigma: float, w: float) -> float:
    """Smallest margin any noise with variance ``w**2`` can force.

    ``sigma**2/(sqrt(3) w) - sigma**4/(2 sqrt(3) w**3)`` when ``w >= sigma``
    and ``sigma/(2 sqrt(3))`` below that.
    """
    if not sigma > 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    if w < 0:
        raise ValueError(f"w must be >= 0, got {w}")
    if w < sigma:
        return sigma / (2 * SQRT3)
    return sigma**2 / (SQRT3 * w) - sigma**4 / (2 * SQRT3 * w**3)


def dual_certificate(sigma: float, w: float) -> DualCertificate:
    """Closed-form dual point certifying the margin lower bound for ``w >= sigma``."""
    if not sigma > 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    if w < sigma:
        raise ValueError(f"certificate needs w >= sigma, got w={w}, sigma={sigma}")
    u1 = sigma**2 / (SQRT3 * w**3)
    v1 = SQRT3 * sigma**2 / w - sigma**4 / (SQRT3 * w**3)
    return DualCertificate(u1=u1, v1=v1, v2=0.0, objective_bound=-u1 * w**2 + v1, w=w)


@dataclasses.dataclass(frozen=True)
class GridConfig:
    """Decision grid for the noise LP: ``n_points`` over ``[-half_width, half_width]``.

    ``half_width=None`` means ``max(8 sigma, 2 sqrt(3) w)``.
    """

    n_points: int = 2001
    half_width: Optional[float] = None

    def resolve(self, sigma: float, w: float) -> tuple[float, int]:
        L = self.half_width
        if L is None:
            L = max(KERNEL_CUTOFF * sigma, 2 * SQRT3 * w)
        if L < max(6 * sigma, 2 * SQRT3 * w):
            raise ValueError(
                f"grid half width {L:.4g} must be at least max(6 sigma, 2 sqrt(3) w)")
        if self.n_points < 2:
            raise ValueError("n_points must be >= 2")
        return float(L), int(self.n_points)


def solve_standard_lp(c, E, b, max_iter: Optional[int] = None) -> np.ndarray:
    """Minimize ``c @ z`` subject to ``E @ z = b`` and ``z >= 0``."""
    options = {} if max_iter is None else {"maxiter": max_iter}
    res = optimize.linprog(c, A_eq=E, b_eq=b, bounds=(0, None),
                           method="highs-ds", options=options)
    if res.status == 2:
        raise InfeasibleProblemError(f"LP infeasible: {res.message}")
    if res.status != 0:
        raise SolverError(f"LP stopped after {res.nit} iterations: {res.message}")
    return res.x


def solve_optimal_noise(sigma: float, w: float, grid_config: GridConfig = GridConfig(),
                        max_iter: Optional[int] = None):
    """Noise law on the grid minimizing ``||A p||_1`` under ``Var <= w**2``.

    Only symmetric laws are searched: the problem is convex and invariant
    under reflection, so symmetrizing any optimum keeps it optimal, and a
    symmetric law automatically has mean zero.  ``A p`` is odd for symmetric
    ``p``, so the objective is twice its integral over ``z >= 0``.

    Returns the optimal DiscretizedDistribution and the primal objective
    ``||A p||_1``; the margin is half the objective.
    """
    if not sigma > 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    if w < 0:
        raise ValueError(f"w must be >= 0, got {w}")
    L, n = grid_config.resolve(sigma, w)
    x = np.linspace(-L, L, n)
    h = x[1] - x[0]
    first = n // 2
    xs = x[first:]                      # nonnegative half of the grid
    at_zero = np.isclose(xs[0], 0.0, atol=1e-12 * h)
    if at_zero:
        xs[0] = 0.0
    mult = np.where(xs == 0.0, 1.0, 2.0)  # each off-zero variable is mass at +-x
    step = h / 2
    zf = step * np.arange(int(np.ceil((L + KERNEL_CUTOFF * sigma) / step)) + 1)
    cut = KERNEL_CUTOFF * sigma
    diff = xs[None, :] - zf[:, None]
    dense = kernel(diff, sigma) * (np.abs(diff) <= cut)
    mirror_diff = -xs[None, :] - zf[:, None]
    dense += np.where(xs[None, :] > 0,
                      kernel(mirror_diff, sigma) * (np.abs(mirror_diff) <= cut), 0.0)
    Kmat = sp.csr_matrix(dense)
    m, M = xs.size, zf.size
    quad = 2.0 * _trapezoid_weights(M, step)
    c = np.concatenate([np.zeros(m), quad, quad, [0.0]])
    eye = sp.identity(M, format="csr")
    E = sp.vstack([
        sp.hstack([Kmat, -eye, eye, sp.csr_matrix((M, 1))]),
        sp.hstack([sp.csr_matrix(mult[None, :]), sp.csr_matrix((1, 2 * M + 1))]),
        sp.hstack([sp.csr_matrix((mult * xs**2)[None, :]), sp.csr_matrix((1, 2 * M)),
                   sp.csr_matrix(np.ones((1, 1)))]),
    ]).tocsr()
    b = np.concatenate([np.zeros(M), [1.0, w * w]])
    z = solve_standard_lp(c, E, b, max_iter)
    q = np.clip(z[:m], 0.0, None)
    weights = np.zeros(n)
    weights[first:] = q
    mirror = np.arange(first, n)
    weights[n - 1 - mirror] += np.where(xs > 0, q, 0.0)
    dist = DiscretizedDistribution(-L, L, n, weights)
    return dist, float(c @ z)


def tv_to_uniform(p: DiscretizedDistribution, w: float, bin_width: float) -> float:
    """Total-variation distance between ``p`` and ``U[-sqrt(3) w, sqrt(3) w]``.

    Both laws are coarsened to bins of ``bin_width`` first.  Optimal LP
    solutions are vertex points (spiky combs); combs much finer than the
    signal scale are invisible to ``A``, so the comparison is made at that
    scale.
    """
    a = SQRT3 * w
    lo = min(p.grid_min, -a)
    hi = max(p.grid_max, a)
    edges = np.arange(lo, hi + bin_width, bin_width)
    mass_p, _ = np.histogram(p.grid, bins=edges, weights=p.weights)
    cdf = np.clip((edges + a) / (2 * a), 0.0, 1.0)
    mass_u = np.diff(cdf)
    return 0.5 * float(np.abs(mass_p - mass_u).sum())


def expected_abs_normal(sigma: float) -> float:
    """``E|X|`` for ``X ~ N(0, sigma**2)``."""
    return sigma * np.sqrt(2 / np.pi)


def gaussian_margin(sigma: float, w: float) -> float:
    """``E[X sign(X + Z)]`` for independent ``X ~ N(0, sigma**2)``, ``Z ~ N(0, w**2)``."""
    return np.sqrt(2 / np.pi) * sigma**2 / np.hypot(sigma, w)
