"""Query selection rules for the adversary.

Every rule reads only the shared transcript (queries, releases and the
declared noise laws) together with the current round's declared noise.
The player-private part of a game never reaches this module.
"""

from __future__ import annotations

import dataclasses
from typing import Callable

import numpy as np
import scipy.linalg
from scipy import special, stats

from adalab.core import JITTER, QuerySpec, SharedTranscript
from adalab.mechanisms import NoiseSpec
from adalab.signopt import _half_normal_nodes

KINDS = ("orthogonal_then_one_step", "k_step_greedy", "bayes_sign", "fixed_sequence")


class AssumptionViolationError(ValueError):
    """The history does not have the structure a rule relies on."""


@dataclasses.dataclass(frozen=True, eq=False)
class AdversaryConfig:
    """Which selection rule to play.

    ``queries`` lists the QuerySpecs of a ``fixed_sequence`` adversary.
    ``sigma`` is the world's variance bound, known to the adversary.
    """

    kind: str
    sigma: float = 1.0
    queries: tuple = ()

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"adversary kind must be one of {KINDS}, got {self.kind!r}")
        if not self.sigma > 0:
            raise ValueError(f"sigma must be positive, got {self.sigma}")
        object.__setattr__(self, "queries", tuple(self.queries))
        if self.kind == "fixed_sequence" and not self.queries:
            raise ValueError("fixed_sequence adversary needs queries")

    def __eq__(self, other):
        if not isinstance(other, AdversaryConfig):
            return NotImplemented
        return self.to_dict() == other.to_dict()

    def to_dict(self) -> dict:
        out = {"kind": self.kind, "sigma": self.sigma}
        if self.queries:
            out["queries"] = [
                {"mean": q.mean, "variance": q.variance,
                 "cov_with_history": q.cov_with_history.tolist()}
                for q in self.queries]
        return out


@dataclasses.dataclass(frozen=True, eq=False)
class SignEstimate:
    """Estimated signs of the past signals and the log-likelihood ratios behind them."""

    signs: np.ndarray
    per_round_loglr: np.ndarray

    def __post_init__(self):
        s = np.asarray(self.signs, dtype=float)
        if not np.all((s == 1) | (s == -1)):
            raise ValueError("signs must be +1 or -1")
        object.__setattr__(self, "signs", s)
        object.__setattr__(self, "per_round_loglr", np.asarray(self.per_round_loglr, dtype=float))


def least_favorable_covariance(x, Sigma, sigma: float):
    """Covariance vector maximizing ``<v, x>`` over ``v' Sigma^+ v <= sigma**2``.

    Returns ``(v, value)`` with ``v = sigma Sigma x / ||x||_Sigma`` and
    ``value = sigma ||x||_Sigma``.  When ``||x||_Sigma`` vanishes every
    feasible ``v`` is optimal and ``v = 0`` is returned.
    """
    x = np.asarray(x, dtype=float)
    Sigma = np.asarray(Sigma, dtype=float)
    Sx = x @ Sigma if x.ndim == 1 else np.einsum("...ij,...j->...i", Sigma, x)
    return least_favorable_from_product(x, Sx, sigma)


def least_favorable_from_product(x, Sx, sigma: float):
    """Same as :func:`least_favorable_covariance` given ``Sigma @ x``.

    Works on batches: the last axis indexes history rounds.
    """
    x = np.asarray(x, dtype=float)
    Sx = np.asarray(Sx, dtype=float)
    quad = np.maximum(np.sum(x * Sx, axis=-1), 0.0)
    norm = np.sqrt(quad)
    live = norm > 1e-300
    safe = np.where(live, norm, 1.0)
    v = np.where(live[..., None], sigma * Sx / safe[..., None], 0.0)
    value = np.where(live, sigma * norm, 0.0)
    if np.ndim(value) == 0:
        return v, float(value)
    return v, value


def least_favorable_coords(y, sigma: float) -> np.ndarray:
    """Least-favorable covariance in the coordinates of a factor of ``Sigma``.

    If ``Sigma = L @ L.T`` and ``y = L.T @ x`` then the optimal covariance is
    ``L @ c`` with ``c = sigma y / |y|``.  Working with ``c`` keeps the query
    inside the range of ``Sigma`` and ``|c| = sigma`` to rounding even when
    ``Sigma`` is singular.  Batched over leading axes.
    """
    y = np.asarray(y, dtype=float)
    norm = np.sqrt(np.sum(y * y, axis=-1))
    live = norm > 1e-300
    scale = np.where(live, sigma / np.where(live, norm, 1.0), 0.0)
    return y * scale[..., None]


def _solve_history(shared: SharedTranscript) -> tuple[np.ndarray, np.ndarray]:
    """``(Sigma, x)`` with ``x = (Sigma + W)^+ (A - mu - b)``."""
    Sigma = shared.covariance()
    if len(shared) == 0:
        return Sigma, np.zeros(0)
    M = Sigma + np.diag(shared.noise_variances())
    scale = max(float(np.max(np.diag(M))), 1e-300)
    pinv = scipy.linalg.pinvh(M, atol=JITTER * scale)
    return Sigma, pinv @ shared.residuals()


def orthogonal_query(shared: SharedTranscript, sigma: float) -> QuerySpec:
    """A fresh query independent of everything asked so far."""
    return QuerySpec(0.0, sigma**2, np.zeros(len(shared)))


def select_one_step(shared: SharedTranscript, sigma: float) -> QuerySpec:
    """Query maximizing the conditional bias given the releases so far."""
    if len(shared) == 0:
        return orthogonal_query(shared, sigma)
    Sigma, x = _solve_history(shared)
    v, _ = least_favorable_covariance(x, Sigma, sigma)
    return QuerySpec(0.0, sigma**2, v)


def select_k_step_greedy(shared: SharedTranscript, sigma: float) -> QuerySpec:
    """Play the one-step rule in every round; round one is unconditional."""
    return select_one_step(shared, sigma)


def _log_phi_interval(lo, hi):
    """``log(Phi(hi) - Phi(lo))`` computed on the side with more precision."""
    lo, hi = np.broadcast_arrays(np.asarray(lo, float), np.asarray(hi, float))
    flip = lo > 0
    a = np.where(flip, -hi, lo)
    b = np.where(flip, -lo, hi)
    lb = special.log_ndtr(b)
    la = special.log_ndtr(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = lb + np.log1p(-np.exp(la - lb))
    return np.where(hi > lo, out, -np.inf)


def sign_loglr(residual, noise: NoiseSpec, sigma: float):
    """Log-likelihood ratio of ``X > 0`` against ``X < 0`` given ``X + Z``.

    ``residual`` is the release minus the statistic's mean; ``noise`` is the
    declared law of ``Z``.  Vectorized over ``residual``.
    """
    r = np.asarray(residual, dtype=float)
    if not np.all(np.isfinite(r)):
        raise ValueError("release must be finite")
    if noise.family == "tabulated":
        grid, weights = noise.table.support()
        logw = np.log(weights)
        shift = np.broadcast_to(np.asarray(noise.mean, dtype=float), r.shape).ravel()
        flat = r.ravel()
        out = np.empty(flat.size)
        step = max(1, 4_000_000 // grid.size)
        for lo in range(0, flat.size, step):
            sl = slice(lo, lo + step)
            x = (flat[sl] - shift[sl])[:, None] - grid[None, :]
            logn = logw - 0.5 * (x / sigma) ** 2
            e = np.exp(logn - logn.max(axis=1, keepdims=True))
            pos = np.einsum("ij,ij->i", e, x > 0)
            neg = np.einsum("ij,ij->i", e, x < 0)
            with np.errstate(divide="ignore", invalid="ignore"):
                out[sl] = np.log(pos) - np.log(neg)
        out = out.reshape(r.shape)
        return np.where(np.isnan(out), 0.0, out)
    d = r - noise.mean
    w = np.asarray(noise.scale, dtype=float)
    if noise.family == "point_mass" or np.all(w == 0):
        return np.where(d > 0, np.inf, np.where(d < 0, -np.inf, 0.0))
    if noise.family == "gaussian":
        c = sigma / (w * np.hypot(sigma, w))
        return special.log_ndtr(c * d) - special.log_ndtr(-c * d)
    a = np.sqrt(3.0) * w
    pos = _log_phi_interval(np.maximum(0, d - a) / sigma, np.maximum(0, d + a) / sigma)
    neg = _log_phi_interval(np.minimum(0, d - a) / sigma, np.minimum(0, d + a) / sigma)
    with np.errstate(invalid="ignore"):
        out = pos - neg
    return np.where(np.isnan(out), 0.0, out)


def bayes_sign_batch(residual, noise: NoiseSpec, sigma: float) -> np.ndarray:
    """Vectorized :func:`bayes_sign_classify` on residuals ``A - mu``.

    Gaussian, uniform and point-mass noise are symmetric and unimodal about
    their mean, so the likelihood ratio test reduces to the sign of the
    residual minus the noise mean.  Tabulated noise uses the exact ratio.
    Ties resolve to +1.
    """
    r = np.asarray(residual, dtype=float)
    if not np.all(np.isfinite(r)):
        raise ValueError("release must be finite")
    if noise.family == "tabulated":
        stat = sign_loglr(r, noise, sigma)
    else:
        stat = r - noise.mean
    return np.where(stat >= 0, 1.0, -1.0)


def bayes_sign_classify(A_i: float, mu_i: float, noise: NoiseSpec, sigma: float) -> int:
    """Likelihood-ratio guess of ``sign(phi_i - mu_i)`` from one release."""
    if not np.isfinite(A_i) or not np.isfinite(mu_i):
        raise ValueError(f"release and mean must be finite, got {A_i}, {mu_i}")
    return int(bayes_sign_batch(np.array(A_i - mu_i), noise, sigma))


def bayes_sign_quadrature(residual: float, density: Callable, sigma: float) -> int:
    """Likelihood-ratio sign for a noise law given by its density.

    Integrates ``density(r - x) n_sigma(x)`` over ``x > 0`` and ``x < 0`` with
    Gauss-Legendre panels on ``[0, 8 sigma]``.
    """
    if not np.isfinite(residual):
        raise ValueError("release must be finite")
    t, wt = _half_normal_nodes(sigma)
    n = stats.norm.pdf(t, scale=sigma)
    pos = np.sum(wt * n * density(residual - t))
    neg = np.sum(wt * n * density(residual + t))
    return 1 if pos >= neg else -1


def estimate_signs(shared: SharedTranscript, sigma: float) -> SignEstimate:
    """Per-round sign guesses from each release and its declared noise alone."""
    signs, loglr = [], []
    for rnd in shared.rounds:
        r = rnd.release - rnd.query.mean
        signs.append(bayes_sign_classify(rnd.release, rnd.query.mean, rnd.noise, sigma))
        loglr.append(float(sign_loglr(np.array(r), rnd.noise, sigma)))
    return SignEstimate(np.array(signs, dtype=float), np.array(loglr))


def bayes_final_direction(declared_Zk_mean) -> np.ndarray:
    """+1 when the final noise mean is >= 0, else -1, so bias and noise add up."""
    return np.where(np.asarray(declared_Zk_mean) >= 0, 1.0, -1.0)


def select_bayes_final(shared: SharedTranscript, sigma: float,
                       declared_Zk_mean: float = 0.0) -> QuerySpec:
    """Final query correlated with every past query along the guessed signs.

    The history must consist of independent queries with variance
    ``sigma**2``.  The covariance vector is ``+- sigma**2 s_hat / sqrt(k-1)``
    with the sign chosen so the conditional bias has the same sign as the
    declared mean of the final noise.
    """
    n = len(shared)
    if n == 0:
        return orthogonal_query(shared, sigma)
    Sigma = shared.covariance()
    if np.max(np.abs(Sigma - sigma**2 * np.eye(n))) > 1e-9 * sigma**2:
        raise AssumptionViolationError("history covariance must be sigma**2 I")
    est = estimate_signs(shared, sigma)
    direction = float(bayes_final_direction(declared_Zk_mean))
    return QuerySpec(0.0, sigma**2, direction * sigma**2 * est.signs / np.sqrt(n))


def select_query(config: AdversaryConfig, shared: SharedTranscript, k: int,
                 declared: NoiseSpec) -> QuerySpec:
    """Dispatch to the configured rule for round ``len(shared) + 1`` of ``k``."""
    i = len(shared)
    sigma = config.sigma
    last = i == k - 1
    if config.kind == "fixed_sequence":
        return config.queries[i]
    if config.kind == "k_step_greedy":
        return select_k_step_greedy(shared, sigma)
    if not last:
        return orthogonal_query(shared, sigma)
    if config.kind == "orthogonal_then_one_step":
        return select_one_step(shared, sigma)
    return select_bayes_final(shared, sigma, float(np.mean(declared.mean_total)))
