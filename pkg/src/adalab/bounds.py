"""Closed-form risk bounds for the adaptive query game.

Every function here is an exact formula; Monte Carlo comparisons live in
:mod:`adalab.harness`.  Bounds that blow up as a noise level goes to zero
return ``inf`` instead of raising so they can be tabulated and plotted.
"""

from __future__ import annotations

import dataclasses
import math
import warnings
from typing import Sequence

import numpy as np


class DegenerateQueryError(ValueError):
    """A query whose released value would carry no fresh noise or variance."""


@dataclasses.dataclass(frozen=True)
class BoundReport:
    one_step_bias_sq: float
    one_step_mse: float
    k_step_bias_sq: float
    k_step_mse: float
    minimax_lower: float
    sharpness_floor: float


def _check(k: int, sigma: float) -> None:
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if sigma < 0:
        raise ValueError(f"sigma must be >= 0, got {sigma}")


def one_step_bias_sq_bound(k: int, sigma: float, w: float) -> float:
    """``(k-1) sigma**4 / w**2``: squared bias after ``k-1`` noisy releases."""
    _check(k, sigma)
    if k == 1:
        return 0.0
    if w == 0:
        return math.inf
    return (k - 1) * sigma**4 / w**2


def one_step_mse_bound(k: int, sigma: float) -> float:
    """``(2 sqrt(k-1) + 1) sigma**2``, the one-step bound at ``w**2 = sqrt(k-1) sigma**2``."""
    _check(k, sigma)
    return (2 * math.sqrt(k - 1) + 1) * sigma**2


def sharpness_floor(k: int, sigma: float, w: float) -> float:
    """``(k-1) sigma**4 / (w**2 + sigma**2)``, attained by the one-step adversary."""
    _check(k, sigma)
    if k == 1:
        return 0.0
    return (k - 1) * sigma**4 / (w**2 + sigma**2)


def expected_sup_bias_sq(eigenvalues: Sequence[float], sigma: float, w: float) -> float:
    """``sigma**2 * sum(lam / (lam + w**2))`` over the history's eigenvalues.

    This is the expected supremum of the squared conditional bias when the
    first queries are fixed in advance and released with ``N(0, w**2)`` noise.
    """
    lam = np.asarray(eigenvalues, dtype=float)
    if np.any(lam < 0):
        raise ValueError("eigenvalues must be >= 0")
    if w == 0:
        return float(sigma**2 * np.count_nonzero(lam))
    return float(sigma**2 * np.sum(lam / (lam + w**2)))


def recursive_fk_update(f_prev: float, Sigma, W, v, lam: float, w_sq: float) -> float:
    """Expected value of the quadratic bias statistic after one more release.

    With history covariance ``Sigma``, noise covariance ``W`` and residual
    vector ``r``, the statistic is ``f(r) = r' M Sigma M r`` where
    ``M = (Sigma + W)^-1``.  Adding a query with covariance ``v`` to the
    history, variance ``lam`` and noise variance ``w_sq`` and averaging over
    its release given the past gives::

        f_prev + (lam + v' M Sigma M v - 2 v' M v) / (lam + w_sq - v' M v)

    ``f_prev`` is the statistic of the current history.
    """
    Sigma = np.atleast_2d(np.asarray(Sigma, dtype=float))
    W = np.atleast_2d(np.asarray(W, dtype=float))
    v = np.asarray(v, dtype=float).reshape(-1)
    M = np.linalg.inv(Sigma + W)
    Mv = M @ v
    denom = lam + w_sq - v @ Mv
    if denom <= 1e-12:
        raise DegenerateQueryError(
            f"released value has conditional variance {denom:.3g}")
    num = lam + Mv @ Sigma @ Mv - 2 * (v @ Mv)
    return float(f_prev + num / denom)


def bordered_inverse(M, v, lam: float, w_sq: float) -> np.ndarray:
    """Inverse of ``[[S, v], [v', lam + w_sq]]`` from ``M = S^-1``.

    Uses the Schur complement ``alpha = 1 / (lam + w_sq - v' M v)``.
    """
    M = np.atleast_2d(np.asarray(M, dtype=float))
    v = np.asarray(v, dtype=float).reshape(-1)
    Mv = M @ v
    denom = lam + w_sq - v @ Mv
    if denom <= 1e-12:
        raise DegenerateQueryError(f"Schur complement {denom:.3g} is not positive")
    alpha = 1.0 / denom
    n = v.size
    out = np.empty((n + 1, n + 1))
    out[:n, :n] = M + alpha * np.outer(Mv, Mv)
    out[:n, n] = out[n, :n] = -alpha * Mv
    out[n, n] = alpha
    return out


def k_step_bias_sq_bound(sigma: float, w_schedule: Sequence[float]) -> float:
    """``sigma**4 * sum(1/w_i**2 + sigma**2/w_i**4)`` over all rounds but the last."""
    w = np.asarray(w_schedule, dtype=float)[:-1]
    if w.size == 0:
        return 0.0
    if np.any(w == 0):
        return math.inf
    return float(sigma**4 * np.sum(1 / w**2 + sigma**2 / w**4))


def k_step_mse_bound(k: int, sigma: float) -> float:
    """``2 (sqrt(k-1) + 1) sigma**2``, attained up to constants by the default schedule."""
    _check(k, sigma)
    return 2 * (math.sqrt(k - 1) + 1) * sigma**2


def minimax_lower_bound(k: int, sigma: float) -> float:
    """``sqrt(k-1) sigma**2 / (2 sqrt(3))``: no player can do better than this."""
    if k < 2:
        warnings.warn("the lower bound needs k >= 2; returning 0", stacklevel=2)
        return 0.0
    if sigma < 0:
        raise ValueError(f"sigma must be >= 0, got {sigma}")
    return math.sqrt(k - 1) * sigma**2 / (2 * math.sqrt(3))


def bound_report(k: int, sigma: float, w_schedule: Sequence[float] | None = None) -> BoundReport:
    """All reference bounds for a ``k``-round game.

    ``w_schedule`` defaults to ``w_i = (k-1)**0.25 sigma`` for ``i < k`` and
    ``w_k = 0``.  The one-step quantities use the first round's noise level.
    """
    _check(k, sigma)
    if w_schedule is None:
        w_schedule = [(k - 1) ** 0.25 * sigma] * (k - 1) + [0.0]
    w_schedule = list(w_schedule)
    w1 = w_schedule[0] if k > 1 else 0.0
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        lower = minimax_lower_bound(k, sigma)
    return BoundReport(
        one_step_bias_sq=one_step_bias_sq_bound(k, sigma, w1),
        one_step_mse=one_step_mse_bound(k, sigma),
        k_step_bias_sq=k_step_bias_sq_bound(sigma, w_schedule),
        k_step_mse=k_step_mse_bound(k, sigma),
        minimax_lower=lower,
        sharpness_floor=sharpness_floor(k, sigma, w1),
    )
