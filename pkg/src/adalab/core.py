"""Gaussian query world, game transcripts and conditional sampling.

A query ``t`` is represented only through the law of its statistic
``phi_t``: a mean, a variance and the covariance with every statistic
already asked.  Selecting a query therefore extends a jointly Gaussian
vector by one coordinate, and the realized value of that coordinate is
drawn from its conditional law given the values realized so far.

Two sampling paths live here:

* :func:`extend_world` works on an immutable :class:`GaussianWorldState`
  and is meant for single games, tests and exploration.
* :class:`IncrementalCholesky` and :class:`WorldBlock` carry a batch of
  independent replications at once; the Monte Carlo harness uses them.

Both draw from the same conditional normal law.
"""

from __future__ import annotations

import dataclasses
from typing import TYPE_CHECKING, Sequence

import numpy as np
import scipy.linalg

if TYPE_CHECKING:
    from adalab.mechanisms import NoiseSpec

# Relative to sigma_max**2.
JITTER = 1e-10
PSD_TOL = 1e-9


class RejectedQueryError(ValueError):
    """A query whose covariance cannot be realized by any Gaussian process."""


class InvalidQueryError(ValueError):
    """A linear query outside the unit ball."""


@dataclasses.dataclass(frozen=True, eq=False)
class QuerySpec:
    """Law of a newly selected statistic relative to the history.

    Attributes:
      mean: population value ``mu_t``.
      variance: ``Var(phi_t)``.
      cov_with_history: covariance with each previously selected statistic,
        in selection order.
    """

    mean: float
    variance: float
    cov_with_history: np.ndarray = dataclasses.field(
        default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        cov = np.asarray(self.cov_with_history, dtype=float).reshape(-1)
        object.__setattr__(self, "cov_with_history", cov)
        object.__setattr__(self, "mean", float(self.mean))
        object.__setattr__(self, "variance", float(self.variance))
        if not self.variance >= 0:
            raise RejectedQueryError(
                f"query variance must be >= 0, got {self.variance}")


def augmented_min_eigenvalue(cov: np.ndarray, q: QuerySpec) -> float:
    """Smallest eigenvalue of ``cov`` bordered by the query's row."""
    n = cov.shape[0]
    if q.cov_with_history.shape != (n,):
        raise RejectedQueryError(
            f"query carries {q.cov_with_history.size} covariances, "
            f"history has {n} statistics")
    big = np.empty((n + 1, n + 1))
    big[:n, :n] = cov
    big[:n, n] = big[n, :n] = q.cov_with_history
    big[n, n] = q.variance
    return float(np.linalg.eigvalsh(big)[0])


@dataclasses.dataclass(frozen=True, eq=False)
class GaussianWorldState:
    """Joint law and realized values of the statistics selected so far."""

    sigma_max: float
    cov: np.ndarray = dataclasses.field(default_factory=lambda: np.zeros((0, 0)))
    means: np.ndarray = dataclasses.field(default_factory=lambda: np.zeros(0))
    realized: np.ndarray = dataclasses.field(default_factory=lambda: np.zeros(0))
    rng_seed: int = 0

    def __post_init__(self):
        if not self.sigma_max > 0:
            raise ValueError(f"sigma_max must be positive, got {self.sigma_max}")
        cov = np.array(self.cov, dtype=float).reshape(len(self.means), len(self.means))
        means = np.array(self.means, dtype=float)
        realized = np.array(self.realized, dtype=float)
        if realized.shape != means.shape:
            raise ValueError("means and realized values must have equal length")
        for arr in (cov, means, realized):
            arr.setflags(write=False)
        object.__setattr__(self, "cov", cov)
        object.__setattr__(self, "means", means)
        object.__setattr__(self, "realized", realized)

    @property
    def dimension(self) -> int:
        return self.means.size

    def conditional_law(self, q: QuerySpec) -> tuple[float, float]:
        """Mean and variance of the query's statistic given realized values.

        Raises RejectedQueryError when the augmented covariance is not PSD
        within ``PSD_TOL * sigma_max**2`` or the variance exceeds the bound.
        """
        scale = self.sigma_max**2
        if q.variance > scale * (1 + PSD_TOL):
            raise RejectedQueryError(
                f"variance {q.variance} exceeds sigma_max**2 = {scale}")
        n = self.dimension
        if n == 0:
            if q.cov_with_history.size:
                raise RejectedQueryError("empty history takes no covariances")
            return q.mean, q.variance
        if augmented_min_eigenvalue(self.cov, q) < -PSD_TOL * scale:
            raise RejectedQueryError(
                "augmented covariance is not positive semidefinite")
        pinv = scipy.linalg.pinvh(self.cov, atol=JITTER * scale)
        v = q.cov_with_history
        gain = pinv @ v
        mean = q.mean + gain @ (self.realized - self.means)
        var = q.variance - v @ gain
        if var < JITTER * scale:
            var = 0.0
        return float(mean), float(var)


def extend_world(state: GaussianWorldState, q: QuerySpec) -> GaussianWorldState:
    """Add the query's statistic to the world and realize its value.

    The draw uses the generator seeded by ``(state.rng_seed, state.dimension)``
    so a given state and query always produce the same value.
    """
    mean, var = state.conditional_law(q)
    rng = np.random.default_rng([state.rng_seed, state.dimension])
    value = mean + np.sqrt(var) * rng.standard_normal()
    n = state.dimension
    cov = np.empty((n + 1, n + 1))
    cov[:n, :n] = state.cov
    cov[:n, n] = cov[n, :n] = q.cov_with_history
    cov[n, n] = q.variance
    return GaussianWorldState(
        sigma_max=state.sigma_max,
        cov=cov,
        means=np.append(state.means, q.mean),
        realized=np.append(state.realized, value),
        rng_seed=state.rng_seed,
    )


def _matvec(M: np.ndarray, u: np.ndarray) -> np.ndarray:
    return np.matmul(M, u[..., None])[..., 0]


def _rmatvec(M: np.ndarray, u: np.ndarray) -> np.ndarray:
    return np.matmul(u[..., None, :], M)[..., 0, :]


class IncrementalCholesky:
    """Batched, rank-revealing Cholesky factor of a growing PSD matrix.

    Holds ``L`` and its generalized inverse ``Linv`` for ``batch`` matrices
    that grow one row/column per call to :meth:`append`.  Pivots whose
    squared value falls below ``tol`` are treated as exactly zero: their
    rows of ``Linv`` and columns of ``L`` are zero, which makes
    ``Linv.T @ Linv`` a generalized inverse of the factored matrix and
    ``Linv @ L`` the identity on the non-degenerate coordinates.
    """

    def __init__(self, batch: int, capacity: int, tol: float):
        self.L = np.zeros((batch, capacity, capacity))
        self.Linv = np.zeros((batch, capacity, capacity))
        self.pivot = np.zeros((batch, capacity))
        self.tol = tol
        self.n = 0

    def forward(self, u: np.ndarray) -> np.ndarray:
        """``Linv @ u`` for ``u`` of shape (batch, n)."""
        n = self.n
        return _matvec(self.Linv[:, :n, :n], u)

    def forward_last(self, u: np.ndarray) -> np.ndarray:
        """Last entry of ``Linv @ u``; earlier entries do not change on append."""
        n = self.n
        return np.einsum("bi,bi->b", self.Linv[:, n - 1, :n], u[:, :n])

    def backward(self, y: np.ndarray) -> np.ndarray:
        """``Linv.T @ y``."""
        n = self.n
        return _rmatvec(self.Linv[:, :n, :n], y)

    def solve(self, r: np.ndarray) -> np.ndarray:
        """Generalized solve ``Linv.T @ Linv @ r``."""
        return self.backward(self.forward(r))

    def reconstruct(self, c: np.ndarray) -> np.ndarray:
        """``L @ c``; recovers ``u`` from ``forward(u)`` when ``u`` is in range."""
        n = self.n
        return _matvec(self.L[:, :n, :n], c)

    def transpose_apply(self, x: np.ndarray) -> np.ndarray:
        """``L.T @ x``."""
        n = self.n
        return _rmatvec(self.L[:, :n, :n], x)

    def append(self, u: np.ndarray, diag: np.ndarray,
               c: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
        """Border the matrix with column ``u`` and diagonal entry ``diag``.

        Returns ``(c, d2)`` where ``c = Linv @ u`` and ``d2`` is the squared
        new pivot before clipping (negative values signal a non-PSD border).
        """
        n = self.n
        if c is None:
            c = self.forward(u)
        d2 = diag - np.einsum("bi,bi->b", c, c)
        live = d2 > self.tol
        d = np.sqrt(np.where(live, d2, 1.0))
        self.L[:, n, :n] = c
        self.L[:, n, n] = np.where(live, d, 0.0)
        if n:
            row = -_rmatvec(self.Linv[:, :n, :n], c) / d[:, None]
            self.Linv[:, n, :n] = np.where(live[:, None], row, 0.0)
        self.Linv[:, n, n] = np.where(live, 1.0 / d, 0.0)
        self.pivot[:, n] = self.L[:, n, n]
        self.n = n + 1
        return c, d2


class WorldBlock:
    """A batch of independent Gaussian worlds advanced round by round.

    Realized values are ``means + L @ innovations`` where the innovations
    are the standard normal draws attached to non-degenerate pivots.
    """

    def __init__(self, batch: int, capacity: int, sigma_max: float):
        self.sigma_max = float(sigma_max)
        scale = self.sigma_max**2
        self.factor = IncrementalCholesky(batch, capacity, JITTER * scale)
        self.innovations = np.zeros((batch, capacity))
        self.means = np.zeros((batch, capacity))
        self.realized = np.zeros((batch, capacity))
        self.batch = batch

    @property
    def n(self) -> int:
        return self.factor.n

    def extend(self, mean, variance, cov=None, rng: np.random.Generator = None,
               coords: np.ndarray | None = None):
        """Realize one new statistic per replication.

        The new statistic's covariance with the history is given either as
        ``cov`` or as ``coords``, its coordinates ``c`` in the factor basis
        (``cov = L @ c``, zero on degenerate pivots).  A ``cov`` is projected
        onto the range of the current covariance, which removes rounding-level
        components along degenerate directions; a component larger than the
        PSD tolerance allows is rejected.

        Returns ``(values, cov_used)``.
        """
        scale = self.sigma_max**2
        n = self.n
        mean = np.broadcast_to(np.asarray(mean, dtype=float), (self.batch,))
        variance = np.broadcast_to(np.asarray(variance, dtype=float), (self.batch,))
        if np.any(variance > scale * (1 + PSD_TOL)):
            raise RejectedQueryError(
                f"variance exceeds sigma_max**2 = {scale}")
        if coords is None:
            cov = np.asarray(cov, dtype=float).reshape(self.batch, n)
            c = self.factor.forward(cov)
            projected = self.factor.reconstruct(c)
            off = projected - cov
            # A component e along a null direction gives the bordered matrix
            # an eigenvalue near -|e|**2 / variance.
            limit = PSD_TOL * scale * np.maximum(variance, PSD_TOL * scale)
            if np.any(np.einsum("bi,bi->b", off, off) > limit):
                raise RejectedQueryError(
                    "augmented covariance is not positive semidefinite")
        else:
            c = np.asarray(coords, dtype=float).reshape(self.batch, n)
            projected = self.factor.reconstruct(c)
        c, d2 = self.factor.append(projected, variance, c=c)
        if np.any(d2 < -PSD_TOL * scale):
            raise RejectedQueryError(
                "augmented covariance is not positive semidefinite")
        shift = np.einsum("bi,bi->b", c, self.innovations[:, :n])
        xi = rng.standard_normal(self.batch)
        live = self.factor.pivot[:, n] > 0
        xi = np.where(live, xi, 0.0)
        value = mean + shift + self.factor.pivot[:, n] * xi
        self.innovations[:, n] = xi
        self.means[:, n] = mean
        self.realized[:, n] = value
        return value, projected

    def snap(self, values: np.ndarray) -> None:
        """Overwrite the latest realized values (by at most rounding error)."""
        n = self.n - 1
        pivot = self.factor.pivot[:, n]
        live = pivot > 0
        shift = np.einsum("bi,bi->b", self.factor.L[:, n, :n], self.innovations[:, :n])
        dev = values - self.means[:, n] - shift
        self.innovations[:, n] = np.where(live, dev / np.where(live, pivot, 1.0), 0.0)
        self.realized[:, n] = values


@dataclasses.dataclass(frozen=True, eq=False)
class SharedRound:
    query: QuerySpec
    release: float
    noise: "NoiseSpec"


@dataclasses.dataclass(frozen=True, eq=False)
class PrivateRound:
    noise_value: float
    phi: float


@dataclasses.dataclass(frozen=True, eq=False)
class SharedTranscript:
    """What both players see: queries, releases and declared noise laws."""

    rounds: tuple[SharedRound, ...] = ()

    def __len__(self) -> int:
        return len(self.rounds)

    def covariance(self) -> np.ndarray:
        n = len(self.rounds)
        cov = np.zeros((n, n))
        for i, rnd in enumerate(self.rounds):
            cov[i, :i] = cov[:i, i] = rnd.query.cov_with_history
            cov[i, i] = rnd.query.variance
        return cov

    def means(self) -> np.ndarray:
        return np.array([r.query.mean for r in self.rounds], dtype=float)

    def releases(self) -> np.ndarray:
        return np.array([r.release for r in self.rounds], dtype=float)

    def noise_variances(self) -> np.ndarray:
        return np.array([r.noise.variance for r in self.rounds], dtype=float)

    def noise_means(self) -> np.ndarray:
        return np.array([r.noise.mean for r in self.rounds], dtype=float)

    def residuals(self) -> np.ndarray:
        """Releases minus population values minus declared noise means."""
        return self.releases() - self.means() - self.noise_means()

    def append(self, rnd: SharedRound) -> "SharedTranscript":
        return SharedTranscript(self.rounds + (rnd,))


@dataclasses.dataclass(frozen=True, eq=False)
class GameHistory:
    """Full transcript split into the shared and the player-only parts.

    Adversary code is handed ``history.shared`` only.
    """

    shared: SharedTranscript = dataclasses.field(default_factory=SharedTranscript)
    player_private: tuple[PrivateRound, ...] = ()

    def __post_init__(self):
        if len(self.shared) != len(self.player_private):
            raise ValueError("shared and private transcripts differ in length")
        for i, (s, p) in enumerate(zip(self.shared.rounds, self.player_private)):
            if s.release - p.noise_value != p.phi:
                raise ValueError(f"round {i + 1}: release - noise != phi")

    def __len__(self) -> int:
        return len(self.shared)

    def append(self, query: QuerySpec, release: float, noise: "NoiseSpec",
               noise_value: float, phi: float) -> "GameHistory":
        return GameHistory(
            self.shared.append(SharedRound(query, float(release), noise)),
            self.player_private + (PrivateRound(float(noise_value), float(phi)),),
        )


@dataclasses.dataclass(frozen=True, eq=False)
class LinearQueryWorld:
    """Sample-mean linear statistics ``phi_t(X) = mean_i <t, X_i>``.

    ``data`` has shape (d, n); columns are observations.
    """

    d: int
    n: int
    feature_sd: float
    data: np.ndarray

    @classmethod
    def sample(cls, d: int, n: int, feature_sd: float = 1.0,
               rng: np.random.Generator | int | None = None) -> "LinearQueryWorld":
        rng = np.random.default_rng(rng)
        return cls(d, n, feature_sd, feature_sd * rng.standard_normal((d, n)))

    def __post_init__(self):
        data = np.asarray(self.data, dtype=float)
        if data.shape != (self.d, self.n):
            raise ValueError(f"data must have shape ({self.d}, {self.n})")
        object.__setattr__(self, "data", data)


def linear_query(world: LinearQueryWorld, t: Sequence[float],
                 previous: Sequence[Sequence[float]] = ()) -> tuple[QuerySpec, float]:
    """Evaluate the linear statistic for direction ``t``.

    ``previous`` lists the directions asked before; the returned spec
    carries their covariances ``<t, t_j> feature_sd**2 / n``.
    """
    t = np.asarray(t, dtype=float)
    if t.shape != (world.d,):
        raise InvalidQueryError(f"query must have length {world.d}")
    if np.linalg.norm(t) > 1 + 1e-9:
        raise InvalidQueryError(f"query norm {np.linalg.norm(t):.6g} exceeds 1")
    unit = world.feature_sd**2 / world.n
    prev = np.asarray(previous, dtype=float).reshape(-1, world.d)
    spec = QuerySpec(mean=0.0, variance=unit * (t @ t), cov_with_history=unit * (prev @ t))
    realized = float(t @ world.data.mean(axis=1))
    return spec, realized
