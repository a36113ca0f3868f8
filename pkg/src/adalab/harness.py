"""Monte Carlo estimation of per-round risk in the adaptive query game.

Replications are simulated in fixed-size blocks.  Every block draws from
its own generators, seeded by ``(seed, domain, block, round, stream)``, and
block summaries are merged in block order, so results do not depend on the
number of worker processes or on scheduling.
"""

from __future__ import annotations

import dataclasses
import math
import os
from concurrent.futures import ProcessPoolExecutor
from typing import Optional, Sequence, Union

import numpy as np

from adalab import bounds
from adalab.adversaries import (AdversaryConfig, bayes_final_direction,
                                bayes_sign_batch, least_favorable_coords)
from adalab.core import (JITTER, GameHistory, IncrementalCholesky, QuerySpec,
                         WorldBlock)
from adalab.mechanisms import MechanismConfig, NoiseSpec

CONJUNCTIONS = ("max", "sum", "product")
DOMAIN_ESTIMATE = 0
DOMAIN_GAME = 1
STREAM_WORLD = 0
STREAM_NOISE = 1


@dataclasses.dataclass(frozen=True)
class ExperimentConfig:
    k: int
    sigma: float
    mechanism: MechanismConfig
    adversary: AdversaryConfig
    replications: int = 100_000
    seed: int = 0
    conjunction: str = "max"

    def __post_init__(self):
        if not isinstance(self.k, (int, np.integer)) or self.k < 1:
            raise ValueError(f"k must be ≥ 1, got {self.k}")
        if not self.sigma > 0:
            raise ValueError(f"sigma must be > 0, got {self.sigma}")
        if not isinstance(self.replications, (int, np.integer)) or self.replications < 1:
            raise ValueError(f"replications must be ≥ 1, got {self.replications}")
        if self.seed < 0:
            raise ValueError(f"seed must be ≥ 0, got {self.seed}")
        if self.conjunction not in CONJUNCTIONS:
            raise ValueError(
                f"conjunction must be one of {CONJUNCTIONS}, got {self.conjunction!r}")
        if not math.isclose(self.adversary.sigma, self.sigma, rel_tol=1e-12):
            raise ValueError("adversary sigma must equal the world's sigma")
        if self.adversary.kind == "fixed_sequence" and len(self.adversary.queries) != self.k:
            raise ValueError(f"fixed_sequence needs k = {self.k} queries")
        self.mechanism.validate_for(self.k)


@dataclasses.dataclass(frozen=True)
class RoundEstimate:
    """Monte Carlo estimates for one round.

    ``cond_bias_sq_hat`` averages the square of the conditional bias
    ``E[A_i - mu_i | A_1..A_{i-1}]`` over replications.
    """

    bias_hat: float
    bias_se: float
    bias_sq_hat: float
    mse_hat: float
    mse_se: float
    cond_bias_sq_hat: float
    cond_bias_sq_se: float


@dataclasses.dataclass(frozen=True)
class RiskReport:
    config: ExperimentConfig
    per_round: tuple
    combined_risk: float
    bound_report: bounds.BoundReport
    replications_used: int

    @property
    def max_mse(self) -> float:
        return max(r.mse_hat for r in self.per_round)

    @property
    def max_mse_se(self) -> float:
        return self.per_round[int(np.argmax([r.mse_hat for r in self.per_round]))].mse_se


@dataclasses.dataclass(frozen=True)
class SweepFailure:
    config: ExperimentConfig
    error: str


class RunningMoments:
    """Streaming count, mean and centered second moment of array samples.

    Summaries combine with :meth:`merge`; merging in a fixed order gives
    bit-identical results however the samples were produced.
    """

    def __init__(self, shape):
        self.n = 0
        self.mean = np.zeros(shape)
        self.m2 = np.zeros(shape)

    @classmethod
    def from_samples(cls, samples: np.ndarray) -> "RunningMoments":
        out = cls(samples.shape[1:])
        out.n = samples.shape[0]
        out.mean = samples.mean(axis=0)
        out.m2 = ((samples - out.mean) ** 2).sum(axis=0)
        return out

    def update(self, x: np.ndarray) -> None:
        self.n += 1
        delta = x - self.mean
        self.mean = self.mean + delta / self.n
        self.m2 = self.m2 + delta * (x - self.mean)

    def merge(self, other: "RunningMoments") -> None:
        if other.n == 0:
            return
        n = self.n + other.n
        delta = other.mean - self.mean
        self.mean = self.mean + delta * (other.n / n)
        self.m2 = self.m2 + other.m2 + delta**2 * (self.n * other.n / n)
        self.n = n

    @property
    def variance(self) -> np.ndarray:
        if self.n < 2:
            return np.zeros_like(self.m2)
        return self.m2 / (self.n - 1)

    @property
    def standard_error(self) -> np.ndarray:
        if self.n < 1:
            return np.full_like(self.m2, np.nan)
        return np.sqrt(self.variance / self.n)


def block_size(k: int) -> int:
    """Replications per block; depends on ``k`` only."""
    return int(min(4096, max(16, 2**23 // (k * k))))


@dataclasses.dataclass
class BatchShared:
    """Shared transcript of a batch of games, first ``n`` rounds filled."""

    n: int
    releases: np.ndarray
    means: np.ndarray
    cov: np.ndarray
    noises: list


@dataclasses.dataclass
class BatchPrivate:
    n: int
    noise_values: np.ndarray
    phi: np.ndarray


@dataclasses.dataclass
class BlockResult:
    errors: np.ndarray        # A_i - mu_i, shape (batch, k)
    cond_bias: np.ndarray     # E[A_i - mu_i | earlier releases]
    shared: BatchShared
    private: BatchPrivate


def _broadcast_noise(noise: NoiseSpec, batch: int):
    mean = np.broadcast_to(np.asarray(noise.mean_total, dtype=float), (batch,))
    var = np.broadcast_to(np.asarray(noise.variance, dtype=float), (batch,))
    return mean, var


def simulate_block(config: ExperimentConfig, domain: int, block: int,
                   batch: int) -> BlockResult:
    """Play ``batch`` independent games round by round."""
    k, sigma = config.k, config.sigma
    scale = sigma**2
    adv = config.adversary
    world = WorldBlock(batch, k, sigma)
    factor = IncrementalCholesky(batch, k, JITTER * scale)
    Sigma = np.zeros((batch, k, k))
    releases = np.zeros((batch, k))
    means = np.zeros((batch, k))
    resid = np.zeros((batch, k))
    y_adv = np.zeros((batch, k))  # Linv @ resid for the adversary's factor
    noise_values = np.zeros((batch, k))
    errors = np.zeros((batch, k))
    cond_bias = np.zeros((batch, k))
    noises: list = []
    shared = BatchShared(0, releases, means, Sigma, noises)
    private = BatchPrivate(0, noise_values, world.realized)
    for i in range(k):
        seeds = [config.seed, domain, block, i]
        rng_world = np.random.default_rng(seeds + [STREAM_WORLD])
        rng_noise = np.random.default_rng(seeds + [STREAM_NOISE])
        shared.n = private.n = i
        noise = config.mechanism.declare(i, shared, private)
        noise_mean, noise_var = _broadcast_noise(noise, batch)

        x = factor.backward(y_adv[:, :i])
        last = i == k - 1
        q_mean = 0.0
        q_var = scale
        coords = None
        if adv.kind == "fixed_sequence":
            q = adv.queries[i]
            q_mean, q_var = q.mean, q.variance
            v = np.broadcast_to(q.cov_with_history, (batch, i))
        elif adv.kind == "k_step_greedy" or (adv.kind == "orthogonal_then_one_step" and last):
            # Sigma = L L' with L the world's factor, so the least-favorable
            # covariance L y sigma / |y|, y = L' x, has factor coordinates
            # y sigma / |y|.
            y = world.factor.transpose_apply(x)
            coords = least_favorable_coords(y, sigma)
            v = None
        elif adv.kind == "bayes_sign" and last and i > 0:
            off = Sigma[:, :i, :i] - scale * np.eye(i)
            if np.max(np.abs(off)) > 1e-9 * scale:
                raise ValueError("history covariance must be sigma**2 I")
            signs = np.empty((batch, i))
            for j in range(i):
                signs[:, j] = bayes_sign_batch(releases[:, j] - means[:, j], noises[j], sigma)
            direction = bayes_final_direction(np.mean(noise_mean))
            v = direction * scale * signs / math.sqrt(i)
        else:
            v = np.zeros((batch, i))

        phi, v = world.extend(q_mean, q_var, v, rng_world, coords=coords)
        pred = np.einsum("bi,bi->b", v, x) + noise_mean
        Sigma[:, i, :i] = v
        Sigma[:, :i, i] = v
        Sigma[:, i, i] = q_var
        z = noise.sample(rng_noise, (batch,))
        a = phi + z
        z = a - phi
        world.snap(a - z)
        releases[:, i] = a
        means[:, i] = q_mean
        noise_values[:, i] = z
        noises.append(noise)
        resid[:, i] = a - q_mean - noise_mean
        if not last:
            factor.append(v, q_var + noise_var)
            y_adv[:, i] = factor.forward_last(resid)
        errors[:, i] = a - q_mean
        cond_bias[:, i] = pred
    shared.n = private.n = k
    return BlockResult(errors, cond_bias, shared, private)


def _block_moments(args) -> RunningMoments:
    config, block, batch = args
    res = simulate_block(config, DOMAIN_ESTIMATE, block, batch)
    samples = np.stack([res.errors, res.errors**2, res.cond_bias**2], axis=1)
    return RunningMoments.from_samples(samples)


def resolve_workers(workers: Optional[int] = None) -> int:
    """Explicit count, else ``ADA_LAB_WORKERS``, else 1."""
    if workers is None:
        env = os.environ.get("ADA_LAB_WORKERS")
        workers = int(env) if env else 1
    if workers < 1:
        raise ValueError(f"workers must be >= 1, got {workers}")
    return int(workers)


def schedule_for_bounds(config: ExperimentConfig):
    mech = config.mechanism
    if mech.kind == "custom" and mech.callback is not None:
        return None
    return [float(np.sqrt(np.mean(mech.declare(i).variance))) for i in range(config.k)]


def combine(values: Sequence[float], conjunction: str) -> float:
    values = np.asarray(values, dtype=float)
    if conjunction == "max":
        return float(values.max())
    if conjunction == "sum":
        return float(values.sum())
    if conjunction == "product":
        return float(values.prod())
    raise ValueError(f"unknown conjunction {conjunction!r}")


def estimate_risk(config: ExperimentConfig, workers: Optional[int] = None) -> RiskReport:
    """Per-round bias and MSE estimates over ``config.replications`` games."""
    workers = resolve_workers(workers)
    size = block_size(config.k)
    tasks = []
    remaining = config.replications
    block = 0
    while remaining > 0:
        tasks.append((config, block, min(size, remaining)))
        remaining -= size
        block += 1
    if workers == 1 or len(tasks) == 1:
        parts = map(_block_moments, tasks)
        total = RunningMoments((3, config.k))
        for part in parts:
            total.merge(part)
    else:
        with ProcessPoolExecutor(max_workers=min(workers, len(tasks))) as pool:
            total = RunningMoments((3, config.k))
            for part in pool.map(_block_moments, tasks):
                total.merge(part)
    mean, se = total.mean, total.standard_error
    per_round = []
    for i in range(config.k):
        b, bse = mean[0, i], se[0, i]
        per_round.append(RoundEstimate(
            bias_hat=float(b), bias_se=float(bse),
            bias_sq_hat=float(max(b * b - bse * bse, 0.0)),
            mse_hat=float(mean[1, i]), mse_se=float(se[1, i]),
            cond_bias_sq_hat=float(mean[2, i]), cond_bias_sq_se=float(se[2, i]),
        ))
    combined = combine([r.mse_hat for r in per_round], config.conjunction)
    return RiskReport(
        config=config,
        per_round=tuple(per_round),
        combined_risk=combined,
        bound_report=bounds.bound_report(config.k, config.sigma, schedule_for_bounds(config)),
        replications_used=total.n,
    )


def _first(x):
    return float(np.asarray(x).reshape(-1)[0])


def _single_noise(noise: NoiseSpec) -> NoiseSpec:
    return NoiseSpec(noise.family, _first(noise.mean), _first(noise.scale), noise.table)


def run_game(config: ExperimentConfig, replication_index: int) -> GameHistory:
    """Transcript of one game; depends only on ``(config.seed, replication_index)``."""
    if replication_index < 0:
        raise ValueError(f"replication_index must be >= 0, got {replication_index}")
    res = simulate_block(config, DOMAIN_GAME, replication_index, 1)
    history = GameHistory()
    cov = res.shared.cov[0]
    for i in range(config.k):
        q = QuerySpec(res.shared.means[0, i], cov[i, i], cov[i, :i].copy())
        a = res.shared.releases[0, i]
        z = res.private.noise_values[0, i]
        history = history.append(q, a, _single_noise(res.shared.noises[i]), z,
                                 res.private.phi[0, i])
    return history


def sweep(configs: Sequence[ExperimentConfig], workers: Optional[int] = None
          ) -> list[Union[RiskReport, SweepFailure]]:
    """Estimate every config in order; failures are recorded and skipped."""
    out: list[Union[RiskReport, SweepFailure]] = []
    for config in configs:
        try:
            out.append(estimate_risk(config, workers))
        except Exception as exc:  # noqa: BLE001 - reported, sweep continues
            out.append(SweepFailure(config, f"{type(exc).__name__}: {exc}"))
    return out
