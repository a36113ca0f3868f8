"""Player-side release protocols.

Each round the player declares a noise law (a :class:`NoiseSpec`) which the
adversary is allowed to see, then releases ``A = phi + Z`` with ``Z`` drawn
from that law.
"""

from __future__ import annotations

import dataclasses
from typing import Any, Callable, Optional, Sequence

import numpy as np

from adalab.signopt import DiscretizedDistribution

FAMILIES = ("gaussian", "uniform", "point_mass", "tabulated")
KINDS = ("gaussian_schedule", "zero_noise", "uniform_schedule", "custom")

SQRT3 = np.sqrt(3.0)


@dataclasses.dataclass(frozen=True, eq=False)
class NoiseSpec:
    """Declared distribution of one round's additive noise.

    ``scale`` is the standard deviation for every family; the uniform family
    with scale ``w`` is supported on ``[-sqrt(3) w, sqrt(3) w]``.  For the
    tabulated family the law is ``mean + Y`` with ``Y`` distributed on the
    table's grid points, and ``scale`` is ignored.

    ``mean`` and ``scale`` may be arrays, one entry per replication, when a
    batch of games is advanced together.
    """

    family: str = "gaussian"
    mean: Any = 0.0
    scale: Any = 0.0
    table: Optional[DiscretizedDistribution] = None

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(
                f"noise family must be one of {FAMILIES}, got {self.family!r}")
        if self.family == "tabulated" and self.table is None:
            raise ValueError("tabulated noise needs a table")
        if np.any(~np.isfinite(self.mean)):
            raise ValueError("noise mean must be finite")
        if np.any(np.asarray(self.scale) < 0) or np.any(~np.isfinite(self.scale)):
            raise ValueError(f"noise scale must be finite and >= 0, got {self.scale}")

    @classmethod
    def gaussian(cls, w, mean=0.0) -> "NoiseSpec":
        return cls("gaussian", mean, w)

    @classmethod
    def uniform(cls, w, mean=0.0) -> "NoiseSpec":
        return cls("uniform", mean, w)

    @classmethod
    def point_mass(cls, at=0.0) -> "NoiseSpec":
        return cls("point_mass", at, 0.0)

    @classmethod
    def tabulated(cls, table: DiscretizedDistribution, mean=0.0) -> "NoiseSpec":
        return cls("tabulated", mean, 0.0, table)

    @property
    def mean_total(self):
        if self.family == "tabulated":
            return self.mean + self.table.mean()
        return self.mean

    @property
    def variance(self):
        if self.family == "tabulated":
            return self.table.variance()
        if self.family == "point_mass":
            return np.zeros_like(np.asarray(self.scale, dtype=float))[()]
        return np.asarray(self.scale, dtype=float)[()] ** 2

    def sample(self, rng: np.random.Generator, size=None) -> np.ndarray:
        """Draw noise values; ``size`` defaults to the shape of ``mean``."""
        if size is None:
            size = np.broadcast(np.asarray(self.mean), np.asarray(self.scale)).shape
        if self.family == "gaussian":
            return self.mean + self.scale * rng.standard_normal(size)
        if self.family == "uniform":
            half = SQRT3 * np.asarray(self.scale)
            return self.mean + half * rng.uniform(-1.0, 1.0, size)
        if self.family == "point_mass":
            return np.broadcast_to(np.asarray(self.mean, dtype=float), size).copy()
        idx = rng.choice(self.table.n_points, size=size, p=self.table.weights)
        return self.mean + self.table.grid[idx]

    def to_dict(self) -> dict:
        out = {"family": self.family, "mean": _plain(self.mean),
               "scale": _plain(self.scale)}
        if self.table is not None:
            out["table"] = self.table.to_dict()
        return out

    def __eq__(self, other):
        if not isinstance(other, NoiseSpec):
            return NotImplemented
        return self.to_dict() == other.to_dict()

    __hash__ = None

    @classmethod
    def from_dict(cls, d: dict) -> "NoiseSpec":
        unknown = set(d) - {"family", "mean", "scale", "table"}
        if unknown:
            raise ValueError(f"unknown noise keys: {sorted(unknown)}")
        table = d.get("table")
        if table is not None:
            table = DiscretizedDistribution.from_dict(table)
        return cls(d.get("family", "gaussian"), float(d.get("mean", 0.0)),
                   float(d.get("scale", 0.0)), table)


def _plain(x):
    x = np.asarray(x)
    return x.item() if x.ndim == 0 else x.tolist()


# Signature of an adaptive noise rule: (round index starting at 0,
# shared view, private view) -> NoiseSpec.  The views are the harness's
# batched transcript arrays, so returned mean/scale may be per-replication.
NoiseCallback = Callable[[int, Any, Any], NoiseSpec]


@dataclasses.dataclass(frozen=True)
class MechanismConfig:
    """How the player picks each round's noise.

    Attributes:
      kind: one of ``gaussian_schedule``, ``zero_noise``, ``uniform_schedule``
        or ``custom``.
      w_schedule: per-round noise standard deviations (length ``k``).
      noises: for ``custom``, the per-round declared laws.
      callback: for ``custom``, an optional adaptive rule that overrides
        ``noises``; it may read the player-private transcript.
    """

    kind: str
    w_schedule: tuple = ()
    noises: tuple = ()
    callback: Optional[NoiseCallback] = dataclasses.field(default=None, compare=False)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"mechanism kind must be one of {KINDS}, got {self.kind!r}")
        w = tuple(float(x) for x in self.w_schedule)
        if any(not np.isfinite(x) or x < 0 for x in w):
            raise ValueError("w_schedule entries must be finite and >= 0")
        object.__setattr__(self, "w_schedule", w)
        object.__setattr__(self, "noises", tuple(self.noises))
        if self.kind == "custom" and not self.noises and self.callback is None:
            raise ValueError("custom mechanism needs noises or a callback")

    @property
    def k(self) -> int:
        return len(self.noises) if self.kind == "custom" else len(self.w_schedule)

    def validate_for(self, k: int) -> None:
        if self.kind == "custom":
            if self.noises and len(self.noises) != k:
                raise ValueError(f"custom mechanism lists {len(self.noises)} noises, k = {k}")
        elif self.kind != "zero_noise" or self.w_schedule:
            if len(self.w_schedule) != k:
                raise ValueError(
                    f"w_schedule must have length k = {k}, got {len(self.w_schedule)}")

    def declare(self, round_index: int, shared=None, private=None) -> NoiseSpec:
        """Declared noise law for round ``round_index`` (0-based)."""
        if self.kind == "zero_noise":
            return NoiseSpec.point_mass(0.0)
        if self.kind == "gaussian_schedule":
            return NoiseSpec.gaussian(self.w_schedule[round_index])
        if self.kind == "uniform_schedule":
            return NoiseSpec.uniform(self.w_schedule[round_index])
        if self.callback is not None:
            return self.callback(round_index, shared, private)
        return self.noises[round_index]

    def to_dict(self) -> dict:
        if self.callback is not None:
            raise ValueError("a mechanism with a callback cannot be serialized")
        out: dict = {"kind": self.kind}
        if self.w_schedule:
            out["w_schedule"] = list(self.w_schedule)
        if self.noises:
            out["noises"] = [n.to_dict() for n in self.noises]
        return out


def default_schedule(k: int, sigma: float) -> MechanismConfig:
    """Gaussian schedule ``w_i = (k-1)**0.25 * sigma`` for ``i < k``, ``w_k = 0``."""
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if not sigma > 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    w = (k - 1) ** 0.25 * sigma
    return MechanismConfig("gaussian_schedule", (w,) * (k - 1) + (0.0,))


def release(phi, noise: NoiseSpec, rng: np.random.Generator):
    """Release ``A = phi + Z``.

    The returned noise is ``A - phi`` recomputed in floating point, so the
    pair (A, Z) is what was actually added.  Rounding can still leave
    ``A - Z`` one ulp away from ``phi``; callers that store transcripts
    record ``A - Z`` as the statistic, see :func:`reconcile`.
    """
    z = noise.sample(rng, np.shape(phi))
    a = phi + z
    return a, a - phi


def reconcile(a, z):
    """Statistic value consistent with ``a - z`` bit-for-bit."""
    return a - z

