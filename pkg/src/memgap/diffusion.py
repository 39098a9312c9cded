"""Noise schedule, Gaussian-mixture data law, datasets and forward perturbation."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from typing import Any

import numpy as np
from scipy.special import logsumexp

from memgap.rng import Stream


class DomainError(ValueError):
    """Raised when a time or shape lies outside an operation's domain."""


@dataclass(frozen=True)
class DiffusionSchedule:
    """Ornstein-Uhlenbeck forward process on ``[t0, T]``.

    ``alpha(t) = exp(-t/2)`` and ``sigma2(t) = 1 - exp(-t)``; ``t0`` is the
    early-stopping time below which scores are never evaluated.
    """

    t0: float = 1e-3
    T: float = 5.0

    def __post_init__(self):
        if not (0.0 < self.t0 < self.T and math.isfinite(self.T)):
            raise DomainError(f"need 0 < t0 < T, got t0={self.t0}, T={self.T}")

    def alpha(self, t):
        return alpha_sigma(self, t)[0]

    def sigma2(self, t):
        return alpha_sigma(self, t)[1]

    def sigma(self, t):
        return np.sqrt(alpha_sigma(self, t)[1])

    def check(self, t, name: str = "t") -> None:
        """Raise :class:`DomainError` unless every ``t`` lies in ``[t0, T]``."""
        arr = np.asarray(t, dtype=np.float64)
        if not np.all(np.isfinite(arr)) or np.any(arr < self.t0) or np.any(arr > self.T):
            raise DomainError(f"{name} must lie in [t0={self.t0}, T={self.T}], got {t!r}")

    def to_dict(self) -> dict:
        return {"t0": self.t0, "T": self.T}


def alpha_sigma(sched: DiffusionSchedule, t):
    """Return ``(alpha_t, sigma_t**2)``; works elementwise on arrays."""
    arr = np.asarray(t, dtype=np.float64)
    if np.any(arr < 0) or np.any(np.isnan(arr)):
        raise DomainError(f"t must be >= 0, got {t!r}")
    alpha = np.exp(-0.5 * arr)
    sigma2 = -np.expm1(-arr)
    if arr.ndim == 0:
        return float(alpha), float(sigma2)
    return alpha, sigma2


def perturb(x0, t, z, sched: DiffusionSchedule) -> np.ndarray:
    """Forward-process state ``alpha_t * x0 + sigma_t * z``."""
    x0 = np.asarray(x0, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    if x0.shape != z.shape:
        raise DomainError(f"x0 and z shapes differ: {x0.shape} vs {z.shape}")
    alpha, sigma2 = alpha_sigma(sched, t)
    if sigma2 == 0.0:
        return x0.copy()
    return alpha * x0 + math.sqrt(sigma2) * z


def _frozen(a) -> np.ndarray:
    arr = np.array(a, dtype=np.float64)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class GaussianMixture:
    """Equal-weight mixture of ``K`` Gaussians sharing a diagonal covariance.

    Args:
        means: ``(K, d)`` component means.
        comp_var: length-``d`` diagonal of the shared covariance, or a scalar
            broadcast to every coordinate.
        source: provenance descriptor (``{"kind": "given"}`` or the parameters
            of a random draw from ``N(0, mean_std**2 I)``).
    """

    means: np.ndarray
    comp_var: np.ndarray
    source: dict = field(default_factory=lambda: {"kind": "given"})

    def __post_init__(self):
        means = np.atleast_2d(np.asarray(self.means, dtype=np.float64))
        if means.ndim != 2 or means.shape[0] < 1 or means.shape[1] < 1:
            raise ValueError(f"means must be a non-empty (K, d) matrix, got shape {means.shape}")
        var = np.asarray(self.comp_var, dtype=np.float64)
        if var.ndim == 0:
            var = np.full(means.shape[1], float(var))
        if var.shape != (means.shape[1],):
            raise ValueError(f"comp_var must have length d={means.shape[1]}")
        if not np.all(var > 0) or not np.all(np.isfinite(var)):
            raise ValueError("comp_var entries must be positive and finite")
        if not np.all(np.isfinite(means)):
            raise ValueError("means must be finite")
        object.__setattr__(self, "means", _frozen(means))
        object.__setattr__(self, "comp_var", _frozen(var))

    @property
    def K(self) -> int:
        return self.means.shape[0]

    @property
    def d(self) -> int:
        return self.means.shape[1]

    @classmethod
    def random(cls, K: int, d: int, seed: int, mean_std: float = 2.0, comp_var=1.0) -> "GaussianMixture":
        """Means drawn i.i.d. from ``N(0, mean_std**2 I_d)`` (``mean_std=2`` gives ``N(0, 4I)``)."""
        if K < 1 or d < 1:
            raise ValueError("K and d must be >= 1")
        means = mean_std * Stream(seed, "mixture-means").normal((K, d))
        source = {"kind": "random", "K": K, "d": d, "seed": int(seed), "mean_std": float(mean_std)}
        return cls(means, comp_var, source)

    def diffused(self, sched: DiffusionSchedule, t: float) -> tuple[np.ndarray, np.ndarray]:
        """Means and diagonal variance of each component of the time-``t`` marginal."""
        alpha, sigma2 = alpha_sigma(sched, t)
        return alpha * self.means, alpha * alpha * self.comp_var + sigma2

    def to_dict(self) -> dict:
        return {
            "means": self.means.tolist(),
            "comp_var": self.comp_var.tolist(),
            "source": self.source,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "GaussianMixture":
        return cls(np.asarray(doc["means"], dtype=np.float64), doc["comp_var"], doc.get("source", {"kind": "given"}))

    def descriptor(self) -> dict:
        return self.to_dict()


def _gaussian_logpdf_diag(x: np.ndarray, means: np.ndarray, var: np.ndarray) -> np.ndarray:
    """``(m, K)`` log densities of rows of ``x`` under diagonal Gaussians."""
    diff = x[:, None, :] - means[None, :, :]
    quad = np.sum(diff * diff / var, axis=-1)
    return -0.5 * (quad + np.sum(np.log(2.0 * np.pi * var)))


def mixture_log_density(gm: GaussianMixture, x) -> np.ndarray | float:
    """Log density of the equal-weight mixture at ``x`` (a point or rows of points)."""
    return _mixture_logpdf(gm.means, gm.comp_var, x)


def _mixture_logpdf(means, var, x):
    arr = np.asarray(x, dtype=np.float64)
    single = arr.ndim == 1
    rows = np.atleast_2d(arr)
    if rows.shape[1] != means.shape[1]:
        raise DomainError(f"x has dimension {rows.shape[1]}, mixture has {means.shape[1]}")
    out = np.empty(rows.shape[0])
    step = max(1, 2_000_000 // (means.shape[0] * means.shape[1]))
    for lo in range(0, rows.shape[0], step):
        comp = _gaussian_logpdf_diag(rows[lo : lo + step], means, var)
        out[lo : lo + step] = logsumexp(comp, axis=1) - math.log(means.shape[0])
    return float(out[0]) if single else out


def diffused_log_density(gm: GaussianMixture, x, t: float, sched: DiffusionSchedule):
    """Log density of the time-``t`` marginal of the mixture."""
    means, var = gm.diffused(sched, t)
    return _mixture_logpdf(means, var, x)


@dataclass(frozen=True, eq=False)
class Dataset:
    """Training set drawn from a :class:`GaussianMixture`.

    ``samples`` is ``(n, d)``, ``labels[i]`` is the generating component of
    row ``i``; ``source`` is the mixture descriptor, so ``(source, seed)``
    regenerates the rows bit for bit.
    """

    samples: np.ndarray
    labels: np.ndarray
    seed: int
    source: dict

    def __post_init__(self):
        samples = np.atleast_2d(np.asarray(self.samples, dtype=np.float64))
        labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if samples.shape[0] < 1:
            raise ValueError("dataset must hold at least one sample")
        if labels.shape[0] != samples.shape[0]:
            raise ValueError("labels and samples disagree in length")
        samples.setflags(write=False)
        labels.setflags(write=False)
        object.__setattr__(self, "samples", samples)
        object.__setattr__(self, "labels", labels)

    @property
    def n(self) -> int:
        return self.samples.shape[0]

    @property
    def d(self) -> int:
        return self.samples.shape[1]

    @classmethod
    def from_points(cls, points, labels=None, seed: int = 0) -> "Dataset":
        """Wrap fixed points (labels default to zeros) with a ``given`` source."""
        pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
        if labels is None:
            labels = np.zeros(pts.shape[0], dtype=np.int64)
        return cls(pts, labels, seed, {"kind": "points"})

    def to_dict(self) -> dict:
        return {
            "n": self.n,
            "d": self.d,
            "seed": int(self.seed),
            "source": self.source,
            "samples": self.samples.tolist(),
            "labels": self.labels.tolist(),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "Dataset":
        return cls(np.asarray(doc["samples"], dtype=np.float64), doc["labels"], int(doc["seed"]), doc["source"])

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "Dataset":
        return cls.from_dict(json.loads(text))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow([f"x{j}" for j in range(self.d)] + ["label"])
        for row, lab in zip(self.samples, self.labels):
            w.writerow([repr(float(v)) for v in row] + [int(lab)])
        return buf.getvalue()


def sample_mixture(gm: GaussianMixture, n: int, seed: int) -> Dataset:
    """Draw ``n`` points: uniform component choice, then diagonal Gaussian noise."""
    if n < 1:
        raise ValueError("n must be >= 1")
    rs = Stream(seed, "dataset")
    labels = rs.spawn("labels").integers(gm.K, n)
    noise = rs.spawn("noise").normal((n, gm.d))
    samples = gm.means[labels] + np.sqrt(gm.comp_var) * noise
    return Dataset(samples, labels, int(seed), gm.descriptor())


def regenerate(dataset: Dataset) -> Dataset:
    """Rebuild a dataset from its ``(source, seed)`` provenance."""
    gm = GaussianMixture.from_dict(dataset.source)
    return sample_mixture(gm, dataset.n, dataset.seed)
