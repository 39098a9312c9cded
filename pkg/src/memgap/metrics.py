"""Memorization ratio, mean log-likelihood and kNN precision/recall.

Distances are exact brute force.  Nearest-neighbor ties go to the smaller
training index.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass

import numpy as np

from memgap.diffusion import GaussianMixture, mixture_log_density

DEFAULT_THRESHOLD = 1.0 / 9.0
_CHUNK = 2_000_000


def _sq_dists(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    diff = a[:, None, :] - b[None, :, :]
    return np.sum(diff * diff, axis=-1)


def _as_rows(x, name: str) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"{name} must be a 2-D array")
    return arr


@dataclass(frozen=True)
class MemorizationReport:
    ratio: float
    flags: np.ndarray
    nn1_dist2: np.ndarray
    nn2_dist2: np.ndarray
    nn1_index: np.ndarray
    threshold_ratio: float

    def to_dict(self) -> dict:
        return {
            "ratio": self.ratio,
            "threshold_ratio": self.threshold_ratio,
            "flags": self.flags.astype(int).tolist(),
            "nn1_dist2": self.nn1_dist2.tolist(),
            "nn2_dist2": self.nn2_dist2.tolist(),
            "nn1_index": self.nn1_index.tolist(),
        }


def two_nearest(train: np.ndarray, generated: np.ndarray):
    """Squared distances to the nearest and second-nearest training rows, plus the nearest index."""
    m = generated.shape[0]
    nn1 = np.empty(m)
    nn2 = np.empty(m)
    idx1 = np.empty(m, dtype=np.int64)
    step = max(1, _CHUNK // max(1, train.shape[0] * train.shape[1]))
    for lo in range(0, m, step):
        d2 = _sq_dists(generated[lo : lo + step], train)
        # stable sort keeps the smaller index first among equal distances
        order = np.argsort(d2, axis=1, kind="stable")[:, :2]
        rows = np.arange(order.shape[0])
        idx1[lo : lo + step] = order[:, 0]
        nn1[lo : lo + step] = d2[rows, order[:, 0]]
        nn2[lo : lo + step] = d2[rows, order[:, 1]]
    return nn1, nn2, idx1


def memorization_ratio(train, generated, threshold_ratio: float = DEFAULT_THRESHOLD) -> MemorizationReport:
    """Fraction of generated rows whose nearest training row is much closer than the second.

    A row is flagged when ``nn1_dist2 <= threshold_ratio * nn2_dist2``.
    """
    train = _as_rows(train, "train")
    generated = _as_rows(generated, "generated")
    if train.shape[0] < 2:
        raise ValueError("memorization_ratio needs at least two training points")
    if generated.shape[0] < 1:
        raise ValueError("memorization_ratio needs at least one generated point")
    nn1, nn2, idx1 = two_nearest(train, generated)
    flags = nn1 <= threshold_ratio * nn2
    return MemorizationReport(float(np.mean(flags)), flags, nn1, nn2, idx1, float(threshold_ratio))


def mean_log_likelihood(gm: GaussianMixture, generated) -> float:
    """Average mixture log density over the generated rows."""
    generated = _as_rows(generated, "generated")
    if generated.shape[0] < 1:
        raise ValueError("mean_log_likelihood needs at least one row")
    return float(np.mean(mixture_log_density(gm, generated)))


def _kth_radius2(points: np.ndarray, k: int) -> np.ndarray:
    """Squared distance from each row to its k-th nearest other row."""
    d2 = _sq_dists(points, points)
    return np.partition(d2, k, axis=1)[:, k]


def _coverage(ref: np.ndarray, radius2: np.ndarray, query: np.ndarray) -> float:
    """Fraction of ``query`` rows inside at least one ``ref`` ball."""
    hit = np.zeros(query.shape[0], dtype=bool)
    step = max(1, _CHUNK // max(1, ref.shape[0] * ref.shape[1]))
    for lo in range(0, query.shape[0], step):
        d2 = _sq_dists(query[lo : lo + step], ref)
        hit[lo : lo + step] = np.any(d2 <= radius2[None, :], axis=1)
    return float(np.mean(hit))


def knn_precision_recall(real, generated, k: int = 3) -> tuple[float, float]:
    """Improved precision/recall with k-NN balls (radius = distance to k-th neighbor)."""
    real = _as_rows(real, "real")
    generated = _as_rows(generated, "generated")
    if k < 1 or k >= real.shape[0] or k >= generated.shape[0]:
        raise ValueError(f"need 1 <= k < n and k < m (k={k}, n={real.shape[0]}, m={generated.shape[0]})")
    precision = _coverage(real, _kth_radius2(real, k), generated)
    recall = _coverage(generated, _kth_radius2(generated, k), real)
    return precision, recall


@dataclass(frozen=True)
class EvalReport:
    ratio: float
    precision: float
    recall: float
    mean_ll: float
    n: int
    m: int
    seed: int
    k: int = 3
    threshold_ratio: float = DEFAULT_THRESHOLD

    CSV_HEADER = ("ratio", "precision", "recall", "mean_ll", "n", "m", "seed")

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.CSV_HEADER)
        w.writerow([repr(self.ratio), repr(self.precision), repr(self.recall), repr(self.mean_ll), self.n, self.m, self.seed])
        return buf.getvalue()

    def to_json(self) -> str:
        return json.dumps(self.__dict__, sort_keys=True, indent=1)


def evaluate(train, generated, gm: GaussianMixture, seed: int = 0, k: int = 3, threshold_ratio: float = DEFAULT_THRESHOLD) -> EvalReport:
    mem = memorization_ratio(train, generated, threshold_ratio)
    precision, recall = knn_precision_recall(train, generated, k)
    return EvalReport(mem.ratio, precision, recall, mean_log_likelihood(gm, generated), len(train), len(generated), int(seed), k, threshold_ratio)
