"""Monte Carlo estimators of the per-time DSM loss, Loss-Gap and Fisher divergence.

All estimators draw ``(i, z)`` pairs (training index, standard normal) from a
counter-based stream keyed by ``(seed, estimator, t)``, form
``X = alpha_t x_i + sigma_t z`` and average a per-draw statistic.  The loss
gap reuses one set of draws for both score fields (common random numbers).
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import stats

from memgap.diffusion import Dataset, DiffusionSchedule, GaussianMixture, alpha_sigma, sample_mixture
from memgap.rng import Stream, derive_seed
from memgap.scores import EmpiricalScore, MixtureScore, ScoreField

log = logging.getLogger(__name__)

_BLOCK = 1 << 15


@dataclass(frozen=True)
class GapEstimate:
    t: float
    mean: float
    stderr: float
    n_mc: int
    estimator: str
    seed: int

    def to_dict(self) -> dict:
        return asdict(self)


def _draws(data: Dataset, t: float, sched: DiffusionSchedule, n_mc: int, rs: Stream):
    """Yield blocks of ``(z, X)`` with ``X = alpha x_i + sigma z``."""
    alpha, sigma2 = alpha_sigma(sched, t)
    sigma = math.sqrt(sigma2)
    idx_rs, z_rs = rs.spawn("index"), rs.spawn("noise")
    for lo in range(0, n_mc, _BLOCK):
        m = min(_BLOCK, n_mc - lo)
        idx = idx_rs.integers(data.n, m)
        z = z_rs.normal((m, data.d))
        yield z, alpha * data.samples[idx] + sigma * z


def _summarize(values: np.ndarray, t: float, estimator: str, seed: int) -> GapEstimate:
    n = values.size
    mean = float(np.sum(values) / n)
    stderr = float(np.std(values, ddof=1) / math.sqrt(n))
    return GapEstimate(float(t), mean, stderr, int(n), estimator, int(seed))


def _check(sched: DiffusionSchedule, t: float, n_mc: int) -> None:
    sched.check(t)
    if n_mc < 2:
        raise ValueError("n_mc must be >= 2")


def dsm_loss_at_t(field: ScoreField, data: Dataset, t: float, sched: DiffusionSchedule, n_mc: int, seed: int) -> GapEstimate:
    """Unbiased MC estimate of ``(1/n) sum_i E_z ||-z/sigma_t - s(alpha_t x_i + sigma_t z, t)||^2``."""
    _check(sched, t, n_mc)
    sigma = math.sqrt(alpha_sigma(sched, t)[1])
    vals = []
    for z, x in _draws(data, t, sched, n_mc, Stream(seed, "dsm-loss", repr(float(t)))):
        r = -z / sigma - field.score(x, t)
        vals.append(np.sum(r * r, axis=1))
    return _summarize(np.concatenate(vals), t, "dsm_loss", seed)


def paired_loss_difference(field_a: ScoreField, field_b: ScoreField, data: Dataset, t: float, sched: DiffusionSchedule, n_mc: int, seed: int, estimator: str = "loss_gap") -> GapEstimate:
    """DSM loss of ``field_a`` minus that of ``field_b`` on shared ``(i, z)`` draws."""
    _check(sched, t, n_mc)
    sigma = math.sqrt(alpha_sigma(sched, t)[1])
    vals = []
    for z, x in _draws(data, t, sched, n_mc, Stream(seed, "loss-gap", repr(float(t)))):
        target = -z / sigma
        ra = target - field_a.score(x, t)
        rb = target - field_b.score(x, t)
        vals.append(np.sum(ra * ra, axis=1) - np.sum(rb * rb, axis=1))
    return _summarize(np.concatenate(vals), t, estimator, seed)


def loss_gap(data: Dataset, gm: GaussianMixture, t: float, sched: DiffusionSchedule, n_mc: int, seed: int) -> GapEstimate:
    """DSM loss of the ground-truth score minus that of the empirical score (CRN)."""
    return paired_loss_difference(MixtureScore(gm, sched), EmpiricalScore(data, sched), data, t, sched, n_mc, seed)


def loss_gap_independent(data: Dataset, gm: GaussianMixture, t: float, sched: DiffusionSchedule, n_mc: int, seed: int) -> GapEstimate:
    """Same quantity as :func:`loss_gap` but with independent draws per term (no CRN).

    Kept only as the baseline for the variance-reduction check.
    """
    a = dsm_loss_at_t(MixtureScore(gm, sched), data, t, sched, n_mc, derive_seed(seed, "indep-a"))
    b = dsm_loss_at_t(EmpiricalScore(data, sched), data, t, sched, n_mc, derive_seed(seed, "indep-b"))
    return GapEstimate(float(t), a.mean - b.mean, math.hypot(a.stderr, b.stderr), n_mc, "loss_gap_independent", int(seed))


def score_divergence(field_a: ScoreField, field_b: ScoreField, data: Dataset, t: float, sched: DiffusionSchedule, n_mc: int, seed: int) -> GapEstimate:
    """``E_{X ~ P_hat_t} ||s_a(X) - s_b(X)||^2`` by Monte Carlo."""
    _check(sched, t, n_mc)
    vals = []
    for _, x in _draws(data, t, sched, n_mc, Stream(seed, "fisher", repr(float(t)))):
        diff = field_a.score(x, t) - field_b.score(x, t)
        vals.append(np.sum(diff * diff, axis=1))
    return _summarize(np.concatenate(vals), t, "fisher", seed)


def fisher_divergence(data: Dataset, gm: GaussianMixture, t: float, sched: DiffusionSchedule, n_mc: int, seed: int) -> GapEstimate:
    """Fisher divergence of the noised empirical law from the noised mixture."""
    return score_divergence(EmpiricalScore(data, sched), MixtureScore(gm, sched), data, t, sched, n_mc, seed)


@dataclass
class SweepConfig:
    """Grid and mixture family for :func:`gap_sweep`.

    For each dimension a mixture is drawn with means from
    ``N(0, mean_std**2 I)``; each ``(n, d)`` gets its own dataset.
    """

    t_grid: list[float]
    n_list: list[int]
    d_list: list[int] = field(default_factory=lambda: [2])
    K: int = 4
    comp_var: float = 1.0
    mean_std: float = 2.0
    n_mc: int = 20_000
    seed: int = 0
    t0: float = 1e-3
    T: float = 5.0
    workers: int = 1


@dataclass
class SweepResult:
    grid: list[tuple[float, int, int, int]]
    estimates: list[tuple[GapEstimate, GapEstimate] | None]
    metadata: dict
    failures: list[dict] = field(default_factory=list)

    CSV_HEADER = ("t", "n", "d", "K", "gap_mean", "gap_se", "fisher_mean", "fisher_se", "seed")

    def rows(self) -> list[tuple]:
        out = []
        for (t, n, d, K), est in zip(self.grid, self.estimates):
            if est is None:
                out.append((t, n, d, K, math.nan, math.nan, math.nan, math.nan, None))
                continue
            g, f = est
            out.append((t, n, d, K, g.mean, g.stderr, f.mean, f.stderr, g.seed))
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.CSV_HEADER)
        for row in self.rows():
            w.writerow([_fmt(v) for v in row])
        return buf.getvalue()

    def to_json(self) -> str:
        doc = {
            "metadata": self.metadata,
            "grid": [list(g) for g in self.grid],
            "estimates": [None if e is None else [e[0].to_dict(), e[1].to_dict()] for e in self.estimates],
            "failures": self.failures,
        }
        return json.dumps(doc, sort_keys=True, indent=1)

    def gaps(self, n: int, d: int | None = None) -> tuple[np.ndarray, np.ndarray]:
        """``(t, gap_mean)`` for one sample size (and dimension)."""
        ts, gs = [], []
        for (t, nn, dd, _), est in zip(self.grid, self.estimates):
            if nn == n and (d is None or dd == d) and est is not None:
                ts.append(t)
                gs.append(est[0].mean)
        return np.array(ts), np.array(gs)


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _strictly_increasing(vals) -> bool:
    return all(a < b for a, b in zip(vals, vals[1:]))


def gap_sweep(cfg: SweepConfig) -> SweepResult:
    """Loss gap and Fisher divergence over the ``d x n x t`` grid.

    Cell seeds are derived from ``(cfg.seed, d, n, t-index)`` so the result
    does not depend on ``cfg.workers``.  A failing cell is recorded and the
    sweep continues.
    """
    for name in ("t_grid", "n_list", "d_list"):
        if not _strictly_increasing(list(getattr(cfg, name))):
            raise ValueError(f"{name} must be strictly increasing")
    sched = DiffusionSchedule(cfg.t0, cfg.T)
    grid = [(float(t), int(n), int(d), cfg.K) for d in cfg.d_list for n in cfg.n_list for t in cfg.t_grid]
    mixtures = {d: GaussianMixture.random(cfg.K, d, derive_seed(cfg.seed, "means", d), cfg.mean_std, cfg.comp_var) for d in cfg.d_list}
    datasets = {(n, d): sample_mixture(mixtures[d], n, derive_seed(cfg.seed, "data", n, d)) for d in cfg.d_list for n in cfg.n_list}

    def cell(k: int):
        t, n, d, _ = grid[k]
        s = derive_seed(cfg.seed, "cell", d, n, cfg.t_grid.index(t))
        data, gm = datasets[(n, d)], mixtures[d]
        return loss_gap(data, gm, t, sched, cfg.n_mc, s), fisher_divergence(data, gm, t, sched, cfg.n_mc, s)

    estimates: list = [None] * len(grid)
    failures = []
    workers = max(1, int(cfg.workers))
    with ThreadPoolExecutor(max_workers=workers) as pool:
        futures = [pool.submit(cell, k) for k in range(len(grid))]
        for k, fut in enumerate(futures):
            try:
                estimates[k] = fut.result()
            except Exception as exc:  # record and keep sweeping
                log.warning("sweep cell %s failed: %s", grid[k], exc)
                failures.append({"cell": list(grid[k]), "error": f"{type(exc).__name__}: {exc}"})
    metadata = {
        "schedule": sched.to_dict(),
        "seed": int(cfg.seed),
        "n_mc": int(cfg.n_mc),
        "mixtures": {str(d): gm.to_dict() for d, gm in mixtures.items()},
        "dataset_seeds": {f"{n},{d}": ds.seed for (n, d), ds in datasets.items()},
    }
    return SweepResult(grid, estimates, metadata, failures)


def integrated_gap(t: np.ndarray, gap: np.ndarray) -> float:
    """Trapezoid integral of the gap over its time grid."""
    return float(np.trapezoid(gap, t))


@dataclass
class TheoremReport:
    d_list: list[int]
    t_grid: list[float]
    inv_sigma2: list[float]
    mean_gap: dict[int, list[float]]
    slope: dict[int, float]
    intercept: dict[int, float]
    r2: dict[int, float]
    slope_over_d: dict[int, float]
    scaled_gap_at_smallest_t: dict[int, float]
    n: int
    n_datasets: int
    n_mc: int
    seed: int

    def to_dict(self) -> dict:
        doc = asdict(self)
        for k in ("mean_gap", "slope", "intercept", "r2", "slope_over_d", "scaled_gap_at_smallest_t"):
            doc[k] = {str(d): v for d, v in doc[k].items()}
        return doc

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("d", "t", "inv_sigma2", "mean_gap"))
        for d in self.d_list:
            for t, s, g in zip(self.t_grid, self.inv_sigma2, self.mean_gap[d]):
                w.writerow((d, repr(t), repr(s), repr(g)))
        return buf.getvalue()


def times_for_sigma2(sigma2_values, sched: DiffusionSchedule | None = None) -> list[float]:
    """Invert ``sigma2 = 1 - exp(-t)``."""
    return [float(-math.log1p(-s)) for s in sigma2_values]


def theorem_check(d_list, sched: DiffusionSchedule, t_small_grid, gm_family, n: int, n_mc: int, seed: int, n_datasets: int = 8) -> TheoremReport:
    """Dataset-averaged loss gap against ``1/sigma_t^2`` for several dimensions.

    Args:
        d_list: data dimensions to test.
        sched: schedule; every grid time must lie in ``[t0, T]``.
        t_small_grid: times in the small-``t`` regime (at least two).
        gm_family: callable ``d -> GaussianMixture``.
        n: training-set size per dataset.
        n_mc: MC draws per (dataset, t).
        seed: master seed; dataset ``j`` of dimension ``d`` uses
            ``derive_seed(seed, "theorem-data", d, j)``.
        n_datasets: number of datasets averaged per ``d``.
    """
    ts = sorted(float(t) for t in t_small_grid)
    if len(ts) < 2:
        raise ValueError("theorem_check needs at least two time points")
    if n_datasets < 1:
        raise ValueError("n_datasets must be >= 1")
    for t in ts:
        sched.check(t)
    inv_s2 = [1.0 / alpha_sigma(sched, t)[1] for t in ts]
    mean_gap, slope, intercept, r2, ratio, scaled = {}, {}, {}, {}, {}, {}
    for d in d_list:
        gm = gm_family(d)
        acc = np.zeros(len(ts))
        for j in range(n_datasets):
            data = sample_mixture(gm, n, derive_seed(seed, "theorem-data", d, j))
            for k, t in enumerate(ts):
                acc[k] += loss_gap(data, gm, t, sched, n_mc, derive_seed(seed, "theorem-mc", d, j, k)).mean
        g = acc / n_datasets
        fit = stats.linregress(inv_s2, g)
        mean_gap[d] = g.tolist()
        slope[d] = float(fit.slope)
        intercept[d] = float(fit.intercept)
        r2[d] = float(fit.rvalue**2)
        ratio[d] = float(fit.slope / d)
        scaled[d] = float(g[0] / inv_s2[0])
    return TheoremReport(list(d_list), ts, inv_s2, mean_gap, slope, intercept, r2, ratio, scaled, n, n_datasets, n_mc, seed)


def default_workers() -> int:
    env = os.environ.get("MEMGAP_THREADS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1
