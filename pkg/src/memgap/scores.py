"""Exact score functions, Hessians and Lipschitz diagnostics.

Two closed-form fields live here: the empirical score of the noised training
set ``(1/n) sum_i N(alpha_t x_i, sigma_t^2 I)`` and the exact score of a
diffused :class:`~memgap.diffusion.GaussianMixture`.  Both take a single
point ``(d,)`` or a batch ``(m, d)`` and a scalar time.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Protocol, runtime_checkable

import numpy as np
from scipy.special import logsumexp

from memgap.diffusion import Dataset, DiffusionSchedule, DomainError, GaussianMixture, alpha_sigma
from memgap.rng import Stream

_CHUNK = 4_000_000


@runtime_checkable
class ScoreField(Protocol):
    """Anything that maps ``(x, t)`` to a score; ``tag`` names its family."""

    tag: str

    def score(self, x: np.ndarray, t: float) -> np.ndarray: ...


@dataclass(frozen=True)
class SoftmaxWeights:
    weights: np.ndarray
    log_weights: np.ndarray


def _rows(x) -> tuple[np.ndarray, bool]:
    arr = np.asarray(x, dtype=np.float64)
    return np.atleast_2d(arr), arr.ndim == 1


def _log_weights(points: np.ndarray, x: np.ndarray, alpha: float, sigma2: float) -> np.ndarray:
    """``(m, n)`` normalized log softmax weights of ``x`` rows over ``alpha * points``."""
    diff = x[:, None, :] - alpha * points[None, :, :]
    logits = -np.sum(diff * diff, axis=-1) / (2.0 * sigma2)
    return logits - logsumexp(logits, axis=1, keepdims=True)


def _chunks(m: int, n: int, d: int):
    step = max(1, _CHUNK // max(1, n * d))
    for lo in range(0, m, step):
        yield slice(lo, min(m, lo + step))


def empirical_score(data: Dataset, x, t: float, sched: DiffusionSchedule):
    """Score of the noised empirical law and its softmax weights.

    Returns ``(score, SoftmaxWeights)`` where the score is
    ``-(x - alpha_t * sum_i w_i x_i) / sigma_t^2``.
    """
    sched.check(t)
    pts = data.samples
    rows, single = _rows(x)
    alpha, sigma2 = alpha_sigma(sched, t)
    logw = np.empty((rows.shape[0], pts.shape[0]))
    for sl in _chunks(rows.shape[0], pts.shape[0], pts.shape[1]):
        logw[sl] = _log_weights(pts, rows[sl], alpha, sigma2)
    w = np.exp(logw)
    s = -(rows - alpha * (w @ pts)) / sigma2
    if single:
        return s[0], SoftmaxWeights(w[0], logw[0])
    return s, SoftmaxWeights(w, logw)


def _empirical_score_only(pts: np.ndarray, rows: np.ndarray, alpha: float, sigma2: float) -> np.ndarray:
    out = np.empty_like(rows)
    for sl in _chunks(rows.shape[0], pts.shape[0], pts.shape[1]):
        w = np.exp(_log_weights(pts, rows[sl], alpha, sigma2))
        out[sl] = -(rows[sl] - alpha * (w @ pts)) / sigma2
    return out


def empirical_log_density(data: Dataset, x, t: float, sched: DiffusionSchedule):
    """``log p_hat_t(x)`` via stabilized log-sum-exp (used as a finite-difference oracle)."""
    pts = data.samples
    rows, single = _rows(x)
    alpha, sigma2 = alpha_sigma(sched, t)
    diff = rows[:, None, :] - alpha * pts[None, :, :]
    logits = -np.sum(diff * diff, axis=-1) / (2.0 * sigma2)
    d = pts.shape[1]
    out = logsumexp(logits, axis=1) - math.log(pts.shape[0]) - 0.5 * d * math.log(2.0 * math.pi * sigma2)
    return float(out[0]) if single else out


def _responsibilities(gm: GaussianMixture, rows: np.ndarray, alpha: float, sigma2: float):
    means = alpha * gm.means
    var = alpha * alpha * gm.comp_var + sigma2
    diff = rows[:, None, :] - means[None, :, :]
    logits = -0.5 * np.sum(diff * diff / var, axis=-1)
    r = np.exp(logits - logsumexp(logits, axis=1, keepdims=True))
    return r, means, var


def mixture_score(gm: GaussianMixture, x, t: float, sched: DiffusionSchedule) -> np.ndarray:
    """Exact score of the diffused mixture (component softmax of closed forms)."""
    sched.check(t)
    rows, single = _rows(x)
    if rows.shape[1] != gm.d:
        raise DomainError(f"x has dimension {rows.shape[1]}, mixture has {gm.d}")
    alpha, sigma2 = alpha_sigma(sched, t)
    out = np.empty_like(rows)
    for sl in _chunks(rows.shape[0], gm.K, gm.d):
        r, means, var = _responsibilities(gm, rows[sl], alpha, sigma2)
        out[sl] = -(rows[sl] - r @ means) / var
    return out[0] if single else out


def empirical_hessian(data: Dataset, x, t: float, sched: DiffusionSchedule) -> np.ndarray:
    """``-I/sigma^2 + (alpha^2/sigma^4) Cov_w[x_i]`` at a single point ``x``."""
    sched.check(t)
    x = np.asarray(x, dtype=np.float64)
    alpha, sigma2 = alpha_sigma(sched, t)
    pts = data.samples
    w = np.exp(_log_weights(pts, x[None, :], alpha, sigma2)[0])
    centered = pts - w @ pts
    cov = (centered * w[:, None]).T @ centered
    cov = 0.5 * (cov + cov.T)
    d = pts.shape[1]
    return -np.eye(d) / sigma2 + (alpha * alpha / (sigma2 * sigma2)) * cov


def mixture_posterior_moments(gm: GaussianMixture, x, t: float, sched: DiffusionSchedule):
    """Posterior mean and covariance of ``X_0`` given ``X_t = x`` under the mixture.

    Each component's Gaussian posterior is formed in closed form and the
    results are combined with the component responsibilities (law of total
    covariance).
    """
    x = np.asarray(x, dtype=np.float64)
    alpha, sigma2 = alpha_sigma(sched, t)
    r, _, var_t = _responsibilities(gm, x[None, :], alpha, sigma2)
    r = r[0]
    v = gm.comp_var
    gain = alpha * v / var_t
    comp_means = gm.means + gain * (x - alpha * gm.means)
    comp_cov = v * sigma2 / var_t
    mean = r @ comp_means
    centered = comp_means - mean
    cov = np.diag(comp_cov) + (centered * r[:, None]).T @ centered
    return mean, 0.5 * (cov + cov.T)


def mixture_hessian(gm: GaussianMixture, x, t: float, sched: DiffusionSchedule) -> np.ndarray:
    """Exact Hessian of the diffused mixture log density at a single point."""
    sched.check(t)
    alpha, sigma2 = alpha_sigma(sched, t)
    _, cov = mixture_posterior_moments(gm, x, t, sched)
    return -np.eye(gm.d) / sigma2 + (alpha * alpha / (sigma2 * sigma2)) * cov


def tweedie_posterior_mean(field: ScoreField, x, t: float, sched: DiffusionSchedule) -> np.ndarray:
    """Posterior mean ``(sigma_t^2 * score + x) / alpha_t``."""
    alpha, sigma2 = alpha_sigma(sched, t)
    x = np.asarray(x, dtype=np.float64)
    return (sigma2 * field.score(x, t) + x) / alpha


class EmpiricalScore:
    """Empirical score field of a dataset."""

    tag = "empirical"

    def __init__(self, data: Dataset, sched: DiffusionSchedule):
        self.data = data
        self.sched = sched

    def score(self, x, t):
        self.sched.check(t)
        rows, single = _rows(x)
        alpha, sigma2 = alpha_sigma(self.sched, t)
        s = _empirical_score_only(self.data.samples, rows, alpha, sigma2)
        return s[0] if single else s

    def hessian(self, x, t):
        return empirical_hessian(self.data, x, t, self.sched)


class MixtureScore:
    """Ground-truth score field of a diffused Gaussian mixture."""

    tag = "mixture"

    def __init__(self, gm: GaussianMixture, sched: DiffusionSchedule):
        self.gm = gm
        self.sched = sched

    def score(self, x, t):
        return mixture_score(self.gm, x, t, self.sched)

    def hessian(self, x, t):
        return mixture_hessian(self.gm, x, t, self.sched)


class SpectralNormError(RuntimeError):
    """Power iteration hit its cap; ``estimate`` holds the last iterate's value."""

    def __init__(self, message: str, estimate: float):
        super().__init__(message)
        self.estimate = estimate


def _top_eigenvalue(B: np.ndarray, v: np.ndarray, tol: float, max_iter: int, scale: float) -> tuple[float, np.ndarray]:
    """Largest eigenvalue of symmetric PSD ``B`` by power iteration.

    Converged when the residual falls below ``tol * scale`` or the Rayleigh
    quotient moves by less than ``1e-2 * tol`` relative in one step.
    """
    v = v / np.linalg.norm(v)
    rho_prev = math.inf
    rho = float(v @ B @ v)
    for _ in range(max_iter):
        Bv = B @ v
        rho = float(v @ Bv)
        if np.linalg.norm(Bv - rho * v) <= tol * scale or abs(rho - rho_prev) <= 1e-2 * tol * abs(rho):
            return rho, v
        rho_prev = rho
        nb = np.linalg.norm(Bv)
        if nb == 0.0:
            return rho, v
        v = Bv / nb
    raise SpectralNormError(f"power iteration did not converge in {max_iter} iterations", rho)


def spectral_norm(H, tol: float = 1e-8, max_iter: int = 10_000) -> float:
    """Largest absolute eigenvalue of a symmetric matrix.

    ``lambda_max`` comes from power iteration on ``H + cI`` with ``c`` the
    smaller of the Gershgorin and Frobenius bounds on ``||H||`` (so the
    iterate matrix is PSD).  ``lambda_min`` then comes from power iteration on
    ``lambda_max I - H``, whose spectrum starts at zero; this shift removes
    the stall on nearly equal eigenvalue pairs that a symmetric shift hits.

    Raises:
        SpectralNormError: if either iteration reaches ``max_iter``; the
            error's ``estimate`` is the best spectral-norm value so far.
    """
    H = np.asarray(H, dtype=np.float64)
    if H.ndim != 2 or H.shape[0] != H.shape[1]:
        raise ValueError("H must be square")
    c = min(float(np.max(np.sum(np.abs(H), axis=1))), float(np.linalg.norm(H)))
    if c == 0.0:
        return 0.0
    eye = np.eye(H.shape[0])
    v0 = Stream(0, "spectral-norm-start").uniform(H.shape[0]) + 0.5
    try:
        top, _ = _top_eigenvalue(H + c * eye, v0, tol, max_iter, c)
    except SpectralNormError as err:
        raise SpectralNormError(str(err), abs(err.estimate - c)) from None
    lam_max = top - c
    try:
        span, _ = _top_eigenvalue(lam_max * eye - H, v0, tol, max_iter, c)
    except SpectralNormError as err:
        raise SpectralNormError(str(err), max(abs(lam_max), abs(lam_max - err.estimate))) from None
    lam_min = lam_max - span
    return max(abs(lam_max), abs(lam_min))


@dataclass(frozen=True)
class LipschitzReport:
    t: float
    min_pair_dist: float
    max_pair_dist: float
    separation_ok: bool
    separation_required: float
    lower_bound: float
    upper_bound: float
    measured_sup: float
    probe_count: int
    unconverged_probes: int = 0
    probe_set: str = "closest-pair midpoint + perturbed data points (radius sigma_t)"

    def to_dict(self) -> dict:
        return asdict(self)


def pair_distances(points: np.ndarray) -> tuple[float, float, tuple[int, int]]:
    """Minimum and maximum pairwise distances and the index pair attaining the minimum."""
    pts = np.asarray(points, dtype=np.float64)
    diff = pts[:, None, :] - pts[None, :, :]
    dist = np.sqrt(np.sum(diff * diff, axis=-1))
    n = pts.shape[0]
    iu = np.triu_indices(n, k=1)
    flat = dist[iu]
    k = int(np.argmin(flat))
    return float(flat[k]), float(flat.max()), (int(iu[0][k]), int(iu[1][k]))


def separation_threshold(n: int, t: float, sched: DiffusionSchedule) -> float:
    """Minimum pairwise distance needed for the Lipschitz sandwich at time ``t``.

    ``(2 sigma_t / alpha_t) sqrt(log((n - 2) / 2))``; the log is clipped at
    zero, so for ``n <= 4`` any configuration qualifies.
    """
    alpha, sigma2 = alpha_sigma(sched, t)
    return 2.0 * math.sqrt(sigma2) / alpha * math.sqrt(max(0.0, math.log((n - 2) / 2.0)))


def max_separated_time(points, sched: DiffusionSchedule) -> float:
    """Largest ``t`` at which the separation condition holds for ``points``."""
    n = len(points)
    dmin, _, _ = pair_distances(points)
    L = max(0.0, math.log((n - 2) / 2.0))
    if L == 0.0:
        return sched.T
    # sigma/alpha = sqrt(e^t - 1)
    return min(sched.T, math.log1p((dmin / (2.0 * math.sqrt(L))) ** 2))


def lipschitz_report(data: Dataset, t: float, sched: DiffusionSchedule, probe_count: int = 32, seed: int = 0) -> LipschitzReport:
    """Evaluate both sides of the Lipschitz sandwich and a probed supremum.

    The measured supremum is the largest Hessian spectral norm over the
    midpoint of the closest pair (mapped to ``alpha_t`` scale) and
    ``probe_count`` data points perturbed by ``sigma_t``-scaled noise.
    """
    n = data.n
    if n <= 2:
        raise ValueError("lipschitz_report requires n > 2")
    sched.check(t)
    alpha, sigma2 = alpha_sigma(sched, t)
    sigma = math.sqrt(sigma2)
    dmin, dmax, (i, j) = pair_distances(data.samples)
    required = separation_threshold(n, t, sched)
    lower = -1.0 / sigma2 + alpha * alpha / (16.0 * sigma2 * sigma2) * dmin * dmin
    upper = 1.0 / sigma2 + alpha * alpha / (4.0 * sigma2 * sigma2) * dmax * dmax

    rs = Stream(seed, "lipschitz-probes")
    idx = rs.spawn("index").integers(n, probe_count)
    z = rs.spawn("noise").normal((probe_count, data.d))
    probes = [0.5 * alpha * (data.samples[i] + data.samples[j])]
    probes.extend(alpha * data.samples[idx] + sigma * z)
    sup = 0.0
    unconverged = 0
    for p in probes:
        try:
            val = spectral_norm(empirical_hessian(data, p, t, sched))
        except SpectralNormError as err:
            # clustered eigenvalues; the estimate is within the cluster spread
            val = err.estimate
            unconverged += 1
        sup = max(sup, val)
    return LipschitzReport(
        t=float(t),
        min_pair_dist=dmin,
        max_pair_dist=dmax,
        separation_ok=bool(dmin >= required),
        separation_required=required,
        lower_bound=lower,
        upper_bound=upper,
        measured_sup=float(sup),
        probe_count=int(probe_count),
        unconverged_probes=unconverged,
    )
