"""Gradient-based hidden-unit importance, one-shot pruning and fine-tuning.

Each hidden unit ``h`` carries an implicit multiplicative gate ``xi_h``
(fixed at 1).  Its importance is the accumulated magnitude of the DSM loss
gradient with respect to that gate.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field

import numpy as np

from memgap.diffusion import Dataset, DiffusionSchedule, GaussianMixture
from memgap.metrics import MemorizationReport, mean_log_likelihood, memorization_ratio
from memgap.net import MlpScoreNet, NetworkScore, TrainConfig, dsm_step_loss_and_grads, train
from memgap.rng import Stream
from memgap.sampler import SampleConfig, generate


class PruningError(ValueError):
    pass


@dataclass(frozen=True)
class TimeDist:
    """Time law on ``[t0, T]``: ``t0 + (T - t0) * B`` with ``B ~ Beta(a, b)``.

    ``kind="uniform"`` is ``Beta(1, 1)``.
    """

    kind: str = "beta"
    a: float = 0.8
    b: float = 2.0

    def __post_init__(self):
        if self.kind not in ("beta", "uniform"):
            raise ValueError(f"time distribution must be 'beta' or 'uniform', got {self.kind!r}")
        if not (self.a > 0 and self.b > 0):
            raise ValueError("Beta parameters must be positive")

    def sample(self, sched: DiffusionSchedule, rs: Stream, size: int) -> np.ndarray:
        u = rs.uniform(size) if self.kind == "uniform" else rs.beta(self.a, self.b, size)
        return sched.t0 + (sched.T - sched.t0) * u

    def descriptor(self) -> str:
        return "uniform" if self.kind == "uniform" else f"beta({self.a!r},{self.b!r})"


def beta_time_sample(a: float, b: float, sched: DiffusionSchedule, seed: int, size: int = 1) -> np.ndarray:
    """Draw ``size`` times ``t0 + (T - t0) * Beta(a, b)``."""
    if not (a > 0 and b > 0):
        raise ValueError("Beta parameters must be positive")
    u = Stream(seed, "beta-time").beta(a, b, size)
    return sched.t0 + (sched.T - sched.t0) * u


@dataclass
class ImportanceReport:
    raw: list[np.ndarray]
    normalized: list[np.ndarray]
    batches_used: int
    t_distribution: str

    def to_dict(self) -> dict:
        return {
            "raw": [r.tolist() for r in self.raw],
            "normalized": [r.tolist() for r in self.normalized],
            "batches_used": self.batches_used,
            "t_distribution": self.t_distribution,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1)


def importance_scores(
    net: MlpScoreNet,
    data: Dataset,
    sched: DiffusionSchedule,
    t_dist: TimeDist = TimeDist(),
    n_batches: int = 16,
    batch: int = 128,
    seed: int = 0,
    weighting: str = "eps_matching",
) -> ImportanceReport:
    """Accumulate ``|dL/d xi_h|`` over ``n_batches`` DSM batches and normalize per layer.

    Per-batch magnitudes are summed with ``math.fsum`` so the result does
    not depend on batch order.  A layer whose scores are all zero gets the
    uniform vector ``1/sqrt(width)``.
    """
    if net.n_hidden_units == 0 or not net.hidden:
        raise PruningError("network has no hidden units")
    if any(np.any(m != 1) for m in net.masks):
        raise PruningError("importance scores require all masks to be on")
    if n_batches < 1 or batch < 1:
        raise ValueError("n_batches and batch must be >= 1")
    rs = Stream(seed, "importance")
    idx_rs, t_rs, z_rs = rs.spawn("index"), rs.spawn("time"), rs.spawn("noise")
    per_batch: list[list[np.ndarray]] = [[] for _ in net.hidden]
    for _ in range(n_batches):
        idx = idx_rs.integers(data.n, batch)
        t = t_dist.sample(sched, t_rs, batch)
        z = z_rs.normal((batch, data.d))
        _, _, units = dsm_step_loss_and_grads(net, data.samples[idx], t, z, sched, weighting, with_units=True)
        for layer, g in enumerate(units):
            per_batch[layer].append(np.abs(g))
    raw, normalized = [], []
    for rows in per_batch:
        stacked = np.stack(rows)
        s = np.array([math.fsum(stacked[:, h]) for h in range(stacked.shape[1])])
        norm = math.sqrt(math.fsum(s * s))
        raw.append(s)
        normalized.append(s / norm if norm > 0 else np.full(s.shape, 1.0 / math.sqrt(s.size)))
    return ImportanceReport(raw, normalized, n_batches, t_dist.descriptor())


def _ranking(scores: list[np.ndarray]) -> list[tuple[int, int]]:
    keys = [(float(v), layer, h) for layer, vec in enumerate(scores) for h, v in enumerate(vec)]
    keys.sort()
    return [(layer, h) for _, layer, h in keys]


def one_shot_prune(
    net: MlpScoreNet,
    report: ImportanceReport | None,
    eta: float,
    use_raw: bool = False,
    random_seed: int | None = None,
):
    """Mask the ``floor(eta * H)`` globally lowest-scored hidden units.

    Ranking is ascending by normalized score (``use_raw`` ranks raw scores),
    ties broken by layer then index.  With ``random_seed`` set, the units are
    instead a uniformly random subset and ``report`` may be ``None``.

    Returns:
        ``(pruned_net, pruned_ids)`` with ids as ``(layer, unit)`` pairs.

    Raises:
        PruningError: if some layer would lose all its units.
    """
    if not 0.0 <= eta <= 1.0:
        raise ValueError("eta must lie in [0, 1]")
    H = net.n_hidden_units
    count = math.floor(eta * H)
    if random_seed is not None:
        ids = [(layer, h) for layer, w in enumerate(net.hidden) for h in range(w)]
        u = Stream(random_seed, "random-prune").uniform(H)
        order = np.argsort(u, kind="stable")
        chosen = [ids[i] for i in order[:count]]
    else:
        if report is None:
            raise ValueError("score-based pruning needs an ImportanceReport")
        chosen = _ranking(report.raw if use_raw else report.normalized)[:count]
    out = net.copy()
    for layer, h in chosen:
        out.masks[layer][h] = 0.0
    for layer, m in enumerate(out.masks):
        if not np.any(m):
            raise PruningError(f"pruning {count} units would empty hidden layer {layer}")
    chosen.sort()
    return out, chosen


def prune_decisions_csv(report: ImportanceReport, pruned) -> str:
    """CSV ``layer,unit,score,pruned`` with the normalized score."""
    pruned = set(map(tuple, pruned))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["layer", "unit", "score", "pruned"])
    for layer, vec in enumerate(report.normalized):
        for h, v in enumerate(vec):
            w.writerow([layer, h, repr(float(v)), int((layer, h) in pruned)])
    return buf.getvalue()


@dataclass
class PruneResult:
    net: MlpScoreNet
    before: MemorizationReport
    after: MemorizationReport
    pruned: list
    report: ImportanceReport | None
    before_ll: float | None = None
    after_ll: float | None = None
    trace: list = field(default_factory=list)

    def summary(self) -> dict:
        return {
            "before_ratio": self.before.ratio,
            "after_ratio": self.after.ratio,
            "before_mean_ll": self.before_ll,
            "after_mean_ll": self.after_ll,
            "n_pruned": len(self.pruned),
        }


def prune_pipeline(
    net: MlpScoreNet,
    data: Dataset,
    sched: DiffusionSchedule,
    eta: float,
    t_dist: TimeDist,
    finetune_cfg: TrainConfig,
    sample_cfg: SampleConfig,
    gm: GaussianMixture | None = None,
    n_batches: int = 16,
    batch: int = 128,
    seed: int = 0,
    random_baseline: bool = False,
) -> PruneResult:
    """Score, prune, fine-tune with masks frozen, then sample and evaluate.

    Both before and after sample sets use ``sample_cfg`` so they share
    seeds.  ``gm`` enables mean log-likelihood in the result.
    """
    if finetune_cfg.steps < 0:
        raise ValueError("fine-tune steps must be >= 0")

    def _eval(model: MlpScoreNet):
        x = generate(NetworkScore(model, sched), sample_cfg, d=model.d)
        ll = mean_log_likelihood(gm, x) if gm is not None else None
        return memorization_ratio(data.samples, x), ll

    before, before_ll = _eval(net)
    if random_baseline:
        report = None
        pruned_net, pruned = one_shot_prune(net, None, eta, random_seed=seed)
    else:
        report = importance_scores(net, data, sched, t_dist, n_batches, batch, seed)
        pruned_net, pruned = one_shot_prune(net, report, eta)
    trace: list = []
    if finetune_cfg.steps > 0:
        pruned_net, trace = train(pruned_net, data, finetune_cfg, sched)
    after, after_ll = _eval(pruned_net)
    return PruneResult(pruned_net, before, after, pruned, report, before_ll, after_ll, trace)
