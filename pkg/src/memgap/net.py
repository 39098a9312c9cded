"""ReLU MLP score network with hand-written backprop, AdamW and DSM training.

The network predicts the injected noise ``eps_hat`` from features
``[x, sin/cos(2^k pi t/T), sigma_t]`` and reports the score
``-eps_hat / sigma_t``.  Hidden units carry 0/1 masks; a masked unit emits
zero and neither it nor its incoming/outgoing weights get updated.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from memgap.diffusion import Dataset, DiffusionSchedule, DomainError, alpha_sigma
from memgap.rng import Stream

log = logging.getLogger(__name__)

MAGIC = b"MEMGAP01"
VERSION = 1


class TrainingDiverged(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass
class MlpScoreNet:
    d: int
    hidden: tuple[int, ...]
    fourier_pairs: int
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    masks: list[np.ndarray]
    meta: dict = field(default_factory=dict)

    @property
    def layer_dims(self) -> list[int]:
        return [self.in_dim, *self.hidden, self.d]

    @property
    def in_dim(self) -> int:
        return self.d + 2 * self.fourier_pairs + 1

    @property
    def param_count(self) -> int:
        return sum(W.size + b.size for W, b in zip(self.weights, self.biases))

    @property
    def n_hidden_units(self) -> int:
        return int(sum(self.hidden))

    def copy(self) -> "MlpScoreNet":
        return MlpScoreNet(
            self.d,
            tuple(self.hidden),
            self.fourier_pairs,
            [W.copy() for W in self.weights],
            [b.copy() for b in self.biases],
            [m.copy() for m in self.masks],
            dict(self.meta),
        )

    def params(self) -> list[np.ndarray]:
        """Parameters in checkpoint order: ``W_0, b_0, W_1, b_1, ...``."""
        out = []
        for W, b in zip(self.weights, self.biases):
            out += [W, b]
        return out


def init_mlp(d: int, hidden_dims, fourier_pairs: int = 4, seed: int = 0) -> MlpScoreNet:
    """He-initialized network: ``W ~ N(0, 2/fan_in)``, zero biases, all masks on."""
    hidden = tuple(int(h) for h in hidden_dims)
    if d < 1 or fourier_pairs < 0 or any(h < 1 for h in hidden):
        raise ValueError("dimensions must be >= 1")
    dims = [d + 2 * fourier_pairs + 1, *hidden, d]
    rs = Stream(seed, "init-mlp")
    weights, biases = [], []
    for layer, (fan_in, fan_out) in enumerate(zip(dims[:-1], dims[1:])):
        weights.append(math.sqrt(2.0 / fan_in) * rs.spawn("W", layer).normal((fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    masks = [np.ones(h) for h in hidden]
    return MlpScoreNet(d, hidden, fourier_pairs, weights, biases, masks)


def time_features(t, sched: DiffusionSchedule, fourier_pairs: int, m: int) -> np.ndarray:
    """``(m, 2P + 1)`` Fourier features of ``t / T`` followed by ``sigma_t``."""
    tt = np.broadcast_to(np.asarray(t, dtype=np.float64), (m,))
    u = tt / sched.T
    freqs = (2.0 ** np.arange(fourier_pairs)) * np.pi
    ang = u[:, None] * freqs[None, :]
    sigma = np.sqrt(alpha_sigma(sched, tt)[1])
    return np.concatenate([np.sin(ang), np.cos(ang), sigma[:, None]], axis=1)


def _features(net: MlpScoreNet, x, t, sched: DiffusionSchedule):
    rows = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if rows.shape[1] != net.d:
        raise DomainError(f"x has dimension {rows.shape[1]}, network expects {net.d}")
    sched.check(t)
    tf = time_features(t, sched, net.fourier_pairs, rows.shape[0])
    return np.concatenate([rows, tf], axis=1), tf[:, -1:]


def _forward(net: MlpScoreNet, feats: np.ndarray):
    """Return ``eps_hat`` and the cache ``(inputs per layer, pre-activations)``."""
    h = feats
    inputs, pre = [], []
    last = len(net.weights) - 1
    for layer, (W, b) in enumerate(zip(net.weights, net.biases)):
        inputs.append(h)
        a = h @ W + b
        if layer < last:
            pre.append(a)
            h = np.maximum(a, 0.0) * net.masks[layer]
        else:
            h = a
    return h, (inputs, pre)


def _backward(net: MlpScoreNet, cache, g_out: np.ndarray, need_input: bool = False):
    """Reverse pass from ``dL/d eps_hat``.

    Returns ``(grads, unit_grads, input_grad)`` where ``grads`` follows
    :meth:`MlpScoreNet.params` order and ``unit_grads[l][h]`` is
    ``dL/d xi_h`` for a multiplicative gate on unit ``h`` of hidden layer ``l``.
    """
    inputs, pre = cache
    L = len(net.weights)
    gW: list = [None] * L
    gb: list = [None] * L
    unit = [None] * (L - 1)
    delta = g_out
    input_grad = None
    for layer in range(L - 1, -1, -1):
        gW[layer] = inputs[layer].T @ delta
        gb[layer] = delta.sum(axis=0)
        if layer > 0 or need_input:
            dh = delta @ net.weights[layer].T
        if layer > 0:
            a = pre[layer - 1]
            act = np.maximum(a, 0.0)
            unit[layer - 1] = np.sum(act * dh, axis=0)
            delta = dh * net.masks[layer - 1] * (a > 0.0)
        elif need_input:
            input_grad = dh
    grads = []
    for W, b in zip(gW, gb):
        grads += [W, b]
    return grads, unit, input_grad


def forward_eps(net: MlpScoreNet, x, t, sched: DiffusionSchedule) -> np.ndarray:
    feats, _ = _features(net, x, t, sched)
    return _forward(net, feats)[0]


def forward_score(net: MlpScoreNet, x, t, sched: DiffusionSchedule) -> np.ndarray:
    """Network score ``-eps_hat / sigma_t`` at a point or rows of points."""
    single = np.asarray(x).ndim == 1
    feats, sigma = _features(net, x, t, sched)
    eps = _forward(net, feats)[0]
    s = -eps / sigma
    return s[0] if single else s


def score_vjp_x(net: MlpScoreNet, x, t, sched: DiffusionSchedule, v) -> np.ndarray:
    """``J^T v`` where ``J`` is the Jacobian of the score with respect to ``x``."""
    rows = np.atleast_2d(np.asarray(x, dtype=np.float64))
    vv = np.atleast_2d(np.asarray(v, dtype=np.float64))
    feats, sigma = _features(net, rows, t, sched)
    _, cache = _forward(net, feats)
    _, _, gin = _backward(net, cache, -vv / sigma, need_input=True)
    out = gin[:, : net.d]
    return out[0] if np.asarray(x).ndim == 1 else out


class NetworkScore:
    """Score field backed by an :class:`MlpScoreNet`."""

    tag = "network"

    def __init__(self, net: MlpScoreNet, sched: DiffusionSchedule, chunk: int = 8192):
        self.net = net
        self.sched = sched
        self.chunk = chunk

    def score(self, x, t):
        rows = np.asarray(x, dtype=np.float64)
        if rows.ndim == 1:
            return forward_score(self.net, rows, t, self.sched)
        out = np.empty_like(rows)
        for lo in range(0, rows.shape[0], self.chunk):
            out[lo : lo + self.chunk] = forward_score(self.net, rows[lo : lo + self.chunk], t, self.sched)
        return out


WEIGHTINGS = ("eps_matching", "eq1_raw")


def dsm_step_loss_and_grads(net: MlpScoreNet, batch, t_draws, z_draws, sched: DiffusionSchedule, weighting: str = "eps_matching", with_units: bool = False):
    """Batch-mean DSM loss and its exact parameter gradients.

    ``eps_matching`` uses ``||eps_hat - z||^2`` per sample; ``eq1_raw`` uses
    ``||-z/sigma_t - s_hat||^2 = ||eps_hat - z||^2 / sigma_t^2``.

    Returns ``(loss, grads)`` or, with ``with_units``, ``(loss, grads, unit_grads)``.
    """
    x0 = np.atleast_2d(np.asarray(batch, dtype=np.float64))
    z = np.atleast_2d(np.asarray(z_draws, dtype=np.float64))
    t = np.asarray(t_draws, dtype=np.float64).reshape(-1)
    m = x0.shape[0]
    if m == 0:
        raise ValueError("batch must be nonempty")
    if z.shape != x0.shape or t.shape[0] != m:
        raise ValueError(f"shape mismatch: batch {x0.shape}, z {z.shape}, t {t.shape}")
    if weighting not in WEIGHTINGS:
        raise ValueError(f"unknown weighting {weighting!r}")
    alpha, sigma2 = alpha_sigma(sched, t)
    xt = alpha[:, None] * x0 + np.sqrt(sigma2)[:, None] * z
    feats, _ = _features(net, xt, t, sched)
    eps, cache = _forward(net, feats)
    r = eps - z
    per = np.sum(r * r, axis=1)
    w = np.ones(m) if weighting == "eps_matching" else 1.0 / sigma2
    loss = float(np.mean(per * w))
    g_out = (2.0 / m) * r * w[:, None]
    grads, units, _ = _backward(net, cache, g_out)
    if with_units:
        return loss, grads, units
    return loss, grads


@dataclass
class TrainConfig:
    steps: int = 2000
    batch: int = 128
    lr: float = 1e-3
    weight_decay: float = 0.0
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    t_sampling: str = "uniform"
    t_beta: tuple[float, float] = (0.8, 2.0)
    loss_weighting: str = "eps_matching"
    lr_schedule: str = "constant"
    seed: int = 0
    log_every: int = 100

    def __post_init__(self):
        self.betas = tuple(self.betas)
        self.t_beta = tuple(self.t_beta)
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")
        if self.batch < 1:
            raise ValueError("batch must be >= 1")
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if self.t_sampling not in ("uniform", "beta"):
            raise ValueError(f"t_sampling must be 'uniform' or 'beta', got {self.t_sampling!r}")
        if self.loss_weighting not in WEIGHTINGS:
            raise ValueError(f"unknown loss_weighting {self.loss_weighting!r}")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ValueError(f"lr_schedule must be 'constant' or 'cosine', got {self.lr_schedule!r}")

    def lr_at(self, step: int) -> float:
        """Learning rate for 1-based ``step``; cosine decays to zero at ``steps``."""
        if self.lr_schedule == "constant" or self.steps <= 1:
            return self.lr
        return 0.5 * self.lr * (1.0 + math.cos(math.pi * (step - 1) / self.steps))

    def to_dict(self) -> dict:
        return asdict(self)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class AdamState:
    step: int
    m: list[np.ndarray]
    v: list[np.ndarray]

    @classmethod
    def zeros_like(cls, params) -> "AdamState":
        return cls(0, [np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params])


def frozen_masks(net: MlpScoreNet) -> list[np.ndarray]:
    """Per-parameter 0/1 arrays; zero marks entries tied to a masked unit."""
    L = len(net.weights)
    out = []
    for layer in range(L):
        W = np.ones_like(net.weights[layer])
        b = np.ones_like(net.biases[layer])
        if layer < L - 1:
            W *= net.masks[layer][None, :]
            b *= net.masks[layer]
        if layer > 0:
            W *= net.masks[layer - 1][:, None]
        out += [W, b]
    return out


def adamw_step(params, grads, state: AdamState, cfg: TrainConfig, frozen=None, decay_flags=None, lr: float | None = None) -> None:
    """One decoupled-weight-decay Adam update, in place.

    ``p <- p * (1 - lr * lambda) - lr * m_hat / (sqrt(v_hat) + eps)`` for
    decayed tensors; ``decay_flags[i]`` False exempts tensor ``i`` (biases).
    Entries where ``frozen[i] == 0`` keep their value and moments.  ``lr``
    overrides ``cfg.lr`` (used by learning-rate schedules).
    """
    lr = cfg.lr if lr is None else lr
    b1, b2 = cfg.betas
    state.step += 1
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    step_size = lr / c1
    inv_sqrt_c2 = 1.0 / math.sqrt(c2)
    for i, (p, g) in enumerate(zip(params, grads)):
        m, v = state.m[i], state.v[i]
        keep = None if frozen is None else frozen[i] != 0
        if keep is not None and keep.all():
            keep = None
        if keep is not None:
            m_old, v_old, p_old = m.copy(), v.copy(), p.copy()
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        denom = np.sqrt(v)
        denom *= inv_sqrt_c2
        denom += cfg.eps
        np.divide(m, denom, out=denom)
        denom *= step_size
        decay = cfg.weight_decay if (decay_flags is None or decay_flags[i]) else 0.0
        if decay:
            p *= 1.0 - lr * decay
        p -= denom
        if keep is not None:
            frozen_entries = ~keep
            np.copyto(m, m_old, where=frozen_entries)
            np.copyto(v, v_old, where=frozen_entries)
            np.copyto(p, p_old, where=frozen_entries)


def sample_times(rs: Stream, m: int, cfg: TrainConfig, sched: DiffusionSchedule) -> np.ndarray:
    if cfg.t_sampling == "uniform":
        u = rs.uniform(m)
    else:
        u = rs.beta(cfg.t_beta[0], cfg.t_beta[1], m)
    return sched.t0 + (sched.T - sched.t0) * u


def train(net: MlpScoreNet, data: Dataset, cfg: TrainConfig, sched: DiffusionSchedule, state: AdamState | None = None):
    """Train a copy of ``net`` by denoising score matching.

    Each step draws batch indices uniformly with replacement, per-sample
    times per ``cfg.t_sampling`` and standard normal noise, all from the
    stream ``(cfg.seed, "train")``.  Masked units stay frozen.

    Returns:
        ``(net, trace)`` where ``trace`` lists ``(step, running_loss)`` every
        ``cfg.log_every`` steps (and at the final step).

    Raises:
        TrainingDiverged: on the first non-finite batch loss.
    """
    net = net.copy()
    if data.d != net.d:
        raise DomainError("dataset and network dimensions differ")
    params = net.params()
    state = state or AdamState.zeros_like(params)
    frozen = frozen_masks(net)
    any_masked = any(np.any(mk == 0) for mk in net.masks)
    decay_flags = [i % 2 == 0 for i in range(len(params))]
    rs = Stream(cfg.seed, "train")
    idx_rs, t_rs, z_rs = rs.spawn("index"), rs.spawn("time"), rs.spawn("noise")
    trace: list[tuple[int, float]] = []
    window: list[float] = []
    for step in range(1, cfg.steps + 1):
        idx = idx_rs.integers(data.n, cfg.batch)
        t = sample_times(t_rs, cfg.batch, cfg, sched)
        z = z_rs.normal((cfg.batch, data.d))
        loss, grads = dsm_step_loss_and_grads(net, data.samples[idx], t, z, sched, cfg.loss_weighting)
        if not math.isfinite(loss):
            raise TrainingDiverged(f"non-finite loss {loss} at step {step}")
        adamw_step(params, grads, state, cfg, frozen if any_masked else None, decay_flags, cfg.lr_at(step))
        window.append(loss)
        if step % cfg.log_every == 0 or step == cfg.steps:
            trace.append((step, float(np.mean(window))))
            window = []
    net.meta = {**net.meta, "train_config": cfg.digest(), "step": net.meta.get("step", 0) + cfg.steps}
    if trace:
        net.meta["final_loss"] = trace[-1][1]
    return net, trace


def trace_to_csv(trace) -> str:
    lines = ["step,loss"]
    lines += [f"{s},{loss!r}" for s, loss in trace]
    return "\n".join(lines) + "\n"


def save_checkpoint(net: MlpScoreNet, path) -> None:
    """Write the binary checkpoint (little-endian throughout)."""
    dims = net.layer_dims
    parts = [MAGIC, struct.pack("<I", VERSION), struct.pack("<I", len(dims))]
    parts.append(struct.pack(f"<{len(dims)}I", *dims))
    parts.append(struct.pack("<I", net.fourier_pairs))
    for p in net.params():
        parts.append(np.ascontiguousarray(p, dtype="<f8").tobytes())
    for mk in net.masks:
        parts.append((mk != 0).astype(np.uint8).tobytes())
    meta = json.dumps(net.meta, sort_keys=True).encode()
    parts.append(struct.pack("<I", len(meta)))
    parts.append(meta)
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path) -> MlpScoreNet:
    """Read a checkpoint written by :func:`save_checkpoint`.

    Raises:
        CheckpointError: on bad magic, unsupported version, or truncation.
    """
    buf = Path(path).read_bytes()
    pos = 0

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(buf):
            raise CheckpointError(f"truncated checkpoint: need {n} bytes at offset {pos}, file has {len(buf)}")
        out = buf[pos : pos + n]
        pos += n
        return out

    if take(8) != MAGIC:
        raise CheckpointError("bad magic: not a memgap checkpoint")
    (version,) = struct.unpack("<I", take(4))
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (this build reads version {VERSION})")
    (n_dims,) = struct.unpack("<I", take(4))
    if n_dims < 2:
        raise CheckpointError("checkpoint lists fewer than two layer dims")
    dims = list(struct.unpack(f"<{n_dims}I", take(4 * n_dims)))
    (pairs,) = struct.unpack("<I", take(4))
    d = dims[-1]
    if dims[0] != d + 2 * pairs + 1:
        raise CheckpointError("input width does not match d and fourier_pairs")
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        weights.append(np.frombuffer(take(8 * fan_in * fan_out), dtype="<f8").reshape(fan_in, fan_out).astype(np.float64))
        biases.append(np.frombuffer(take(8 * fan_out), dtype="<f8").astype(np.float64))
    masks = [np.frombuffer(take(h), dtype=np.uint8).astype(np.float64) for h in dims[1:-1]]
    (meta_len,) = struct.unpack("<I", take(4))
    meta = json.loads(take(meta_len).decode())
    if pos != len(buf):
        raise CheckpointError(f"{len(buf) - pos} trailing bytes after checkpoint")
    return MlpScoreNet(d, tuple(dims[1:-1]), pairs, weights, biases, masks, meta)
