"""Experiment configuration: JSON schema with defaults, overrides and hashing.

Every section and field is optional; omitted fields take the values in
:data:`DEFAULTS`.  Unknown fields and wrongly typed values raise
:class:`ConfigError` naming the offending dotted path.
"""

from __future__ import annotations

import copy
import hashlib
import json
from pathlib import Path

from memgap.rng import derive_seed

DEFAULTS: dict = {
    "master_seed": 0,
    "output_dir": "runs",
    "run_id": None,
    "mixture": {"K": 4, "d": 2, "mean_std": 2.0, "comp_var": 1.0},
    "schedule": {"t0": 1e-3, "T": 5.0},
    "dataset": {"n": 64},
    "train": {
        "width": 64,
        "depth": 2,
        "fourier_pairs": 4,
        "steps": 2000,
        "batch": 128,
        "lr": 1e-3,
        "weight_decay": 0.0,
        "betas": [0.9, 0.999],
        "eps": 1e-8,
        "t_sampling": "uniform",
        "t_beta": [0.8, 2.0],
        "loss_weighting": "eps_matching",
        "lr_schedule": "constant",
        "log_every": 100,
    },
    "sample": {"n_samples": 1000, "steps": 100, "method": "sde", "grid": "uniform", "knn_k": 3},
    "sweep": {
        "t_min": 1e-3,
        "t_max": 3.0,
        "t_points": 12,
        "n_list": [16, 256],
        "d_list": [2],
        "n_mc": 20000,
        "widths": [4, 64, 1024],
        "decays": [0.0],
        "n_values": [64],
        "theorem_d_list": [4, 8, 16],
        "theorem_n": 128,
        "theorem_datasets": 8,
        "theorem_sigma2_min": 1e-3,
        "theorem_sigma2_max": 1e-1,
        "theorem_points": 6,
        "theorem_n_mc": 5000,
        "lipschitz_times": None,
        "lipschitz_probes": 32,
    },
    "pruning": {
        "eta": 0.2,
        "t_dist": "beta",
        "a": 0.8,
        "b": 2.0,
        "n_batches": 16,
        "batch": 128,
        "finetune_steps": None,
        "finetune_lr": None,
        "random_baseline": False,
        "seeds": [0],
    },
}

# fields that may be null or hold the listed type
_NULLABLE = {
    "run_id": str,
    "sweep.lipschitz_times": list,
    "pruning.finetune_steps": int,
    "pruning.finetune_lr": float,
}
# fields excluded from the hash: they choose where outputs go, not what they contain
_UNHASHED = ("output_dir", "run_id")

STAGES = ("mixture", "dataset", "init", "train", "sample", "gap-sweep", "theorem", "lipschitz", "importance", "finetune", "prune-random")


class ConfigError(ValueError):
    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}" if path else message)
        self.path = path


def _check_type(path: str, default, value):
    if path in _NULLABLE:
        if value is None:
            return None
        default = _NULLABLE[path]() if _NULLABLE[path] is not float else 0.0
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(path, f"expected a boolean, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(path, f"expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(path, f"expected a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(path, f"expected a string, got {value!r}")
        return value
    if isinstance(default, list):
        if not isinstance(value, list):
            raise ConfigError(path, f"expected a list, got {value!r}")
        return value
    if default is None:
        return value
    raise ConfigError(path, "unsupported field")


def _merge(defaults: dict, doc: dict, prefix: str = "") -> dict:
    if not isinstance(doc, dict):
        raise ConfigError(prefix.rstrip("."), "expected an object")
    out = copy.deepcopy(defaults)
    for key, value in doc.items():
        path = f"{prefix}{key}"
        if key not in defaults:
            raise ConfigError(path, "unknown field")
        if isinstance(defaults[key], dict):
            out[key] = _merge(defaults[key], value, path + ".")
        else:
            out[key] = _check_type(path, defaults[key], value)
    return out


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(doc: dict, overrides) -> dict:
    """Apply ``key=value`` strings (dotted keys, JSON values) to a raw config."""
    doc = copy.deepcopy(doc)
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(item, "override must look like key=value")
        key, text = item.split("=", 1)
        parts = key.strip().split(".")
        node = doc
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(key, "cannot override inside a scalar")
        node[parts[-1]] = _parse_value(text)
    return doc


def _validate_values(cfg: dict) -> None:
    def need(cond, path, msg):
        if not cond:
            raise ConfigError(path, msg)

    m, s, tr, sa, sw, pr = cfg["mixture"], cfg["schedule"], cfg["train"], cfg["sample"], cfg["sweep"], cfg["pruning"]
    need(m["K"] >= 1, "mixture.K", "must be >= 1")
    need(m["d"] >= 1, "mixture.d", "must be >= 1")
    need(m["comp_var"] > 0, "mixture.comp_var", "must be > 0")
    need(m["mean_std"] >= 0, "mixture.mean_std", "must be >= 0")
    need(0 < s["t0"] < s["T"], "schedule", "need 0 < t0 < T")
    need(cfg["dataset"]["n"] >= 2, "dataset.n", "must be >= 2")
    need(tr["width"] >= 1, "train.width", "must be >= 1")
    need(tr["depth"] >= 1, "train.depth", "must be >= 1")
    need(tr["steps"] >= 0, "train.steps", "must be >= 0")
    need(tr["batch"] >= 1, "train.batch", "must be >= 1")
    need(tr["lr"] > 0, "train.lr", "must be > 0")
    need(tr["weight_decay"] >= 0, "train.weight_decay", "must be >= 0")
    for key in ("betas", "t_beta"):
        need(len(tr[key]) == 2 and all(isinstance(v, (int, float)) for v in tr[key]), f"train.{key}", "must be a pair of numbers")
    need(tr["t_sampling"] in ("uniform", "beta"), "train.t_sampling", "must be 'uniform' or 'beta'")
    need(tr["loss_weighting"] in ("eps_matching", "eq1_raw"), "train.loss_weighting", "must be 'eps_matching' or 'eq1_raw'")
    need(tr["lr_schedule"] in ("constant", "cosine"), "train.lr_schedule", "must be 'constant' or 'cosine'")
    need(sa["n_samples"] >= 1, "sample.n_samples", "must be >= 1")
    need(sa["steps"] >= 1, "sample.steps", "must be >= 1")
    need(sa["method"] in ("sde", "ode"), "sample.method", "must be 'sde' or 'ode'")
    need(sa["grid"] in ("uniform", "geometric"), "sample.grid", "must be 'uniform' or 'geometric'")
    need(sw["t_points"] >= 2, "sweep.t_points", "must be >= 2")
    need(0 < sw["t_min"] < sw["t_max"], "sweep", "need 0 < t_min < t_max")
    need(sw["n_mc"] >= 2, "sweep.n_mc", "must be >= 2")
    need(0 <= pr["eta"] <= 1, "pruning.eta", "must lie in [0, 1]")
    need(pr["t_dist"] in ("beta", "uniform"), "pruning.t_dist", "must be 'beta' or 'uniform'")
    need(pr["a"] > 0 and pr["b"] > 0, "pruning", "Beta parameters must be > 0")
    need(len(pr["seeds"]) >= 1, "pruning.seeds", "must not be empty")
    for key in ("n_list", "d_list", "widths", "n_values", "theorem_d_list"):
        vals = sw[key]
        need(all(isinstance(v, int) and not isinstance(v, bool) and v >= 1 for v in vals), f"sweep.{key}", "must hold positive integers")
    need(all(isinstance(v, (int, float)) and v >= 0 for v in sw["decays"]), "sweep.decays", "must hold non-negative numbers")


def resolve(doc: dict | None = None, overrides=None, seed: int | None = None) -> dict:
    """Merge a raw config with defaults, apply overrides and the seed, and validate."""
    doc = apply_overrides(doc or {}, overrides)
    if seed is not None:
        doc["master_seed"] = seed
    cfg = _merge(DEFAULTS, doc)
    _validate_values(cfg)
    return cfg


def load(path, overrides=None, seed: int | None = None) -> dict:
    try:
        doc = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError("", f"config file {path} not found") from None
    except json.JSONDecodeError as exc:
        raise ConfigError("", f"config file {path} is not valid JSON: {exc}") from None
    return resolve(doc, overrides, seed)


def config_hash(cfg: dict) -> str:
    """SHA-256 of the canonical JSON of the resolved config, minus output placement."""
    doc = {k: v for k, v in cfg.items() if k not in _UNHASHED}
    text = json.dumps(doc, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode()).hexdigest()


def stage_seed(cfg: dict, stage: str) -> int:
    """Per-stage seed: a keyed hash of ``(master_seed, stage)``."""
    return derive_seed(cfg["master_seed"], "stage", stage)


def run_id(cfg: dict) -> str:
    return cfg["run_id"] or config_hash(cfg)[:12]
