"""Command-line experiment driver.

Usage: ``memgap <subcommand> --config path [--set key=value]... [--seed N] [--plot]``.

Outputs land in ``output_dir/run-id/``.  Every CSV starts with a
``# config_hash: <hex>`` line, and ``manifest.json`` is rewritten atomically
after each command finishes.  Exit code 2 means an invalid config or
invalid usage, exit code 1 a runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import os
import platform
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from memgap import __version__
from memgap import config as cfgmod
from memgap.config import ConfigError, config_hash, stage_seed
from memgap.diffusion import DiffusionSchedule, GaussianMixture, sample_mixture
from memgap.gap import SweepConfig, default_workers, gap_sweep, theorem_check, times_for_sigma2
from memgap.metrics import evaluate, mean_log_likelihood, memorization_ratio
from memgap.net import NetworkScore, TrainConfig, init_mlp, load_checkpoint, save_checkpoint, trace_to_csv, train
from memgap.rng import derive_seed
from memgap.pruning import TimeDist, importance_scores, one_shot_prune, prune_decisions_csv
from memgap.sampler import SampleConfig, generate, samples_to_csv
from memgap.scores import lipschitz_report, max_separated_time

log = logging.getLogger("memgap")

HASH_PREFIX = "# config_hash: "


class RunError(RuntimeError):
    pass


# ---------------------------------------------------------------- outputs


class Run:
    """A run directory plus the bookkeeping for one command."""

    def __init__(self, cfg: dict, command: str, plot: bool = False):
        self.cfg = cfg
        self.command = command
        self.plot = plot
        self.hash = config_hash(cfg)
        self.dir = Path(cfg["output_dir"]) / cfgmod.run_id(cfg)
        self.dir.mkdir(parents=True, exist_ok=True)
        self.outputs: list[str] = []
        self.seeds: dict[str, int] = {}
        self.start = time.perf_counter()

    def seed(self, stage: str) -> int:
        s = stage_seed(self.cfg, stage)
        self.seeds[stage] = s
        return s

    def path(self, name: str) -> Path:
        return self.dir / name

    def _record(self, name: str) -> Path:
        if name not in self.outputs:
            self.outputs.append(name)
        return self.dir / name

    def write_csv(self, name: str, body: str) -> Path:
        p = self._record(name)
        _atomic_write(p, f"{HASH_PREFIX}{self.hash}\n{body}")
        return p

    def write_json(self, name: str, doc) -> Path:
        p = self._record(name)
        _atomic_write(p, json.dumps({"config_hash": self.hash, **doc}, sort_keys=True, indent=1) + "\n")
        return p

    def write_bytes(self, name: str, writer) -> Path:
        p = self._record(name)
        tmp = p.with_name(p.name + ".tmp")
        writer(tmp)
        os.replace(tmp, p)
        return p

    def figure(self, name: str, fn, *args, **kwargs) -> None:
        if not self.plot:
            return
        from memgap import plotting

        getattr(plotting, fn)(*args, path=self._record(name), **kwargs)

    def read_csv(self, name: str) -> list[list[str]]:
        """Rows of a CSV in this run; rejects files written under another config hash."""
        return read_hashed_csv(self.dir / name, self.hash)

    def finish(self) -> None:
        mpath = self.dir / "manifest.json"
        manifest = {}
        if mpath.exists():
            try:
                manifest = json.loads(mpath.read_text())
            except json.JSONDecodeError:
                manifest = {}
        if manifest.get("config_hash") not in (None, self.hash):
            raise RunError(f"run directory {self.dir} belongs to config hash {manifest['config_hash']}")
        commands = manifest.get("commands", {})
        commands[self.command] = {
            "outputs": self.outputs,
            "seeds": self.seeds,
            "wall_time_s": round(time.perf_counter() - self.start, 3),
        }
        manifest = {
            "config": self.cfg,
            "config_hash": self.hash,
            "master_seed": self.cfg["master_seed"],
            "versions": {"memgap": __version__, "numpy": np.__version__, "python": platform.python_version()},
            "commands": commands,
        }
        _atomic_write(mpath, json.dumps(manifest, sort_keys=True, indent=1) + "\n")


def _atomic_write(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def read_hashed_csv(path, expected_hash: str | None = None) -> list[list[str]]:
    """Parse a CSV with a leading hash line; mismatched hashes raise :class:`RunError`."""
    path = Path(path)
    if not path.exists():
        raise RunError(f"missing input {path}; run the producing command first")
    text = path.read_text()
    first, _, body = text.partition("\n")
    if not first.startswith(HASH_PREFIX):
        raise RunError(f"{path} has no config hash line")
    found = first[len(HASH_PREFIX) :].strip()
    if expected_hash is not None and found != expected_hash:
        raise RunError(f"{path} was written under config hash {found[:12]}, expected {expected_hash[:12]}")
    return list(csv.reader(io.StringIO(body)))


def _rows_to_csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([repr(v) if isinstance(v, float) else v for v in row])
    return buf.getvalue()


# ---------------------------------------------------------------- builders


def schedule(cfg: dict) -> DiffusionSchedule:
    return DiffusionSchedule(cfg["schedule"]["t0"], cfg["schedule"]["T"])


def mixture(cfg: dict) -> GaussianMixture:
    m = cfg["mixture"]
    return GaussianMixture.random(m["K"], m["d"], stage_seed(cfg, "mixture"), m["mean_std"], m["comp_var"])


def dataset(cfg: dict, n: int | None = None):
    """Training set; smaller ``n`` gives a prefix of larger ones."""
    return sample_mixture(mixture(cfg), cfg["dataset"]["n"] if n is None else n, stage_seed(cfg, "dataset"))


def train_config(cfg: dict, weight_decay: float | None = None, steps: int | None = None, lr: float | None = None, seed_stage: str = "train") -> TrainConfig:
    t = cfg["train"]
    return TrainConfig(
        steps=t["steps"] if steps is None else steps,
        batch=t["batch"],
        lr=t["lr"] if lr is None else lr,
        weight_decay=t["weight_decay"] if weight_decay is None else weight_decay,
        betas=tuple(t["betas"]),
        eps=t["eps"],
        t_sampling=t["t_sampling"],
        t_beta=tuple(t["t_beta"]),
        loss_weighting=t["loss_weighting"],
        lr_schedule=t["lr_schedule"],
        seed=stage_seed(cfg, seed_stage),
        log_every=t["log_every"],
    )


def sample_config(cfg: dict) -> SampleConfig:
    s = cfg["sample"]
    return SampleConfig(s["n_samples"], s["steps"], s["method"], schedule(cfg), stage_seed(cfg, "sample"), s["grid"])


def fresh_net(cfg: dict, width: int | None = None):
    t = cfg["train"]
    w = t["width"] if width is None else width
    return init_mlp(cfg["mixture"]["d"], [w] * t["depth"], t["fourier_pairs"], stage_seed(cfg, "init"))


def train_eval_cell(cfg: dict, width: int, decay: float, n: int):
    """Train one network, sample from it and score the samples."""
    sched = schedule(cfg)
    data = dataset(cfg, n)
    net, _ = train(fresh_net(cfg, width), data, train_config(cfg, weight_decay=decay), sched)
    x = generate(NetworkScore(net, sched), sample_config(cfg), d=data.d)
    return memorization_ratio(data.samples, x).ratio, mean_log_likelihood(mixture(cfg), x)


def _dedupe(name: str, values) -> list:
    out = []
    for v in values:
        if v in out:
            log.warning("duplicate value %r in sweep.%s ignored", v, name)
        else:
            out.append(v)
    return out


# ---------------------------------------------------------------- commands


def cmd_gen_data(run: Run) -> None:
    run.seed("mixture")
    run.seed("dataset")
    gm = mixture(run.cfg)
    data = dataset(run.cfg)
    run.write_csv("dataset.csv", data.to_csv())
    run.write_json("mixture.json", {"mixture": gm.to_dict()})
    run.write_json("dataset.json", {"dataset": data.to_dict()})


def cmd_train(run: Run) -> None:
    cfg = run.cfg
    run.seed("init")
    run.seed("train")
    net, trace = train(fresh_net(cfg), dataset(cfg), train_config(cfg), schedule(cfg))
    net.meta["config_hash"] = run.hash
    run.write_bytes("model.ckpt", lambda p: save_checkpoint(net, p))
    run.write_csv("train_trace.csv", trace_to_csv(trace))


def _load_net(run: Run):
    p = run.path("model.ckpt")
    if not p.exists():
        raise RunError(f"no checkpoint at {p}; run `memgap train` with the same config first")
    net = load_checkpoint(p)
    found = net.meta.get("config_hash")
    if found != run.hash:
        raise RunError(f"{p} was written under config hash {str(found)[:12]}, expected {run.hash[:12]}")
    return net


def cmd_sample(run: Run) -> None:
    cfg = run.cfg
    run.seed("sample")
    net = _load_net(run)
    x = generate(NetworkScore(net, schedule(cfg)), sample_config(cfg), d=net.d)
    run.write_csv("samples.csv", samples_to_csv(x))
    run.figure("samples.png", "plot_samples", dataset(cfg).samples, x, title=f"width {cfg['train']['width']}")


def cmd_eval(run: Run) -> None:
    cfg = run.cfg
    rows = run.read_csv("samples.csv")
    x = np.array([[float(v) for v in r] for r in rows[1:]], dtype=np.float64)
    rep = evaluate(dataset(cfg).samples, x, mixture(cfg), cfg["master_seed"], k=cfg["sample"]["knn_k"])
    run.write_csv("eval.csv", rep.to_csv())
    run.write_json("eval.json", json.loads(rep.to_json()))


def _t_grid(cfg: dict) -> list[float]:
    s = cfg["sweep"]
    return [float(v) for v in np.geomspace(s["t_min"], s["t_max"], s["t_points"])]


def cmd_gap_sweep(run: Run) -> None:
    cfg = run.cfg
    s, m = cfg["sweep"], cfg["mixture"]
    sc = SweepConfig(
        t_grid=_t_grid(cfg),
        n_list=sorted(_dedupe("n_list", s["n_list"])),
        d_list=sorted(_dedupe("d_list", s["d_list"])),
        K=m["K"],
        comp_var=m["comp_var"],
        mean_std=m["mean_std"],
        n_mc=s["n_mc"],
        seed=run.seed("gap-sweep"),
        t0=cfg["schedule"]["t0"],
        T=cfg["schedule"]["T"],
        workers=default_workers(),
    )
    res = gap_sweep(sc)
    run.write_csv("gap_sweep.csv", res.to_csv())
    run.write_json("gap_sweep.json", json.loads(res.to_json()))
    run.figure("gap_sweep.png", "plot_gap_sweep", res)


def cmd_theorem(run: Run) -> None:
    cfg = run.cfg
    s = cfg["sweep"]
    sched = schedule(cfg)
    s2 = np.geomspace(s["theorem_sigma2_min"], s["theorem_sigma2_max"], s["theorem_points"])
    ts = times_for_sigma2(s2, sched)
    m = cfg["mixture"]
    seed = run.seed("theorem")

    def family(d):
        return GaussianMixture.random(m["K"], d, seed, m["mean_std"], m["comp_var"])

    rep = theorem_check(sorted(_dedupe("theorem_d_list", s["theorem_d_list"])), sched, ts, family, s["theorem_n"], s["theorem_n_mc"], seed, s["theorem_datasets"])
    run.write_csv("theorem.csv", rep.to_csv())
    run.write_json("theorem.json", rep.to_dict())
    run.figure("theorem.png", "plot_theorem", rep)


def cmd_lipschitz(run: Run) -> None:
    cfg = run.cfg
    sched = schedule(cfg)
    data = dataset(cfg)
    times = cfg["sweep"]["lipschitz_times"]
    if times is None:
        # the largest separated time, capped to the schedule, plus two smaller ones
        t_star = min(max_separated_time(data.samples, sched), sched.T)
        if t_star < sched.t0:
            log.warning("no time in [t0, T] satisfies the separation condition; reporting unseparated times")
            times = [float(v) for v in np.geomspace(sched.t0, min(1.0, sched.T), 3)]
        else:
            times = sorted({max(sched.t0, t_star / 4), max(sched.t0, t_star / 2), t_star})
    seed = run.seed("lipschitz")
    reps = [lipschitz_report(data, float(t), sched, cfg["sweep"]["lipschitz_probes"], seed) for t in times]
    header = ("t", "min_pair_dist", "max_pair_dist", "separation_ok", "lower_bound", "measured_sup", "upper_bound", "unconverged_probes")
    rows = [(r.t, r.min_pair_dist, r.max_pair_dist, int(r.separation_ok), r.lower_bound, r.measured_sup, r.upper_bound, r.unconverged_probes) for r in reps]
    run.write_csv("lipschitz.csv", _rows_to_csv(header, rows))
    run.write_json("lipschitz.json", {"reports": [r.to_dict() for r in reps]})


def _finetune_cfg(cfg: dict, seed_stage: str) -> TrainConfig:
    p = cfg["pruning"]
    steps = p["finetune_steps"]
    if steps is None:
        steps = max(1, round(0.05 * cfg["train"]["steps"]))
    return train_config(cfg, steps=steps, lr=p["finetune_lr"], seed_stage=seed_stage)


def derive(run: Run, stage: str, sub: int) -> int:
    return derive_seed(run.seed(stage), sub)


def cmd_prune(run: Run) -> None:
    cfg = run.cfg
    p = cfg["pruning"]
    sched = schedule(cfg)
    data = dataset(cfg)
    gm = mixture(cfg)
    net = _load_net(run)
    t_dist = TimeDist(p["t_dist"], p["a"], p["b"])
    sample_cfg = sample_config(cfg)
    run.seed("sample")

    def sample_eval(model):
        x = generate(NetworkScore(model, sched), sample_cfg, d=model.d)
        return memorization_ratio(data.samples, x).ratio, mean_log_likelihood(gm, x)

    before = sample_eval(net)
    rows = [("none", -1, 0, before[0], before[1])]
    variants = ["importance"] + (["random"] if p["random_baseline"] else [])
    for variant in variants:
        for s in p["seeds"]:
            if variant == "importance":
                iseed = derive(run, "importance", s)
                rep = importance_scores(net, data, sched, t_dist, p["n_batches"], p["batch"], iseed)
                pruned_net, pruned = one_shot_prune(net, rep, p["eta"])
                if s == p["seeds"][0]:
                    run.write_json("importance.json", rep.to_dict())
                    run.write_csv("prune_decisions.csv", prune_decisions_csv(rep, pruned))
            else:
                pruned_net, pruned = one_shot_prune(net, None, p["eta"], random_seed=derive(run, "prune-random", s))
            ft = _finetune_cfg(cfg, "finetune")
            ft = TrainConfig(**{**ft.to_dict(), "seed": derive(run, "finetune", s)})
            if ft.steps > 0:
                pruned_net, _ = train(pruned_net, data, ft, sched)
            ratio, ll = sample_eval(pruned_net)
            rows.append((variant, s, len(pruned), ratio, ll))
    run.write_csv("prune.csv", _rows_to_csv(("variant", "seed", "n_pruned", "mem_ratio", "mean_ll"), rows))


def _grid_sweep(run: Run, widths, decays, ns, x_key: str) -> None:
    cfg = run.cfg
    for stage in ("init", "train", "sample", "dataset", "mixture"):
        run.seed(stage)
    cells = [(w, lam, n) for n in ns for w in widths for lam in decays]
    workers = min(default_workers(), len(cells))
    results: list = [None] * len(cells)
    failures = []
    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        futs = [pool.submit(train_eval_cell, cfg, w, lam, n) for (w, lam, n) in cells]
        for k, fut in enumerate(futs):
            try:
                results[k] = fut.result()
            except Exception as exc:  # record and keep sweeping
                log.warning("sweep cell %s failed: %s", cells[k], exc)
                failures.append({"cell": list(cells[k]), "error": f"{type(exc).__name__}: {exc}"})
                results[k] = (math.nan, math.nan)
    rows = [(w, float(lam), n, r[0], r[1], cfg["master_seed"]) for (w, lam, n), r in zip(cells, results)]
    run.write_csv("sweep.csv", _rows_to_csv(("width", "decay", "n", "mem_ratio", "mean_ll", "seed"), rows))
    run.write_json("sweep.json", {"failures": failures, "kind": x_key})
    dicts = [dict(zip(("width", "decay", "n", "mem_ratio", "mean_ll"), r[:5])) for r in rows]
    run.figure("sweep.png", "plot_sweep", dicts, x_key)
    if failures:
        log.warning("%d of %d sweep cells failed", len(failures), len(cells))


def cmd_width_sweep(run: Run) -> None:
    s = run.cfg["sweep"]
    widths = sorted(_dedupe("widths", s["widths"]))
    ns = sorted(_dedupe("n_values", s["n_values"]))
    _grid_sweep(run, widths, [run.cfg["train"]["weight_decay"]], ns, "width")


def cmd_decay_sweep(run: Run) -> None:
    s = run.cfg["sweep"]
    decays = sorted(_dedupe("decays", [float(v) for v in s["decays"]]))
    ns = sorted(_dedupe("n_values", s["n_values"]))
    _grid_sweep(run, [run.cfg["train"]["width"]], decays, ns, "decay")


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "sample": cmd_sample,
    "eval": cmd_eval,
    "gap-sweep": cmd_gap_sweep,
    "theorem": cmd_theorem,
    "lipschitz": cmd_lipschitz,
    "prune": cmd_prune,
    "width-sweep": cmd_width_sweep,
    "decay-sweep": cmd_decay_sweep,
}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="memgap", description="Diffusion memorization laboratory.")
    ap.add_argument("subcommand", choices=sorted(COMMANDS), help="experiment to run")
    ap.add_argument("--config", required=True, help="JSON config file")
    ap.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config field (dotted key, JSON value)")
    ap.add_argument("--seed", type=int, default=None, help="master seed (overrides master_seed)")
    ap.add_argument("--plot", action="store_true", help="also render PNG figures next to the CSVs")
    ap.add_argument("-v", "--verbose", action="store_true")
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = cfgmod.load(args.config, args.set, args.seed)
    except ConfigError as exc:
        print(f"memgap: invalid config: {exc}", file=sys.stderr)
        return 2
    try:
        run = Run(cfg, args.subcommand, args.plot)
        COMMANDS[args.subcommand](run)
        run.finish()
    except Exception as exc:
        print(f"memgap {args.subcommand}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    print(run.dir)
    return 0


if __name__ == "__main__":
    sys.exit(main())
