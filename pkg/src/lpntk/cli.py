"""Command-line entry point: ``lpntk <command> [options]``.

Every command writes its artifacts plus ``<command>.manifest.json`` (config hash,
seed, input and output SHA-256 digests, versions) into ``--out``.  Numeric
artifacts depend only on the inputs, the config and the seed.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import platform
import sys
from dataclasses import asdict, replace
from pathlib import Path

import jsonschema
import numpy as np

from . import __version__, analysis, experiments, kernel, rl
from .data import (DataError, SyntheticSpec, load_dataset, load_idx, save_dataset, split,
                   subset_sample, synth_generate, write_manifest)
from .model import ModelError, NetworkSpec, TrainConfig, load_checkpoint, save_checkpoint, select_best, train
from .numerics import make_rng

log = logging.getLogger("lpntk")

COMMANDS = ("train", "kernel", "cluster", "redundant", "prune", "difficulty", "forget", "gap", "rl", "report")
REPORT_EXPERIMENTS = ("long_tail", "prune", "control", "correlation", "forgetting", "rl")


class ConfigError(Exception):
    """Bad configuration, missing input or mismatched provenance (exit code 2)."""


def _obj(props: dict, required=()) -> dict:
    return {"type": "object", "properties": props, "additionalProperties": False, "required": list(required)}


_int = {"type": "integer", "minimum": 0}
_pos = {"type": "integer", "minimum": 1}
_frac = {"type": "number", "minimum": 0, "maximum": 1}

CONFIG_SCHEMA = _obj({
    "seed": {"type": "integer", "minimum": 0, "maximum": 2 ** 64 - 1},
    "out": {"type": "string"},
    "dataset": _obj({
        "source": {"enum": ["synthetic", "idx"]},
        "synthetic": _obj({"K": {"type": "integer", "minimum": 2}, "n_per_class": _pos, "dim": _pos,
                           "cluster_std": {"type": "number", "minimum": 0},
                           "duplicate_rate": _frac, "flip_rate": _frac}),
        "images": {"type": "string"},
        "labels": {"type": "string"},
        "K": {"type": "integer", "minimum": 2},
        "subset_per_class": _pos,
        "train_frac": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
    }),
    "model": _obj({
        "hidden": {"type": "array", "items": _pos},
        "activation": {"enum": ["relu", "tanh"]},
        "bias": {"type": "boolean"},
        "learning_rate": {"type": "number", "exclusiveMinimum": 0},
        "batch_size": _pos,
        "epochs": _int,
        "shuffle": {"type": "boolean"},
    }),
    "kernel": _obj({"kind": {"enum": list(kernel.KINDS)}, "cache_bytes": _pos}),
    "analysis": _obj({
        "M": _pos, "frac": _frac,
        "divisors": {"type": "array", "items": _pos, "minItems": 1},
        "forget_eta": {"type": "number", "exclusiveMinimum": 0},
        "forget_batch": _pos, "forget_iterations": _pos,
    }),
    "gap": _obj({
        "input_dim": _pos, "lower_widths": {"type": "array", "items": _pos},
        "K": {"type": "integer", "minimum": 2}, "activation": {"enum": ["relu", "tanh"]},
        "widths": {"type": "array", "items": _pos, "minItems": 1},
        "trials": _pos, "delta": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
        "frozen_lower": {"type": "boolean"},
    }),
    "rl": _obj({
        "gamma": {"type": "number", "minimum": 0, "exclusiveMaximum": 1}, "eps": _frac,
        "eta": {"type": "number", "exclusiveMinimum": 0}, "capacity": _pos, "batch_size": _pos,
        "total_steps": _int, "eval_episodes": _pos, "eval_every": _pos,
        "strategy": {"enum": ["eps_greedy", "lpntk_max"]},
        "hidden": {"type": "array", "items": _pos}, "activation": {"enum": ["relu", "tanh"]},
        "learning_starts": _int, "width": _pos, "height": _pos,
    }),
    "report": _obj({
        "experiments": {"type": "array", "items": {"enum": list(REPORT_EXPERIMENTS)}},
        "seeds": _pos,
    }),
})


# --- config and provenance --------------------------------------------------------


def load_config(path) -> dict:
    if path is None:
        cfg = {}
    else:
        try:
            cfg = json.loads(Path(path).read_text())
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {path}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from exc
    try:
        jsonschema.validate(cfg, CONFIG_SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"config error at {where}: {exc.message}") from exc
    return cfg


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True, separators=(",", ":")).encode()).hexdigest()


def sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


class Run:
    """Output directory bookkeeping for one command invocation."""

    def __init__(self, command: str, cfg: dict, seed: int, out: Path):
        self.command, self.cfg, self.seed, self.out = command, cfg, seed, out
        self.inputs: dict = {}
        self.outputs: list = []
        self.extra: dict = {}
        out.mkdir(parents=True, exist_ok=True)

    def path(self, name: str) -> Path:
        p = self.out / name
        self.outputs.append(p)
        return p

    def add_input(self, path) -> Path:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"input file not found: {path}")
        verify_against_manifest(path)
        self.inputs[str(path)] = sha256_file(path)
        return path

    def write_manifest(self) -> None:
        doc = {
            "command": self.command,
            "config_hash": config_hash(self.cfg),
            "config": self.cfg,
            "seed": self.seed,
            "inputs": self.inputs,
            "outputs": {p.name: sha256_file(p) for p in self.outputs},
            "versions": {"lpntk": __version__, "numpy": np.__version__,
                         "python": platform.python_version()},
            **self.extra,
        }
        (self.out / f"{self.command}.manifest.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def verify_against_manifest(path: Path) -> None:
    """Reject an input whose digest disagrees with a manifest that lists it."""
    for manifest in sorted(path.parent.glob("*.manifest.json")):
        outputs = json.loads(manifest.read_text()).get("outputs", {})
        if path.name in outputs and outputs[path.name] != sha256_file(path):
            raise ConfigError(f"{path} does not match the digest recorded in {manifest}")


def write_csv(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in row])


# --- builders from config ----------------------------------------------------------


def build_dataset(cfg: dict, seed: int):
    d = cfg.get("dataset", {})
    if d.get("source", "synthetic") == "idx":
        if "images" not in d or "labels" not in d:
            raise ConfigError("idx source needs dataset.images and dataset.labels")
        for key in ("images", "labels"):
            if not Path(d[key]).exists():
                raise ConfigError(f"dataset file not found: {d[key]}")
        ds = load_idx(d["images"], d["labels"], d.get("K", 10))
        if "subset_per_class" in d:
            ds = subset_sample(ds, d["subset_per_class"], make_rng(seed))
        return ds, "idx"
    return synth_generate(SyntheticSpec(**d.get("synthetic", {}), seed=seed)), "synthetic"


def build_network(cfg: dict, p: int, K: int) -> NetworkSpec:
    m = cfg.get("model", {})
    return NetworkSpec((p, *m.get("hidden", [32]), K), m.get("activation", "relu"), m.get("bias", True))


def build_train_config(cfg: dict, seed: int) -> TrainConfig:
    m = cfg.get("model", {})
    return TrainConfig(m.get("learning_rate", 0.1), m.get("batch_size", 32), m.get("epochs", 10),
                       seed, m.get("shuffle", True))


def load_kernel_checked(run: Run, path, ckpt=None) -> kernel.KernelMatrix:
    km = kernel.load_kernel(run.add_input(path))
    if ckpt is not None:
        raw = Path(run.add_input(ckpt)).read_bytes()
        if kernel.checkpoint_fingerprint(raw) != km.fingerprint:
            raise ConfigError(f"kernel {path} was not computed from checkpoint {ckpt}")
    return km


# --- commands ---------------------------------------------------------------------


def cmd_train(args, cfg, run: Run) -> None:
    ds, source = build_dataset(cfg, run.seed)
    train_ds, val = split(ds, cfg.get("dataset", {}).get("train_frac", 0.8), make_rng(run.seed))
    spec = build_network(cfg, ds.p, ds.K)
    tcfg = build_train_config(cfg, run.seed)
    params, tlog = train(train_ds, spec, tcfg, valset=val)
    # with zero epochs the initial parameters are the only candidate
    best = select_best(tlog, val, spec) if tlog.checkpoints else params
    save_checkpoint(run.path("model.lpw"), best, spec)
    save_dataset(train_ds, run.path("train.npz"))
    save_dataset(val, run.path("val.npz"))
    write_manifest(train_ds, run.path("dataset.json"), source, run.seed)
    write_csv(run.path("train_losses.csv"), ["sample_id", "label"] + [f"epoch_{e + 1}" for e in range(tcfg.epochs)],
              [[int(i), int(y), *map(float, tlog.losses[:, c])]
               for c, (i, y) in enumerate(zip(tlog.sample_ids, tlog.labels))])
    write_csv(run.path("val_accuracy.csv"), ["epoch", "accuracy"],
              [[e + 1, float(a)] for e, a in enumerate(tlog.val_accuracy)])


def cmd_kernel(args, cfg, run: Run) -> None:
    params, spec = load_checkpoint(run.add_input(args.ckpt))
    ds = load_dataset(run.add_input(args.data))
    kind = args.kind or cfg.get("kernel", {}).get("kind", "lpntk")
    cache = int(os.environ.get("LPNTK_CACHE_BYTES", cfg.get("kernel", {}).get("cache_bytes",
                                                                                kernel.DEFAULT_CACHE_BYTES)))
    fingerprint = kernel.checkpoint_fingerprint(Path(args.ckpt).read_bytes())
    km = kernel.kernel_matrix(ds, params, spec, kind, cache, args.threads, fingerprint)
    kernel.save_kernel(run.path(args.kernel_name), km)
    if args.csv:
        kernel.write_kernel_csv(run.path(Path(args.kernel_name).stem + ".csv"), km)
    run.extra["kernel_fingerprint"] = km.fingerprint_hex


def cmd_cluster(args, cfg, run: Run) -> None:
    km = load_kernel_checked(run, args.kernel, args.ckpt)
    M = args.M or cfg.get("analysis", {}).get("M") or max(1, km.n // 10)
    r = analysis.fpc(km, M)
    analysis.save_clusters(run.path("clusters.json"), r, km.fingerprint_hex)
    write_csv(run.path("cluster_sizes.csv"), ["rank", "size"],
              [[i + 1, s] for i, s in enumerate(analysis.cluster_size_histogram(r))])


def cmd_redundant(args, cfg, run: Run) -> None:
    km = load_kernel_checked(run, args.kernel, args.ckpt)
    red = analysis.find_redundant(km)
    write_csv(run.path("redundant.csv"), ["index", "sample_id"], [[int(i), int(km.ids[i])] for i in red])


def cmd_prune(args, cfg, run: Run) -> None:
    km = load_kernel_checked(run, args.kernel, args.ckpt)
    a = cfg.get("analysis", {})
    M = args.M or a.get("M") or max(1, km.n // 10)
    frac = args.frac if args.frac is not None else a.get("frac", 0.1)
    res = analysis.prune_pipeline(km.n, km, M, frac, make_rng(run.seed))
    write_csv(run.path("retained.csv"), ["index", "sample_id"], [[int(i), int(km.ids[i])] for i in res.retained])
    write_csv(run.path("removed.csv"), ["index", "sample_id", "reason"],
              sorted([[int(i), int(km.ids[i]), "redundant"] for i in res.redundant]
                     + [[int(i), int(km.ids[i]), "largest_cluster"] for i in res.removed_from_cluster]))


def cmd_difficulty(args, cfg, run: Run) -> None:
    ds, _ = build_dataset(cfg, run.seed)
    m = cfg.get("model", {})
    ccfg = experiments.CorrelationConfig(
        hidden=m.get("hidden", [32])[0], activation=m.get("activation", "tanh"),
        learning_rate=m.get("learning_rate", 0.01), epochs=m.get("epochs", 5),
        divisors=tuple(cfg.get("analysis", {}).get("divisors", (4, 16, 64))))
    rhos = experiments.correlation_on(ds, run.seed, ccfg)
    write_csv(run.path("difficulty_correlation.csv"), ["divisor", "subset_size", "pearson"],
              [[d, ds.n // d, float(r)] for d, r in zip(ccfg.divisors, rhos)])


def cmd_forget(args, cfg, run: Run) -> None:
    ds, _ = build_dataset(cfg, run.seed)
    a, m = cfg.get("analysis", {}), cfg.get("model", {})
    fcfg = experiments.ForgettingConfig(hidden=m.get("hidden", [32])[0], activation=m.get("activation", "tanh"),
                                        eta=a.get("forget_eta", 1e-3), batch_size=a.get("forget_batch", 64),
                                        iterations=a.get("forget_iterations", 3000))
    res = experiments.forgetting_on(ds, run.seed, fcfg)
    rows = []
    for name, rep in (("eta", res.report), ("eta_baseline", res.baseline),
                      ("uniform", res.calibrated), ("uniform_baseline", res.calibrated_baseline)):
        rows.append([name, rep.tp, rep.fp, rep.fn, rep.precision, rep.recall, rep.f1])
    write_csv(run.path("forgetting.csv"), ["scale", "tp", "fp", "fn", "precision", "recall", "f1"], rows)
    run.extra["observed_events"] = res.events


def cmd_gap(args, cfg, run: Run) -> None:
    g = cfg.get("gap", {})
    fam = kernel.GapFamily(g.get("input_dim", 8), tuple(g.get("lower_widths", [16])), g.get("K", 2),
                           g.get("activation", "relu"))
    rep = kernel.convergence_gap(fam, g.get("widths", [64, 256, 1024]), g.get("trials", 200),
                                 g.get("delta", 0.05), make_rng(run.seed), frozen_lower=g.get("frozen_lower", False))
    write_csv(run.path("gap_trials.csv"), ["width", "trial", "gap", "raw_gap", "alpha", "bound"],
              [[w.width, t, float(w.gaps[t]), float(w.raw_gaps[t]), float(w.alphas[t]), float(w.bounds[t])]
               for w in rep.widths for t in range(w.gaps.size)])
    write_csv(run.path("gap_summary.csv"), ["width", "mean_gap", "satisfaction_rate"],
              [[w.width, w.mean_gap, w.satisfaction_rate] for w in rep.widths])


def rl_config(cfg: dict, seed: int):
    r = dict(cfg.get("rl", {}))
    env = rl.GridWorld(r.pop("width", 5), r.pop("height", 5))
    if "hidden" in r:
        r["hidden"] = tuple(r["hidden"])
    return replace(experiments.DEFAULT_RL, **r, seed=seed), env


def cmd_rl(args, cfg, run: Run) -> None:
    rcfg, env = rl_config(cfg, run.seed)
    result = rl.run_training(rcfg, env)
    rl.write_curve_csv(run.path("returns.csv"), result.curve)
    echo = asdict(rcfg) | {"width": env.width, "height": env.height}
    run.path("rl_config.json").write_text(json.dumps(echo, indent=2, sort_keys=True) + "\n")


def cmd_report(args, cfg, run: Run) -> None:
    rep = cfg.get("report", {})
    wanted = rep.get("experiments", list(REPORT_EXPERIMENTS))
    seeds = [run.seed + s for s in range(rep.get("seeds", 3))]
    if "long_tail" in wanted:
        rows = [[s, *experiments.long_tail(s).class_head_fraction] for s in seeds]
        write_csv(run.path("long_tail.csv"), ["seed", "class0_head_fraction", "class1_head_fraction"], rows)
    if "prune" in wanted:
        trials = [experiments.prune_trial(s) for s in seeds]
        write_csv(run.path("pruning.csv"), ["seed", *asdict(trials[0]).keys()],
                  [[s, *asdict(t).values()] for s, t in zip(seeds, trials)])
    if "control" in wanted:
        trials = [experiments.control_trial(s) for s in seeds]
        write_csv(run.path("difficulty_control.csv"),
                  ["seed", "target_id", "interchangeable", "medium", "non_interchangeable"],
                  [[s, *asdict(t).values()] for s, t in zip(seeds, trials)])
    if "correlation" in wanted:
        ccfg = experiments.CorrelationConfig()
        write_csv(run.path("difficulty_correlation.csv"), ["seed", *[f"div_{d}" for d in ccfg.divisors]],
                  [[s, *experiments.correlation_trial(s, ccfg)] for s in seeds])
    if "forgetting" in wanted:
        rows = []
        for s in seeds:
            t = experiments.forgetting_trial(s)
            rows.append([s, t.events, t.predicted, t.report.f1, t.baseline.f1, t.calibrated.f1,
                         t.calibrated_baseline.f1])
        write_csv(run.path("forgetting.csv"), ["seed", "events", "predicted", "f1", "baseline_f1",
                                               "uniform_f1", "uniform_baseline_f1"], rows)
    if "rl" in wanted:
        rcfg, env = rl_config(cfg, run.seed)
        cmp_ = experiments.rl_comparison(seeds, rcfg, env)
        write_csv(run.path("rl_comparison.csv"), ["seed", "eps_greedy", "lpntk_max", "random_policy"],
                  [[s, a, b, cmp_.random_policy] for s, a, b in zip(seeds, cmp_.eps_greedy, cmp_.lpntk_max)])


HANDLERS = {"train": cmd_train, "kernel": cmd_kernel, "cluster": cmd_cluster, "redundant": cmd_redundant,
            "prune": cmd_prune, "difficulty": cmd_difficulty, "forget": cmd_forget, "gap": cmd_gap,
            "rl": cmd_rl, "report": cmd_report}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON experiment config")
    common.add_argument("--seed", type=int, help="overrides the config seed")
    common.add_argument("--threads", type=int, default=1, help="worker cap for kernel computation")
    common.add_argument("--out", help="output directory (for kernel, a path ending in .lpk also works)")
    parser = _Parser(prog="lpntk", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"lpntk {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in COMMANDS:
        p = sub.add_parser(name, parents=[common])
        if name == "kernel":
            p.add_argument("--ckpt", required=True)
            p.add_argument("--data", required=True, help="dataset .npz written by train")
            p.add_argument("--kind", choices=kernel.KINDS)
            p.add_argument("--csv", action="store_true", help="also export the full matrix as CSV")
        if name in ("cluster", "redundant", "prune"):
            p.add_argument("--kernel", required=True)
            p.add_argument("--ckpt", help="verify the kernel was computed from this checkpoint")
        if name in ("cluster", "prune"):
            p.add_argument("-M", type=int, help="number of clusters (default n/10)")
        if name == "prune":
            p.add_argument("--frac", type=float)
    return parser


def run_command(argv) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        args = build_parser().parse_args(argv)
        cfg = load_config(args.config)
        seed = args.seed if args.seed is not None else cfg.get("seed", 0)
        if not 0 <= seed < 2 ** 64:
            raise ConfigError("seed must be an unsigned 64-bit integer")
        if args.threads < 1:
            raise ConfigError("--threads must be positive")
        out = Path(args.out or cfg.get("out", "."))
        args.kernel_name = "kernel.lpk"
        if args.command == "kernel" and out.suffix == ".lpk":
            args.kernel_name, out = out.name, out.parent
        run = Run(args.command, cfg, seed, out)
        HANDLERS[args.command](args, cfg, run)
        run.write_manifest()
    except (ConfigError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (DataError, ModelError, kernel.KernelError, analysis.AnalysisError, rl.RlError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2 if "fingerprint" in str(exc) or "magic" in str(exc) else 1
    except Exception as exc:  # noqa: BLE001 - any other failure is a runtime error
        log.exception("command failed")
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


def main() -> None:
    sys.exit(run_command(sys.argv[1:]))


if __name__ == "__main__":
    main()
