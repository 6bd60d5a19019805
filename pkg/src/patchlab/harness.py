"""
Experiment runner: configs, seeded trials, CSV/JSON reports, verification
suites and cross-method comparison tables.
"""

from __future__ import annotations

import copy
import csv
import hashlib
import io
import json
import math
import os
import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import generate_coupled_world, load_mnist, mnist_correlation, sample_dataset, synthetic_digits
from .errors import ComparisonError, ConfigError
from .training import CONSISTENCY_METHODS, METHODS, TrainConfig, make_model, train_model

DEFAULTS = {
    "name": "run",
    "dataset": {"kind": "synthetic", "n": 8000, "rho": 0.98, "n_test": 1000,
                "input_dim": 12, "class_dims": 2, "subgroup_shift": 2,
                "class_separation": 2.5, "latent_scale": 1.0, "path": None},
    "method": "ERM",
    "model": {"hidden": [32]},
    "optimizer": {"lr": 0.05, "weight_decay": 0.0, "momentum": 0.9, "epochs": 20,
                  "batch_size": 100},
    "method_params": {"lambda_target": 0.0, "anneal_rate": 0.0, "eta": 0.01, "adjustment": 0.0,
                      "domain_coef": 0.0, "noise_sigma": 0.5, "jitter": 0.1,
                      "consistency": "camel"},
    "translators": "none",
    "translator_params": {"steps": 2000, "lr": 0.005, "cycle_coef": 10.0, "identity_coef": 1.0},
    "seeds": [0, 1, 2],
    "report": {"mi_estimate": True, "bound": False, "timing": False},
}

# method parameters each method actually reads
METHOD_PARAMS = {
    "ERM": set(),
    "GDRO": {"eta", "adjustment"},
    "SGDRO": {"eta", "adjustment"},
    "CAMEL": {"eta", "adjustment", "lambda_target", "anneal_rate", "consistency"},
    "pairing": {"eta", "adjustment", "lambda_target", "anneal_rate", "consistency"},
    "heuristic": {"eta", "adjustment", "lambda_target", "anneal_rate", "consistency",
                  "noise_sigma", "jitter"},
    "CDAT": {"domain_coef"},
}


def _merge(base, override, path=""):
    out = copy.deepcopy(base)
    for key, value in override.items():
        where = f"{path}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(base[key], dict) and key not in ("translator_params",):
            if not isinstance(value, dict):
                raise ConfigError(f"config key {where!r} must be an object")
            out[key] = _merge(base[key], value, where + ".")
        else:
            out[key] = value
    return out


@dataclass
class RunConfig:
    """Validated run configuration; ``raw`` is the normalised JSON document."""

    raw: dict
    warnings: list = field(default_factory=list)

    @classmethod
    def from_dict(cls, doc):
        if not isinstance(doc, dict):
            raise ConfigError("config must be a JSON object")
        raw = _merge(DEFAULTS, doc)
        notes = []
        method = raw["method"]
        if method not in METHODS:
            raise ConfigError(f"unknown method {method!r}; choose from {', '.join(METHODS)}")
        if raw["dataset"]["kind"] not in ("synthetic", "mnist"):
            raise ConfigError(f"unknown dataset kind {raw['dataset']['kind']!r}")
        if raw["translators"] not in ("analytic", "trained", "none"):
            raise ConfigError(f"unknown translator source {raw['translators']!r}")
        if method == "CAMEL" and raw["translators"] == "none":
            raise ConfigError("CAMEL requires a translator source (analytic or trained)")
        if raw["translators"] == "analytic" and raw["dataset"]["kind"] != "synthetic":
            raise ConfigError("analytic translators exist only for the synthetic world")
        given = set(doc.get("method_params", {}))
        ignored = sorted(given - METHOD_PARAMS[method])
        if ignored:
            notes.append(f"{method} ignores method_params {', '.join(ignored)}")
        if not raw["seeds"] or len(set(raw["seeds"])) != len(raw["seeds"]):
            raise ConfigError("seeds must be a non-empty list of distinct integers")
        try:
            cfg = cls(raw, notes)
            cfg.train_config(raw["seeds"][0])
        except TypeError as exc:
            raise ConfigError(str(exc)) from None
        for note in notes:
            warnings.warn(note, stacklevel=2)
        return cfg

    @classmethod
    def load(cls, path):
        try:
            doc = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file {path} not found") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from None
        return cls.from_dict(doc)

    @property
    def method(self):
        return self.raw["method"]

    def canonical(self):
        return json.dumps(self.raw, sort_keys=True, separators=(",", ":"))

    @property
    def hash(self):
        return hashlib.sha256(self.canonical().encode()).hexdigest()

    @property
    def run_id(self):
        return f"{self.raw['name']}-{self.method}-{self.hash[:8]}"

    def train_config(self, seed):
        opt, mp = self.raw["optimizer"], self.raw["method_params"]
        method = self.method
        used = METHOD_PARAMS[method]
        pick = lambda key, default: mp[key] if key in used else default
        return TrainConfig(method=method, hidden=tuple(self.raw["model"]["hidden"]),
                           lr=opt["lr"], momentum=opt["momentum"],
                           weight_decay=opt["weight_decay"], epochs=opt["epochs"],
                           batch_size=opt["batch_size"], seed=int(seed),
                           eta=pick("eta", 0.01), adjustment=pick("adjustment", 0.0),
                           lam=pick("lambda_target", 0.0), anneal_rate=pick("anneal_rate", 0.0),
                           consistency=pick("consistency", "camel"),
                           domain_coef=pick("domain_coef", 0.0),
                           noise_sigma=pick("noise_sigma", 0.5), jitter=pick("jitter", 0.1))


# ------------------------------------------------------------------ datasets

def build_dataset(ds, seed):
    """(split, world or None) for one trial; the seed drives both world and sampling."""
    if ds["kind"] == "synthetic":
        world = generate_coupled_world(
            latents_per_class=ds["n"] // 2 + ds["n_test"], input_dim=ds["input_dim"],
            seed=seed, class_dims=ds["class_dims"], subgroup_shift=ds["subgroup_shift"],
            class_separation=ds["class_separation"], latent_scale=ds["latent_scale"])
        return sample_dataset(world, ds["n"], ds["rho"], seed=seed, n_test=ds["n_test"]), world
    if ds.get("path"):
        clean = load_mnist(ds["path"], "train")
        test = load_mnist(ds["path"], "test")
        return mnist_correlation(clean, ds["n"], ds["rho"], seed=seed, test_clean=test,
                                 n_test=ds["n_test"]), None
    clean = synthetic_digits(ds["n"] + ds["n"] // 10 + 2 * ds["n_test"], seed=seed)
    return mnist_correlation(clean, ds["n"], ds["rho"], seed=seed, n_test=ds["n_test"]), None


def build_translators(cfg, split, world, seed):
    from .translate import TranslatorConfig, analytic_translators, train_translator_pair

    source = cfg.raw["translators"]
    if source == "analytic":
        return analytic_translators(world)
    if source == "none":
        return None
    params = dict(cfg.raw["translator_params"])
    params.setdefault("seed", seed)
    try:
        tcfg = TranslatorConfig(**params)
    except TypeError as exc:
        raise ConfigError(f"bad translator_params: {exc}") from None
    bank = {}
    train = split.train
    for y in sorted({c for c, _ in train.cells()}):
        zs = sorted(z for c, z in train.cells() if c == y)
        for i, z in enumerate(zs):
            for zp in zs[i + 1:]:
                pair = train_translator_pair(train.x[train.cell_indices((y, z))],
                                             train.x[train.cell_indices((y, zp))], tcfg, z, zp)
                bank.update(pair.translators(y))
    return bank


# ---------------------------------------------------------------------- runs

def csv_columns(cells, classes):
    return (["run_id", "method", "seed", "epoch", "split", "agg_acc", "robust_acc"]
            + [f"acc_{y}_{z}" for y, z in cells] + [f"gap_{y}" for y in classes]
            + ["mi_estimate", "lambda_current", "wall_ms"])


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


@dataclass
class RunRecord:
    run_id: str
    config_hash: str
    method: str
    seed: int
    dataset: dict
    best_epoch: int
    rows: list
    selected: dict
    mi_estimate: float = None
    bound: dict = None
    wall_ms: float = 0.0

    def to_json(self):
        return {"run_id": self.run_id, "config_hash": self.config_hash, "method": self.method,
                "seed": self.seed, "dataset": self.dataset, "best_epoch": self.best_epoch,
                "selected": self.selected, "mi_estimate": self.mi_estimate,
                "bound": self.bound, "wall_ms": self.wall_ms}

    @classmethod
    def from_json(cls, obj):
        return cls(obj["run_id"], obj["config_hash"], obj["method"], obj["seed"], obj["dataset"],
                   obj["best_epoch"], [], obj["selected"], obj.get("mi_estimate"),
                   obj.get("bound"), obj.get("wall_ms", 0.0))


def run_trial(cfg, seed):
    """Train and evaluate one seed; returns a RunRecord with CSV rows."""
    from .invariance import HeadConfig, prediction_mi_estimate, verify_theorem1

    split, world = build_dataset(cfg.raw["dataset"], seed)
    tcfg = cfg.train_config(seed)
    translators = build_translators(cfg, split, world, seed)
    model = make_model(split.train.input_dim, 2, tcfg.hidden, seed)
    track = cfg.method == "CDAT" and cfg.raw["report"]["mi_estimate"]
    result = train_model(model, split, tcfg, translators=translators, track_mi=track,
                         mi_config=HeadConfig(epochs=300))
    timing = cfg.raw["report"]["timing"]

    rows = []
    base = {"run_id": cfg.run_id, "method": cfg.method, "seed": seed}
    for h in result.history:
        for name in ("validation", "test"):
            rows.append({**base, "epoch": h["epoch"], "split": name, **h[name].as_dict(),
                         "mi_estimate": h.get("mi_estimate") if name == "validation" else None,
                         "lambda_current": h["lambda_current"], "wall_ms": None})
    mi = None
    if cfg.raw["report"]["mi_estimate"]:
        mi = prediction_mi_estimate(result.model, split.test, HeadConfig(epochs=500))
    rows.append({**base, "epoch": result.best_epoch, "split": "test_selected",
                 **result.test.as_dict(), "mi_estimate": mi,
                 "lambda_current": result.history[result.best_epoch]["lambda_current"],
                 "wall_ms": round(result.wall_ms, 3) if timing else None})
    bound = None
    if cfg.raw["report"]["bound"]:
        if world is None or translators is None:
            raise ConfigError("a bound report needs the synthetic world and translators")
        small = generate_coupled_world(latents_per_class=8, input_dim=world.input_dim, seed=seed,
                                       class_dims=world.meta["class_dims"],
                                       subgroup_shift=world.meta["subgroup_shift"])
        from .translate import analytic_translators
        bank = translators if cfg.raw["translators"] == "trained" else analytic_translators(small)
        bound = json.loads(verify_theorem1(result.model, small, bank, seeds={"trial": seed}).to_json())
    selected = {"aggregate": result.test.aggregate, "robust": result.test.robust,
                "gaps": {str(k): v for k, v in result.test.gaps.items()},
                "cells": {f"{y}_{z}": v for (y, z), v in result.test.cells.items()},
                "validation_robust": result.validation.robust}
    return RunRecord(cfg.run_id, cfg.hash, cfg.method, seed, cfg.raw["dataset"],
                     result.best_epoch, rows, selected, mi, bound, result.wall_ms)


def _trial_job(args):
    raw, seed = args
    return run_trial(RunConfig(raw), seed)


def worker_count(n_jobs):
    try:
        cap = int(os.environ.get("PATCHLAB_THREADS", "1"))
    except ValueError:
        raise ConfigError("PATCHLAB_THREADS must be an integer") from None
    return max(1, min(cap, n_jobs))


def _atomic_write(path, text):
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def run(config, out_dir=None):
    """Run every seed of a config; returns RunRecords in seed order and writes CSV + JSON."""
    cfg = config if isinstance(config, RunConfig) else RunConfig.from_dict(config)
    seeds = [int(s) for s in cfg.raw["seeds"]]
    workers = worker_count(len(seeds))
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            records = list(pool.map(_trial_job, [(cfg.raw, s) for s in seeds]))
    else:
        records = [run_trial(cfg, s) for s in seeds]
    if out_dir is not None:
        write_run(cfg, records, out_dir)
    return records


def csv_text(records):
    keys = [k for k in records[0].rows[0] if k.startswith("acc_")]
    cells = [tuple(int(v) for v in k[4:].split("_")) for k in keys]
    classes = sorted({y for y, _ in cells})
    cols = csv_columns(cells, classes)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(cols)
    for rec in records:
        for row in rec.rows:
            writer.writerow([_fmt(row.get(c)) for c in cols])
    return buf.getvalue()


def write_run(cfg, records, out_dir):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _atomic_write(out / f"{cfg.run_id}.csv", csv_text(records))
    doc = {"run_id": cfg.run_id, "config_hash": cfg.hash, "config": cfg.raw,
           "warnings": cfg.warnings, "seeds_vary": ["initialisation", "data sampling", "world"],
           "trials": [r.to_json() for r in records]}
    _atomic_write(out / f"{cfg.run_id}.json", json.dumps(doc, indent=2, sort_keys=True))
    return out / f"{cfg.run_id}.csv"


# ------------------------------------------------------------------ compare

@dataclass
class ComparisonTable:
    rows: list
    best: str

    def render(self):
        head = f"{'method':<10} {'trials':>6} {'aggregate':>14} {'robust':>14} {'max gap':>14} {'MI (nats)':>14}"
        lines = [head, "-" * len(head)]
        for r in self.rows:
            mark = " *" if r["method"] == self.best else ""
            lines.append(f"{r['method']:<10} {r['trials']:>6} {r['aggregate']:>14} {r['robust']:>14} "
                         f"{r['gap']:>14} {r['mi']:>14}{mark}")
        lines.append("* best mean robust accuracy")
        return "\n".join(lines)


def _mean_std(vals, scale=100.0, digits=2):
    vals = [v for v in vals if v is not None]
    if not vals:
        return "n/a", None
    arr = np.asarray(vals, dtype=np.float64)
    sd = arr.std(ddof=1) if arr.size > 1 else 0.0
    return f"{arr.mean() * scale:.{digits}f} ({sd * scale:.{digits}f})", float(arr.mean())


def load_records(runs_dir):
    records = []
    for path in sorted(Path(runs_dir).glob("*.json")):
        doc = json.loads(path.read_text())
        if "trials" not in doc:
            continue
        records.extend(RunRecord.from_json(t) for t in doc["trials"])
    if not records:
        raise ComparisonError(f"no run records found in {runs_dir}")
    return records


def compare(records):
    """Per-method mean (std) of aggregate, robust, max class gap and MI across trials."""
    if isinstance(records, (str, Path)):
        records = load_records(records)
    specs = {json.dumps(r.dataset, sort_keys=True) for r in records}
    if len(specs) > 1:
        raise ComparisonError("records come from different dataset specs")
    by_method = {}
    for r in records:
        by_method.setdefault(r.method, []).append(r)
    rows, best, best_val = [], None, -math.inf
    for method, recs in by_method.items():
        agg, _ = _mean_std([r.selected["aggregate"] for r in recs])
        rob, rob_mean = _mean_std([r.selected["robust"] for r in recs])
        gap, _ = _mean_std([max(r.selected["gaps"].values()) for r in recs])
        mi, _ = _mean_std([r.mi_estimate for r in recs], scale=1.0, digits=3)
        rows.append({"method": method, "trials": len(recs), "aggregate": agg, "robust": rob,
                     "gap": gap, "mi": mi, "robust_mean": rob_mean})
        if rob_mean is not None and rob_mean > best_val:
            best, best_val = method, rob_mean
    return ComparisonTable(rows, best)


# ------------------------------------------------------------------- verify

@dataclass
class VerifyReport:
    suite: str
    checks: list

    @property
    def passed(self):
        return all(ok for _, ok, _ in self.checks)

    @property
    def counts(self):
        n_ok = sum(ok for _, ok, _ in self.checks)
        return n_ok, len(self.checks) - n_ok

    def render(self):
        lines = [f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}" for name, ok, detail in self.checks]
        ok, bad = self.counts
        lines.append(f"{self.suite}: {ok} passed, {bad} failed")
        return "\n".join(lines)


SUITES = ("divergences", "bound", "mi", "generator")


def verify(suite, trials=None, seed=0):
    from . import suites

    if suite not in SUITES:
        raise ConfigError(f"unknown suite {suite!r}; choose from {', '.join(SUITES)}")
    checks = getattr(suites, f"{suite}_suite")(trials=trials, seed=seed)
    return VerifyReport(suite, checks)
