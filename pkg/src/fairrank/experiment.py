"""Experiment plumbing: flat configs, checkpoints, run manifests, sweeps, comparisons.

Every run directory holds ``manifest.json``.  The manifest carries the resolved
config, so ``load_config(manifest)`` followed by the same command reproduces
the run; output digests are content hashes and must match bit for bit.
"""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
import logging
import math
import platform
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .data import SynthConfig, load_dataset_dir, save_synthetic, split_dataset
from .errors import ConfigError, DataError, DivergenceError
from .evaluation import METRIC_FIELDS, MetricsReport, ProbeConfig, evaluate
from .model import ModelConfig, ModelParams
from .training import MODES, TrainingConfig, fit, model_config_for

log = logging.getLogger(__name__)

COMPARE_MODES = ("two-tower", "base", "AL", "FairRank-no-invariant", "FairRank-no-KL", "FairRank")


def _ints(s):
    return tuple(int(x) for x in s.split(",") if x.strip())


def _floats(s):
    return tuple(float(x) for x in s.split(",") if x.strip())


def _strs(s):
    return tuple(x.strip() for x in s.split(",") if x.strip())


def _bool(s):
    low = s.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


_PARSERS = {"int": int, "float": float, "str": str, "bool": _bool,
            "tuple[int, ...]": _ints, "tuple[float, ...]": _floats, "tuple[str, ...]": _strs}


@dataclass
class ExperimentConfig:
    """Everything a subcommand needs, as one flat record with defaults."""

    # synthetic data
    num_users: int = 2000
    num_news: int = 5000
    num_categories: int = 20
    beta: float = 0.8
    history_min: int = 10
    history_max: int = 30
    impressions_per_user: int = 10
    items_per_impression: int = 20
    clicks_target: int = 2
    num_attribute_classes: int = 2
    click_sharpness: float = 8.0
    display_sharpness: float = 3.0
    # split
    train_ratio: float = 0.81
    val_ratio: float = 0.09
    # model
    history_len: int = 20
    d_h: int = 64
    d_d: int = 32
    scorer: str = "inner"
    # training
    mode: str = "FairRank"
    lam: float = 0.5
    learning_rate: float = 1e-4
    batch_size: int = 32
    K: int = 4
    epochs: int = 3
    seed: int = 0
    adversary_lr_scale: float = 1.0
    # probe
    pool_size: int = 100
    k_values: tuple[int, ...] = (10, 20)
    probe_seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    # plumbing
    dataset: str = ""
    out: str = "runs"
    checkpoint: str = ""
    lambdas: tuple[float, ...] = (0.0, 0.25, 0.5, 0.75, 1.0)
    seeds: tuple[int, ...] = ()
    modes: tuple[str, ...] = COMPARE_MODES
    workers: int = 1

    def override(self, key, value):
        """Set ``key`` from a string (config files) or an already-typed value."""
        f = {f.name: f for f in fields(self)}.get(key)
        if f is None:
            raise ConfigError(f"unknown config key {key!r}")
        if isinstance(value, str):
            try:
                value = _PARSERS[f.type](value.strip())
            except ValueError as e:
                raise ConfigError(f"bad value for {key}: {e}") from None
        setattr(self, key, value)
        return self

    def to_dict(self):
        return {k: list(v) if isinstance(v, tuple) else v for k, v in dataclasses.asdict(self).items()}

    @classmethod
    def from_dict(cls, d):
        cfg = cls()
        for k, v in d.items():
            cfg.override(k, tuple(v) if isinstance(v, list) else v)
        return cfg

    def to_text(self):
        def fmt(v):
            return ",".join(map(str, v)) if isinstance(v, tuple) else str(v)
        return "".join(f"{f.name} = {fmt(getattr(self, f.name))}\n" for f in fields(self))

    # -- views onto the per-module configs

    def synth_config(self):
        return SynthConfig(num_users=self.num_users, num_news=self.num_news,
                           num_categories=self.num_categories, beta=self.beta,
                           history_len_range=(self.history_min, self.history_max),
                           impressions_per_user=self.impressions_per_user,
                           items_per_impression=self.items_per_impression,
                           clicks_target=self.clicks_target, seed=self.seed,
                           num_attribute_classes=self.num_attribute_classes,
                           click_sharpness=self.click_sharpness,
                           display_sharpness=self.display_sharpness)

    def training_config(self):
        return TrainingConfig(lam=self.lam, learning_rate=self.learning_rate,
                              batch_size=self.batch_size, K=self.K, epochs=self.epochs,
                              seed=self.seed, mode=self.mode,
                              adversary_lr_scale=self.adversary_lr_scale)

    def probe_config(self):
        return ProbeConfig(pool_size=self.pool_size, k_values=self.k_values,
                           probe_seeds=self.probe_seeds)

    def model_overrides(self):
        return {"history_len": self.history_len, "d_h": self.d_h, "d_d": self.d_d,
                "scorer": self.scorer}

    def validate(self):
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        bad = [m for m in self.modes if m not in MODES]
        if bad:
            raise ConfigError(f"unknown modes {bad}")
        self.training_config().validate()
        self.probe_config().validate()
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        return self


def parse_config_text(text, source="<config>"):
    """``key = value`` lines; ``#`` starts a comment."""
    pairs = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key = value")
        key, value = line.split("=", 1)
        pairs.append((key.strip(), value.strip()))
    return pairs


def load_config(path=None, overrides=()):
    """Defaults, then the file, then ``overrides`` (last wins).

    ``path`` may also be a ``manifest.json`` from an earlier run, which
    restores that run's resolved config.
    """
    cfg = ExperimentConfig()
    if path:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file {p} not found")
        if p.suffix == ".json":
            cfg = ExperimentConfig.from_dict(json.loads(p.read_text())["config"])
        else:
            for k, v in parse_config_text(p.read_text(), str(p)):
                cfg.override(k, v)
    for k, v in overrides:
        cfg.override(k, v)
    return cfg.validate()


# ------------------------------------------------------------- checkpoints

def params_digest(params):
    h = hashlib.sha256()
    for name, arr in sorted(params.arrays().items()):
        h.update(name.encode())
        h.update(np.ascontiguousarray(arr, dtype=np.float64).tobytes())
    return h.hexdigest()


def file_digest(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def save_checkpoint(path, params, model_config, dataset, extra=None):
    meta = {"model_config": dataclasses.asdict(model_config), "vocab": list(dataset.vocab),
            "categories": list(dataset.categories), **(extra or {})}
    arrays = dict(params.arrays())
    np.savez(path, __meta__=np.array(json.dumps(meta)), **arrays)
    return Path(path)


def load_checkpoint(path):
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"checkpoint {path} not found")
    with np.load(path, allow_pickle=False) as z:
        meta = json.loads(str(z["__meta__"]))
        arrays = {k: z[k].copy() for k in z.files if k != "__meta__"}
    model_config = ModelConfig(**meta["model_config"])
    return ModelParams.from_arrays(arrays), model_config, meta


def check_vocabulary(meta, dataset):
    if list(dataset.vocab) != meta["vocab"] or list(dataset.categories) != meta["categories"]:
        raise ConfigError("vocabulary mismatch between checkpoint and dataset "
                          f"({len(meta['vocab'])} vs {len(dataset.vocab)} tokens, "
                          f"{len(meta['categories'])} vs {len(dataset.categories)} categories)")


# ---------------------------------------------------------------- manifest

def _versions():
    import scipy
    return {"fairrank": __version__, "python": platform.python_version(),
            "numpy": np.__version__, "scipy": scipy.__version__}


@dataclass
class RunManifest:
    command: str
    config: dict
    seeds: dict
    inputs: dict = field(default_factory=dict)
    outputs: dict = field(default_factory=dict)
    status: str = "running"
    started: str = ""
    duration_s: float = 0.0
    versions: dict = field(default_factory=_versions)
    error: str | None = None

    @classmethod
    def begin(cls, command, cfg, inputs=None):
        return cls(command, cfg.to_dict(),
                   {"training": cfg.seed, "probe": list(cfg.probe_seeds)},
                   dict(inputs or {}),
                   started=datetime.now(timezone.utc).isoformat(timespec="seconds"))

    def write(self, path):
        Path(path).write_text(json.dumps(dataclasses.asdict(self), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path):
        return cls(**json.loads(Path(path).read_text()))


class _Recorder:
    """Writes the manifest up front and finalises it however the block exits."""

    def __init__(self, manifest, path):
        self.manifest, self.path = manifest, Path(path)

    def __enter__(self):
        self.t0 = time.perf_counter()
        self.manifest.write(self.path)
        return self.manifest

    def __exit__(self, exc_type, exc, tb):
        m = self.manifest
        m.duration_s = round(time.perf_counter() - self.t0, 3)
        m.status = "complete" if exc is None else "failed"
        m.error = None if exc is None else f"{type(exc).__name__}: {exc}"
        m.write(self.path)
        return False


def dataset_digests(directory):
    d = Path(directory)
    return {f"dataset/{n}": file_digest(d / n) for n in ("news.tsv", "behaviors.tsv", "meta.json")
            if (d / n).exists()}


def load_split(cfg, directory=None, vocab=None):
    directory = directory or cfg.dataset
    if not directory:
        raise ConfigError("no dataset given (use --dataset DIR)")
    if not Path(directory).is_dir():
        raise DataError(f"dataset directory {directory} not found")
    ds = load_dataset_dir(directory, vocab=vocab)
    return split_dataset(ds, cfg.train_ratio, cfg.val_ratio)


# ------------------------------------------------------------------- runs

def generate(cfg, out=None):
    out = Path(out or cfg.out)
    return save_synthetic(cfg.synth_config(), out)


def train_model(cfg, dataset, on_epoch=None):
    model_config = model_config_for(dataset, **cfg.model_overrides())
    return fit(dataset, cfg.training_config(), model_config, on_epoch=on_epoch)


def evaluate_model(cfg, params, model_config, dataset):
    return evaluate(params, model_config, dataset, cfg.probe_config(), mode=cfg.mode,
                    lam=cfg.lam, seed=cfg.seed)


def train_and_evaluate(cfg, dataset):
    """In-memory train + evaluate; returns (MetricsReport, FitResult)."""
    res = train_model(cfg, dataset)
    return evaluate_model(cfg, res.params, res.model_config, dataset), res


def run_train(cfg, out=None, dataset=None):
    """Train on ``cfg.dataset``; writes checkpoint.npz, epochs.jsonl, manifest.json."""
    out = Path(out or cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    dataset = dataset if dataset is not None else load_split(cfg)
    manifest = RunManifest.begin("train", cfg, dataset_digests(cfg.dataset) if cfg.dataset else {})
    manifest.seeds["data"] = dataset.meta.get("seed")
    log_path = out / "epochs.jsonl"
    with _Recorder(manifest, out / "manifest.json"), open(log_path, "w", encoding="utf-8") as fh:
        def on_epoch(rec):
            fh.write(rec.to_json() + "\n")
            fh.flush()

        res = train_model(cfg, dataset, on_epoch)
        fh.close()
        ckpt = save_checkpoint(out / "checkpoint.npz", res.params, res.model_config, dataset,
                               {"mode": cfg.mode, "lam": cfg.lam, "seed": cfg.seed,
                                "best_epoch": res.best_epoch})
        manifest.outputs = {"checkpoint.npz:params": params_digest(res.params),
                            "epochs.jsonl": file_digest(log_path)}
        manifest.seeds["best_epoch"] = res.best_epoch
    return res, ckpt


def run_evaluate(cfg, out=None, dataset=None):
    """Evaluate ``cfg.checkpoint`` on ``cfg.dataset``; writes metrics.json and manifest.json."""
    out = Path(out or cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    params, model_config, meta = load_checkpoint(cfg.checkpoint)
    dataset = dataset if dataset is not None else load_split(cfg)
    check_vocabulary(meta, dataset)
    inputs = {"checkpoint:params": params_digest(params)}
    if cfg.dataset:
        inputs.update(dataset_digests(cfg.dataset))
    manifest = RunManifest.begin("evaluate", cfg, inputs)
    with _Recorder(manifest, out / "manifest.json"):
        report = evaluate(params, model_config, dataset, cfg.probe_config(),
                          mode=meta.get("mode", cfg.mode), lam=meta.get("lam", cfg.lam),
                          seed=meta.get("seed", cfg.seed))
        path = out / "metrics.json"
        path.write_text(report.to_json() + "\n")
        manifest.outputs = {"metrics.json": file_digest(path)}
    return report


def replay(manifest_path, out):
    """Re-run a recorded train/evaluate run into ``out``; returns (old, new) manifests."""
    old = RunManifest.load(manifest_path)
    cfg = ExperimentConfig.from_dict(old.config).validate()
    if old.command == "train":
        run_train(cfg, out)
    elif old.command == "evaluate":
        run_evaluate(cfg, out)
    else:
        raise ConfigError(f"cannot replay command {old.command!r}")
    return old, RunManifest.load(Path(out) / "manifest.json")


# ---------------------------------------------------------- sweep / compare

def _ensure_dataset(cfg, out):
    """Members share one dataset on disk; generate it under ``out`` if none is given."""
    if cfg.dataset:
        return cfg
    path = out / "dataset"
    generate(cfg, path)
    return dataclasses.replace(cfg, dataset=str(path))


def _member(args):
    cfg_dict, run_dir = args
    cfg = ExperimentConfig.from_dict(cfg_dict)
    try:
        run_train(cfg, run_dir)
        cfg.checkpoint = str(Path(run_dir) / "checkpoint.npz")
        report = run_evaluate(cfg, run_dir)
        return {**report.csv_row(), "status": "ok", "error": ""}
    except DivergenceError as e:
        nan = {k: float("nan") for k in METRIC_FIELDS}
        return {"mode": cfg.mode, "lambda": cfg.lam, "seed": cfg.seed, **nan,
                "num_users": 0, "num_impressions": 0, "status": "failed", "error": str(e)}


def _run_members(cfg, members):
    jobs = [(m.to_dict(), str(d)) for m, d in members]
    if cfg.workers > 1:
        with ProcessPoolExecutor(cfg.workers) as pool:
            return list(pool.map(_member, jobs))
    return [_member(j) for j in jobs]


def _write_csv(path, rows, columns):
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(columns), lineterminator="\n", extrasaction="ignore")
    w.writeheader()
    w.writerows(rows)
    Path(path).write_text(buf.getvalue())


RUN_COLUMNS = MetricsReport.CSV_FIELDS + ("status", "error")


def run_sweep(cfg, out=None):
    """One FairRank run per (lambda, seed) on one dataset; rows sorted by lambda."""
    if len(cfg.lambdas) < 2:
        raise ConfigError("a sweep needs at least two lambda values")
    out = Path(out or cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg = _ensure_dataset(cfg, out)
    seeds = cfg.seeds or (cfg.seed,)
    members = []
    for lam in sorted(cfg.lambdas):
        for s in seeds:
            m = dataclasses.replace(cfg, mode="FairRank", lam=lam, seed=s)
            members.append((m, out / f"lambda{lam:g}_seed{s}"))
    rows = _run_members(cfg, members)
    _write_csv(out / "sweep.csv", rows, RUN_COLUMNS)
    long = [{"lambda": r["lambda"], "seed": r["seed"], "metric": k, "value": r[k]}
            for r in rows for k in METRIC_FIELDS]
    _write_csv(out / "sweep_long.csv", long, ("lambda", "seed", "metric", "value"))
    return rows


def summarize(rows, modes):
    """Per-mode mean and sample standard deviation of every metric over ok runs."""
    table = []
    for mode in modes:
        ok = [r for r in rows if r["mode"] == mode and r["status"] == "ok"]
        row = {"mode": mode, "runs": len(ok)}
        for k in METRIC_FIELDS:
            vals = np.array([r[k] for r in ok], dtype=np.float64)
            row[f"{k}_mean"] = float(vals.mean()) if vals.size else math.nan
            row[f"{k}_std"] = float(vals.std(ddof=1)) if vals.size > 1 else 0.0
        table.append(row)
    return table


def format_table(summary):
    head = ["mode"] + list(METRIC_FIELDS)
    body = [[r["mode"]] + [f"{r[k + '_mean']:.4f} ± {r[k + '_std']:.4f}" for k in METRIC_FIELDS]
            for r in summary]
    widths = [max(len(row[i]) for row in [head] + body) for i in range(len(head))]
    return "".join("  ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip() + "\n"
                   for row in [head] + body)


def run_compare(cfg, out=None):
    """Every mode in ``cfg.modes`` over the seeds (default: 5 consecutive from ``seed``)."""
    out = Path(out or cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg = _ensure_dataset(cfg, out)
    seeds = cfg.seeds or tuple(cfg.seed + i for i in range(5))
    members = [(dataclasses.replace(cfg, mode=mode, seed=s), out / f"{mode}_seed{s}")
               for mode in cfg.modes for s in seeds]
    rows = _run_members(cfg, members)
    _write_csv(out / "runs.csv", rows, RUN_COLUMNS)
    summary = summarize(rows, cfg.modes)
    cols = ["mode", "runs"] + [f"{k}_{s}" for k in METRIC_FIELDS for s in ("mean", "std")]
    _write_csv(out / "compare.csv", summary, cols)
    (out / "compare.txt").write_text(format_table(summary))
    return rows, summary
