"""End-to-end continual runs, sweeps and result files."""
from __future__ import annotations

import csv
import dataclasses
import io
import json
import logging
import os
import tempfile
import time
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from .continual import DesignVariant, Learner, TaskTrainConfig, train_task
from .data import TaskSpec, gen_task_sequence
from .errors import ConfigError, InfLoraError, IoError, NumericalFailure
from .gpmem import ReductionRule
from .metrics import AccuracyMatrix, acc_metrics, align_classifier, collect_stats, empty_stats, evaluate, param_count
from .model import build_network, pretrain_backbone

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
ALIGNED_SUFFIX = "+ca"


@dataclass(frozen=True)
class NetworkConfig:
    hidden: tuple = (64, 64)
    adapted: tuple = (True, True)
    activations: tuple = ("relu", "relu")


@dataclass(frozen=True)
class PretrainConfig:
    epochs: int = 20
    lr: float = 1e-3
    batch_size: int = 128


@dataclass(frozen=True)
class AlignmentConfig:
    enabled: bool = False
    samples: int = 64
    epochs: int = 10
    lr: float = 0.01


@dataclass(frozen=True)
class ExperimentConfig:
    data: TaskSpec = field(default_factory=TaskSpec)
    network: NetworkConfig = field(default_factory=NetworkConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    train: TaskTrainConfig = field(default_factory=TaskTrainConfig)
    alignment: AlignmentConfig = field(default_factory=AlignmentConfig)
    variants: tuple = tuple(v.value for v in DesignVariant)
    seeds: tuple = (1,)
    output_dir: str = "results"


_SECTIONS = {
    "data": TaskSpec,
    "network": NetworkConfig,
    "pretrain": PretrainConfig,
    "train": TaskTrainConfig,
    "alignment": AlignmentConfig,
}
_TUPLES = {"hidden", "adapted", "activations", "variants", "seeds"}


def _coerce(path, value, default):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(path, f"expected a boolean, got {value!r}")
        return value
    if isinstance(default, int) and not isinstance(default, bool):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(path, f"expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(path, f"expected a number, got {value!r}")
        return float(value)
    if isinstance(default, Enum):
        return str(value)
    if isinstance(default, tuple):
        if not isinstance(value, list):
            raise ConfigError(path, f"expected a list, got {value!r}")
        return tuple(value)
    return value


def _build(cls, raw, path):
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(path, "expected a mapping")
    defaults = cls()
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - names)
    if unknown:
        raise ConfigError(f"{path}.{unknown[0]}" if path else unknown[0], "unknown key")
    kwargs = {}
    for key, value in raw.items():
        sub = f"{path}.{key}" if path else key
        if cls is ExperimentConfig and key in _SECTIONS:
            kwargs[key] = _build(_SECTIONS[key], value, sub)
        else:
            kwargs[key] = _coerce(sub, value, getattr(defaults, key))
    try:
        return cls(**kwargs)
    except (InfLoraError, ValueError, TypeError) as exc:
        raise ConfigError(path or "config", str(exc)) from exc


def config_from_dict(raw):
    cfg = _build(ExperimentConfig, raw, "")
    validate(cfg)
    return cfg


def load_config(path):
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise IoError(f"cannot read config {path}: {exc}") from exc
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError("", f"invalid YAML: {exc}") from exc
    return config_from_dict(raw or {})


def validate(cfg):
    n = len(cfg.network.hidden)
    if n < 1:
        raise ConfigError("network.hidden", "need at least one backbone layer")
    if any((not isinstance(h, int)) or h < 1 for h in cfg.network.hidden):
        raise ConfigError("network.hidden", "widths must be positive integers")
    if len(cfg.network.adapted) != n:
        raise ConfigError("network.adapted", f"expected {n} entries")
    if len(cfg.network.activations) != n:
        raise ConfigError("network.activations", f"expected {n} entries")
    for a in cfg.network.activations:
        if a not in ("relu", "none"):
            raise ConfigError("network.activations", f"unknown activation {a!r}")
    if not cfg.variants:
        raise ConfigError("variants", "at least one variant is required")
    for v in cfg.variants:
        try:
            DesignVariant(v)
        except ValueError:
            raise ConfigError("variants", f"unknown variant {v!r}") from None
    if len(set(cfg.variants)) != len(cfg.variants):
        raise ConfigError("variants", "duplicate variant")
    if not cfg.seeds or any(not isinstance(s, int) for s in cfg.seeds):
        raise ConfigError("seeds", "expected a non-empty list of integers")
    if cfg.pretrain.epochs < 0 or cfg.pretrain.batch_size < 1:
        raise ConfigError("pretrain", "epochs must be >= 0 and batch_size >= 1")
    if cfg.alignment.samples < 2 or cfg.alignment.epochs < 1:
        raise ConfigError("alignment", "samples must be >= 2 and epochs >= 1")


def config_to_dict(cfg):
    def plain(v):
        if isinstance(v, Enum):
            return v.value
        if isinstance(v, tuple):
            return [plain(x) for x in v]
        if dataclasses.is_dataclass(v):
            return {f.name: plain(getattr(v, f.name)) for f in dataclasses.fields(v)}
        return v

    return plain(cfg)


@dataclass
class VariantResult:
    variant: str
    seed: int
    matrix: AccuracyMatrix
    expanded_params: int
    losses: list = field(default_factory=list)
    seconds: list = field(default_factory=list)
    degenerate: list = field(default_factory=list)
    failed: str | None = None

    def summary(self):
        if not self.matrix.is_complete():
            return None, None
        acc, avg = acc_metrics(self.matrix)
        return float(acc[-1]), avg


@dataclass
class RunReport:
    config: ExperimentConfig
    results: list = field(default_factory=list)
    version: str = __version__

    @property
    def failed(self):
        return any(r.failed for r in self.results)

    def get(self, variant, seed):
        for r in self.results:
            if r.variant == variant and r.seed == seed:
                return r
        raise KeyError((variant, seed))

    def averaged(self, variant):
        return [self.get(variant, s).summary()[1] for s in self.config.seeds]


def _seed_rng(seed, purpose):
    return np.random.default_rng([seed, 1000 + purpose])


def pretrained_backbone(cfg, seq, seed):
    """Backbone trained on the base classes with a head sized for the continual stream."""
    net = build_network(
        cfg.data.d_in,
        list(cfg.network.hidden),
        seq.n_classes,
        _seed_rng(seed, 0),
        adapted=list(cfg.network.adapted),
        activations=list(cfg.network.activations),
    )
    if cfg.pretrain.epochs:
        pretrain_backbone(
            net,
            seq.base_x,
            seq.base_y,
            seq.n_base_classes,
            _seed_rng(seed, 1),
            epochs=cfg.pretrain.epochs,
            batch_size=cfg.pretrain.batch_size,
            lr=cfg.pretrain.lr,
        )
    return net


def run_variant(cfg, seq, backbone, variant, seed):
    """Train one variant over the whole sequence, returning its result(s)."""
    variant = DesignVariant(variant)
    net = backbone.copy()
    train_cfg = replace(cfg.train, variant=variant, seed=seed)
    learner = Learner(net=net, cfg=train_cfg, n_tasks=len(seq))
    dims = [(l.d_in, l.d_out) for l in net.layers]
    expanded = param_count(dims, train_cfg.rank, net.adapted_indices())
    plain = VariantResult(variant.value, seed, AccuracyMatrix(len(seq)), expanded)
    aligned = None
    if cfg.alignment.enabled:
        aligned = VariantResult(variant.value + ALIGNED_SUFFIX, seed, AccuracyMatrix(len(seq)), expanded)
    stats = empty_stats()
    try:
        for t, task in enumerate(seq.tasks, start=1):
            report = train_task(learner, task, t)
            plain.losses.append(report.losses)
            plain.seconds.append(report.seconds)
            plain.degenerate.append(report.degenerate)
            plain.matrix.set_row(t - 1, evaluate(net, seq, t - 1))
            if aligned is not None:
                start = time.perf_counter()
                stats = stats.merge(collect_stats(net, task.train_x, task.train_y))
                head_net = net.copy()
                align_classifier(
                    head_net,
                    stats,
                    samples=cfg.alignment.samples,
                    epochs=cfg.alignment.epochs,
                    seed=seed,
                    lr=cfg.alignment.lr,
                    batch_size=cfg.train.batch_size,
                )
                aligned.losses.append(report.losses)
                aligned.seconds.append(report.seconds + time.perf_counter() - start)
                aligned.degenerate.append(report.degenerate)
                aligned.matrix.set_row(t - 1, evaluate(head_net, seq, t - 1))
    except NumericalFailure as exc:
        log.error("%s seed %d failed: %s", variant.value, seed, exc)
        plain.failed = str(exc)
        if aligned is not None:
            aligned.failed = str(exc)
    out = [plain] if aligned is None else [plain, aligned]
    return out, learner


def run_experiment(cfg, out_dir=None, seeds=None):
    """Run every variant for every seed; write result files when ``out_dir`` is given."""
    seeds = tuple(seeds) if seeds is not None else cfg.seeds
    cfg = replace(cfg, seeds=seeds)
    report = RunReport(config=cfg)
    for seed in seeds:
        seq = gen_task_sequence(replace(cfg.data, seed=seed))
        backbone = pretrained_backbone(cfg, seq, seed)
        for variant in cfg.variants:
            log.info("seed %d variant %s", seed, variant)
            results, _ = run_variant(cfg, seq, backbone, variant, seed)
            report.results.extend(results)
    if out_dir is not None:
        write_results(report, out_dir)
    return report


def _fmt(x):
    return "" if x is None or (isinstance(x, float) and np.isnan(x)) else repr(float(x))


def _csv_text(header, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def write_atomic(path, text):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def results_rows(report):
    rows = []
    for r in report.results:
        for i in range(r.matrix.n_tasks):
            for j in range(i + 1):
                v = r.matrix.values[i, j]
                if not np.isnan(v):
                    rows.append([r.variant, r.seed, i + 1, j + 1, _fmt(v)])
    return rows


def summary_rows(report):
    rows = []
    for r in report.results:
        acc_t, avg = r.summary()
        rows.append([r.variant, r.seed, _fmt(acc_t), _fmt(avg), r.expanded_params, "failed" if r.failed else "ok"])
    return rows


def write_results(report, out_dir):
    """results.csv, summary.csv, losses.csv and report.json are fully determined by
    config and seeds; timings.json holds wall-clock data and is not.
    """
    out = Path(out_dir)
    try:
        write_atomic(
            out / "results.csv",
            _csv_text(["variant", "seed", "task_learned", "task_evaluated", "accuracy"], results_rows(report)),
        )
        write_atomic(
            out / "summary.csv",
            _csv_text(["variant", "seed", "ACC_T", "averaged_ACC", "expanded_params", "status"], summary_rows(report)),
        )
        loss_rows = []
        for r in report.results:
            for t, trace in enumerate(r.losses, start=1):
                for e, loss in enumerate(trace, start=1):
                    loss_rows.append([r.variant, r.seed, t, e, _fmt(loss)])
        write_atomic(out / "losses.csv", _csv_text(["variant", "seed", "task", "epoch", "loss"], loss_rows))
        meta = {
            "format_version": FORMAT_VERSION,
            "code_version": report.version,
            "config": config_to_dict(report.config),
            "failed": [f"{r.variant}/{r.seed}: {r.failed}" for r in report.results if r.failed],
            "degenerate_layers": {
                f"{r.variant}/{r.seed}": [[int(i) for i in d] for d in r.degenerate] for r in report.results
            },
        }
        write_atomic(out / "report.json", json.dumps(meta, indent=2, sort_keys=True) + "\n")
        timings = {f"{r.variant}/{r.seed}": r.seconds for r in report.results}
        write_atomic(out / "timings.json", json.dumps(timings, indent=2, sort_keys=True) + "\n")
    except OSError as exc:
        raise IoError(f"cannot write results to {out}: {exc}") from exc


SWEEP_PARAMS = {"r": "rank", "rank": "rank", "eps": "epsilon", "epsilon": "epsilon", "ε": "epsilon"}


def sweep(cfg, param, values, out_dir=None, seeds=None):
    """Re-run the experiment per value of ``param`` (rank or epsilon).

    Returns rows ``(value, variant, mean ACC_T, mean averaged ACC)``.
    """
    if param not in SWEEP_PARAMS:
        raise ConfigError("param", f"unknown sweep parameter {param!r}; use r or eps")
    name = SWEEP_PARAMS[param]
    unique = []
    for v in values:
        if v in unique:
            log.warning("duplicate sweep value %r ignored", v)
            continue
        unique.append(v)
    rows = []
    for v in unique:
        value = int(v) if name == "rank" else float(v)
        try:
            sub = replace(cfg, train=replace(cfg.train, **{name: value}))
        except InfLoraError as exc:
            raise ConfigError(f"train.{name}", str(exc)) from exc
        report = run_experiment(sub, seeds=seeds)
        for variant in dict.fromkeys(r.variant for r in report.results):
            summaries = [r.summary() for r in report.results if r.variant == variant]
            done = [s for s in summaries if s[0] is not None]
            acc_t = float(np.mean([s[0] for s in done])) if done else float("nan")
            avg = float(np.mean([s[1] for s in done])) if done else float("nan")
            rows.append((value, variant, acc_t, avg))
    if out_dir is not None:
        text = _csv_text(
            ["param", "value", "variant", "ACC_T", "averaged_ACC"],
            [[name, v, var, _fmt(a), _fmt(b)] for v, var, a, b in rows],
        )
        try:
            write_atomic(Path(out_dir) / f"sweep_{name}.csv", text)
        except OSError as exc:
            raise IoError(str(exc)) from exc
    return rows


__all__ = [
    "AlignmentConfig",
    "ExperimentConfig",
    "NetworkConfig",
    "PretrainConfig",
    "ReductionRule",
    "RunReport",
    "VariantResult",
    "config_from_dict",
    "load_config",
    "run_experiment",
    "sweep",
]
