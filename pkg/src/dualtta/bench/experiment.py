"""Method x seed grids over synthetic shifted streams, and their reports."""

from __future__ import annotations

import csv
import io
import json
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from ..data import SpuriousDatasetConfig, StreamScenario, gen_spurious_dataset, make_stream
from ..errors import ConfigurationError, ContractError, InsufficientDataError
from ..model import ModelState, build_reference_net, load_checkpoint, pretrain
from ..tta import D_MINUS, D_PLUS, METHODS, AdapterConfig, make_adapter
from .metrics import metrics
from .stats import wilcoxon_signed_rank

CSV_COLUMNS = ("method", "seed", "scenario", "avg_acc", "worst_group_acc", "macro_f1",
               "pct_adapt", "pct_corr_adapt", "wall_clock_s")
DEFAULT_METHODS = ["noadapt", "tent", "eata_lite", "deyo_lite", "dualtta"]


@dataclass
class PretrainConfig:
    epochs: int = 12
    lr: float = 0.05
    batch_size: int = 64
    momentum: float = 0.9

    @classmethod
    def from_dict(cls, d):
        _check_fields(cls, d, "pretrain")
        return cls(**d)


def _check_fields(cls, d, what):
    unknown = set(d) - set(cls.__dataclass_fields__)
    if unknown:
        raise ConfigurationError(f"unknown {what} fields: {sorted(unknown)}")


@dataclass
class ExperimentConfig:
    """One experiment grid. The run seed also seeds the dataset, model and stream."""
    dataset: SpuriousDatasetConfig = field(default_factory=SpuriousDatasetConfig)
    scenarios: list = field(default_factory=lambda: [StreamScenario()])
    methods: list = field(default_factory=lambda: list(DEFAULT_METHODS))
    adapter: AdapterConfig = field(default_factory=AdapterConfig)
    seeds: list = field(default_factory=lambda: [0, 1, 2])
    checkpoint: Optional[str] = None
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    record_timing: bool = False

    def __post_init__(self):
        for m in self.methods:
            if m not in METHODS:
                raise ConfigurationError(f"unknown method '{m}'")
        if not self.methods or not self.seeds or not self.scenarios:
            raise ConfigurationError("methods, seeds and scenarios must be non-empty")
        if len(set(self.methods)) != len(self.methods) or len(set(self.seeds)) != len(self.seeds):
            raise ConfigurationError("methods and seeds must be unique")

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        _check_fields(cls, d, "experiment config")
        d = dict(d)
        if "dataset" in d:
            d["dataset"] = SpuriousDatasetConfig.from_dict(d["dataset"])
        if "scenarios" in d:
            d["scenarios"] = [StreamScenario.from_dict(s) for s in d["scenarios"]]
        if "adapter" in d:
            d["adapter"] = AdapterConfig.from_dict(d["adapter"])
        if "pretrain" in d:
            d["pretrain"] = PretrainConfig.from_dict(d["pretrain"])
        if "seeds" in d:
            d["seeds"] = [int(s) for s in d["seeds"]]
        return cls(**d)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            doc = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigurationError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(doc, dict):
            raise ConfigurationError("config must be a JSON object")
        return cls.from_dict(doc)

    def to_dict(self) -> dict:
        return {
            "dataset": asdict(self.dataset),
            "scenarios": [asdict(s) for s in self.scenarios],
            "methods": list(self.methods),
            "adapter": self.adapter.to_dict(),
            "seeds": list(self.seeds),
            "checkpoint": self.checkpoint,
            "pretrain": asdict(self.pretrain),
            "record_timing": self.record_timing,
        }


@dataclass
class ExperimentResult:
    method: str
    seed: int
    scenario: str
    avg_acc: float
    worst_group_acc: float
    macro_f1: float
    per_group: list
    pct_adapt: float
    pct_corr_adapt: float
    wall_clock_s: float
    batches: list  # per-batch logs


def source_model(cfg: ExperimentConfig, seed: int, splits: dict):
    """Load the configured checkpoint or pretrain a fresh reference net on source_train."""
    if cfg.checkpoint:
        model = load_checkpoint(cfg.checkpoint)
        if model.architecture["in_channels"] != cfg.dataset.channels or model.num_classes != cfg.dataset.num_classes:
            raise ContractError("checkpoint architecture does not match the dataset")
        return model, None
    tr, va = splits["source_train"], splits["source_val"]
    model = build_reference_net(cfg.dataset.num_classes, cfg.dataset.channels, seed)
    p = cfg.pretrain
    return pretrain(model, tr.images, tr.labels, p.epochs, p.lr, seed=seed,
                    batch_size=p.batch_size, momentum=p.momentum, val=(va.images, va.labels))


def run_stream(model: ModelState, method: str, adapter_cfg: AdapterConfig, batches, seed: int,
               num_classes: int) -> ExperimentResult:
    """Adapt a private clone of `model` over `batches` and score pre-update predictions."""
    model = model.clone()
    adapter = make_adapter(method, adapter_cfg, seed)
    logs = []
    t0 = time.perf_counter()
    for i, b in enumerate(batches):
        out = adapter.adapt_step(model, b)
        if not (math.isfinite(out.loss_dual) and np.isfinite(out.probs).all()):
            raise ContractError(f"non-finite loss or probabilities at batch {i} ({method}, seed {seed})")
        logs.append({
            "batch": i,
            "corruption": b.corruption,
            "n_plus": out.n_plus,
            "n_minus": out.n_minus,
            "loss_plus": out.loss_plus,
            "loss_minus": out.loss_minus,
            "loss_dual": out.loss_dual,
            "updated": bool(out.updated),
            "predictions": out.predictions.tolist(),
            "labels": b.labels.tolist(),
            "groups": b.groups.tolist(),
            "membership": out.record.membership.tolist(),
        })
    elapsed = time.perf_counter() - t0
    return score(method, seed, None, logs, num_classes, elapsed)


def score(method, seed, scenario, logs, num_classes, wall_clock_s=0.0) -> ExperimentResult:
    """Recompute every summary metric from the per-batch logs."""
    pred = np.concatenate([np.asarray(l["predictions"], dtype=np.int64) for l in logs])
    lab = np.concatenate([np.asarray(l["labels"], dtype=np.int64) for l in logs])
    grp = np.concatenate([np.asarray(l["groups"], dtype=np.int64) for l in logs])
    mem = np.concatenate([np.asarray(l["membership"], dtype=np.int64) for l in logs])
    m = metrics(pred, lab, grp, num_classes)
    correct = pred == lab
    n = len(lab)
    selected = (mem == D_PLUS) | (mem == D_MINUS)
    good = ((mem == D_PLUS) & correct) | ((mem == D_MINUS) & ~correct)
    return ExperimentResult(method, seed, scenario, m["accuracy"], m["worst_group"], m["macro_f1"],
                            m["per_group"], 100.0 * selected.sum() / n, 100.0 * good.sum() / n,
                            wall_clock_s, logs)


def run_experiment(cfg: ExperimentConfig, progress=None) -> dict:
    """Run every (scenario, method, seed) cell; returns the report document."""
    results = []
    pretrain_reports = {}
    for seed in cfg.seeds:
        splits = gen_spurious_dataset(replace(cfg.dataset, seed=seed))
        model, rep = source_model(cfg, seed, splits)
        if rep is not None:
            pretrain_reports[str(seed)] = asdict(rep)
        for scen in cfg.scenarios:
            batches = make_stream(splits["target_test"], scen, seed)
            for method in cfg.methods:
                r = run_stream(model, method, cfg.adapter, batches, seed, cfg.dataset.num_classes)
                r.scenario = scen.kind
                results.append(r)
                if progress:
                    progress(r)
    results.sort(key=lambda r: (r.method, r.seed, r.scenario))
    return {
        "config": cfg.to_dict(),
        "pretrain": pretrain_reports,
        "results": [asdict(r) for r in results],
        "wilcoxon": compare_methods(results, cfg.dataset.num_classes),
    }


def condition_accuracies(result: ExperimentResult) -> dict:
    """Accuracy per (scenario, corruption, seed) condition."""
    cells = {}
    for l in result.batches:
        key = f"{result.scenario}|{l['corruption'] or 'clean'}|{result.seed}"
        hit, n = cells.get(key, (0, 0))
        cells[key] = (hit + sum(p == y for p, y in zip(l["predictions"], l["labels"])), n + len(l["labels"]))
    return {k: h / n for k, (h, n) in cells.items()}


def compare_methods(results, num_classes=None, reference="dualtta") -> dict:
    """Two-sided Wilcoxon of the reference method against each other method, paired by condition."""
    per_method = {}
    for r in results:
        per_method.setdefault(r.method, {}).update(condition_accuracies(r))
    if reference not in per_method:
        return {}
    ref = per_method[reference]
    out = {}
    for method, cells in sorted(per_method.items()):
        if method == reference:
            continue
        keys = sorted(set(ref) & set(cells))
        a = [ref[k] for k in keys]
        b = [cells[k] for k in keys]
        try:
            out[method] = {"n_conditions": len(keys), **wilcoxon_signed_rank(a, b)}
        except InsufficientDataError as exc:
            out[method] = {"n_conditions": len(keys), "status": "insufficient-data", "detail": str(exc)}
    return out


def csv_text(doc: dict) -> str:
    """results.csv body; wall_clock_s stays blank unless timing was requested."""
    timing = doc["config"].get("record_timing", False)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for r in sorted(doc["results"], key=lambda r: (r["method"], r["seed"], r["scenario"])):
        w.writerow([r["method"], r["seed"], r["scenario"],
                    repr(r["avg_acc"]), repr(r["worst_group_acc"]), repr(r["macro_f1"]),
                    repr(r["pct_adapt"]), repr(r["pct_corr_adapt"]),
                    repr(r["wall_clock_s"]) if timing else ""])
    return buf.getvalue()


def emit_reports(doc: dict, out_dir) -> tuple:
    """Write results.json and results.csv under `out_dir`; returns both paths."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        jpath, cpath = out / "results.json", out / "results.csv"
        jpath.write_text(json.dumps(doc, indent=1, sort_keys=True))
        cpath.write_text(csv_text(doc))
    except OSError as exc:
        raise ConfigurationError(f"cannot write reports to {out}: {exc}") from exc
    return jpath, cpath
