"""Config-driven experiment pipeline.

A run trains every configured method on one dataset and evaluates it on the
test split: accuracy, ECE and classwise-ECE, reliability and confidence
histogram data, misclassification / near-OOD / far-OOD detection, optional
corruption sweeps and an optional alpha sweep for MTE methods. Everything
lands in ``report.json``; the CSV tables are rendered from that report and
nothing else.
"""

from __future__ import annotations

import csv
import difflib
import hashlib
import io
import json
import os
import shutil
import tempfile
from dataclasses import replace
from pathlib import Path

import jsonschema
import numpy as np

from . import data, metrics
from . import losses as L
from .nn import Schedule, checkpoint_to_dict
from .trainer import TrainConfig, TrainResult, train

REPORT_VERSION = 1
DETECTION_TASKS = ("misclassification", "near_ood", "far_ood")

DEFAULT_DATASET = {
    "kind": "mixture",
    "n_classes": 3,
    "dim": 10,
    "radius": 1.0,
    "scale": 0.6,
    "samples_per_class": 3000,
    "label_noise": 0.0,
    "split": [6 / 9, 1 / 9, 2 / 9],
}

_NUM = {"type": "number"}
_POS_INT = {"type": "integer", "minimum": 1}
_SCHEDULE_KEYS = {
    "lr": {"type": "number", "exclusiveMinimum": 0},
    "warm_epochs": {"type": "integer", "minimum": 0},
    "decay_interval": {"type": "integer", "minimum": 0},
    "decay_factor": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
}

CONFIG_SCHEMA = {
    "$schema": "http://json-schema.org/draft-07/schema#",
    "type": "object",
    "additionalProperties": False,
    "required": ["dataset", "methods"],
    "properties": {
        "seed": {"type": "integer", "minimum": 0},
        "output_dir": {"type": "string"},
        "dataset": {
            "type": "object",
            "additionalProperties": False,
            "required": ["kind"],
            "properties": {
                "kind": {"enum": ["mixture", "csv"]},
                "n_classes": {"type": "integer", "minimum": 2},
                "dim": {"type": "integer", "minimum": 2},
                "radius": {"type": "number", "exclusiveMinimum": 0},
                "scale": {"type": "number", "exclusiveMinimum": 0},
                "means": {"type": "array", "items": {"type": "array", "items": _NUM}},
                "samples_per_class": _POS_INT,
                "label_noise": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
                "path": {"type": "string"},
                "split": {"type": "array", "items": {"type": "number", "minimum": 0},
                          "minItems": 3, "maxItems": 3},
            },
        },
        "methods": {
            "type": "array",
            "minItems": 1,
            "items": {
                "type": "object",
                "additionalProperties": False,
                "required": ["name", "method"],
                "properties": {
                    "name": {"type": "string", "pattern": "^[A-Za-z0-9_.-]+$"},
                    "method": {"enum": ["ce", "baseline", "mte", "dml", "de"]},
                    "baseline": {
                        "type": "object",
                        "additionalProperties": False,
                        "required": ["kind"],
                        "properties": {
                            "kind": {"enum": list(L.BaselineLossSpec.KINDS)},
                            "param": {"type": "number", "minimum": 0},
                        },
                    },
                    "alpha": {"type": "number", "minimum": 0},
                    "n_aux": _POS_INT,
                    "primary_hidden": {"type": "array", "items": _POS_INT},
                    "aux_hidden": {"type": "array", "items": _POS_INT},
                    "epochs": {"type": "integer", "minimum": 0},
                    "batch_size": _POS_INT,
                    **_SCHEDULE_KEYS,
                    "aux_lr": {"type": "number", "exclusiveMinimum": 0},
                    "momentum": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
                    "weight_decay": {"type": "number", "minimum": 0},
                    "update_order": {"enum": ["sequential", "snapshot"]},
                },
            },
        },
        "eval": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "bins": _POS_INT,
                "detection": {"type": "array", "items": {"enum": list(DETECTION_TASKS)}},
                "corruption": {
                    "type": "object",
                    "additionalProperties": False,
                    "properties": {
                        "kinds": {"type": "array", "minItems": 1,
                                  "items": {"enum": sorted(data.SEVERITY_TABLE)}},
                        "severities": {"type": "array", "minItems": 1,
                                       "items": {"type": "integer", "minimum": 1, "maximum": 5}},
                    },
                },
                "alpha_sweep": {"type": "array", "items": {"type": "number", "minimum": 0}},
            },
        },
    },
}


class ConfigError(ValueError):
    def __init__(self, errors: list[str]):
        super().__init__("; ".join(errors))
        self.errors = errors


def _path(parts) -> str:
    out = ""
    for p in parts:
        out += f"[{p}]" if isinstance(p, int) else (f".{p}" if out else str(p))
    return out or "<root>"


def _schema_at(parts) -> dict:
    node = CONFIG_SCHEMA
    for p in parts:
        node = node["items"] if isinstance(p, int) else node["properties"][p]
    return node


def schema_errors(cfg) -> list[str]:
    errors = []
    validator = jsonschema.Draft7Validator(CONFIG_SCHEMA)
    for err in sorted(validator.iter_errors(cfg), key=lambda e: (list(map(str, e.absolute_path)), e.message)):
        where = _path(err.absolute_path)
        if err.validator == "additionalProperties":
            known = list(_schema_at(err.absolute_path).get("properties", {}))
            for key in sorted(set(err.instance) - set(known)):
                near = difflib.get_close_matches(key, known, n=1)
                hint = f" (did you mean '{near[0]}'?)" if near else ""
                errors.append(f"{_path([*err.absolute_path, key])}: unknown key{hint}")
        else:
            errors.append(f"{where}: {err.message}")
    return errors


def _semantic_errors(cfg: dict) -> list[str]:
    errors = []
    ds = cfg.get("dataset", {})
    if ds.get("kind") == "csv" and "path" not in ds:
        errors.append("dataset.path: required for csv datasets")
    split = ds.get("split")
    if split is not None and abs(sum(split) - 1.0) > 1e-9:
        errors.append("dataset.split: fractions must sum to 1")
    if "means" in ds:
        k = len(ds["means"])
        if k < 2 or len({len(r) for r in ds["means"]}) != 1:
            errors.append("dataset.means: need >= 2 rows of equal length")
    names = [m.get("name") for m in cfg.get("methods", [])]
    for dup in sorted({n for n in names if names.count(n) > 1}):
        errors.append(f"methods: duplicate name '{dup}'")
    for i, m in enumerate(cfg.get("methods", [])):
        if m.get("method") == "de" and m.get("n_aux", 3) < 2:
            errors.append(f"methods[{i}].n_aux: deep ensembles need n_aux >= 2")
        if m.get("method") == "baseline" and "baseline" not in m:
            errors.append(f"methods[{i}].baseline: required when method is 'baseline'")
        b = m.get("baseline", {})
        if b.get("kind") == "label-smoothing" and b.get("param", 0) >= 1:
            errors.append(f"methods[{i}].baseline.param: label smoothing epsilon must be < 1")
    tasks = cfg.get("eval", {}).get("detection", [])
    if ds.get("kind") == "csv" and any(t != "misclassification" for t in tasks):
        errors.append("eval.detection: OOD tasks need a mixture dataset")
    return errors


def validate_config(cfg) -> list[str]:
    """All problems with ``cfg`` (a parsed JSON object); empty when valid."""
    errors = schema_errors(cfg)
    if not errors:
        errors = _semantic_errors(cfg)
    return errors


def load_config(path) -> dict:
    try:
        with open(path) as fh:
            cfg = json.load(fh)
    except FileNotFoundError:
        raise ConfigError([f"{path}: no such file"]) from None
    except json.JSONDecodeError as exc:
        raise ConfigError([f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}"]) from None
    errors = validate_config(cfg)
    if errors:
        raise ConfigError(errors)
    return cfg


def digest(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()[:16]


# -- building blocks ------------------------------------------------------

def mixture_spec(ds_cfg: dict, seed: int) -> data.MixtureSpec:
    d = {**DEFAULT_DATASET, **ds_cfg}
    means = np.array(d["means"]) if "means" in d else data.circle_means(d["n_classes"], d["radius"], d["dim"])
    return data.MixtureSpec(means, d["scale"], d["samples_per_class"], d["label_noise"], seed)


def load_datasets(cfg: dict, seed: int, base_dir: str = "."):
    """(train, val, test, mixture spec or None)."""
    ds_cfg = {**DEFAULT_DATASET, **cfg["dataset"]} if cfg["dataset"]["kind"] == "mixture" else cfg["dataset"]
    split = ds_cfg.get("split", DEFAULT_DATASET["split"])
    if ds_cfg["kind"] == "csv":
        path = ds_cfg["path"]
        if not os.path.isabs(path):
            path = os.path.join(base_dir, path)
        full, spec = data.load_csv(path), None
    else:
        spec = mixture_spec(ds_cfg, seed)
        full = data.make_gaussian_mixture(spec)
    tr, va, te = data.train_val_test_split(full, split, seed)
    return tr, va, te, spec


def train_config(m: dict, seed: int, bins: int) -> TrainConfig:
    defaults = TrainConfig()
    sched = defaults.primary_schedule
    primary = Schedule(m.get("lr", sched.initial_lr), m.get("warm_epochs", sched.warm_epochs),
                       m.get("decay_interval", sched.decay_interval), m.get("decay_factor", sched.decay_factor))
    # auxiliaries: constant rate, a tenth of the primary's initial rate
    aux = Schedule.constant(m.get("aux_lr", primary.initial_lr / 10))
    b = m.get("baseline", {"kind": "ce"})
    return TrainConfig(
        method=m["method"],
        baseline=L.BaselineLossSpec(b["kind"], float(b.get("param", 0.0))),
        alpha=float(m.get("alpha", defaults.alpha)),
        n_aux=int(m.get("n_aux", 3 if m["method"] == "de" else defaults.n_aux)),
        primary_hidden=tuple(m.get("primary_hidden", defaults.primary_hidden)),
        aux_hidden=tuple(m.get("aux_hidden", defaults.aux_hidden)),
        epochs=int(m.get("epochs", defaults.epochs)),
        batch_size=int(m.get("batch_size", defaults.batch_size)),
        primary_schedule=primary,
        aux_schedule=aux,
        momentum=float(m.get("momentum", defaults.momentum)),
        weight_decay=float(m.get("weight_decay", defaults.weight_decay)),
        seed=seed,
        update_order=m.get("update_order", defaults.update_order),
        eval_bins=bins,
    )


def _calibration(probs: L.ProbBatch, labels: np.ndarray, bins: int) -> dict:
    e, stats = metrics.ece(probs, labels, bins)
    cw, _ = metrics.classwise_ece(probs, labels, bins)
    return {"accuracy": metrics.accuracy(probs, labels), "ece": e, "cw_ece": cw,
            "mean_confidence": float(probs.confidence.mean()), "_stats": stats}


def evaluate(result: TrainResult, test: data.LabeledDataset, bins: int, tasks=(),
             ood=None, corruption=None, seed: int = 0, feature_std=None) -> dict:
    probs = result.predict(test.features)
    cal = _calibration(probs, test.labels, bins)
    hist = metrics.confidence_histogram(probs, bins, test.labels)
    out = {k: v for k, v in cal.items() if not k.startswith("_")}
    out["reliability"] = cal["_stats"].rows()
    out["confidence_hist"] = {"rows": hist.rows(), "mean_confidence": hist.mean_confidence,
                              "accuracy": hist.accuracy}
    det = {}
    for task in tasks:
        if task == "misclassification":
            pos, neg = metrics.misclassification_scores(probs, test.labels)
            if pos.size == 0 or neg.size == 0:
                continue
            det[task] = metrics.detection_metrics(pos, neg, "correct").to_dict()
        else:
            _, near, far = ood
            other = near if task == "near_ood" else far
            det[task] = metrics.detection_metrics(probs.confidence,
                                                  result.predict(other.features).confidence,
                                                  "in-distribution").to_dict()
    out["detection"] = det
    rows = []
    if corruption:
        for kind in corruption.get("kinds", ["gaussian-noise"]):
            for sev in corruption.get("severities", [1, 2, 3, 4, 5]):
                c = data.corrupt(test, data.CorruptionSpec(kind, sev), seed, feature_std)
                r = _calibration(result.predict(c.features), c.labels, bins)
                rows.append({"kind": kind, "severity": sev, "accuracy": r["accuracy"],
                             "ece": r["ece"], "cw_ece": r["cw_ece"]})
    out["corruption"] = rows
    return out


# -- pipeline -------------------------------------------------------------

def run(cfg: dict, seed: int | None = None, base_dir: str = ".", keep_checkpoints: dict | None = None) -> dict:
    """Execute ``cfg`` and return the report dict (nothing is written)."""
    seed = cfg.get("seed", 0) if seed is None else seed
    ev = cfg.get("eval", {})
    bins = ev.get("bins", metrics.DEFAULT_BINS)
    tasks = ev.get("detection", list(DETECTION_TASKS) if cfg["dataset"]["kind"] == "mixture"
                   else ["misclassification"])
    tr, va, te, spec = load_datasets(cfg, seed, base_dir)
    ood = data.make_ood_splits(spec, seed, n_ood=len(te)) if spec is not None and any(
        t != "misclassification" for t in tasks) else None
    std = tr.features.std(axis=0)

    report = {
        "format_version": REPORT_VERSION,
        "seed": seed,
        "config_digest": digest(cfg),
        "dataset_digest": digest([tr.digest(), va.digest(), te.digest()]),
        "dataset": {"n_classes": tr.n_classes, "dim": tr.dim, "n_train": len(tr),
                    "n_val": len(va), "n_test": len(te)},
        "bins": bins,
        "methods": [],
    }
    for m in cfg["methods"]:
        tcfg = train_config(m, seed, bins)
        result = train(tcfg, tr, va)
        entry = {"name": m["name"], "method": m["method"], "train_config": tcfg.to_dict(),
                 "train_config_digest": tcfg.digest()}
        entry.update(evaluate(result, te, bins, tasks, ood, ev.get("corruption"), seed, std))
        entry["history"] = [h.records for h in result.histories]
        report["methods"].append(entry)
        if keep_checkpoints is not None:
            keep_checkpoints[m["name"]] = result

    sweep = ev.get("alpha_sweep")
    if sweep:
        rows = []
        for m in cfg["methods"]:
            if m["method"] != "mte":
                continue
            for alpha in sweep:
                tcfg = replace(train_config(m, seed, bins), alpha=float(alpha))
                result = train(tcfg, tr, va)
                val = _calibration(result.predict(va.features), va.labels, bins)
                test = _calibration(result.predict(te.features), te.labels, bins)
                rows.append({"name": m["name"], "alpha": float(alpha),
                             "val_accuracy": val["accuracy"], "val_ece": val["ece"],
                             "accuracy": test["accuracy"], "ece": test["ece"], "cw_ece": test["cw_ece"]})
        # validation-based selection: lowest validation ECE per method
        for name in {r["name"] for r in rows}:
            mine = [r for r in rows if r["name"] == name]
            best = min(mine, key=lambda r: (r["val_ece"], -r["val_accuracy"]))
            for r in mine:
                r["selected"] = r is best
        report["alpha_sweep"] = rows
    return report


# -- tables ---------------------------------------------------------------

def _csv(header: list[str], rows: list[list]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([repr(v) if isinstance(v, float) else v for v in r])
    return buf.getvalue()


METRIC_COLUMNS = ["accuracy", "ece", "cw_ece", "mean_confidence"]
DETECTION_COLUMNS = ["fpr95", "d_error", "auroc", "aupr"]
RELIABILITY_COLUMNS = ["bin", "lower", "upper", "count", "accuracy", "confidence", "gap"]
HIST_COLUMNS = ["bin", "lower", "upper", "count"]


def report_tables(report: dict) -> dict[str, str]:
    """Render the CSV tables for ``report``; sections absent from the report are skipped."""
    methods = report["methods"]
    tables = {
        "metrics.csv": _csv(["name", "method", *METRIC_COLUMNS],
                            [[m["name"], m["method"], *(m[c] for c in METRIC_COLUMNS)] for m in methods]),
        "reliability.csv": _csv(["name", *RELIABILITY_COLUMNS],
                                [[m["name"], *(r[c] for c in RELIABILITY_COLUMNS)]
                                 for m in methods for r in m["reliability"]]),
        "confidence_hist.csv": _csv(["name", *HIST_COLUMNS, "mean_confidence", "accuracy"],
                                    [[m["name"], *(r[c] for c in HIST_COLUMNS),
                                      m["confidence_hist"]["mean_confidence"], m["confidence_hist"]["accuracy"]]
                                     for m in methods for r in m["confidence_hist"]["rows"]]),
    }
    det = [[m["name"], task, m["detection"][task]["positive"],
            *(m["detection"][task][c] for c in DETECTION_COLUMNS)]
           for m in methods for task in DETECTION_TASKS if task in m["detection"]]
    if det:
        tables["detection.csv"] = _csv(["name", "task", "positive", *DETECTION_COLUMNS], det)
    cor = [[m["name"], r["kind"], r["severity"], r["accuracy"], r["ece"], r["cw_ece"]]
           for m in methods for r in m["corruption"]]
    if cor:
        tables["corruption_sweep.csv"] = _csv(["name", "kind", "severity", "accuracy", "ece", "cw_ece"], cor)
    if report.get("alpha_sweep"):
        cols = ["name", "alpha", "val_accuracy", "val_ece", "accuracy", "ece", "cw_ece", "selected"]
        tables["alpha_sweep.csv"] = _csv(cols, [[r[c] for c in cols] for r in report["alpha_sweep"]])
    return tables


def report_json(report: dict) -> str:
    return json.dumps(report, indent=1, sort_keys=True) + "\n"


def write_outputs(out_dir, files: dict[str, str]) -> None:
    """Write every file to a staging directory first, then move each into place."""
    out_dir = Path(out_dir)
    out_dir.parent.mkdir(parents=True, exist_ok=True)
    stage = Path(tempfile.mkdtemp(prefix=".stage-", dir=out_dir.parent))
    try:
        for rel, text in files.items():
            target = stage / rel
            target.parent.mkdir(parents=True, exist_ok=True)
            with open(target, "w", newline="") as fh:
                fh.write(text)
        out_dir.mkdir(exist_ok=True)
        for rel in files:
            (out_dir / rel).parent.mkdir(parents=True, exist_ok=True)
            os.replace(stage / rel, out_dir / rel)
    finally:
        shutil.rmtree(stage, ignore_errors=True)


def output_files(report: dict, results: dict[str, TrainResult] | None = None) -> dict[str, str]:
    files = {"report.json": report_json(report), **report_tables(report)}
    for name, res in (results or {}).items():
        for i, ck in enumerate(res.inference + res.extra):
            files[f"checkpoints/{name}_{ck.train_meta.get('role', i)}.json"] = json.dumps(
                checkpoint_to_dict(ck), indent=1, sort_keys=True)
        for i, h in enumerate(res.histories):
            suffix = "" if len(res.histories) == 1 else f"_{i}"
            files[f"history_{name}{suffix}.csv"] = h.to_csv()
    return files


# -- compare --------------------------------------------------------------

def compare(report_paths, out_path=None) -> str:
    """One row per (report, method): headline metrics plus detection columns."""
    if len(report_paths) < 2:
        raise ConfigError(["compare needs at least two reports"])
    reports = []
    for p in report_paths:
        with open(p) as fh:
            reports.append(json.load(fh))
    digests = {r["dataset_digest"] for r in reports}
    if len(digests) != 1:
        raise ConfigError([f"reports were produced on different datasets: {sorted(digests)}"])
    tasks = sorted({t for r in reports for m in r["methods"] for t in m["detection"]})
    header = ["report", "name", "method", "seed", *METRIC_COLUMNS,
              *(f"{t}_{c}" for t in tasks for c in DETECTION_COLUMNS)]
    rows = []
    for path, r in zip(report_paths, reports):
        for m in r["methods"]:
            det = [m["detection"].get(t, {}).get(c, "") for t in tasks for c in DETECTION_COLUMNS]
            rows.append([os.path.basename(os.fspath(path)), m["name"], m["method"], r["seed"],
                         *(m[c] for c in METRIC_COLUMNS), *det])
    text = _csv(header, rows)
    if out_path is not None:
        from .nn import atomic_write_text

        atomic_write_text(out_path, text)
    return text
