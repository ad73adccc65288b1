"""Experiment orchestration: config parsing and validation, seeded runs of
method x regime grids, persistence, comparison tables and sweeps."""

from __future__ import annotations

import copy
import csv
import hashlib
import json
import os
import tempfile
import time
from dataclasses import dataclass, field

import numpy as np

from . import clmethods, metrics, numcore, supervision, taskstream
from .clmethods import CLState, TrainRunConfig, evaluate_accuracy
from .metrics import AccuracyMatrix
from .supervision import REGIMES
from .taskstream import (DataBundle, ProtocolConfig, SyntheticHierarchySpec,
                         generate_synthetic, grow_label_space, load_dataset,
                         split_protocol, split_train_test)

FRAMEWORK_VERSION = "0.1.0"

# Named deviations from the methods this framework approximates; recorded in
# every run manifest so comparisons stay honest about what was simplified.
NAMED_DEVIATIONS = [
    "gradient projection uses a single averaged replay gradient, not a "
    "per-task constraint set",
    "oracle head transplanted as-is and frozen; no encoder recalibration",
]


class ConfigError(ValueError):
    pass


class ComparisonError(ValueError):
    pass


_SCHEMA = {
    "protocol": {"protocol": str, "B": int, "C": int, "K": (int, type(None)),
                 "seed": int, "class_order_seed": int, "n_domains": int,
                 "domain_shift": (int, float)},
    "synthetic": {"n_superclasses": int, "classes_per_superclass": int,
                  "feature_dim": int, "sigma_super": (int, float),
                  "sigma_class": (int, float), "sigma_x": (int, float),
                  "train_per_class": int, "test_per_class": int},
    "dataset_path": (str, type(None)),
    "test_fraction": (int, float),
    "regime": str,
    "methods": list,
    "embeddings": {"mode": str, "path": (str, type(None)),
                   "alpha": (int, float), "seed": int},
    "train": {"epochs": int, "batch_size": int, "learning_rate": (int, float),
              "momentum": (int, float), "lr_schedule": list,
              "replay_capacity": int, "ewc_lambda": (int, float),
              "distill_weight": (int, float), "distill_include_replay": bool,
              "replay_balance": bool,
              "fisher_batches": (int, type(None)), "sim_mode": str,
              "sim_scale": (int, float)},
    "encoder": {"hidden": list, "output_dim": int},
    "seeds": list,
    "output_dir": str,
    "analyses": {"drift": bool, "drift_k": int, "drift_centered": bool,
                 "correlation": bool, "correlation_classes": (int, type(None))},
    "name": str,
}

_DEFAULTS = {
    "protocol": {"protocol": "class_il", "B": 16, "C": 4, "K": None,
                 "seed": 0, "class_order_seed": 0, "n_domains": 4,
                 "domain_shift": 1.0},
    "synthetic": {"n_superclasses": 8, "classes_per_superclass": 4,
                  "feature_dim": 32, "sigma_super": 1.0, "sigma_class": 0.5,
                  "sigma_x": 0.25, "train_per_class": 20, "test_per_class": 10},
    "dataset_path": None,
    "test_fraction": 0.25,
    "regime": "random_trainable",
    "methods": ["finetune"],
    "embeddings": {"mode": "hierarchy", "path": None, "alpha": 0.5, "seed": 0},
    "train": {"epochs": 30, "batch_size": 32, "learning_rate": 0.05,
              "momentum": 0.9, "lr_schedule": [[15, 0.1], [25, 0.1]],
              "replay_capacity": 20, "ewc_lambda": 100.0,
              "distill_weight": 2.0, "distill_include_replay": True,
              "replay_balance": False,
              "fisher_batches": None, "sim_mode": "cosine", "sim_scale": 16.0},
    "encoder": {"hidden": [64, 64], "output_dim": 32},
    "seeds": [0],
    "output_dir": "runs",
    "analyses": {"drift": False, "drift_k": 10, "drift_centered": True,
                 "correlation": False, "correlation_classes": None},
    "name": "",
}


def _validate(section, data, schema, path=""):
    if not isinstance(data, dict):
        raise ConfigError(f"{path or section}: expected a mapping")
    for key, val in data.items():
        if key not in schema:
            raise ConfigError(f"unknown config key {path}{key}")
        expected = schema[key]
        if isinstance(expected, dict):
            _validate(key, val, expected, path=f"{path}{key}.")
        elif not isinstance(val, expected):
            raise ConfigError(
                f"config key {path}{key} has wrong type "
                f"{type(val).__name__}")


@dataclass
class ExperimentConfig:
    data: dict

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        _validate("config", raw, _SCHEMA)
        merged = copy.deepcopy(_DEFAULTS)
        for key, val in raw.items():
            if isinstance(val, dict):
                merged[key].update(val)
            else:
                merged[key] = val
        if merged["regime"] not in REGIMES:
            raise ConfigError(f"unknown regime {merged['regime']!r}")
        if not merged["seeds"]:
            raise ConfigError("seeds list must be nonempty")
        emb = merged["embeddings"]
        if emb["mode"] not in ("hierarchy", "hash", "file"):
            raise ConfigError(f"unknown embeddings mode {emb['mode']!r}")
        if emb["mode"] == "file":
            if not emb["path"]:
                raise ConfigError("embeddings.mode=file requires a path")
            if not os.path.exists(emb["path"]):
                raise ConfigError(f"embeddings file not found: {emb['path']}")
        return cls(merged)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        with open(path) as fh:
            try:
                raw = json.load(fh)
            except json.JSONDecodeError as e:
                raise ConfigError(f"{path}: invalid JSON ({e})")
        return cls.from_dict(raw)

    def fingerprint(self) -> str:
        canon = json.dumps(self.data, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()[:16]

    def __getitem__(self, key):
        return self.data[key]


def _atomic_write(path, text):
    d = os.path.dirname(path) or "."
    fd, tmp = tempfile.mkstemp(dir=d)
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _build_bundle(config: ExperimentConfig, seed) -> DataBundle:
    if config["dataset_path"]:
        ds = load_dataset(config["dataset_path"])
        return split_train_test(ds, config["test_fraction"], seed)
    spec = SyntheticHierarchySpec(**config["synthetic"])
    return generate_synthetic(spec, seed)


def _build_targets(config, bundle, d):
    emb = config["embeddings"]
    if emb["mode"] == "file":
        table = supervision.load_targets(emb["path"])
        if table.dim != d:
            raise ConfigError(
                f"embeddings dim {table.dim} != encoder output dim {d}")
        return table
    if emb["mode"] == "hierarchy":
        if bundle.superclass_of is None:
            raise ConfigError("hierarchy embeddings need synthetic data")
        return supervision.fallback_targets(
            bundle.class_names, d, emb["seed"], mode="hierarchy",
            superclass_of=bundle.superclass_of, alpha=emb["alpha"])
    return supervision.fallback_targets(bundle.class_names, d, emb["seed"],
                                        mode="hash")


def _head_block_for_task(config, regime, task, table, ortho_table, oracle,
                         d, seed):
    cls_names = [task.train.class_names[c] for c in task.class_ids]
    if regime == "random_trainable":
        return supervision.random_block(task.class_ids, d, seed,
                                        task_index=task.task_index)
    if regime in ("semantic_frozen", "semantic_updated"):
        return table.rows(cls_names)
    if regime == "orthogonal_frozen":
        return ortho_table.rows(cls_names)
    if regime == "oracle_frozen":
        return oracle.table.rows(cls_names)
    raise ConfigError(f"unknown regime {regime!r}")


def run_seed(config: ExperimentConfig, seed: int) -> dict:
    """One sequential CL run: returns the accuracy matrix, metric summary
    and any requested analyses for a single seed."""
    proto = dict(config["protocol"])
    proto["seed"] = seed
    pconf = ProtocolConfig(**proto)
    bundle = _build_bundle(config, seed)
    stream = split_protocol(bundle, pconf)

    d = config["encoder"]["output_dim"]
    d_in = bundle.train.X.shape[1]
    regime = config["regime"]

    table = ortho = oracle = None
    if regime in ("semantic_frozen", "semantic_updated"):
        table = _build_targets(config, bundle, d)
    elif regime == "orthogonal_frozen":
        table = _build_targets(config, bundle, d)
        order_names = [bundle.class_names[c] for c in stream.class_order]
        ortho = supervision.orthogonal_table(table, order_names,
                                             config["embeddings"]["seed"])
    elif regime == "oracle_frozen":
        tr = config["train"]
        oracle = supervision.build_oracle_head(
            bundle, d, seed, epochs=tr["epochs"] * 2,
            batch_size=tr["batch_size"], lr=tr["learning_rate"],
            momentum=tr["momentum"], hidden=tuple(config["encoder"]["hidden"]),
            sim_mode=tr["sim_mode"], sim_scale=tr["sim_scale"])

    train_cfg = TrainRunConfig(regime=regime, seed=seed,
                               methods=tuple(config["methods"]),
                               **{k: (tuple(tuple(x) for x in v)
                                      if k == "lr_schedule" else v)
                                  for k, v in config["train"].items()})
    encoder = numcore.EncoderModel.init(
        (d_in, *config["encoder"]["hidden"], d),
        np.random.SeedSequence([int(seed), 11]))
    head = supervision.ClassifierHead(regime, d)
    state = CLState(encoder, head, train_cfg)

    analyses = config["analyses"]
    T = len(stream)
    A = AccuracyMatrix(T)
    block_hashes = {}  # block index -> sha at construction time
    ref_features = []  # task-0 test features after each stage, for drift
    domain_il = stream.protocol == "domain_il"

    def block_hash(b):
        import hashlib as _h
        return _h.sha256(np.ascontiguousarray(b.weights).tobytes()).hexdigest()

    for t, task in enumerate(stream.tasks):
        if domain_il:
            if t == 0:
                block = _head_block_for_task(config, regime, task, table,
                                             ortho, oracle, d, seed)
                cls_names = [bundle.class_names[c] for c in task.class_ids]
                head.add_block(block, task.class_ids, cls_names)
            block_index = 0
        else:
            block = _head_block_for_task(config, regime, task, table, ortho,
                                         oracle, d, seed)
            cls_names = [bundle.class_names[c] for c in task.class_ids]
            head.add_block(block, task.class_ids, cls_names)
            block_index = len(head.blocks) - 1
        if head.frozen:
            for bi, b in enumerate(head.blocks):
                block_hashes.setdefault(bi, block_hash(b))
        clmethods.train_task(state, task, current_block_index=block_index)
        clmethods.finish_task(state, task)

        for i in range(t + 1):
            if stream.protocol == "task_il":
                space = stream.tasks[i].class_ids
            else:
                space = grow_label_space(stream, t)
            acc = evaluate_accuracy(encoder, head, stream.tasks[i].test, space,
                                    sim_mode=train_cfg.sim_mode,
                                    sim_scale=train_cfg.sim_scale)
            A.set(i, t, acc)
        if analyses["drift"]:
            ref_features.append(
                numcore.forward(encoder, stream.tasks[0].test.X))

    if head.frozen:
        for bi, b in enumerate(head.blocks):
            if block_hash(b) != block_hashes[bi]:
                raise RuntimeError("frozen head block mutated during training")

    result = {"seed": seed, "summary": metrics.summary_json(A),
              "accuracy_matrix": A,
              "frozen_block_hashes": (sorted(block_hashes.values())
                                      if head.frozen else None)}
    if analyses["drift"]:
        k = analyses["drift_k"]
        drifts, stages = [], []
        for t in range(1, T):
            drifts.append(metrics.repre_drift(
                ref_features[0], ref_features[t], k,
                centered=analyses["drift_centered"]))
            stages.append(t)
        result["drift"] = metrics.DriftReport(k, analyses["drift_centered"],
                                              0, stages, drifts)
    if analyses["correlation"]:
        n_cls = analyses["correlation_classes"] or len(bundle.class_names)
        cls = stream.class_order[:n_cls]
        result["correlation"] = metrics.interclass_correlation(
            encoder, bundle.test, cls)
        result["superclass_of"] = bundle.superclass_of
    if oracle is not None:
        result["oracle_joint_accuracy"] = oracle.joint_accuracy
    return result


@dataclass
class RunRecord:
    fingerprint: str
    config: dict
    seed_results: dict       # seed -> per-seed result dict
    failures: dict           # seed -> error string
    wall_clock: float
    framework_version: str = FRAMEWORK_VERSION
    named_deviations: list = field(default_factory=lambda: list(NAMED_DEVIATIONS))

    def metric_means(self):
        lasts, avgs, forgets = [], [], []
        for res in self.seed_results.values():
            s = res["summary"]
            lasts.append(s["last"])
            avgs.append(s["avg"])
            if s["forget"] is not None:
                forgets.append(s["forget"])
        def stats(vals):
            if not vals:
                return None, None
            return float(np.mean(vals)), float(np.std(vals))
        return {"last": stats(lasts), "avg": stats(avgs),
                "forget": stats(forgets)}


def _seed_dir(outdir, fingerprint, seed):
    return os.path.join(outdir, fingerprint, str(seed))


def _persist_seed(config, outdir, fingerprint, seed, result):
    d = _seed_dir(outdir, fingerprint, seed)
    os.makedirs(d, exist_ok=True)
    result["accuracy_matrix"].save_csv(os.path.join(d, "accuracy_matrix.csv"))
    _atomic_write(os.path.join(d, "metrics.json"),
                  json.dumps(result["summary"], indent=2, sort_keys=True) + "\n")
    if "drift" in result:
        result["drift"].save_csv(os.path.join(d, "drift.csv"))
    if "correlation" in result:
        result["correlation"].save_csv(os.path.join(d, "correlation.csv"))


def _load_seed(outdir, fingerprint, seed):
    d = _seed_dir(outdir, fingerprint, seed)
    mpath = os.path.join(d, "metrics.json")
    apath = os.path.join(d, "accuracy_matrix.csv")
    if not (os.path.exists(mpath) and os.path.exists(apath)):
        return None
    with open(mpath) as fh:
        summary = json.load(fh)
    result = {"seed": seed, "summary": summary,
              "accuracy_matrix": AccuracyMatrix.load_csv(apath)}
    dpath = os.path.join(d, "drift.csv")
    if os.path.exists(dpath):
        with open(dpath, newline="") as fh:
            rows = list(csv.reader(fh))[1:]
        result["drift"] = metrics.DriftReport(
            int(rows[0][2]), bool(int(rows[0][3])), int(rows[0][0]),
            [int(r[1]) for r in rows], [float(r[4]) for r in rows])
    return result


def run_experiment(config: ExperimentConfig, resume=True) -> RunRecord:
    """Execute every seed; a failing seed is recorded and the others
    proceed. Completed seeds are skipped on resume (fingerprint match)."""
    t0 = time.time()
    fp = config.fingerprint()
    outdir = config["output_dir"]
    seed_results, failures = {}, {}
    for seed in config["seeds"]:
        if resume:
            cached = _load_seed(outdir, fp, seed)
            if cached is not None:
                seed_results[seed] = cached
                continue
        try:
            result = run_seed(config, seed)
        except Exception as e:  # noqa: BLE001 - seed isolation is the contract
            failures[seed] = f"{type(e).__name__}: {e}"
            continue
        _persist_seed(config, outdir, fp, seed, result)
        seed_results[seed] = result
    record = RunRecord(fp, config.data, seed_results, failures,
                       time.time() - t0)
    manifest = {"fingerprint": fp, "config": config.data,
                "seeds_completed": sorted(seed_results),
                "seeds_failed": {str(k): v for k, v in failures.items()},
                "framework_version": FRAMEWORK_VERSION,
                "named_deviations": record.named_deviations,
                "metrics": record.metric_means(),
                "wall_clock_seconds": record.wall_clock}
    os.makedirs(os.path.join(outdir, fp), exist_ok=True)
    _atomic_write(os.path.join(outdir, fp, "manifest.json"),
                  json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return record


def _protocol_fingerprint(record: RunRecord) -> str:
    keys = {"protocol": record.config["protocol"],
            "synthetic": record.config.get("synthetic"),
            "dataset_path": record.config.get("dataset_path")}
    return hashlib.sha256(
        json.dumps(keys, sort_keys=True).encode()).hexdigest()[:16]


def compare(records, baseline=None):
    """Comparison table across run records sharing a protocol: per record,
    Last/Avg/Forget mean +- population stddev and deltas vs the baseline."""
    if not records:
        raise ComparisonError("no records to compare")
    protos = {_protocol_fingerprint(r) for r in records}
    if len(protos) != 1:
        raise ComparisonError("records use different protocols")
    names = []
    for r in records:
        name = r.config.get("name") or r.fingerprint
        names.append(name)
    if baseline is None:
        base_idx = 0
    else:
        if baseline not in names:
            raise ComparisonError(f"baseline {baseline!r} not among records")
        base_idx = names.index(baseline)
    base = records[base_idx].metric_means()
    rows = []
    for name, r in zip(names, records):
        m = r.metric_means()
        row = {"name": name, "is_baseline": name == names[base_idx]}
        for metric in ("last", "avg", "forget"):
            mean, std = m[metric]
            bmean = base[metric][0]
            row[metric + "_mean"] = mean
            row[metric + "_std"] = std
            row[metric + "_delta"] = (None if mean is None or bmean is None
                                      else mean - bmean)
        rows.append(row)
    return rows


def save_comparison(rows, csv_path=None, json_path=None):
    cols = ["name", "is_baseline",
            "last_mean", "last_std", "last_delta",
            "avg_mean", "avg_std", "avg_delta",
            "forget_mean", "forget_std", "forget_delta"]
    if csv_path:
        with open(csv_path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=cols)
            w.writeheader()
            w.writerows(rows)
    if json_path:
        _atomic_write(json_path, json.dumps(rows, indent=2, sort_keys=True) + "\n")


SWEEP_AXES = {
    "exemplars_per_class": (2, 5, 10, 20),
    "K": (4, 8, 16, 32),
    "B": None,  # needs explicit values
}


def sweep(config: ExperimentConfig, axis, values=None):
    """One run per axis value with a shared seed set and class order."""
    if axis not in SWEEP_AXES:
        raise ConfigError(f"unknown sweep axis {axis!r}")
    if values is None:
        values = SWEEP_AXES[axis]
        if values is None:
            raise ConfigError(f"axis {axis!r} requires explicit values")
    records = {}
    total = None
    if config["synthetic"]:
        s = config["synthetic"]
        total = s["n_superclasses"] * s["classes_per_superclass"]
    for v in values:
        data = copy.deepcopy(config.data)
        if axis == "exemplars_per_class":
            data["train"]["replay_capacity"] = int(v)
            if int(v) > 0 and "rehearsal" not in data["methods"]:
                data["methods"] = list(data["methods"]) + ["rehearsal"]
        elif axis == "K":
            data["protocol"]["protocol"] = "fewshot_class_il"
            data["protocol"]["K"] = int(v)
        elif axis == "B":
            B, C = int(v), data["protocol"]["C"]
            if total is not None and (B < 1 or B > total
                                      or (total - B) % C != 0):
                raise ConfigError(
                    f"B={B} with C={C} does not divide {total} classes")
            data["protocol"]["B"] = B
        data["name"] = f"{data.get('name') or 'sweep'}_{axis}={v}"
        records[v] = run_experiment(ExperimentConfig.from_dict(data))
    return records
