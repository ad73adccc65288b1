"""Dataset generation and protocol splitting.

A synthetic two-level hierarchy (superclasses containing classes) provides
ground-truth semantic structure at desk scale. Splitting covers the four
protocols: class-incremental, task-incremental, domain-incremental and
few-shot class-incremental.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

PROTOCOLS = ("class_il", "task_il", "domain_il", "fewshot_class_il")


class ProtocolError(ValueError):
    pass


class DatasetFormatError(ValueError):
    pass


@dataclass
class Dataset:
    """Column-array dataset: features (n, d_in), global class ids, domains."""

    X: np.ndarray
    y: np.ndarray
    domain: np.ndarray
    class_names: list  # indexed by global class id

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.int64)
        self.domain = np.asarray(self.domain, dtype=np.int64)

    def __len__(self):
        return self.X.shape[0]

    def subset(self, mask) -> "Dataset":
        return Dataset(self.X[mask], self.y[mask], self.domain[mask],
                       self.class_names)


@dataclass
class DataBundle:
    train: Dataset
    test: Dataset
    class_names: list
    centers: np.ndarray | None = None  # ground-truth class centers, if synthetic
    superclass_of: list | None = None  # class id -> superclass id, if synthetic


@dataclass
class TaskSpec:
    task_index: int
    class_ids: list
    train: Dataset
    test: Dataset
    shots_per_class: int | None = None  # None = unlimited
    domain_id: int = 0


@dataclass
class TaskStream:
    protocol: str
    tasks: list
    class_order: list          # seeded global order shared across methods
    class_names: list

    def __len__(self):
        return len(self.tasks)


@dataclass
class ProtocolConfig:
    protocol: str
    B: int
    C: int
    K: int | None = None
    seed: int = 0
    class_order_seed: int = 0
    n_domains: int = 4          # domain-IL only
    domain_shift: float = 1.0   # domain-IL only

    def __post_init__(self):
        if self.protocol not in PROTOCOLS:
            raise ProtocolError(f"unknown protocol {self.protocol!r}")
        if self.protocol == "fewshot_class_il" and not self.K:
            raise ProtocolError("few-shot protocol requires K")


@dataclass
class SyntheticHierarchySpec:
    n_superclasses: int = 8
    classes_per_superclass: int = 4
    feature_dim: int = 32
    sigma_super: float = 1.0
    sigma_class: float = 0.5
    sigma_x: float = 0.25
    train_per_class: int = 20
    test_per_class: int = 10

    def __post_init__(self):
        for name in ("sigma_super", "sigma_class", "sigma_x"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")

    @property
    def n_classes(self):
        return self.n_superclasses * self.classes_per_superclass


def _substream(seed, name: str) -> np.random.Generator:
    """Named child RNG so ablations only differ where intended."""
    tag = int.from_bytes(name.encode(), "big") % (2**32)
    return np.random.default_rng(np.random.SeedSequence([int(seed), tag]))


def generate_synthetic(spec: SyntheticHierarchySpec, seed) -> DataBundle:
    """Sample the hierarchy: class center = superclass center + class offset,
    samples = center + isotropic noise. Class names are super{i}_class{j}."""
    rng = _substream(seed, "synthetic")
    d = spec.feature_dim
    names, centers, supers = [], [], []
    super_centers = rng.normal(0.0, spec.sigma_super,
                               size=(spec.n_superclasses, d))
    for i in range(spec.n_superclasses):
        for j in range(spec.classes_per_superclass):
            offset = rng.normal(0.0, spec.sigma_class, size=d)
            centers.append(super_centers[i] + offset)
            names.append(f"super{i}_class{j}")
            supers.append(i)
    centers = np.asarray(centers)

    def sample_split(per_class):
        xs, ys = [], []
        for cid in range(spec.n_classes):
            noise = rng.normal(0.0, spec.sigma_x, size=(per_class, d))
            xs.append(centers[cid] + noise)
            ys.append(np.full(per_class, cid))
        X = np.concatenate(xs)
        y = np.concatenate(ys)
        return Dataset(X, y, np.zeros(len(y)), names)

    train = sample_split(spec.train_per_class)
    test = sample_split(spec.test_per_class)
    return DataBundle(train, test, names, centers=centers, superclass_of=supers)


def _class_order(n_classes, seed) -> list:
    rng = _substream(seed, "class_order")
    return list(rng.permutation(n_classes))


def _task_class_chunks(order, B, C):
    total = len(order)
    if B <= 0 or (total > B and C <= 0):
        raise ProtocolError("B and C must be positive")
    if (total - B) % max(C, 1) != 0:
        raise ProtocolError(
            f"cannot split {total} classes into B={B} plus chunks of C={C}")
    chunks = [order[:B]]
    for start in range(B, total, C):
        chunks.append(order[start:start + C])
    return chunks


def _subsample_per_class(ds: Dataset, class_ids, k, rng) -> Dataset:
    keep = []
    for cid in class_ids:
        idx = np.flatnonzero(ds.y == cid)
        if len(idx) < k:
            raise ProtocolError(f"class {cid} has {len(idx)} < K={k} examples")
        keep.append(rng.choice(idx, size=k, replace=False))
    keep = np.sort(np.concatenate(keep))
    return ds.subset(keep)


def make_domains(bundle: DataBundle, n_domains, shift, seed) -> DataBundle:
    """Derive domain-shifted variants of the base data: per domain, a seeded
    orthogonal rotation plus a mean shift. Domain 0 is the base data."""
    rng = _substream(seed, "domains")
    d = bundle.train.X.shape[1]
    parts_tr, parts_te = [], []
    for dom in range(n_domains):
        if dom == 0:
            Q = np.eye(d)
            mu = np.zeros(d)
        else:
            a = rng.normal(size=(d, d))
            Q, _ = np.linalg.qr(a)
            Q = np.eye(d) + shift * (Q - np.eye(d))  # partial rotation
            mu = rng.normal(0.0, shift, size=d)
        for src, parts in ((bundle.train, parts_tr), (bundle.test, parts_te)):
            parts.append(Dataset(src.X @ Q.T + mu, src.y.copy(),
                                 np.full(len(src), dom), bundle.class_names))
    def cat(parts):
        return Dataset(np.concatenate([p.X for p in parts]),
                       np.concatenate([p.y for p in parts]),
                       np.concatenate([p.domain for p in parts]),
                       bundle.class_names)
    return DataBundle(cat(parts_tr), cat(parts_te), bundle.class_names,
                      centers=bundle.centers, superclass_of=bundle.superclass_of)


def split_protocol(bundle: DataBundle, config: ProtocolConfig) -> TaskStream:
    n_classes = len(bundle.class_names)

    if config.protocol == "domain_il":
        domains = sorted(set(bundle.train.domain.tolist()))
        if len(domains) < 2:
            bundle = make_domains(bundle, config.n_domains, config.domain_shift,
                                  config.seed)
            domains = list(range(config.n_domains))
        order = _class_order(n_classes, config.class_order_seed)
        tasks = []
        for t, dom in enumerate(domains):
            tr = bundle.train.subset(bundle.train.domain == dom)
            te = bundle.test.subset(bundle.test.domain == dom)
            tasks.append(TaskSpec(t, list(order), tr, te, domain_id=dom))
        return TaskStream("domain_il", tasks, order, bundle.class_names)

    order = _class_order(n_classes, config.class_order_seed)
    chunks = _task_class_chunks(order, config.B, config.C)
    sample_rng = _substream(config.seed, "fewshot_sampling")
    tasks = []
    for t, chunk in enumerate(chunks):
        mask_tr = np.isin(bundle.train.y, chunk)
        mask_te = np.isin(bundle.test.y, chunk)
        tr = bundle.train.subset(mask_tr)
        te = bundle.test.subset(mask_te)
        shots = None
        if config.protocol == "fewshot_class_il" and t >= 1:
            tr = _subsample_per_class(tr, chunk, config.K, sample_rng)
            shots = config.K
        tasks.append(TaskSpec(t, list(chunk), tr, te, shots_per_class=shots))
    return TaskStream(config.protocol, tasks, order, bundle.class_names)


def grow_label_space(stream: TaskStream, upto_task: int) -> list:
    """Global class ids seen up to and including task t, in stream order.

    Task-IL evaluation restricts to a single task's classes instead; this
    is the class-IL / few-shot union (constant for domain-IL).
    """
    if upto_task >= len(stream.tasks):
        raise ProtocolError(f"task {upto_task} out of range")
    if stream.protocol == "domain_il":
        return list(stream.tasks[0].class_ids)
    seen = []
    for task in stream.tasks[:upto_task + 1]:
        seen.extend(task.class_ids)
    return seen


def save_dataset(ds: Dataset, path):
    """Text format: `dim <d_in> classes <n>`, then
    `<class_name>\\t<domain_id>\\t<v1> ... <v_din>` per example."""
    with open(path, "w") as fh:
        fh.write(f"dim {ds.X.shape[1]} classes {len(ds.class_names)}\n")
        for i in range(len(ds)):
            vec = " ".join(repr(float(v)) for v in ds.X[i])
            fh.write(f"{ds.class_names[ds.y[i]]}\t{ds.domain[i]}\t{vec}\n")


def load_dataset(path) -> Dataset:
    with open(path) as fh:
        header = fh.readline().split()
        if len(header) != 4 or header[0] != "dim" or header[2] != "classes":
            raise DatasetFormatError(f"{path}:1: bad header")
        d_in, n_classes = int(header[1]), int(header[3])
        names, name_to_id = [], {}
        xs, ys, doms = [], [], []
        for lineno, line in enumerate(fh, start=2):
            if not line.strip():
                continue
            parts = line.rstrip("\n").split("\t")
            if len(parts) != 3:
                raise DatasetFormatError(f"{path}:{lineno}: expected 3 fields")
            name, dom, vec = parts
            try:
                vals = np.array(vec.split(), dtype=np.float64)
            except ValueError:
                raise DatasetFormatError(f"{path}:{lineno}: bad numeric value")
            if vals.shape[0] != d_in:
                raise DatasetFormatError(
                    f"{path}:{lineno}: expected {d_in} values, got {vals.shape[0]}")
            if not np.all(np.isfinite(vals)):
                raise DatasetFormatError(f"{path}:{lineno}: non-finite value")
            if name not in name_to_id:
                name_to_id[name] = len(names)
                names.append(name)
            xs.append(vals)
            ys.append(name_to_id[name])
            doms.append(int(dom))
    if len(names) != n_classes:
        raise DatasetFormatError(
            f"{path}: header declares {n_classes} classes, found {len(names)}")
    return Dataset(np.asarray(xs), np.asarray(ys), np.asarray(doms), names)


def split_train_test(ds: Dataset, test_fraction, seed) -> DataBundle:
    """Seeded per-class split of a flat dataset into train/test."""
    rng = _substream(seed, "train_test_split")
    test_idx = []
    for cid in range(len(ds.class_names)):
        idx = np.flatnonzero(ds.y == cid)
        n_test = max(1, int(round(test_fraction * len(idx))))
        test_idx.append(rng.choice(idx, size=n_test, replace=False))
    test_idx = np.sort(np.concatenate(test_idx))
    mask = np.zeros(len(ds), dtype=bool)
    mask[test_idx] = True
    return DataBundle(ds.subset(~mask), ds.subset(mask), ds.class_names)
