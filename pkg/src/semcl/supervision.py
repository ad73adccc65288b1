"""Classifier-head construction under the five supervision regimes, plus
semantic-target ingestion and fallbacks.

Regimes: random_trainable (vanilla), semantic_frozen, semantic_updated,
orthogonal_frozen, oracle_frozen. Frozen heads are immutable after
construction; semantic targets are always unit L2 norm.
"""

from __future__ import annotations

import hashlib
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import numcore
from .taskstream import DataBundle, _substream

REGIMES = ("random_trainable", "semantic_frozen", "semantic_updated",
           "orthogonal_frozen", "oracle_frozen")
FROZEN_REGIMES = ("semantic_frozen", "orthogonal_frozen", "oracle_frozen")


class TargetLookupError(KeyError):
    pass


class TargetFormatError(ValueError):
    pass


class RankError(ValueError):
    pass


def _unit(v):
    n = np.linalg.norm(v)
    if n == 0 or not np.isfinite(n):
        raise TargetFormatError("cannot normalize zero or non-finite vector")
    return v / n


@dataclass
class SemanticTargetTable:
    """class name -> unit-norm d-vector."""

    dim: int
    entries: dict = field(default_factory=dict)

    def add(self, name, vector):
        v = np.asarray(vector, dtype=np.float64)
        if v.shape != (self.dim,):
            raise TargetFormatError(
                f"vector for {name!r} has dim {v.shape}, table dim {self.dim}")
        if name in self.entries:
            raise TargetFormatError(f"duplicate class name {name!r}")
        self.entries[name] = _unit(v)

    def __getitem__(self, name):
        try:
            return self.entries[name]
        except KeyError:
            raise TargetLookupError(name)

    def __contains__(self, name):
        return name in self.entries

    def rows(self, names):
        missing = [n for n in names if n not in self.entries]
        if missing:
            raise TargetLookupError(f"missing semantic targets: {missing}")
        return np.stack([self.entries[n] for n in names])

    def save(self, path):
        with open(path, "w") as fh:
            fh.write(f"dim {self.dim}\n")
            for name, vec in self.entries.items():
                fh.write(name + "\t" + " ".join(repr(float(v)) for v in vec) + "\n")


def load_targets(path) -> SemanticTargetTable:
    """Parse the embeddings file: line 1 `dim <d>`, then
    `<class_name>\\t<v1> ... <v_d>`; vectors renormalized on load."""
    with open(path) as fh:
        header = fh.readline().split()
        if len(header) != 2 or header[0] != "dim":
            raise TargetFormatError(f"{path}:1: expected `dim <d>` header")
        table = SemanticTargetTable(int(header[1]))
        for lineno, line in enumerate(fh, start=2):
            if not line.strip():
                continue
            parts = line.rstrip("\n").split("\t")
            if len(parts) != 2:
                raise TargetFormatError(
                    f"{path}:{lineno}: expected name<TAB>vector")
            name, vec = parts
            try:
                vals = np.array(vec.split(), dtype=np.float64)
            except ValueError:
                raise TargetFormatError(f"{path}:{lineno}: bad numeric value")
            if vals.shape[0] != table.dim:
                raise TargetFormatError(
                    f"{path}:{lineno}: expected {table.dim} values, "
                    f"got {vals.shape[0]}")
            if not np.all(np.isfinite(vals)):
                raise TargetFormatError(f"{path}:{lineno}: non-finite value")
            try:
                table.add(name, vals)
            except TargetFormatError as e:
                raise TargetFormatError(f"{path}:{lineno}: {e}")
    return table


@dataclass
class HeadBlock:
    weights: np.ndarray      # (C_t, d)
    class_ids: list          # global ids, row order
    class_names: list


@dataclass
class ClassifierHead:
    """Per-task weight blocks plus the supervision regime."""

    regime: str
    dim: int
    blocks: list = field(default_factory=list)

    def __post_init__(self):
        if self.regime not in REGIMES:
            raise ValueError(f"unknown regime {self.regime!r}")

    @property
    def frozen(self) -> bool:
        return self.regime in FROZEN_REGIMES

    def add_block(self, weights, class_ids, class_names):
        w = np.asarray(weights, dtype=np.float64)
        if w.shape != (len(class_ids), self.dim):
            raise numcore.ShapeError("block shape does not match class count")
        w = w.copy()
        if self.frozen:
            w.setflags(write=False)
        self.blocks.append(HeadBlock(w, [int(c) for c in class_ids],
                                     list(class_names)))

    def concat(self) -> np.ndarray:
        return np.concatenate([b.weights for b in self.blocks])

    def row_class_ids(self) -> list:
        out = []
        for b in self.blocks:
            out.extend(b.class_ids)
        return out

    def byte_hash(self) -> str:
        h = hashlib.sha256()
        for b in self.blocks:
            h.update(np.ascontiguousarray(b.weights).tobytes())
        return h.hexdigest()


def build_random_head(class_ids, class_names, d, seed,
                      regime="random_trainable") -> ClassifierHead:
    """Vanilla head: rows i.i.d. standard normal, trainable."""
    rng = _substream(seed, "head_init")
    head = ClassifierHead(regime, d)
    head.add_block(rng.normal(size=(len(class_ids), d)), class_ids, class_names)
    return head


def random_block(class_ids, d, seed, task_index=0):
    rng = _substream(seed, f"head_init_task{task_index}")
    return rng.normal(size=(len(class_ids), d))


def build_semantic_head(class_ids, class_names, table: SemanticTargetTable,
                        frozen=True) -> ClassifierHead:
    regime = "semantic_frozen" if frozen else "semantic_updated"
    head = ClassifierHead(regime, table.dim)
    head.add_block(table.rows(class_names), class_ids, class_names)
    return head


def orthogonalize(rows, seed) -> np.ndarray:
    """Gram-Schmidt in row order; linearly dependent rows are replaced by a
    seeded random completion (with a warning). Requires n_rows <= d."""
    a = np.asarray(rows, dtype=np.float64)
    n, d = a.shape
    if n > d:
        raise RankError(f"cannot orthogonalize {n} rows in dimension {d}")
    rng = _substream(seed, "orthogonalize")
    out = np.zeros_like(a)
    for i in range(n):
        v = a[i].copy()
        for j in range(i):
            v -= (v @ out[j]) * out[j]
        if np.linalg.norm(v) < 1e-10:
            warnings.warn(
                f"row {i} linearly dependent on earlier rows; "
                "completing with a random direction")
            while True:
                v = rng.normal(size=d)
                for j in range(i):
                    v -= (v @ out[j]) * out[j]
                if np.linalg.norm(v) >= 1e-10:
                    break
        out[i] = v / np.linalg.norm(v)
        # second pass tightens orthogonality to ~machine epsilon
        v = out[i].copy()
        for j in range(i):
            v -= (v @ out[j]) * out[j]
        out[i] = v / np.linalg.norm(v)
    return out


def orthogonal_table(table: SemanticTargetTable, names_in_order,
                     seed) -> SemanticTargetTable:
    """Orthogonalized variant of a target table, processed in class order."""
    rows = orthogonalize(table.rows(names_in_order), seed)
    out = SemanticTargetTable(table.dim)
    for name, row in zip(names_in_order, rows):
        out.add(name, row)
    return out


def fallback_targets(class_names, d, seed, mode="hash", superclass_of=None,
                     alpha=0.5) -> SemanticTargetTable:
    """Targets without a language model.

    hash mode: seeded deterministic unit vector per name. hierarchy mode:
    normalized (superclass direction + alpha * class direction), so
    within-superclass cosine exceeds cross-superclass cosine.
    """
    table = SemanticTargetTable(d)
    if mode == "hash":
        for name in class_names:
            digest = hashlib.sha256(f"{seed}:{name}".encode()).digest()
            rng = np.random.default_rng(
                int.from_bytes(digest[:8], "big"))
            table.add(name, rng.normal(size=d))
        return table
    if mode == "hierarchy":
        if superclass_of is None:
            raise ValueError("hierarchy mode needs a class -> superclass map")
        rng = _substream(seed, "fallback_hierarchy")
        n_super = max(superclass_of) + 1
        super_dirs = rng.normal(size=(n_super, d))
        super_dirs /= np.linalg.norm(super_dirs, axis=1, keepdims=True)
        seen = {}
        for cid, name in enumerate(class_names):
            class_dir = rng.normal(size=d)
            class_dir /= np.linalg.norm(class_dir)
            vec = super_dirs[superclass_of[cid]] + alpha * class_dir
            key = tuple(np.round(vec, 12))
            if key in seen:
                warnings.warn(
                    f"degenerate targets: {name!r} duplicates {seen[key]!r} "
                    "(alpha too small)")
            seen[key] = name
            table.add(name, vec)
        return table
    raise ValueError(f"unknown fallback mode {mode!r}")


@dataclass
class OracleArtifact:
    """Head extracted from a model trained jointly on all tasks' data."""

    table: SemanticTargetTable
    fingerprint: dict
    joint_accuracy: float


def build_oracle_head(bundle: DataBundle, d, seed, epochs=60, batch_size=32,
                      lr=0.05, momentum=0.9, hidden=(64, 64),
                      sim_mode="cosine", sim_scale=16.0) -> OracleArtifact:
    """Joint training on all classes at once; the trained head rows become
    frozen supervision targets (normalized like every frozen head)."""
    train = bundle.train
    n_classes = len(bundle.class_names)
    d_in = train.X.shape[1]
    model = numcore.EncoderModel.init((d_in, *hidden, d),
                                      np.random.SeedSequence([int(seed), 77]))
    rng = _substream(seed, "oracle_train")
    head_w = rng.normal(size=(n_classes, d))
    sgd = numcore.SgdState(lr, momentum,
                           schedule=((epochs // 2, 0.1), (3 * epochs // 4, 0.1)))
    n = len(train)
    for epoch in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            numcore.backward_and_step(model, head_w, train.X[idx], train.y[idx],
                                      sgd, frozen_head=False, mode=sim_mode,
                                      scale=sim_scale, epoch=epoch)
    table = SemanticTargetTable(d)
    for cid, name in enumerate(bundle.class_names):
        table.add(name, head_w[cid])
    fp = {"seed": int(seed), "epochs": epochs, "batch_size": batch_size,
          "lr": lr, "momentum": momentum, "hidden": list(hidden),
          "sim_mode": sim_mode, "sim_scale": sim_scale}
    feats = numcore.forward(model, bundle.test.X)
    logits = numcore.similarity_logits(head_w, feats, mode=sim_mode,
                                       scale=sim_scale)
    acc = float(np.mean(np.argmax(logits, axis=1) == bundle.test.y))
    return OracleArtifact(table, fp, acc)
