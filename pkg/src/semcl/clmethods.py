"""Sequential training engine with pluggable anti-forgetting mechanisms.

Methods compose: rehearsal (herding exemplars), EWC, feature distillation
and averaged-gradient projection can all run in the same task loop, under
any supervision regime. Frozen heads are never written to.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict

import numpy as np

from . import numcore
from .numcore import (EncoderModel, Layer, SgdState, backward,
                      encoder_head_loss_and_grads, forward)
from .supervision import ClassifierHead
from .taskstream import ProtocolError, TaskSpec, _substream

METHODS = ("finetune", "rehearsal", "ewc", "feat_distill", "grad_project")

CHECKPOINT_VERSION = 1


@dataclass
class TrainRunConfig:
    epochs: int = 30
    batch_size: int = 32
    learning_rate: float = 0.05
    momentum: float = 0.9
    lr_schedule: tuple = ((15, 0.1), (25, 0.1))
    methods: tuple = ("finetune",)
    regime: str = "random_trainable"
    seed: int = 0
    sim_mode: str = "cosine"
    sim_scale: float = 16.0
    replay_capacity: int = 20
    ewc_lambda: float = 100.0
    distill_weight: float = 2.0
    distill_include_replay: bool = True
    replay_balance: bool = False  # oversample stored classes toward parity
    fisher_batches: int | None = None  # None = exact per-example estimate

    def __post_init__(self):
        unknown = set(self.methods) - set(METHODS)
        if unknown:
            raise ValueError(f"unknown methods: {sorted(unknown)}")
        self.methods = tuple(self.methods)
        self.lr_schedule = tuple(tuple(x) for x in self.lr_schedule)


class ReplayBuffer:
    """Per-class exemplar store in herding order, capped at capacity."""

    def __init__(self, capacity_per_class=20):
        self.capacity_per_class = capacity_per_class
        self.store = {}  # class id -> (m, d_in) raw feature vectors

    def add_class(self, class_id, examples):
        x = np.asarray(examples, dtype=np.float64)
        self.store[int(class_id)] = x[: self.capacity_per_class].copy()

    def __len__(self):
        return sum(len(v) for v in self.store.values())

    def data(self):
        if not self.store:
            return np.zeros((0, 0)), np.zeros(0, dtype=np.int64)
        cids = sorted(self.store)
        X = np.concatenate([self.store[c] for c in cids])
        y = np.concatenate([np.full(len(self.store[c]), c, dtype=np.int64)
                            for c in cids])
        return X, y


@dataclass
class EwcState:
    anchor: list            # parameter snapshot
    fisher: list            # diagonal Fisher, same shapes, entries >= 0
    lam: float


@dataclass
class DistillState:
    snapshot: EncoderModel  # frozen previous-task encoder
    weight: float


@dataclass
class CLState:
    encoder: EncoderModel
    head: ClassifierHead
    config: TrainRunConfig
    buffer: ReplayBuffer = None
    ewc_states: list = field(default_factory=list)
    distill: DistillState | None = None
    rng: np.random.Generator = None
    tasks_trained: int = 0

    def __post_init__(self):
        if self.buffer is None:
            cap = self.config.replay_capacity if "rehearsal" in self.config.methods else 0
            self.buffer = ReplayBuffer(cap)
        if self.rng is None:
            self.rng = _substream(self.config.seed, "train_loop")


def herding_select(examples, encoder, m):
    """Greedy herding: each pick minimizes the distance between the class
    feature mean and the mean of the selected set. Returns indices in
    selection order. encoder=None treats inputs as features directly."""
    x = np.asarray(examples, dtype=np.float64)
    if len(x) == 0:
        raise ValueError("cannot herd an empty class")
    if m > len(x):
        raise ValueError(f"m={m} exceeds class size {len(x)}")
    feats = x if encoder is None else forward(encoder, x)
    mu = feats.mean(axis=0)
    chosen = []
    running = np.zeros_like(mu)
    remaining = list(range(len(x)))
    for k in range(1, m + 1):
        cand_means = (running + feats[remaining]) / k
        dists = np.linalg.norm(cand_means - mu, axis=1)
        best = remaining[int(np.argmin(dists))]
        chosen.append(best)
        running += feats[best]
        remaining.remove(best)
    return chosen


def estimate_fisher(model, head_weights, X, y, n_batches=None, batch_size=32,
                    rng=None, sim_mode="cosine", sim_scale=16.0):
    """Diagonal Fisher for encoder parameters: mean of squared loss
    gradients. n_batches=None computes the exact per-example mean (invariant
    under dataset duplication); otherwise averages over sampled batches."""
    grads_sq = [np.zeros_like(p) for p in model.parameters()]
    if n_batches is None:
        batches = [np.array([i]) for i in range(len(X))]
    else:
        rng = rng or np.random.default_rng(0)
        batches = [rng.choice(len(X), size=min(batch_size, len(X)),
                              replace=False) for _ in range(n_batches)]
    for idx in batches:
        _, pgrads, _, _, _ = encoder_head_loss_and_grads(
            model, head_weights, X[idx], y[idx], mode=sim_mode, scale=sim_scale)
        for acc, g in zip(grads_sq, pgrads):
            acc += g ** 2
    for acc in grads_sq:
        acc /= len(batches)
    return grads_sq


def ewc_penalty(states, params):
    """Sum over anchors of lam/2 * F * (p - anchor)^2; zero at each anchor."""
    total = 0.0
    for st in states:
        for p, a, f in zip(params, st.anchor, st.fisher):
            total += 0.5 * st.lam * float(np.sum(f * (p - a) ** 2))
    return total


def _ewc_add_grads(states, params, grads):
    for st in states:
        for g, p, a, f in zip(grads, params, st.anchor, st.fisher):
            g += st.lam * f * (p - a)


def feat_distill_penalty(current, snapshot_feats):
    """Mean over rows of (1 - cosine(current, snapshot))."""
    val, _ = feat_distill_penalty_and_grad(current, snapshot_feats)
    return val


def feat_distill_penalty_and_grad(current, snapshot_feats):
    a = np.asarray(current, dtype=np.float64)
    b = np.asarray(snapshot_feats, dtype=np.float64)
    if a.shape != b.shape:
        raise numcore.ShapeError("feature shapes differ")
    na = np.linalg.norm(a, axis=1, keepdims=True)
    nb = np.linalg.norm(b, axis=1, keepdims=True)
    if np.any(na == 0) or np.any(nb == 0):
        raise numcore.DegenerateVectorError("zero-norm feature row")
    cos = np.sum(a * b, axis=1, keepdims=True) / (na * nb)
    value = float(np.mean(1.0 - cos))
    n = a.shape[0]
    grad = -(b / (na * nb) - cos * a / na ** 2) / n
    return value, grad


def project_gradient(g, g_ref):
    """Drop the conflicting component of g along a reference gradient:
    if <g, g_ref> < 0, project g onto the non-conflicting halfspace."""
    g = np.asarray(g, dtype=np.float64)
    g_ref = np.asarray(g_ref, dtype=np.float64)
    if g.shape != g_ref.shape:
        raise numcore.ShapeError("gradient shapes differ")
    denom = float(g_ref @ g_ref)
    if denom == 0.0:
        return g.copy()
    dot = float(g @ g_ref)
    if dot >= 0.0:
        return g.copy()
    return g - (dot / denom) * g_ref


def _flatten(arrs):
    return np.concatenate([a.ravel() for a in arrs])


def _unflatten(vec, like):
    out, pos = [], 0
    for a in like:
        out.append(vec[pos:pos + a.size].reshape(a.shape))
        pos += a.size
    return out


def train_task(state: CLState, task: TaskSpec, current_block_index=None):
    """Train the encoder (and, for trainable regimes, the current head
    block) on one task. Returns the per-epoch mean-loss log.

    The head must already contain the block for this task. Replayed
    exemplars join the epoch's training pool when rehearsal is active.
    """
    cfg = state.config
    head = state.head
    if current_block_index is None:
        current_block_index = len(head.blocks) - 1
    if len(task.train) == 0:
        raise ProtocolError(f"task {task.task_index} has no training data")

    row_of = {cid: i for i, cid in enumerate(head.row_class_ids())}
    missing = [c for c in task.class_ids if c not in row_of]
    if missing:
        raise ProtocolError(f"head lacks rows for classes {missing}")

    X_cur, y_cur = task.train.X, task.train.y
    n_cur = len(X_cur)
    if "rehearsal" in cfg.methods and len(state.buffer):
        X_rep, y_rep = state.buffer.data()
        if cfg.replay_balance:
            # tile each stored class toward the current per-class count so a
            # small buffer is not drowned out by the new task's data
            per_new = max(1, n_cur // max(1, len(task.class_ids)))
            sel = []
            for cid in np.unique(y_rep):
                idx = np.flatnonzero(y_rep == cid)
                sel.append(np.tile(idx, max(1, per_new // len(idx))))
            sel = np.concatenate(sel)
            X_rep, y_rep = X_rep[sel], y_rep[sel]
        X_all = np.concatenate([X_cur, X_rep])
        y_all = np.concatenate([y_cur, y_rep])
        is_replay = np.concatenate([np.zeros(n_cur, bool),
                                    np.ones(len(X_rep), bool)])
    else:
        X_all, y_all = X_cur, y_cur
        is_replay = np.zeros(n_cur, bool)
    rows_all = np.array([row_of[c] for c in y_all], dtype=np.int64)

    W = head.concat()  # working copy; frozen heads never written back
    block_start = sum(len(b.class_ids) for b in head.blocks[:current_block_index])
    block_rows = slice(block_start,
                       block_start + len(head.blocks[current_block_index].class_ids))

    enc_sgd = SgdState(cfg.learning_rate, cfg.momentum, cfg.lr_schedule)
    head_sgd = SgdState(cfg.learning_rate, cfg.momentum, cfg.lr_schedule)

    use_distill = "feat_distill" in cfg.methods and state.distill is not None
    use_ewc = "ewc" in cfg.methods and state.ewc_states
    use_proj = "grad_project" in cfg.methods and len(state.buffer) > 0
    if use_proj:
        X_rep_all, y_rep_all = state.buffer.data()
        rows_rep_all = np.array([row_of[c] for c in y_rep_all], dtype=np.int64)

    log = []
    n = len(X_all)
    for epoch in range(cfg.epochs):
        order = state.rng.permutation(n)
        epoch_losses = []
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            xb, yb = X_all[idx], rows_all[idx]
            loss, pgrads, grad_w, feats, caches = encoder_head_loss_and_grads(
                state.encoder, W, xb, yb, mode=cfg.sim_mode, scale=cfg.sim_scale)
            params = state.encoder.parameters()

            if use_ewc:
                loss += ewc_penalty(state.ewc_states, params)
                _ewc_add_grads(state.ewc_states, params, pgrads)

            if use_distill:
                xd, rows_d = xb, np.arange(len(idx))
                if not cfg.distill_include_replay:
                    keep = ~is_replay[idx]
                    xd, rows_d = xb[keep], np.flatnonzero(keep)
                if len(xd):
                    snap_feats = forward(state.distill.snapshot, xd)
                    dval, dgrad_rows = feat_distill_penalty_and_grad(
                        feats[rows_d], snap_feats)
                    loss += state.distill.weight * dval
                    dgrad = np.zeros_like(feats)
                    dgrad[rows_d] = state.distill.weight * dgrad_rows
                    extra, _ = backward(state.encoder, caches, dgrad)
                    for g, e in zip(pgrads, extra):
                        g += e

            if use_proj:
                k = min(len(X_rep_all), 256)
                ridx = state.rng.choice(len(X_rep_all), size=k, replace=False)
                _, rgrads, _, _, _ = encoder_head_loss_and_grads(
                    state.encoder, W, X_rep_all[ridx], rows_rep_all[ridx],
                    mode=cfg.sim_mode, scale=cfg.sim_scale)
                flat = project_gradient(_flatten(pgrads), _flatten(rgrads))
                pgrads = _unflatten(flat, pgrads)

            enc_sgd.step(params, pgrads, epoch=epoch)
            if not head.frozen:
                masked = np.zeros_like(grad_w)
                masked[block_rows] = grad_w[block_rows]
                head_sgd.step([W], [masked], epoch=epoch)
            epoch_losses.append(loss)
        log.append(float(np.mean(epoch_losses)))

    if not head.frozen:
        head.blocks[current_block_index].weights[...] = W[block_rows]
    state.tasks_trained += 1
    return log


def finish_task(state: CLState, task: TaskSpec):
    """Post-task bookkeeping: herding exemplars into the buffer, Fisher
    anchoring for EWC, encoder snapshot for distillation."""
    cfg = state.config
    if "rehearsal" in cfg.methods and cfg.replay_capacity > 0:
        for cid in task.class_ids:
            mask = task.train.y == cid
            if cid in state.buffer.store or not np.any(mask):
                continue  # domain-IL revisits classes; keep first-task exemplars
            xc = task.train.X[mask]
            m = min(cfg.replay_capacity, len(xc))
            order = herding_select(xc, state.encoder, m)
            state.buffer.add_class(cid, xc[order])
    if "ewc" in cfg.methods:
        row_of = {cid: i for i, cid in enumerate(state.head.row_class_ids())}
        rows = np.array([row_of[c] for c in task.train.y], dtype=np.int64)
        fisher = estimate_fisher(state.encoder, state.head.concat(),
                                 task.train.X, rows,
                                 n_batches=cfg.fisher_batches,
                                 batch_size=cfg.batch_size, rng=state.rng,
                                 sim_mode=cfg.sim_mode, sim_scale=cfg.sim_scale)
        anchor = [p.copy() for p in state.encoder.parameters()]
        state.ewc_states.append(EwcState(anchor, fisher, cfg.ewc_lambda))
    if "feat_distill" in cfg.methods:
        state.distill = DistillState(state.encoder.copy(), cfg.distill_weight)


def evaluate_accuracy(encoder, head: ClassifierHead, dataset, label_space,
                      sim_mode="cosine", sim_scale=16.0):
    """Accuracy of argmax similarity over the given global label space."""
    if len(dataset) == 0:
        raise ProtocolError("empty evaluation set")
    row_of = {cid: i for i, cid in enumerate(head.row_class_ids())}
    rows = [row_of[c] for c in label_space]
    W = head.concat()[rows]
    feats = forward(encoder, dataset.X)
    logits = numcore.similarity_logits(W, feats, mode=sim_mode, scale=sim_scale)
    pred = np.asarray(label_space)[np.argmax(logits, axis=1)]
    return float(np.mean(pred == dataset.y))


def save_checkpoint(state: CLState, path):
    """Versioned npz checkpoint: encoder, head blocks + regime, buffer,
    EWC state and RNG state. Round-trips bit-exactly."""
    arrays = {}
    meta = {"version": CHECKPOINT_VERSION,
            "config": asdict(state.config),
            "tasks_trained": state.tasks_trained,
            "rng_state": _jsonable(state.rng.bit_generator.state),
            "encoder": {"activations": [l.activation for l in state.encoder.layers],
                        "n_layers": len(state.encoder.layers)},
            "head": {"regime": state.head.regime, "dim": state.head.dim,
                     "blocks": [{"class_ids": b.class_ids,
                                 "class_names": b.class_names}
                                for b in state.head.blocks]},
            "buffer": {"capacity": state.buffer.capacity_per_class,
                       "class_ids": sorted(state.buffer.store)},
            "ewc": [{"lam": st.lam} for st in state.ewc_states],
            "distill": None if state.distill is None
                       else {"weight": state.distill.weight,
                             "activations": [l.activation
                                             for l in state.distill.snapshot.layers]}}
    for i, layer in enumerate(state.encoder.layers):
        arrays[f"enc_w{i}"] = layer.weight
        arrays[f"enc_b{i}"] = layer.bias
    for i, b in enumerate(state.head.blocks):
        arrays[f"head_block{i}"] = np.asarray(b.weights)
    for cid in state.buffer.store:
        arrays[f"buf_{cid}"] = state.buffer.store[cid]
    for i, st in enumerate(state.ewc_states):
        for j, (a, f) in enumerate(zip(st.anchor, st.fisher)):
            arrays[f"ewc{i}_anchor{j}"] = a
            arrays[f"ewc{i}_fisher{j}"] = f
        meta["ewc"][i]["n_params"] = len(st.anchor)
    if state.distill is not None:
        for i, layer in enumerate(state.distill.snapshot.layers):
            arrays[f"snap_w{i}"] = layer.weight
            arrays[f"snap_b{i}"] = layer.bias
    arrays["_meta"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(),
                                    dtype=np.uint8)
    np.savez(path, **arrays)


def load_checkpoint(path) -> CLState:
    with np.load(path) as z:
        meta = json.loads(bytes(z["_meta"]).decode())
        if meta["version"] != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {meta['version']}")
        enc_meta = meta["encoder"]
        layers = [Layer(z[f"enc_w{i}"], z[f"enc_b{i}"], act)
                  for i, act in enumerate(enc_meta["activations"])]
        encoder = EncoderModel(layers)
        head = ClassifierHead(meta["head"]["regime"], meta["head"]["dim"])
        for i, binfo in enumerate(meta["head"]["blocks"]):
            head.add_block(z[f"head_block{i}"], binfo["class_ids"],
                           binfo["class_names"])
        cfg_kwargs = dict(meta["config"])
        cfg_kwargs["methods"] = tuple(cfg_kwargs["methods"])
        cfg = TrainRunConfig(**cfg_kwargs)
        buffer = ReplayBuffer(meta["buffer"]["capacity"])
        for cid in meta["buffer"]["class_ids"]:
            buffer.store[cid] = z[f"buf_{cid}"].copy()
        ewc_states = []
        for i, einfo in enumerate(meta["ewc"]):
            anchor = [z[f"ewc{i}_anchor{j}"].copy()
                      for j in range(einfo["n_params"])]
            fisher = [z[f"ewc{i}_fisher{j}"].copy()
                      for j in range(einfo["n_params"])]
            ewc_states.append(EwcState(anchor, fisher, einfo["lam"]))
        distill = None
        if meta["distill"] is not None:
            snap_layers = [Layer(z[f"snap_w{i}"], z[f"snap_b{i}"], act)
                           for i, act in enumerate(meta["distill"]["activations"])]
            distill = DistillState(EncoderModel(snap_layers),
                                   meta["distill"]["weight"])
        rng = np.random.default_rng()
        rng.bit_generator.state = _rng_state_from_json(meta["rng_state"])
        return CLState(encoder, head, cfg, buffer=buffer, ewc_states=ewc_states,
                       distill=distill, rng=rng,
                       tasks_trained=meta["tasks_trained"])


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, np.ndarray):
        return {"__ndarray__": obj.tolist(), "dtype": str(obj.dtype)}
    if isinstance(obj, (np.integer,)):
        return int(obj)
    return obj


def _rng_state_from_json(obj):
    if isinstance(obj, dict):
        if "__ndarray__" in obj:
            return np.array(obj["__ndarray__"], dtype=obj["dtype"])
        return {k: _rng_state_from_json(v) for k, v in obj.items()}
    return obj
