"""Dense float64 numerics: a small MLP encoder, similarity logits,
softmax cross-entropy, and SGD with momentum.

Everything here is deterministic for a fixed seed and keeps exact
analytic gradients so finite-difference checks can be tight.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

ACTIVATIONS = ("relu", "identity")


class ShapeError(ValueError):
    pass


class DegenerateVectorError(ValueError):
    pass


class LabelError(ValueError):
    pass


def _as_matrix(x) -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    if a.ndim != 2:
        raise ShapeError(f"expected 2-D array, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError("non-finite values in matrix")
    return a


@dataclass
class Layer:
    weight: np.ndarray  # (fan_in, fan_out)
    bias: np.ndarray    # (fan_out,)
    activation: str

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.bias.shape != (self.weight.shape[1],):
            raise ShapeError("bias shape does not match weight fan-out")


@dataclass
class EncoderModel:
    """Feed-forward encoder mapping inputs to d-dimensional embeddings."""

    layers: list[Layer]

    @property
    def input_dim(self) -> int:
        return self.layers[0].weight.shape[0]

    @property
    def output_dim(self) -> int:
        return self.layers[-1].weight.shape[1]

    @classmethod
    def init(cls, dims, seed, hidden_activation="relu"):
        """Glorot-uniform init: per layer, uniform in +-sqrt(6/(fan_in+fan_out)).

        `dims` chains input dim through hidden widths to the output dim d.
        The final layer uses the identity activation.
        """
        rng = np.random.default_rng(seed)
        layers = []
        for i, (fi, fo) in enumerate(zip(dims[:-1], dims[1:])):
            bound = np.sqrt(6.0 / (fi + fo))
            w = rng.uniform(-bound, bound, size=(fi, fo))
            b = np.zeros(fo)
            act = "identity" if i == len(dims) - 2 else hidden_activation
            layers.append(Layer(w, b, act))
        return cls(layers)

    def parameters(self) -> list[np.ndarray]:
        out = []
        for layer in self.layers:
            out.append(layer.weight)
            out.append(layer.bias)
        return out

    def set_parameters(self, params):
        for i, layer in enumerate(self.layers):
            layer.weight = np.asarray(params[2 * i], dtype=np.float64)
            layer.bias = np.asarray(params[2 * i + 1], dtype=np.float64)

    def copy(self) -> "EncoderModel":
        return EncoderModel(
            [Layer(l.weight.copy(), l.bias.copy(), l.activation) for l in self.layers]
        )


def forward(model: EncoderModel, batch) -> np.ndarray:
    out, _ = forward_cached(model, batch)
    return out


def forward_cached(model: EncoderModel, batch):
    """Forward pass keeping per-layer inputs and pre-activations for backprop."""
    x = _as_matrix(batch)
    if x.shape[1] != model.input_dim:
        raise ShapeError(
            f"batch has {x.shape[1]} columns, encoder expects {model.input_dim}"
        )
    caches = []
    for layer in model.layers:
        z = x @ layer.weight + layer.bias
        caches.append((x, z))
        if layer.activation == "relu":
            x = np.maximum(z, 0.0)
        else:
            x = z
    return x, caches


def backward(model: EncoderModel, caches, grad_out):
    """Backprop through the encoder.

    Returns (param_grads, grad_input) where param_grads matches the layout
    of model.parameters().
    """
    grads = [None] * (2 * len(model.layers))
    g = np.asarray(grad_out, dtype=np.float64)
    for i in range(len(model.layers) - 1, -1, -1):
        layer = model.layers[i]
        x, z = caches[i]
        if layer.activation == "relu":
            g = g * (z > 0.0)
        grads[2 * i] = x.T @ g
        grads[2 * i + 1] = g.sum(axis=0)
        g = g @ layer.weight.T
    return grads, g


def _normalize_rows(a, strict=True):
    """Row L2 normalization. strict raises on a zero row; non-strict maps a
    zero row to zeros (a dead-relu sample mid-training, not a user error)."""
    norms = np.linalg.norm(a, axis=1, keepdims=True)
    if np.any(norms == 0.0):
        if strict:
            raise DegenerateVectorError("zero-norm row in cosine similarity")
        safe = np.where(norms == 0.0, 1.0, norms)
        return a / safe, norms
    return a / norms, norms


def _normalize_rows_backward(a, norms, grad_unit):
    # y = a/||a||: dL/da = (dL/dy - (dL/dy . y) y) / ||a||
    # zero rows carry zero gradient (their output was pinned at zero)
    safe = np.where(norms == 0.0, 1.0, norms)
    unit = a / safe
    dot = np.sum(grad_unit * unit, axis=1, keepdims=True)
    out = (grad_unit - dot * unit) / safe
    return np.where(norms == 0.0, 0.0, out)


def similarity_logits(head_weights, features, mode="cosine", scale=1.0):
    """logits[n][c] = scale * sim(W_c, f_n), inner product or cosine."""
    w = _as_matrix(head_weights)
    f = _as_matrix(features)
    if w.shape[1] != f.shape[1]:
        raise ShapeError("head and feature dims differ")
    if scale <= 0:
        raise ValueError("scale must be positive")
    if mode == "inner":
        return scale * (f @ w.T)
    if mode == "cosine":
        wn, _ = _normalize_rows(w)
        fn, _ = _normalize_rows(f, strict=False)
        return scale * (fn @ wn.T)
    raise ValueError(f"unknown similarity mode {mode!r}")


def similarity_logits_grads(head_weights, features, grad_logits, mode="cosine",
                            scale=1.0):
    """Gradients of scalar loss wrt head weights and features.

    grad_logits is dL/dlogits with logits as from similarity_logits.
    """
    w = _as_matrix(head_weights)
    f = _as_matrix(features)
    g = scale * np.asarray(grad_logits, dtype=np.float64)
    if mode == "inner":
        return g.T @ f, g @ w
    if mode == "cosine":
        wn, w_norms = _normalize_rows(w)
        fn, f_norms = _normalize_rows(f, strict=False)
        grad_wn = g.T @ fn
        grad_fn = g @ wn
        grad_w = _normalize_rows_backward(w, w_norms, grad_wn)
        grad_f = _normalize_rows_backward(f, f_norms, grad_fn)
        return grad_w, grad_f
    raise ValueError(f"unknown similarity mode {mode!r}")


def softmax_ce_loss_and_grad(logits, labels):
    """Mean softmax cross-entropy and its gradient wrt logits.

    Gradient rows sum to zero by construction (softmax minus one-hot,
    scaled by 1/batch).
    """
    z = _as_matrix(logits)
    y = np.asarray(labels, dtype=np.int64)
    if y.ndim != 1 or y.shape[0] != z.shape[0]:
        raise LabelError("labels must be a vector matching the batch size")
    if y.size and (y.min() < 0 or y.max() >= z.shape[1]):
        raise LabelError(f"label out of range [0, {z.shape[1]})")
    zmax = z.max(axis=1, keepdims=True)
    ez = np.exp(z - zmax)
    probs = ez / ez.sum(axis=1, keepdims=True)
    n = z.shape[0]
    loss = -np.mean(np.log(probs[np.arange(n), y]))
    grad = probs.copy()
    grad[np.arange(n), y] -= 1.0
    grad /= n
    return loss, grad


@dataclass
class SgdState:
    """SGD with momentum and a stepwise learning-rate schedule.

    schedule entries (epoch, multiplier) compound once the epoch is reached.
    """

    learning_rate: float
    momentum: float = 0.0
    schedule: tuple = ()
    velocities: list = field(default_factory=list)

    def __post_init__(self):
        if self.learning_rate <= 0 and self.learning_rate != 0.0:
            raise ValueError("learning rate must be >= 0")
        if not (0.0 <= self.momentum < 1.0):
            raise ValueError("momentum must be in [0, 1)")

    def lr_at(self, epoch: int) -> float:
        lr = self.learning_rate
        for at, mult in self.schedule:
            if epoch >= at:
                lr *= mult
        return lr

    def step(self, params, grads, epoch=0):
        """In-place momentum update: v = m*v + g; p -= lr*v. Returns params."""
        if not self.velocities:
            self.velocities = [np.zeros_like(p) for p in params]
        if len(self.velocities) != len(params):
            raise ShapeError("velocity buffers do not match parameter list")
        lr = self.lr_at(epoch)
        for p, g, v in zip(params, grads, self.velocities):
            if v.shape != p.shape:
                raise ShapeError("velocity shape mismatch")
            v *= self.momentum
            v += g
            p -= lr * v
        return params


def encoder_head_loss_and_grads(model, head_weights, batch, labels,
                                mode="cosine", scale=1.0):
    """Joint loss and gradients for encoder + similarity head.

    Returns (loss, encoder_param_grads, head_grad, features, caches).
    """
    features, caches = forward_cached(model, batch)
    logits = similarity_logits(head_weights, features, mode=mode, scale=scale)
    loss, grad_logits = softmax_ce_loss_and_grad(logits, labels)
    grad_w, grad_f = similarity_logits_grads(head_weights, features, grad_logits,
                                             mode=mode, scale=scale)
    param_grads, _ = backward(model, caches, grad_f)
    return loss, param_grads, grad_w, features, caches


def backward_and_step(model, head_weights, batch, labels, sgd: SgdState,
                      frozen_head: bool, mode="cosine", scale=1.0, epoch=0,
                      trainable_rows=None):
    """One SGD step on the encoder and (unless frozen) the head.

    trainable_rows restricts head updates to a row slice; a frozen head is
    never touched, not even its velocity buffers.
    """
    loss, param_grads, grad_w, _, _ = encoder_head_loss_and_grads(
        model, head_weights, batch, labels, mode=mode, scale=scale)
    params = model.parameters()
    grads = list(param_grads)
    if not frozen_head:
        if trainable_rows is not None:
            masked = np.zeros_like(grad_w)
            masked[trainable_rows] = grad_w[trainable_rows]
            grad_w = masked
        params = params + [head_weights]
        grads = grads + [grad_w]
    sgd.step(params, grads, epoch=epoch)
    return loss
