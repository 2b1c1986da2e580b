"""Small numpy classifiers: linear and MLP, trained with momentum SGD.

Parameters live in one flat float64 vector; each layer's weight and bias are
views into it, so copying a model is a single array copy and gradients are
produced in the same flat layout.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

logger = logging.getLogger(__name__)

SPLIT_TAGS = ("private_train", "public_test", "surrogate", "synthetic")


@dataclass(frozen=True)
class ArchSpec:
    kind: str
    input_dim: int
    num_classes: int
    hidden: tuple = ()
    activation: str = "relu"

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.kind not in ("linear", "mlp"):
            raise ValueError(f"unknown architecture kind {self.kind!r}")
        if self.num_classes < 2:
            raise ValueError("num_classes must be at least 2")
        if self.input_dim < 1:
            raise ValueError("input_dim must be positive")
        if (self.kind == "mlp") != bool(self.hidden):
            raise ValueError("hidden layers are required for mlp and forbidden for linear")
        if any(h < 1 for h in self.hidden):
            raise ValueError("hidden widths must be positive")
        if self.activation not in ("relu", "tanh"):
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def layer_sizes(self) -> list[int]:
        return [self.input_dim, *self.hidden, self.num_classes]

    @property
    def n_params(self) -> int:
        sizes = self.layer_sizes
        return sum(a * b + b for a, b in zip(sizes[:-1], sizes[1:]))

    def to_dict(self) -> dict:
        return {"kind": self.kind, "input_dim": self.input_dim,
                "num_classes": self.num_classes, "hidden": list(self.hidden),
                "activation": self.activation}

    @classmethod
    def from_dict(cls, d: dict) -> "ArchSpec":
        return cls(d["kind"], int(d["input_dim"]), int(d["num_classes"]),
                   tuple(d.get("hidden", ())), d.get("activation", "relu"))


@dataclass
class LabeledSet:
    inputs: np.ndarray
    labels: np.ndarray
    split_tag: str = "synthetic"
    index: Optional[np.ndarray] = None  # global row ids, used for disjointness checks

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.inputs.ndim != 2:
            raise ValueError("inputs must be a 2-D array")
        if len(self.inputs) != len(self.labels):
            raise ValueError("inputs and labels differ in length")
        if self.split_tag not in SPLIT_TAGS:
            raise ValueError(f"unknown split tag {self.split_tag!r}")
        if self.index is None:
            self.index = np.arange(len(self.labels))
        else:
            self.index = np.asarray(self.index, dtype=np.int64)

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def dim(self) -> int:
        return self.inputs.shape[1]

    def subset(self, rows, split_tag: Optional[str] = None) -> "LabeledSet":
        rows = np.asarray(rows)
        return LabeledSet(self.inputs[rows], self.labels[rows],
                          split_tag or self.split_tag, self.index[rows])

    def check_labels(self, num_classes: int) -> None:
        if len(self) and (self.labels.min() < 0 or self.labels.max() >= num_classes):
            raise ValueError("labels out of range for the number of classes")


@dataclass
class Model:
    arch: ArchSpec
    params: np.ndarray
    train_meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.params = np.asarray(self.params, dtype=np.float64)
        if self.params.shape != (self.arch.n_params,):
            raise ValueError(f"expected {self.arch.n_params} parameters, got {self.params.shape}")

    def copy(self) -> "Model":
        return Model(self.arch, self.params.copy(), dict(self.train_meta))

    def layers(self, flat: Optional[np.ndarray] = None) -> list[tuple[np.ndarray, np.ndarray]]:
        """``(W, b)`` views per layer, ``W`` shaped (fan_in, fan_out)."""
        flat = self.params if flat is None else flat
        out, off = [], 0
        sizes = self.arch.layer_sizes
        for a, b in zip(sizes[:-1], sizes[1:]):
            W = flat[off:off + a * b].reshape(a, b)
            off += a * b
            out.append((W, flat[off:off + b]))
            off += b
        return out

    def forward(self, x: np.ndarray) -> np.ndarray:
        return forward(self, x)

    def predict(self, x: np.ndarray) -> np.ndarray:
        return np.argmax(forward(self, np.atleast_2d(x)), axis=1)


def init_model(arch: ArchSpec, seed) -> Model:
    """Glorot-uniform weights and zero biases, deterministic in ``(arch, seed)``."""
    rng = np.random.default_rng(seed)
    model = Model(arch, np.zeros(arch.n_params))
    for W, _ in model.layers():
        lim = np.sqrt(6.0 / (W.shape[0] + W.shape[1]))
        W[...] = rng.uniform(-lim, lim, size=W.shape)
    model.train_meta = {"epochs_seen": 0, "final_lr": None, "seed": _seed_repr(seed)}
    return model


def _seed_repr(seed):
    if isinstance(seed, (int, np.integer)):
        return int(seed)
    if isinstance(seed, (list, tuple)):
        return [int(s) for s in seed]
    return None


def _act(z, kind):
    return np.maximum(z, 0.0) if kind == "relu" else np.tanh(z)


def _act_grad(z, a, kind):
    return (z > 0).astype(z.dtype) if kind == "relu" else 1.0 - a * a


def _forward_cache(model: Model, x: np.ndarray, flat=None):
    layers = model.layers(flat)
    acts, pre = [x], []
    h = x
    for i, (W, b) in enumerate(layers):
        z = h @ W + b
        if i < len(layers) - 1:
            pre.append(z)
            h = _act(z, model.arch.activation)
            acts.append(h)
        else:
            h = z
    return h, acts, pre, layers


def forward(model: Model, x: np.ndarray) -> np.ndarray:
    """Logits for one input (returns 1-D) or a batch (returns 2-D)."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    X = x[None, :] if single else x
    if X.shape[1] != model.arch.input_dim:
        raise ValueError(f"input has dimension {X.shape[1]}, model expects {model.arch.input_dim}")
    logits, *_ = _forward_cache(model, X)
    return logits[0] if single else logits


def _backward(model: Model, acts, pre, layers, dlogits, want_params=True, want_input=False):
    grads = np.zeros(model.arch.n_params) if want_params else None
    gviews = model.layers(grads) if want_params else None
    delta = dlogits
    dx = None
    for i in range(len(layers) - 1, -1, -1):
        W, _ = layers[i]
        if want_params:
            gW, gb = gviews[i]
            gW[...] = acts[i].T @ delta
            gb[...] = delta.sum(axis=0)
        if i > 0:
            delta = (delta @ W.T) * _act_grad(pre[i - 1], acts[i], model.arch.activation)
        elif want_input:
            dx = delta @ W.T
    return grads, dx


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def loss_and_grad(model: Model, x: np.ndarray, labels=None, teacher_logits=None,
                  flat: Optional[np.ndarray] = None):
    """Mean cross-entropy (hard labels) or KL(teacher || student) and its parameter gradient.

    KL uses temperature 1 with the teacher's softmax as target distribution.
    """
    logits, acts, pre, layers = _forward_cache(model, x, flat)
    n = len(x)
    logp = log_softmax(logits)
    if teacher_logits is not None:
        q = softmax(np.asarray(teacher_logits, dtype=np.float64))
        logq = log_softmax(np.asarray(teacher_logits, dtype=np.float64))
        loss = float(np.sum(q * (logq - logp)) / n)
        dlogits = (np.exp(logp) - q) / n
    else:
        labels = np.asarray(labels)
        loss = float(-logp[np.arange(n), labels].mean())
        dlogits = np.exp(logp)
        dlogits[np.arange(n), labels] -= 1.0
        dlogits /= n
    grads, _ = _backward(model, acts, pre, layers, dlogits)
    return loss, grads


def input_gradient(model: Model, x: np.ndarray, objective: str, k) -> np.ndarray:
    """Gradient of a scalar objective of the logits with respect to the input.

    ``objective`` is ``"logit"`` (the logit of class ``k``) or ``"margin"``
    (``max_{j != k} z_j - z_k``, positive while the input is not classified
    as ``k``). ``k`` may be an int or one class per row of a batch.
    """
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    X = x[None, :] if single else x
    C = model.arch.num_classes
    ks = np.broadcast_to(np.asarray(k), (len(X),))
    if np.any(ks < 0) or np.any(ks >= C):
        raise ValueError(f"class index out of range for {C} classes")
    logits, acts, pre, layers = _forward_cache(model, X)
    rows = np.arange(len(X))
    d = np.zeros_like(logits)
    if objective == "logit":
        d[rows, ks] = 1.0
    elif objective == "margin":
        other = logits.copy()
        other[rows, ks] = -np.inf
        d[rows, np.argmax(other, axis=1)] = 1.0
        d[rows, ks] -= 1.0
    else:
        raise ValueError(f"unknown objective {objective!r}")
    _, dx = _backward(model, acts, pre, layers, d, want_params=False, want_input=True)
    return dx[0] if single else dx


def input_vjp(model: Model, X: np.ndarray, dlogits: np.ndarray) -> np.ndarray:
    """Input gradient of ``sum(dlogits * logits(X))`` for a batch."""
    _, acts, pre, layers = _forward_cache(model, np.atleast_2d(X))
    _, dx = _backward(model, acts, pre, layers, np.atleast_2d(dlogits),
                      want_params=False, want_input=True)
    return dx


def margin_to_class(model: Model, x: np.ndarray, k) -> np.ndarray:
    logits = forward(model, np.atleast_2d(x))
    ks = np.broadcast_to(np.asarray(k), (len(logits),))
    rows = np.arange(len(logits))
    target = logits[rows, ks].copy()
    logits[rows, ks] = -np.inf
    return logits.max(axis=1) - target


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    lr0: float = 0.1
    batch_size: int = 64
    momentum: float = 0.9
    seed: int = 0
    loss: str = "cross_entropy"
    milestones: tuple = (0.3, 0.6, 0.8)
    decay_factor: float = 0.2
    weight_decay: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "milestones", tuple(float(f) for f in self.milestones))
        ms = self.milestones
        if any(not 0.0 < f < 1.0 for f in ms) or any(a >= b for a, b in zip(ms, ms[1:])):
            raise ValueError("milestones must be strictly increasing fractions in (0, 1)")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        if self.lr0 <= 0 or self.epochs < 1 or self.batch_size < 1:
            raise ValueError("lr0, epochs and batch_size must be positive")
        if self.loss not in ("cross_entropy", "kl_to_teacher"):
            raise ValueError(f"unknown loss {self.loss!r}")

    def lr_at(self, epoch: int) -> float:
        n_decays = sum(1 for f in self.milestones if epoch >= f * self.epochs)
        return self.lr0 * self.decay_factor ** n_decays

    def scaled(self, **changes) -> "TrainConfig":
        return replace(self, **changes)


def train_sgd(model: Model, data: LabeledSet, cfg: TrainConfig,
              teacher_logits: Optional[np.ndarray] = None) -> Model:
    """Momentum SGD with step decay; returns a new model, the input is untouched."""
    if (teacher_logits is not None) != (cfg.loss == "kl_to_teacher"):
        raise ValueError("teacher_logits must be given exactly when loss='kl_to_teacher'")
    if len(data) == 0:
        raise ValueError("empty training set")
    if data.dim != model.arch.input_dim:
        raise ValueError("training inputs do not match the model input dimension")
    if teacher_logits is not None:
        teacher_logits = np.asarray(teacher_logits, dtype=np.float64)
        if teacher_logits.shape != (len(data), model.arch.num_classes):
            raise ValueError("teacher_logits must have shape (n, num_classes)")
    else:
        data.check_labels(model.arch.num_classes)

    out = model.copy()
    flat = out.params
    vel = np.zeros_like(flat)
    rng = np.random.default_rng([cfg.seed, 7])
    n = len(data)
    history = []
    lr = cfg.lr0
    for epoch in range(cfg.epochs):
        lr = cfg.lr_at(epoch)
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            if teacher_logits is not None:
                loss, g = loss_and_grad(out, data.inputs[idx], teacher_logits=teacher_logits[idx])
            else:
                loss, g = loss_and_grad(out, data.inputs[idx], labels=data.labels[idx])
            if cfg.weight_decay:
                g = g + cfg.weight_decay * flat
            vel *= cfg.momentum
            vel -= lr * g
            flat += vel
            total += loss * len(idx)
        history.append(total / n)
        if not np.isfinite(history[-1]):
            raise FloatingPointError(f"training diverged at epoch {epoch}")
    meta = dict(out.train_meta)
    meta.update(epochs_seen=int(meta.get("epochs_seen") or 0) + cfg.epochs,
                final_lr=lr, seed=cfg.seed, loss_history=history)
    out.train_meta = meta
    return out


def evaluate_accuracy(model: Model, data: LabeledSet) -> float:
    if len(data) == 0:
        raise ValueError("cannot evaluate accuracy on an empty set")
    return float(np.mean(model.predict(data.inputs) == data.labels))
