"""Small feedforward image classifier with explicit backpropagation.

Plain numpy MLP: flatten -> affine -> ReLU -> ... -> affine -> L logits.
Forward, softmax, two loss kinds, exact input/weight gradients, a seeded
training loop (SGD or Adam), evaluation, and a versioned binary model format.

Loss kinds:
  cross_entropy  -ln softmax(logits)[label]
  raw_score      -logits[label]; negated so that ascending the loss lowers
                 the correct-class score and is therefore adversarial.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from .param_space import ConfigError

LOSS_KINDS = ("cross_entropy", "raw_score")
MODEL_FORMAT = "semcex.classifier"
MODEL_VERSION = 1

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass
class Classifier:
    input_shape: tuple[int, ...]
    hidden: tuple[int, ...]
    n_classes: int
    weights: list[np.ndarray]  # each (fan_in, fan_out)
    biases: list[np.ndarray]
    seed: int = 0

    @property
    def input_dim(self) -> int:
        return int(np.prod(self.input_shape))

    def layer_sizes(self) -> list[int]:
        return [self.input_dim, *self.hidden, self.n_classes]

    def copy(self) -> "Classifier":
        return Classifier(self.input_shape, tuple(self.hidden), self.n_classes,
                          [w.copy() for w in self.weights],
                          [b.copy() for b in self.biases], self.seed)


def init_classifier(input_shape, hidden, n_classes, seed=0) -> Classifier:
    """Glorot-uniform weights, zero biases, seed-controlled."""
    input_shape = tuple(int(d) for d in input_shape)
    hidden = tuple(int(h) for h in hidden)
    if n_classes < 2:
        raise ConfigError("need at least 2 classes")
    sizes = [int(np.prod(input_shape)), *hidden, n_classes]
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return Classifier(input_shape, hidden, n_classes, weights, biases, seed)


def _as_batch(model: Classifier, x: np.ndarray) -> tuple[np.ndarray, bool]:
    """Flatten to (N, input_dim), distinguishing a single input from a batch
    by shape (a one-sample batch has an extra leading axis)."""
    arr = np.asarray(x, dtype=np.float64)
    ishape = tuple(model.input_shape)
    if arr.shape == ishape or (arr.ndim == 1 and arr.size == model.input_dim):
        return arr.reshape(1, model.input_dim), True
    if arr.ndim >= 2 and (arr.shape[1:] == ishape
                          or int(np.prod(arr.shape[1:])) == model.input_dim):
        return arr.reshape(arr.shape[0], model.input_dim), False
    raise ConfigError(
        f"input of shape {arr.shape} does not match model input {model.input_shape}")


def _forward_cache(model: Classifier, flat: np.ndarray) -> list[np.ndarray]:
    """Activations [a0, a1, ..., logits]; ReLU after every layer but the last."""
    acts = [flat]
    a = flat
    last = len(model.weights) - 1
    for i, (w, b) in enumerate(zip(model.weights, model.biases)):
        z = a @ w + b
        a = z if i == last else np.maximum(z, 0.0)
        acts.append(a)
    return acts


def forward(model: Classifier, x: np.ndarray) -> np.ndarray:
    """Logits for a single input or a batch."""
    flat, single = _as_batch(model, x)
    logits = _forward_cache(model, flat)[-1]
    return logits[0] if single else logits


def softmax(logits: np.ndarray) -> np.ndarray:
    arr = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ConfigError("softmax requires finite logits")
    shifted = arr - arr.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def predict(model: Classifier, x: np.ndarray):
    """Argmax class; ties break to the lowest index."""
    logits = forward(model, x)
    if logits.ndim == 1:
        return int(np.argmax(logits))
    return np.argmax(logits, axis=1)


def _check_label(model: Classifier, label: int) -> None:
    if not 0 <= label < model.n_classes:
        raise ConfigError(f"label {label} out of range for {model.n_classes} classes")


def loss(model: Classifier, x: np.ndarray, label: int, kind: str = "cross_entropy") -> float:
    _check_label(model, label)
    logits = forward(model, x)
    if kind == "cross_entropy":
        shifted = logits - logits.max()
        return float(np.log(np.sum(np.exp(shifted))) - shifted[label])
    if kind == "raw_score":
        return float(-logits[label])
    raise ConfigError(f"unknown loss kind {kind!r}")


def backprop_to_input(model: Classifier, x: np.ndarray,
                      logit_cotangent: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Logits plus the gradient of <logit_cotangent, logits> w.r.t. the input,
    returned in the input's shape."""
    arr = np.asarray(x, dtype=np.float64)
    flat, _ = _as_batch(model, arr)
    acts = _forward_cache(model, flat)
    grad = np.asarray(logit_cotangent, dtype=np.float64).reshape(1, model.n_classes)
    last = len(model.weights) - 1
    for i in range(last, -1, -1):
        if i != last:
            grad = grad * (acts[i + 1] > 0)
        grad = grad @ model.weights[i].T
    return acts[-1][0], grad.reshape(arr.shape)


def _loss_cotangent(logits: np.ndarray, label: int, kind: str) -> np.ndarray:
    onehot = np.zeros(logits.shape[-1])
    onehot[label] = 1.0
    if kind == "cross_entropy":
        return softmax(logits) - onehot
    if kind == "raw_score":
        return -onehot
    raise ConfigError(f"unknown loss kind {kind!r}")


def input_gradient(model: Classifier, x: np.ndarray, label: int,
                   kind: str = "cross_entropy") -> np.ndarray:
    """Exact gradient of the chosen loss with respect to every pixel."""
    _check_label(model, label)
    logits = forward(model, x)
    cot = _loss_cotangent(logits, label, kind)
    return backprop_to_input(model, x, cot)[1]


def _batch_gradients(model: Classifier, flat: np.ndarray, labels: np.ndarray):
    """Mean cross-entropy loss and weight/bias gradients over a minibatch."""
    n = len(flat)
    acts = _forward_cache(model, flat)
    logits = acts[-1]
    probs = softmax(logits)
    rows = np.arange(n)
    shifted = logits - logits.max(axis=1, keepdims=True)
    losses = np.log(np.sum(np.exp(shifted), axis=1)) - shifted[rows, labels]

    delta = probs.copy()
    delta[rows, labels] -= 1.0
    delta /= n
    grads_w, grads_b = [], []
    last = len(model.weights) - 1
    for i in range(last, -1, -1):
        grads_w.append(acts[i].T @ delta)
        grads_b.append(delta.sum(axis=0))
        if i > 0:
            delta = (delta @ model.weights[i].T) * (acts[i] > 0)
    grads_w.reverse()
    grads_b.reverse()
    return float(losses.mean()), grads_w, grads_b


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    batch_size: int = 64
    learning_rate: float = 1e-3
    optimizer: str = "adam"
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        if self.learning_rate < 0:
            raise ConfigError("learning rate must be >= 0")
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigError("optimizer must be 'sgd' or 'adam'")


def train(model: Classifier, images: np.ndarray, labels: np.ndarray,
          cfg: TrainConfig) -> tuple[Classifier, list[dict]]:
    """Minibatch gradient descent on cross-entropy. Returns a new model (the
    input model is untouched) and a per-epoch loss/accuracy history."""
    labels = np.asarray(labels, dtype=np.int64)
    if len(labels) == 0:
        raise ConfigError("training set is empty")
    flat, _ = _as_batch(model, np.asarray(images, dtype=np.float64))
    out = model.copy()
    rng = np.random.default_rng(cfg.seed)

    adam_m = [np.zeros_like(w) for w in out.weights] + [np.zeros_like(b) for b in out.biases]
    adam_v = [np.zeros_like(p) for p in adam_m]
    step = 0
    history: list[dict] = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(flat))
        epoch_losses = []
        for start in range(0, len(flat), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            batch_loss, gw, gb = _batch_gradients(out, flat[idx], labels[idx])
            epoch_losses.append(batch_loss)
            params = out.weights + out.biases
            grads = gw + gb
            step += 1
            for p, (param, grad) in enumerate(zip(params, grads)):
                if cfg.optimizer == "sgd":
                    param -= cfg.learning_rate * grad
                else:
                    adam_m[p] = ADAM_BETA1 * adam_m[p] + (1 - ADAM_BETA1) * grad
                    adam_v[p] = ADAM_BETA2 * adam_v[p] + (1 - ADAM_BETA2) * grad * grad
                    mhat = adam_m[p] / (1 - ADAM_BETA1 ** step)
                    vhat = adam_v[p] / (1 - ADAM_BETA2 ** step)
                    param -= cfg.learning_rate * mhat / (np.sqrt(vhat) + ADAM_EPS)
            for param in params:
                if not np.all(np.isfinite(param)):
                    raise FloatingPointError("non-finite weights after a training step")
        preds = np.argmax(_forward_cache(out, flat)[-1], axis=1)
        history.append({
            "epoch": epoch,
            "loss": float(np.mean(epoch_losses)),
            "accuracy": float(np.mean(preds == labels)),
        })
    return out, history


@dataclass
class EvalReport:
    per_class: dict[int, float]
    counts: dict[int, int]
    overall: float


def evaluate(model: Classifier, images: np.ndarray, labels: np.ndarray) -> EvalReport:
    """Per-class normalized accuracy plus the class-size weighted overall."""
    labels = np.asarray(labels, dtype=np.int64)
    if len(labels) == 0:
        raise ConfigError("evaluation set is empty")
    flat, _ = _as_batch(model, np.asarray(images, dtype=np.float64))
    preds = np.argmax(_forward_cache(model, flat)[-1], axis=1)
    correct = preds == labels
    per_class, counts = {}, {}
    for c in sorted(set(int(c) for c in labels)):
        mask = labels == c
        per_class[c] = float(np.mean(correct[mask]))
        counts[c] = int(np.sum(mask))
    return EvalReport(per_class, counts, float(np.mean(correct)))


# ---------------------------------------------------------------------------
# Serialization: JSON header + little-endian float64 weight blob
# ---------------------------------------------------------------------------

def save_model(model: Classifier, path) -> None:
    header = json.dumps({
        "format": MODEL_FORMAT,
        "version": MODEL_VERSION,
        "input_shape": list(model.input_shape),
        "hidden": list(model.hidden),
        "n_classes": model.n_classes,
        "seed": model.seed,
    }, sort_keys=True).encode("utf-8")
    blob = b"".join(arr.astype("<f8").tobytes()
                    for arr in (*model.weights, *model.biases))
    with open(path, "wb") as fh:
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        fh.write(blob)


def load_model(path) -> Classifier:
    with open(path, "rb") as fh:
        (hlen,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(hlen).decode("utf-8"))
        blob = fh.read()
    if header.get("format") != MODEL_FORMAT or header.get("version") != MODEL_VERSION:
        raise ConfigError(f"unsupported model file format in {path}")
    sizes = [int(np.prod(header["input_shape"])), *header["hidden"], header["n_classes"]]
    flat = np.frombuffer(blob, dtype="<f8").astype(np.float64)
    weights, biases, off = [], [], 0
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        weights.append(flat[off:off + fan_in * fan_out].reshape(fan_in, fan_out).copy())
        off += fan_in * fan_out
    for fan_out in sizes[1:]:
        biases.append(flat[off:off + fan_out].copy())
        off += fan_out
    if off != flat.size:
        raise ConfigError(f"model file {path} has a malformed weight blob")
    return Classifier(tuple(header["input_shape"]), tuple(header["hidden"]),
                      header["n_classes"], weights, biases, header["seed"])
