"""Reference target classifier: a fully connected ReLU network trained with SGD.

The network stands in for the CNN re-identification models. Attacks only
ever see it through :class:`BlackBox` queries (confidence vectors or
labels), so externally produced prediction vectors can be swapped in.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Protocol, Sequence

import numpy as np

from ._util import ContractError, DataFormatError, substream
from .dataset import Dataset

LOG_FLOOR = 1e-12

PRESETS = {
    "no_overfitting": dict(learning_rate=1e-4, weight_decay=0.5, dropout_rate=0.5, batch_size=32, epochs=200),
    "overfitting": dict(learning_rate=1e-4, weight_decay=0.0, dropout_rate=0.0, batch_size=32, epochs=200),
}


class BlackBox(Protocol):
    """Query-only view of a classifier."""

    n_classes: int

    def predict_proba(self, X: np.ndarray) -> np.ndarray: ...

    def predict_labels(self, X: np.ndarray) -> np.ndarray: ...


@dataclass(frozen=True)
class ClassifierSpec:
    layer_widths: tuple[int, ...]
    activation: str = "relu"
    standardize: bool = True

    def __post_init__(self):
        widths = tuple(int(w) for w in self.layer_widths)
        object.__setattr__(self, "layer_widths", widths)
        if len(widths) < 2 or any(w < 1 for w in widths):
            raise ContractError(f"layer_widths must be >= 2 positive ints, got {widths}")
        if widths[-1] < 2:
            raise ContractError("a classifier needs at least 2 output classes")
        if self.activation != "relu":
            raise ContractError(f"unsupported activation {self.activation!r}")

    @classmethod
    def mlp(cls, feature_dim, n_classes, hidden=(128, 64), **kw):
        return cls((feature_dim, *hidden, n_classes), **kw)

    @property
    def feature_dim(self):
        return self.layer_widths[0]

    @property
    def n_classes(self):
        return self.layer_widths[-1]


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    weight_decay: float = 0.0
    dropout_rate: float = 0.0
    batch_size: int = 32
    epochs: int = 200
    seed: int = 0
    preset: str = "custom"

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ContractError("learning_rate must be > 0")
        if self.weight_decay < 0:
            raise ContractError("weight_decay must be >= 0")
        if not 0 <= self.dropout_rate < 1:
            raise ContractError("dropout_rate must be in [0, 1)")
        if self.batch_size < 1 or self.epochs < 0:
            raise ContractError("batch_size must be positive and epochs non-negative")
        if self.preset != "custom":
            if self.preset not in PRESETS:
                raise ContractError(f"unknown preset {self.preset!r}")
            for key, want in PRESETS[self.preset].items():
                if getattr(self, key) != want:
                    raise ContractError(f"preset {self.preset} fixes {key}={want}")

    @classmethod
    def from_preset(cls, preset, seed=0, **overrides):
        preset = preset.replace("-", "_")
        if preset not in PRESETS:
            raise ContractError(f"unknown preset {preset!r}")
        values = {**PRESETS[preset], **overrides}
        tagged = preset if values == PRESETS[preset] else "custom"
        return cls(seed=seed, preset=tagged, **values)

    def with_epochs(self, epochs):
        """Same hyperparameters with a different budget (drops the preset tag)."""
        return replace(self, epochs=epochs, preset="custom")


def _softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


@dataclass
class TrainedClassifier:
    spec: ClassifierSpec
    weights: list[tuple[np.ndarray, np.ndarray]]
    class_labels: tuple[int, ...]
    input_shift: np.ndarray
    input_scale: np.ndarray
    history: dict[str, list[float]] = field(default_factory=dict)

    def __post_init__(self):
        self.class_labels = tuple(int(c) for c in self.class_labels)
        if len(set(self.class_labels)) != len(self.class_labels):
            raise ContractError("class_labels must not contain duplicates")
        if len(self.class_labels) != self.spec.n_classes:
            raise ContractError("class_labels length must equal the number of outputs")
        for W, b in self.weights:
            if not (np.all(np.isfinite(W)) and np.all(np.isfinite(b))):
                raise ContractError("weights must be finite")
        self._label_index = {c: i for i, c in enumerate(self.class_labels)}

    @property
    def n_classes(self) -> int:
        return self.spec.n_classes

    @property
    def feature_dim(self) -> int:
        return self.spec.feature_dim

    def class_index(self, individual_id) -> int:
        """Output index of an identity, or -1 if the model never saw it."""
        return self._label_index.get(int(individual_id), -1)

    def _check(self, X):
        X = np.asarray(X, dtype=np.float64)
        if X.ndim == 1:
            X = X[None, :]
        if X.shape[1] != self.feature_dim:
            raise ContractError(f"expected {self.feature_dim} features, got {X.shape[1]}")
        return X

    def logits(self, X):
        h = (self._check(X) - self.input_shift) / self.input_scale
        for W, b in self.weights[:-1]:
            h = np.maximum(h @ W + b, 0.0)
        W, b = self.weights[-1]
        return h @ W + b

    def predict_proba(self, X) -> np.ndarray:
        return _softmax(self.logits(X))

    def predict_labels(self, X) -> np.ndarray:
        """Output indices; np.argmax resolves ties to the lowest index."""
        return np.argmax(self.logits(X), axis=1)

    def predict_confidences(self, features) -> np.ndarray:
        return self.predict_proba(features)[0]

    def predict_label(self, features) -> int:
        return self.class_labels[int(self.predict_labels(features)[0])]

    def copy(self) -> "TrainedClassifier":
        return TrainedClassifier(
            self.spec,
            [(W.copy(), b.copy()) for W, b in self.weights],
            self.class_labels,
            self.input_shift.copy(),
            self.input_scale.copy(),
            {k: list(v) for k, v in self.history.items()},
        )


def init_weights(spec: ClassifierSpec, rng) -> list[tuple[np.ndarray, np.ndarray]]:
    weights = []
    for fan_in, fan_out in zip(spec.layer_widths[:-1], spec.layer_widths[1:]):
        lim = 1.0 / np.sqrt(fan_in)
        W = rng.uniform(-lim, lim, size=(fan_in, fan_out))
        b = rng.uniform(-lim, lim, size=fan_out)
        weights.append((W, b))
    return weights


def loss_and_grads(weights, X, y, weight_decay=0.0, masks=None):
    """Summed cross-entropy over the batch plus (wd/2)*||W||^2, and its gradient.

    ``X`` is already standardized. ``masks`` are optional inverted-dropout
    multipliers, one per hidden layer.
    """
    acts = [X]
    h = X
    for i, (W, b) in enumerate(weights[:-1]):
        h = np.maximum(h @ W + b, 0.0)
        if masks is not None:
            h = h * masks[i]
        acts.append(h)
    W, b = weights[-1]
    p = _softmax(h @ W + b)
    rows = np.arange(len(y))
    loss = -np.log(np.maximum(p[rows, y], LOG_FLOOR)).sum()
    loss += 0.5 * weight_decay * sum(float(np.sum(W * W)) for W, _ in weights)
    g = p
    g[rows, y] -= 1.0
    grads = [None] * len(weights)
    for i in reversed(range(len(weights))):
        W, _ = weights[i]
        gW = acts[i].T @ g + weight_decay * W
        gb = g.sum(axis=0)
        grads[i] = (gW, gb)
        if i:
            g = (g @ W.T) * (acts[i] > 0)
    return loss, grads


def _evaluate(model: TrainedClassifier, X, y):
    if len(y) == 0:
        return float("nan"), float("nan")
    p = model.predict_proba(X)
    loss = float(np.mean(-np.log(np.maximum(p[np.arange(len(y)), y], LOG_FLOOR))))
    acc = float(np.mean(np.argmax(p, axis=1) == y))
    return loss, acc


def fit_arrays(
    X,
    y,
    class_labels: Sequence[int],
    spec: ClassifierSpec,
    config: TrainConfig,
    X_val=None,
    y_val=None,
    on_epoch: Callable[[int, TrainedClassifier], None] | None = None,
) -> TrainedClassifier:
    """Mini-batch SGD on index labels ``y`` (0..n_classes-1).

    ``on_epoch(epoch, model)`` is called after initialization (epoch 0)
    and after every epoch with the live model; copy it to keep a snapshot.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if len(X) == 0:
        raise ContractError("training set is empty")
    if X.shape[1] != spec.feature_dim:
        raise ContractError(f"spec expects {spec.feature_dim} features, data has {X.shape[1]}")
    if len(class_labels) != spec.n_classes:
        raise ContractError(f"spec has {spec.n_classes} outputs for {len(class_labels)} classes")
    init_rng = substream(config.seed, "init")
    batch_rng = substream(config.seed, "batch")
    drop_rng = substream(config.seed, "dropout")
    if spec.standardize:
        shift = X.mean(axis=0)
        scale = X.std(axis=0)
        scale[scale < 1e-8] = 1.0
    else:
        shift = np.zeros(X.shape[1])
        scale = np.ones(X.shape[1])
    model = TrainedClassifier(spec, init_weights(spec, init_rng), class_labels, shift, scale)
    Z = (X - shift) / scale
    has_val = X_val is not None and len(X_val) > 0
    hist = model.history = {k: [] for k in ("epoch", "train_loss", "train_acc", "val_loss", "val_acc")}

    def record(epoch):
        tl, ta = _evaluate(model, X, y)
        vl, va = _evaluate(model, X_val, y_val) if has_val else (float("nan"), float("nan"))
        for key, val in zip(hist, (epoch, tl, ta, vl, va)):
            hist[key].append(val)
        if on_epoch is not None:
            on_epoch(epoch, model)

    record(0)
    keep = 1.0 - config.dropout_rate
    n = len(Z)
    lr, wd = config.learning_rate, config.weight_decay
    for epoch in range(1, config.epochs + 1):
        order = batch_rng.permutation(n)
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            masks = None
            if config.dropout_rate > 0:
                masks = [
                    (drop_rng.random((len(idx), w)) < keep) / keep for w in spec.layer_widths[1:-1]
                ]
            _, grads = loss_and_grads(model.weights, Z[idx], y[idx], wd, masks)
            for (W, b), (gW, gb) in zip(model.weights, grads):
                W -= lr * gW
                b -= lr * gb
        record(epoch)
    return model


def train_classifier(
    train: Dataset,
    val: Dataset | None,
    spec: ClassifierSpec,
    config: TrainConfig,
    on_epoch: Callable[[int, TrainedClassifier], None] | None = None,
) -> TrainedClassifier:
    class_labels = tuple(sorted(train.identities))
    index = {c: i for i, c in enumerate(class_labels)}
    y = np.array([index[int(c)] for c in train.individual_ids], dtype=np.int64)
    X_val = y_val = None
    if val is not None and len(val):
        missing = val.identities - set(class_labels)
        if missing:
            raise ContractError(f"validation identities {sorted(missing)[:5]} absent from training set")
        if val.feature_dim != train.feature_dim:
            raise ContractError("train and val feature dimensions differ")
        X_val = val.features
        y_val = np.array([index[int(c)] for c in val.individual_ids], dtype=np.int64)
    return fit_arrays(train.features, y, class_labels, spec, config, X_val, y_val, on_epoch)


def cross_entropy(pred, true_class) -> float:
    """-log p[true_class] with the probability floored at 1e-12."""
    pred = np.asarray(pred, dtype=np.float64)
    if not 0 <= true_class < pred.size:
        raise ContractError(f"class index {true_class} out of range for {pred.size} classes")
    return float(-np.log(max(pred[true_class], LOG_FLOOR)))


def cross_entropies(probs, classes) -> np.ndarray:
    probs = np.asarray(probs, dtype=np.float64)
    classes = np.asarray(classes, dtype=np.int64)
    return -np.log(np.maximum(probs[np.arange(len(classes)), classes], LOG_FLOOR))


def accuracy(model: TrainedClassifier, dataset: Dataset) -> float:
    if len(dataset) == 0:
        raise ContractError("accuracy of an empty dataset is undefined")
    pred = np.asarray(model.class_labels)[model.predict_labels(dataset.features)]
    return float(np.mean(pred == dataset.individual_ids))


def overfitting_level(model: TrainedClassifier, train: Dataset, test: Dataset) -> float:
    """Training accuracy minus test accuracy; negative when test is easier."""
    return accuracy(model, train) - accuracy(model, test)


def checkpoint_to_dict(model: TrainedClassifier) -> dict:
    # json writes floats with repr(), which round-trips exactly
    return {
        "spec": {
            "layer_widths": list(model.spec.layer_widths),
            "activation": model.spec.activation,
            "standardize": model.spec.standardize,
        },
        "class_labels": list(model.class_labels),
        "input_shift": model.input_shift.tolist(),
        "input_scale": model.input_scale.tolist(),
        "weights": [{"W": W.ravel().tolist(), "b": b.tolist()} for W, b in model.weights],
        "history": model.history,
    }


def checkpoint_from_dict(doc: dict) -> TrainedClassifier:
    try:
        spec = ClassifierSpec(tuple(doc["spec"]["layer_widths"]), doc["spec"]["activation"], doc["spec"]["standardize"])
        shapes = list(zip(spec.layer_widths[:-1], spec.layer_widths[1:]))
        if len(doc["weights"]) != len(shapes):
            raise DataFormatError("layer count does not match spec")
        weights = [
            (np.array(layer["W"], dtype=np.float64).reshape(shape), np.array(layer["b"], dtype=np.float64))
            for shape, layer in zip(shapes, doc["weights"])
        ]
        return TrainedClassifier(
            spec,
            weights,
            doc["class_labels"],
            np.array(doc["input_shift"], dtype=np.float64),
            np.array(doc["input_scale"], dtype=np.float64),
            doc.get("history", {}),
        )
    except DataFormatError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise DataFormatError(f"malformed checkpoint ({exc})") from None


def save_checkpoint(model: TrainedClassifier, path):
    Path(path).write_text(json.dumps(checkpoint_to_dict(model)) + "\n", encoding="utf-8")


def load_checkpoint(path) -> TrainedClassifier:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
        return checkpoint_from_dict(doc)
    except (json.JSONDecodeError, DataFormatError) as exc:
        raise DataFormatError(f"{path}: {exc}") from None
