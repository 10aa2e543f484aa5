"""Training, inference and persistence for the spectral-normalised classifier."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np

from . import checkpoint, kernels, nn_core
from .errors import InputError, TrainingDivergedError
from .feature_density import FeatureGMM

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 32
    learning_rate: float = 0.01
    momentum_sgd: float = 0.9
    sn_coefficient: float = 0.95
    sn_iters: int = 1
    final_sn_iters: int = 50
    feature_dim: int = 32
    hidden_dim: int = 64
    num_blocks: int = 3
    sn_head: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise InputError("epochs must be >= 1")
        if min(self.sn_iters, self.final_sn_iters, self.feature_dim, self.hidden_dim) < 1:
            raise InputError("sn_iters, final_sn_iters and layer widths must be >= 1")
        if self.num_blocks < 0:
            raise InputError("num_blocks must be >= 0")
        if self.learning_rate <= 0:
            raise InputError("learning_rate must be positive")
        if self.batch_size < 1:
            raise InputError("batch_size must be >= 1")
        if not 0.0 <= self.momentum_sgd < 1.0:
            raise InputError("momentum_sgd must lie in [0, 1)")
        if self.sn_coefficient <= 0:
            raise InputError("sn_coefficient must be positive")


@dataclass
class TrainedModel:
    params: nn_core.NetworkParams
    class_count: int
    train_accuracy: float = float("nan")
    test_accuracy: float = float("nan")
    gmm: FeatureGMM | None = None
    meta: dict = field(default_factory=dict)

    @cached_property
    def compiled(self):
        return kernels.CompiledNet.from_params(self.params)

    @property
    def feature_dim(self):
        return self.params.feature_dim

    @property
    def input_dim(self):
        return self.params.input_dim


def data_fingerprint(images, labels):
    """FNV-1a 64 over the float64 image bytes followed by int64 label bytes."""
    payload = (np.ascontiguousarray(images, dtype="<f8").tobytes()
               + np.ascontiguousarray(labels, dtype="<i8").tobytes())
    return f"{kernels.fnv1a64(payload):016x}"


def accuracy(params, images, labels):
    logits, _, _ = nn_core.forward_batch(params, images)
    return float(np.mean(np.argmax(logits, axis=1) == labels))


def train(train_set, cfg: TrainConfig = TrainConfig(), test_set=None):
    """SGD with momentum on mean cross-entropy, spectral norm after every step."""
    counts = np.bincount(train_set.labels, minlength=train_set.class_count)
    if train_set.class_count < 2:
        raise InputError("need at least two classes")
    if counts.min() < cfg.batch_size:
        raise InputError(
            f"class {int(np.argmin(counts))} has {counts.min()} samples < batch_size {cfg.batch_size}")

    params = nn_core.init_network(
        train_set.images.shape[1], train_set.class_count,
        feature_dim=cfg.feature_dim, hidden_dim=cfg.hidden_dim,
        num_blocks=cfg.num_blocks, sn_head=cfg.sn_head, seed=cfg.seed)
    nn_core.spectral_normalize_network(params, cfg.sn_coefficient, cfg.final_sn_iters)

    rng = np.random.default_rng(cfg.seed + 1)
    velocity = {name: np.zeros_like(p) for name, p in params.parameters()}
    X, y = train_set.images, train_set.labels
    n = len(y)
    step = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            loss, grads = nn_core.grad_params(params, X[idx], y[idx])
            if not np.isfinite(loss):
                raise TrainingDivergedError(step, loss)
            _sgd_step(params, grads, velocity, cfg.learning_rate, cfg.momentum_sgd)
            nn_core.spectral_normalize_network(params, cfg.sn_coefficient, cfg.sn_iters)
            total += loss * len(idx)
            step += 1
        log.debug("epoch %d mean loss %.5f", epoch, total / n)
    nn_core.spectral_normalize_network(params, cfg.sn_coefficient, cfg.final_sn_iters)

    model = TrainedModel(params, train_set.class_count)
    model.train_accuracy = accuracy(params, X, y)
    if test_set is not None:
        model.test_accuracy = accuracy(params, test_set.images, test_set.labels)
    model.meta = {
        "config": asdict(cfg),
        "data_fingerprint": data_fingerprint(X, y),
    }
    return model


def _sgd_step(params, grads, velocity, lr, mom):
    for name, layer in params.layers():
        for attr in ("weight", "bias"):
            key = f"{name}.{attr}"
            v = velocity[key]
            v *= mom
            v += grads[key]
            setattr(layer, attr, getattr(layer, attr) - lr * v)


def predict(model: TrainedModel, x):
    """Softmax probabilities and argmax class (lowest index wins ties)."""
    logits, _, _ = nn_core.forward(model.params, x)
    probs = nn_core.softmax(logits)
    return probs, int(np.argmax(probs))


def extract_features(model: TrainedModel, x):
    _, feats, _ = nn_core.forward(model.params, x)
    return feats


def extract_features_batch(model: TrainedModel, X):
    """Row-by-row feature extraction; identical bits to single-image calls."""
    X = np.asarray(X, dtype=np.float64)
    return np.stack([extract_features(model, row) for row in X]) if len(X) else \
        np.empty((0, model.feature_dim))


def predict_batch(model: TrainedModel, X):
    probs = np.stack([predict(model, row)[0] for row in np.asarray(X, dtype=np.float64)])
    return probs, np.argmax(probs, axis=1)


# --- persistence ---------------------------------------------------------

def meta_path(path):
    path = Path(path)
    return path.with_name(path.stem + ".meta.json")


def save_model(model: TrainedModel, path):
    tensors = checkpoint.network_to_tensors(model.params)
    if model.gmm is not None:
        tensors.update(model.gmm.to_tensors())
    checkpoint.save(path, tensors)
    meta = dict(model.meta)
    meta.update(
        class_count=model.class_count,
        train_accuracy=model.train_accuracy,
        test_accuracy=model.test_accuracy,
    )
    with open(meta_path(path), "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_model(path):
    tensors = checkpoint.load(path)
    params = checkpoint.network_from_tensors(tensors)
    gmm = FeatureGMM.from_tensors(tensors)
    if gmm is not None and gmm.dim != params.feature_dim:
        raise InputError(
            f"stored GMM has dimension {gmm.dim}, model feature_dim is {params.feature_dim}")
    if gmm is not None and gmm.class_count != params.num_classes:
        raise InputError("stored GMM class count differs from the model's")
    meta = {}
    mp = meta_path(path)
    if mp.exists():
        with open(mp) as fh:
            meta = json.load(fh)
    model = TrainedModel(
        params, params.num_classes,
        float(meta.get("train_accuracy", float("nan"))),
        float(meta.get("test_accuracy", float("nan"))),
        gmm,
        {k: v for k, v in meta.items()
         if k not in ("class_count", "train_accuracy", "test_accuracy")},
    )
    return model
