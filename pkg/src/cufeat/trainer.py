"""Synthetic fine-grained data and a small numpy MLP trained by hand-written backprop.

Classes come in sibling groups that share most of their mean, so a classifier has
to pick up the small class-specific component.  The penultimate ReLU layer is read
as a stack of C feature maps of shape (H, W), which is what the feature
redundancy loss operates on.
"""

from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .infotheory import nontarget_distributions
from .losses import LossConfig, batch_loss, frl_batch, select_top_k
from .numerics import InvalidInputError, entropy_nat, make_rng

PARAM_NAMES = ("W1", "b1", "W2", "b2", "W3", "b3")


class TrainingError(RuntimeError):
    def __init__(self, message, epoch=None, batch=None):
        super().__init__(f"{message} (epoch {epoch}, batch {batch})")
        self.epoch = epoch
        self.batch = batch


@dataclass(frozen=True)
class SyntheticSpec:
    n_classes: int = 10
    groups: int = 5
    input_dim: int = 64
    train_per_class: int = 200
    test_per_class: int = 100
    shared_scale: float = 1.0
    unique_scale: float = 0.5
    noise_scale: float = 0.15
    seed: int = 0

    def __post_init__(self):
        if self.groups < 1 or self.n_classes % self.groups:
            raise InvalidInputError("n_classes must be divisible by groups")
        if min(self.shared_scale, self.unique_scale, self.noise_scale) <= 0:
            raise InvalidInputError("all scales must be positive")
        if self.n_classes < 3 or self.input_dim < 1:
            raise InvalidInputError("need n_classes >= 3 and input_dim >= 1")
        if self.train_per_class < 1 or self.test_per_class < 1:
            raise InvalidInputError("need at least one sample per class and split")


@dataclass
class Dataset:
    x_train: np.ndarray
    y_train: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray
    class_means: np.ndarray


def _unit_rows(rng, rows, dim):
    v = rng.standard_normal((rows, dim))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def generate_dataset(spec: SyntheticSpec) -> Dataset:
    """Class c has mean shared*g[group(c)] + unique*u[c]; samples add isotropic noise.

    Classes ``c`` and ``c'`` are siblings when ``c // (n/groups) == c' // (n/groups)``.
    """
    rng = make_rng(spec.seed)
    g = _unit_rows(rng, spec.groups, spec.input_dim)
    u = _unit_rows(rng, spec.n_classes, spec.input_dim)
    group_of = np.arange(spec.n_classes) // (spec.n_classes // spec.groups)
    means = spec.shared_scale * g[group_of] + spec.unique_scale * u

    def draw(per_class):
        y = np.repeat(np.arange(spec.n_classes), per_class)
        x = means[y] + spec.noise_scale * rng.standard_normal((y.size, spec.input_dim))
        return x, y

    x_train, y_train = draw(spec.train_per_class)
    x_test, y_test = draw(spec.test_per_class)
    return Dataset(x_train, y_train, x_test, y_test, means)


def nearest_mean_accuracy(x, y, means) -> float:
    d = ((x[:, None, :] - means[None, :, :]) ** 2).sum(axis=2)
    return float(np.mean(np.argmin(d, axis=1) == y))


def linear_probe_accuracy(data: Dataset) -> float:
    """Least-squares regression onto one-hot labels (with bias), scored on the test split."""
    n = int(data.y_train.max()) + 1
    A = np.hstack([data.x_train, np.ones((data.x_train.shape[0], 1))])
    Y = np.eye(n)[data.y_train]
    W, *_ = np.linalg.lstsq(A, Y, rcond=None)
    At = np.hstack([data.x_test, np.ones((data.x_test.shape[0], 1))])
    return float(np.mean(np.argmax(At @ W, axis=1) == data.y_test))


# ---------------------------------------------------------------------------
# model


@dataclass
class MlpModel:
    params: dict
    channels: int
    map_hw: tuple

    @property
    def feature_shape(self) -> tuple:
        return (self.channels, *self.map_hw)

    def copy(self) -> "MlpModel":
        return MlpModel({k: v.copy() for k, v in self.params.items()}, self.channels, tuple(self.map_hw))


def init_model(input_dim: int, n_classes: int, hidden: int = 128, channels: int = 10,
               map_hw=(4, 4), seed: int = 0, bias_init: float = 0.01) -> MlpModel:
    """Glorot-uniform weights; small positive hidden biases keep ReLU maps alive at start."""
    rng = make_rng(seed)
    width = channels * map_hw[0] * map_hw[1]
    sizes = [(input_dim, hidden), (hidden, width), (width, n_classes)]
    params = {}
    for i, (fan_in, fan_out) in enumerate(sizes, start=1):
        limit = math.sqrt(6.0 / (fan_in + fan_out))
        params[f"W{i}"] = rng.uniform(-limit, limit, size=(fan_in, fan_out))
        params[f"b{i}"] = np.full(fan_out, bias_init if i < 3 else 0.0)
    return MlpModel(params, channels, tuple(map_hw))


def forward(model: MlpModel, x):
    """Return (logits, feature stacks of shape (B, C, H, W), cache for backward)."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    p = model.params
    if x.shape[1] != p["W1"].shape[0]:
        raise InvalidInputError(f"input dim {x.shape[1]} != model input dim {p['W1'].shape[0]}")
    a1 = x @ p["W1"] + p["b1"]
    h1 = np.maximum(a1, 0.0)
    a2 = h1 @ p["W2"] + p["b2"]
    h2 = np.maximum(a2, 0.0)
    logits = h2 @ p["W3"] + p["b3"]
    feats = h2.reshape(x.shape[0], *model.feature_shape)
    return logits, feats, (x, a1, h1, a2, h2)


def batch_objective(model: MlpModel, x, y, config: LossConfig, rng=None):
    """Per-sample losses for a batch, plus the top-K indices when FRL is active."""
    logits, feats, cache = forward(model, x)
    idx = None
    phi = None
    if config.uses_frl:
        phi, idx = select_top_k(feats, config.frl_k)
    bl = batch_loss(logits, y, config, phi=phi, rng=rng, on_zero="ignore")
    return bl, idx, cache


def backward(model: MlpModel, x, y, config: LossConfig, rng=None):
    """Gradient of the batch-mean loss with respect to every parameter.

    Returns (mean loss, grads dict, BatchLoss).  Top-K selection indices are
    treated as constants.
    """
    y = np.asarray(y)
    bl, idx, (x, a1, h1, a2, h2) = batch_objective(model, x, y, config, rng)
    p = model.params
    B = x.shape[0]
    dz = bl.grad_logits / B
    grads = {"W3": h2.T @ dz, "b3": dz.sum(axis=0)}
    dh2 = dz @ p["W3"].T
    if bl.grad_features is not None:
        dfeat = np.zeros((B, *model.feature_shape))
        np.put_along_axis(dfeat, idx[:, :, None, None], bl.grad_features / B, axis=1)
        dh2 = dh2 + dfeat.reshape(B, -1)
    da2 = dh2 * (a2 > 0)
    grads["W2"] = h1.T @ da2
    grads["b2"] = da2.sum(axis=0)
    da1 = (da2 @ p["W2"].T) * (a1 > 0)
    grads["W1"] = x.T @ da1
    grads["b1"] = da1.sum(axis=0)
    return bl.value, grads, bl


# ---------------------------------------------------------------------------
# training


@dataclass(frozen=True)
class TrainConfig:
    loss: LossConfig = field(default_factory=LossConfig)
    epochs: int = 60
    batch_size: int = 16
    learning_rate: float = 0.01
    lr_decay_factor: float = 0.9
    lr_decay_every: int = 2
    momentum: float = 0.9
    weight_decay: float = 5e-4
    hidden: int = 128
    map_hw: tuple = (4, 4)
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.learning_rate < 0:
            raise InvalidInputError("epochs and batch_size must be positive, learning_rate non-negative")
        if self.lr_decay_every < 1 or not 0 < self.lr_decay_factor <= 1:
            raise InvalidInputError("lr decay needs factor in (0, 1] and a positive interval")
        if not 0 <= self.momentum < 1 or self.weight_decay < 0:
            raise InvalidInputError("momentum must be in [0, 1) and weight_decay >= 0")

    def lr_at(self, epoch: int) -> float:
        return self.learning_rate * self.lr_decay_factor ** ((epoch - 1) // self.lr_decay_every)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["map_hw"] = list(self.map_hw)
        return d


@dataclass
class MetricsRecord:
    epoch: int
    train_loss: float
    test_accuracy: float
    mean_nontarget_entropy: float
    mean_topk_similarity: float
    wall_ms: float = 0.0


CSV_FIELDS = ("epoch", "train_loss", "test_accuracy", "mean_nontarget_entropy", "mean_topk_similarity", "wall_ms")


def _seeds(seed: int):
    init, shuffle, ties = np.random.SeedSequence(seed).spawn(3)
    return (int(init.generate_state(1)[0]), np.random.Generator(np.random.PCG64(shuffle)),
            np.random.Generator(np.random.PCG64(ties)))


def build_model(spec: SyntheticSpec, config: TrainConfig) -> MlpModel:
    init_seed, _, _ = _seeds(config.seed)
    return init_model(spec.input_dim, spec.n_classes, config.hidden, config.loss.frl_k,
                      config.map_hw, seed=init_seed)


def evaluate(model: MlpModel, x, y, k: int | None = None):
    """Accuracy, mean non-target entropy at the true class, and mean normalised top-K similarity."""
    y = np.asarray(y)
    logits, feats, _ = forward(model, x)
    acc = float(np.mean(np.argmax(logits, axis=1) == y))
    ent = float(np.mean(entropy_nat(nontarget_distributions(logits, y))))
    k = model.channels if k is None else k
    sel, _ = select_top_k(feats, k)
    sim = float(np.mean(frl_batch(sel, on_zero="ignore").values)) / (k * (k - 1) / 2)
    return acc, ent, sim


def train(model: MlpModel, data: Dataset, config: TrainConfig, record_wall_time: bool = False,
          progress=None) -> list[MetricsRecord]:
    """SGD with momentum and weight decay; mutates ``model`` in place.

    ``wall_ms`` is left at 0 unless ``record_wall_time`` is set, so that metric
    files from identical configs are byte-identical.
    """
    _, shuffle_rng, tie_rng = _seeds(config.seed)
    velocity = {k: np.zeros_like(v) for k, v in model.params.items()}
    N = data.x_train.shape[0]
    history = []
    for epoch in range(1, config.epochs + 1):
        start = time.perf_counter()
        lr = config.lr_at(epoch)
        order = shuffle_rng.permutation(N)
        total = 0.0
        for b, lo in enumerate(range(0, N, config.batch_size)):
            sel = order[lo:lo + config.batch_size]
            try:
                value, grads, _ = backward(model, data.x_train[sel], data.y_train[sel], config.loss, tie_rng)
            except InvalidInputError as exc:
                raise TrainingError(str(exc), epoch, b) from exc
            if not math.isfinite(value):
                raise TrainingError("non-finite loss", epoch, b)
            total += value * sel.size
            for name in PARAM_NAMES:
                g = grads[name] + config.weight_decay * model.params[name]
                velocity[name] = config.momentum * velocity[name] + g
                model.params[name] -= lr * velocity[name]
        acc, ent, sim = evaluate(model, data.x_test, data.y_test, config.loss.frl_k)
        wall = (time.perf_counter() - start) * 1000.0 if record_wall_time else 0.0
        rec = MetricsRecord(epoch, total / N, acc, ent, sim, round(wall, 3))
        history.append(rec)
        if progress is not None:
            progress(rec)
    return history


def run_experiment(spec: SyntheticSpec, config: TrainConfig, record_wall_time: bool = False,
                   progress=None) -> list[MetricsRecord]:
    data = generate_dataset(spec)
    model = build_model(spec, config)
    return train(model, data, config, record_wall_time, progress)
