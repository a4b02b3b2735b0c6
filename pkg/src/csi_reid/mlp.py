"""From-scratch multi-layer perceptron classifier.

Architecture: two hidden blocks of affine -> batch norm -> LeakyReLU,
then an affine output layer with softmax.  Cross-entropy loss, analytic
backpropagation through every layer, Adam updates.  All math is 64-bit
and the training loop is a pure function of (model, data, config, seed),
so runs are bitwise reproducible.

Model files use the CSIM v1 format (little-endian):

    magic "CSIM" | version u16 | n_dims u16 = 4 | dims u32 x 4
    | leaky_slope f64 | batchnorm_epsilon f64 | batchnorm_momentum f64
    | step u64
    | tensors, f64, fixed order: per hidden layer (weight, bias,
      bn_scale, bn_shift, bn_running_mean, bn_running_var), then the
      output weight and bias.
"""

from __future__ import annotations

import csv
import struct
import warnings
from dataclasses import dataclass, field
from enum import Enum
from typing import BinaryIO, Iterator, TextIO

import numpy as np

CSIM_MAGIC = b"CSIM"
CSIM_VERSION = 1

_CSIM_HEAD = struct.Struct("<4sHH")
_CSIM_ARCH_TAIL = struct.Struct("<dddQ")


class ModelFormatError(ValueError):
    """Raised when bytes do not form a valid CSIM model file."""


class ForwardMode(Enum):
    TRAIN = "train"
    INFER = "infer"


def leaky_relu(x: np.ndarray, slope: float) -> np.ndarray:
    return np.where(x > 0, x, slope * x)


@dataclass(frozen=True)
class MlpArchitecture:
    input_dim: int
    n_classes: int
    hidden_dims: tuple[int, int] = (128, 64)
    leaky_slope: float = 0.01
    batchnorm_epsilon: float = 1e-5
    batchnorm_momentum: float = 0.9

    def __post_init__(self) -> None:
        object.__setattr__(self, "hidden_dims", tuple(self.hidden_dims))
        if len(self.hidden_dims) != 2:
            raise ValueError("exactly two hidden layers are supported")
        for dim in (self.input_dim, self.n_classes, *self.hidden_dims):
            if not isinstance(dim, (int, np.integer)) or dim < 1:
                raise ValueError(f"all layer dims must be >= 1, got {dim!r}")
        if not 0.0 < self.leaky_slope < 1.0:
            raise ValueError("leaky_slope must be in (0, 1)")
        if not self.batchnorm_epsilon > 0:
            raise ValueError("batchnorm_epsilon must be > 0")
        if not 0.0 <= self.batchnorm_momentum < 1.0:
            raise ValueError("batchnorm_momentum must be in [0, 1)")

    @property
    def layer_dims(self) -> tuple[int, ...]:
        return (self.input_dim, *self.hidden_dims, self.n_classes)


@dataclass
class ParameterSet:
    """Arrays mirroring the model's trainable parameters.

    Used both for gradients and for Adam moment accumulators.
    """

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    bn_scale: list[np.ndarray]
    bn_shift: list[np.ndarray]

    @classmethod
    def zeros_like(cls, model: "MlpModel") -> "ParameterSet":
        return cls(
            weights=[np.zeros_like(w) for w in model.weights],
            biases=[np.zeros_like(b) for b in model.biases],
            bn_scale=[np.zeros_like(g) for g in model.bn_scale],
            bn_shift=[np.zeros_like(s) for s in model.bn_shift],
        )

    def arrays(self) -> Iterator[np.ndarray]:
        """All tensors in the fixed parameter order."""
        yield from self.weights
        yield from self.biases
        yield from self.bn_scale
        yield from self.bn_shift


@dataclass
class MlpModel:
    architecture: MlpArchitecture
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    bn_scale: list[np.ndarray]
    bn_shift: list[np.ndarray]
    bn_running_mean: list[np.ndarray]
    bn_running_var: list[np.ndarray]
    step: int = 0

    def parameters(self) -> Iterator[np.ndarray]:
        """Trainable tensors in the fixed parameter order."""
        yield from self.weights
        yield from self.biases
        yield from self.bn_scale
        yield from self.bn_shift

    def copy(self) -> "MlpModel":
        return MlpModel(
            architecture=self.architecture,
            weights=[w.copy() for w in self.weights],
            biases=[b.copy() for b in self.biases],
            bn_scale=[g.copy() for g in self.bn_scale],
            bn_shift=[s.copy() for s in self.bn_shift],
            bn_running_mean=[m.copy() for m in self.bn_running_mean],
            bn_running_var=[v.copy() for v in self.bn_running_var],
            step=self.step,
        )

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, MlpModel):
            return NotImplemented
        mine = [*self.parameters(), *self.bn_running_mean, *self.bn_running_var]
        theirs = [*other.parameters(), *other.bn_running_mean, *other.bn_running_var]
        return (
            self.architecture == other.architecture
            and self.step == other.step
            and all(np.array_equal(a, b) for a, b in zip(mine, theirs))
        )


def init_model(architecture: MlpArchitecture, seed: int) -> MlpModel:
    """Fresh model: Glorot-uniform weights, zero biases, identity batch norm."""
    rng = np.random.default_rng(seed)
    dims = architecture.layer_dims
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    hidden = architecture.hidden_dims
    return MlpModel(
        architecture=architecture,
        weights=weights,
        biases=biases,
        bn_scale=[np.ones(d) for d in hidden],
        bn_shift=[np.zeros(d) for d in hidden],
        bn_running_mean=[np.zeros(d) for d in hidden],
        bn_running_var=[np.ones(d) for d in hidden],
        step=0,
    )


def _as_batch(x: np.ndarray, input_dim: int) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    squeeze = x.ndim == 1
    if squeeze:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != input_dim:
        raise ValueError(
            f"expected features of dimension {input_dim}, got shape {x.shape}"
        )
    return x, squeeze


def _softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    return exp / exp.sum(axis=1, keepdims=True)


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def _forward_internal(
    model: MlpModel, x: np.ndarray, mode: ForwardMode
) -> tuple[np.ndarray, np.ndarray, list[dict]]:
    """Shared forward pass; returns (logits, probs, per-layer caches)."""
    arch = model.architecture
    if mode is ForwardMode.TRAIN and x.shape[0] < 2:
        raise ValueError(
            "train-mode forward needs a batch of >= 2 samples"
            " (batch variance is undefined otherwise)"
        )
    caches: list[dict] = []
    activation = x
    momentum = arch.batchnorm_momentum
    for layer in range(2):
        z = activation @ model.weights[layer] + model.biases[layer]
        if mode is ForwardMode.TRAIN:
            mean = z.mean(axis=0)
            var = z.var(axis=0)
            model.bn_running_mean[layer] = (
                momentum * model.bn_running_mean[layer] + (1.0 - momentum) * mean
            )
            model.bn_running_var[layer] = (
                momentum * model.bn_running_var[layer] + (1.0 - momentum) * var
            )
        else:
            mean = model.bn_running_mean[layer]
            var = model.bn_running_var[layer]
        inv_std = 1.0 / np.sqrt(var + arch.batchnorm_epsilon)
        z_hat = (z - mean) * inv_std
        pre_activation = model.bn_scale[layer] * z_hat + model.bn_shift[layer]
        out = leaky_relu(pre_activation, arch.leaky_slope)
        caches.append(
            {
                "x": activation,
                "z_hat": z_hat,
                "inv_std": inv_std,
                "pre_activation": pre_activation,
            }
        )
        activation = out
    logits = activation @ model.weights[2] + model.biases[2]
    caches.append({"x": activation})
    return logits, _softmax(logits), caches


def forward(
    model: MlpModel, x: np.ndarray, mode: ForwardMode = ForwardMode.INFER
) -> np.ndarray:
    """Class probabilities for a batch (or a single feature vector).

    TRAIN mode normalizes with batch statistics and updates the model's
    running statistics in place; INFER mode uses the stored running
    statistics and mutates nothing.
    """
    x, squeeze = _as_batch(x, model.architecture.input_dim)
    _, probs, _ = _forward_internal(model, x, mode)
    return probs[0] if squeeze else probs


def predict_proba(model: MlpModel, x: np.ndarray) -> np.ndarray:
    """Inference-mode probabilities; pure in (model, x)."""
    return forward(model, x, mode=ForwardMode.INFER)


def _check_labels(y: np.ndarray, n_classes: int, n_rows: int) -> np.ndarray:
    y = np.asarray(y)
    if y.shape != (n_rows,):
        raise ValueError(f"labels shape {y.shape} does not match batch of {n_rows}")
    y = y.astype(np.int64)
    if y.size and (y.min() < 0 or y.max() >= n_classes):
        raise ValueError(f"labels must lie in [0, {n_classes})")
    return y


def _loss_grad_probs(
    model: MlpModel, x: np.ndarray, y: np.ndarray
) -> tuple[float, ParameterSet, np.ndarray]:
    arch = model.architecture
    x, _ = _as_batch(x, arch.input_dim)
    y = _check_labels(y, arch.n_classes, x.shape[0])
    logits, probs, caches = _forward_internal(model, x, ForwardMode.TRAIN)
    batch = x.shape[0]
    log_probs = _log_softmax(logits)
    loss = float(-log_probs[np.arange(batch), y].mean())

    grads = ParameterSet.zeros_like(model)
    d_logits = probs.copy()
    d_logits[np.arange(batch), y] -= 1.0
    d_logits /= batch

    grads.weights[2] = caches[2]["x"].T @ d_logits
    grads.biases[2] = d_logits.sum(axis=0)
    d_out = d_logits @ model.weights[2].T
    for layer in (1, 0):
        cache = caches[layer]
        d_pre = d_out * np.where(
            cache["pre_activation"] > 0, 1.0, arch.leaky_slope
        )
        grads.bn_scale[layer] = (d_pre * cache["z_hat"]).sum(axis=0)
        grads.bn_shift[layer] = d_pre.sum(axis=0)
        d_hat = d_pre * model.bn_scale[layer]
        # Batch-norm backward with batch statistics (biased variance).
        d_z = (
            cache["inv_std"]
            / batch
            * (
                batch * d_hat
                - d_hat.sum(axis=0)
                - cache["z_hat"] * (d_hat * cache["z_hat"]).sum(axis=0)
            )
        )
        grads.weights[layer] = cache["x"].T @ d_z
        grads.biases[layer] = d_z.sum(axis=0)
        if layer > 0:
            d_out = d_z @ model.weights[layer].T
    return loss, grads, probs


def loss_and_grad(
    model: MlpModel, x: np.ndarray, y: np.ndarray
) -> tuple[float, ParameterSet]:
    """Cross-entropy loss and analytic gradients for one train-mode batch.

    Backpropagates through softmax, the affine layers, LeakyReLU, and the
    batch-normalization statistics; the loss is the mean over the batch.
    Updates the model's running statistics as a train-mode forward does.
    """
    loss, grads, _ = _loss_grad_probs(model, x, y)
    return loss, grads


@dataclass
class AdamState:
    """Adam optimizer state; moment tensors mirror the model parameters."""

    m: ParameterSet
    v: ParameterSet
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    t: int = 0


def init_adam(model: MlpModel, learning_rate: float = 1e-3) -> AdamState:
    return AdamState(
        m=ParameterSet.zeros_like(model),
        v=ParameterSet.zeros_like(model),
        learning_rate=learning_rate,
    )


def adam_step(
    model: MlpModel, state: AdamState, grads: ParameterSet
) -> tuple[MlpModel, AdamState]:
    """One Adam update with bias-corrected moments; mutates in place.

    theta <- theta - lr * m_hat / (sqrt(v_hat) + eps).  Increments both
    the optimizer step t and the model's training-step counter.
    """
    state.t += 1
    correction1 = 1.0 - state.beta1**state.t
    correction2 = 1.0 - state.beta2**state.t
    for param, grad, m, v in zip(
        model.parameters(), grads.arrays(), state.m.arrays(), state.v.arrays()
    ):
        if grad.shape != param.shape:
            raise ValueError(
                f"gradient shape {grad.shape} does not match parameter"
                f" shape {param.shape}"
            )
        m *= state.beta1
        m += (1.0 - state.beta1) * grad
        v *= state.beta2
        v += (1.0 - state.beta2) * grad**2
        m_hat = m / correction1
        v_hat = v / correction2
        param -= state.learning_rate * m_hat / (np.sqrt(v_hat) + state.epsilon)
        if not np.isfinite(param).all():
            raise FloatingPointError(
                "non-finite parameter after Adam update (diverged?)"
            )
    model.step += 1
    return model, state


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 200
    batch_size: int = 64
    seed: int = 0
    shuffle: bool = True
    early_stop_patience: int | None = None

    def __post_init__(self) -> None:
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.early_stop_patience is not None and self.early_stop_patience < 1:
            raise ValueError("early_stop_patience must be >= 1 when set")


@dataclass
class TrainHistory:
    epoch: list[int] = field(default_factory=list)
    loss: list[float] = field(default_factory=list)
    train_acc: list[float] = field(default_factory=list)

    def to_csv(self, sink: TextIO) -> None:
        writer = csv.writer(sink, lineterminator="\n")
        writer.writerow(["epoch", "loss", "train_acc"])
        for e, l, a in zip(self.epoch, self.loss, self.train_acc):
            writer.writerow([e, repr(l), repr(a)])


def train(
    model: MlpModel,
    x: np.ndarray,
    y: np.ndarray,
    config: TrainConfig,
    adam: AdamState | None = None,
) -> TrainHistory:
    """Train the model in place; returns the per-epoch history.

    Shuffling comes from a generator seeded with ``config.seed``, so the
    final parameters are a bitwise-deterministic function of (model, x,
    y, config).  A trailing batch of a single sample is skipped (batch
    norm needs >= 2 rows).  Optional early stopping halts after
    ``early_stop_patience`` epochs without a training-loss improvement.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if x.ndim != 2 or x.shape[0] != y.shape[0]:
        raise ValueError("x must be (n, d) with one label per row")
    n = x.shape[0]
    if n == 0:
        raise ValueError("empty dataset")
    if n < 2:
        raise ValueError("training needs at least 2 samples for batch norm")
    _check_labels(y, model.architecture.n_classes, n)
    if np.unique(y).size < 2:
        warnings.warn("training data contains a single class", stacklevel=2)

    if adam is None:
        adam = init_adam(model)
    rng = np.random.default_rng(config.seed)
    history = TrainHistory()
    best_loss = np.inf
    stale_epochs = 0
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(n) if config.shuffle else np.arange(n)
        total_loss = 0.0
        total_correct = 0
        total_seen = 0
        for start in range(0, n, config.batch_size):
            batch_idx = order[start : start + config.batch_size]
            if batch_idx.size < 2:
                continue
            batch_x = x[batch_idx]
            batch_y = y[batch_idx]
            loss, grads, probs = _loss_grad_probs(model, batch_x, batch_y)
            adam_step(model, adam, grads)
            total_loss += loss * batch_idx.size
            total_correct += int((probs.argmax(axis=1) == batch_y).sum())
            total_seen += batch_idx.size
        epoch_loss = total_loss / total_seen
        history.epoch.append(epoch)
        history.loss.append(epoch_loss)
        history.train_acc.append(total_correct / total_seen)
        if config.early_stop_patience is not None:
            if epoch_loss < best_loss - 1e-12:
                best_loss = epoch_loss
                stale_epochs = 0
            else:
                stale_epochs += 1
                if stale_epochs >= config.early_stop_patience:
                    break
    return history


def _tensor_schedule(model_or_arch) -> list[tuple[str, tuple[int, int] | tuple[int]]]:
    arch = (
        model_or_arch
        if isinstance(model_or_arch, MlpArchitecture)
        else model_or_arch.architecture
    )
    dims = arch.layer_dims
    schedule: list[tuple[str, tuple]] = []
    for layer in range(2):
        width = dims[layer + 1]
        schedule.append((f"hidden{layer + 1}.weight", (dims[layer], width)))
        schedule.append((f"hidden{layer + 1}.bias", (width,)))
        schedule.append((f"hidden{layer + 1}.bn_scale", (width,)))
        schedule.append((f"hidden{layer + 1}.bn_shift", (width,)))
        schedule.append((f"hidden{layer + 1}.bn_running_mean", (width,)))
        schedule.append((f"hidden{layer + 1}.bn_running_var", (width,)))
    schedule.append(("output.weight", (dims[2], dims[3])))
    schedule.append(("output.bias", (dims[3],)))
    return schedule


def _model_tensors(model: MlpModel) -> list[np.ndarray]:
    tensors: list[np.ndarray] = []
    for layer in range(2):
        tensors.extend(
            [
                model.weights[layer],
                model.biases[layer],
                model.bn_scale[layer],
                model.bn_shift[layer],
                model.bn_running_mean[layer],
                model.bn_running_var[layer],
            ]
        )
    tensors.extend([model.weights[2], model.biases[2]])
    return tensors


def save_model(model: MlpModel, sink: BinaryIO) -> int:
    """Serialize the model as CSIM v1; returns the byte count."""
    arch = model.architecture
    dims = arch.layer_dims
    written = sink.write(_CSIM_HEAD.pack(CSIM_MAGIC, CSIM_VERSION, len(dims)))
    written += sink.write(struct.pack(f"<{len(dims)}I", *dims))
    written += sink.write(
        _CSIM_ARCH_TAIL.pack(
            arch.leaky_slope,
            arch.batchnorm_epsilon,
            arch.batchnorm_momentum,
            model.step,
        )
    )
    for (name, shape), tensor in zip(_tensor_schedule(model), _model_tensors(model)):
        if tensor.shape != shape:
            raise ValueError(f"tensor {name} has shape {tensor.shape}, expected {shape}")
        written += sink.write(
            np.ascontiguousarray(tensor, dtype="<f8").tobytes()
        )
    return written


def load_model(source: BinaryIO) -> MlpModel:
    """Parse a CSIM v1 model file; exact inverse of :func:`save_model`."""

    def read_exact(n: int, what: str) -> bytes:
        data = source.read(n)
        if len(data) != n:
            raise ModelFormatError(f"truncated model file while reading {what}")
        return data

    magic, version, n_dims = _CSIM_HEAD.unpack(
        read_exact(_CSIM_HEAD.size, "header")
    )
    if magic != CSIM_MAGIC:
        raise ModelFormatError(f"bad magic {magic!r}, expected {CSIM_MAGIC!r}")
    if version != CSIM_VERSION:
        raise ModelFormatError(f"unsupported CSIM version {version}")
    if n_dims != 4:
        raise ModelFormatError(
            f"architecture descriptor lists {n_dims} dims, expected 4"
        )
    dims = struct.unpack("<4I", read_exact(16, "architecture dims"))
    slope, eps, momentum, step = _CSIM_ARCH_TAIL.unpack(
        read_exact(_CSIM_ARCH_TAIL.size, "architecture hyperparameters")
    )
    try:
        arch = MlpArchitecture(
            input_dim=dims[0],
            n_classes=dims[3],
            hidden_dims=(dims[1], dims[2]),
            leaky_slope=slope,
            batchnorm_epsilon=eps,
            batchnorm_momentum=momentum,
        )
    except ValueError as exc:
        raise ModelFormatError(f"invalid architecture in header: {exc}") from exc

    tensors: list[np.ndarray] = []
    for name, shape in _tensor_schedule(arch):
        count = int(np.prod(shape))
        raw = read_exact(count * 8, f"tensor {name!r}")
        tensor = np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(shape)
        if not np.isfinite(tensor).all():
            raise ModelFormatError(f"tensor {name!r} contains non-finite values")
        tensors.append(tensor)
    model = MlpModel(
        architecture=arch,
        weights=[tensors[0], tensors[6], tensors[12]],
        biases=[tensors[1], tensors[7], tensors[13]],
        bn_scale=[tensors[2], tensors[8]],
        bn_shift=[tensors[3], tensors[9]],
        bn_running_mean=[tensors[4], tensors[10]],
        bn_running_var=[tensors[5], tensors[11]],
        step=step,
    )
    if any(v.min() < 0 for v in model.bn_running_var):
        raise ModelFormatError("negative batch-norm running variance")
    return model


def save_model_file(model: MlpModel, path: str) -> int:
    with open(path, "wb") as sink:
        return save_model(model, sink)


def load_model_file(path: str) -> MlpModel:
    with open(path, "rb") as source:
        return load_model(source)
