"""Multilayer perceptrons with linear or ReLU units and softmax cross-entropy.

Parameters live in one flat float64 vector. Each layer owns a contiguous
segment holding its weight matrix (row-major, shape ``(fan_out, fan_in)``)
followed by its bias, in forward-pass order.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np


class Activation(str, enum.Enum):
    IDENTITY = "identity"
    RELU = "relu"


class DimensionError(ValueError):
    """Input or parameter dimensions do not match the network spec."""


@dataclass(frozen=True)
class Segment:
    layer_index: int
    weight_offset: int
    weight_shape: tuple[int, int]
    bias_offset: int

    @property
    def fan_out(self) -> int:
        return self.weight_shape[0]

    @property
    def fan_in(self) -> int:
        return self.weight_shape[1]

    @property
    def start(self) -> int:
        return self.weight_offset

    @property
    def stop(self) -> int:
        return self.bias_offset + self.fan_out

    @property
    def size(self) -> int:
        return self.stop - self.start


@dataclass(frozen=True)
class NetworkSpec:
    """Architecture of a fully connected classifier.

    ``hidden_widths`` may be empty, which gives multinomial logistic
    regression. With ``skip_connections`` every hidden layer after the first
    adds its input to its activated output, so all hidden widths must agree.
    """

    input_dim: int
    hidden_widths: tuple[int, ...]
    num_classes: int
    activation: Activation = Activation.RELU
    skip_connections: bool = False

    def __post_init__(self):
        object.__setattr__(self, "hidden_widths", tuple(int(w) for w in self.hidden_widths))
        object.__setattr__(self, "activation", Activation(self.activation))
        if self.input_dim < 1:
            raise ValueError("input_dim must be positive")
        if self.num_classes < 2:
            raise ValueError("num_classes must be at least 2")
        if any(w < 1 for w in self.hidden_widths):
            raise ValueError("hidden widths must be positive")
        if self.skip_connections and len(set(self.hidden_widths)) > 1:
            raise ValueError("skip connections require equal hidden widths")

    @property
    def layer_dims(self) -> list[tuple[int, int]]:
        """(fan_in, fan_out) for each affine layer, input to output."""
        sizes = [self.input_dim, *self.hidden_widths, self.num_classes]
        return list(zip(sizes[:-1], sizes[1:]))

    @property
    def num_layers(self) -> int:
        return len(self.hidden_widths) + 1

    @property
    def num_params(self) -> int:
        return sum(i * o + o for i, o in self.layer_dims)

    def layout(self) -> tuple[Segment, ...]:
        segments = []
        offset = 0
        for index, (fan_in, fan_out) in enumerate(self.layer_dims):
            segments.append(Segment(index, offset, (fan_out, fan_in), offset + fan_in * fan_out))
            offset += fan_in * fan_out + fan_out
        return tuple(segments)

    def to_dict(self) -> dict:
        return {
            "input_dim": self.input_dim,
            "hidden_widths": list(self.hidden_widths),
            "num_classes": self.num_classes,
            "activation": self.activation.value,
            "skip_connections": self.skip_connections,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        return cls(
            input_dim=int(d["input_dim"]),
            hidden_widths=tuple(d["hidden_widths"]),
            num_classes=int(d["num_classes"]),
            activation=Activation(d.get("activation", "relu")),
            skip_connections=bool(d.get("skip_connections", False)),
        )


@dataclass
class ParamVector:
    values: np.ndarray
    layout: tuple[Segment, ...]

    def __post_init__(self):
        self.values = np.ascontiguousarray(self.values, dtype=np.float64)
        if self.values.ndim != 1:
            raise DimensionError("parameter vector must be one-dimensional")
        expected = self.layout[-1].stop if self.layout else 0
        if self.values.size != expected:
            raise DimensionError(f"parameter vector has length {self.values.size}, layout needs {expected}")

    @classmethod
    def for_spec(cls, spec: NetworkSpec, values) -> "ParamVector":
        return cls(np.asarray(values, dtype=np.float64), spec.layout())

    @classmethod
    def zeros(cls, spec: NetworkSpec) -> "ParamVector":
        return cls(np.zeros(spec.num_params), spec.layout())

    def __len__(self) -> int:
        return self.values.size

    def layers(self) -> Iterator[tuple[np.ndarray, np.ndarray]]:
        """Yield (W, b) views into ``values`` in forward order."""
        for seg in self.layout:
            w = self.values[seg.weight_offset:seg.bias_offset].reshape(seg.weight_shape)
            b = self.values[seg.bias_offset:seg.stop]
            yield w, b

    def copy(self) -> "ParamVector":
        return ParamVector(self.values.copy(), self.layout)


def init_params(spec: NetworkSpec, seed) -> ParamVector:
    """He scaling for ReLU, 1/fan_in variance for linear units, zero biases."""
    rng = np.random.default_rng(seed)
    gain = 2.0 if spec.activation is Activation.RELU else 1.0
    values = np.zeros(spec.num_params)
    for seg in spec.layout():
        w = rng.standard_normal(seg.weight_shape) * np.sqrt(gain / seg.fan_in)
        values[seg.weight_offset:seg.bias_offset] = w.ravel()
    return ParamVector(values, spec.layout())


def check_params(spec: NetworkSpec, params: ParamVector) -> None:
    if len(params) != spec.num_params or params.layout != spec.layout():
        raise DimensionError(f"parameters of length {len(params)} do not match spec with d={spec.num_params}")


def _as_batch(spec: NetworkSpec, x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != spec.input_dim:
        raise DimensionError(f"expected inputs of dimension {spec.input_dim}, got shape {x.shape}")
    return x, single


def forward_cache(spec: NetworkSpec, params: ParamVector, x: np.ndarray):
    """Forward pass over a batch keeping what the backward rules need.

    Returns ``(logits, inputs, preacts)`` where ``inputs[l]`` is the input
    to affine layer ``l`` and ``preacts[l]`` is the pre-activation of hidden
    layer ``l``.
    """
    relu = spec.activation is Activation.RELU
    inputs, preacts = [], []
    h = x
    layers = list(params.layers())
    for index, (w, b) in enumerate(layers[:-1]):
        inputs.append(h)
        z = h @ w.T + b
        preacts.append(z)
        a = np.maximum(z, 0.0) if relu else z
        h = a + h if (spec.skip_connections and index > 0) else a
    w, b = layers[-1]
    inputs.append(h)
    return h @ w.T + b, inputs, preacts


def forward(spec: NetworkSpec, params: ParamVector, x) -> np.ndarray:
    """Logits for one input vector, or for each row of a batch."""
    check_params(spec, params)
    xb, single = _as_batch(spec, x)
    logits = forward_cache(spec, params, xb)[0]
    return logits[0] if single else logits


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    z = np.exp(logits - logits.max(axis=-1, keepdims=True))
    return z / z.sum(axis=-1, keepdims=True)


def losses(logits: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Per-row cross-entropy for a batch of logits."""
    labels = np.asarray(labels)
    k = logits.shape[-1]
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"labels must lie in [0, {k})")
    return -log_softmax(logits)[np.arange(labels.size), labels]


def loss(logits, label: int) -> float:
    """Softmax cross-entropy of a single logit vector at ``label``."""
    logits = np.asarray(logits, dtype=np.float64)
    if not 0 <= label < logits.size:
        raise ValueError(f"label {label} out of range for {logits.size} classes")
    return float(-log_softmax(logits)[label])


SPLITS = ("train", "validation", "test")


@dataclass
class LabeledDataset:
    features: np.ndarray
    labels: np.ndarray
    split: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        self.features = np.ascontiguousarray(self.features, dtype=np.float64)
        self.labels = np.ascontiguousarray(self.labels, dtype=np.int64)
        n = self.labels.size
        if self.features.ndim != 2 or self.features.shape[0] != n:
            raise DimensionError("features must be an n x input_dim matrix matching labels")
        if not self.split:
            self.split = {"train": np.arange(n)}
        self.split = {name: np.asarray(self.split.get(name, []), dtype=np.int64) for name in SPLITS}
        joined = np.concatenate(list(self.split.values()))
        if joined.size != n or np.unique(joined).size != n:
            raise ValueError("splits must be disjoint and cover every index")
        if n and self.labels.min() < 0:
            raise ValueError("labels must be nonnegative class indices")

    @classmethod
    def from_fractions(cls, features, labels, fractions=(0.7, 0.15, 0.15), seed=0) -> "LabeledDataset":
        """Random split with the given train/validation/test fractions."""
        n = len(labels)
        order = np.random.default_rng(seed).permutation(n)
        n_train = int(round(fractions[0] * n))
        n_val = int(round(fractions[1] * n))
        split = {
            "train": np.sort(order[:n_train]),
            "validation": np.sort(order[n_train:n_train + n_val]),
            "test": np.sort(order[n_train + n_val:]),
        }
        return cls(features, labels, split)

    @property
    def num_classes(self) -> int:
        return int(self.labels.max()) + 1 if self.labels.size else 0

    def size(self, name: str = "train") -> int:
        return self.split[name].size

    def subset(self, name: str) -> tuple[np.ndarray, np.ndarray]:
        if name not in self.split:
            raise KeyError(f"unknown split {name!r}")
        idx = self.split[name]
        return self.features[idx], self.labels[idx]


def mean_loss(spec: NetworkSpec, params: ParamVector, dataset: LabeledDataset, split: str = "train") -> float:
    x, y = dataset.subset(split)
    if y.size == 0:
        raise ValueError(f"split {split!r} is empty")
    return batch_mean_loss(spec, params, x, y)


def batch_mean_loss(spec: NetworkSpec, params: ParamVector, x, y) -> float:
    check_params(spec, params)
    xb, _ = _as_batch(spec, x)
    y = np.asarray(y, dtype=np.int64)
    if y.size == 0:
        raise ValueError("empty batch")
    return float(np.mean(losses(forward_cache(spec, params, xb)[0], y)))
