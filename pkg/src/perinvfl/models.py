"""MLP featurizer + linear head: initialization, forward pass, risk, accuracy.

The learning model is a feature extractor (hidden linear layers with relu)
followed by a linear classifier. Losses use softmax cross-entropy uniformly;
binary tasks carry two logits. All functions are pure and work on either
plain parameter vectors or traced ones, so they differentiate through
:func:`perinvfl.numerics.grad`.
"""

from __future__ import annotations

from dataclasses import dataclass
from math import sqrt
from typing import Sequence

import numpy as np

from . import numerics as nm
from .data import Environment
from .numerics import ParamVector, Tensor, build_layout


@dataclass(frozen=True)
class ModelArch:
    input_dim: int
    hidden_dims: tuple[int, ...] = (390, 390)
    num_classes: int = 2
    activation: str = "relu"

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(d) for d in self.hidden_dims))
        if self.input_dim < 1 or self.num_classes < 1:
            raise ValueError("input_dim and num_classes must be positive")
        if not self.hidden_dims or any(d < 1 for d in self.hidden_dims):
            raise ValueError("hidden_dims must be non-empty positive integers")
        if self.activation != "relu":
            raise ValueError(f"unsupported activation {self.activation!r}")

    @property
    def widths(self) -> tuple[int, ...]:
        return (self.input_dim,) + self.hidden_dims + (self.num_classes,)


@dataclass(frozen=True)
class Batch:
    inputs: Tensor
    labels: np.ndarray

    def __post_init__(self):
        labels = np.asarray(self.labels, dtype=np.int64)
        object.__setattr__(self, "labels", labels)
        if self.inputs.shape[0] < 1:
            raise ValueError("batch must contain at least one sample")
        if labels.shape != (self.inputs.shape[0],):
            raise ValueError("labels must be one per sample")


def param_layout(arch: ModelArch):
    """Layout of all linear layers, packed w0, b0, w1, b1, ..."""
    widths = arch.widths
    shapes = []
    for k in range(len(widths) - 1):
        shapes.append((f"w{k}", (widths[k], widths[k + 1])))
        shapes.append((f"b{k}", (widths[k + 1],)))
    return build_layout(shapes)


def init_params(arch: ModelArch, seed: int) -> ParamVector:
    """Xavier-uniform weights (+-sqrt(6/(fan_in+fan_out))), zero biases."""
    layout = param_layout(arch)
    rng = np.random.default_rng(seed)
    data = np.zeros(nm.layout_size(layout))
    for entry in layout:
        if entry.name.startswith("w"):
            fan_in, fan_out = entry.shape
            bound = sqrt(6.0 / (fan_in + fan_out))
            size = fan_in * fan_out
            data[entry.offset : entry.offset + size] = rng.uniform(-bound, bound, size)
    return ParamVector(data, layout)


def xavier_bound(fan_in: int, fan_out: int) -> float:
    return sqrt(6.0 / (fan_in + fan_out))


def forward(params, arch: ModelArch, inputs):
    """Logits [m, num_classes] for inputs [m, input_dim].

    `params` may be a ParamVector (plain evaluation) or a traced parameter
    object (gradient evaluation); `inputs` a Tensor or array.
    """
    x = inputs.data if isinstance(inputs, Tensor) else inputs
    n_layers = len(arch.widths) - 1
    h = x
    for k in range(n_layers - 1):
        h = nm.relu(nm.add(nm.matmul(h, params.tensor(f"w{k}")), params.tensor(f"b{k}")))
    last = n_layers - 1
    return nm.add(nm.matmul(h, params.tensor(f"w{last}")), params.tensor(f"b{last}"))


def cross_entropy_mean(logits, labels):
    """Mean softmax cross-entropy; differentiable in the logits."""
    m = len(np.asarray(labels))
    per_sample = nm.sub(nm.logsumexp_rows(logits), nm.gather_rows(logits, labels))
    return nm.mul(nm.sum_all(per_sample), 1.0 / m)


def risk(params, arch: ModelArch, env: Environment):
    """Mean cross-entropy of the model over every sample in the environment."""
    if env.n < 1:
        raise ValueError("environment must be non-empty")
    return cross_entropy_mean(forward(params, arch, env.inputs), env.labels)


def accuracy(params: ParamVector, arch: ModelArch, env: Environment) -> float:
    """Fraction of argmax-correct predictions; ties resolve to the lower class."""
    if env.n < 1:
        raise ValueError("environment must be non-empty")
    logits = forward(params, arch, env.inputs)
    preds = np.argmax(logits, axis=1)
    return float(np.mean(preds == env.labels))


def subsample(env: Environment, size: int, rng: np.random.Generator) -> Environment:
    """Uniform without-replacement minibatch of an environment."""
    if size >= env.n:
        return env
    idx = rng.choice(env.n, size=size, replace=False)
    return Environment(env.context_id, Tensor(env.inputs.data[idx]), env.labels[idx], env.gen_params)
