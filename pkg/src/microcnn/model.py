"""Sequential container, the malaria reference network and parameter accounting."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .layers import (BatchNorm, Conv2D, Dense, Dropout, Flatten, Layer,
                     MaxPool2D, Softmax)
from .optim import AdamState, LossValue, adam_step, cross_entropy, softmax_xent_backward
from .tensor import Rng, ShapeError

INPUT_SHAPE = (64, 64, 3)


class Sequential:
    """An ordered stack of layers trained with one Adam state per parameter.

    Construction builds every layer for ``input_shape`` (per sample, without
    the batch axis) and checks that adjacent shapes are compatible.
    """

    def __init__(self, input_shape: Sequence[int], layers: Sequence[Layer],
                 rng: Rng | None = None, learning_rate: float = 0.001,
                 meta: dict | None = None):
        self.input_shape = tuple(int(d) for d in input_shape)
        self.layers = list(layers)
        self.rng = rng if rng is not None else Rng(0)
        self.meta = dict(meta or {})
        names = [layer.name for layer in self.layers]
        if len(set(names)) != len(names):
            raise ValueError(f"layer names must be unique: {names}")
        self.shapes = []
        shape = self.input_shape
        for layer in self.layers:
            layer.build(shape, rng)
            try:
                shape = layer.output_shape(shape)
            except ShapeError as exc:
                raise ShapeError(f"layer {layer.name!r}: {exc}") from None
            self.shapes.append(shape)
        if self.layers:
            # nothing upstream of the first layer consumes its input gradient
            self.layers[0].needs_input_grad = False
        self.adam = {
            (layer.name, key): AdamState.like(p, alpha=learning_rate)
            for layer in self.layers for key, p in layer.params.items()
        }

    @property
    def learning_rate(self) -> float:
        return next(iter(self.adam.values())).alpha if self.adam else 0.0

    @learning_rate.setter
    def learning_rate(self, value: float):
        for state in self.adam.values():
            state.alpha = value

    def __getitem__(self, name: str) -> Layer:
        for layer in self.layers:
            if layer.name == name:
                return layer
        raise KeyError(name)

    def forward(self, x: np.ndarray, training: bool = False,
                hook: Callable[[Layer, np.ndarray], None] | None = None) -> np.ndarray:
        if tuple(x.shape[1:]) != self.input_shape:
            raise ShapeError(f"model expects input [N, {', '.join(map(str, self.input_shape))}]"
                             f", got {list(x.shape)}")
        for layer in self.layers:
            try:
                x = layer.forward(x, training=training, rng=self.rng)
            except ShapeError as exc:
                raise ShapeError(f"layer {layer.name!r}: {exc}") from None
            if hook is not None:
                hook(layer, x)
        return x

    def backward(self, grad: np.ndarray, skip_last: bool = False) -> np.ndarray:
        layers = self.layers[:-1] if skip_last else self.layers
        for layer in reversed(layers):
            grad = layer.backward(grad)
        return grad

    def zero_grad(self):
        for layer in self.layers:
            layer.zero_grad()

    def step(self):
        for layer in self.layers:
            for key, p in layer.params.items():
                adam_step(p, layer.grads[key], self.adam[(layer.name, key)])

    def named_tensors(self) -> list[tuple[str, np.ndarray]]:
        return [(f"{layer.name}.{key}", t)
                for layer in self.layers for key, t in layer.state().items()]


def train_step(model: Sequential, batch_x: np.ndarray, batch_onehot: np.ndarray,
               return_probs: bool = False):
    """Forward, loss, backward and one Adam update; returns the pre-update loss
    (and the train-mode probabilities when ``return_probs`` is set).

    The model must end in a :class:`Softmax` layer; its backward pass is
    fused with the cross-entropy gradient.
    """
    if not isinstance(model.layers[-1], Softmax):
        raise ValueError("train_step needs a model whose last layer is Softmax")
    model.zero_grad()
    probs = model.forward(batch_x, training=True)
    loss = cross_entropy(probs, batch_onehot)
    model.backward(softmax_xent_backward(probs, batch_onehot), skip_last=True)
    model.step()
    return (loss, probs) if return_probs else loss


def build_malaria_net(rng: Rng | None = None, dropout_rate: float = 0.2,
                      learning_rate: float = 0.001, classes: int = 2) -> Sequential:
    """Two conv blocks and two dense blocks, as in the reference architecture.

    Each conv block is conv(32, 3x3, stride 1) + ReLU, 2x2 max pool, batch
    norm, dropout.  Each dense block is dense + ReLU, batch norm, dropout.
    """
    rng = rng if rng is not None else Rng(0)
    layers = [
        Conv2D(32, 3, 1, activation="relu", name="conv1"),
        MaxPool2D(2, name="pool1"),
        BatchNorm(name="bn1"),
        Dropout(dropout_rate, name="drop1"),
        Conv2D(32, 3, 1, activation="relu", name="conv2"),
        MaxPool2D(2, name="pool2"),
        BatchNorm(name="bn2"),
        Dropout(dropout_rate, name="drop2"),
        Flatten(name="flatten"),
        Dense(512, activation="relu", name="dense1"),
        BatchNorm(name="bn3"),
        Dropout(dropout_rate, name="drop3"),
        Dense(256, activation="relu", name="dense2"),
        BatchNorm(name="bn4"),
        Dropout(dropout_rate, name="drop4"),
        Dense(classes, name="dense3"),
        Softmax(name="softmax"),
    ]
    return Sequential(INPUT_SHAPE, layers, rng=rng, learning_rate=learning_rate)


def parameter_count(model: Sequential) -> int:
    return sum(layer.param_count() for layer in model.layers)


def trainable_count(model: Sequential) -> int:
    return sum(p.size for layer in model.layers for p in layer.params.values())


@dataclass
class SummaryRow:
    layer_name: str
    output_shape: tuple
    param_count: int


def summary(model: Sequential) -> list[SummaryRow]:
    """One row per layer plus a trailing ``Total`` row."""
    rows = [SummaryRow(f"{layer.name} ({type(layer).__name__})", (None, *shape),
                       layer.param_count())
            for layer, shape in zip(model.layers, model.shapes)]
    rows.append(SummaryRow("Total", (), sum(r.param_count for r in rows)))
    return rows


def format_summary(model: Sequential) -> str:
    rows = summary(model)
    body, total = rows[:-1], rows[-1]
    lines = [f"{'Layer (type)':<28}{'Output Shape':<24}{'Param #':>12}", "=" * 64]
    for r in body:
        shape = "(" + ", ".join("None" if d is None else str(d) for d in r.output_shape) + ")"
        lines.append(f"{r.layer_name:<28}{shape:<24}{r.param_count:>12,}")
    lines.append("=" * 64)
    trainable = trainable_count(model)
    lines.append(f"Total params: {total.param_count:,}")
    lines.append(f"Trainable params: {trainable:,}")
    lines.append(f"Non-trainable params: {total.param_count - trainable:,}")
    return "\n".join(lines)


def predict_proba(model: Sequential, x: np.ndarray, batch_size: int = 64) -> np.ndarray:
    """Inference-mode probabilities, computed in chunks of ``batch_size``."""
    out = [model.forward(x[i:i + batch_size]) for i in range(0, len(x), batch_size)]
    return np.concatenate(out, axis=0) if out else np.zeros((0, 0), dtype=np.float32)


def expected_shape_chain(model: Sequential) -> list[tuple[int, ...]]:
    """Distinct consecutive per-sample shapes through the network."""
    chain = []
    for s in model.shapes:
        if not chain or chain[-1] != s:
            chain.append(s)
    return chain

