"""Flat-parameter MLP with manual forward/backward passes and hooked SGD.

Models live as flat float64 vectors so that attacks and defenses can treat
them as points in R^d. The layer map records where each weight and bias
block sits inside the vector, which is what layer-level strategies (output
layer similarity, layer forcing) key on.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import ConfigurationError, DataError, ShapeError


@dataclass(frozen=True)
class LayerBlocks:
    """Half-open index ranges of one layer's weight/bias blocks in the flat vector."""

    weights: tuple[int, int]
    biases: tuple[int, int]

    @property
    def span(self) -> tuple[int, int]:
        return (self.weights[0], self.biases[1])


@dataclass(frozen=True)
class ModelArch:
    """MLP shape: layer_sizes = (input_dim, hidden dims..., class_count).

    Hidden layers use rectified-linear activations; the output layer is linear.
    """

    layer_sizes: tuple[int, ...]

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.layer_sizes)
        object.__setattr__(self, "layer_sizes", sizes)
        if len(sizes) < 2:
            raise ConfigurationError(
                f"architecture needs at least an input and output size, got {sizes}"
            )
        if any(s < 1 for s in sizes):
            raise ConfigurationError(f"layer sizes must all be >= 1, got {sizes}")

    @property
    def input_dim(self) -> int:
        return self.layer_sizes[0]

    @property
    def class_count(self) -> int:
        return self.layer_sizes[-1]

    @property
    def param_count(self) -> int:
        return sum(i * o + o for i, o in zip(self.layer_sizes, self.layer_sizes[1:]))

    def layer_blocks(self) -> tuple[LayerBlocks, ...]:
        blocks = []
        pos = 0
        for d_in, d_out in zip(self.layer_sizes, self.layer_sizes[1:]):
            w = (pos, pos + d_in * d_out)
            b = (w[1], w[1] + d_out)
            pos = b[1]
            blocks.append(LayerBlocks(weights=w, biases=b))
        return tuple(blocks)


@dataclass
class ParamVec:
    """Flat parameter vector plus the block layout of its layers.

    Arithmetic returns new vectors; nothing here mutates in place.
    """

    values: np.ndarray
    layer_map: tuple[LayerBlocks, ...]

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 1:
            raise ShapeError(f"parameter vector must be 1-D, got shape {values.shape}")
        end = 0
        for blk in self.layer_map:
            if blk.weights[0] != end or blk.biases[0] != blk.weights[1]:
                raise ShapeError("layer map blocks must be contiguous and ordered")
            end = blk.biases[1]
        if end != values.size:
            raise ShapeError(
                f"layer map covers {end} entries but vector has {values.size}"
            )
        self.values = values

    def __len__(self) -> int:
        return self.values.size

    def copy(self) -> "ParamVec":
        return ParamVec(self.values.copy(), self.layer_map)

    def norm(self) -> float:
        return float(np.linalg.norm(self.values))

    def block(self, layer_index: int) -> np.ndarray:
        """View of one layer's full (weights + biases) slice."""
        blk = self.layer_map[layer_index]
        return self.values[blk.span[0] : blk.span[1]]

    def __add__(self, other: "ParamVec") -> "ParamVec":
        _check_compatible(self, other)
        return ParamVec(self.values + other.values, self.layer_map)

    def __sub__(self, other: "ParamVec") -> "ParamVec":
        _check_compatible(self, other)
        return ParamVec(self.values - other.values, self.layer_map)

    def __mul__(self, scalar: float) -> "ParamVec":
        return ParamVec(self.values * float(scalar), self.layer_map)

    __rmul__ = __mul__


def _check_compatible(a: ParamVec, b: ParamVec) -> None:
    if a.values.size != b.values.size:
        raise ShapeError(f"vector lengths differ: {a.values.size} vs {b.values.size}")


@dataclass
class Batch:
    """A training batch: row-major inputs and integer class labels."""

    inputs: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.inputs.ndim != 2:
            raise ShapeError(f"batch inputs must be 2-D, got shape {self.inputs.shape}")
        if self.labels.ndim != 1 or self.inputs.shape[0] != self.labels.shape[0]:
            raise ShapeError(
                f"{self.inputs.shape[0]} input rows vs {self.labels.shape} labels"
            )


def zero_params(arch: ModelArch) -> ParamVec:
    return ParamVec(np.zeros(arch.param_count), arch.layer_blocks())


def init_model(arch: ModelArch, seed) -> ParamVec:
    """Deterministic init: weights uniform in +-1/sqrt(d_in), biases zero."""
    rng = np.random.default_rng(seed)
    values = np.zeros(arch.param_count)
    for (d_in, d_out), blk in zip(
        zip(arch.layer_sizes, arch.layer_sizes[1:]), arch.layer_blocks()
    ):
        bound = 1.0 / np.sqrt(d_in)
        values[blk.weights[0] : blk.weights[1]] = rng.uniform(
            -bound, bound, d_in * d_out
        )
    return ParamVec(values, arch.layer_blocks())


def _unpack(params: ParamVec, arch: ModelArch):
    if params.values.size != arch.param_count:
        raise ShapeError(
            f"vector has {params.values.size} entries, arch wants {arch.param_count}"
        )
    layers = []
    for (d_in, d_out), blk in zip(
        zip(arch.layer_sizes, arch.layer_sizes[1:]), arch.layer_blocks()
    ):
        W = params.values[blk.weights[0] : blk.weights[1]].reshape(d_in, d_out)
        b = params.values[blk.biases[0] : blk.biases[1]]
        layers.append((W, b))
    return layers


def forward(params: ParamVec, arch: ModelArch, inputs) -> np.ndarray:
    """Logits for a batch of inputs. Pure function of its arguments."""
    X = np.atleast_2d(np.asarray(inputs, dtype=np.float64))
    if X.shape[1] != arch.input_dim:
        raise ShapeError(f"inputs have width {X.shape[1]}, arch wants {arch.input_dim}")
    layers = _unpack(params, arch)
    h = X
    last = len(layers) - 1
    for i, (W, b) in enumerate(layers):
        z = h @ W + b
        h = np.maximum(z, 0.0) if i < last else z
    return h


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    m = logits.max(axis=1, keepdims=True)
    shifted = logits - m
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def ce_loss(params: ParamVec, arch: ModelArch, batch: Batch) -> float:
    """Mean softmax cross-entropy without the gradient."""
    _check_batch(arch, batch)
    logp = _log_softmax(forward(params, arch, batch.inputs))
    return float(-logp[np.arange(batch.labels.size), batch.labels].mean())


def _check_batch(arch: ModelArch, batch: Batch) -> None:
    if batch.labels.size == 0:
        raise DataError("batch is empty")
    if batch.labels.min() < 0 or batch.labels.max() >= arch.class_count:
        raise DataError(
            f"labels must lie in [0, {arch.class_count}), got "
            f"[{batch.labels.min()}, {batch.labels.max()}]"
        )


def loss_and_grad(
    params: ParamVec, arch: ModelArch, batch: Batch
) -> tuple[float, ParamVec]:
    """Mean cross-entropy over the batch and its gradient w.r.t. every parameter."""
    _check_batch(arch, batch)
    X = np.asarray(batch.inputs, dtype=np.float64)
    if X.shape[1] != arch.input_dim:
        raise ShapeError(f"inputs have width {X.shape[1]}, arch wants {arch.input_dim}")
    y = batch.labels
    n = y.size

    layers = _unpack(params, arch)
    last = len(layers) - 1
    activations = [X]  # activations[i] is the input to layer i
    pre = []
    h = X
    for i, (W, b) in enumerate(layers):
        z = h @ W + b
        pre.append(z)
        h = np.maximum(z, 0.0) if i < last else z
        activations.append(h)

    logits = activations[-1]
    logp = _log_softmax(logits)
    loss = float(-logp[np.arange(n), y].mean())

    probs = np.exp(logp)
    delta = probs
    delta[np.arange(n), y] -= 1.0
    delta /= n

    grad = np.zeros(arch.param_count)
    blocks = arch.layer_blocks()
    for i in range(last, -1, -1):
        W, _ = layers[i]
        blk = blocks[i]
        grad[blk.weights[0] : blk.weights[1]] = (activations[i].T @ delta).ravel()
        grad[blk.biases[0] : blk.biases[1]] = delta.sum(axis=0)
        if i > 0:
            delta = (delta @ W.T) * (pre[i - 1] > 0)

    return loss, ParamVec(grad, blocks)


def sgd_train(
    params: ParamVec,
    arch: ModelArch,
    dataset,
    *,
    epochs: int,
    lr: float,
    batch_size: int,
    seed,
    per_batch_hook: Optional[Callable[[ParamVec], ParamVec]] = None,
    max_batches: Optional[int] = None,
) -> ParamVec:
    """Mini-batch SGD over `dataset` (anything with .features and .labels).

    The shuffle order is derived from `seed`, so results are deterministic.
    `per_batch_hook` is applied to the parameter vector after every batch
    step; it is the single extension point used to constrain training to a
    region of the parameter space. `max_batches`, when given, caps the total
    number of batch steps across all epochs.
    """
    if lr <= 0:
        raise ConfigurationError(f"learning rate must be positive, got {lr}")
    if batch_size < 1:
        raise ConfigurationError(f"batch size must be >= 1, got {batch_size}")
    n = len(dataset.labels)
    if n == 0:
        raise DataError("cannot train on an empty dataset")

    rng = np.random.default_rng(seed)
    features = np.asarray(dataset.features, dtype=np.float64)
    labels = np.asarray(dataset.labels, dtype=np.int64)

    current = params
    steps = 0
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            if max_batches is not None and steps >= max_batches:
                return current
            take = order[start : start + batch_size]
            batch = Batch(features[take], labels[take])
            _, grad = loss_and_grad(current, arch, batch)
            current = current - lr * grad
            if per_batch_hook is not None:
                current = per_batch_hook(current)
            steps += 1
    return current


def l2_distance(a: ParamVec, b: ParamVec) -> float:
    """Euclidean distance between two parameter vectors of equal length."""
    _check_compatible(a, b)
    return float(np.linalg.norm(a.values - b.values))


def project_to_ball(m: ParamVec, center: ParamVec, radius: float) -> ParamVec:
    """Project m onto the closed L2 ball of `radius` around `center`.

    Points already inside are returned unchanged.
    """
    if radius < 0:
        raise ConfigurationError(f"radius must be >= 0, got {radius}")
    _check_compatible(m, center)
    diff = m.values - center.values
    dist = float(np.linalg.norm(diff))
    if dist <= radius:
        return m
    return ParamVec(center.values + diff * (radius / dist), m.layer_map)
