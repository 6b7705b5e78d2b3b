"""Minimal dense feed-forward network engine with exact backprop.

All arithmetic is float64 and deterministic: the same (seed, layer specs,
batch) always yields bit-identical losses and gradients.  Model parameters
live in one flat vector so that masks, compressors and optimizers can treat
the network as a plain array; layers are views into slices of that vector.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

ACTIVATIONS = ("relu", "identity")


class NumericalFailure(RuntimeError):
    """A forward or backward pass produced non-finite numbers."""


@dataclass(frozen=True)
class LayerSpec:
    """One dense layer: out = act(W @ in + b), W of shape (out_dim, in_dim)."""

    in_dim: int
    out_dim: int
    activation: str = "relu"
    prunable_weights: bool = True
    prunable_bias: bool = False

    def __post_init__(self) -> None:
        if self.in_dim < 1 or self.out_dim < 1:
            raise ValueError(f"layer dims must be >= 1, got {self.in_dim}x{self.out_dim}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}, expected one of {ACTIVATIONS}")

    @property
    def n_weights(self) -> int:
        return self.in_dim * self.out_dim

    @property
    def n_params(self) -> int:
        return self.n_weights + self.out_dim


def make_mlp_specs(dims: Sequence[int], prunable: bool = True) -> list[LayerSpec]:
    """Chain of dense layers for the given width sequence.

    Hidden layers use relu, the output layer identity.  Biases and the final
    layer stay non-prunable (dense) by default; hidden weight matrices are
    prunable when `prunable` is set.
    """
    if len(dims) < 2:
        raise ValueError("need at least input and output widths")
    specs = []
    for i in range(len(dims) - 1):
        last = i == len(dims) - 2
        specs.append(
            LayerSpec(
                in_dim=dims[i],
                out_dim=dims[i + 1],
                activation="identity" if last else "relu",
                prunable_weights=prunable and not last,
                prunable_bias=False,
            )
        )
    return specs


@dataclass
class MLPModel:
    """Layer specs plus the flat parameter vector.

    Layout: per layer, the weight matrix (out_dim, in_dim) flattened row-major,
    followed by the bias vector.  Rows of a weight matrix therefore occupy
    contiguous index ranges, one range per output neuron.
    """

    layers: list[LayerSpec]
    params: np.ndarray
    _offsets: list[int] = field(init=False, repr=False)

    def __post_init__(self) -> None:
        for a, b in zip(self.layers, self.layers[1:]):
            if a.out_dim != b.in_dim:
                raise ValueError(f"layer dims do not chain: {a.out_dim} -> {b.in_dim}")
        offsets = [0]
        for spec in self.layers:
            offsets.append(offsets[-1] + spec.n_params)
        self._offsets = offsets
        if self.params.shape != (offsets[-1],):
            raise ValueError(f"params length {self.params.shape} does not match layout ({offsets[-1]},)")

    @property
    def n_params(self) -> int:
        return self._offsets[-1]

    def weight_slice(self, layer: int) -> slice:
        off = self._offsets[layer]
        return slice(off, off + self.layers[layer].n_weights)

    def bias_slice(self, layer: int) -> slice:
        off = self._offsets[layer] + self.layers[layer].n_weights
        return slice(off, off + self.layers[layer].out_dim)

    def layer_views(self, params: np.ndarray, layer: int) -> tuple[np.ndarray, np.ndarray]:
        """(W, b) views into a flat vector, W of shape (out_dim, in_dim)."""
        spec = self.layers[layer]
        w = params[self.weight_slice(layer)].reshape(spec.out_dim, spec.in_dim)
        b = params[self.bias_slice(layer)]
        return w, b

    @property
    def prunable(self) -> np.ndarray:
        """Boolean flag per coordinate: is this coordinate eligible for pruning."""
        flags = np.zeros(self.n_params, dtype=bool)
        for i, spec in enumerate(self.layers):
            if spec.prunable_weights:
                flags[self.weight_slice(i)] = True
            if spec.prunable_bias:
                flags[self.bias_slice(i)] = True
        return flags

    @property
    def param_layer_ids(self) -> np.ndarray:
        """Layer index per coordinate (weights and bias share the layer id)."""
        ids = np.empty(self.n_params, dtype=np.int64)
        for i in range(len(self.layers)):
            ids[self._offsets[i]:self._offsets[i + 1]] = i
        return ids

    def weight_row_groups(self) -> list[tuple[int, int, slice]]:
        """(layer, row, flat slice) for every row of every prunable weight matrix."""
        groups = []
        for i, spec in enumerate(self.layers):
            if not spec.prunable_weights:
                continue
            base = self._offsets[i]
            for r in range(spec.out_dim):
                groups.append((i, r, slice(base + r * spec.in_dim, base + (r + 1) * spec.in_dim)))
        return groups

    @property
    def in_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def num_classes(self) -> int:
        return self.layers[-1].out_dim


@dataclass(frozen=True)
class Batch:
    """Mini-batch of inputs and integer class labels."""

    inputs: np.ndarray
    labels: np.ndarray

    def __post_init__(self) -> None:
        if self.inputs.ndim != 2:
            raise ValueError("inputs must be a 2-d array [batch, features]")
        if self.labels.shape != (self.inputs.shape[0],):
            raise ValueError("labels must be 1-d and aligned with inputs")
        if self.inputs.shape[0] < 1:
            raise ValueError("batch must hold at least one sample")
        if self.labels.min(initial=0) < 0:
            raise ValueError("labels must be non-negative class ids")

    @property
    def size(self) -> int:
        return self.inputs.shape[0]


def init_model(specs: Sequence[LayerSpec], seed: int) -> MLPModel:
    """Glorot-uniform weights, zero biases, reproducible from the seed."""
    specs = list(specs)
    rng = np.random.default_rng(seed)
    chunks = []
    for spec in specs:
        bound = np.sqrt(6.0 / (spec.in_dim + spec.out_dim))
        w = rng.uniform(-bound, bound, size=(spec.out_dim, spec.in_dim))
        chunks.append(w.ravel())
        chunks.append(np.zeros(spec.out_dim))
    return MLPModel(specs, np.concatenate(chunks))


@dataclass
class ForwardCache:
    """Intermediate activations kept for the matching backward call."""

    params: np.ndarray
    batch: Batch
    layer_inputs: list[np.ndarray]
    preacts: list[np.ndarray]
    logits: np.ndarray


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def forward(model: MLPModel, params: np.ndarray, batch: Batch) -> tuple[float, ForwardCache]:
    """Mean softmax cross-entropy of the batch, plus the backward cache."""
    if params.shape != (model.n_params,):
        raise ValueError(f"params length {params.shape} does not match model ({model.n_params},)")
    if batch.inputs.shape[1] != model.in_dim:
        raise ValueError(f"batch feature dim {batch.inputs.shape[1]} != model input dim {model.in_dim}")
    if batch.labels.max() >= model.num_classes:
        raise ValueError("label id outside the model's class range")

    a = batch.inputs
    layer_inputs, preacts = [], []
    for i, spec in enumerate(model.layers):
        w, b = model.layer_views(params, i)
        z = a @ w.T + b
        layer_inputs.append(a)
        preacts.append(z)
        a = np.maximum(z, 0.0) if spec.activation == "relu" else z
    logits = a
    log_probs = _log_softmax(logits)
    loss = float(-log_probs[np.arange(batch.size), batch.labels].mean())
    if not np.isfinite(loss):
        raise NumericalFailure("non-finite loss in forward pass")
    return loss, ForwardCache(params, batch, layer_inputs, preacts, logits)


def backward(model: MLPModel, params: np.ndarray, batch: Batch, cache: ForwardCache) -> np.ndarray:
    """Exact gradient of the batch loss at `params`, returned dense (every coordinate)."""
    if cache.params is not params and not (
        cache.params.shape == params.shape and np.array_equal(cache.params, params)
    ):
        raise ValueError("stale cache: backward params differ from the forward call")
    if cache.batch is not batch:
        raise ValueError("stale cache: backward batch differs from the forward call")

    n = batch.size
    probs = np.exp(_log_softmax(cache.logits))
    d_act = probs
    d_act[np.arange(n), batch.labels] -= 1.0
    d_act /= n

    grad = np.zeros_like(params)
    for i in reversed(range(len(model.layers))):
        spec = model.layers[i]
        w, _ = model.layer_views(params, i)
        if spec.activation == "relu":
            dz = d_act * (cache.preacts[i] > 0.0)
        else:
            dz = d_act
        grad[model.weight_slice(i)] = (dz.T @ cache.layer_inputs[i]).ravel()
        grad[model.bias_slice(i)] = dz.sum(axis=0)
        if i > 0:
            d_act = dz @ w
    if not np.all(np.isfinite(grad)):
        raise NumericalFailure("non-finite gradient in backward pass")
    return grad


def finite_diff_grad(model: MLPModel, params: np.ndarray, batch: Batch, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient estimate, coordinate by coordinate."""
    if h <= 0:
        raise ValueError("h must be positive")
    grad = np.zeros_like(params)
    work = params.copy()
    for i in range(params.size):
        orig = work[i]
        work[i] = orig + h
        up, _ = forward(model, work, batch)
        work[i] = orig - h
        down, _ = forward(model, work, batch)
        work[i] = orig
        grad[i] = (up - down) / (2.0 * h)
    return grad


def predict_logits(model: MLPModel, params: np.ndarray, inputs: np.ndarray) -> np.ndarray:
    a = inputs
    for i, spec in enumerate(model.layers):
        w, b = model.layer_views(params, i)
        z = a @ w.T + b
        a = np.maximum(z, 0.0) if spec.activation == "relu" else z
    return a


def evaluate(model: MLPModel, params: np.ndarray, inputs: np.ndarray, labels: np.ndarray) -> tuple[float, float]:
    """(mean cross-entropy, top-1 accuracy); argmax ties resolve to the lowest class id."""
    if inputs.shape[0] == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    logits = predict_logits(model, params, inputs)
    log_probs = _log_softmax(logits)
    loss = float(-log_probs[np.arange(inputs.shape[0]), labels].mean())
    pred = logits.argmax(axis=1)  # np.argmax picks the first, i.e. lowest, index on ties
    return loss, float((pred == labels).mean())
