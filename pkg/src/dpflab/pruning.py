"""Masks, sparsity schedules, saliency criteria and compressors.

Sparsity is always measured over prunable coordinates only: non-prunable
coordinates (biases, the final layer) keep mask bit 1 by construction and
never count toward the ratio.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .nets import Batch, MLPModel, backward, forward

logger = logging.getLogger(__name__)

SCOPES = ("global", "layerwise")


@dataclass(frozen=True, eq=False)
class Mask:
    """Binary keep/prune vector aligned with a flat parameter vector."""

    bits: np.ndarray
    prunable: np.ndarray
    sparsity: float = field(init=False)

    def __post_init__(self) -> None:
        bits = np.asarray(self.bits, dtype=bool)
        prunable = np.asarray(self.prunable, dtype=bool)
        if bits.shape != prunable.shape or bits.ndim != 1:
            raise ValueError("bits and prunable flags must be 1-d and aligned")
        if not bits[~prunable].all():
            raise ValueError("non-prunable coordinates must keep bit 1")
        bits.flags.writeable = False
        prunable.flags.writeable = False
        object.__setattr__(self, "bits", bits)
        object.__setattr__(self, "prunable", prunable)
        n_prunable = int(prunable.sum())
        zeros = int((~bits[prunable]).sum()) if n_prunable else 0
        object.__setattr__(self, "sparsity", zeros / n_prunable if n_prunable else 0.0)

    @classmethod
    def all_ones(cls, prunable: np.ndarray) -> "Mask":
        return cls(np.ones(len(prunable), dtype=bool), prunable)

    @property
    def d(self) -> int:
        return self.bits.size

    @property
    def n_prunable(self) -> int:
        return int(self.prunable.sum())

    def intersect(self, other: "Mask") -> "Mask":
        """Elementwise AND; the support can only shrink."""
        if self.d != other.d:
            raise ValueError("mask length mismatch")
        return Mask(self.bits & other.bits, self.prunable)

    def __eq__(self, other: object) -> bool:
        return (
            isinstance(other, Mask)
            and np.array_equal(self.bits, other.bits)
            and np.array_equal(self.prunable, other.prunable)
        )


@dataclass(frozen=True)
class SparsitySchedule:
    """Cubic ramp of the target sparsity from s_i to s_f over `ramp_steps` steps."""

    s_i: float
    s_f: float
    t_0: int = 0
    ramp_steps: int = 1
    update_every: int = 16

    def __post_init__(self) -> None:
        if not (0.0 <= self.s_i <= self.s_f <= 1.0):
            raise ValueError("need 0 <= s_i <= s_f <= 1")
        if self.ramp_steps < 1:
            raise ValueError("ramp_steps must be >= 1")
        if self.update_every < 1:
            raise ValueError("update_every must be >= 1")
        if self.t_0 < 0:
            raise ValueError("t_0 must be >= 0")

    @classmethod
    def fixed(cls, sparsity: float, update_every: int = 16) -> "SparsitySchedule":
        return cls(s_i=sparsity, s_f=sparsity, t_0=0, ramp_steps=1, update_every=update_every)


def sparsity_at(sched: SparsitySchedule, t: int) -> float:
    """Target sparsity at step t: s_i before the ramp, s_f after, cubic in between."""
    if t < 0:
        raise ValueError("step index must be >= 0")
    if t <= sched.t_0:  # clamp so the ramp endpoints are exact, not 1 ulp off
        return sched.s_i
    if t >= sched.t_0 + sched.ramp_steps:
        return sched.s_f
    frac = (t - sched.t_0) / sched.ramp_steps
    return sched.s_f + (sched.s_i - sched.s_f) * (1.0 - frac) ** 3


def _prune_count(target_sparsity: float, n: int) -> int:
    # np.rint rounds half to even; the granularity bound |k/n - s| <= 1/n holds either way.
    return int(np.rint(target_sparsity * n))


def _prune_smallest(values: np.ndarray, candidates: np.ndarray, k: int, bits: np.ndarray) -> None:
    """Clear the k candidate bits of smallest |value|, lower index pruned first on ties."""
    if k <= 0:
        return
    order = np.argsort(np.abs(values[candidates]), kind="stable")
    bits[candidates[order[:k]]] = False


def magnitude_mask(
    params: np.ndarray,
    target_sparsity: float,
    prunable: np.ndarray,
    scope: str = "global",
    layer_ids: np.ndarray | None = None,
) -> Mask:
    """Prune the smallest-magnitude prunable coordinates down to the target ratio.

    Global scope ranks all prunable coordinates together; layerwise applies the
    same ratio within each layer (requires `layer_ids`).  |value| ties are
    broken by pruning the lower index first, so masks are platform-stable.
    """
    if not (0.0 <= target_sparsity <= 1.0):
        raise ValueError("target_sparsity must be in [0, 1]")
    if scope not in SCOPES:
        raise ValueError(f"unknown scope {scope!r}")
    prunable = np.asarray(prunable, dtype=bool)
    bits = np.ones(params.size, dtype=bool)
    if scope == "global":
        candidates = np.flatnonzero(prunable)
        _prune_smallest(params, candidates, _prune_count(target_sparsity, candidates.size), bits)
    else:
        if layer_ids is None:
            raise ValueError("layerwise scope needs layer_ids")
        for lid in np.unique(layer_ids):
            candidates = np.flatnonzero(prunable & (layer_ids == lid))
            _prune_smallest(params, candidates, _prune_count(target_sparsity, candidates.size), bits)
    return Mask(bits, prunable)


def snip_mask(model: MLPModel, params: np.ndarray, batch: Batch, target_sparsity: float) -> Mask:
    """Keep the most gradient-sensitive weights: saliency_i = |params_i * grad_i|.

    Saliency is measured on one mini-batch.  If every prunable saliency is
    zero (e.g. a zero gradient batch) the criterion is uninformative and we
    fall back to magnitude pruning.
    """
    if not (0.0 <= target_sparsity <= 1.0):
        raise ValueError("target_sparsity must be in [0, 1]")
    _, cache = forward(model, params, batch)
    grad = backward(model, params, batch, cache)
    saliency = np.abs(params * grad)
    prunable = model.prunable
    if not saliency[prunable].any():
        logger.warning("all-zero saliency, falling back to magnitude pruning")
        return magnitude_mask(params, target_sparsity, prunable)
    bits = np.ones(params.size, dtype=bool)
    candidates = np.flatnonzero(prunable)
    _prune_smallest(saliency, candidates, _prune_count(target_sparsity, candidates.size), bits)
    return Mask(bits, prunable)


def row_group_l2(params: np.ndarray, model: MLPModel, target_sparsity: float) -> Mask:
    """Structured pruning: zero whole output-neuron rows of smallest l2 norm.

    Rows across all prunable layers compete globally.  Rows are removed in
    ascending norm order (ties by (layer, row)) until the pruned fraction of
    prunable weights reaches the target, overshooting by at most one row.
    Prunable biases, if any, are never touched by this criterion.
    """
    if not (0.0 <= target_sparsity <= 1.0):
        raise ValueError("target_sparsity must be in [0, 1]")
    groups = model.weight_row_groups()
    if not groups:
        raise ValueError("model has no prunable weight matrices")
    prunable = model.prunable
    n_prunable = int(prunable.sum())
    norms = np.array([np.linalg.norm(params[sl]) for _, _, sl in groups])
    order = np.argsort(norms, kind="stable")  # stable sort keeps (layer, row) order on ties
    bits = np.ones(params.size, dtype=bool)
    pruned = 0
    for gi in order:
        if pruned >= target_sparsity * n_prunable:
            break
        sl = groups[gi][2]
        bits[sl] = False
        pruned += sl.stop - sl.start
    return Mask(bits, prunable)


def apply_mask(params: np.ndarray, mask: Mask) -> np.ndarray:
    """Elementwise product with the mask bits; the input is left untouched."""
    if params.shape != (mask.d,):
        raise ValueError(f"params length {params.shape} does not match mask ({mask.d},)")
    return np.where(mask.bits, params, 0.0)


def delta_of(x: np.ndarray, x_hat: np.ndarray) -> float:
    """Relative squared pruning error ||x - x_hat||^2 / ||x||^2, in [0, 1] for masks."""
    if x.shape != x_hat.shape:
        raise ValueError("vectors must have equal length")
    denom = float(np.dot(x, x))
    if denom == 0.0:
        logger.debug("delta_of on a zero vector, returning 0 by convention")
        return 0.0
    diff = x - x_hat
    return float(np.dot(diff, diff) / denom)


class MagnitudeCompressor:
    """Mask compressor keeping the largest-magnitude coordinates."""

    needs_batch = False

    def __init__(self, scope: str = "global"):
        if scope not in SCOPES:
            raise ValueError(f"unknown scope {scope!r}")
        self.scope = scope

    def build_mask(self, params, target_sparsity, prunable, model=None, batch=None) -> Mask:
        layer_ids = model.param_layer_ids if model is not None else None
        return magnitude_mask(params, target_sparsity, prunable, self.scope, layer_ids)


class SnipCompressor:
    """Mask compressor keeping the most gradient-sensitive coordinates."""

    needs_batch = True

    def build_mask(self, params, target_sparsity, prunable, model=None, batch=None) -> Mask:
        if model is None or batch is None:
            raise ValueError("saliency masking needs a model and a batch")
        return snip_mask(model, params, batch, target_sparsity)


class RowGroupCompressor:
    """Structured compressor removing whole output-neuron rows by l2 norm."""

    needs_batch = False

    def build_mask(self, params, target_sparsity, prunable, model=None, batch=None) -> Mask:
        if model is None:
            raise ValueError("row-group masking needs the model layout")
        return row_group_l2(params, model, target_sparsity)


class ScaledSignCompressor:
    """Sign quantizer: prunable block becomes (||x_P||_1 / |P|) * sign(x_P)."""

    needs_batch = False


def compress(
    compressor,
    params: np.ndarray,
    target_sparsity: float,
    prunable: np.ndarray | None = None,
    model: MLPModel | None = None,
    batch: Batch | None = None,
) -> tuple[np.ndarray, Mask | None]:
    """Apply a compressor to a flat vector; masked variants also return the mask."""
    if prunable is None:
        prunable = model.prunable if model is not None else np.ones(params.size, dtype=bool)
    if isinstance(compressor, ScaledSignCompressor):
        out = params.copy()
        block = params[prunable]
        if block.size:
            out[prunable] = (np.abs(block).sum() / block.size) * np.sign(block)
        return out, None
    mask = compressor.build_mask(params, target_sparsity, prunable, model=model, batch=batch)
    return apply_mask(params, mask), mask
