"""Mask-dynamics instrumentation and structured record emission.

All ratios here are computed over prunable coordinates only; non-prunable
coordinates never flip by construction and would just dilute the signal.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import IO, Iterable

import numpy as np

from .pruning import Mask

CSV_HEADER = (
    "step,epoch,lr,train_loss,train_acc,test_loss,test_acc,"
    "sparsity_target,sparsity_achieved,delta,flips,iou"
)
_FIELDS = CSV_HEADER.split(",")
_INT_FIELDS = {"step", "epoch", "flips"}


@dataclass(frozen=True)
class StepRecord:
    step: int
    epoch: int
    lr: float
    train_loss: float
    train_acc: float
    test_loss: float
    test_acc: float
    sparsity_target: float
    sparsity_achieved: float
    delta: float
    flips: int
    iou: float

    def __post_init__(self) -> None:
        if self.flips < 0:
            raise ValueError("flip count cannot be negative")
        for name in ("sparsity_target", "sparsity_achieved", "delta", "iou"):
            v = getattr(self, name)
            if np.isfinite(v) and not (0.0 <= v <= 1.0):
                raise ValueError(f"{name} must lie in [0, 1], got {v}")


class MaskHistory:
    """Masks recorded at each update event, with strictly increasing steps.

    `retention` bounds how many events are kept (oldest dropped first);
    the default keeps everything, which is fine at desk scale.
    """

    def __init__(self, retention: int | None = None):
        if retention is not None and retention < 1:
            raise ValueError("retention must be >= 1 when set")
        self.retention = retention
        self._events: list[tuple[int, Mask]] = []

    def record(self, step: int, mask: Mask) -> None:
        if self._events and step <= self._events[-1][0]:
            raise ValueError("mask history steps must strictly increase")
        self._events.append((step, mask))
        if self.retention is not None and len(self._events) > self.retention:
            del self._events[0]

    def __len__(self) -> int:
        return len(self._events)

    def __iter__(self):
        return iter(self._events)

    @property
    def steps(self) -> list[int]:
        return [s for s, _ in self._events]

    @property
    def masks(self) -> list[Mask]:
        return [m for _, m in self._events]


def _check_pair(a: Mask, b: Mask) -> None:
    if a.d != b.d:
        raise ValueError("mask length mismatch")
    if not np.array_equal(a.prunable, b.prunable):
        raise ValueError("masks disagree on which coordinates are prunable")


def mask_iou(a: Mask, b: Mask) -> float:
    """Intersection over union of the kept prunable coordinates; 1.0 if both empty."""
    _check_pair(a, b)
    p = a.prunable
    inter = int((a.bits & b.bits & p).sum())
    union = int(((a.bits | b.bits) & p).sum())
    return 1.0 if union == 0 else inter / union


def flip_ratio(a: Mask, b: Mask) -> float:
    """Fraction of prunable coordinates whose bit differs between the masks."""
    _check_pair(a, b)
    p = a.prunable
    n = int(p.sum())
    if n == 0:
        return 0.0
    return int(((a.bits != b.bits) & p).sum()) / n


def flip_count(a: Mask, b: Mask) -> int:
    """Number of prunable bits that differ between two masks."""
    _check_pair(a, b)
    return int(((a.bits != b.bits) & a.prunable).sum())


def last_change_curve(history: MaskHistory, epochs: int, steps_per_epoch: int) -> np.ndarray:
    """Per epoch e: fraction of prunable coordinates still flipping strictly after e.

    A coordinate counts for epoch e when some update event later than e flips
    its bit relative to the previous event.  The curve is non-increasing and
    its final entry is 0.
    """
    if len(history) == 0:
        raise ValueError("mask history is empty")
    if epochs < 1 or steps_per_epoch < 1:
        raise ValueError("epochs and steps_per_epoch must be >= 1")
    events = list(history)
    prunable = events[0][1].prunable
    last_change = np.full(prunable.size, -1, dtype=np.int64)
    for (_, prev), (step, cur) in zip(events, events[1:]):
        _check_pair(prev, cur)
        epoch = min(step // steps_per_epoch, epochs - 1)
        changed = (prev.bits != cur.bits) & prunable
        last_change[changed] = np.maximum(last_change[changed], epoch)
    n = int(prunable.sum())
    curve = np.empty(epochs)
    for e in range(epochs):
        curve[e] = int((last_change[prunable] > e).sum()) / n if n else 0.0
    return curve


def _format_value(name: str, value) -> str:
    if name in _INT_FIELDS:
        return str(int(value))
    return f"{float(value):.17g}"  # 17 significant digits round-trip float64 exactly


def emit(records: Iterable[StepRecord], sink: str | Path | IO[str], format: str = "csv") -> None:
    """Write records as CSV (pinned header, exact floats) or as a JSON array."""
    if format not in ("csv", "json"):
        raise ValueError(f"unknown format {format!r}")
    records = list(records)
    own = isinstance(sink, (str, Path))
    fh = open(sink, "w", encoding="utf-8") if own else sink
    try:
        if format == "csv":
            fh.write(CSV_HEADER + "\n")
            for rec in records:
                row = asdict(rec)
                fh.write(",".join(_format_value(name, row[name]) for name in _FIELDS) + "\n")
        else:
            payload = []
            for rec in records:
                row = asdict(rec)
                payload.append({name: (int(row[name]) if name in _INT_FIELDS else float(row[name])) for name in _FIELDS})
            json.dump(payload, fh, indent=1)
            fh.write("\n")
    finally:
        if own:
            fh.close()
