"""Binary run artifacts: training checkpoints and mask-history files.

Everything is little-endian; mask bits are packed LSB-first.  A checkpoint
carries the full resumable state (dense weights, momentum buffer, mask, step
counter and the shuffle-stream state), so split training reproduces a
straight run bit for bit.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .metrics import MaskHistory
from .nets import LayerSpec, MLPModel
from .pruning import Mask

CHECKPOINT_MAGIC = b"DPFC"
MASKFILE_MAGIC = b"DPFM"
VERSION = 1


@dataclass
class Checkpoint:
    layers: list[LayerSpec]
    params: np.ndarray
    momentum: np.ndarray
    mask_bits: np.ndarray
    step: int
    seed: int
    next_epoch: int


def _write_array(fh, arr: np.ndarray) -> None:
    fh.write(struct.pack("<Q", arr.size))
    fh.write(arr.astype("<f8").tobytes())


def _read_array(fh) -> np.ndarray:
    (n,) = struct.unpack("<Q", fh.read(8))
    return np.frombuffer(fh.read(8 * n), dtype="<f8").copy()


def _write_bits(fh, bits: np.ndarray) -> None:
    fh.write(struct.pack("<Q", bits.size))
    fh.write(np.packbits(bits.astype(np.uint8), bitorder="little").tobytes())


def _read_bits(fh) -> np.ndarray:
    (n,) = struct.unpack("<Q", fh.read(8))
    packed = np.frombuffer(fh.read((n + 7) // 8), dtype=np.uint8)
    return np.unpackbits(packed, count=n, bitorder="little").astype(bool)


def _layer_to_dict(spec: LayerSpec) -> dict:
    return {
        "in_dim": spec.in_dim,
        "out_dim": spec.out_dim,
        "activation": spec.activation,
        "prunable_weights": spec.prunable_weights,
        "prunable_bias": spec.prunable_bias,
    }


def save_checkpoint(path: str | Path, ckpt: Checkpoint) -> None:
    header = {
        "layers": [_layer_to_dict(s) for s in ckpt.layers],
        "step": int(ckpt.step),
        "rng": {"seed": int(ckpt.seed), "next_epoch": int(ckpt.next_epoch)},
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        _write_array(fh, ckpt.params)
        _write_array(fh, ckpt.momentum)
        _write_bits(fh, ckpt.mask_bits)


def load_checkpoint(path: str | Path) -> Checkpoint:
    with open(path, "rb") as fh:
        if fh.read(4) != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        (blob_len,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(blob_len).decode("utf-8"))
        params = _read_array(fh)
        momentum = _read_array(fh)
        bits = _read_bits(fh)
    layers = [LayerSpec(**d) for d in header["layers"]]
    return Checkpoint(
        layers=layers,
        params=params,
        momentum=momentum,
        mask_bits=bits,
        step=int(header["step"]),
        seed=int(header["rng"]["seed"]),
        next_epoch=int(header["rng"]["next_epoch"]),
    )


def model_from_checkpoint(ckpt: Checkpoint) -> MLPModel:
    return MLPModel(ckpt.layers, ckpt.params.copy())


def mask_from_checkpoint(ckpt: Checkpoint) -> Mask:
    return Mask(ckpt.mask_bits.copy(), MLPModel(ckpt.layers, ckpt.params.copy()).prunable)


def save_mask_history(path: str | Path, history: MaskHistory) -> None:
    events = list(history)
    if not events:
        raise ValueError("cannot save an empty mask history")
    prunable = events[0][1].prunable
    with open(path, "wb") as fh:
        fh.write(MASKFILE_MAGIC)
        fh.write(struct.pack("<I", VERSION))
        _write_bits(fh, prunable)
        fh.write(struct.pack("<Q", len(events)))
        for step, mask in events:
            fh.write(struct.pack("<Q", step))
            _write_bits(fh, mask.bits)


def load_mask_history(path: str | Path) -> MaskHistory:
    with open(path, "rb") as fh:
        if fh.read(4) != MASKFILE_MAGIC:
            raise ValueError(f"{path}: not a mask history file")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != VERSION:
            raise ValueError(f"{path}: unsupported mask file version {version}")
        prunable = _read_bits(fh)
        (n_events,) = struct.unpack("<Q", fh.read(8))
        history = MaskHistory()
        for _ in range(n_events):
            (step,) = struct.unpack("<Q", fh.read(8))
            bits = _read_bits(fh)
            history.record(int(step), Mask(bits, prunable.copy()))
    return history
