import numpy as np
import pytest

from dpflab import MaskHistory, init_model, make_mlp_specs
from dpflab.checkpoint import (
    Checkpoint,
    load_checkpoint,
    load_mask_history,
    mask_from_checkpoint,
    model_from_checkpoint,
    save_checkpoint,
    save_mask_history,
)
from dpflab.pruning import Mask


def sample_checkpoint():
    model = init_model(make_mlp_specs([3, 5, 2]), seed=0)
    rng = np.random.default_rng(1)
    bits = np.where(model.prunable, rng.random(model.n_params) < 0.5, True)
    return model, Checkpoint(
        layers=model.layers,
        params=rng.standard_normal(model.n_params),
        momentum=rng.standard_normal(model.n_params),
        mask_bits=bits,
        step=1234,
        seed=42,
        next_epoch=7,
    )


class TestCheckpointRoundTrip:
    def test_exact_round_trip(self, tmp_path):
        model, ckpt = sample_checkpoint()
        path = tmp_path / "run.dpfc"
        save_checkpoint(path, ckpt)
        loaded = load_checkpoint(path)
        assert loaded.layers == ckpt.layers
        assert np.array_equal(loaded.params, ckpt.params)
        assert np.array_equal(loaded.momentum, ckpt.momentum)
        assert np.array_equal(loaded.mask_bits, ckpt.mask_bits)
        assert (loaded.step, loaded.seed, loaded.next_epoch) == (1234, 42, 7)

    def test_magic_validated(self, tmp_path):
        path = tmp_path / "junk"
        path.write_bytes(b"NOPE" + b"\x00" * 16)
        with pytest.raises(ValueError, match="checkpoint"):
            load_checkpoint(path)

    def test_model_and_mask_reconstruction(self, tmp_path):
        model, ckpt = sample_checkpoint()
        path = tmp_path / "run.dpfc"
        save_checkpoint(path, ckpt)
        loaded = load_checkpoint(path)
        rebuilt = model_from_checkpoint(loaded)
        assert rebuilt.n_params == model.n_params
        mask = mask_from_checkpoint(loaded)
        assert np.array_equal(mask.bits, ckpt.mask_bits)

    def test_save_is_deterministic(self, tmp_path):
        _, ckpt = sample_checkpoint()
        a, b = tmp_path / "a", tmp_path / "b"
        save_checkpoint(a, ckpt)
        save_checkpoint(b, ckpt)
        assert a.read_bytes() == b.read_bytes()


class TestMaskHistoryFile:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(2)
        prunable = rng.random(17) < 0.8
        history = MaskHistory()
        for i in range(5):
            bits = np.where(prunable, rng.random(17) < 0.5, True)
            history.record(i * 16, Mask(bits, prunable))
        path = tmp_path / "masks.bin"
        save_mask_history(path, history)
        loaded = load_mask_history(path)
        assert loaded.steps == history.steps
        for (s0, m0), (s1, m1) in zip(history, loaded):
            assert s0 == s1 and m0 == m1

    def test_empty_history_rejected(self, tmp_path):
        with pytest.raises(ValueError, match="empty"):
            save_mask_history(tmp_path / "m.bin", MaskHistory())

    def test_magic_validated(self, tmp_path):
        path = tmp_path / "junk"
        path.write_bytes(b"WHAT" + b"\x00" * 8)
        with pytest.raises(ValueError, match="mask history"):
            load_mask_history(path)
