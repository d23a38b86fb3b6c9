import os
import struct
import unittest
from dataclasses import replace
from unittest import mock

import numpy as np
import pytest

from checkpoint import (
    FORMAT_VERSION,
    MAGIC,
    BadMagicError,
    CheckpointWriteError,
    ShapeMismatchError,
    TruncatedCheckpointError,
    VersionMismatchError,
    decode_checkpoint,
    encode_checkpoint,
    load_checkpoint,
    save_checkpoint,
)
from network import ModelSpec, build_model, forward
from tensor_engine import EVAL, TRAIN, Tensor
from trainer import TrainConfig, TrainState

SPEC = ModelSpec(base_channels=2, channel_cap=8)


def trained_model(seed=0):
    params = build_model(SPEC, seed)
    x = Tensor(np.random.default_rng(seed).uniform(size=(2, 1, 16, 16)))
    forward(params, SPEC, x, TRAIN, rng=np.random.default_rng(seed))
    return params


class TestCheckpointRoundTrip(unittest.TestCase):

    def setUp(self):
        self.params = trained_model()

    def test_tensors_survive_bit_for_bit(self):
        restored, spec, state = decode_checkpoint(encode_checkpoint(self.params, SPEC))
        self.assertEqual(spec, SPEC)
        self.assertIsNone(state)
        self.assertTrue(restored.stats_ready)
        self.assertEqual(list(restored), list(self.params))
        for name in self.params:
            np.testing.assert_array_equal(restored[name].data, self.params[name].data)

    def test_restored_model_denoises_identically(self):
        restored, spec, _ = decode_checkpoint(encode_checkpoint(self.params, SPEC))
        x = Tensor(np.random.default_rng(1).uniform(size=(1, 1, 16, 16)))
        np.testing.assert_array_equal(forward(self.params, SPEC, x, EVAL).data, forward(restored, spec, x, EVAL).data)

    def test_train_state_round_trip(self):
        cfg = TrainConfig()
        state = TrainState.initial(self.params, cfg)
        state.epoch, state.step, state.best_val_loss, state.epochs_since_improvement = 4, 17, 0.0125, 2
        state.m["head.bias"][...] = 0.5
        state.rng.random(3)
        _, _, restored = decode_checkpoint(encode_checkpoint(self.params, SPEC, state))
        self.assertEqual((restored.epoch, restored.step, restored.epochs_since_improvement), (4, 17, 2))
        self.assertEqual(restored.best_val_loss, 0.0125)
        self.assertEqual(restored.best_train_loss, float("inf"))
        np.testing.assert_array_equal(restored.m["head.bias"], 0.5)
        self.assertEqual(sorted(restored.v), sorted(self.params.learnable_names()))
        np.testing.assert_array_equal(restored.rng.random(4), state.rng.random(4))

    def test_encoding_is_deterministic(self):
        self.assertEqual(encode_checkpoint(self.params, SPEC), encode_checkpoint(self.params, SPEC))


class TestCheckpointErrors(unittest.TestCase):

    def setUp(self):
        self.blob = encode_checkpoint(trained_model(), SPEC)

    def test_bad_magic(self):
        with self.assertRaises(BadMagicError):
            decode_checkpoint(b"XXXX" + self.blob[4:])

    def test_version_mismatch(self):
        patched = MAGIC + struct.pack("<H", FORMAT_VERSION + 1) + self.blob[6:]
        with self.assertRaises(VersionMismatchError):
            decode_checkpoint(patched)

    def test_every_truncation_is_reported(self):
        for cut in (0, 3, 5, 20, len(self.blob) // 2, len(self.blob) - 1):
            with self.assertRaises(TruncatedCheckpointError, msg=f"cut at {cut}"):
                decode_checkpoint(self.blob[:cut])

    def test_wrong_expected_spec_names_the_parameter(self):
        wider = replace(SPEC, base_channels=4, channel_cap=16)
        with self.assertRaises(ShapeMismatchError) as ctx:
            decode_checkpoint(self.blob, wider)
        self.assertIn("parameter dec1.", str(ctx.exception))


def test_save_and_load_file(tmp_path):
    params = trained_model()
    path = str(tmp_path / "model.fpdn")
    save_checkpoint(path, params, SPEC)
    assert os.listdir(tmp_path) == ["model.fpdn"]
    with open(path, "rb") as f:
        assert f.read(4) == MAGIC
    restored, spec, _ = load_checkpoint(path, SPEC)
    assert spec == SPEC
    np.testing.assert_array_equal(restored["head.weight"].data, params["head.weight"].data)


def test_failed_write_leaves_previous_checkpoint(tmp_path):
    path = str(tmp_path / "model.fpdn")
    save_checkpoint(path, trained_model(0), SPEC)
    with open(path, "rb") as f:
        before = f.read()
    with mock.patch("checkpoint.os.replace", side_effect=OSError("disk full")):
        with pytest.raises(CheckpointWriteError):
            save_checkpoint(path, trained_model(1), SPEC)
    with open(path, "rb") as f:
        assert f.read() == before
    assert os.listdir(tmp_path) == ["model.fpdn"]


if __name__ == '__main__':
    unittest.main()
