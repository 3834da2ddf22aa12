"""Tests for the .awck checkpoint format."""

import json
import struct

import numpy as np
import pytest

from awaker_moe.errors import CheckpointError, ConfigError
from awaker_moe.model import BaseModel, PlacementMap, attach_adapters
from awaker_moe.selfcheck import randomize_adapters, small_adapter_config, small_model_config
from awaker_moe.tensor import OptimizerState, Tensor
from awaker_moe.training import (
    FORMAT_VERSION,
    MAGIC,
    Checkpoint,
    base_checkpoint,
    load_adapted,
    load_base,
    model_checkpoint,
)


@pytest.fixture
def rng():
    return np.random.default_rng(3)


@pytest.fixture
def base(rng):
    return BaseModel.init(small_model_config(1), rng)


@pytest.fixture
def moe_model(base, rng):
    model = attach_adapters(base, PlacementMap.awaker(), small_adapter_config(), rng)
    randomize_adapters(model, rng)
    return model


@pytest.fixture
def encoded(moe_model):
    return model_checkpoint(moe_model, 2, seed=7, step=5, metrics={"final_loss": 1.5}).to_bytes()


def rewrite_manifest(encoded, edit, replace=None):
    """Re-encode a checkpoint after editing its JSON manifest in place."""
    _, _, length = struct.unpack_from("<8sIQ", encoded)
    manifest = json.loads(encoded[20 : 20 + length])
    if edit is not None:
        edit(manifest)
    body = json.dumps(manifest if replace is None else replace).encode("utf-8")
    return struct.pack("<8sIQ", MAGIC, FORMAT_VERSION, len(body)) + body + encoded[20 + length :]


class TestEncoding:
    """Tests for to_bytes / from_bytes."""

    def test_header(self, encoded):
        """Test magic, version and manifest length lead the file."""
        magic, version, length = struct.unpack_from("<8sIQ", encoded)
        assert magic == MAGIC
        assert version == FORMAT_VERSION
        assert encoded[20 : 20 + length].startswith(b"{")

    def test_save_load_save_is_byte_identical(self, encoded, tmp_path):
        """Test a reload re-encodes to the same bytes."""
        path = tmp_path / "stage2.awck"
        path.write_bytes(encoded)
        assert Checkpoint.load(path).to_bytes() == encoded

    def test_manifest_fields_survive(self, encoded):
        """Test stage, step, seed and metrics are restored."""
        ck = Checkpoint.from_bytes(encoded)
        assert ck.stage == 2
        assert ck.manifest["step"] == 5
        assert ck.manifest["seed"] == 7
        assert ck.manifest["metrics"] == {"final_loss": 1.5}

    def test_optimizer_moments_round_trip(self):
        """Test AdamW moments and step are stored next to the parameters."""
        p = Tensor(np.arange(3.0), requires_grad=True)
        state = OptimizerState(lr=0.01, step=4)
        state.m["w"] = np.array([0.1, 0.2, 0.3])
        state.v["w"] = np.array([1.0, 2.0, 3.0])
        ck = Checkpoint.from_bytes(Checkpoint.from_state({"stage": 1}, {"w": p}, state).to_bytes())
        restored = ck.optimizer_state()
        assert restored.step == 4
        np.testing.assert_array_equal(restored.m["w"], state.m["w"])
        assert set(ck.parameters()) == {"w"}


class TestCorruption:
    """Tests for damaged files."""

    def test_flipped_payload_byte(self, encoded):
        """Test a flipped payload byte fails the crc32 check."""
        corrupt = bytearray(encoded)
        corrupt[-1] ^= 0xFF
        with pytest.raises(CheckpointError, match="crc32"):
            Checkpoint.from_bytes(bytes(corrupt))

    def test_bad_magic(self, encoded):
        """Test a foreign file is rejected."""
        with pytest.raises(CheckpointError, match="magic"):
            Checkpoint.from_bytes(b"NOTACKPT" + encoded[8:])

    def test_unknown_version(self, encoded):
        """Test a future format version is rejected."""
        header = struct.pack("<8sI", MAGIC, FORMAT_VERSION + 1)
        with pytest.raises(CheckpointError, match="version"):
            Checkpoint.from_bytes(header + encoded[12:])

    def test_truncated(self, encoded):
        """Test a truncated payload is rejected."""
        with pytest.raises(CheckpointError):
            Checkpoint.from_bytes(encoded[:-5])

    def test_trailing_bytes(self, encoded):
        """Test bytes after the last array are rejected."""
        with pytest.raises(CheckpointError, match="trailing"):
            Checkpoint.from_bytes(encoded + b"\x00")

    def test_too_short(self):
        """Test a file shorter than the header is rejected."""
        with pytest.raises(CheckpointError):
            Checkpoint.from_bytes(b"AWAK")

    def test_missing_file(self, tmp_path):
        """Test loading a missing path is a checkpoint error."""
        with pytest.raises(CheckpointError):
            Checkpoint.load(tmp_path / "absent.awck")

    def test_entry_missing_key(self, encoded):
        """Test a manifest entry without a crc32 is a checkpoint error."""
        data = rewrite_manifest(encoded, lambda m: m["entries"][0].pop("crc32"))
        with pytest.raises(CheckpointError, match="malformed manifest entry 0") as info:
            Checkpoint.from_bytes(data)
        assert info.value.exit_code == 3

    def test_entry_bad_shape(self, encoded):
        """Test a non-numeric shape is a checkpoint error."""
        data = rewrite_manifest(encoded, lambda m: m["entries"][1].update(shape=["rows", 2]))
        with pytest.raises(CheckpointError, match="malformed manifest entry 1"):
            Checkpoint.from_bytes(data)

    def test_entry_negative_offset(self, encoded):
        """Test a negative byte offset is a checkpoint error."""
        data = rewrite_manifest(encoded, lambda m: m["entries"][0].update(byte_offset=-4))
        with pytest.raises(CheckpointError, match="byte_offset"):
            Checkpoint.from_bytes(data)

    def test_manifest_not_an_object(self, encoded):
        """Test a JSON list in place of the manifest is rejected."""
        with pytest.raises(CheckpointError, match="entry list"):
            Checkpoint.from_bytes(rewrite_manifest(encoded, None, replace=[]))

    def test_rewritten_manifest_still_loads(self, encoded):
        """Test an untouched rewrite decodes, so the failures above come from the edits."""
        assert Checkpoint.from_bytes(rewrite_manifest(encoded, lambda m: None)).stage == 2


class TestModelCheckpoints:
    """Tests for base and stage checkpoints of models."""

    def test_adapters_reload_exactly(self, base, moe_model, encoded):
        """Test every adapter tensor is restored bit for bit."""
        restored = load_adapted(base, Checkpoint.from_bytes(encoded))
        for name, param in moe_model.adapter_parameters().items():
            np.testing.assert_array_equal(restored.adapter_parameters()[name].data, param.data)
        assert restored.placement == moe_model.placement

    def test_base_round_trip(self, base):
        """Test the base checkpoint restores a frozen, identical base."""
        restored = load_base(Checkpoint.from_bytes(base_checkpoint(base, seed=0).to_bytes()))
        assert restored.is_frozen
        np.testing.assert_array_equal(restored.forward([1, 2, 3]).data, base.forward([1, 2, 3]).data)

    def test_stage_checkpoint_is_not_a_base(self, encoded):
        """Test load_base refuses a stage checkpoint."""
        with pytest.raises(CheckpointError):
            load_base(Checkpoint.from_bytes(encoded))

    def test_base_shape_mismatch(self, encoded, rng):
        """Test reloading adapters onto a different base is a config error."""
        other = BaseModel.init(small_model_config(2), rng)
        with pytest.raises(ConfigError):
            load_adapted(other, Checkpoint.from_bytes(encoded))
