"""Tests for the frozen base and the adapted model."""

import numpy as np
import pytest

from awaker_moe.config import AdapterConfig, ModelConfig
from awaker_moe.errors import ConfigError, InputError, RoutingError
from awaker_moe.model import (
    AdapterKind,
    BaseModel,
    PlacementMap,
    attach_adapters,
    count_active,
    count_trainable,
)
from awaker_moe.routing import route_instance
from awaker_moe.selfcheck import randomize_adapters, sample_instances, small_adapter_config, small_model_config
from awaker_moe.tensor import no_grad


@pytest.fixture
def rng():
    return np.random.default_rng(11)


@pytest.fixture
def base(rng):
    return BaseModel.init(small_model_config(2), rng)


@pytest.fixture
def moe_model(base, rng):
    return attach_adapters(base, PlacementMap.awaker(), small_adapter_config(), rng)


class TestBaseModel:
    """Tests for BaseModel."""

    def test_logits_shape(self, base):
        """Test the output is T x V."""
        assert base.forward([1, 2, 3, 4]).shape == (4, 32)

    def test_causal(self, base):
        """Test appending tokens leaves earlier logits unchanged."""
        short = base.forward([11, 12, 10, 3]).data
        longer = base.forward([11, 12, 10, 3, 5, 7]).data
        np.testing.assert_allclose(longer[:4], short, atol=1e-12)

    def test_init_is_frozen(self, base):
        """Test a fresh base has no trainable parameters."""
        assert base.is_frozen
        assert count_trainable(base) == 0

    def test_token_validation(self, base):
        """Test empty, out-of-vocabulary and over-long inputs raise InputError."""
        with pytest.raises(InputError):
            base.forward([])
        with pytest.raises(InputError):
            base.forward([32])
        with pytest.raises(InputError):
            base.forward([1] * 33)

    def test_from_arrays_round_trip(self, base):
        """Test rebuilding from named arrays reproduces the logits."""
        arrays = {name: p.data for name, p in base.parameters().items()}
        clone = BaseModel.from_arrays(base.config, arrays)
        np.testing.assert_array_equal(clone.forward([1, 2, 3]).data, base.forward([1, 2, 3]).data)

    def test_invalid_head_split(self):
        """Test heads must divide the width into even head dimensions."""
        with pytest.raises(ValueError):
            ModelConfig(d_model=10, n_heads=4)
        with pytest.raises(ValueError):
            ModelConfig(d_model=12, n_heads=4)


class TestPlacementMap:
    """Tests for PlacementMap."""

    def test_awaker_layout(self):
        """Test the published placement and its donors."""
        placement = PlacementMap.awaker()
        placement.validate()
        assert placement.gated() == ["o", "mlp_gate"]
        assert placement.kinds["q"] is AdapterKind.SINGLE_LORA
        assert placement.donors == {"mlp_up": "mlp_gate", "mlp_down": "mlp_gate"}

    def test_single_lora_has_no_moe(self):
        """Test the stage-1 placement has no MoE sites."""
        assert not PlacementMap.single_lora().has_moe

    def test_dict_round_trip(self):
        """Test to_dict / from_dict preserve the map."""
        placement = PlacementMap.awaker()
        assert PlacementMap.from_dict(placement.to_dict()) == placement

    def test_simplified_needs_gated_donor(self):
        """Test a simplified layer pointing at a non-gated donor is rejected."""
        kinds = dict(PlacementMap.awaker().kinds)
        kinds["mlp_gate"] = AdapterKind.SINGLE_LORA
        with pytest.raises(ConfigError):
            PlacementMap(kinds, {"mlp_up": "mlp_gate", "mlp_down": "mlp_gate"}).validate()

    def test_missing_projection(self):
        """Test a map that skips a projection is rejected."""
        kinds = dict(PlacementMap.single_lora().kinds)
        del kinds["v"]
        with pytest.raises(ConfigError):
            PlacementMap(kinds).validate()


class TestAttachAdapters:
    """Tests for attach_adapters and AdaptedModel."""

    def test_zero_init_matches_base(self, base, moe_model, rng):
        """Test fresh adapters leave every logit within 1e-12 of the base."""
        with no_grad():
            for inst in sample_instances(10, rng):
                adapted = moe_model.forward(inst, route_instance(moe_model, inst)).data
                assert np.abs(adapted - base.forward(inst.tokens).data).max() <= 1e-12

    def test_base_untouched_by_training_step(self, base, moe_model, rng):
        """Test backward through the adapted model gives no base gradient."""
        randomize_adapters(moe_model, rng)
        moe_model.set_trainable(["lora", "experts", "global", "gates"])
        inst = sample_instances(1, rng)[0]
        moe_model.forward(inst, route_instance(moe_model, inst)).sum().backward()
        assert all(p.grad is None for p in base.parameters().values())
        assert base.is_frozen

    def test_attaching_twice(self, moe_model, rng):
        """Test attaching to an adapted model raises ConfigError."""
        with pytest.raises(ConfigError):
            attach_adapters(moe_model, PlacementMap.awaker(), small_adapter_config(), rng)

    def test_forward_without_context(self, moe_model, rng):
        """Test an MoE model refuses to run without a routing context."""
        inst = sample_instances(1, rng)[0]
        with pytest.raises(RoutingError):
            moe_model.forward(inst, None)
        with pytest.raises(RoutingError):
            moe_model.logits(inst.tokens)

    def test_simplified_layers_are_bound(self, moe_model):
        """Test mlp_up and mlp_down reuse the block's mlp_gate layer."""
        for b in range(moe_model.n_blocks):
            donor = moe_model.moe(b, "mlp_gate")
            assert moe_model.moe(b, "mlp_up").donor is donor
            assert moe_model.moe(b, "mlp_down").donor is donor
        assert len(moe_model.gated_layers()) == 2 * moe_model.n_blocks

    def test_site_accessors_check_kind(self, moe_model):
        """Test asking for the wrong adapter kind raises ConfigError."""
        with pytest.raises(ConfigError):
            moe_model.moe(0, "q")
        with pytest.raises(ConfigError):
            moe_model.lora(0, "o")

    def test_set_trainable_groups(self, moe_model):
        """Test only the named groups require gradients."""
        moe_model.set_trainable(["experts", "global"])
        groups = moe_model.parameter_groups()
        assert all(p.requires_grad for p in groups["experts"].values())
        assert not any(p.requires_grad for p in groups["lora"].values())
        assert moe_model.gates_frozen
        with pytest.raises(ConfigError):
            moe_model.set_trainable(["bogus"])

    def test_set_noise(self, moe_model):
        """Test the noise override reaches every gate."""
        moe_model.set_noise(0.3)
        assert all(layer.gate.noise_sigma == 0.3 for layer in moe_model.gated_layers())


class TestParameterCounts:
    """Tests for count_trainable and count_active at the default toy sizes."""

    @pytest.fixture
    def toy_base(self):
        return BaseModel.init(ModelConfig(), np.random.default_rng(0))

    def test_single_lora_projection(self, toy_base):
        """Test one r=8 LoRA on a 64x64 projection holds 1024 parameters."""
        model = attach_adapters(toy_base, PlacementMap.single_lora(), AdapterConfig.toy(), np.random.default_rng(1))
        assert model.lora(0, "q").n_params == 1024

    def test_stage2_trainable_count(self, toy_base):
        """Test the full MoE placement trains 63488 parameters."""
        model = attach_adapters(toy_base, PlacementMap.awaker(), AdapterConfig.toy(), np.random.default_rng(1))
        model.set_trainable(["lora", "experts", "global", "gates"])
        assert count_trainable(model) == 63488

    def test_stage3_excludes_gates(self, toy_base):
        """Test freezing the gates removes 2 x 2 x 4 x 64 parameters."""
        model = attach_adapters(toy_base, PlacementMap.awaker(), AdapterConfig.toy(), np.random.default_rng(1))
        model.set_trainable(["lora", "experts", "global"])
        assert count_trainable(model) == 63488 - 1024

    def test_active_count(self, toy_base):
        """Test one expert plus the global expert per MoE site are active."""
        model = attach_adapters(toy_base, PlacementMap.awaker(), AdapterConfig.toy(), np.random.default_rng(1))
        assert count_active(model) == 28672

    def test_single_lora_active_equals_trainable(self, toy_base):
        """Test a single-LoRA model activates all of its adapter parameters."""
        model = attach_adapters(toy_base, PlacementMap.single_lora(), AdapterConfig.toy(), np.random.default_rng(1))
        model.set_trainable(["lora"])
        assert count_active(model) == count_trainable(model) == 2 * 1088 * 8
