"""Tests for the learning-rate schedule, pretraining and the three stages."""

import numpy as np
import pytest

from awaker_moe.config import PretrainConfig, RoutingConfig, StageConfig
from awaker_moe.errors import ConfigError, InputError
from awaker_moe.model import BaseModel, PlacementMap, attach_adapters, count_trainable
from awaker_moe.routing import route_instance
from awaker_moe.selfcheck import randomize_adapters, sample_instances, small_adapter_config, small_model_config
from awaker_moe.tensor import make_rng, no_grad
from awaker_moe.training import (
    Checkpoint,
    cosine_lr,
    eval_batch_loss,
    init_stage2_from_stage1,
    instance_loss,
    load_adapted,
    model_checkpoint,
    parameter_checksums,
    pretrain_base,
    pretrain_sequence,
    run_stage1,
    run_stage2,
    run_stage3,
)


@pytest.fixture
def rng():
    return np.random.default_rng(21)


@pytest.fixture
def base(rng):
    return BaseModel.init(small_model_config(1), rng)


@pytest.fixture
def corpus(rng):
    return sample_instances(16, rng)


@pytest.fixture
def routing():
    return RoutingConfig()


def stage_config(stage, steps=3, batch_size=2, **kwargs):
    return StageConfig(stage=stage, lr=1e-2, steps=steps, warmup=1, batch_size=batch_size, **kwargs)


@pytest.fixture
def stage1_checkpoint(base, corpus, routing):
    return run_stage1(base, corpus, stage_config(1), small_adapter_config(), routing, seed=0)


class TestCosineSchedule:
    """Tests for cosine_lr."""

    def test_known_values(self):
        """Test warmup, peak, midpoint and end of a 10-step schedule."""
        assert cosine_lr(0, 10, 1.0, warmup=0) == pytest.approx(1.0)
        assert cosine_lr(5, 10, 1.0, warmup=0) == pytest.approx(0.5)
        assert cosine_lr(10, 10, 1.0, warmup=0) == pytest.approx(0.0, abs=1e-15)

    def test_warmup_ramp(self):
        """Test the ramp starts above zero and reaches the peak at the warmup boundary."""
        assert cosine_lr(0, 100, 1.0, warmup=4) == pytest.approx(0.2)
        assert cosine_lr(3, 100, 1.0, warmup=4) == pytest.approx(0.8)
        assert cosine_lr(4, 100, 1.0, warmup=4) == pytest.approx(1.0)

    def test_monotone_after_warmup(self):
        """Test the decay never increases."""
        values = [cosine_lr(s, 50, 1e-3, warmup=5) for s in range(5, 51)]
        assert all(a >= b for a, b in zip(values, values[1:]))

    def test_invalid_arguments(self):
        """Test non-positive totals and out-of-range steps are config errors."""
        with pytest.raises(ConfigError):
            cosine_lr(0, 0, 1.0)
        with pytest.raises(ConfigError):
            cosine_lr(11, 10, 1.0)


class TestPretrain:
    """Tests for base pretraining."""

    def test_sequence_length_and_vocabulary(self, rng):
        """Test generic sequences use digits and separators only."""
        tokens = pretrain_sequence(rng, 24)
        assert len(tokens) == 24
        assert set(tokens) <= set(range(11))

    def test_pretrain_is_deterministic_and_frozen(self):
        """Test the same seed gives the same frozen base."""
        cfg = PretrainConfig(steps=2, batch_size=1, seq_len=8, warmup=0)
        a = pretrain_base(small_model_config(1), cfg, seed=4)
        b = pretrain_base(small_model_config(1), cfg, seed=4)
        assert a.is_frozen
        np.testing.assert_array_equal(a.embed.data, b.embed.data)

    def test_zero_steps_keeps_init(self):
        """Test zero pretraining steps returns the seeded initialization."""
        base = pretrain_base(small_model_config(1), PretrainConfig(steps=0), seed=4)
        init = BaseModel.init(small_model_config(1), make_rng(4, "init", 0))
        np.testing.assert_array_equal(base.embed.data, init.embed.data)
        assert base.is_frozen


class TestStage1:
    """Tests for single-LoRA training."""

    def test_trains_lora_only(self, base, stage1_checkpoint):
        """Test stage 1 leaves the base untouched and trains every B."""
        before = parameter_checksums(base)
        model = load_adapted(base, stage1_checkpoint)
        assert parameter_checksums(base) == before
        assert stage1_checkpoint.stage == 1
        assert any(np.abs(p.data).sum() > 0 for n, p in model.adapter_parameters().items() if n.endswith(".B"))
        assert stage1_checkpoint.manifest["metrics"]["steps"] == 3

    def test_zero_steps_keeps_b_at_zero(self, base, corpus, routing):
        """Test a zero-step stage returns the untouched initialization."""
        ck = run_stage1(base, corpus, stage_config(1, steps=0), small_adapter_config(), routing, seed=0)
        assert all(not arr.any() for name, arr in ck.parameters().items() if name.endswith(".B"))

    def test_deterministic(self, base, corpus, routing, stage1_checkpoint):
        """Test the same seed reproduces the checkpoint bytes."""
        again = run_stage1(base, corpus, stage_config(1), small_adapter_config(), routing, seed=0)
        assert again.to_bytes() == stage1_checkpoint.to_bytes()

    def test_empty_corpus(self, base, routing):
        """Test training on nothing is an input error."""
        with pytest.raises(InputError):
            run_stage1(base, [], stage_config(1), small_adapter_config(), routing, seed=0)

    def test_wrong_stage_config(self, base, corpus, routing):
        """Test a stage-2 config is refused."""
        with pytest.raises(ConfigError):
            run_stage1(base, corpus, stage_config(2), small_adapter_config(), routing, seed=0)

    def test_reload_reproduces_final_loss(self, base, corpus, routing, stage1_checkpoint):
        """Test the reloaded checkpoint scores its final batch exactly as recorded."""
        ck = Checkpoint.from_bytes(stage1_checkpoint.to_bytes())
        metrics = ck.manifest["metrics"]
        again = eval_batch_loss(load_adapted(base, ck), corpus, metrics["final_batch"], routing)
        assert again == metrics["final_loss"]


class TestStage2Init:
    """Tests for init_stage2_from_stage1."""

    def test_logits_match_stage1(self, base, rng):
        """Test the expanded MoE model computes the stage-1 function."""
        stage1 = attach_adapters(base, PlacementMap.single_lora(), small_adapter_config(), rng)
        randomize_adapters(stage1, rng)
        moe = init_stage2_from_stage1(base, model_checkpoint(stage1, 1, seed=0))
        with no_grad():
            for inst in sample_instances(50, rng):
                a = stage1.forward(inst, route_instance(stage1, inst)).data
                b = moe.forward(inst, route_instance(moe, inst)).data
                assert np.abs(a - b).max() <= 1e-10

    def test_zero_gate_prefers_expert_zero(self, base, stage1_checkpoint, corpus):
        """Test zero gates pick expert 0 with probability 1/n."""
        moe = init_stage2_from_stage1(base, stage1_checkpoint)
        for d in route_instance(moe, corpus[0]).decisions(include_reused=False):
            assert d.output.selected == (0,)
            assert float(d.output.g_max.data) == pytest.approx(0.25)

    def test_expert_count_override(self, base, stage1_checkpoint):
        """Test n overrides the number of experts."""
        moe = init_stage2_from_stage1(base, stage1_checkpoint, n=2)
        assert moe.moe(0, "o").n_experts == 2

    def test_requires_stage1(self, base, stage1_checkpoint, corpus, routing):
        """Test a stage-2 checkpoint cannot seed stage 2."""
        moe = init_stage2_from_stage1(base, stage1_checkpoint)
        ck2 = run_stage2(moe, corpus, stage_config(2, steps=1), routing, seed=0)
        with pytest.raises(ConfigError):
            init_stage2_from_stage1(base, ck2)

    def test_rank_mismatch(self, base, stage1_checkpoint):
        """Test changing the rank between stages is a config error."""
        cfg = small_adapter_config().model_copy(update={"rank": 2})
        with pytest.raises(ConfigError):
            init_stage2_from_stage1(base, stage1_checkpoint, adapters=cfg)

    def test_single_expert_matches_stage1(self, base, rng):
        """Test with n=1 the lone expert takes all the weight and the global expert none."""
        stage1 = attach_adapters(base, PlacementMap.single_lora(), small_adapter_config(), rng)
        randomize_adapters(stage1, rng)
        moe = init_stage2_from_stage1(base, model_checkpoint(stage1, 1, seed=0), n=1)
        with no_grad():
            for inst in sample_instances(50, rng):
                ctx = route_instance(moe, inst)
                assert all(float(d.output.g_global.data) == 0.0 for d in ctx.log)
                a = stage1.forward(inst, route_instance(stage1, inst)).data
                b = moe.forward(inst, ctx).data
                assert np.abs(a - b).max() <= 1e-10


class TestStages2And3:
    """Tests for run_stage2 and run_stage3."""

    @pytest.fixture
    def moe(self, base, stage1_checkpoint):
        return init_stage2_from_stage1(base, stage1_checkpoint)

    def test_stage2_moves_gates(self, moe, corpus, routing):
        """Test stage 2 updates the gate weights."""
        run_stage2(moe, corpus, stage_config(2, steps=4, noise_sigma=0.5), routing, seed=0)
        assert any(np.abs(layer.gate.weight.data).sum() > 0 for layer in moe.gated_layers())

    def test_stage3_keeps_gates_and_base(self, base, moe, corpus, routing):
        """Test stage 3 changes experts but no gate or base byte."""
        run_stage2(moe, corpus, stage_config(2), routing, seed=0)
        moe.freeze_gates()
        before = parameter_checksums(moe)
        ck3 = run_stage3(moe, corpus, stage_config(3), routing, seed=0)
        after = parameter_checksums(moe)
        frozen = [n for n in before if n.startswith("base.") or n.endswith(".gate.W")]
        assert all(before[n] == after[n] for n in frozen)
        assert any(before[n] != after[n] for n in before if ".experts." in n)
        assert ck3.manifest["trainable"] == ["lora", "experts", "global"]

    def test_stage3_needs_frozen_gates(self, moe, corpus, routing):
        """Test stage 3 refuses trainable gates."""
        with pytest.raises(ConfigError):
            run_stage3(moe, corpus, stage_config(3), routing, seed=0)

    def test_stage2_needs_moe(self, base, corpus, routing, rng):
        """Test stage 2 refuses a single-LoRA model."""
        single = attach_adapters(base, PlacementMap.single_lora(), small_adapter_config(), rng)
        with pytest.raises(ConfigError):
            run_stage2(single, corpus, stage_config(2), routing, seed=0)

    def test_noisy_stage2_separates_experts(self, moe, corpus, routing):
        """Test noisy routing sends instances to every expert so no two stay equal."""
        run_stage2(moe, corpus, stage_config(2, steps=12, noise_sigma=1.0, batch_size=4), routing, seed=0)
        for layer in moe.moe_layers():
            for i in range(layer.n_experts):
                for j in range(i + 1, layer.n_experts):
                    assert not np.array_equal(layer.experts[i].B.data, layer.experts[j].B.data), (
                        f"{layer.layer_id}: experts {i} and {j} are still equal"
                    )

    def test_first_step_gate_gradient_needs_balance(self, base, stage1_checkpoint, corpus, routing):
        """Test one noisy step leaves zero gates at zero without the balance loss and moves them with it."""
        adapters = small_adapter_config().model_copy(update={"noise_sigma": 0.5})
        plain = init_stage2_from_stage1(base, stage1_checkpoint, adapters=adapters)
        run_stage2(plain, corpus, stage_config(2, steps=1), routing, seed=0)
        assert all(np.abs(layer.gate.weight.data).max() < 1e-6 for layer in plain.gated_layers())

        balancing = adapters.model_copy(update={"balance_coef": 0.1})
        balanced = init_stage2_from_stage1(base, stage1_checkpoint, adapters=balancing)
        run_stage2(balanced, corpus, stage_config(2, steps=1), routing, seed=0)
        assert any(np.abs(layer.gate.weight.data).max() > 1e-4 for layer in balanced.gated_layers())

    def test_checkpoint_resumes_trainable_groups(self, base, moe, corpus, routing):
        """Test a stage-2 checkpoint reloads with gates trainable."""
        ck2 = run_stage2(moe, corpus, stage_config(2, steps=1), routing, seed=0)
        reloaded = load_adapted(base, Checkpoint.from_bytes(ck2.to_bytes()))
        assert not reloaded.gates_frozen
        assert count_trainable(reloaded) == count_trainable(moe)

    def test_training_lowers_loss(self, base, corpus, routing):
        """Test a few dozen stage-1 steps reduce the loss of a fixed batch."""
        cfg = StageConfig(stage=1, lr=2e-2, steps=30, warmup=2, batch_size=4)
        ck = run_stage1(base, corpus[:4], cfg, small_adapter_config(), routing, seed=1)
        model = load_adapted(base, ck)
        fresh = attach_adapters(base, PlacementMap.single_lora(), small_adapter_config(), np.random.default_rng(0))
        with no_grad():
            trained = sum(instance_loss(model, inst, route_instance(model, inst)).item() for inst in corpus[:4])
            untrained = sum(instance_loss(fresh, inst, route_instance(fresh, inst)).item() for inst in corpus[:4])
        assert trained < untrained
