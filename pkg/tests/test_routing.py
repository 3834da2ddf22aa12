"""Tests for routing contexts and routing statistics."""

import numpy as np
import pytest

from awaker_moe.adapters import GateLayer, gate_forward
from awaker_moe.config import RoutingConfig
from awaker_moe.errors import ConfigError, InputError, RoutingError
from awaker_moe.model import BaseModel, PlacementMap, attach_adapters
from awaker_moe.routing import (
    InstanceSegments,
    RoutingContext,
    RoutingDecision,
    build_gate_input,
    entropy_bits,
    flip_rate,
    mutual_information,
    route_instance,
    routing_stats,
)
from awaker_moe.selfcheck import randomize_adapters, sample_instances, small_adapter_config, small_model_config
from awaker_moe.taskgen import TaskInstance, eval_accuracy
from awaker_moe.tensor import Tensor, no_grad


@pytest.fixture
def rng():
    return np.random.default_rng(5)


@pytest.fixture
def moe_model(rng):
    base = BaseModel.init(small_model_config(2), rng)
    model = attach_adapters(base, PlacementMap.awaker(), small_adapter_config(), rng)
    randomize_adapters(model, rng)
    return model


def decision(expert, block=0, projection="mlp_gate", n=2, reused=False, position=None):
    """A logged decision that picks ``expert`` out of ``n``."""
    logits = np.zeros((n, 1))
    logits[expert, 0] = 5.0
    go = gate_forward(GateLayer(Tensor(logits), noise_sigma=0.0), Tensor(np.ones(1)))
    return RoutingDecision(block, projection, go, reused=reused, position=position)


class TestInstanceSegments:
    """Tests for InstanceSegments."""

    def test_from_bounds(self):
        """Test the instruction, input and response ranges tile the instance."""
        seg = InstanceSegments.from_bounds(10, 2, 6)
        assert seg.instruction == (0, 2)
        assert seg.input == (2, 6)
        assert seg.response == (6, 10)
        assert seg.length == 10

    def test_empty_input_span(self):
        """Test a response may follow the instruction directly."""
        assert InstanceSegments.from_bounds(8, 5, 5).input == (5, 5)

    def test_out_of_order_rejected(self):
        """Test an instruction ending after the response starts is an input error."""
        with pytest.raises(InputError):
            InstanceSegments.from_bounds(10, 7, 6)

    def test_response_past_end_rejected(self):
        """Test a response starting beyond the instance is an input error."""
        with pytest.raises(InputError):
            InstanceSegments.from_bounds(5, 2, 6)

    def test_empty_instruction_rejected(self):
        """Test an empty instruction span is an input error."""
        with pytest.raises(InputError):
            InstanceSegments.from_bounds(4, 0, 0)


class TestRouteInstance:
    """Tests for route_instance and RoutingContext."""

    def test_one_decision_per_gated_layer(self, moe_model, rng):
        """Test each gated layer decides once and simplified layers reuse mlp_gate."""
        inst = sample_instances(1, rng)[0]
        ctx = route_instance(moe_model, inst)
        assert len(ctx.decisions(include_reused=False)) == 4
        assert len(ctx.log) == 8
        for d in ctx.log:
            if d.reused:
                donor = next(x for x in ctx.log if x.block == d.block and x.projection == "mlp_gate")
                assert d.output is donor.output

    def test_forward_reuses_cached_decisions(self, moe_model, rng):
        """Test running the forward pass adds no new decisions."""
        inst = sample_instances(1, rng)[0]
        ctx = route_instance(moe_model, inst)
        before = len(ctx.log)
        with no_grad():
            moe_model.forward(inst, ctx)
        assert len(ctx.log) == before

    @pytest.mark.parametrize("mode", ["shared-embedding", "per-layer"])
    def test_response_does_not_change_routing(self, moe_model, rng, mode):
        """Test perturbing the response leaves every decision unchanged."""
        with no_grad():
            for inst in sample_instances(200, rng):
                other = inst.with_response(rng.integers(0, 10, size=len(inst.response)))
                a = route_instance(moe_model, inst, mode).log
                b = route_instance(moe_model, other, mode).log
                for da, db in zip(a, b):
                    assert da.output.selected == db.output.selected
                    np.testing.assert_allclose(da.output.probs.data, db.output.probs.data, atol=1e-12)

    @pytest.mark.parametrize("mode", ["shared-embedding", "per-layer"])
    def test_input_digits_do_not_change_routing(self, moe_model, rng, mode):
        """Test perturbing the input span leaves every decision unchanged."""
        with no_grad():
            for inst in sample_instances(50, rng):
                start, end = inst.segments.input
                tokens = list(inst.tokens)
                # keep the separators that open and close the input span
                for t in range(start + 1, end - 1):
                    tokens[t] = int(rng.integers(0, 10))
                other = TaskInstance(inst.task, tuple(tokens), inst.instr_end, inst.resp_start)
                a = route_instance(moe_model, inst, mode).log
                b = route_instance(moe_model, other, mode).log
                for da, db in zip(a, b):
                    assert da.output.selected == db.output.selected
                    np.testing.assert_allclose(da.output.probs.data, db.output.probs.data, atol=1e-12)

    def test_gate_input_is_pooled_instruction(self, moe_model, rng):
        """Test the shared gate input is the mean instruction embedding."""
        inst = sample_instances(1, rng)[0]
        start, end = inst.segments.instruction
        expected = moe_model.base.embed.data[list(inst.tokens[start:end])].mean(axis=0)
        np.testing.assert_allclose(build_gate_input(moe_model, inst), expected)
        last = build_gate_input(moe_model, inst, pooling="last-token")
        np.testing.assert_array_equal(last, moe_model.base.embed.data[inst.tokens[end - 1]])

    def test_single_lora_model_has_empty_log(self, rng):
        """Test a model without MoE layers routes to an empty log."""
        base = BaseModel.init(small_model_config(1), rng)
        model = attach_adapters(base, PlacementMap.single_lora(), small_adapter_config(), rng)
        assert route_instance(model, sample_instances(1, rng)[0]).log == []

    def test_unknown_mode(self, moe_model, rng):
        """Test an unknown routing mode is a config error."""
        with pytest.raises(ConfigError):
            route_instance(moe_model, sample_instances(1, rng)[0], mode="per-token")

    def test_per_layer_needs_block_input(self, moe_model, rng):
        """Test per-layer routing refuses to decide without the hidden state."""
        inst = sample_instances(1, rng)[0]
        ctx = RoutingContext(mode="per-layer", segments=inst.segments)
        with pytest.raises(RoutingError):
            ctx.decide(0, moe_model.moe(0, "o"))

    def test_shared_mode_needs_gate_input(self, rng):
        """Test a shared-embedding context without a gate input is rejected."""
        with pytest.raises(RoutingError):
            RoutingContext(mode="shared-embedding", segments=InstanceSegments.from_bounds(6, 3, 3))

    def test_train_mode_noise_changes_probabilities(self, moe_model, rng):
        """Test training-mode routing draws gate noise from the given generator."""
        moe_model.set_noise(0.5)
        inst = sample_instances(1, rng)[0]
        clean = route_instance(moe_model, inst).log[0].output.probs.data
        noisy = route_instance(moe_model, inst, train_mode=True, rng=np.random.default_rng(1)).log[0].output.probs.data
        assert not np.allclose(clean, noisy)


class TestTokenLevelRouting:
    """Tests for the token-level comparison mode."""

    def test_one_decision_per_position(self, moe_model, rng):
        """Test every gated layer decides once for each position."""
        inst = sample_instances(1, rng)[0]
        ctx = route_instance(moe_model, inst, "token-level")
        n = len(inst.tokens)
        gated = ctx.decisions(include_reused=False)
        assert len(gated) == 4 * n
        assert len(ctx.log) == 8 * n
        for b in range(moe_model.n_blocks):
            for projection in ("o", "mlp_gate"):
                positions = [d.position for d in gated if (d.block, d.projection) == (b, projection)]
                assert sorted(positions) == list(range(n))

    def test_position_routes_on_its_embedding(self, moe_model, rng):
        """Test each decision is the gate applied to that position's embedding."""
        inst = sample_instances(1, rng)[0]
        ctx = route_instance(moe_model, inst, "token-level")
        gate = moe_model.moe(0, "o").gate
        for d in ctx.decisions(include_reused=False):
            if (d.block, d.projection) == (0, "o"):
                expected = gate_forward(gate, Tensor(moe_model.base.embed.data[inst.tokens[d.position]]))
                assert d.output.selected == expected.selected
                np.testing.assert_allclose(d.output.probs.data, expected.probs.data)

    def test_simplified_layers_reuse_per_position(self, moe_model, rng):
        """Test mlp_up and mlp_down take mlp_gate's decision at the same position."""
        inst = sample_instances(1, rng)[0]
        log = route_instance(moe_model, inst, "token-level").log
        by_key = {(d.block, d.projection, d.position): d for d in log}
        assert len(by_key) == len(log)
        for (b, projection, t), d in by_key.items():
            if projection in ("mlp_up", "mlp_down"):
                assert d.reused
                assert d.output is by_key[(b, "mlp_gate", t)].output

    def test_positions_logged_in_dict(self, moe_model, rng):
        """Test token-level entries carry their position and instance entries do not."""
        inst = sample_instances(1, rng)[0]
        assert "position" in route_instance(moe_model, inst, "token-level").log[0].to_dict()
        assert "position" not in route_instance(moe_model, inst).log[0].to_dict()

    def test_zero_gates_match_instance_routing(self, moe_model, rng):
        """Test with all-zero gates every position gets the instance decision."""
        for layer in moe_model.moe_layers():
            if layer.gate is not None:
                layer.gate.weight.data[:] = 0.0
        with no_grad():
            for inst in sample_instances(5, rng):
                shared = moe_model.forward(inst, route_instance(moe_model, inst)).data
                tokens = moe_model.forward(inst, route_instance(moe_model, inst, "token-level")).data
                np.testing.assert_allclose(tokens, shared, atol=1e-12)

    def test_decide_refused(self, moe_model, rng):
        """Test a token-level context will not make instance decisions."""
        inst = sample_instances(1, rng)[0]
        ctx = RoutingContext(mode="token-level", segments=inst.segments)
        with pytest.raises(RoutingError):
            ctx.decide(0, moe_model.moe(0, "o"))
        with pytest.raises(RoutingError, match="no embeddings"):
            ctx.decide_tokens(0, moe_model.moe(0, "o"), 3)

    def test_decide_tokens_needs_token_mode(self, moe_model, rng):
        """Test instance-level contexts refuse per-position decisions."""
        inst = sample_instances(1, rng)[0]
        ctx = route_instance(moe_model, inst)
        with pytest.raises(RoutingError):
            ctx.decide_tokens(0, moe_model.moe(0, "o"), 3)

    def test_statistics_and_flip_rate(self, moe_model, rng):
        """Test token logs feed routing_stats and compare against instance logs."""
        instances = [inst.prompt_only() for inst in sample_instances(12, rng)]
        with no_grad():
            shared = [route_instance(moe_model, inst).log for inst in instances]
            tokens = [route_instance(moe_model, inst, "token-level").log for inst in instances]
        stats = routing_stats(tokens, [inst.task for inst in instances])
        assert stats.n_events == 4 * sum(len(inst.tokens) for inst in instances)
        assert 0.0 <= flip_rate(shared, tokens) <= 1.0
        assert flip_rate(tokens, tokens) == 0.0
        assert flip_rate(shared, tokens) == flip_rate(tokens, shared)

    def test_decoding(self, moe_model, rng):
        """Test greedy decoding extends the per-position decisions."""
        instances = sample_instances(4, rng)
        accuracy = eval_accuracy(moe_model, instances, RoutingConfig(mode="token-level"))
        assert all(0.0 <= acc <= 1.0 for acc in accuracy.values())


class TestInformationMeasures:
    """Tests for entropy and mutual information."""

    def test_uniform_entropy(self):
        """Test four equally used experts give 2 bits."""
        assert entropy_bits([5, 5, 5, 5]) == pytest.approx(2.0)

    def test_mutual_information_known_table(self):
        """Test the plug-in estimate on a 2x2 table."""
        assert mutual_information([[30, 10], [10, 30]]) == pytest.approx(0.18872, abs=1e-5)

    def test_bijection_gives_full_information(self):
        """Test a one-to-one task/expert map of 4 tasks gives 2 bits."""
        assert mutual_information(np.eye(4) * 7) == pytest.approx(2.0)

    def test_independence_gives_zero(self):
        """Test a product table gives zero information."""
        assert mutual_information([[10, 10], [10, 10]]) == pytest.approx(0.0)

    def test_empty_table(self):
        """Test an all-zero table is an input error."""
        with pytest.raises(InputError):
            mutual_information([[0, 0], [0, 0]])

    def test_bounded_on_random_joints(self):
        """Test 0 <= MI <= min(log2 tasks, log2 experts) on random count tables."""
        rng = np.random.default_rng(11)
        for _ in range(500):
            rows, cols = (int(n) for n in rng.integers(1, 7, size=2))
            joint = rng.integers(0, 20, size=(rows, cols)) * (rng.random((rows, cols)) < 0.6)
            joint[int(rng.integers(rows)), int(rng.integers(cols))] += 1
            mi = mutual_information(joint)
            assert 0.0 <= mi <= min(np.log2(rows), np.log2(cols)) + 1e-9


class TestRoutingStats:
    """Tests for routing_stats and flip_rate."""

    def test_counts_skip_reused(self):
        """Test reused decisions do not count as events."""
        logs = [
            [decision(0), decision(0, projection="mlp_up", reused=True)],
            [decision(1), decision(1, projection="mlp_up", reused=True)],
        ]
        stats = routing_stats(logs, [0, 1])
        assert stats.n_events == 2
        assert stats.utilization == [1, 1]
        assert stats.mutual_information_bits == pytest.approx(1.0)

    def test_joint_table(self):
        """Test the reference-layer joint table matches the logs."""
        logs = [[decision(0)]] * 3 + [[decision(1)]]
        stats = routing_stats(logs, [0, 0, 1, 1])
        assert stats.joint == [[2, 0], [1, 1]]
        assert stats.tasks == [0, 1]

    def test_empty_logs(self):
        """Test no logs is an input error."""
        with pytest.raises(InputError):
            routing_stats([], [])

    def test_missing_reference_layer(self):
        """Test a reference layer that never decided is an input error."""
        with pytest.raises(InputError):
            routing_stats([[decision(0, projection="o")]], [0])

    def test_flip_rate(self):
        """Test one flipped decision out of eight gives 0.125."""
        log_a = [[decision(0, block=b)] for b in range(8)]
        log_b = [[decision(1 if b == 3 else 0, block=b)] for b in range(8)]
        assert flip_rate(log_a, log_b) == pytest.approx(0.125)

    def test_flip_rate_mismatch(self):
        """Test logs of different sizes are an input error."""
        with pytest.raises(InputError):
            flip_rate([[decision(0)]], [])

    def test_flip_rate_tokens_against_instance(self):
        """Test each token decision is compared with the instance decision of its layer."""
        instance = [[decision(0)]]
        tokens = [[decision(e, position=t) for t, e in enumerate([0, 1, 0, 0])]]
        assert flip_rate(instance, tokens) == pytest.approx(0.25)
        assert flip_rate(tokens, instance) == pytest.approx(0.25)

    def test_flip_rate_token_positions_must_match(self):
        """Test token logs over different positions are an input error."""
        a = [[decision(0, position=0), decision(0, position=1)]]
        b = [[decision(0, position=0)]]
        with pytest.raises(InputError, match="positions"):
            flip_rate(a, b)

    def test_model_statistics(self, moe_model, rng):
        """Test statistics over a routed model stay within their bounds."""
        instances = sample_instances(12, rng)
        logs = [route_instance(moe_model, inst).log for inst in instances]
        stats = routing_stats(logs, [inst.task for inst in instances])
        assert sum(stats.utilization) == stats.n_events == 4 * len(instances)
        assert 0.0 <= stats.entropy_bits <= 2.0
        assert 0.0 <= stats.mutual_information_bits <= 2.0
