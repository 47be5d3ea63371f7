import numpy as np
import pytest

from scmoelab import arch, numkit
from scmoelab.arch import ConfigError, ModelConfig
from scmoelab.numkit import Rng


def _cfg(**kw):
    base = dict(n_blocks=2, d_model=6, d_hidden=8, n_experts=4, k_routed=1)
    base.update(kw)
    return ModelConfig(**base)


def _run(cfg, seed=0, t=5, rng_noise=None):
    rng = Rng(seed)
    params = arch.init_params(cfg, rng.spawn(0))
    tokens = rng.spawn(1).normal((t, cfg.d_model))
    out, trace = arch.forward(cfg, params, tokens, rng=rng_noise)
    return params, tokens, out, trace


class TestConfigValidation:
    def test_unknown_variant(self):
        with pytest.raises(ConfigError):
            _cfg(variant="mystery")

    def test_scmoe_needs_position(self):
        with pytest.raises(ConfigError):
            _cfg(variant="scmoe")

    def test_standard_takes_no_position(self):
        with pytest.raises(ConfigError):
            _cfg(variant="standard", shortcut_pos="pos1")

    def test_every_second_block_needs_even_count(self):
        with pytest.raises(ConfigError):
            _cfg(n_blocks=3)

    def test_every_block_shortcut_is_pos1_only(self):
        with pytest.raises(ConfigError):
            _cfg(variant="scmoe", shortcut_pos="pos2", moe_frequency="every-block")
        _cfg(variant="scmoe", shortcut_pos="pos1", moe_frequency="every-block")

    def test_k_out_of_range(self):
        with pytest.raises(ConfigError):
            _cfg(k_routed=5)

    def test_dgmoe_needs_direct_add(self):
        with pytest.raises(ConfigError):
            _cfg(variant="dgmoe", shortcut_pos="pos2", combine_mode="cg1")


class TestForwardWiring:
    def test_output_shape_and_trace_taps(self):
        cfg = _cfg(variant="scmoe", shortcut_pos="pos2")
        _, tokens, out, trace = _run(cfg)
        assert out.shape == tokens.shape
        labels, arrays = trace.taps()
        assert labels == ["In", "1A", "1M", "2A", "2M"]
        np.testing.assert_array_equal(arrays[0], tokens)

    def test_shortcut_positions_feed_expected_representations(self):
        for pos, pick in (("pos1", lambda tr: tr.blocks[0].h_feed),
                          ("pos2", lambda tr: tr.blocks[0].h_attn),
                          ("pos3", lambda tr: tr.tokens)):
            cfg = _cfg(variant="scmoe", shortcut_pos=pos)
            _, _, _, trace = _run(cfg)
            np.testing.assert_array_equal(trace.moe[0].routed_input, pick(trace))

    def test_first_pair_position_override(self):
        cfg = _cfg(n_blocks=4, variant="scmoe", shortcut_pos="pos2",
                   first_layer_pos1=True)
        _, _, _, trace = _run(cfg)
        np.testing.assert_array_equal(trace.moe[0].routed_input,
                                      trace.blocks[0].h_feed)
        np.testing.assert_array_equal(trace.moe[1].routed_input,
                                      trace.blocks[2].h_attn)

    def test_every_block_routes_on_block_input(self):
        cfg = _cfg(variant="scmoe", shortcut_pos="pos1",
                   moe_frequency="every-block")
        _, tokens, _, trace = _run(cfg)
        np.testing.assert_array_equal(trace.moe[0].routed_input, tokens)
        np.testing.assert_array_equal(trace.moe[1].routed_input,
                                      trace.blocks[0].h_feed)

    def test_residual_path_dominates_when_feed_is_tiny(self):
        # scaling all feed-layer weights to ~0 leaves the residual stream
        cfg = _cfg(variant="standard")
        rng = Rng(0)
        params = arch.init_params(cfg, rng.spawn(0))
        for name, p in arch.named_parameters(params):
            if ".attn." not in name:
                p *= 1e-12
        tokens = rng.spawn(1).normal((4, cfg.d_model))
        out, trace = arch.forward(cfg, params, tokens)
        np.testing.assert_allclose(out, trace.blocks[1].h_attn, atol=1e-9)


class TestEquivalences:
    def test_single_expert_standard_equals_dense(self):
        cfg = _cfg(n_experts=1, k_routed=1, variant="standard")
        rng = Rng(0)
        params = arch.init_params(cfg, rng.spawn(0))
        tokens = rng.spawn(1).normal((5, cfg.d_model))
        out, trace = arch.forward(cfg, params, tokens)
        # rebuild by hand: block0 dense, block1 attention + the only expert
        moe = params.blocks[1].feed
        h = tokens
        h = h + arch.attention_forward(h, params.blocks[0].attn, cfg.d_model)
        h = h + arch.expert_forward(h, params.blocks[0].feed)
        h = h + arch.attention_forward(h, params.blocks[1].attn, cfg.d_model)
        expected = h + arch.expert_forward(h, moe.experts[0])
        np.testing.assert_allclose(out, expected, atol=1e-12)

    def test_shared_variant_adds_shared_expert_to_routed(self):
        cfg = _cfg(variant="shared")
        rng = Rng(0)
        params = arch.init_params(cfg, rng.spawn(0))
        tokens = rng.spawn(1).normal((5, cfg.d_model))
        out, trace = arch.forward(cfg, params, tokens)
        cfg_std = _cfg(variant="standard")
        out_std, _ = arch.forward(cfg_std, params, tokens)
        moe = params.blocks[1].feed
        se = arch.expert_forward(trace.moe[0].current_input, moe.shared)
        np.testing.assert_allclose(out, out_std + se, atol=1e-12)

    def test_expert_permutation_symmetry(self):
        cfg = _cfg(variant="standard", k_routed=2)
        rng = Rng(0)
        params = arch.init_params(cfg, rng.spawn(0))
        tokens = rng.spawn(1).normal((5, cfg.d_model))
        out, _ = arch.forward(cfg, params, tokens)
        perm = [2, 0, 3, 1]
        moe = params.blocks[1].feed
        moe.experts = [moe.experts[p] for p in perm]
        moe.gate.w_gate[:] = moe.gate.w_gate[:, perm]
        moe.gate.w_noise[:] = moe.gate.w_noise[:, perm]
        out_p, _ = arch.forward(cfg, params, tokens)
        np.testing.assert_allclose(out_p, out, atol=1e-12)

    def test_cg2_uniform_coefficients_halve_direct_add(self):
        cfg = _cfg(variant="shared", combine_mode="cg2")
        rng = Rng(0)
        params = arch.init_params(cfg, rng.spawn(0))
        params.blocks[1].feed.combine.w_cg[:] = 0.0  # softmax -> (0.5, 0.5)
        tokens = rng.spawn(1).normal((5, cfg.d_model))
        out, trace = arch.forward(cfg, params, tokens)
        cfg_da = _cfg(variant="shared")
        params_da = arch.init_params(cfg_da, Rng(0).spawn(0))
        out_da, trace_da = arch.forward(cfg_da, params_da, tokens)
        h_mh = trace.blocks[1].h_attn
        np.testing.assert_allclose(out - h_mh, 0.5 * (out_da - h_mh), atol=1e-12)


class TestDualGating:
    def test_constraint_forces_distinct_experts(self):
        cfg = _cfg(variant="dgmoe", shortcut_pos="pos2")
        for seed in range(20):
            _, _, _, trace = _run(cfg, seed=seed, t=16)
            m = trace.moe[0]
            assert (m.decision.indices[:, 0] != m.decision_prev.indices[:, 0]).all()

    def test_without_constraint_identical_logits_clash(self):
        cfg = _cfg(variant="dgmoe", shortcut_pos="pos2", dgmoe_constraint=False)
        h = Rng(3).normal((7, 4))
        dec_cur, dec_prev = arch.dual_routing(h, h, False, cfg.capacity())
        np.testing.assert_array_equal(dec_cur.indices, dec_prev.indices)

    def test_constrained_current_pick_is_runner_up_on_clash(self):
        h_prev = np.array([[5.0, 1.0, 0.0]])
        h_cur = np.array([[9.0, 2.0, 1.0]])
        dec_cur, dec_prev = arch.dual_routing(h_cur, h_prev, True,
                                              _cfg().capacity())
        assert dec_prev.indices[0, 0] == 0
        assert dec_cur.indices[0, 0] == 1


class TestReplay:
    def test_noise_replay_is_bit_identical(self):
        cfg = _cfg(variant="scmoe", shortcut_pos="pos2", noise_enabled=True)
        rng = Rng(0)
        params = arch.init_params(cfg, rng.spawn(0))
        tokens = rng.spawn(1).normal((5, cfg.d_model))
        out1, trace = arch.forward(cfg, params, tokens, rng=Rng(9))
        replay = arch.replay_from_trace(trace)
        out2, _ = arch.forward(cfg, params, tokens, replay=replay)
        np.testing.assert_array_equal(out1, out2)

    def test_aux_loss_matches_reference_formula(self):
        from scmoelab import gating
        cfg = _cfg(variant="standard", k_routed=2)
        _, _, _, trace = _run(cfg, t=12)
        m = trace.moe[0]
        assert m.aux_loss == pytest.approx(
            gating.load_balance_loss(m.decision, cfg.n_experts), abs=1e-12)
