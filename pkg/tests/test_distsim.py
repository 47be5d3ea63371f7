import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from scmoelab import distsim, sched
from scmoelab.distsim import (HardwareProfile, OpNode, StageCosts,
                              StrategySpec, alltoall_duration, build_dag,
                              run_sim)


def _costs(t_attn=3.0, t_mlp=4.0, t_se=7.0, t_gate=1.0, t_enc=1.0, t_dec=1.0,
           t_expert=6.0, nbytes=14.0):
    return StageCosts(t_attn=t_attn, t_mlp=t_mlp, t_se=t_se, t_gate=t_gate,
                      t_encode=t_enc, t_decode=t_dec, t_expert=t_expert,
                      bytes_dispatch=nbytes)


def _all_strategies():
    return [StrategySpec("standard_sequential", k=2),
            StrategySpec("standard_pipeline", k=2, chunks=2),
            StrategySpec("shared_expert_sequential"),
            StrategySpec("scmoe_overlap", pos="pos2"),
            StrategySpec("scmoe_overlap_pipeline", pos="pos2", chunks=2)]


class TestAllToAll:
    def test_zero_bytes_is_latency_only(self):
        assert alltoall_duration(0.0, HardwareProfile(alpha=1.5, beta=9.0)) == 1.5

    def test_single_device_has_no_remote_traffic(self):
        prof = HardwareProfile(n_devices=1, alpha=2.0, beta=5.0)
        assert alltoall_duration(1e9, prof) == 2.0

    def test_alpha_beta_arithmetic(self):
        prof = HardwareProfile(n_devices=8, alpha=1.0, beta=0.5)
        assert alltoall_duration(16.0, prof) == 1.0 + 0.5 * 16.0 * 7 / 8


class TestRunSim:
    def test_chain_makespan(self):
        nodes = [OpNode("a", "Attention", "compute", 1.0),
                 OpNode("b", "MLP", "compute", 2.0, ("a",)),
                 OpNode("c", "SharedExpert", "compute", 3.0, ("b",))]
        assert run_sim(nodes).makespan == 6.0

    def test_independent_streams_overlap(self):
        nodes = [OpNode("a", "Attention", "compute", 5.0),
                 OpNode("b", "Dispatch", "comm", 3.0)]
        assert run_sim(nodes).makespan == 5.0

    def test_fifo_stream_serializes_independent_ops(self):
        nodes = [OpNode("a", "Attention", "compute", 5.0),
                 OpNode("b", "MLP", "compute", 3.0)]
        assert run_sim(nodes).makespan == 8.0

    def test_cycle_detected(self):
        nodes = [OpNode("a", "Attention", "compute", 1.0, ("b",)),
                 OpNode("b", "MLP", "compute", 1.0, ("a",))]
        with pytest.raises(ValueError, match="cycle"):
            run_sim(nodes)

    def test_duplicate_and_unknown_ids_rejected(self):
        with pytest.raises(ValueError, match="duplicate"):
            run_sim([OpNode("a", "MLP", "compute", 1.0),
                     OpNode("a", "MLP", "compute", 1.0)])
        with pytest.raises(ValueError, match="unknown"):
            run_sim([OpNode("a", "MLP", "compute", 1.0, ("ghost",))])

    def test_op_kind_stream_contract(self):
        with pytest.raises(ValueError):
            OpNode("d", "Dispatch", "compute", 1.0)
        with pytest.raises(ValueError):
            OpNode("m", "MLP", "comm", 1.0)


class TestDagShape:
    def test_sequential_is_a_single_chain(self):
        nodes = build_dag(StrategySpec("standard_sequential", k=2), _costs(),
                          HardwareProfile())
        tl = run_sim(nodes)
        assert tl.makespan == sum(n.duration for n in nodes)

    def test_pipeline_dispatch_chunks_depend_only_on_encode(self):
        nodes = build_dag(StrategySpec("standard_pipeline", k=2, chunks=2),
                          _costs(), HardwareProfile())
        by_id = {n.id: n for n in nodes}
        assert by_id["dispatch0"].deps == ("encode",)
        assert by_id["dispatch1"].deps == ("encode",)
        assert by_id["expert1"].deps == ("dispatch1",)

    def test_pipeline_overlaps_second_dispatch_with_first_expert(self):
        prof = HardwareProfile(n_devices=2, alpha=0.0, beta=1.0)
        nodes = build_dag(StrategySpec("standard_pipeline", k=2, chunks=2),
                          _costs(), prof)
        tl = run_sim(nodes)
        d2, e1 = tl.span_of("dispatch1"), tl.span_of("expert0")
        assert d2.start < e1.end and e1.start < d2.end

    def test_overlap_dag_dependency_contract(self):
        nodes = build_dag(StrategySpec("scmoe_overlap", pos="pos2"), _costs(),
                          HardwareProfile())
        by_id = {n.id: n for n in nodes}
        assert by_id["dispatch0"].deps == ("encode",)
        assert "combine0" not in by_id["shared"].deps
        assert set(by_id["combine_outputs"].deps) == {"decode", "shared"}

    def test_invalid_strategy_inputs(self):
        with pytest.raises(ValueError):
            StrategySpec("mystery")
        with pytest.raises(ValueError):
            StrategySpec("scmoe_overlap", pos="pos9")
        with pytest.raises(ValueError):
            StrategySpec("shared_expert_sequential", k=2)


class TestInvariants:
    @pytest.mark.parametrize("strat", _all_strategies(),
                             ids=lambda s: s.label)
    def test_work_conservation_and_no_overlap(self, strat):
        prof = HardwareProfile(n_devices=4, alpha=1.0, beta=0.25)
        nodes = build_dag(strat, _costs(), prof)
        tl = run_sim(nodes)
        for stream in ("compute", "comm"):
            spans = sorted(tl.stream_spans(stream), key=lambda s: s.start)
            busy = sum(s.end - s.start for s in spans)
            want = sum(n.duration for n in nodes if n.stream == stream)
            assert busy == pytest.approx(want, abs=1e-9)
            for a, b in zip(spans, spans[1:]):
                assert a.end <= b.start + 1e-12

    @pytest.mark.parametrize("strat", _all_strategies(),
                             ids=lambda s: s.label)
    def test_makespan_lower_bound(self, strat):
        prof = HardwareProfile(n_devices=4, alpha=1.0, beta=0.25)
        nodes = build_dag(strat, _costs(), prof)
        tl = run_sim(nodes)
        compute_total = sum(n.duration for n in nodes if n.stream == "compute")
        assert tl.makespan >= compute_total - 1e-12

    def test_determinism(self):
        prof = HardwareProfile(n_devices=4, alpha=1.0, beta=0.25)
        strat = StrategySpec("scmoe_overlap_pipeline", pos="pos3", chunks=3)
        a = run_sim(build_dag(strat, _costs(), prof)).to_json()
        b = run_sim(build_dag(strat, _costs(), prof)).to_json()
        assert a == b

    @settings(max_examples=60, deadline=None)
    @given(st.integers(1, 8), st.integers(1, 6), st.integers(0, 20),
           st.integers(1, 10))
    def test_pipelining_never_slower_than_sequential(self, k, chunks, b, exp):
        costs = _costs(t_expert=float(exp), nbytes=float(b))
        prof = HardwareProfile(n_devices=2, alpha=0.0, beta=1.0)
        seq = run_sim(build_dag(StrategySpec("standard_sequential", k=k),
                                costs, prof)).makespan
        pipe = run_sim(build_dag(StrategySpec("standard_pipeline", k=k,
                                              chunks=chunks), costs,
                                 prof)).makespan
        assert pipe <= seq + 1e-9

    def test_pipeline_first_dispatch_and_last_combine_stay_exposed(self):
        prof = HardwareProfile(n_devices=2, alpha=0.0, beta=1.0)
        nodes = build_dag(StrategySpec("standard_pipeline", k=2, chunks=2),
                          _costs(), prof)
        tl = run_sim(nodes)
        kinds = {n.id: n for n in nodes}
        d0 = tl.span_of("dispatch0")
        c_last = tl.span_of("combine1")
        compute = [s for s in tl.spans if kinds[s.op_id].stream == "compute"]
        # nothing computes while the first dispatch and last combine run
        for s in (d0, c_last):
            for cs in compute:
                assert cs.end <= s.start + 1e-12 or cs.start >= s.end - 1e-12


class TestFullOverlap:
    def test_zero_objective_means_compute_bound_makespan(self):
        # window [mlp=4, attn=3, se=7]: slot 2 gives pre=7, post=7
        costs = _costs(t_attn=3.0, t_mlp=4.0, t_se=7.0)
        prof = HardwareProfile(n_devices=2, alpha=0.0, beta=1.0)  # a2a = 7
        disp = alltoall_duration(costs.bytes_dispatch, prof)
        choice = sched.choose_slot(sched.CostVector(
            comp=[4.0, 3.0, 7.0], t_disp=disp, t_comb=disp, t_expert=6.0))
        assert choice.objective == 0.0
        nodes = build_dag(StrategySpec("scmoe_overlap", pos="pos2"), costs, prof)
        tl = run_sim(nodes)
        compute_total = sum(n.duration for n in nodes
                            if n.stream == "compute" and n.kind != "ExpertCompute")
        assert tl.makespan == compute_total + 6.0  # bit-exact
        assert distsim.comm_overlap_fraction(nodes, tl) == 1.0


class TestCalibration:
    def test_zero_target_zeroes_the_link(self):
        prof = distsim.calibrate_profile(0.0, _costs())
        assert prof.alpha == 0.0 and prof.beta == 0.0

    @pytest.mark.parametrize("target", [0.60, 0.15])
    def test_target_fraction_reached(self, target):
        costs = distsim.derive_costs(64, 128, 32, HardwareProfile())
        prof = distsim.calibrate_profile(target, costs)
        res, _ = distsim.simulate_strategy(
            StrategySpec("standard_sequential", k=2), costs, prof)
        assert res.comm_fraction == pytest.approx(target, abs=1e-6)

    def test_comm_free_profile_ties_all_sequential_compute(self):
        costs = _costs()
        prof = HardwareProfile(alpha=0.0, beta=0.0)
        rep = distsim.compare_strategies(_all_strategies(), costs, prof)
        seq = rep.result("standard_sequential-top2").makespan
        pipe = rep.result("standard_pipeline-top2-c2").makespan
        assert pipe == pytest.approx(seq, abs=1e-9)


def test_derive_costs_flop_scaling():
    prof = HardwareProfile(time_per_flop=1.0)
    c = distsim.derive_costs(8, 16, 4, prof)
    assert c.t_mlp == 4.0 * 4 * 8 * 16
    assert c.t_attn == 8.0 * 4 * 64 + 4.0 * 16 * 8
    assert c.t_gate == pytest.approx(0.05 * c.t_mlp)
    assert c.bytes_dispatch == 4 * 8 * 2.0


def test_measure_toy_costs_smoke():
    c = distsim.measure_toy_costs(d_model=64, d_hidden=128, n_tokens=32,
                                  repeats=2)
    assert c.t_mlp > 0 and c.t_attn > 0


def test_timeline_csv_and_json(tmp_path):
    nodes = build_dag(StrategySpec("standard_sequential", k=1), _costs(),
                      HardwareProfile())
    tl = run_sim(nodes)
    path = tmp_path / "tl.csv"
    tl.write_csv(path)
    lines = path.read_text().splitlines()
    assert lines[0] == "device,stream,op,start,end"
    assert len(lines) == len(nodes) + 1
    assert '"makespan"' in tl.to_json()
