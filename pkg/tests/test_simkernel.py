import dataclasses

import numpy as np
import pytest

from specgate.conformal import online_calibrate
from specgate.pipeline import CONTINUE_SAMPLING, PipelineConfig, run_episode
from specgate.simkernel import (
    BARRIER,
    CostModel,
    arithmetic_intensity,
    async_intensity,
    intensity_of,
    simulate_async,
    simulate_sync,
)
from specgate.synthetic import ProcessParams, synthetic_calibration_source

NO_ANSWER = ProcessParams(answer_hazard=lambda t: 0.0)


def episode(m=4, n=2, turns=3, k_d=16, k_t=16, alpha=0.4, seed=0, params=NO_ANSWER,
            token_limit=100_000):
    ids = [f"q-{i:04d}" for i in range(n)]
    pool = online_calibrate(ids, 6, synthetic_calibration_source(params, k_d, seed))
    cfg = PipelineConfig(m=m, k_d=k_d, k_t=k_t, max_turns=turns, alpha=alpha,
                         token_limit=token_limit, seed=seed,
                         intervention_mode=CONTINUE_SAMPLING)
    return run_episode(cfg, pool, params)


def zeroed_cost(**kw):
    base = dict(t_c=0.0, t_m=0.0,
                draft_flops_per_token=0.0, target_flops_per_token=0.0,
                verify_flops_per_token=0.0, draft_bytes_per_token=0.0,
                target_bytes_per_token=0.0, verify_bytes_per_token=0.0,
                kv_bytes_per_token=0.0, barrier_base=0.0,
                barrier_cost_per_candidate=0.0, sync_growth=0.0,
                verify_lookup_cost=0.0, separate_devices=False)
    base.update(kw)
    return CostModel(**base)


class TestIntensityOps:
    def test_zero_flops(self):
        assert arithmetic_intensity(0.0, 2.0) == 0.0

    def test_hand_ratio(self):
        assert arithmetic_intensity(10.0, 2.0) == 5.0

    def test_scale_invariance(self):
        assert arithmetic_intensity(10.0, 2.0) == arithmetic_intensity(20.0, 4.0)

    def test_zero_bytes_error(self):
        with pytest.raises(ValueError, match="undefined intensity"):
            arithmetic_intensity(5.0, 0.0)

    def test_async_no_sync(self):
        assert async_intensity(3.0, 3.0, 0.0) == 1.0

    def test_async_hand_value(self):
        assert async_intensity(8.0, 1.0, 3.0) == 2.0

    def test_async_monotone_in_sync_time(self):
        values = [async_intensity(5.0, 1.0, ts) for ts in (0.0, 1.0, 2.0, 4.0)]
        assert all(b < a for a, b in zip(values, values[1:]))

    def test_async_zero_denominator(self):
        with pytest.raises(ValueError, match="undefined intensity"):
            async_intensity(1.0, 0.0, 0.0)


class TestSyncMakespanClosedForm:
    def test_single_chain_hand_sum(self):
        # one chain, one turn, 500 draft tokens at (t_c * flops) = 1e-3 s/token,
        # 2 s barrier, all target/verify costs zero: makespan = 0.5 + 2.0
        ep = episode(m=1, n=1, turns=1, k_d=500, alpha=0.4, token_limit=10_000)
        cost = zeroed_cost(t_c=1e-3, draft_flops_per_token=1.0, barrier_base=2.0)
        sched = simulate_sync(ep, cost)
        assert sched.makespan == pytest.approx(2.5)

    def test_barrier_event_present_every_turn(self):
        ep = episode(turns=3)
        sched = simulate_sync(ep, CostModel())
        barriers = [e for e in sched.events if e.kind == BARRIER]
        assert len(barriers) == ep.num_turns

    def test_sync_time_matches_closed_form(self):
        ep = episode(m=8, n=2, turns=4)
        cost = CostModel()
        sched = simulate_sync(ep, cost)
        for t, (dur, active) in enumerate(zip(sched.per_turn_sync_time,
                                              sched.per_turn_active)):
            expected = cost.barrier_base + cost.barrier_cost_per_candidate * active * (
                (1 + cost.sync_growth) ** t)
            assert dur == pytest.approx(expected, rel=1e-12)


class TestDominance:
    def test_zero_barrier_equality_single_device(self):
        ep = episode(m=4, n=2, turns=3)
        cost = zeroed_cost(t_c=1e-6, t_m=1e-9,
                           draft_flops_per_token=3.0, target_flops_per_token=9.0,
                           verify_flops_per_token=9.0, draft_bytes_per_token=5.0,
                           target_bytes_per_token=11.0, verify_bytes_per_token=2.0)
        sync = simulate_sync(ep, cost)
        asyn = simulate_async(ep, cost)
        assert asyn.makespan == pytest.approx(sync.makespan, rel=1e-12)

    def test_async_dominates_100_random_configs(self):
        rng = np.random.default_rng(2024)
        ep_small = episode(m=3, n=2, turns=3)
        ep_big = episode(m=6, n=2, turns=4, alpha=0.5, seed=5)
        for i in range(100):
            ep = ep_small if i % 2 else ep_big
            per_cand = float(rng.uniform(1e-4, 0.5))
            cost = CostModel(
                t_c=float(rng.uniform(1e-15, 1e-12)),
                t_m=float(rng.uniform(1e-14, 1e-12)),
                draft_flops_per_token=float(rng.uniform(1e8, 1e10)),
                target_flops_per_token=float(rng.uniform(1e10, 1e11)),
                verify_flops_per_token=float(rng.uniform(1e10, 1e11)),
                draft_bytes_per_token=float(rng.uniform(1e8, 1e10)),
                target_bytes_per_token=float(rng.uniform(1e9, 1e11)),
                verify_bytes_per_token=float(rng.uniform(1e8, 1e10)),
                barrier_base=float(rng.uniform(1e-3, 1.0)),
                barrier_cost_per_candidate=per_cand,
                sync_growth=float(rng.uniform(0.0, 0.6)),
                verify_lookup_cost=float(rng.uniform(0.0, per_cand)),
                separate_devices=bool(i % 3),
            )
            sync = simulate_sync(ep, cost)
            asyn = simulate_async(ep, cost)
            assert asyn.makespan < sync.makespan, f"config {i}"

    def test_single_chain_async_is_sync_minus_barriers(self):
        ep = episode(m=1, n=1, turns=3)
        cost = dataclasses.replace(CostModel(), verify_lookup_cost=0.0)
        sync = simulate_sync(ep, cost)
        asyn = simulate_async(ep, cost)
        barrier_total = sum(e.duration for e in sync.events if e.kind == BARRIER)
        assert asyn.makespan == pytest.approx(sync.makespan - barrier_total)


class TestConservation:
    def test_single_device_no_idle_sync(self):
        ep = episode(m=3, n=2, turns=3)
        cost = dataclasses.replace(CostModel(), separate_devices=False)
        sched = simulate_sync(ep, cost)
        assert sched.makespan == pytest.approx(sum(e.duration for e in sched.events))

    def test_single_device_no_idle_async(self):
        ep = episode(m=3, n=2, turns=3)
        cost = dataclasses.replace(CostModel(), separate_devices=False)
        sched = simulate_async(ep, cost)
        assert sched.makespan == pytest.approx(sum(e.duration for e in sched.events))

    def test_events_sorted_and_makespan_is_max_end(self):
        ep = episode()
        for sched in (simulate_sync(ep, CostModel()), simulate_async(ep, CostModel())):
            starts = [e.start for e in sched.events]
            assert starts == sorted(starts)
            assert sched.makespan == max(e.end for e in sched.events)

    def test_determinism(self):
        ep = episode()
        a = simulate_sync(ep, CostModel())
        b = simulate_sync(ep, CostModel())
        assert a.events == b.events and a.makespan == b.makespan


class TestMemoryLedger:
    def test_concurrent_chain_peak(self):
        # 16 chains, one turn of 500 tokens each, kv 1e5 bytes/token
        ep = episode(m=16, n=1, turns=1, k_d=500, alpha=1e-9, token_limit=10_000)
        cost = zeroed_cost(t_c=1e-6, draft_flops_per_token=1.0,
                           verify_flops_per_token=1.0, kv_bytes_per_token=1e5)
        sched = simulate_sync(ep, cost)
        assert sched.peak_memory_bytes == pytest.approx(16 * 500 * 1e5)
        assert not sched.oom

    def test_oom_flag(self):
        ep = episode(m=16, n=1, turns=1, k_d=500, alpha=1e-9, token_limit=10_000)
        cost = dataclasses.replace(
            zeroed_cost(t_c=1e-6, draft_flops_per_token=1.0, verify_flops_per_token=1.0,
                        kv_bytes_per_token=1e5),
            capacity_bytes=1e8)
        sched = simulate_sync(ep, cost)
        assert sched.oom

    def test_peak_memory_nondecreasing_in_m(self):
        peaks = []
        for m in (2, 4, 8, 16):
            ep = episode(m=m, n=1, turns=2, k_d=64, token_limit=10_000)
            peaks.append(simulate_sync(ep, CostModel()).peak_memory_bytes)
        assert all(b >= a for a, b in zip(peaks, peaks[1:]))


class TestIntensityReport:
    def test_sync_r_strictly_decreasing_in_m(self):
        values = []
        for m in (4, 8, 16, 32):
            ep = episode(m=m, n=2, turns=3, k_d=32, k_t=32)
            values.append(intensity_of(simulate_sync(ep, CostModel()), CostModel()).r)
        assert all(b < a for a, b in zip(values, values[1:]))

    def test_async_r_constant_in_m(self):
        values = []
        for m in (4, 8, 16, 32):
            ep = episode(m=m, n=2, turns=3, k_d=32, k_t=32)
            values.append(intensity_of(simulate_async(ep, CostModel()), CostModel()).r)
        ref = values[0]
        assert all(abs(v - ref) / ref < 0.05 for v in values)

    def test_zero_lookup_gives_tc_over_tm(self):
        ep = episode()
        cost = dataclasses.replace(CostModel(), verify_lookup_cost=0.0)
        report = intensity_of(simulate_async(ep, cost), cost)
        assert report.t_s == 0.0
        assert report.r == pytest.approx(report.t_c / report.t_m)
        assert report.r_approx is None

    def test_zero_token_schedule_error(self):
        ep = episode(m=1, n=1, turns=1)
        cost = zeroed_cost()
        sched = simulate_sync(ep, cost)
        with pytest.raises(ValueError, match="undefined intensity"):
            intensity_of(sched, cost)

    def test_csv_export_schema(self):
        ep = episode()
        sched = simulate_async(ep, CostModel())
        lines = sched.to_csv().splitlines()
        assert lines[0] == "time_start,time_end,kind,chain_id,tokens,device"
        assert len(lines) == len(sched.events) + 1
