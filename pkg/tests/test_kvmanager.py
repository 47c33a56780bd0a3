import math
from types import SimpleNamespace

import numpy as np
import pytest

from servesim.kvmanager import (CPU, GPU, NONE, MODEL_PRESETS, MemoryAccountingError,
                                MemoryState, ModelConfig, PlanEntry, dequantize, ewt_ms,
                                kv_bytes, plan_swaps, quantize, quantized_kv_bytes)

OPT13B = MODEL_PRESETS["opt-13b"]


class TestKvBytes:
    def test_single_token_fp16(self):
        assert kv_bytes(OPT13B, 1) == 2 * 40 * 5120 * 2  # 819200

    def test_zero_tokens(self):
        assert kv_bytes(OPT13B, 0) == 0

    def test_int8_half_of_fp16(self):
        for tokens in (1, 7, 128):
            assert kv_bytes(OPT13B, tokens, bytes_per_value=1) * 2 == kv_bytes(OPT13B, tokens)

    def test_model_validation(self):
        with pytest.raises(ValueError):
            ModelConfig("bad", num_heads=3, num_layers=2, hidden_size=10)


class TestQuantizedBytes:
    def test_payload_half_of_fp16(self):
        tokens = 64
        fp16_payload = kv_bytes(OPT13B, tokens)
        channels = 2 * 40 * 5120
        q = quantized_kv_bytes(OPT13B, tokens, 8)
        assert q - channels * 8 == fp16_payload // 2

    def test_zero_tokens_no_overhead(self):
        assert quantized_kv_bytes(OPT13B, 0, 8) == 0

    def test_reference_footprint_128_tokens(self):
        q = quantized_kv_bytes(OPT13B, 128, 8)
        assert q == 52_428_800 + 3_276_800

    def test_int4_payload(self):
        channels = 2 * 40 * 5120
        q4 = quantized_kv_bytes(OPT13B, 16, 4)
        # 4-bit values are stored in whole bytes
        assert q4 == channels * 16 + channels * 8


class TestQuantize:
    def test_unit_interval_exact(self):
        qt = quantize(np.array([[0.0, 1.0]]), 8)
        assert qt.scale[0, 0] == 1.0 / 255.0
        assert qt.zero[0, 0] == 0.0
        assert qt.values[0].tolist() == [0, 255]
        deq = dequantize(qt)
        assert deq[0, 1] == 1.0
        assert deq[0, 0] == 0.0

    def test_constant_channels_exact(self):
        gen = np.random.default_rng(5)
        for _ in range(200):
            c = float(gen.uniform(-750, 750))
            x = np.full((1, int(gen.integers(1, 40))), c)
            for bits in (4, 8):
                assert np.array_equal(dequantize(quantize(x, bits)), x)

    def test_round_trip_bound(self):
        gen = np.random.default_rng(17)
        for i in range(500):
            bits = 4 if i % 2 else 8
            length = int(gen.integers(1, 513))
            scale = 10.0 ** gen.uniform(-2, 2)
            x = gen.uniform(-scale, scale, size=(3, length))
            if i % 3 == 1:
                x = np.abs(x)
            elif i % 3 == 2:
                x = -np.abs(x)
            qt = quantize(x, bits)
            err = np.abs(x - dequantize(qt))
            assert np.all(err <= qt.scale / 2 + 1e-9)

    def test_stored_integers_in_range(self):
        gen = np.random.default_rng(3)
        x = gen.normal(size=(8, 100)) * 40
        for bits in (4, 8):
            qt = quantize(x, bits)
            assert qt.values.min() >= 0
            assert qt.values.max() <= (1 << bits) - 1

    def test_idempotent_on_own_output(self):
        gen = np.random.default_rng(29)
        for i in range(300):
            bits = 4 if i % 2 else 8
            x = gen.uniform(-1, 1, size=(2, int(gen.integers(2, 257))))
            y1 = dequantize(quantize(x, bits))
            qt2 = quantize(y1, bits)
            y2 = dequantize(qt2)
            # integer codes are always stable; zero-straddling channels are
            # bit-exact in value too
            assert np.array_equal(quantize(x, bits).values, qt2.values)
            assert np.array_equal(y1, y2)

    def test_requantization_drift_bounded_single_sign(self):
        # channels whose zero-point falls outside the integer range keep
        # stable codes; values may drift by float-rounding ulps only
        gen = np.random.default_rng(31)
        for i in range(300):
            bits = 4 if i % 2 else 8
            x = np.abs(gen.uniform(1.0, 100.0, size=(2, 64)))
            qt1 = quantize(x, bits)
            y1 = dequantize(qt1)
            qt2 = quantize(y1, bits)
            y2 = dequantize(qt2)
            assert np.array_equal(qt1.values, qt2.values)
            np.testing.assert_allclose(y2, y1, rtol=1e-12, atol=0)

    def test_errors(self):
        with pytest.raises(ValueError):
            quantize(np.ones((1, 4)), 5)
        with pytest.raises(ValueError):
            quantize(np.ones((1, 0)), 8)
        with pytest.raises(ValueError):
            quantize(np.array([[1.0, np.nan]]), 8)


def make_job(level, last_promotion_us=0):
    return SimpleNamespace(level=level, last_promotion_us=last_promotion_us)


class TestEwt:
    def test_head_of_top_queue_zero(self):
        jobs = [make_job(0)]
        assert ewt_ms(jobs, [1234.0], aging_ms=1000.0, now_us=0) == [0.0]

    def test_workload_arm(self):
        # two jobs ahead (5000 + 7000 ms); promotion would take 20000 ms
        jobs = [make_job(0), make_job(0), make_job(2, last_promotion_us=0)]
        rems = [5000.0, 7000.0, 999.0]
        now = 10_000_000  # waited 10 s; T_promote = 2*15000 - 10000 = 20000
        out = ewt_ms(jobs, rems, aging_ms=15_000.0, now_us=now)
        assert out[2] == pytest.approx(12_000.0)

    def test_promotion_arm_dominates(self):
        jobs = [make_job(0), make_job(3, last_promotion_us=0)]
        out = ewt_ms(jobs, [1_000_000.0, 5.0], aging_ms=1000.0, now_us=0)
        assert out[1] == pytest.approx(3000.0)

    def test_non_decreasing_within_level(self):
        jobs = [make_job(0) for _ in range(5)]
        rems = [100.0, 200.0, 50.0, 75.0, 10.0]
        out = ewt_ms(jobs, rems, aging_ms=math.inf, now_us=0)
        assert out == sorted(out)

    def test_aging_disabled(self):
        jobs = [make_job(0), make_job(3, last_promotion_us=0)]
        out = ewt_ms(jobs, [500.0, 1.0], aging_ms=math.inf, now_us=10**9)
        assert out == [0.0, 500.0]


class TestMemoryState:
    def mem(self, gpu=10_000, cpu=10_000, bw=1000.0):
        return MemoryState(gpu_capacity=gpu, cpu_capacity=cpu, pcie_bytes_per_ms=bw)

    def test_overflow_raises(self):
        m = self.mem(gpu=100)
        with pytest.raises(MemoryAccountingError):
            m.reserve_gpu(101)

    def test_high_water(self):
        m = self.mem()
        m.reserve_gpu(4000)
        m.release_gpu(2000)
        m.reserve_gpu(1000)
        assert m.gpu_high_water == 4000
        assert m.gpu_used == 3000

    def test_transfer_timing_serialized(self):
        m = self.mem(bw=1000.0)  # 1000 bytes/ms
        a = m.start_offload(1, link_bytes=2000, gpu_bytes=0, now_us=0)
        b = m.start_offload(2, link_bytes=1000, gpu_bytes=0, now_us=0)
        assert a.complete_us == 2000
        assert b.start_us == 2000 and b.complete_us == 3000

    def test_offload_holds_gpu_until_done(self):
        m = self.mem()
        m.reserve_gpu(5000)
        cmd = m.start_offload(1, link_bytes=2500, gpu_bytes=5000, now_us=0)
        assert m.gpu_used == 5000 and m.cpu_used == 2500
        m.complete(cmd)
        assert m.gpu_used == 0 and m.cpu_used == 2500

    def test_upload_reserves_gpu_frees_cpu(self):
        m = self.mem()
        m.reserve_cpu(2500)
        cmd = m.start_upload(1, link_bytes=2500, gpu_bytes=5000, now_us=0)
        assert m.gpu_used == 5000
        m.complete(cmd)
        assert m.cpu_used == 0 and m.gpu_used == 5000


class TestPlanSwaps:
    def entry(self, job_id, residency, need, held=0, data=0, link=0):
        return PlanEntry(job_id=job_id, residency=residency, need_gpu_bytes=need,
                         held_gpu_bytes=held, data_gpu_bytes=data or need,
                         link_bytes=link or need // 2)

    def test_no_pressure_no_commands(self):
        m = MemoryState(gpu_capacity=100, cpu_capacity=100, pcie_bytes_per_ms=1.0)
        entries = [self.entry(1, GPU, 30, held=30), self.entry(2, GPU, 40, held=40)]
        plan = plan_swaps(entries, m, now_us=0)
        assert plan.commands == []
        assert plan.granted == [1, 2]

    def test_two_job_swap_scenario(self):
        # capacity for one job; the lower-EWT job sits on CPU, the higher on GPU
        m = MemoryState(gpu_capacity=50, cpu_capacity=100, pcie_bytes_per_ms=1.0)
        entries = [self.entry(1, CPU, 40), self.entry(2, GPU, 40, held=40)]
        plan = plan_swaps(entries, m, now_us=0)
        directions = {(c.job_id, c.direction) for c in plan.commands}
        assert (1, "upload") in directions
        assert (2, "offload") in directions

    def test_resident_granted_idempotent(self):
        m = MemoryState(gpu_capacity=100, cpu_capacity=100, pcie_bytes_per_ms=1.0)
        plan = plan_swaps([self.entry(1, GPU, 60, held=60)], m, now_us=0)
        assert plan.commands == []

    def test_first_fit_skip(self):
        # the big job cannot fit; a strictly smaller later one can
        m = MemoryState(gpu_capacity=50, cpu_capacity=100, pcie_bytes_per_ms=1.0)
        entries = [self.entry(1, NONE, 80), self.entry(2, NONE, 30)]
        plan = plan_swaps(entries, m, now_us=0)
        assert plan.granted == [2]
        assert plan.denied == [1]

    def test_prefix_property(self):
        # granted set is a prefix of the rank order, modulo the first-fit skip
        m = MemoryState(gpu_capacity=100, cpu_capacity=100, pcie_bytes_per_ms=1.0)
        entries = [self.entry(i, NONE, need) for i, need in
                   enumerate((40, 40, 40, 10))]
        plan = plan_swaps(entries, m, now_us=0)
        assert plan.granted == [0, 1, 3]
        assert plan.denied == [2]

    def test_in_flight_charged(self):
        m = MemoryState(gpu_capacity=100, cpu_capacity=100, pcie_bytes_per_ms=1.0)
        m.reserve_cpu(30)
        m.start_upload(9, link_bytes=30, gpu_bytes=60, now_us=0)
        plan = plan_swaps([self.entry(1, NONE, 50)], m, now_us=0)
        assert plan.granted == []
