import json

import numpy as np
import pytest
from scipy import stats

from servesim.workload import (DEFAULT_MAX_LEN, LengthDistribution, ParameterError,
                               PRESETS, Request, Trace, TraceFormatError, generate_trace,
                               load_trace, make_prompt_tokens, save_trace,
                               summarize_trace)


def sharegpt_dist(max_len=DEFAULT_MAX_LEN):
    p = PRESETS["sharegpt"]
    return LengthDistribution(p.family, dict(p.params), max_len=max_len)


class TestGenerateTrace:
    def test_deterministic(self):
        a = generate_trace(2.0, 30, sharegpt_dist(), seed=7)
        b = generate_trace(2.0, 30, sharegpt_dist(), seed=7)
        assert a.requests == b.requests

    def test_zero_rate_empty(self):
        trace = generate_trace(0.0, 60, sharegpt_dist(), seed=1)
        assert trace.requests == []

    def test_poisson_count_and_mean_gap(self):
        # rate 2/s for 1800s: ~3600 requests, mean gap 500 ms
        trace = generate_trace(2.0, 1800, sharegpt_dist(), seed=42)
        n = len(trace)
        assert abs(n - 3600) < 4 * np.sqrt(3600)
        arr = np.array([r.arrival_us for r in trace.requests], dtype=float)
        gaps_ms = np.diff(arr) / 1000.0
        assert abs(gaps_ms.mean() - 500.0) / 500.0 < 0.05

    def test_gaps_exponential_ks(self):
        trace = generate_trace(2.0, 1800, sharegpt_dist(), seed=42)
        arr = np.array([r.arrival_us for r in trace.requests], dtype=float) / 1e6
        gaps = np.diff(arr)
        assert len(gaps) >= 1000
        res = stats.kstest(gaps, "expon", args=(0, 0.5))
        assert res.pvalue >= 0.01

    def test_lengths_clamped(self):
        dist = sharegpt_dist(max_len=64)
        trace = generate_trace(5.0, 120, dist, seed=3)
        for r in trace.requests:
            assert 1 <= r.input_len <= 64
            assert 1 <= r.output_len <= 64

    def test_arrivals_sorted_ids_unique(self):
        trace = generate_trace(10.0, 60, sharegpt_dist(), seed=5)
        arr = [r.arrival_us for r in trace.requests]
        assert arr == sorted(arr)
        ids = [r.id for r in trace.requests]
        assert len(set(ids)) == len(ids)

    def test_bad_parameters(self):
        with pytest.raises(ParameterError):
            generate_trace(-1.0, 60, sharegpt_dist(), seed=0)
        with pytest.raises(ParameterError):
            generate_trace(1.0, 0, sharegpt_dist(), seed=0)
        bad = LengthDistribution("lognormal", {"input_mu": 3, "input_sigma": 0,
                                               "output_mu": 3, "output_sigma": 1})
        with pytest.raises(ParameterError):
            generate_trace(1.0, 60, bad, seed=0)
        with pytest.raises(ParameterError):
            generate_trace(1.0, 60, LengthDistribution("empirical", {"pairs": []}), seed=0)

    def test_preset_tail_ordering(self):
        # the second preset is built to have the heavier output tail
        alp = generate_trace(2.0, 900, LengthDistribution(
            PRESETS["alpaca"].family, dict(PRESETS["alpaca"].params)), seed=11)
        shr = generate_trace(2.0, 900, sharegpt_dist(), seed=11)
        sa, ss = summarize_trace(alp), summarize_trace(shr)
        ratio_a = sa["output_len"]["p95"] / sa["output_len"]["median"]
        ratio_s = ss["output_len"]["p95"] / ss["output_len"]["median"]
        assert ratio_s > ratio_a
        assert ss["output_len"]["mean"] > sa["output_len"]["mean"]

    def test_empirical_family(self):
        dist = LengthDistribution("empirical", {"pairs": [(10, 20), (30, 40)]})
        trace = generate_trace(5.0, 60, dist, seed=2)
        for r in trace.requests:
            assert (r.input_len, r.output_len) in ((10, 20), (30, 40))


class TestPromptTokens:
    def test_same_bucket_shares_stem(self):
        a = make_prompt_tokens(1, 10, 100)
        b = make_prompt_tokens(1, 11, 104)  # same third-octave bucket as 100
        c = make_prompt_tokens(1, 12, 1000)
        assert a[:18] == b[:18]
        assert a[:18] != c[:18]

    def test_zero_salt_identical(self):
        a = make_prompt_tokens(1, 10, 100, salt_tokens=0)
        b = make_prompt_tokens(1, 99, 104, salt_tokens=0)
        assert a == b


class TestTraceFiles:
    def test_round_trip_identity(self, tmp_path):
        trace = generate_trace(5.0, 60, sharegpt_dist(), seed=9)
        path = tmp_path / "t.jsonl"
        save_trace(trace, path)
        loaded = load_trace(path)
        assert loaded.requests == trace.requests

    def test_well_formed_file(self, tmp_path):
        path = tmp_path / "t.jsonl"
        lines = [
            {"id": 0, "arrival_time_ms": 0.0, "input_len": 5, "output_len": 7},
            {"id": 1, "arrival_time_ms": 3.5, "input_len": 2, "output_len": 2},
            {"id": 2, "arrival_time_ms": 9.0, "input_len": 1, "output_len": 1},
        ]
        path.write_text("".join(json.dumps(l) + "\n" for l in lines))
        trace = load_trace(path)
        assert [r.id for r in trace.requests] == [0, 1, 2]
        assert trace.requests[1].arrival_us == 3500

    def test_missing_field_names_line(self, tmp_path):
        path = tmp_path / "t.jsonl"
        path.write_text('{"id": 0, "arrival_time_ms": 0, "input_len": 5}\n')
        with pytest.raises(TraceFormatError, match=":1:"):
            load_trace(path)

    def test_malformed_json_names_line(self, tmp_path):
        path = tmp_path / "t.jsonl"
        path.write_text('{"id": 0, "arrival_time_ms": 0, "input_len": 5, "output_len": 7}\n'
                        "not json\n")
        with pytest.raises(TraceFormatError, match=":2:"):
            load_trace(path)

    def test_duplicate_id_rejected(self, tmp_path):
        path = tmp_path / "t.jsonl"
        rec = {"id": 4, "arrival_time_ms": 0, "input_len": 5, "output_len": 7}
        path.write_text(json.dumps(rec) + "\n" + json.dumps(rec) + "\n")
        with pytest.raises(TraceFormatError, match="duplicate"):
            load_trace(path)

    def test_nonpositive_length_rejected(self, tmp_path):
        path = tmp_path / "t.jsonl"
        rec = {"id": 0, "arrival_time_ms": 0, "input_len": 5, "output_len": 0}
        path.write_text(json.dumps(rec) + "\n")
        with pytest.raises(TraceFormatError):
            load_trace(path)

    def test_out_of_order_sorted(self, tmp_path):
        path = tmp_path / "t.jsonl"
        lines = [
            {"id": 0, "arrival_time_ms": 50.0, "input_len": 5, "output_len": 7},
            {"id": 1, "arrival_time_ms": 10.0, "input_len": 2, "output_len": 2},
        ]
        path.write_text("".join(json.dumps(l) + "\n" for l in lines))
        trace = load_trace(path)
        assert [r.id for r in trace.requests] == [1, 0]


class TestSummarize:
    def test_arithmetic(self):
        reqs = [Request(i, i * 1000, s, s * 2) for i, s in enumerate((10, 20, 30))]
        summary = summarize_trace(Trace(reqs))
        assert summary["input_len"]["mean"] == 20
        assert summary["output_len"]["mean"] == 40
        assert summary["count"] == 3

    def test_empty(self):
        summary = summarize_trace(Trace([]))
        assert summary["count"] == 0
        assert summary["input_len"]["mean"] == 0.0
        assert summary["output_len"]["max"] == 0
