import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from voco.bench import (STRATEGIES, VICUNA, FlopsConfig, Scenario, TimingStats, attention_flops, bench,
                        cache_bytes, efficiency_report, megabytes, run_timing, vicuna_report)
from voco.errors import UsageError
from voco.model import ModelConfig, init_params
from voco.runtime import compress, header_size, serialize_cache


class TestCacheBytes:
    def test_vicuna_full(self):
        assert cache_bytes(32, 4096, 576, 2) == 301_989_888
        assert abs(megabytes(cache_bytes(32, 4096, 576, 2)) - 302.4) / 302.4 < 0.002

    def test_vicuna_single(self):
        assert cache_bytes(32, 4096, 1, 2) == 524_288
        assert abs(megabytes(524_288) - 0.525) / 0.525 < 0.002

    def test_ratio(self):
        full, one = cache_bytes(32, 4096, 576, 2), cache_bytes(32, 4096, 1, 2)
        assert full / one == 576.0
        assert round(100 * (1 - one / full), 1) == 99.8

    @given(st.integers(1, 8), st.integers(1, 64), st.integers(0, 500), st.integers(0, 500), st.sampled_from([2, 4, 8]))
    def test_linear(self, L, d, a, b, bpe):
        assert cache_bytes(L, d, a + b, bpe) == cache_bytes(L, d, a, bpe) + cache_bytes(L, d, b, bpe)

    def test_invalid(self):
        with pytest.raises(UsageError):
            cache_bytes(0, 4, 1, 2)

    def test_matches_serialized_cache(self):
        cfg = ModelConfig(d_model=16, n_layers=3, n_heads=4, text_vocab=8, patch_vocab=4, max_positions=32)
        params = init_params(cfg, 0)
        for v, dtype, bpe in [(1, "float64", 8), (5, "float32", 4)]:
            cache = compress(params, np.arange(6) % 4, v, dtype=dtype)
            assert len(serialize_cache(cache)) == cache_bytes(3, 16, v, bpe) + header_size(v)


class TestFlops:
    def test_zero_new(self):
        assert attention_flops(VICUNA, 100, 0) == 0

    def test_hand_count(self):
        assert attention_flops(FlopsConfig(1, 4, 4), 0, 1) == 400

    def test_prefill_reduction(self):
        base = attention_flops(VICUNA, 0, 576 + 32)
        voco = attention_flops(VICUNA, 1, 32)
        assert 1 - voco / base > 0.90

    @given(st.integers(0, 300), st.integers(0, 300), st.integers(0, 50))
    def test_monotone(self, ctx, extra, new):
        cfg = FlopsConfig(2, 8)
        assert attention_flops(cfg, ctx + extra, new) >= attention_flops(cfg, ctx, new)
        assert attention_flops(cfg, ctx, new + 1) > attention_flops(cfg, ctx, new)

    def test_model_config_accepted(self):
        cfg = ModelConfig(d_model=4, n_layers=1, n_heads=1)
        assert attention_flops(cfg, 0, 1) == 400


class TestReport:
    def test_rows(self):
        report = vicuna_report()
        assert [r["strategy"] for r in report.rows] == list(STRATEGIES)
        assert round(100 * report.row("voco-cache")["delta_storage"], 1) == 99.8
        assert report.row("voco-cache")["delta_prefill_flops"] > 0.9

    def test_self_consistency(self):
        report = efficiency_report(Scenario(64, 2, 8), FlopsConfig(4, 64), 8)
        base, full = report.row("baseline-no-cache"), report.row("full-cache")
        for r in report.rows:
            assert abs(r["delta_prefill_flops"] - (1 - r["prefill_flops"] / base["prefill_flops"])) < 1e-12
            if r["delta_storage"] is not None:
                assert abs(r["delta_storage"] - (1 - r["cache_bytes"] / full["cache_bytes"])) < 1e-12

    def test_reference_columns(self):
        ref = vicuna_report().reference
        assert ref["published_storage_mb"]["576"] == 302.4
        assert ref["formula_storage_mb"]["1"] == 0.524288

    def test_flops_deterministic(self):
        a = efficiency_report(Scenario(), VICUNA, 2).to_dict()
        b = efficiency_report(Scenario(), VICUNA, 2).to_dict()
        assert a == b


class TestTiming:
    def test_single_repetition(self):
        params = init_params(ModelConfig(d_model=16, n_layers=1, n_heads=2, max_positions=64), 0)
        stats = run_timing(params, Scenario(16, 1, 4), repetitions=1, warmup=0)
        assert all(len(s.samples) == 1 and s.spread is None and not s.spread_defined for s in stats.values())

    def test_spread(self):
        s = TimingStats([1.0, 2.0, 3.0, 4.0, 5.0])
        assert s.median == 3.0 and s.spread == 2.0

    def test_scenario_must_fit(self):
        params = init_params(ModelConfig(max_positions=32), 0)
        with pytest.raises(UsageError):
            run_timing(params, Scenario(40, 1, 4), repetitions=1)

    def test_bench_rows(self):
        params = init_params(ModelConfig(d_model=16, n_layers=1, n_heads=2, max_positions=64), 0)
        report = bench(params, Scenario(32, 1, 4), repetitions=3)
        row = report.row("voco-cache")
        assert row["repetitions"] == 3 and row["time_median_ms"] > 0
        assert report.row("baseline-no-cache")["delta_time"] == 0.0
