import pytest
from hypothesis import given, settings, strategies as st

from ragdcache.codec import ModelProfile
from ragdcache.costs import (
    CostParams,
    DeviceKind,
    DeviceProfile,
    Tier,
    cached_prefill_work,
    load_time,
    prefill_work,
    ttft,
)
from ragdcache.store import LookupResult, Outcome

MODEL = ModelProfile("m24", layers=24, hidden_dim=2048, kv_heads=32, head_dim=64)
PARAMS = CostParams(model=MODEL)
GPU = DeviceProfile("gpu0", DeviceKind.INFERENCE_GPU, compute_rate=1.0e10)


class TestPrefillWork:
    def test_zero_tokens(self):
        assert prefill_work(24, 2048, 0) == 0

    def test_reference_value(self):
        assert prefill_work(24, 2048, 128) == 805_306_368

    @given(st.integers(1, 64), st.integers(1, 4096), st.integers(0, 2048))
    def test_doubling_quadruples(self, layers, dim, n):
        assert prefill_work(layers, dim, 2 * n) == 4 * prefill_work(layers, dim, n)


class TestCachedPrefillWork:
    def test_no_cache_equals_full(self):
        assert cached_prefill_work(24, 2048, 16, 0) == prefill_work(24, 2048, 16)

    def test_reference_value(self):
        assert cached_prefill_work(24, 2048, 16, 112) == 100_663_296
        # eight-fold saving versus prefilling all 128 tokens
        assert prefill_work(24, 2048, 128) // cached_prefill_work(24, 2048, 16, 112) == 8

    @given(st.integers(1, 64), st.integers(1, 4096), st.integers(1, 512), st.integers(0, 2048))
    def test_never_exceeds_full_prefill(self, layers, dim, n_query, n_cached):
        assert cached_prefill_work(layers, dim, n_query, n_cached) <= prefill_work(
            layers, dim, n_query + n_cached
        )


class TestLoadTime:
    def test_zero_bytes_disk_is_seek(self):
        assert load_time(0, Tier.DISK, PARAMS) == PARAMS.disk_seek

    def test_bandwidth_reference(self):
        t = load_time(3_400_000_000, Tier.DISK, PARAMS)
        assert t == pytest.approx(PARAMS.disk_seek + 1.0)

    @given(st.integers(0, 10**10))
    def test_memory_strictly_faster_for_equal_bytes(self, n_bytes):
        assert load_time(n_bytes, Tier.MEMORY, PARAMS) < load_time(n_bytes, Tier.DISK, PARAMS)


def disk_hit(n_bytes):
    # lookup carrier for cost purposes; blob content is irrelevant here
    return LookupResult(Outcome.DISK_HIT, blob=None, load_cost_bytes=n_bytes)


MISS = LookupResult(Outcome.MISS)


class TestTtft:
    def test_miss_counts_docs_as_raw_text(self):
        total, breakdown = ttft(PARAMS, GPU, n_query=16, n_cached_tokens=112, lookup=MISS)
        assert breakdown.kv_load == 0.0
        assert total == pytest.approx(prefill_work(24, 2048, 128) / GPU.compute_rate)

    def test_miss_equals_zero_cache_hit_minus_seek(self):
        miss_total, _ = ttft(PARAMS, GPU, n_query=16, n_cached_tokens=0, lookup=MISS)
        hit_total, _ = ttft(PARAMS, GPU, n_query=16, n_cached_tokens=0, lookup=disk_hit(0))
        assert hit_total - miss_total == pytest.approx(PARAMS.disk_seek)

    def test_memory_hit_with_zero_cost_bytes_has_no_load(self):
        lookup = LookupResult(Outcome.MEMORY_HIT, blob=None, load_cost_bytes=0)
        _, breakdown = ttft(PARAMS, GPU, n_query=16, n_cached_tokens=64, lookup=lookup)
        assert breakdown.kv_load == 0.0

    @given(
        st.integers(1, 512),
        st.integers(0, 2048),
        st.integers(0, 10**9),
        st.sampled_from([Outcome.MISS, Outcome.DISK_HIT, Outcome.MEMORY_HIT]),
    )
    @settings(max_examples=250, deadline=None)
    def test_breakdown_sums_to_total(self, n_query, n_cached, n_bytes, outcome):
        lookup = (
            LookupResult(Outcome.MISS)
            if outcome is Outcome.MISS
            else LookupResult(outcome, None, n_bytes if outcome is Outcome.DISK_HIT else 0)
        )
        total, breakdown = ttft(PARAMS, GPU, n_query, n_cached, lookup)
        assert total == pytest.approx(breakdown.kv_load + breakdown.prefill, abs=1e-12)

    @given(st.integers(1, 256), st.integers(0, 1024), st.integers(0, 10**8))
    @settings(max_examples=100, deadline=None)
    def test_monotone_in_tokens_and_bytes(self, n_query, n_cached, n_bytes):
        base, _ = ttft(PARAMS, GPU, n_query, n_cached, disk_hit(n_bytes))
        more_q, _ = ttft(PARAMS, GPU, n_query + 1, n_cached, disk_hit(n_bytes))
        more_c, _ = ttft(PARAMS, GPU, n_query, n_cached + 1, disk_hit(n_bytes))
        more_b, _ = ttft(PARAMS, GPU, n_query, n_cached, disk_hit(n_bytes + 1024))
        assert more_q >= base and more_c >= base and more_b >= base

    @given(st.integers(1, 256), st.integers(0, 1024))
    @settings(max_examples=50, deadline=None)
    def test_monotone_in_rate_and_bandwidth(self, n_query, n_cached):
        fast_gpu = DeviceProfile("g", DeviceKind.INFERENCE_GPU, GPU.compute_rate * 2)
        fast_disk = CostParams(model=MODEL, disk_read_bw=PARAMS.disk_read_bw * 2)
        lookup = disk_hit(1 << 20)
        base, _ = ttft(PARAMS, GPU, n_query, n_cached, lookup)
        assert ttft(PARAMS, fast_gpu, n_query, n_cached, lookup)[0] <= base
        assert ttft(fast_disk, GPU, n_query, n_cached, lookup)[0] <= base

    @given(st.integers(1, 64), st.integers(0, 512), st.integers(0, 10**8))
    @settings(max_examples=100, deadline=None)
    def test_hit_beats_miss_exactly_when_load_below_saving(self, n_query, n_cached, n_bytes):
        lookup = disk_hit(n_bytes)
        hit_total, breakdown = ttft(PARAMS, GPU, n_query, n_cached, lookup)
        miss_total, _ = ttft(PARAMS, GPU, n_query, n_cached, MISS)
        saving = (
            prefill_work(24, 2048, n_query + n_cached)
            - cached_prefill_work(24, 2048, n_query, n_cached)
        ) / GPU.compute_rate
        if breakdown.kv_load < saving:
            assert hit_total < miss_total


class TestValidation:
    def test_device_rate_positive(self):
        with pytest.raises(ValueError):
            DeviceProfile("d", DeviceKind.CPU, compute_rate=0.0)

    def test_params_rates_positive(self):
        with pytest.raises(ValueError):
            CostParams(model=MODEL, disk_read_bw=0.0)

    def test_negative_delay_rejected(self):
        with pytest.raises(ValueError):
            CostParams(model=MODEL, network_delay=-1.0)
