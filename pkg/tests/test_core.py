import math

import pytest
from hypothesis import given, settings, strategies as st

from limitd.core import (
    Algorithm,
    FixedWindowState,
    InvalidParamsError,
    RollingWindowState,
    RuleParams,
    TokenBucketState,
    fixed_window_allow,
    rolling_window_allow,
    token_bucket_allow,
)


def bucket_params(capacity=10.0, rate=1.0):
    return RuleParams(
        window_size=60.0,
        max_requests=100,
        ttl=120.0,
        capacity=capacity,
        refill_rate=rate,
        algorithm=Algorithm.TOKEN_BUCKET,
    )


class TestRuleParams:
    def test_rejects_zero_window(self):
        with pytest.raises(InvalidParamsError):
            RuleParams(window_size=0, max_requests=1)

    def test_rejects_min_interval_at_window(self):
        with pytest.raises(InvalidParamsError):
            RuleParams(window_size=10, max_requests=1, min_interval=10)

    def test_rejects_ttl_below_window(self):
        with pytest.raises(InvalidParamsError):
            RuleParams(window_size=10, max_requests=1, ttl=5)

    def test_token_bucket_needs_positive_rate(self):
        with pytest.raises(InvalidParamsError):
            bucket_params(rate=0.0)


class TestTokenBucket:
    def test_full_bucket_exactly_exhausted(self):
        params = bucket_params()
        state = TokenBucketState.initial(params, 0.0)
        for _ in range(10):
            decision, state = token_bucket_allow(state, params, 0.0)
            assert decision.allowed
        decision, state = token_bucket_allow(state, params, 0.0)
        assert not decision.allowed
        assert decision.retry_after == pytest.approx(1.0)

    def test_refill_after_five_seconds(self):
        # min(10, 0 + 5*1) - 1 = 4 remaining after the spend
        params = bucket_params()
        state = TokenBucketState(tokens=0.0, last_refill=0.0)
        decision, state = token_bucket_allow(state, params, 5.0)
        assert decision.allowed
        assert state.tokens == pytest.approx(4.0)
        assert decision.remaining == 4

    def test_cost_above_capacity_is_invalid(self):
        params = bucket_params()
        state = TokenBucketState.initial(params, 0.0)
        with pytest.raises(InvalidParamsError):
            token_bucket_allow(state, params, 0.0, tokens_required=11)

    def test_last_refill_updated_on_denial(self):
        params = bucket_params()
        state = TokenBucketState(tokens=0.0, last_refill=0.0)
        decision, state = token_bucket_allow(state, params, 0.25)
        assert not decision.allowed
        assert state.last_refill == 0.25

    @given(
        st.lists(st.floats(min_value=0.001, max_value=5.0), min_size=1, max_size=200),
        st.floats(min_value=1.0, max_value=50.0),
        st.floats(min_value=0.01, max_value=10.0),
    )
    @settings(max_examples=60, deadline=None)
    def test_tokens_stay_within_bounds(self, gaps, capacity, rate):
        params = bucket_params(capacity=capacity, rate=rate)
        state = TokenBucketState.initial(params, 0.0)
        now = 0.0
        for gap in gaps:
            now += gap
            _, state = token_bucket_allow(state, params, now)
            assert 0.0 <= state.tokens <= params.capacity


class TestFixedWindow:
    def test_limit_exactly_reached(self):
        params = RuleParams(window_size=60, max_requests=100, ttl=120)
        state = FixedWindowState()
        for _ in range(100):
            decision, state = fixed_window_allow(state, params, 30.0)
            assert decision.allowed
        decision, state = fixed_window_allow(state, params, 30.0)
        assert not decision.allowed
        assert decision.retry_after == pytest.approx(30.0)

    def test_boundary_burst_admits_double(self):
        params = RuleParams(window_size=60, max_requests=100, ttl=120)
        state = FixedWindowState()
        admitted = 0
        for _ in range(100):
            decision, state = fixed_window_allow(state, params, 59.9)
            admitted += decision.allowed
        for _ in range(100):
            decision, state = fixed_window_allow(state, params, 60.1)
            admitted += decision.allowed
        assert admitted == 200

    def test_count_resets_across_windows(self):
        params = RuleParams(window_size=60, max_requests=1, ttl=120)
        state = FixedWindowState()
        d1, state = fixed_window_allow(state, params, 0.0)
        d2, state = fixed_window_allow(state, params, 60.0)
        assert d1.allowed and d2.allowed
        assert state.count == 1

    @given(st.lists(st.floats(min_value=0, max_value=500), min_size=1, max_size=300))
    @settings(max_examples=60, deadline=None)
    def test_aligned_window_never_exceeds_limit(self, times):
        params = RuleParams(window_size=10, max_requests=5, ttl=20)
        state = FixedWindowState()
        per_window = {}
        for t in sorted(times):
            decision, state = fixed_window_allow(state, params, t)
            if decision.allowed:
                w = math.floor(t / params.window_size)
                per_window[w] = per_window.get(w, 0) + 1
        assert all(count <= params.max_requests for count in per_window.values())


def brute_force_rolling(times, window, max_requests, min_interval=0.0):
    """Independent oracle: decide each request by scanning all previously
    admitted timestamps."""
    admitted = []
    decisions = []
    for t in times:
        in_window = [a for a in admitted if a > t - window]
        ok = len(in_window) < max_requests
        if ok and min_interval > 0 and in_window and t - in_window[-1] < min_interval:
            ok = False
        decisions.append(ok)
        if ok:
            admitted.append(t)
    return decisions, admitted


class TestRollingWindow:
    def test_window_full_denies_second_burst(self):
        params = RuleParams(window_size=60, max_requests=100, ttl=120)
        state = RollingWindowState()
        for _ in range(100):
            decision, state = rolling_window_allow(state, params, 59.9)
            assert decision.allowed
        for _ in range(100):
            decision, state = rolling_window_allow(state, params, 60.1)
            assert not decision.allowed

    def test_expired_entry_frees_slot(self):
        params = RuleParams(window_size=60, max_requests=1, ttl=120)
        state = RollingWindowState()
        d1, state = rolling_window_allow(state, params, 0.0)
        d2, state = rolling_window_allow(state, params, 61.0)
        assert d1.allowed and d2.allowed

    def test_min_interval_denies_close_requests(self):
        params = RuleParams(window_size=60, max_requests=100, ttl=120, min_interval=1.0)
        state = RollingWindowState()
        d1, state = rolling_window_allow(state, params, 0.0)
        d2, state = rolling_window_allow(state, params, 0.5)
        assert d1.allowed and not d2.allowed
        assert d2.retry_after == pytest.approx(0.5)

    def test_boundary_entry_is_cleaned(self):
        # an entry exactly window_size old no longer counts
        params = RuleParams(window_size=60, max_requests=1, ttl=120)
        state = RollingWindowState()
        _, state = rolling_window_allow(state, params, 0.0)
        decision, state = rolling_window_allow(state, params, 60.0)
        assert decision.allowed

    def test_denials_not_recorded_by_default(self):
        params = RuleParams(window_size=60, max_requests=1, ttl=120)
        state = RollingWindowState()
        _, state = rolling_window_allow(state, params, 0.0)
        _, state = rolling_window_allow(state, params, 1.0)
        assert state.timestamps == (0.0,)

    def test_count_rejected_records_denials(self):
        params = RuleParams(
            window_size=60, max_requests=1, ttl=120, count_rejected=True
        )
        state = RollingWindowState()
        _, state = rolling_window_allow(state, params, 0.0)
        decision, state = rolling_window_allow(state, params, 1.0)
        assert not decision.allowed
        assert state.timestamps == (0.0, 1.0)

    @given(
        st.lists(st.floats(min_value=0, max_value=200), min_size=1, max_size=200),
        st.integers(min_value=1, max_value=8),
        st.floats(min_value=1.0, max_value=50.0),
    )
    @settings(max_examples=80, deadline=None)
    def test_matches_brute_force_counter(self, times, max_requests, window):
        params = RuleParams(window_size=window, max_requests=max_requests, ttl=window)
        state = RollingWindowState()
        trace = sorted(times)
        got = []
        for t in trace:
            decision, state = rolling_window_allow(state, params, t)
            got.append(decision.allowed)
        expected, admitted = brute_force_rolling(trace, window, max_requests)
        assert got == expected
        # any trailing-window count over admitted timestamps stays bounded
        for t in admitted:
            assert sum(1 for a in admitted if t - window < a <= t) <= max_requests

    def test_determinism(self):
        params = RuleParams(window_size=10, max_requests=3, ttl=10)
        state = RollingWindowState(timestamps=(1.0, 2.0))
        first = rolling_window_allow(state, params, 3.0)
        second = rolling_window_allow(state, params, 3.0)
        assert first == second
        assert state.timestamps == (1.0, 2.0)  # inputs never mutated
