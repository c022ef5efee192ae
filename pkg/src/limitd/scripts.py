"""Catalog of registered atomic procedures.

Each procedure is the server-side half of one limiter: it receives the target
keys and rendered decimal-string arguments, performs its reads and writes as
one atomic unit inside the engine's serialized context, and returns a flat
result list (strings/ints), in the spirit of store-side scripting.

Identifiers are canonical strings; the content hash of the identifier is what
callers execute by. Registering the same identifier twice yields the same
hash, and the hash is stable across processes.
"""

from __future__ import annotations

import math
from typing import Sequence

from .engine import ScriptRegistry, SortedSetEngine

ROLLING_WINDOW_SCRIPT = "limitd/rolling_window/1"
TOKEN_BUCKET_SCRIPT = "limitd/token_bucket/1"
FIXED_WINDOW_SCRIPT = "limitd/fixed_window/1"
CONCURRENT_SCRIPT = "limitd/concurrent_limiter/1"
COUNTER_INCR_SCRIPT = "limitd/counter_incr/1"

_NO_RETRY = ""


def _fmt(value: float) -> str:
    return repr(float(value))


def rolling_window_proc(
    engine: SortedSetEngine, keys: Sequence[str], args: Sequence[str]
) -> list:
    """ARGS: window_size, max_requests, min_interval, ttl, now, count_rejected.

    Cleanup, count, min-interval gate, record, refresh TTL -- in that order,
    mirroring the in-memory rolling-window oracle decision for decision.
    Denials do not record (unless count_rejected) and do not refresh TTL.
    """
    key = keys[0]
    window_size = float(args[0])
    max_requests = int(args[1])
    min_interval = float(args[2])
    ttl = float(args[3])
    now = float(args[4])
    count_rejected = len(args) > 5 and args[5] == "1"

    window_start = now - window_size
    engine.zrem_range_by_score(key, -math.inf, window_start)
    count = engine.zcard(key)

    if count >= max_requests:
        oldest = engine.zrev_range_with_scores(key, count - 1, count - 1)
        retry_after = oldest[0][1] + window_size - now
        if count_rejected:
            _record(engine, key, now)
        return [0, 0, _fmt(retry_after)]

    if min_interval > 0 and count > 0:
        newest = engine.zrev_range_with_scores(key, 0, 0)
        if now - newest[0][1] < min_interval:
            retry_after = newest[0][1] + min_interval - now
            remaining = max(0, max_requests - count)
            if count_rejected:
                _record(engine, key, now)
            return [0, remaining, _fmt(retry_after)]

    _record(engine, key, now)
    engine.expire_at(key, now + ttl)
    return [1, max_requests - (count + 1), _NO_RETRY]


def _record(engine: SortedSetEngine, key: str, now: float) -> None:
    # Member is the rendered timestamp itself; two checks in the same clock
    # tick would collide, so uniqueness is restored with a short suffix.
    member = repr(now)
    if engine.zscore(key, member) is not None:
        i = 1
        while engine.zscore(key, f"{member}/{i}") is not None:
            i += 1
        member = f"{member}/{i}"
    engine.zadd(key, now, member)


def token_bucket_proc(
    engine: SortedSetEngine, keys: Sequence[str], args: Sequence[str]
) -> list:
    """ARGS: capacity, refill_rate, tokens_required, now, ttl.

    Bucket state lives as two scalar-field members (tokens, last_refill)."""
    key = keys[0]
    capacity = float(args[0])
    refill_rate = float(args[1])
    tokens_required = float(args[2])
    now = float(args[3])
    ttl = float(args[4])

    tokens = engine.zscore(key, "tokens")
    last_refill = engine.zscore(key, "last_refill")
    if tokens is None or last_refill is None:
        tokens, last_refill = capacity, now

    tokens = min(capacity, tokens + (now - last_refill) * refill_rate)
    if tokens >= tokens_required:
        tokens -= tokens_required
        allowed, retry = 1, _NO_RETRY
    else:
        allowed, retry = 0, _fmt((tokens_required - tokens) / refill_rate)
    engine.zadd(key, tokens, "tokens")
    engine.zadd(key, now, "last_refill")
    engine.expire_at(key, now + ttl)
    return [allowed, int(math.floor(tokens)), retry]


def fixed_window_proc(
    engine: SortedSetEngine, keys: Sequence[str], args: Sequence[str]
) -> list:
    """ARGS: window_size, max_requests, now, ttl."""
    key = keys[0]
    window_size = float(args[0])
    max_requests = int(args[1])
    now = float(args[2])
    ttl = float(args[3])

    window_start = math.floor(now / window_size) * window_size
    count = engine.zscore(key, "count")
    stored_start = engine.zscore(key, "window_start")
    if count is None or stored_start is None or stored_start < window_start:
        count = 0.0
    if count < max_requests:
        count += 1
        engine.zadd(key, count, "count")
        engine.zadd(key, window_start, "window_start")
        engine.expire_at(key, now + ttl)
        return [1, max_requests - int(count), _NO_RETRY]
    return [0, 0, _fmt(window_start + window_size - now)]


def concurrent_proc(
    engine: SortedSetEngine, keys: Sequence[str], args: Sequence[str]
) -> list:
    """ARGS: window_size, max_concurrent, ttl, now, request_id.

    In-flight entries older than window_size are treated as leaked and
    cleaned. Returns a "dup" status when the supplied request id already
    exists, so the caller retries with a fresh id.
    """
    key = keys[0]
    window_size = float(args[0])
    max_concurrent = int(args[1])
    ttl = float(args[2])
    now = float(args[3])
    request_id = args[4]

    engine.zrem_range_by_score(key, -math.inf, now - window_size)
    count = engine.zcard(key)
    if count >= max_concurrent:
        oldest = engine.zrev_range_with_scores(key, count - 1, count - 1)
        retry_after = oldest[0][1] + window_size - now
        return [0, 0, _fmt(retry_after), "denied"]
    if engine.zscore(key, request_id) is not None:
        return [0, max_concurrent - count, _NO_RETRY, "dup"]
    engine.zadd(key, now, request_id)
    engine.expire_at(key, now + ttl)
    return [1, max_concurrent - (count + 1), _NO_RETRY, "ok"]


def counter_incr_proc(
    engine: SortedSetEngine, keys: Sequence[str], args: Sequence[str]
) -> list:
    """ARGS: delta. Atomic read-modify-write on a scalar counter member."""
    key = keys[0]
    delta = float(args[0]) if args else 1.0
    value = engine.zscore(key, "counter") or 0.0
    value += delta
    engine.zadd(key, value, "counter")
    return [int(value)]


ALGORITHM_SCRIPTS = {
    "rolling_window": ROLLING_WINDOW_SCRIPT,
    "token_bucket": TOKEN_BUCKET_SCRIPT,
    "fixed_window": FIXED_WINDOW_SCRIPT,
    "concurrent": CONCURRENT_SCRIPT,
}


def register_catalog(registry: ScriptRegistry) -> None:
    """Install the shipped procedures into an engine's registry."""
    registry.register(ROLLING_WINDOW_SCRIPT, rolling_window_proc)
    registry.register(TOKEN_BUCKET_SCRIPT, token_bucket_proc)
    registry.register(FIXED_WINDOW_SCRIPT, fixed_window_proc)
    registry.register(CONCURRENT_SCRIPT, concurrent_proc)
    registry.register(COUNTER_INCR_SCRIPT, counter_incr_proc)


def new_engine(clock=None) -> SortedSetEngine:
    """Engine with the full script catalog registered."""
    engine = SortedSetEngine(clock=clock)
    register_catalog(engine.registry)
    return engine
