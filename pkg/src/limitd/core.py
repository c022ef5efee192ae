"""In-memory reference limiters.

Single-process implementations of the token bucket, fixed window and rolling
window algorithms. They are used directly for simple deployments and double
as brute-force oracles for the distributed, script-based limiters: for any
trace of checks, the rolling-window oracle here must produce decisions
identical to the atomic sorted-set path.

All three operations are pure state transitions: they never mutate their
input state and the same (state, params, now) always yields the same output.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Optional, Tuple


class Algorithm(str, Enum):
    TOKEN_BUCKET = "token_bucket"
    FIXED_WINDOW = "fixed_window"
    ROLLING_WINDOW = "rolling_window"
    CONCURRENT = "concurrent"


class InvalidParamsError(ValueError):
    """Raised when limiter parameters (or a request cost) are unusable."""


@dataclass(frozen=True)
class RuleParams:
    """The tunables of one limit.

    window_size / max_requests / min_interval / ttl drive the window
    algorithms; capacity / refill_rate drive the token bucket; max_concurrent
    drives the concurrent limiter. Unused fields default from max_requests so
    a rule can switch algorithm without re-specifying everything.

    count_rejected: when true, denied rolling-window checks are still
    recorded as actions (off by default; the pseudocode only records allowed
    requests).
    """

    window_size: float
    max_requests: int
    min_interval: float = 0.0
    ttl: Optional[float] = None
    capacity: Optional[float] = None
    refill_rate: Optional[float] = None
    max_concurrent: Optional[int] = None
    algorithm: Algorithm = Algorithm.ROLLING_WINDOW
    count_rejected: bool = False

    def __post_init__(self) -> None:
        if self.window_size <= 0:
            raise InvalidParamsError("window_size must be positive")
        if self.max_requests < 1:
            raise InvalidParamsError("max_requests must be >= 1")
        if self.min_interval < 0:
            raise InvalidParamsError("min_interval must be non-negative")
        if self.min_interval >= self.window_size:
            raise InvalidParamsError("min_interval must be < window_size")
        if self.ttl is None:
            object.__setattr__(self, "ttl", self.window_size)
        if self.ttl <= 0 or self.ttl < self.window_size:
            raise InvalidParamsError("ttl must be positive and >= window_size")
        if self.capacity is None:
            object.__setattr__(self, "capacity", float(self.max_requests))
        if self.refill_rate is None:
            object.__setattr__(
                self, "refill_rate", self.max_requests / self.window_size
            )
        if self.max_concurrent is None:
            object.__setattr__(self, "max_concurrent", self.max_requests)
        if self.algorithm == Algorithm.TOKEN_BUCKET:
            if self.capacity < 1:
                raise InvalidParamsError("capacity must be >= 1")
            if self.refill_rate <= 0:
                raise InvalidParamsError("refill_rate must be positive")
        if self.max_concurrent < 1:
            raise InvalidParamsError("max_concurrent must be >= 1")


@dataclass(frozen=True)
class Decision:
    """Outcome of one limit check.

    retry_after is present only on denial; request_id only on an allowed
    concurrent-limiter check.
    """

    allowed: bool
    remaining: int
    retry_after: Optional[float] = None
    request_id: Optional[str] = None


@dataclass(frozen=True)
class TokenBucketState:
    tokens: float
    last_refill: float

    @classmethod
    def initial(cls, params: RuleParams, now: float) -> "TokenBucketState":
        return cls(tokens=params.capacity, last_refill=now)


@dataclass(frozen=True)
class FixedWindowState:
    count: int = 0
    window_start: float = 0.0


@dataclass(frozen=True)
class RollingWindowState:
    timestamps: Tuple[float, ...] = field(default_factory=tuple)


def token_bucket_allow(
    state: TokenBucketState,
    params: RuleParams,
    now: float,
    tokens_required: float = 1.0,
) -> Tuple[Decision, TokenBucketState]:
    """Refill-then-spend token bucket check.

    Tokens are refilled by elapsed-time * refill_rate (capped at capacity)
    before the spend is attempted; last_refill moves to now on both branches.
    """
    if tokens_required <= 0:
        raise InvalidParamsError("tokens_required must be positive")
    if tokens_required > params.capacity:
        raise InvalidParamsError(
            "tokens_required exceeds capacity; request can never succeed"
        )
    if now < state.last_refill:
        raise InvalidParamsError("clock moved backwards")

    tokens = min(
        params.capacity, state.tokens + (now - state.last_refill) * params.refill_rate
    )
    if tokens >= tokens_required:
        tokens -= tokens_required
        decision = Decision(allowed=True, remaining=int(math.floor(tokens)))
    else:
        retry_after = (tokens_required - tokens) / params.refill_rate
        decision = Decision(
            allowed=False, remaining=int(math.floor(tokens)), retry_after=retry_after
        )
    return decision, TokenBucketState(tokens=tokens, last_refill=now)


def fixed_window_allow(
    state: FixedWindowState, params: RuleParams, now: float
) -> Tuple[Decision, FixedWindowState]:
    """Calendar-aligned window counter; the counter resets on window rollover."""
    if now < 0:
        raise InvalidParamsError("now must be non-negative")

    window_start = math.floor(now / params.window_size) * params.window_size
    count = state.count
    if window_start > state.window_start:
        count = 0
    if count < params.max_requests:
        count += 1
        decision = Decision(allowed=True, remaining=params.max_requests - count)
    else:
        retry_after = window_start + params.window_size - now
        decision = Decision(allowed=False, remaining=0, retry_after=retry_after)
    return decision, FixedWindowState(count=count, window_start=window_start)


def rolling_window_allow(
    state: RollingWindowState, params: RuleParams, now: float
) -> Tuple[Decision, RollingWindowState]:
    """Trailing-window check over individual request timestamps.

    Entries with timestamp <= now - window_size are dropped (the cleanup
    range is inclusive of the boundary, matching the score-range removal the
    distributed path performs). When min_interval > 0 a request too close to
    the newest recorded one is denied even if the window has room.
    """
    if state.timestamps and now < state.timestamps[-1]:
        raise InvalidParamsError("clock moved backwards")

    window_start = now - params.window_size
    timestamps = tuple(t for t in state.timestamps if t > window_start)
    count = len(timestamps)

    if count >= params.max_requests:
        retry_after = timestamps[0] + params.window_size - now
        decision = Decision(allowed=False, remaining=0, retry_after=retry_after)
        if params.count_rejected:
            timestamps = timestamps + (now,)
        return decision, RollingWindowState(timestamps=timestamps)

    if (
        params.min_interval > 0
        and timestamps
        and now - timestamps[-1] < params.min_interval
    ):
        retry_after = timestamps[-1] + params.min_interval - now
        remaining = max(0, params.max_requests - count)
        decision = Decision(allowed=False, remaining=remaining, retry_after=retry_after)
        if params.count_rejected:
            timestamps = timestamps + (now,)
        return decision, RollingWindowState(timestamps=timestamps)

    timestamps = timestamps + (now,)
    decision = Decision(allowed=True, remaining=params.max_requests - len(timestamps))
    return decision, RollingWindowState(timestamps=timestamps)


def with_algorithm(params: RuleParams, algorithm: Algorithm) -> RuleParams:
    """Copy of params targeting a different algorithm."""
    return replace(params, algorithm=algorithm)
