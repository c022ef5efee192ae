"""Distributed-grade limiters: atomic scripts over the sorted-set engine.

A stateless facade keyed per user/dimension. Every check executes as one
atomic script on the engine; the caller supplies the timestamp so that
simulation and property tests stay deterministic.
"""

from __future__ import annotations

import random
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

from .core import Algorithm, Decision, InvalidParamsError, RuleParams
from .engine import SortedSetEngine
from .scripts import (
    CONCURRENT_SCRIPT,
    FIXED_WINDOW_SCRIPT,
    ROLLING_WINDOW_SCRIPT,
    TOKEN_BUCKET_SCRIPT,
)


class RateLimitExceeded(Exception):
    def __init__(self, decision: Decision) -> None:
        super().__init__("rate limit exceeded")
        self.decision = decision


@dataclass(frozen=True)
class LimitKey:
    """namespace:discriminator, e.g. rate_limiter:u42 or a rule-defined label."""

    namespace: str
    discriminator: str

    def __post_init__(self) -> None:
        if not self.discriminator:
            raise ValueError("discriminator must be non-empty")

    def render(self) -> str:
        return f"{self.namespace}:{self.discriminator}"


def _fmt(value: float) -> str:
    return repr(float(value))


def _parse_retry(raw: str) -> Optional[float]:
    return float(raw) if raw else None


class AtomicLimiters:
    """Facade running limiter checks as atomic scripts on one engine.

    Safe for use from any number of threads; atomicity is delegated entirely
    to the engine's serialized script execution. The RNG (request-id source)
    is seedable for deterministic tests and defaults to an os-entropy seed.
    """

    def __init__(self, engine: SortedSetEngine, rng: Optional[random.Random] = None) -> None:
        self.engine = engine
        self._rng = rng if rng is not None else random.Random()
        self._hashes = {
            Algorithm.ROLLING_WINDOW: engine.load_script(ROLLING_WINDOW_SCRIPT),
            Algorithm.TOKEN_BUCKET: engine.load_script(TOKEN_BUCKET_SCRIPT),
            Algorithm.FIXED_WINDOW: engine.load_script(FIXED_WINDOW_SCRIPT),
            Algorithm.CONCURRENT: engine.load_script(CONCURRENT_SCRIPT),
        }

    def new_request_id(self) -> str:
        """4 random bytes, hex-rendered (2^32 possible ids)."""
        return self._rng.getrandbits(32).to_bytes(4, "big").hex()

    def rolling_window_check(
        self, key: LimitKey, params: RuleParams, now: float
    ) -> Decision:
        if params.algorithm != Algorithm.ROLLING_WINDOW:
            raise InvalidParamsError("params.algorithm must be rolling_window")
        args = [
            _fmt(params.window_size),
            str(params.max_requests),
            _fmt(params.min_interval),
            _fmt(params.ttl),
            _fmt(now),
            "1" if params.count_rejected else "0",
        ]
        allowed, remaining, retry = self.engine.eval_by_hash(
            self._hashes[Algorithm.ROLLING_WINDOW], [key.render()], args
        )
        return Decision(
            allowed=bool(allowed), remaining=remaining, retry_after=_parse_retry(retry)
        )

    def token_bucket_check(
        self, key: LimitKey, params: RuleParams, now: float, tokens_required: float = 1.0
    ) -> Decision:
        if params.algorithm != Algorithm.TOKEN_BUCKET:
            raise InvalidParamsError("params.algorithm must be token_bucket")
        if tokens_required <= 0 or tokens_required > params.capacity:
            raise InvalidParamsError("tokens_required out of range")
        args = [
            _fmt(params.capacity),
            _fmt(params.refill_rate),
            _fmt(tokens_required),
            _fmt(now),
            _fmt(params.ttl),
        ]
        allowed, remaining, retry = self.engine.eval_by_hash(
            self._hashes[Algorithm.TOKEN_BUCKET], [key.render()], args
        )
        return Decision(
            allowed=bool(allowed), remaining=remaining, retry_after=_parse_retry(retry)
        )

    def fixed_window_check(
        self, key: LimitKey, params: RuleParams, now: float
    ) -> Decision:
        if params.algorithm != Algorithm.FIXED_WINDOW:
            raise InvalidParamsError("params.algorithm must be fixed_window")
        args = [
            _fmt(params.window_size),
            str(params.max_requests),
            _fmt(now),
            _fmt(params.ttl),
        ]
        allowed, remaining, retry = self.engine.eval_by_hash(
            self._hashes[Algorithm.FIXED_WINDOW], [key.render()], args
        )
        return Decision(
            allowed=bool(allowed), remaining=remaining, retry_after=_parse_retry(retry)
        )

    def check_concurrent_request(
        self, key: LimitKey, params: RuleParams, now: float
    ) -> Decision:
        if params.algorithm != Algorithm.CONCURRENT:
            raise InvalidParamsError("params.algorithm must be concurrent")
        while True:
            request_id = self.new_request_id()
            args = [
                _fmt(params.window_size),
                str(params.max_concurrent),
                _fmt(params.ttl),
                _fmt(now),
                request_id,
            ]
            allowed, remaining, retry, status = self.engine.eval_by_hash(
                self._hashes[Algorithm.CONCURRENT], [key.render()], args
            )
            if status == "dup":
                continue  # id collision: retry with a fresh id
            return Decision(
                allowed=bool(allowed),
                remaining=remaining,
                retry_after=_parse_retry(retry),
                request_id=request_id if allowed else None,
            )

    def complete_request(self, key: LimitKey, request_id: str) -> bool:
        """Remove a completed in-flight request; idempotent."""
        return self.engine.zrem(key.render(), request_id) == 1

    def do_request(
        self,
        key: LimitKey,
        params: RuleParams,
        business_action: Callable[[], object],
        now: Optional[float] = None,
    ):
        """Check, run the action, and always release the slot afterwards."""
        ts = now if now is not None else self.engine.clock.now()
        decision = self.check_concurrent_request(key, params, ts)
        if not decision.allowed:
            raise RateLimitExceeded(decision)
        try:
            return business_action()
        finally:
            self.complete_request(key, decision.request_id)

    def check(
        self, key: LimitKey, params: RuleParams, now: float, cost: float = 1.0
    ) -> Decision:
        """Dispatch on params.algorithm."""
        if params.algorithm == Algorithm.ROLLING_WINDOW:
            return self.rolling_window_check(key, params, now)
        if params.algorithm == Algorithm.TOKEN_BUCKET:
            return self.token_bucket_check(key, params, now, tokens_required=cost)
        if params.algorithm == Algorithm.FIXED_WINDOW:
            return self.fixed_window_check(key, params, now)
        return self.check_concurrent_request(key, params, now)


def in_flight_count(engine: SortedSetEngine, key: LimitKey) -> int:
    return engine.zcard(key.render())
