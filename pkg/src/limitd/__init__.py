"""limitd: a distributed rate-limiting toolkit.

Layers:
  core      -- in-memory reference limiters (token bucket, fixed window,
               rolling window), also the oracles for everything distributed
  engine    -- embedded sorted-set store with atomic hash-keyed scripts
  limiters  -- distributed-grade limiters as atomic scripts over the engine
  rules     -- three-layer rule management (store, cache, script bindings)
  gateway   -- HTTP middleware/service with 429 + X-RateLimit-* feedback
  cluster   -- deterministic leader-replica cluster simulator (CAP scenarios)
  bench     -- reproducible experiments (boundary burst, memory model, races)
"""

from .clock import Clock, ManualClock, SystemClock
from .core import (
    Algorithm,
    Decision,
    FixedWindowState,
    InvalidParamsError,
    RollingWindowState,
    RuleParams,
    TokenBucketState,
    fixed_window_allow,
    rolling_window_allow,
    token_bucket_allow,
)
from .engine import (
    EngineStats,
    EngineUnavailableError,
    NoScriptError,
    ScriptError,
    SortedSetEngine,
    UnknownProcedureError,
)
from .limiters import AtomicLimiters, LimitKey, RateLimitExceeded
from .rules import FileRuleStore, RateLimitRule, RuleManager
from .scripts import new_engine

__version__ = "0.1.0"

__all__ = [
    "Algorithm",
    "AtomicLimiters",
    "Clock",
    "Decision",
    "EngineStats",
    "EngineUnavailableError",
    "FileRuleStore",
    "FixedWindowState",
    "InvalidParamsError",
    "LimitKey",
    "ManualClock",
    "NoScriptError",
    "RateLimitExceeded",
    "RateLimitRule",
    "RollingWindowState",
    "RuleManager",
    "RuleParams",
    "ScriptError",
    "SortedSetEngine",
    "SystemClock",
    "TokenBucketState",
    "UnknownProcedureError",
    "fixed_window_allow",
    "new_engine",
    "rolling_window_allow",
    "token_bucket_allow",
]
