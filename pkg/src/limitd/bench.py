"""Reproducible experiments: boundary burst, memory accounting, race demo.

Each experiment returns an ExperimentReport whose rows carry their
provenance (measured vs model-computed) and whose verdict states whether the
run matched its expected bounds. Every run is reproducible from (parameters,
seed) alone.
"""

from __future__ import annotations

import io
import csv
import random
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence

from .clock import ManualClock
from .core import (
    Algorithm,
    FixedWindowState,
    RollingWindowState,
    RuleParams,
    fixed_window_allow,
    rolling_window_allow,
)
from .engine import SortedSetEngine
from .limiters import AtomicLimiters, LimitKey
from .scripts import COUNTER_INCR_SCRIPT, new_engine

MB = 10**6  # the memory model speaks in decimal megabytes

PER_USER_BYTES = {
    "token_bucket": lambda L, C: 16,
    "fixed_window": lambda L, C: 16,
    "rolling_window": lambda L, C: 8 * L,
    "concurrent": lambda L, C: 16 * C,
}


@dataclass
class ExperimentReport:
    name: str
    parameters: Dict[str, object]
    rows: List[Dict[str, object]] = field(default_factory=list)
    verdict: bool = True

    def to_text(self) -> str:
        lines = [f"experiment: {self.name}"]
        for key, value in self.parameters.items():
            lines.append(f"  {key} = {value}")
        for row in self.rows:
            lines.append("  " + ", ".join(f"{k}={v}" for k, v in row.items()))
        lines.append(f"verdict: {'pass' if self.verdict else 'FAIL'}")
        return "\n".join(lines) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        fields = sorted({k for row in self.rows for k in row})
        writer = csv.DictWriter(buf, fieldnames=fields)
        writer.writeheader()
        for row in self.rows:
            writer.writerow(row)
        return buf.getvalue()


# -- boundary burst ---------------------------------------------------------

def max_in_any_span(admitted: Sequence[float], span: float) -> int:
    """Brute-force maximum number of admitted timestamps in any half-open
    interval (T - span, T]."""
    times = sorted(admitted)
    best = 0
    lo = 0
    for hi, t in enumerate(times):
        while times[lo] <= t - span:
            lo += 1
        best = max(best, hi - lo + 1)
    return best


def straddling_burst_trace(window: float, burst: int) -> List[float]:
    """burst requests just before a window boundary, burst just after."""
    before = window - 0.1 * window / 60.0
    after = window + 0.1 * window / 60.0
    return [before] * burst + [after] * burst


def run_boundary_burst(
    window: float,
    max_requests: int,
    trace: Optional[Iterable[float]] = None,
) -> ExperimentReport:
    """Replay a boundary-straddling burst through the fixed-window and
    rolling-window limiters and report the worst admitted count in any
    window-length span (measured by brute force over the admitted trace)."""
    if trace is None:
        trace = straddling_burst_trace(window, max_requests)
    times = sorted(trace)
    params = RuleParams(window_size=window, max_requests=max_requests)

    fixed_state = FixedWindowState()
    rolling_state = RollingWindowState()
    fixed_admitted: List[float] = []
    rolling_admitted: List[float] = []
    for t in times:
        decision, fixed_state = fixed_window_allow(fixed_state, params, t)
        if decision.allowed:
            fixed_admitted.append(t)
        decision, rolling_state = rolling_window_allow(rolling_state, params, t)
        if decision.allowed:
            rolling_admitted.append(t)

    fixed_peak = max_in_any_span(fixed_admitted, window)
    rolling_peak = max_in_any_span(rolling_admitted, window)
    report = ExperimentReport(
        name="boundary-burst",
        parameters={"window": window, "max_requests": max_requests, "events": len(times)},
    )
    report.rows.append(
        {
            "algorithm": "fixed_window",
            "admitted": len(fixed_admitted),
            "peak_in_window_span": fixed_peak,
            "source": "measured",
        }
    )
    report.rows.append(
        {
            "algorithm": "rolling_window",
            "admitted": len(rolling_admitted),
            "peak_in_window_span": rolling_peak,
            "source": "measured",
        }
    )
    report.verdict = rolling_peak <= max_requests
    return report


# -- memory accounting ------------------------------------------------------

def model_bytes_per_user(algorithm: str, L: int, C: int) -> int:
    return PER_USER_BYTES[algorithm](L, C)


def materialize_population(engine: SortedSetEngine, users: int, L: int, C: int) -> None:
    """Fill one engine with a fully-loaded population per algorithm: a full
    rolling window (L timestamps), a full concurrent set (C in-flight ids),
    and token-bucket / fixed-window scalar state per user."""
    limiters = AtomicLimiters(engine, rng=random.Random(7))
    window = float(max(L, C, 1))
    rolling = RuleParams(
        window_size=window, max_requests=L or 1, ttl=10 * window,
        algorithm=Algorithm.ROLLING_WINDOW,
    )
    concurrent = RuleParams(
        window_size=window, max_requests=C or 1, max_concurrent=C or 1,
        ttl=10 * window, algorithm=Algorithm.CONCURRENT,
    )
    bucket = RuleParams(
        window_size=window, max_requests=max(L, 1), capacity=float(max(L, 1)),
        refill_rate=1.0, ttl=10 * window, algorithm=Algorithm.TOKEN_BUCKET,
    )
    fixed = RuleParams(
        window_size=window, max_requests=max(L, 1), ttl=10 * window,
        algorithm=Algorithm.FIXED_WINDOW,
    )
    for u in range(users):
        for i in range(L):
            limiters.rolling_window_check(
                LimitKey("rate_limiter", f"u{u}"), rolling, now=0.5 + i * window / (2 * L)
            )
        for i in range(C):
            limiters.check_concurrent_request(
                LimitKey("concurrent_limiter", f"u{u}"), concurrent, now=1.0
            )
        limiters.token_bucket_check(LimitKey("token_bucket", f"u{u}"), bucket, now=1.0)
        limiters.fixed_window_check(LimitKey("fixed_window", f"u{u}"), fixed, now=1.0)


def measured_bytes_by_namespace(engine: SortedSetEngine) -> Dict[str, int]:
    totals = {k: 0 for k in PER_USER_BYTES}
    namespace_to_algorithm = {
        "rate_limiter": "rolling_window",
        "concurrent_limiter": "concurrent",
        "token_bucket": "token_bucket",
        "fixed_window": "fixed_window",
    }
    for key, (entries, _) in engine.snapshot().items():
        namespace = key.split(":", 1)[0]
        algorithm = namespace_to_algorithm.get(namespace)
        if algorithm is None:
            continue
        from .engine import entry_cost

        totals[algorithm] += sum(entry_cost(m, s) for m, s in entries)
    return totals


def memory_report(users: int, L: int, C: int, materialize_users: int = 0) -> ExperimentReport:
    """Closed-form memory model per Table-2-style accounting, optionally
    cross-checked against the engine's logical byte accounting for a
    materialized sample population (exact equality expected)."""
    if users < 0 or L < 0 or C < 0:
        raise ValueError("inputs must be non-negative")
    report = ExperimentReport(
        name="memory-model",
        parameters={"users": users, "L": L, "C": C, "materialize_users": materialize_users},
    )
    for algorithm in ("token_bucket", "fixed_window", "rolling_window", "concurrent"):
        per_user = model_bytes_per_user(algorithm, L, C) if users else 0
        total = per_user * users
        report.rows.append(
            {
                "algorithm": algorithm,
                "per_user_bytes": per_user,
                "total_bytes": total,
                "total_mb": total / MB,
                "source": "model",
            }
        )
    if materialize_users > 0:
        engine = new_engine(clock=ManualClock())
        materialize_population(engine, materialize_users, L, C)
        measured = measured_bytes_by_namespace(engine)
        ok = True
        for algorithm in ("token_bucket", "fixed_window", "rolling_window", "concurrent"):
            expected = model_bytes_per_user(algorithm, L, C) * materialize_users
            got = measured[algorithm]
            ok = ok and (got == expected)
            report.rows.append(
                {
                    "algorithm": algorithm,
                    "per_user_bytes": got / materialize_users,
                    "total_bytes": got,
                    "total_mb": got / MB,
                    "source": "measured",
                }
            )
        report.verdict = ok
    return report


# -- race-condition demo ----------------------------------------------------

def run_race_demo(
    actors: int, iterations: int, mode: str, seed: int = 0
) -> ExperimentReport:
    """Read-modify-write counter contention under a seeded cooperative
    scheduler.

    non_atomic: each actor reads the counter, yields to the scheduler, then
    writes back +1 -- interleavings lose updates. atomic: the same increment
    runs as one engine script, so the final count is exact. K = 1 never
    loses updates in either mode.
    """
    if mode not in ("atomic", "non_atomic"):
        raise ValueError("mode must be atomic or non_atomic")
    if actors < 1:
        raise ValueError("need at least one actor")
    engine = new_engine(clock=ManualClock())
    digest = engine.load_script(COUNTER_INCR_SCRIPT)
    key = "fixed_window:race"  # scalar 'counter' member
    rng = random.Random(seed)

    def non_atomic_actor():
        for _ in range(iterations):
            top = engine.zrev_range_with_scores(key, 0, 0)
            value = top[0][1] if top else 0.0
            yield  # deliberate yield between read and write
            engine.zadd(key, value + 1.0, "counter")

    def atomic_actor():
        for _ in range(iterations):
            engine.eval_by_hash(digest, [key], ["1"])
            yield

    make = atomic_actor if mode == "atomic" else non_atomic_actor
    runnable = [make() for _ in range(actors)]
    while runnable:
        actor = rng.choice(runnable)
        try:
            next(actor)
        except StopIteration:
            runnable.remove(actor)

    expected = actors * iterations
    top = engine.zrev_range_with_scores(key, 0, 0)
    final = int(top[0][1]) if top else 0
    losses = expected - final
    report = ExperimentReport(
        name="race-demo",
        parameters={"actors": actors, "iterations": iterations, "mode": mode, "seed": seed},
    )
    report.rows.append(
        {
            "final_count": final,
            "expected": expected,
            "lost_updates": losses,
            "source": "measured",
        }
    )
    report.verdict = losses == 0 if mode == "atomic" else True
    return report
