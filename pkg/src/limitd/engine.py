"""Embedded sorted-set command engine with atomic script execution.

One engine instance plays the role of a single store node: it accepts the
sorted-set command vocabulary the limiters need (ZADD, ZCARD,
ZREMRANGEBYSCORE, ZREVRANGE WITHSCORES, ZREM, EXPIRE) plus registration and
hash-keyed execution of atomic procedures. All commands and scripts on one
instance execute on a single serialized context (one lock, one logical
writer) -- this is the atomicity contract the rest of the toolkit depends on.

Scripts are registered native procedures keyed by a content hash of a
canonical identifier string, not an embedded interpreter: the load-once /
execute-by-hash workflow and whole-script atomicity are preserved without an
interpreter dependency.
"""

from __future__ import annotations

import hashlib
import math
import threading
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple

from .clock import Clock, ManualClock

# Members in this set represent a single stored double (a counter or a
# timestamp field); they cost 8 bytes in the logical-memory model. Members
# that render their own score are likewise pure timestamps (8 bytes). Any
# other member is treated as a (timestamp, id) pair costing 16 bytes.
SCALAR_FIELDS = frozenset({"tokens", "last_refill", "count", "window_start", "counter"})

ScriptProc = Callable[["SortedSetEngine", Sequence[str], Sequence[str]], list]


class EngineError(Exception):
    pass


class EngineUnavailableError(EngineError):
    """Simulated store outage (used by fail-open/fail-closed tests)."""


class NoScriptError(EngineError):
    """The hash was never loaded on this instance."""


class UnknownProcedureError(EngineError):
    """The identifier is not in the script catalog."""


class ScriptError(EngineError):
    """The registered procedure raised; the original error is chained."""


def entry_cost(member: str, score: float) -> int:
    """Logical bytes for one (member, score) entry under the cost model."""
    if member in SCALAR_FIELDS:
        return 8
    if member.startswith(repr(score)):
        return 8
    return 16


@dataclass
class EngineStats:
    key_count: int
    logical_bytes: int
    command_count: int


class SortedSetRecord:
    """One key's score-ordered member set plus optional expiry.

    Entries are kept in a list sorted by (score, member) and located with an
    explicit binary search so the engine can count probes; a member -> score
    dict provides O(1) point lookups.
    """

    __slots__ = ("_sorted", "_scores", "expire_at")

    def __init__(self) -> None:
        self._sorted: List[Tuple[float, str]] = []
        self._scores: Dict[str, float] = {}
        self.expire_at: Optional[float] = None

    def __len__(self) -> int:
        return len(self._sorted)

    def score(self, member: str) -> Optional[float]:
        return self._scores.get(member)

    def _search(self, item: Tuple[float, str], probes: List[int]) -> int:
        lo, hi = 0, len(self._sorted)
        while lo < hi:
            probes[0] += 1
            mid = (lo + hi) // 2
            if self._sorted[mid] < item:
                lo = mid + 1
            else:
                hi = mid
        return lo

    def add(self, member: str, score: float, probes: List[int]) -> int:
        """Insert or update; returns 1 if newly added, 0 if score updated."""
        old = self._scores.get(member)
        if old is not None:
            if old == score:
                return 0
            idx = self._search((old, member), probes)
            del self._sorted[idx]
        idx = self._search((score, member), probes)
        self._sorted.insert(idx, (score, member))
        self._scores[member] = score
        return 0 if old is not None else 1

    def remove(self, member: str, probes: List[int]) -> int:
        score = self._scores.pop(member, None)
        if score is None:
            return 0
        idx = self._search((score, member), probes)
        del self._sorted[idx]
        return 1

    def remove_score_range(
        self, min_score: float, max_score: float, probes: List[int]
    ) -> int:
        lo = self._search((min_score, ""), probes)
        hi = self._search((max_score, "￿" * 4), probes)
        while hi < len(self._sorted) and self._sorted[hi][0] <= max_score:
            hi += 1
        removed = self._sorted[lo:hi]
        del self._sorted[lo:hi]
        for _, member in removed:
            del self._scores[member]
        return len(removed)

    def rev_range_with_scores(self, start: int, stop: int) -> List[Tuple[str, float]]:
        n = len(self._sorted)
        out = []
        for rank in range(start, stop + 1):
            idx = n - 1 - rank
            if idx < 0 or rank < 0:
                break
            score, member = self._sorted[idx]
            out.append((member, score))
        return out

    def ascending(self) -> List[Tuple[str, float]]:
        return [(m, s) for s, m in self._sorted]

    def logical_bytes(self) -> int:
        return sum(entry_cost(m, s) for s, m in self._sorted)


class ScriptRegistry:
    """Content-hash keyed catalog of registered atomic procedures."""

    def __init__(self) -> None:
        self._catalog: Dict[str, ScriptProc] = {}
        self._loaded: Dict[str, str] = {}  # hash -> identifier

    @staticmethod
    def content_hash(identifier: str) -> str:
        return hashlib.sha1(identifier.encode("utf-8")).hexdigest()

    def register(self, identifier: str, proc: ScriptProc) -> None:
        self._catalog[identifier] = proc

    def identifiers(self) -> List[str]:
        return sorted(self._catalog)

    def load(self, identifier: str) -> str:
        if identifier not in self._catalog:
            raise UnknownProcedureError(identifier)
        digest = self.content_hash(identifier)
        self._loaded[digest] = identifier
        return digest

    def resolve(self, digest: str) -> ScriptProc:
        identifier = self._loaded.get(digest)
        if identifier is None:
            raise NoScriptError(digest)
        return self._catalog[identifier]

    def loaded_snapshot(self) -> Dict[str, str]:
        return dict(self._loaded)


class SortedSetEngine:
    """A single serialized store node.

    Thread-safe: every command or script runs under one lock, so concurrent
    callers observe some sequential order of their operations. Expiry is
    evaluated lazily on access; stats() additionally sweeps expired keys.
    """

    def __init__(self, clock: Optional[Clock] = None) -> None:
        self.clock = clock if clock is not None else ManualClock()
        self.registry = ScriptRegistry()
        self._lock = threading.RLock()
        self._data: Dict[str, SortedSetRecord] = {}
        self._command_count = 0
        self._probes = [0]
        self._capture: Optional[List[tuple]] = None
        self.fail_commands = False

    # -- internals ---------------------------------------------------------

    def _check_available(self) -> None:
        if self.fail_commands:
            raise EngineUnavailableError("store unavailable")

    def _record(self, key: str, create: bool = False) -> Optional[SortedSetRecord]:
        rec = self._data.get(key)
        if rec is not None and rec.expire_at is not None:
            if rec.expire_at <= self.clock.now():
                del self._data[key]
                rec = None
        if rec is None and create:
            rec = SortedSetRecord()
            self._data[key] = rec
        return rec

    def _emit(self, mutation: tuple) -> None:
        if self._capture is not None:
            self._capture.append(mutation)

    @contextmanager
    def capture_mutations(self) -> Iterator[List[tuple]]:
        """Record the primitive state mutations performed inside the block.

        Used by the cluster simulator to replicate a leader's effects to its
        replicas without re-running scripts (scripts may draw randomness)."""
        with self._lock:
            outer = self._capture
            muts: List[tuple] = []
            self._capture = muts
            try:
                yield muts
            finally:
                self._capture = outer

    # -- command vocabulary ------------------------------------------------

    def zadd(self, key: str, score: float, member: str) -> int:
        if not key:
            raise ValueError("key must be non-empty")
        if math.isnan(score):
            raise ValueError("NaN scores are rejected")
        with self._lock:
            self._check_available()
            self._command_count += 1
            rec = self._record(key, create=True)
            added = rec.add(member, score, self._probes)
            self._emit(("zadd", key, score, member))
            return added

    def zcard(self, key: str) -> int:
        with self._lock:
            self._check_available()
            self._command_count += 1
            rec = self._record(key)
            return len(rec) if rec is not None else 0

    def zrem_range_by_score(self, key: str, min_score: float, max_score: float) -> int:
        if min_score > max_score:
            raise ValueError("min_score must be <= max_score")
        with self._lock:
            self._check_available()
            self._command_count += 1
            rec = self._record(key)
            if rec is None:
                return 0
            removed = rec.remove_score_range(min_score, max_score, self._probes)
            if removed:
                self._emit(("zremrangebyscore", key, min_score, max_score))
            if len(rec) == 0:
                del self._data[key]
            return removed

    def zrev_range_with_scores(
        self, key: str, start_rank: int, stop_rank: int
    ) -> List[Tuple[str, float]]:
        with self._lock:
            self._check_available()
            self._command_count += 1
            rec = self._record(key)
            if rec is None:
                return []
            return rec.rev_range_with_scores(start_rank, stop_rank)

    def zrem(self, key: str, member: str) -> int:
        with self._lock:
            self._check_available()
            self._command_count += 1
            rec = self._record(key)
            if rec is None:
                return 0
            removed = rec.remove(member, self._probes)
            if removed:
                self._emit(("zrem", key, member))
            if len(rec) == 0:
                del self._data[key]
            return removed

    def zscore(self, key: str, member: str) -> Optional[float]:
        with self._lock:
            self._check_available()
            self._command_count += 1
            rec = self._record(key)
            return rec.score(member) if rec is not None else None

    def expire(self, key: str, ttl: float) -> bool:
        if ttl <= 0:
            raise ValueError("ttl must be positive")
        return self.expire_at(key, self.clock.now() + ttl)

    def expire_at(self, key: str, deadline: float) -> bool:
        """Absolute-deadline expiry; scripts use this with their caller's now."""
        with self._lock:
            self._check_available()
            self._command_count += 1
            rec = self._record(key)
            if rec is None:
                return False
            rec.expire_at = deadline
            self._emit(("expire_at", key, deadline))
            return True

    # -- scripts -----------------------------------------------------------

    def load_script(self, identifier: str) -> str:
        with self._lock:
            return self.registry.load(identifier)

    def eval_by_hash(self, digest: str, keys: Sequence[str], args: Sequence[str]) -> list:
        with self._lock:
            self._check_available()
            proc = self.registry.resolve(digest)
            try:
                return proc(self, keys, args)
            except EngineError:
                raise
            except Exception as exc:
                raise ScriptError(str(exc)) from exc

    def apply_mutation(self, mutation: tuple) -> None:
        """Replay one captured mutation (replication path)."""
        op = mutation[0]
        if op == "zadd":
            self.zadd(mutation[1], mutation[2], mutation[3])
        elif op == "zrem":
            self.zrem(mutation[1], mutation[2])
        elif op == "zremrangebyscore":
            self.zrem_range_by_score(mutation[1], mutation[2], mutation[3])
        elif op == "expire_at":
            self.expire_at(mutation[1], mutation[2])
        else:
            raise ValueError(f"unknown mutation {op!r}")

    # -- introspection -----------------------------------------------------

    def sweep_expired(self) -> int:
        with self._lock:
            now = self.clock.now()
            dead = [
                k
                for k, rec in self._data.items()
                if rec.expire_at is not None and rec.expire_at <= now
            ]
            for k in dead:
                del self._data[k]
            return len(dead)

    def stats(self) -> EngineStats:
        with self._lock:
            self.sweep_expired()
            return EngineStats(
                key_count=len(self._data),
                logical_bytes=sum(r.logical_bytes() for r in self._data.values()),
                command_count=self._command_count,
            )

    @property
    def probe_count(self) -> int:
        return self._probes[0]

    def reset_probe_count(self) -> None:
        self._probes[0] = 0

    def snapshot(self) -> Dict[str, Tuple[Tuple[Tuple[str, float], ...], Optional[float]]]:
        """Comparable copy of live (non-expired) state."""
        with self._lock:
            self.sweep_expired()
            return {
                k: (tuple(rec.ascending()), rec.expire_at)
                for k, rec in self._data.items()
            }
