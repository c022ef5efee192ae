"""Three-layer rule management: persistent store, TTL'd cache, script bindings.

Rules are configuration; the registered procedures are executable logic.
Changing a numeric limit never touches the script registry -- only an
algorithm change rebinds a rule to a different script hash.

The persistent store is a YAML file (atomic replace-on-write) holding a
stream of domain documents, each with a `descriptors` list:

    domain: api
    descriptors:
      - key: user_id
        algorithm: rolling_window
        rate_limit: {unit: minute, requests_per_unit: 60}
        min_interval_seconds: 1.0
        ttl_seconds: 120
"""

from __future__ import annotations

import os
import tempfile
import threading
from dataclasses import dataclass, replace
from typing import Dict, List, Optional, Tuple

import yaml

from .clock import Clock
from .core import Algorithm, InvalidParamsError, RuleParams
from .engine import SortedSetEngine
from .scripts import ALGORITHM_SCRIPTS

UNIT_SECONDS = {"second": 1.0, "minute": 60.0, "hour": 3600.0}

DEFAULT_CACHE_TTL = 30.0


class RuleError(Exception):
    pass


class RuleParseError(RuleError):
    """Malformed rule document; message carries line info when available."""


class RuleValidationError(RuleError):
    pass


class RuleNotFoundError(RuleError):
    pass


class VersionConflictError(RuleError):
    """Optimistic-concurrency failure: the caller's base version is stale."""


@dataclass(frozen=True)
class RateLimitRule:
    domain: str
    descriptor_key: str
    algorithm: Algorithm
    unit: str
    requests_per_unit: int
    min_interval: float = 0.0
    ttl: Optional[float] = None
    version: int = 1

    @property
    def rule_id(self) -> str:
        return f"{self.domain}.{self.descriptor_key}"

    @property
    def window_size(self) -> float:
        return UNIT_SECONDS[self.unit]

    def validate(self) -> None:
        if not self.domain or not self.descriptor_key:
            raise RuleValidationError("domain and descriptor key must be non-empty")
        if self.unit not in UNIT_SECONDS:
            raise RuleValidationError(f"unknown unit {self.unit!r}")
        if self.requests_per_unit < 1:
            raise RuleValidationError("requests_per_unit must be >= 1")
        if self.version < 1:
            raise RuleValidationError("version must be >= 1")
        try:
            self.to_params()
        except InvalidParamsError as exc:
            raise RuleValidationError(str(exc)) from exc

    def to_params(self) -> RuleParams:
        """Derive limiter tunables. For the token bucket the capacity equals
        requests_per_unit and the refill rate spreads it over the window; for
        the concurrent limiter requests_per_unit is the in-flight bound."""
        window = self.window_size
        ttl = self.ttl if self.ttl is not None else max(window, 2 * window)
        return RuleParams(
            window_size=window,
            max_requests=self.requests_per_unit,
            min_interval=self.min_interval,
            ttl=max(ttl, window),
            algorithm=self.algorithm,
        )

    def to_document_entry(self) -> dict:
        entry = {
            "key": self.descriptor_key,
            "algorithm": self.algorithm.value,
            "rate_limit": {
                "unit": self.unit,
                "requests_per_unit": self.requests_per_unit,
            },
            "version": self.version,
        }
        if self.min_interval:
            entry["min_interval_seconds"] = self.min_interval
        if self.ttl is not None:
            entry["ttl_seconds"] = self.ttl
        return entry


@dataclass
class RuleCacheEntry:
    rule: RateLimitRule
    cached_at: float
    cache_ttl: float

    def fresh(self, now: float) -> bool:
        return now - self.cached_at < self.cache_ttl


@dataclass(frozen=True)
class CompiledRuleBinding:
    rule_id: str
    script_hash: str
    arg_names: Tuple[str, ...]


_ARG_TEMPLATES = {
    Algorithm.ROLLING_WINDOW: (
        "window_size", "max_requests", "min_interval", "ttl", "now", "count_rejected",
    ),
    Algorithm.TOKEN_BUCKET: ("capacity", "refill_rate", "tokens_required", "now", "ttl"),
    Algorithm.FIXED_WINDOW: ("window_size", "max_requests", "now", "ttl"),
    Algorithm.CONCURRENT: ("window_size", "max_concurrent", "ttl", "now", "request_id"),
}


def parse_rule_documents(text: str) -> List[RateLimitRule]:
    """Parse a YAML stream of domain documents into rules."""
    try:
        docs = [d for d in yaml.safe_load_all(text) if d is not None]
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f" at line {mark.line + 1}" if mark is not None else ""
        raise RuleParseError(f"malformed rule document{where}: {exc}") from exc

    rules: List[RateLimitRule] = []
    for doc in docs:
        if not isinstance(doc, dict) or "domain" not in doc:
            raise RuleParseError("each document needs a top-level 'domain'")
        domain = str(doc["domain"])
        for entry in doc.get("descriptors") or []:
            rules.append(_parse_descriptor(domain, entry))
    return rules


def _parse_descriptor(domain: str, entry: dict) -> RateLimitRule:
    if not isinstance(entry, dict) or "key" not in entry:
        raise RuleParseError(f"descriptor in domain {domain!r} needs a 'key'")
    rate_limit = entry.get("rate_limit") or {}
    try:
        algorithm = Algorithm(entry.get("algorithm", "rolling_window"))
    except ValueError as exc:
        raise RuleValidationError(f"unknown algorithm {entry.get('algorithm')!r}") from exc
    rule = RateLimitRule(
        domain=domain,
        descriptor_key=str(entry["key"]),
        algorithm=algorithm,
        unit=str(rate_limit.get("unit", "minute")),
        requests_per_unit=int(rate_limit.get("requests_per_unit", 0)),
        min_interval=float(entry.get("min_interval_seconds", 0.0)),
        ttl=(
            float(entry["ttl_seconds"]) if entry.get("ttl_seconds") is not None else None
        ),
        version=int(entry.get("version", 1)),
    )
    rule.validate()
    return rule


def render_rule_documents(rules: List[RateLimitRule]) -> str:
    by_domain: Dict[str, List[RateLimitRule]] = {}
    for rule in rules:
        by_domain.setdefault(rule.domain, []).append(rule)
    docs = []
    for domain in sorted(by_domain):
        docs.append(
            {
                "domain": domain,
                "descriptors": [
                    r.to_document_entry()
                    for r in sorted(by_domain[domain], key=lambda r: r.descriptor_key)
                ],
            }
        )
    return yaml.safe_dump_all(docs, sort_keys=False)


class FileRuleStore:
    """Persistent rule store backed by one YAML file, replaced atomically."""

    def __init__(self, path: str) -> None:
        self.path = path
        self.read_count = 0
        self._lock = threading.Lock()

    def load(self) -> Dict[str, RateLimitRule]:
        with self._lock:
            self.read_count += 1
            if not os.path.exists(self.path):
                return {}
            with open(self.path, "r", encoding="utf-8") as fh:
                text = fh.read()
            return {r.rule_id: r for r in parse_rule_documents(text)}

    def save(self, rules: Dict[str, RateLimitRule]) -> None:
        with self._lock:
            text = render_rule_documents(list(rules.values()))
            directory = os.path.dirname(os.path.abspath(self.path))
            fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
            try:
                with os.fdopen(fd, "w", encoding="utf-8") as fh:
                    fh.write(text)
                os.replace(tmp, self.path)
            finally:
                if os.path.exists(tmp):
                    os.unlink(tmp)


class RuleManager:
    """Rule store + TTL'd cache + script-binding wiring.

    Reads are safe from any thread; updates serialize through an internal
    lock and the store's atomic write, with an optimistic version check to
    resolve racing admins. Cache invalidation is synchronous and in-process.
    """

    def __init__(
        self,
        store: FileRuleStore,
        engine: SortedSetEngine,
        clock: Optional[Clock] = None,
        cache_ttl: float = DEFAULT_CACHE_TTL,
    ) -> None:
        self.store = store
        self.engine = engine
        self.clock = clock if clock is not None else engine.clock
        self.cache_ttl = cache_ttl
        self._lock = threading.RLock()
        self._cache: Dict[str, RuleCacheEntry] = {}
        self._bindings: Dict[str, CompiledRuleBinding] = {}

    # -- loading -----------------------------------------------------------

    def load_rules(self, document: str) -> List[RateLimitRule]:
        """Validate, persist and cache a full rule document; register every
        referenced algorithm script. Replaces the active rule set."""
        rules = parse_rule_documents(document)
        with self._lock:
            seen = set()
            for rule in rules:
                if rule.rule_id in seen:
                    raise RuleValidationError(
                        f"duplicate rule for (domain, key) {rule.rule_id!r}"
                    )
                seen.add(rule.rule_id)
            self.store.save({r.rule_id: r for r in rules})
            self._cache.clear()
            self._bindings.clear()
            now = self.clock.now()
            for rule in rules:
                self._cache[rule.rule_id] = RuleCacheEntry(rule, now, self.cache_ttl)
                self._bind(rule)
            return rules

    def load_rules_file(self, path: str) -> List[RateLimitRule]:
        try:
            with open(path, "r", encoding="utf-8") as fh:
                return self.load_rules(fh.read())
        except OSError as exc:
            raise RuleParseError(f"cannot read rule file {path}: {exc}") from exc

    def _bind(self, rule: RateLimitRule) -> CompiledRuleBinding:
        script_hash = self.engine.load_script(ALGORITHM_SCRIPTS[rule.algorithm.value])
        binding = CompiledRuleBinding(
            rule_id=rule.rule_id,
            script_hash=script_hash,
            arg_names=_ARG_TEMPLATES[rule.algorithm],
        )
        self._bindings[rule.rule_id] = binding
        return binding

    # -- reads -------------------------------------------------------------

    def get_rule(self, domain: str, descriptor_key: str) -> RateLimitRule:
        rule_id = f"{domain}.{descriptor_key}"
        now = self.clock.now()
        with self._lock:
            entry = self._cache.get(rule_id)
            if entry is not None and entry.fresh(now):
                return entry.rule
            stored = self.store.load()
            rule = stored.get(rule_id)
            if rule is None:
                self._cache.pop(rule_id, None)
                raise RuleNotFoundError(rule_id)
            self._cache[rule_id] = RuleCacheEntry(rule, now, self.cache_ttl)
            if rule_id not in self._bindings:
                self._bind(rule)
            return rule

    def list_rules(self) -> List[RateLimitRule]:
        with self._lock:
            return sorted(self.store.load().values(), key=lambda r: r.rule_id)

    def resolve_binding(self, rule_id: str) -> CompiledRuleBinding:
        with self._lock:
            binding = self._bindings.get(rule_id)
            if binding is None:
                stored = self.store.load()
                if rule_id not in stored:
                    raise RuleNotFoundError(rule_id)
                binding = self._bind(stored[rule_id])
            return binding

    # -- updates -----------------------------------------------------------

    def update_rule(self, rule: RateLimitRule) -> int:
        """Persist an update with version+1 and invalidate the cache entry.

        rule.version must match the stored version (optimistic concurrency).
        Existing per-key limiter state is never reset. Creates the rule when
        it does not exist yet (the supplied version is then ignored)."""
        rule.validate()
        with self._lock:
            stored = self.store.load()
            current = stored.get(rule.rule_id)
            if current is not None:
                if rule.version != current.version:
                    raise VersionConflictError(
                        f"{rule.rule_id}: have {current.version}, got {rule.version}"
                    )
                new_version = current.version + 1
                algorithm_changed = current.algorithm != rule.algorithm
            else:
                new_version = 1
                algorithm_changed = True
            updated = replace(rule, version=new_version)
            stored[rule.rule_id] = updated
            self.store.save(stored)
            self._cache.pop(rule.rule_id, None)
            if algorithm_changed:
                self._bind(updated)
            return new_version

    def registry_snapshot(self) -> Dict[str, str]:
        """Loaded hash -> identifier map (for no-redeploy assertions)."""
        return self.engine.registry.loaded_snapshot()
