"""HTTP rate-limiting gateway.

Extracts discriminating keys from incoming checks, resolves the matching
rules, runs the bound atomic scripts, and answers with explicit throttle
feedback (429 + X-RateLimit-* headers) plus a plain-text metrics exposition.

The gateway itself holds no per-request locks: all shared state lives in the
engine (serialized) and the rule manager (thread-safe reads), so any number
of gateway instances may share one engine.
"""

from __future__ import annotations

import json
import math
import threading
import time
from dataclasses import dataclass
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Callable, Dict, List, Optional, Tuple

from .clock import Clock
from .core import Algorithm, Decision
from .engine import EngineUnavailableError
from .limiters import AtomicLimiters, LimitKey
from .rules import (
    RateLimitRule,
    RuleError,
    RuleManager,
    RuleNotFoundError,
    RuleParseError,
    RuleValidationError,
    VersionConflictError,
)

FAIL_OPEN = "fail_open"
FAIL_CLOSED = "fail_closed"

LATENCY_BUCKETS_US = (100.0, 1000.0, 10000.0, math.inf)


@dataclass(frozen=True)
class CheckRequest:
    domain: str
    descriptors: Dict[str, str]
    cost: int = 1

    def __post_init__(self) -> None:
        if not self.descriptors:
            raise ValueError("at least one descriptor is required")
        if self.cost < 1:
            raise ValueError("cost must be a positive integer")


@dataclass(frozen=True)
class CheckResponse:
    allowed: bool
    limit: Optional[int] = None
    remaining: Optional[int] = None
    retry_after: Optional[float] = None
    matched_rule: Optional[str] = None
    degraded: bool = False

    def to_json(self) -> dict:
        return {
            "allowed": self.allowed,
            "limit": self.limit,
            "remaining": self.remaining,
            "retry_after": self.retry_after,
            "matched_rule": self.matched_rule,
            "degraded": self.degraded,
        }


class GatewayMetrics:
    """Per-(domain, descriptor) allow/deny counters, a latency histogram in
    microseconds, and a store-error counter."""

    def __init__(self) -> None:
        self._lock = threading.Lock()
        self.allowed_total: Dict[Tuple[str, str], int] = {}
        self.denied_total: Dict[Tuple[str, str], int] = {}
        self.store_errors = 0
        self.latency_bucket_counts = [0] * len(LATENCY_BUCKETS_US)
        self.latency_sum_us = 0.0
        self.latency_count = 0

    def record_decision(self, domain: str, descriptor: str, allowed: bool) -> None:
        with self._lock:
            counters = self.allowed_total if allowed else self.denied_total
            counters[(domain, descriptor)] = counters.get((domain, descriptor), 0) + 1

    def record_store_error(self) -> None:
        with self._lock:
            self.store_errors += 1

    def record_latency(self, micros: float) -> None:
        with self._lock:
            self.latency_sum_us += micros
            self.latency_count += 1
            for i, bound in enumerate(LATENCY_BUCKETS_US):
                if micros <= bound:
                    self.latency_bucket_counts[i] += 1
                    break

    def exposition(self) -> str:
        with self._lock:
            lines = []
            for name, counters in (
                ("limitd_allowed_total", self.allowed_total),
                ("limitd_denied_total", self.denied_total),
            ):
                for (domain, descriptor), value in sorted(counters.items()):
                    lines.append(
                        f'{name}{{domain="{domain}",descriptor="{descriptor}"}} {value}'
                    )
            lines.append(f"limitd_store_errors_total {self.store_errors}")
            for bound, count in zip(LATENCY_BUCKETS_US, self.latency_bucket_counts):
                label = "+Inf" if math.isinf(bound) else f"{bound:g}"
                lines.append(f'limitd_check_latency_us_bucket{{le="{label}"}} {count}')
            lines.append(f"limitd_check_latency_us_sum {self.latency_sum_us:g}")
            lines.append(f"limitd_check_latency_us_count {self.latency_count}")
            return "\n".join(lines) + "\n"


class RateLimitGateway:
    """Rule resolution + atomic checks + fail policy, independent of HTTP."""

    def __init__(
        self,
        rule_manager: RuleManager,
        limiters: AtomicLimiters,
        clock: Optional[Clock] = None,
        fail_policy: str = FAIL_OPEN,
    ) -> None:
        if fail_policy not in (FAIL_OPEN, FAIL_CLOSED):
            raise ValueError(f"unknown fail policy {fail_policy!r}")
        self.rules = rule_manager
        self.limiters = limiters
        self.clock = clock if clock is not None else limiters.engine.clock
        self.fail_policy = fail_policy
        self.metrics = GatewayMetrics()

    def _matching_rules(
        self, request: CheckRequest
    ) -> List[Tuple[RateLimitRule, str]]:
        matched = []
        for descriptor_key, value in request.descriptors.items():
            try:
                rule = self.rules.get_rule(request.domain, descriptor_key)
            except RuleNotFoundError:
                continue
            matched.append((rule, str(value)))
        matched.sort(key=lambda pair: pair[0].rule_id)
        return matched

    def handle_check(self, request: CheckRequest, now: float) -> CheckResponse:
        """All matching rules must allow; the first denial (rule_id ascending
        order) short-circuits without consuming budget in later rules."""
        started = time.perf_counter()
        try:
            matched = self._matching_rules(request)
            if not matched:
                return CheckResponse(allowed=True)

            tightest: Optional[Tuple[int, RateLimitRule, Decision]] = None
            for rule, value in matched:
                key = LimitKey(namespace=rule.rule_id, discriminator=value)
                params = rule.to_params()
                try:
                    decision = self.limiters.check(
                        key, params, now, cost=float(request.cost)
                    )
                except EngineUnavailableError:
                    self.metrics.record_store_error()
                    return self._degraded_response()
                self.metrics.record_decision(
                    rule.domain, rule.descriptor_key, decision.allowed
                )
                if not decision.allowed:
                    return CheckResponse(
                        allowed=False,
                        limit=rule.requests_per_unit,
                        remaining=decision.remaining,
                        retry_after=decision.retry_after,
                        matched_rule=rule.rule_id,
                    )
                if tightest is None or decision.remaining < tightest[0]:
                    tightest = (decision.remaining, rule, decision)

            remaining, rule, decision = tightest
            return CheckResponse(
                allowed=True,
                limit=rule.requests_per_unit,
                remaining=remaining,
                matched_rule=rule.rule_id,
            )
        finally:
            self.metrics.record_latency((time.perf_counter() - started) * 1e6)

    def _degraded_response(self) -> CheckResponse:
        if self.fail_policy == FAIL_OPEN:
            return CheckResponse(allowed=True, degraded=True)
        return CheckResponse(allowed=False, degraded=True)

    # -- middleware --------------------------------------------------------

    def middleware_decision(
        self,
        request: dict,
        upstream: Callable[[dict], Tuple[int, Dict[str, str], bytes]],
        domain: str,
    ) -> Tuple[int, Dict[str, str], bytes]:
        """Wrap an upstream handler: forward on allow, 429 on deny.

        `request` is a plain mapping with "path", "headers" and "client_ip";
        descriptors are extracted as user_id <- X-User-Id header, ip_address
        <- client address, endpoint <- request path.
        """
        headers = {k.lower(): v for k, v in request.get("headers", {}).items()}
        descriptors = {
            "endpoint": request.get("path", "/"),
            "ip_address": request.get("client_ip", "unknown"),
        }
        if "x-user-id" in headers:
            descriptors["user_id"] = headers["x-user-id"]
        check = CheckRequest(domain=domain, descriptors=descriptors)
        response = self.handle_check(check, self.clock.now())

        if response.degraded and response.allowed:
            status, up_headers, body = upstream(request)
            up_headers = dict(up_headers)
            up_headers["X-RateLimit-Degraded"] = "true"
            return status, up_headers, body
        if response.degraded:
            return 503, {"X-RateLimit-Degraded": "true"}, b"store unavailable\n"
        if not response.allowed:
            return 429, denial_headers(response), b"rate limit exceeded\n"

        status, up_headers, body = upstream(request)
        up_headers = dict(up_headers)
        if response.matched_rule is not None:
            up_headers["X-RateLimit-Limit"] = str(response.limit)
            up_headers["X-RateLimit-Remaining"] = str(response.remaining)
        return status, up_headers, body


def denial_headers(response: CheckResponse) -> Dict[str, str]:
    """The three mandatory throttle headers; Retry-After rounds up to whole
    seconds (minimum 1) per HTTP convention."""
    retry = response.retry_after if response.retry_after is not None else 1.0
    return {
        "X-RateLimit-Limit": str(response.limit if response.limit is not None else 0),
        "X-RateLimit-Remaining": str(
            response.remaining if response.remaining is not None else 0
        ),
        "Retry-After": str(max(1, math.ceil(retry))),
    }


def _stub_upstream(request: dict) -> Tuple[int, Dict[str, str], bytes]:
    return 200, {"Content-Type": "text/plain"}, b"ok\n"


def rule_to_json(rule: RateLimitRule) -> dict:
    return {
        "rule_id": rule.rule_id,
        "domain": rule.domain,
        "descriptor_key": rule.descriptor_key,
        "algorithm": rule.algorithm.value,
        "unit": rule.unit,
        "requests_per_unit": rule.requests_per_unit,
        "min_interval_seconds": rule.min_interval,
        "ttl_seconds": rule.ttl,
        "version": rule.version,
    }


def rule_from_json(payload: dict) -> RateLimitRule:
    try:
        return RateLimitRule(
            domain=payload["domain"],
            descriptor_key=payload["descriptor_key"],
            algorithm=Algorithm(payload["algorithm"]),
            unit=payload["unit"],
            requests_per_unit=int(payload["requests_per_unit"]),
            min_interval=float(payload.get("min_interval_seconds", 0.0)),
            ttl=(
                float(payload["ttl_seconds"])
                if payload.get("ttl_seconds") is not None
                else None
            ),
            version=int(payload.get("version", 1)),
        )
    except (KeyError, ValueError, TypeError) as exc:
        raise RuleValidationError(f"bad rule payload: {exc}") from exc


class _Handler(BaseHTTPRequestHandler):
    server_version = "limitd"
    protocol_version = "HTTP/1.1"

    def log_message(self, fmt, *args):  # quiet by default
        if self.server.verbose:
            super().log_message(fmt, *args)

    # helpers

    def _body(self) -> bytes:
        length = int(self.headers.get("Content-Length") or 0)
        return self.rfile.read(length) if length else b""

    def _send(self, status: int, body: bytes, content_type: str, headers=None) -> None:
        self.send_response(status)
        self.send_header("Content-Type", content_type)
        self.send_header("Content-Length", str(len(body)))
        for k, v in (headers or {}).items():
            self.send_header(k, v)
        self.end_headers()
        self.wfile.write(body)

    def _send_json(self, status: int, payload, headers=None) -> None:
        self._send(
            status, json.dumps(payload).encode("utf-8"), "application/json", headers
        )

    # routes

    def do_POST(self) -> None:
        gw: RateLimitGateway = self.server.gateway
        if self.path != "/v1/check":
            self._send_json(404, {"error": "not found"})
            return
        try:
            payload = json.loads(self._body() or b"{}")
            request = CheckRequest(
                domain=payload["domain"],
                descriptors={str(k): str(v) for k, v in payload["descriptors"].items()},
                cost=int(payload.get("cost", 1)),
            )
        except (KeyError, ValueError, TypeError, json.JSONDecodeError) as exc:
            self._send_json(400, {"error": f"bad check request: {exc}"})
            return
        response = gw.handle_check(request, gw.clock.now())
        headers = {} if response.allowed else denial_headers(response)
        status = 200 if response.allowed else 429
        self._send_json(status, response.to_json(), headers)

    def do_GET(self) -> None:
        gw: RateLimitGateway = self.server.gateway
        if self.path == "/v1/metrics":
            self._send(200, gw.metrics.exposition().encode("utf-8"), "text/plain")
        elif self.path == "/v1/admin/rules":
            self._send_json(200, [rule_to_json(r) for r in gw.rules.list_rules()])
        elif self.path.startswith("/v1/admin/rules/"):
            rule_id = self.path[len("/v1/admin/rules/"):]
            for rule in gw.rules.list_rules():
                if rule.rule_id == rule_id:
                    self._send_json(200, rule_to_json(rule))
                    return
            self._send_json(404, {"error": f"no rule {rule_id!r}"})
        else:
            self._middleware()

    def do_PUT(self) -> None:
        gw: RateLimitGateway = self.server.gateway
        if self.path == "/v1/admin/rules":
            try:
                rules = gw.rules.load_rules(self._body().decode("utf-8"))
            except RuleError as exc:
                self._send_json(400, {"error": str(exc)})
                return
            self._send_json(200, [rule_to_json(r) for r in rules])
        elif self.path.startswith("/v1/admin/rules/"):
            try:
                rule = rule_from_json(json.loads(self._body() or b"{}"))
                version = gw.rules.update_rule(rule)
            except VersionConflictError as exc:
                self._send_json(409, {"error": str(exc)})
                return
            except (RuleValidationError, RuleParseError, json.JSONDecodeError) as exc:
                self._send_json(400, {"error": str(exc)})
                return
            self._send_json(200, {"rule_id": rule.rule_id, "version": version})
        else:
            self._send_json(404, {"error": "not found"})

    def _middleware(self) -> None:
        gw: RateLimitGateway = self.server.gateway
        request = {
            "path": self.path,
            "headers": dict(self.headers.items()),
            "client_ip": self.client_address[0],
        }
        status, headers, body = gw.middleware_decision(
            request, self.server.upstream, self.server.middleware_domain
        )
        self._send(status, body, headers.pop("Content-Type", "text/plain"), headers)


class GatewayServer:
    """Threaded HTTP server hosting the gateway endpoints.

    Port 0 picks an ephemeral port; the bound port is available as .port."""

    def __init__(
        self,
        gateway: RateLimitGateway,
        host: str = "127.0.0.1",
        port: int = 0,
        middleware_domain: str = "api",
        upstream: Callable[[dict], Tuple[int, Dict[str, str], bytes]] = _stub_upstream,
        verbose: bool = False,
    ) -> None:
        self._httpd = ThreadingHTTPServer((host, port), _Handler)
        self._httpd.daemon_threads = True
        self._httpd.gateway = gateway
        self._httpd.upstream = upstream
        self._httpd.middleware_domain = middleware_domain
        self._httpd.verbose = verbose
        self._thread: Optional[threading.Thread] = None

    @property
    def port(self) -> int:
        return self._httpd.server_address[1]

    def start(self) -> "GatewayServer":
        self._thread = threading.Thread(target=self._httpd.serve_forever, daemon=True)
        self._thread.start()
        return self

    def serve_forever(self) -> None:
        self._httpd.serve_forever()

    def stop(self) -> None:
        self._httpd.shutdown()
        self._httpd.server_close()
        if self._thread is not None:
            self._thread.join(timeout=5)
