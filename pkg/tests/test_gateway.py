import httpx
import pytest

from limitd.clock import ManualClock
from limitd.gateway import (
    CheckRequest,
    CheckResponse,
    GatewayServer,
    RateLimitGateway,
    denial_headers,
)
from limitd.limiters import AtomicLimiters
from limitd.rules import FileRuleStore, RuleManager
from limitd.scripts import new_engine

RULES_DOC = """\
domain: api
descriptors:
  - key: user_id
    algorithm: rolling_window
    rate_limit: {unit: minute, requests_per_unit: 5}
    ttl_seconds: 120
  - key: ip_address
    algorithm: fixed_window
    rate_limit: {unit: minute, requests_per_unit: 100}
"""


def make_gateway(tmp_path, fail_policy="fail_open", doc=RULES_DOC, engine=None):
    clock = ManualClock() if engine is None else engine.clock
    engine = engine if engine is not None else new_engine(clock=clock)
    store = FileRuleStore(str(tmp_path / "rules.yaml"))
    manager = RuleManager(store, engine, clock=engine.clock)
    manager.load_rules(doc)
    return RateLimitGateway(
        manager, AtomicLimiters(engine), clock=engine.clock, fail_policy=fail_policy
    )


class TestHandleCheck:
    def test_allow_within_limit(self, tmp_path):
        gw = make_gateway(tmp_path)
        resp = gw.handle_check(
            CheckRequest("api", {"user_id": "alice"}), now=0.0
        )
        assert resp.allowed and resp.remaining == 4 and resp.matched_rule == "api.user_id"

    def test_denial_carries_retry_after(self, tmp_path):
        gw = make_gateway(tmp_path)
        for i in range(5):
            gw.handle_check(CheckRequest("api", {"user_id": "alice"}), now=0.1 * i)
        resp = gw.handle_check(CheckRequest("api", {"user_id": "alice"}), now=1.0)
        assert not resp.allowed
        assert resp.retry_after is not None and resp.retry_after > 0
        assert resp.limit == 5 and resp.remaining == 0

    def test_users_isolated(self, tmp_path):
        gw = make_gateway(tmp_path)
        for i in range(5):
            gw.handle_check(CheckRequest("api", {"user_id": "alice"}), now=0.1 * i)
        resp = gw.handle_check(CheckRequest("api", {"user_id": "bob"}), now=1.0)
        assert resp.allowed

    def test_unmatched_descriptors_pass(self, tmp_path):
        gw = make_gateway(tmp_path)
        resp = gw.handle_check(CheckRequest("api", {"tenant": "t1"}), now=0.0)
        assert resp.allowed and resp.matched_rule is None

    def test_first_denial_short_circuits_without_consuming(self, tmp_path):
        # rule_ids sort ip_address < user_id; exhaust ip budget, then confirm
        # the user_id window was never charged by the denied checks
        doc = RULES_DOC.replace("requests_per_unit: 100", "requests_per_unit: 1")
        gw = make_gateway(tmp_path, doc=doc)
        both = CheckRequest("api", {"user_id": "alice", "ip_address": "10.0.0.1"})
        assert gw.handle_check(both, now=0.0).allowed
        for i in range(10):
            resp = gw.handle_check(both, now=0.1 * (i + 1))
            assert not resp.allowed and resp.matched_rule == "api.ip_address"
        solo = gw.handle_check(CheckRequest("api", {"user_id": "alice"}), now=2.0)
        assert solo.allowed and solo.remaining == 3  # one charge, not eleven

    def test_tightest_rule_reported_on_allow(self, tmp_path):
        gw = make_gateway(tmp_path)
        resp = gw.handle_check(
            CheckRequest("api", {"user_id": "alice", "ip_address": "10.0.0.1"}),
            now=0.0,
        )
        assert resp.allowed and resp.matched_rule == "api.user_id"

    def test_stateless_instances_share_decisions(self, tmp_path):
        clock = ManualClock()
        engine = new_engine(clock=clock)
        gw1 = make_gateway(tmp_path, engine=engine)
        gw2 = RateLimitGateway(gw1.rules, AtomicLimiters(engine), clock=clock)
        for i in range(5):
            target = gw1 if i % 2 == 0 else gw2
            assert target.handle_check(
                CheckRequest("api", {"user_id": "alice"}), now=0.1 * i
            ).allowed
        # either instance sees the shared budget exhausted
        assert not gw1.handle_check(
            CheckRequest("api", {"user_id": "alice"}), now=1.0
        ).allowed
        assert not gw2.handle_check(
            CheckRequest("api", {"user_id": "alice"}), now=1.1
        ).allowed

    def test_invalid_requests_rejected(self):
        with pytest.raises(ValueError):
            CheckRequest("api", {})
        with pytest.raises(ValueError):
            CheckRequest("api", {"user_id": "u"}, cost=0)


class TestFailPolicies:
    def test_fail_open_allows_degraded(self, tmp_path):
        gw = make_gateway(tmp_path, fail_policy="fail_open")
        gw.limiters.engine.fail_commands = True
        resp = gw.handle_check(CheckRequest("api", {"user_id": "u"}), now=0.0)
        assert resp.allowed and resp.degraded

    def test_fail_closed_denies_degraded(self, tmp_path):
        gw = make_gateway(tmp_path, fail_policy="fail_closed")
        gw.limiters.engine.fail_commands = True
        resp = gw.handle_check(CheckRequest("api", {"user_id": "u"}), now=0.0)
        assert not resp.allowed and resp.degraded

    def test_store_errors_counted(self, tmp_path):
        gw = make_gateway(tmp_path)
        gw.limiters.engine.fail_commands = True
        gw.handle_check(CheckRequest("api", {"user_id": "u"}), now=0.0)
        assert gw.metrics.store_errors == 1

    def test_unknown_policy_rejected(self, tmp_path):
        with pytest.raises(ValueError):
            make_gateway(tmp_path, fail_policy="fail_sideways")


class TestDenialHeaders:
    def test_retry_after_rounds_up_to_at_least_one(self):
        resp = CheckResponse(allowed=False, limit=5, remaining=0, retry_after=0.2)
        assert denial_headers(resp)["Retry-After"] == "1"
        resp = CheckResponse(allowed=False, limit=5, remaining=0, retry_after=30.4)
        assert denial_headers(resp)["Retry-After"] == "31"

    def test_all_three_headers_present(self):
        headers = denial_headers(
            CheckResponse(allowed=False, limit=5, remaining=0, retry_after=2.0)
        )
        assert set(headers) == {
            "X-RateLimit-Limit",
            "X-RateLimit-Remaining",
            "Retry-After",
        }


class TestMiddleware:
    def request(self, user="alice", path="/widgets", ip="10.0.0.1"):
        return {"path": path, "headers": {"X-User-Id": user}, "client_ip": ip}

    def upstream(self, request):
        return 200, {"Content-Type": "text/plain"}, b"hello\n"

    def test_allowed_request_forwards_with_headers(self, tmp_path):
        gw = make_gateway(tmp_path)
        status, headers, body = gw.middleware_decision(
            self.request(), self.upstream, "api"
        )
        assert status == 200 and body == b"hello\n"
        assert headers["X-RateLimit-Limit"] == "5"
        assert headers["X-RateLimit-Remaining"] == "4"

    def test_denied_request_gets_429(self, tmp_path):
        gw = make_gateway(tmp_path)
        for _ in range(5):
            gw.middleware_decision(self.request(), self.upstream, "api")
            gw.clock.advance(0.1)
        status, headers, body = gw.middleware_decision(
            self.request(), self.upstream, "api"
        )
        assert status == 429
        assert int(headers["Retry-After"]) >= 1
        assert headers["X-RateLimit-Remaining"] == "0"

    def test_fail_closed_degraded_is_503(self, tmp_path):
        gw = make_gateway(tmp_path, fail_policy="fail_closed")
        gw.limiters.engine.fail_commands = True
        status, headers, _ = gw.middleware_decision(
            self.request(), self.upstream, "api"
        )
        assert status == 503 and headers["X-RateLimit-Degraded"] == "true"

    def test_fail_open_degraded_marks_header(self, tmp_path):
        gw = make_gateway(tmp_path, fail_policy="fail_open")
        gw.limiters.engine.fail_commands = True
        status, headers, _ = gw.middleware_decision(
            self.request(), self.upstream, "api"
        )
        assert status == 200 and headers["X-RateLimit-Degraded"] == "true"


@pytest.fixture
def server(tmp_path):
    gw = make_gateway(tmp_path)
    srv = GatewayServer(gw, port=0).start()
    yield srv, gw
    srv.stop()


class TestHttpServer:
    def check(self, srv, descriptors, domain="api"):
        return httpx.post(
            f"http://127.0.0.1:{srv.port}/v1/check",
            json={"domain": domain, "descriptors": descriptors},
            timeout=5.0,
        )

    def test_check_allow_then_429(self, server):
        srv, gw = server
        for _ in range(5):
            resp = self.check(srv, {"user_id": "alice"})
            assert resp.status_code == 200 and resp.json()["allowed"]
            gw.clock.advance(0.1)
        resp = self.check(srv, {"user_id": "alice"})
        assert resp.status_code == 429
        assert resp.headers["X-RateLimit-Limit"] == "5"
        assert resp.headers["X-RateLimit-Remaining"] == "0"
        assert int(resp.headers["Retry-After"]) >= 1

    def test_check_bad_payload_is_400(self, server):
        srv, _ = server
        resp = httpx.post(
            f"http://127.0.0.1:{srv.port}/v1/check", content=b"{", timeout=5.0
        )
        assert resp.status_code == 400

    def test_admin_list_and_get(self, server):
        srv, _ = server
        base = f"http://127.0.0.1:{srv.port}/v1/admin/rules"
        listed = httpx.get(base, timeout=5.0)
        assert listed.status_code == 200
        assert {r["rule_id"] for r in listed.json()} == {
            "api.user_id",
            "api.ip_address",
        }
        single = httpx.get(f"{base}/api.user_id", timeout=5.0)
        assert single.status_code == 200
        assert single.json()["requests_per_unit"] == 5
        assert httpx.get(f"{base}/nope.nope", timeout=5.0).status_code == 404

    def test_admin_update_and_conflict(self, server):
        srv, _ = server
        base = f"http://127.0.0.1:{srv.port}/v1/admin/rules"
        current = httpx.get(f"{base}/api.user_id", timeout=5.0).json()
        current["requests_per_unit"] = 50
        updated = httpx.put(f"{base}/api.user_id", json=current, timeout=5.0)
        assert updated.status_code == 200
        assert updated.json()["version"] == current["version"] + 1
        # replaying the same stale version conflicts
        conflict = httpx.put(f"{base}/api.user_id", json=current, timeout=5.0)
        assert conflict.status_code == 409

    def test_admin_bulk_load(self, server):
        srv, _ = server
        resp = httpx.put(
            f"http://127.0.0.1:{srv.port}/v1/admin/rules",
            content=RULES_DOC.encode(),
            timeout=5.0,
        )
        assert resp.status_code == 200 and len(resp.json()) == 2
        bad = httpx.put(
            f"http://127.0.0.1:{srv.port}/v1/admin/rules",
            content=b"domain: [",
            timeout=5.0,
        )
        assert bad.status_code == 400

    def test_metrics_exposition(self, server):
        srv, _ = server
        self.check(srv, {"user_id": "alice"})
        text = httpx.get(
            f"http://127.0.0.1:{srv.port}/v1/metrics", timeout=5.0
        ).text
        assert 'limitd_allowed_total{domain="api",descriptor="user_id"} 1' in text
        assert "limitd_check_latency_us_count 1" in text

    def test_middleware_path(self, server):
        srv, gw = server
        resp = httpx.get(
            f"http://127.0.0.1:{srv.port}/widgets",
            headers={"X-User-Id": "carol"},
            timeout=5.0,
        )
        assert resp.status_code == 200
        assert resp.headers["X-RateLimit-Limit"] == "5"
        for _ in range(5):
            gw.clock.advance(0.1)
            resp = httpx.get(
                f"http://127.0.0.1:{srv.port}/widgets",
                headers={"X-User-Id": "carol"},
                timeout=5.0,
            )
        assert resp.status_code == 429
        assert int(resp.headers["Retry-After"]) >= 1
