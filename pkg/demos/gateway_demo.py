"""Live HTTP gateway: checks, throttle headers, admin API, metrics.

Starts the gateway on an ephemeral port, fires requests until one is
throttled, and shows the 429 contract (X-RateLimit-Limit,
X-RateLimit-Remaining, integer Retry-After). Run with:
python3 demos/gateway_demo.py
"""

import json
import tempfile
import urllib.request

from limitd import AtomicLimiters, FileRuleStore, RuleManager, SystemClock, new_engine
from limitd.gateway import GatewayServer, RateLimitGateway

RULES = """\
domain: api
descriptors:
  - key: user_id
    algorithm: rolling_window
    rate_limit: {unit: minute, requests_per_unit: 3}
"""


def post_check(port: int, user: str):
    body = json.dumps({"domain": "api", "descriptors": {"user_id": user}}).encode()
    req = urllib.request.Request(
        f"http://127.0.0.1:{port}/v1/check", data=body, method="POST",
        headers={"Content-Type": "application/json"},
    )
    try:
        with urllib.request.urlopen(req) as resp:
            return resp.status, dict(resp.headers), json.load(resp)
    except urllib.error.HTTPError as err:
        return err.code, dict(err.headers), json.load(err)


def main() -> None:
    clock = SystemClock()
    engine = new_engine(clock=clock)
    with tempfile.NamedTemporaryFile(suffix=".yaml") as fh:
        manager = RuleManager(FileRuleStore(fh.name), engine, clock=clock)
        manager.load_rules(RULES)
        gateway = RateLimitGateway(manager, AtomicLimiters(engine), clock=clock)
        server = GatewayServer(gateway, port=0).start()
        try:
            print(f"gateway on port {server.port}; limit is 3/minute per user\n")
            for i in range(5):
                status, headers, payload = post_check(server.port, "alice")
                line = f"request {i + 1}: HTTP {status}"
                if status == 429:
                    line += (f"  Retry-After={headers['Retry-After']}s"
                             f"  X-RateLimit-Remaining="
                             f"{headers['X-RateLimit-Remaining']}")
                else:
                    line += f"  remaining={payload['remaining']}"
                print(line)

            print("\n-- metrics exposition --")
            with urllib.request.urlopen(
                f"http://127.0.0.1:{server.port}/v1/metrics"
            ) as resp:
                for line in resp.read().decode().splitlines():
                    if "latency" not in line:
                        print(line)
        finally:
            server.stop()


if __name__ == "__main__":
    main()
