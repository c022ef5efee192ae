"""Tour of the embedded sorted-set engine and its atomic scripts.

The engine stores (score, member) pairs per key, supports score-range
removal and TTL expiry, and runs registered procedures atomically by
content hash -- the same building blocks the distributed limiters use.
Run with: python3 demos/engine_and_scripts.py
"""

from limitd import ManualClock, new_engine
from limitd.scripts import ROLLING_WINDOW_SCRIPT


def main() -> None:
    clock = ManualClock()
    engine = new_engine(clock=clock)

    print("-- sorted-set basics --")
    for t in (1.0, 2.5, 4.0):
        engine.zadd("rate_limiter:alice", t, repr(t))
    print("members:", engine.zcard("rate_limiter:alice"))
    print("newest :", engine.zrev_range_with_scores("rate_limiter:alice", 0, 0))
    removed = engine.zrem_range_by_score("rate_limiter:alice", 0.0, 2.5)
    print("removed", removed, "entries with score <= 2.5\n")

    print("-- TTL expiry --")
    engine.expire("rate_limiter:alice", 10.0)
    clock.advance(11.0)
    print("after 11 simulated seconds the key holds",
          engine.zcard("rate_limiter:alice"), "entries\n")

    print("-- atomic rolling-window script --")
    digest = engine.load_script(ROLLING_WINDOW_SCRIPT)
    print("script hash:", digest)
    window, limit = 10.0, 3
    for i in range(5):
        now = float(i)
        allowed, remaining, retry = engine.eval_by_hash(
            digest,
            ["rate_limiter:bob"],
            [repr(window), str(limit), "0.0", repr(2 * window), repr(now), "0"],
        )
        verdict = "allowed" if allowed else f"denied, retry in {retry}s"
        print(f"t={now:3.0f}s  {verdict:24s} remaining={remaining}")


if __name__ == "__main__":
    main()
