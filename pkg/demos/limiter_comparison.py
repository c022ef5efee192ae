"""Compare the window algorithms on the same boundary-straddling burst.

A fixed window resets its counter at calendar boundaries, so a burst placed
just before and just after a boundary admits double the limit inside a
window-length span. The rolling window counts the trailing span from each
request and never over-admits. Run with: python3 demos/limiter_comparison.py
"""

from limitd import RuleParams, FixedWindowState, RollingWindowState
from limitd import fixed_window_allow, rolling_window_allow
from limitd.bench import max_in_any_span, straddling_burst_trace

WINDOW = 60.0
LIMIT = 100


def main() -> None:
    params = RuleParams(window_size=WINDOW, max_requests=LIMIT)
    trace = straddling_burst_trace(WINDOW, LIMIT)

    fixed_state = FixedWindowState()
    rolling_state = RollingWindowState()
    fixed_admitted, rolling_admitted = [], []
    for t in sorted(trace):
        decision, fixed_state = fixed_window_allow(fixed_state, params, t)
        if decision.allowed:
            fixed_admitted.append(t)
        decision, rolling_state = rolling_window_allow(rolling_state, params, t)
        if decision.allowed:
            rolling_admitted.append(t)

    print(f"burst of {LIMIT} requests on each side of the t={WINDOW:.0f}s boundary")
    print(f"limit: {LIMIT} requests per {WINDOW:.0f}s window\n")
    for name, admitted in (("fixed window", fixed_admitted),
                           ("rolling window", rolling_admitted)):
        peak = max_in_any_span(admitted, WINDOW)
        print(f"{name:15s} admitted {len(admitted):3d} total, "
              f"worst {WINDOW:.0f}s span holds {peak:3d} "
              f"({'OVER the limit' if peak > LIMIT else 'within the limit'})")


if __name__ == "__main__":
    main()
