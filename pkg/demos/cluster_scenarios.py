"""Cluster failure modes: crash write loss, split brain, and rate-limit drift.

Runs the deterministic cluster simulator through three canned scenarios and
prints the drift reports. The same scenarios are available as YAML files for
`limitd simulate` (see demos/scenarios/). Run with:
python3 demos/cluster_scenarios.py
"""

import random

from limitd.cluster import (
    AP,
    CP,
    default_config,
    rate_limit_drift_experiment,
    scenario_leader_crash,
    scenario_split_brain,
)
from limitd.core import RuleParams


def show(title: str, report) -> None:
    print(f"-- {title} --")
    for key, value in report.as_dict().items():
        print(f"  {key} = {value}")
    print()


def main() -> None:
    report, _ = scenario_leader_crash(default_config(), writes_acked=10, unreplicated=3)
    show("leader crash, async replication, 3 writes not yet replicated", report)

    report, _ = scenario_leader_crash(
        default_config(replication_mode="sync"), writes_acked=10, unreplicated=3
    )
    show("same crash with synchronous replication", report)

    report, _ = scenario_split_brain(
        default_config(consistency_mode=AP), minority_writes=7, heal_after=20.0
    )
    show("split brain, AP posture (minority keeps serving, loses on heal)", report)

    report, _ = scenario_split_brain(
        default_config(consistency_mode=CP), minority_writes=7, heal_after=20.0
    )
    show("split brain, CP posture (minority refuses, nothing lost)", report)

    rng = random.Random(42)
    t, trace = 0.0, []
    for _ in range(150):
        t += rng.uniform(0.2, 1.5)
        trace.append((t, "rate_limiter:{drift-user}"))
    params = RuleParams(window_size=10.0, max_requests=5, ttl=20.0)
    crash_at = trace[75][0] + 0.01
    report, _ = rate_limit_drift_experiment(
        default_config(failover_timeout=0.0), trace, params,
        fault_schedule=[(crash_at, "crash", ("n1",))],
    )
    show("rate-limit drift after a mid-trace leader crash", report)


if __name__ == "__main__":
    main()
