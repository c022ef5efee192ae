"""Rule management: persistent store, cache, and stable script bindings.

Numeric limit changes are pure configuration -- they flow through the store
and cache without touching the registered scripts, so tightening a limit
needs no redeploy. Only switching a rule's algorithm rebinds it to a
different script hash. Run with: python3 demos/rule_management.py
"""

import tempfile

from limitd import FileRuleStore, ManualClock, RateLimitRule, RuleManager, new_engine
from limitd.core import Algorithm

RULES = """\
domain: api
descriptors:
  - key: user_id
    algorithm: rolling_window
    rate_limit: {unit: minute, requests_per_unit: 60}
"""


def main() -> None:
    clock = ManualClock()
    engine = new_engine(clock=clock)
    with tempfile.NamedTemporaryFile(suffix=".yaml") as fh:
        manager = RuleManager(FileRuleStore(fh.name), engine, clock=clock)
        manager.load_rules(RULES)

        rule = manager.get_rule("api", "user_id")
        print(f"loaded {rule.rule_id}: {rule.requests_per_unit}/{rule.unit} "
              f"(version {rule.version})")
        before = manager.registry_snapshot()
        print("script registry:", before, "\n")

        print("-- tighten the limit to 30/minute --")
        manager.update_rule(
            RateLimitRule(
                domain="api", descriptor_key="user_id",
                algorithm=rule.algorithm, unit=rule.unit,
                requests_per_unit=30, version=rule.version,
            )
        )
        updated = manager.get_rule("api", "user_id")
        print(f"now {updated.requests_per_unit}/{updated.unit} "
              f"(version {updated.version})")
        print("registry unchanged:", manager.registry_snapshot() == before, "\n")

        print("-- switch the algorithm to token_bucket --")
        manager.update_rule(
            RateLimitRule(
                domain="api", descriptor_key="user_id",
                algorithm=Algorithm.TOKEN_BUCKET, unit=updated.unit,
                requests_per_unit=updated.requests_per_unit,
                version=updated.version,
            )
        )
        print("registry gained a script:",
              set(manager.registry_snapshot()) - set(before))


if __name__ == "__main__":
    main()
