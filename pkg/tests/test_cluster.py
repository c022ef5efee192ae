import random
from collections import Counter

import pytest

from limitd.cluster import (
    AP,
    CP,
    ClusterConfig,
    ClusterSim,
    ShardSpec,
    UnreachableError,
    crc16,
    default_config,
    hash_tag,
    rate_limit_drift_experiment,
    run_scenario_dict,
    scenario_leader_crash,
    scenario_split_brain,
    slot_for_key,
)
from limitd.core import RuleParams


class TestHashSlots:
    def test_crc16_reference_vector(self):
        # the standard CCITT/XMODEM check value for "123456789"
        assert crc16(b"123456789") == 0x31C3

    def test_slot_is_deterministic(self):
        assert slot_for_key("rate_limiter:user42") == slot_for_key(
            "rate_limiter:user42"
        )

    def test_hash_tag_overrides_full_key(self):
        assert hash_tag("rate_limiter:{user42}:extra") == "user42"
        assert slot_for_key("a:{user42}") == slot_for_key("b:{user42}")

    def test_empty_or_missing_tag_uses_full_key(self):
        assert hash_tag("plain_key") == "plain_key"
        assert hash_tag("odd{}key") == "odd{}key"

    def test_slot_range(self):
        for i in range(1000):
            assert 0 <= slot_for_key(f"key{i}") < 16384

    def test_slot_distribution_is_balanced(self):
        # no slot bucket (mod 16 shards) exceeds 3x the mean over 10^5 keys
        counts = Counter(slot_for_key(f"user:{i}") % 16 for i in range(10**5))
        mean = 10**5 / 16
        assert max(counts.values()) < 3 * mean


class TestRouting:
    def test_same_shard_for_same_key(self):
        sim = ClusterSim(default_config())
        assert sim.route("rate_limiter:u1") == "n1"

    def test_cp_minority_leader_unreachable(self):
        sim = ClusterSim(default_config(consistency_mode=CP))
        sim.schedule(0.0, "partition", (("n1", 1), ("n2", 0), ("n3", 0)))
        sim.run()
        with pytest.raises(UnreachableError):
            sim.route("rate_limiter:u1", client_group=1)

    def test_ap_minority_leader_still_serves(self):
        sim = ClusterSim(default_config(consistency_mode=AP))
        sim.schedule(0.0, "partition", (("n1", 1), ("n2", 0), ("n3", 0)))
        sim.run()
        assert sim.route("rate_limiter:u1", client_group=1) == "n1"

    def test_config_requires_replicas(self):
        with pytest.raises(ValueError):
            ClusterConfig(shards=(ShardSpec(leader="n1", replicas=()),))


class TestLeaderCrash:
    def test_async_crash_loses_unreplicated_suffix(self):
        report, _ = scenario_leader_crash(default_config(), 10, 3)
        assert report.acknowledged_writes == 10
        assert report.lost_writes == 3
        assert report.surviving_writes == 7

    def test_fully_replicated_crash_loses_nothing(self):
        report, _ = scenario_leader_crash(default_config(), 10, 0)
        assert report.lost_writes == 0

    def test_sync_replication_never_loses(self):
        report, _ = scenario_leader_crash(
            default_config(replication_mode="sync"), 10, 3
        )
        assert report.lost_writes == 0
        assert report.surviving_writes == 10

    def test_replica_promoted_after_timeout(self):
        config = default_config()
        sim = ClusterSim(config)
        sim.schedule(0.0, "client_write", "rate_limiter:{crash}", "w0", 0.0, 0)
        sim.schedule(2.0, "crash", "n1")
        sim.run()
        roles = {nid: n.role for nid, n in sim.nodes.items() if n.alive}
        assert "leader" in roles.values()
        assert "n1" not in roles

    def test_unreplicated_exceeding_writes_rejected(self):
        with pytest.raises(ValueError):
            scenario_leader_crash(default_config(), 3, 5)


class TestSplitBrain:
    def test_ap_discards_minority_writes_on_heal(self):
        report, _ = scenario_split_brain(
            default_config(consistency_mode=AP), minority_writes=7, heal_after=20.0
        )
        assert report.lost_writes == 7
        assert report.rejected_during_partition == 0

    def test_cp_rejects_minority_writes(self):
        report, _ = scenario_split_brain(
            default_config(consistency_mode=CP), minority_writes=7, heal_after=20.0
        )
        assert report.lost_writes == 0
        assert report.rejected_during_partition == 7

    def test_heal_before_failover_keeps_original_leader(self):
        report, _ = scenario_split_brain(
            default_config(consistency_mode=AP), minority_writes=2, heal_after=3.0
        )
        assert report.lost_writes == 0

    def test_replicas_consistent_after_heal(self):
        config = default_config(consistency_mode=AP)
        sim = ClusterSim(config)
        key = "rate_limiter:{split}"
        for i in range(3):
            sim.schedule(float(i), "client_write", key, f"w{i}", float(i), 0)
        sim.schedule(10.0, "partition", (("n1", 1), ("n2", 0), ("n3", 0)))
        sim.schedule(30.0, "heal")
        sim.run()
        sim.finalize()
        assert sim.quiescent_replicas_consistent()


class TestDrift:
    def params(self):
        return RuleParams(window_size=10.0, max_requests=5, ttl=20.0)

    def trace(self, seed, n=200):
        rng = random.Random(seed)
        t, out = 0.0, []
        for _ in range(n):
            t += rng.uniform(0.2, 1.5)
            out.append((t, "rate_limiter:{drift-user}"))
        return out

    def test_no_faults_no_drift(self):
        report, _ = rate_limit_drift_experiment(
            default_config(), self.trace(1), self.params()
        )
        assert report.over_admitted_requests == 0
        assert report.lost_writes == 0

    def test_crash_drift_bounded_by_lost_writes(self):
        # instantaneous failover: the only drift source is the lost suffix
        config = default_config(failover_timeout=0.0)
        for seed in range(10):
            trace = self.trace(seed)
            crash_at = trace[len(trace) // 2][0] + 0.01
            report, _ = rate_limit_drift_experiment(
                config,
                trace,
                self.params(),
                fault_schedule=[(crash_at, "crash", ("n1",))],
            )
            assert 0 <= report.over_admitted_requests <= report.lost_writes

    def test_determinism(self):
        runs = []
        for _ in range(2):
            report, log = rate_limit_drift_experiment(
                default_config(),
                self.trace(7),
                self.params(),
                fault_schedule=[(50.0, "crash", ("n1",))],
            )
            runs.append((report.as_dict(), log))
        assert runs[0] == runs[1]

    def test_conservation(self):
        report, _ = rate_limit_drift_experiment(
            default_config(), self.trace(3), self.params()
        )
        assert (
            report.surviving_writes + report.lost_writes
            == report.acknowledged_writes
        )


class TestScenarioFiles:
    def test_leader_crash_dict(self):
        name, report = run_scenario_dict(
            {
                "scenario": "leader_crash",
                "leader_crash": {"writes": 10, "unreplicated": 3},
            }
        )
        assert name == "leader_crash" and report.lost_writes == 3

    def test_split_brain_dict(self):
        name, report = run_scenario_dict(
            {
                "scenario": "split_brain",
                "config": {"consistency_mode": "CP"},
                "split_brain": {"minority_writes": 4, "heal_after": 20.0},
            }
        )
        assert report.rejected_during_partition == 4 and report.lost_writes == 0

    def test_drift_dict_seeded(self):
        results = [
            run_scenario_dict(
                {"scenario": "drift", "drift": {"checks": 50, "crash_at": 15.0}},
                seed=11,
            )[1].as_dict()
            for _ in range(2)
        ]
        assert results[0] == results[1]

    def test_unknown_scenario(self):
        with pytest.raises(ValueError):
            run_scenario_dict({"scenario": "meteor_strike"})
