"""Deterministic leader-replica cluster simulator.

Simulates a sharded cluster of sorted-set engine nodes on a discrete-event
loop with purely simulated time: hash-slot routing, asynchronous (or
synchronous) replication, leader crash with write loss, split-brain
partitions with AP/CP postures, replica promotion, and drift accounting for
rate-limit traffic. Identical (config, seed, scenario) inputs produce
identical event logs and reports.
"""

from __future__ import annotations

import heapq
import itertools
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

from .clock import ManualClock
from .core import RuleParams
from .scripts import ROLLING_WINDOW_SCRIPT, new_engine

AP = "AP"
CP = "CP"


class UnreachableError(Exception):
    """No leader visible from the client's side of the partition."""


# -- hash slots -------------------------------------------------------------

def crc16(data: bytes) -> int:
    """CRC16-CCITT (XMODEM): the fixed, documented key hash."""
    crc = 0
    for byte in data:
        crc ^= byte << 8
        for _ in range(8):
            crc = ((crc << 1) ^ 0x1021) if crc & 0x8000 else (crc << 1)
            crc &= 0xFFFF
    return crc


def hash_tag(key: str) -> str:
    """The {...}-delimited substring, if present and non-empty, else the key."""
    start = key.find("{")
    if start >= 0:
        end = key.find("}", start + 1)
        if end > start + 1:
            return key[start + 1 : end]
    return key


def slot_for_key(key: str, num_slots: int = 16384) -> int:
    return crc16(hash_tag(key).encode("utf-8")) % num_slots


# -- configuration and report ----------------------------------------------

@dataclass(frozen=True)
class ShardSpec:
    leader: str
    replicas: Tuple[str, ...]

    def nodes(self) -> Tuple[str, ...]:
        return (self.leader,) + tuple(self.replicas)


@dataclass(frozen=True)
class ClusterConfig:
    shards: Tuple[ShardSpec, ...]
    num_slots: int = 16384
    replication_mode: str = "async"  # async | sync
    consistency_mode: str = AP       # AP | CP
    failover_timeout: float = 5.0
    replication_delay: float = 1.0
    rng_seed: int = 0

    def __post_init__(self) -> None:
        if not self.shards:
            raise ValueError("at least one shard is required")
        for shard in self.shards:
            if not shard.replicas:
                raise ValueError("each shard needs >= 1 replica for failover")
        if self.replication_mode not in ("async", "sync"):
            raise ValueError("replication_mode must be async or sync")
        if self.consistency_mode not in (AP, CP):
            raise ValueError("consistency_mode must be AP or CP")


@dataclass
class DriftReport:
    acknowledged_writes: int = 0
    surviving_writes: int = 0
    lost_writes: int = 0
    over_admitted_requests: int = 0
    rejected_during_partition: int = 0

    def as_dict(self) -> dict:
        return {
            "acknowledged_writes": self.acknowledged_writes,
            "surviving_writes": self.surviving_writes,
            "lost_writes": self.lost_writes,
            "over_admitted_requests": self.over_admitted_requests,
            "rejected_during_partition": self.rejected_during_partition,
        }


@dataclass(frozen=True)
class SimEvent:
    time: float
    seq: int
    kind: str
    payload: tuple


class SimNode:
    def __init__(self, node_id: str, role: str, clock: ManualClock) -> None:
        self.node_id = node_id
        self.role = role  # leader | replica
        self.engine = new_engine(clock=clock)
        # pending (replica_id, write_id, mutations, ready_time) not delivered
        self.replication_queue: List[Tuple[str, int, tuple, float]] = []
        self.backlog = 0  # writes acked but not yet fully replicated
        self.alive = True
        self.partition_group = 0


class ClusterSim:
    """Single-threaded deterministic event loop over a set of SimNodes."""

    def __init__(self, config: ClusterConfig) -> None:
        self.config = config
        self.clock = ManualClock()
        self.nodes: Dict[str, SimNode] = {}
        self.shards: List[ShardSpec] = list(config.shards)
        for shard in self.shards:
            self.nodes[shard.leader] = SimNode(shard.leader, "leader", self.clock)
            for replica in shard.replicas:
                self.nodes[replica] = SimNode(replica, "replica", self.clock)
        self._queue: List[Tuple[float, int, str, tuple]] = []
        self._seq = itertools.count()
        self.log: List[SimEvent] = []
        self.report = DriftReport()
        self._acked: Dict[int, Tuple[str, str, str]] = {}  # write_id -> key, member, shard leader at ack
        self._dropped_write_ids: set = set()
        self._next_write_id = itertools.count(1)
        self.admitted = 0
        self.checks_rejected = 0

    # -- routing -----------------------------------------------------------

    def shard_for_key(self, key: str) -> ShardSpec:
        slot = slot_for_key(key, self.config.num_slots)
        return self.shards[slot % len(self.shards)]

    def _group_size(self, shard: ShardSpec, group: int) -> int:
        return sum(
            1
            for nid in shard.nodes()
            if self.nodes[nid].alive and self.nodes[nid].partition_group == group
        )

    def _visible_leader(self, shard: ShardSpec, client_group: int) -> Optional[SimNode]:
        candidates = [
            self.nodes[nid]
            for nid in shard.nodes()
            if self.nodes[nid].alive
            and self.nodes[nid].role == "leader"
            and self.nodes[nid].partition_group == client_group
        ]
        return candidates[0] if candidates else None

    def route(self, key: str, client_group: int = 0) -> str:
        """Node id serving this key as seen from the client's partition side."""
        shard = self.shard_for_key(key)
        leader = self._visible_leader(shard, client_group)
        if leader is None:
            raise UnreachableError(key)
        if self.config.consistency_mode == CP:
            total = len(shard.nodes())
            if self._group_size(shard, leader.partition_group) * 2 <= total:
                raise UnreachableError(f"{key}: leader lacks quorum (CP)")
        return leader.node_id

    # -- scheduling --------------------------------------------------------

    def schedule(self, time: float, kind: str, *payload) -> None:
        heapq.heappush(self._queue, (time, next(self._seq), kind, tuple(payload)))

    def run(self) -> None:
        while self._queue:
            time, seq, kind, payload = heapq.heappop(self._queue)
            if time > self.clock.now():
                self.clock.set(time)
            self.log.append(SimEvent(time, seq, kind, payload))
            getattr(self, f"_on_{kind}")(*payload)

    # -- event handlers ----------------------------------------------------

    def _on_client_write(self, key: str, member: str, score: float, client_group: int) -> None:
        shard = self.shard_for_key(key)
        try:
            leader_id = self.route(key, client_group)
        except UnreachableError:
            self.report.rejected_during_partition += 1
            return
        leader = self.nodes[leader_id]
        with leader.engine.capture_mutations() as muts:
            leader.engine.zadd(key, score, member)
        write_id = next(self._next_write_id)
        self._acked[write_id] = (key, member, leader_id)
        self.report.acknowledged_writes += 1
        self._replicate_from(leader, shard, write_id, tuple(muts))

    def _on_check(self, key: str, params_key: tuple, now: float, client_group: int) -> None:
        params = RuleParams(
            window_size=params_key[0],
            max_requests=params_key[1],
            min_interval=params_key[2],
            ttl=params_key[3],
        )
        shard = self.shard_for_key(key)
        try:
            leader_id = self.route(key, client_group)
        except UnreachableError:
            self.report.rejected_during_partition += 1
            self.checks_rejected += 1
            return
        leader = self.nodes[leader_id]
        digest = leader.engine.load_script(ROLLING_WINDOW_SCRIPT)
        args = [
            repr(float(params.window_size)),
            str(params.max_requests),
            repr(float(params.min_interval)),
            repr(float(params.ttl)),
            repr(float(now)),
            "0",
        ]
        with leader.engine.capture_mutations() as muts:
            allowed, _, _ = leader.engine.eval_by_hash(digest, [key], args)
        if allowed:
            self.admitted += 1
            write_id = next(self._next_write_id)
            self._acked[write_id] = (key, "<check>", leader_id)
            self.report.acknowledged_writes += 1
            self._replicate_from(leader, shard, write_id, tuple(muts))

    def _replicate_from(
        self, leader: SimNode, shard: ShardSpec, write_id: int, mutations: tuple
    ) -> None:
        if self.config.replication_mode == "sync":
            # sync: applied on every replica before the ack returns
            for replica_id in shard.nodes():
                if replica_id == leader.node_id:
                    continue
                for mutation in mutations:
                    self.nodes[replica_id].engine.apply_mutation(mutation)
            return
        # async: one write's worth of queue drains per replication_delay, so
        # a burst of writes drains one write at a time behind the ack
        leader.backlog += 1
        ready = self.clock.now() + self.config.replication_delay * leader.backlog
        for replica_id in shard.nodes():
            if replica_id == leader.node_id:
                continue
            leader.replication_queue.append((replica_id, write_id, mutations, ready))
        self.schedule(ready, "replicate", leader.node_id)

    def _on_replicate(self, leader_id: str, force: bool = False) -> None:
        """Deliver queued writes whose ready time has come to every replica
        reachable from the leader's partition side."""
        leader = self.nodes[leader_id]
        if not leader.alive:
            return
        now = self.clock.now()
        remaining: List[Tuple[str, int, tuple, float]] = []
        pending_ids = {entry[1] for entry in leader.replication_queue}
        for replica_id, write_id, mutations, ready in leader.replication_queue:
            replica = self.nodes[replica_id]
            deliverable = (
                (force or ready <= now)
                and replica.alive
                and replica.partition_group == leader.partition_group
            )
            if deliverable:
                for mutation in mutations:
                    replica.engine.apply_mutation(mutation)
            else:
                remaining.append((replica_id, write_id, mutations, ready))
        leader.replication_queue = remaining
        delivered_ids = pending_ids - {entry[1] for entry in remaining}
        leader.backlog = max(0, leader.backlog - len(delivered_ids))

    def _on_crash(self, node_id: str) -> None:
        node = self.nodes[node_id]
        node.alive = False
        # the un-replicated suffix dies with the node
        self._dropped_write_ids.update(e[1] for e in node.replication_queue)
        node.replication_queue = []
        if node.role == "leader":
            shard = next(s for s in self.shards if node_id in s.nodes())
            self.schedule(
                self.clock.now() + self.config.failover_timeout,
                "promote",
                shard.leader,
            )

    def _on_partition(self, assignment: tuple) -> None:
        """assignment: ((node_id, group), ...); leaders cut off from a
        majority get challenged after failover_timeout."""
        for node_id, group in assignment:
            self.nodes[node_id].partition_group = group
        for shard in self.shards:
            leaders = [
                self.nodes[nid]
                for nid in shard.nodes()
                if self.nodes[nid].alive and self.nodes[nid].role == "leader"
            ]
            for leader in leaders:
                size = self._group_size(shard, leader.partition_group)
                if size * 2 <= len(shard.nodes()):
                    self.schedule(
                        self.clock.now() + self.config.failover_timeout,
                        "promote",
                        shard.leader,
                    )

    def _on_promote(self, original_leader_id: str) -> None:
        """Majority-side vote: promote the first alive replica in a partition
        group holding a strict majority of the shard's nodes."""
        shard = next(s for s in self.shards if original_leader_id in s.nodes())
        majority_leader = None
        for nid in shard.nodes():
            node = self.nodes[nid]
            if not node.alive:
                continue
            if (
                node.role == "leader"
                and self._group_size(shard, node.partition_group) * 2
                > len(shard.nodes())
            ):
                return  # a quorate leader already exists; nothing to do
        for nid in shard.replicas:
            node = self.nodes[nid]
            if node.alive and self._group_size(shard, node.partition_group) * 2 > len(
                shard.nodes()
            ):
                majority_leader = node
                break
        if majority_leader is None:
            return
        majority_leader.role = "leader"

    def _on_heal(self) -> None:
        """End all partitions; demote stale leaders and resync their state
        (divergent suffix discarded wholesale), then drain queues."""
        for node in self.nodes.values():
            node.partition_group = 0
        for shard in self.shards:
            leaders = [
                self.nodes[nid]
                for nid in shard.nodes()
                if self.nodes[nid].alive and self.nodes[nid].role == "leader"
            ]
            if len(leaders) > 1:
                # the most recently promoted (majority-side) leader wins:
                # that is any leader other than the original shard leader
                winner = next(
                    (n for n in leaders if n.node_id != shard.leader), leaders[0]
                )
                for loser in leaders:
                    if loser is winner:
                        continue
                    loser.role = "replica"
                    loser.replication_queue = []
                    loser.backlog = 0
                    self._resync(winner, loser)
            current = self._current_leader(shard)
            if current is not None:
                self._on_replicate(current.node_id, force=True)

    def _resync(self, source: SimNode, target: SimNode) -> None:
        target.engine = new_engine(clock=self.clock)
        for key, (entries, expire_at) in source.engine.snapshot().items():
            for member, score in entries:
                target.engine.zadd(key, score, member)
            if expire_at is not None:
                target.engine.expire_at(key, expire_at)

    def _current_leader(self, shard: ShardSpec) -> Optional[SimNode]:
        for nid in shard.nodes():
            node = self.nodes[nid]
            if node.alive and node.role == "leader":
                return node
        return None

    # -- accounting --------------------------------------------------------

    def finalize(self) -> DriftReport:
        """Count surviving acked writes against each shard's current leader."""
        surviving = 0
        for write_id, (key, member, _) in sorted(self._acked.items()):
            shard = self.shard_for_key(key)
            leader = self._current_leader(shard)
            if leader is None:
                continue
            if member == "<check>":
                # window entries age out by design, so presence on the leader
                # is the wrong test; lost means dropped with a dead node
                if write_id not in self._dropped_write_ids:
                    surviving += 1
            elif leader.engine.zscore(key, member) is not None:
                surviving += 1
        self.report.surviving_writes = surviving
        self.report.lost_writes = self.report.acknowledged_writes - surviving
        return self.report

    def quiescent_replicas_consistent(self) -> bool:
        for shard in self.shards:
            leader = self._current_leader(shard)
            if leader is None or leader.replication_queue:
                return False
            reference = leader.engine.snapshot()
            for nid in shard.nodes():
                node = self.nodes[nid]
                if node is leader or not node.alive:
                    continue
                if node.engine.snapshot() != reference:
                    return False
        return True


# -- canned scenarios -------------------------------------------------------

def default_config(**overrides) -> ClusterConfig:
    base = dict(
        shards=(ShardSpec(leader="n1", replicas=("n2", "n3")),),
        failover_timeout=5.0,
        replication_delay=1.0,
    )
    base.update(overrides)
    return ClusterConfig(**base)


def scenario_leader_crash(
    config: ClusterConfig, writes_acked: int, unreplicated: int
) -> Tuple[DriftReport, List[SimEvent]]:
    """Leader acks W writes, replicates W-R, crashes; replica promoted.

    With async replication the report shows lost_writes == R exactly; with
    sync replication every acked write already reached the replicas."""
    if unreplicated > writes_acked:
        raise ValueError("unreplicated suffix cannot exceed acked writes")
    sim = ClusterSim(config)
    key = "rate_limiter:{crash}"
    for i in range(writes_acked):
        sim.schedule(0.0, "client_write", key, f"w{i}", float(i), 0)
    # async: a burst of W writes drains one per replication_delay, so a crash
    # just after the (W-R)th delivery leaves exactly R writes unreplicated
    delay = config.replication_delay
    crash_at = delay * (writes_acked - unreplicated) + 0.5 * delay
    if config.replication_mode == "sync":
        crash_at = delay * writes_acked + 0.5 * delay
    sim.schedule(crash_at, "crash", "n1")
    sim.run()
    return sim.finalize(), sim.log


def scenario_split_brain(
    config: ClusterConfig,
    minority_writes: int,
    heal_after: float,
    pre_writes: int = 3,
    majority_writes: int = 2,
) -> Tuple[DriftReport, List[SimEvent]]:
    """Partition isolates the old leader with a client minority.

    AP: minority-side acked writes are discarded on heal (lost_writes equals
    the minority acked count). CP: the quorum-less leader refuses writes
    (lost_writes 0, rejected_during_partition counts the attempts). Healing
    before failover_timeout leaves the original leader in place, nothing is
    promoted and nothing is lost."""
    sim = ClusterSim(config)
    key = "rate_limiter:{split}"
    t = 0.0
    for i in range(pre_writes):
        sim.schedule(t, "client_write", key, f"pre{i}", float(i), 0)
    partition_at = config.replication_delay * pre_writes + 1.0
    sim.schedule(partition_at, "partition", (("n1", 1), ("n2", 0), ("n3", 0)))
    for i in range(minority_writes):
        sim.schedule(
            partition_at + 0.5 + i * 0.1, "client_write", key, f"min{i}", 100.0 + i, 1
        )
    promoted_at = partition_at + config.failover_timeout
    if heal_after > config.failover_timeout:
        for i in range(majority_writes):
            sim.schedule(
                promoted_at + 0.5 + i * 0.1,
                "client_write",
                key,
                f"maj{i}",
                200.0 + i,
                0,
            )
    sim.schedule(partition_at + heal_after, "heal")
    sim.run()
    return sim.finalize(), sim.log


def rate_limit_drift_experiment(
    config: ClusterConfig,
    trace: Sequence[Tuple[float, str]],
    params: RuleParams,
    fault_schedule: Sequence[Tuple[float, str, tuple]] = (),
) -> Tuple[DriftReport, List[SimEvent]]:
    """Run rolling-window checks through the cluster under faults and compare
    against a fault-free single-node oracle.

    over_admitted = cluster admissions - oracle admissions, floored at zero
    (CP refusals can only lower the cluster's count)."""
    sim = ClusterSim(config)
    params_key = (
        params.window_size,
        params.max_requests,
        params.min_interval,
        params.ttl,
    )
    for t, key in trace:
        sim.schedule(t, "check", key, params_key, float(t), 0)
    for t, kind, payload in fault_schedule:
        sim.schedule(t, kind, *payload)
    sim.run()
    report = sim.finalize()

    oracle_engine = new_engine(clock=ManualClock())
    digest = oracle_engine.load_script(ROLLING_WINDOW_SCRIPT)
    oracle_admitted = 0
    for t, key in sorted(trace):
        oracle_engine.clock.set(max(oracle_engine.clock.now(), float(t)))
        allowed, _, _ = oracle_engine.eval_by_hash(
            digest,
            [key],
            [
                repr(float(params.window_size)),
                str(params.max_requests),
                repr(float(params.min_interval)),
                repr(float(params.ttl)),
                repr(float(t)),
                "0",
            ],
        )
        if allowed:
            oracle_admitted += 1
    report.over_admitted_requests = max(0, sim.admitted - oracle_admitted)
    return report, sim.log


# -- scenario files ---------------------------------------------------------

def config_from_dict(raw: dict) -> ClusterConfig:
    shards = tuple(
        ShardSpec(leader=s["leader"], replicas=tuple(s["replicas"]))
        for s in raw.get("shards", [{"leader": "n1", "replicas": ["n2", "n3"]}])
    )
    return ClusterConfig(
        shards=shards,
        num_slots=int(raw.get("num_slots", 16384)),
        replication_mode=raw.get("replication_mode", "async"),
        consistency_mode=raw.get("consistency_mode", AP),
        failover_timeout=float(raw.get("failover_timeout", 5.0)),
        replication_delay=float(raw.get("replication_delay", 1.0)),
        rng_seed=int(raw.get("rng_seed", 0)),
    )


def run_scenario_dict(raw: dict, seed: Optional[int] = None) -> Tuple[str, DriftReport]:
    """Execute a parsed scenario document; returns (scenario name, report)."""
    config_raw = dict(raw.get("config", {}))
    if seed is not None:
        config_raw["rng_seed"] = seed
    config = config_from_dict(config_raw)
    kind = raw.get("scenario")
    if kind == "leader_crash":
        spec = raw.get("leader_crash", {})
        report, _ = scenario_leader_crash(
            config,
            int(spec.get("writes", 10)),
            int(spec.get("unreplicated", 3)),
        )
    elif kind == "split_brain":
        spec = raw.get("split_brain", {})
        report, _ = scenario_split_brain(
            config,
            int(spec.get("minority_writes", 7)),
            float(spec.get("heal_after", 20.0)),
            pre_writes=int(spec.get("pre_writes", 3)),
            majority_writes=int(spec.get("majority_writes", 2)),
        )
    elif kind == "drift":
        spec = raw.get("drift", {})
        import random as _random

        rng = _random.Random(config.rng_seed)
        checks = int(spec.get("checks", 100))
        window = float(spec.get("window", 10.0))
        params = RuleParams(
            window_size=window,
            max_requests=int(spec.get("max_requests", 5)),
            ttl=float(spec.get("ttl", 2 * window)),
        )
        key = spec.get("key", "rate_limiter:{drift-user}")
        trace = []
        t = 0.0
        for _ in range(checks):
            t += rng.uniform(0.2, 1.5)
            trace.append((t, key))
        faults = []
        crash_at = spec.get("crash_at")
        if crash_at is not None:
            faults.append((float(crash_at), "crash", ("n1",)))
        report, _ = rate_limit_drift_experiment(config, trace, params, faults)
    else:
        raise ValueError(f"unknown scenario kind {kind!r}")
    return str(kind), report
