"""Declarative attack layer: five attack kinds as schedules of fabric actions.

TransientFailure and Stopping crash a seed-chosen node set for the window
(preferring nodes the workload does not target) and recover them at the end.
PacketLoss walls a group off from the rest with a bidirectional loss rule.
TargetedLoad overrides the workload policy for the whole run. LeaderIsolation
subscribes to leader events and walls off whoever currently holds the leader
role; for the sampled-consensus model each detected proposer is impaired for
a fixed 5 s (its proposer window) instead of until it stops leading.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

from chainsim.engine import SEC
from chainsim.workload import TargetPolicy

ISOLATION_WINDOW_NS = 5 * SEC  # sampled-model impairment per detected proposer

KINDS = ("targeted_load", "transient_failure", "packet_loss", "stopping",
         "leader_isolation")


@dataclass
class AttackSpec:
    kind: str
    start_s: int = 133
    end_s: int = 266
    fraction: float = 0.1          # transient_failure / stopping
    rate: float = 0.5              # packet_loss
    group_size: int = 0            # packet_loss; 0 = floor(f)+1 for the protocol
    loss_rate: float = 0.75        # leader_isolation
    policy: Optional[TargetPolicy] = None  # targeted_load

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown attack kind {self.kind!r}")
        if self.kind != "targeted_load" and self.start_s >= self.end_s:
            raise ValueError("attack window start must precede end")

    @property
    def window_ns(self) -> tuple[int, int]:
        return self.start_s * SEC, self.end_s * SEC

    @property
    def window_s(self) -> tuple[int, int]:
        return self.start_s, self.end_s


class NotApplicable(Exception):
    """The attack cannot target this protocol (e.g. no leader to isolate)."""


class Injector:
    def __init__(self, spec: AttackSpec, sim, fabric, protocol, metrics,
                 workload_targets: list[int], rng):
        self.spec = spec
        self.sim = sim
        self.fabric = fabric
        self.protocol = protocol
        self.metrics = metrics
        self.targets = workload_targets
        self.rng = rng
        self.crashed_set: list[int] = []
        self._iso_rule: Optional[int] = None
        self._iso_until = 0

    # -- arming ------------------------------------------------------------------

    def arm(self) -> None:
        kind = self.spec.kind
        if kind == "targeted_load":
            return  # applied as a workload policy override by the runner
        start, end = self.spec.window_ns
        if kind in ("transient_failure", "stopping"):
            self.crashed_set = self._pick_nodes(round(self.spec.fraction
                                                      * self.fabric.n))
            self.sim.schedule_at(start, self._crash_group, target="attack")
            self.sim.schedule_at(end, self._recover_group, target="attack")
        elif kind == "packet_loss":
            group = self._loss_group()
            rest = [i for i in range(self.fabric.n) if i not in group]
            self.fabric.apply_loss_rule(group, rest, self.spec.rate, start, end,
                                        bidirectional=True)
            self.sim.schedule_at(start, self._trace, "loss_on",
                                 f"group={group} rate={self.spec.rate}",
                                 target="attack")
            self.sim.schedule_at(end, self._trace, "loss_off",
                                 f"group={group}", target="attack")
        elif kind == "leader_isolation":
            if not self.protocol.leader_based:
                raise NotApplicable(
                    f"{self.protocol.name} has no trackable leader")
            self.protocol.leader_listeners.append(self._on_leader_event)

    def _pick_nodes(self, count: int) -> list[int]:
        count = max(1, min(count, self.fabric.n))
        pool = [i for i in range(self.fabric.n) if i not in self.targets]
        stream = self.rng.stream("attack-select")
        stream.shuffle(pool)
        chosen = pool[:count]
        if len(chosen) < count:
            # not enough non-target nodes; the workload retargets survivors
            spill = [i for i in self.targets if i not in chosen]
            stream.shuffle(spill)
            chosen += spill[:count - len(chosen)]
        return sorted(chosen)

    def _loss_group(self) -> list[int]:
        size = self.spec.group_size
        if size <= 0:
            size = self.protocol.fault_tolerance(self.fabric.n) + 1
        group = [t for t in self.targets[:size]]
        for i in range(self.fabric.n):
            if len(group) >= size:
                break
            if i not in group:
                group.append(i)
        return sorted(group[:size])

    # -- crash window ---------------------------------------------------------------

    def _crash_group(self) -> None:
        for node in self.crashed_set:
            self.fabric.crash(node)
            self._trace("crash", str(node))

    def _recover_group(self) -> None:
        for node in self.crashed_set:
            self.fabric.recover(node)
            self._trace("recover", str(node))

    # -- leader isolation --------------------------------------------------------------

    def _on_leader_event(self, node: int, became: bool, at: int) -> None:
        start, end = self.spec.window_ns
        if not became:
            if (self.protocol.name != "sampled" and self._iso_rule is not None):
                self._drop_iso_rule()
            return
        if not (start <= at < end):
            return
        if self._iso_rule is not None:
            self._drop_iso_rule()
        others = [i for i in range(self.fabric.n) if i != node]
        if self.protocol.name == "sampled":
            until = min(at + ISOLATION_WINDOW_NS, end)
        else:
            until = end
        self._iso_rule = self.fabric.apply_loss_rule(
            [node], others, self.spec.loss_rate, at, until, bidirectional=True)
        self._iso_until = until
        self._trace("leader_on", f"node={node} loss={self.spec.loss_rate}")

    def _drop_iso_rule(self) -> None:
        self.fabric.remove_loss_rule(self._iso_rule)
        self._iso_rule = None
        self._trace("leader_off", "")

    def _trace(self, action: str, detail: str) -> None:
        self.metrics.record_attack(self.sim.now, action, detail)
