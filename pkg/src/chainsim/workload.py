"""Client transaction generator: constant-rate transfers with per-account nonces.

Submissions are evenly spaced (tx k fires at k/rate), accounts assigned
round-robin, and targets chosen by policy. A submission aimed at a crashed
node is retargeted to the next non-faulty node in policy order (falling back
to any alive node), matching a benchmark that only drives healthy endpoints.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from typing import Optional

from chainsim.engine import SEC


class Outcome(Enum):
    ACCEPTED = "accepted"
    POOL_FULL = "pool_full"
    UNDERPRICED = "underpriced"
    FEE_CAP_EXCEEDED = "fee_cap"
    RATE_LIMITED = "rate_limited"
    QUEUE_FULL = "queue_full"
    NO_TARGET = "no_target"


@dataclass(frozen=True)
class Transaction:
    id: int
    account: int
    nonce: int
    size: int
    fee_cap: int
    submit_time: int
    target: int


@dataclass(frozen=True)
class TargetPolicy:
    kind: str  # "single" | "fraction" | "uniform"
    node: int = 0
    fraction: float = 1.0

    def targets(self, n: int) -> list[int]:
        if self.kind == "single":
            return [self.node]
        if self.kind == "uniform":
            return list(range(n))
        if self.kind == "fraction":
            if not 0.0 < self.fraction <= 1.0:
                raise ValueError("fraction must be in (0, 1]")
            return list(range(math.ceil(self.fraction * n)))
        raise ValueError(f"unknown policy kind {self.kind!r}")


def plan(rate_tps: int, duration_s: int, policy: TargetPolicy, accounts: int,
         n: int, tx_size: int = 250, fee_cap: int = 10_000) -> list[Transaction]:
    if rate_tps <= 0 or duration_s <= 0 or accounts < 1:
        raise ValueError("rate, duration and accounts must be positive")
    targets = policy.targets(n)
    total = rate_tps * duration_s
    txs = []
    for k in range(total):
        txs.append(Transaction(
            id=k,
            account=k % accounts,
            nonce=k // accounts,
            size=tx_size,
            fee_cap=fee_cap,
            submit_time=k * SEC // rate_tps,
            target=targets[k % len(targets)],
        ))
    return txs


class Workload:
    """Schedules the submission plan and hands transactions to the protocol."""

    def __init__(self, sim, fabric, protocol, metrics, policy: TargetPolicy,
                 rate_tps: int, duration_s: int, accounts: int, n: int,
                 tx_size: int = 250, fee_cap: int = 10_000):
        self.sim = sim
        self.fabric = fabric
        self.protocol = protocol
        self.metrics = metrics
        self.policy = policy
        self.n = n
        self.plan = plan(rate_tps, duration_s, policy, accounts, n,
                         tx_size, fee_cap)
        self._targets = policy.targets(n)

    def target_nodes(self) -> list[int]:
        return list(self._targets)

    def start(self) -> None:
        for tx in self.plan:
            self.sim.schedule_at(tx.submit_time, self._submit, tx,
                                 target="workload")

    def _pick_target(self, assigned: int) -> Optional[int]:
        if self.fabric.alive(assigned):
            return assigned
        start = self._targets.index(assigned)
        order = self._targets[start:] + self._targets[:start]
        for node in order:
            if self.fabric.alive(node):
                return node
        for node in range(self.n):
            if self.fabric.alive(node):
                return node
        return None

    def _submit(self, tx: Transaction) -> None:
        node = self._pick_target(tx.target)
        if node is None:
            self.metrics.record_submit(tx, -1, Outcome.NO_TARGET)
            return
        outcome = self.protocol.on_submit(node, tx)
        self.metrics.record_submit(tx, node, outcome)
