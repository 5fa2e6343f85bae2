"""Leaderless superblock consensus with per-peer rate limiting.

Each round every governor broadcasts its pending transactions as a proposal;
the round decides once proposals from at least n-f distinct governors have
arrived at n-f nodes, committing the deduplicated union of every proposal
that reached that quorum. No coordinator exists, so isolating any single node
only removes that node's proposals. Undecided rounds re-send proposals to
peers that have not received them yet and otherwise wait, which is why a
packet-loss wall stalls commits without losing transactions.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

from chainsim.engine import MS, SEC
from chainsim.fabric import Transport
from chainsim.protocols.base import Protocol, RunEnv
from chainsim.workload import Outcome, Transaction

CONN = "rb"


@dataclass
class LeaderlessParams:
    round_period_ns: int = 1500 * MS
    retry_interval_ns: int = 10 * SEC
    decision_grace_ns: int = 200 * MS  # binary-consensus exchange after quorum
    proposal_cap: int = 4000
    rate_limit_per_s: int = 400
    rate_burst: int = 800


class _TokenBucket:
    __slots__ = ("tokens_scaled", "last_ns", "rate", "burst")

    def __init__(self, rate: int, burst: int):
        self.rate = rate
        self.burst = burst
        self.tokens_scaled = burst * SEC
        self.last_ns = 0

    def allow(self, now: int) -> bool:
        self.tokens_scaled = min(self.burst * SEC,
                                 self.tokens_scaled + (now - self.last_ns) * self.rate)
        self.last_ns = now
        if self.tokens_scaled >= SEC:
            self.tokens_scaled -= SEC
            return True
        return False


class LeaderlessProtocol(Protocol):
    name = "leaderless"
    leader_based = False
    fault_numerator = 3

    def __init__(self, env: RunEnv, params: Optional[dict] = None):
        super().__init__(env)
        self.p = LeaderlessParams(**(params or {}))
        self.f = (self.n - 1) // 3
        self.quorum = self.n - self.f
        self.queue: list[list[Transaction]] = [[] for _ in range(self.n)]
        self.buckets = [_TokenBucket(self.p.rate_limit_per_s, self.p.rate_burst)
                        for _ in range(self.n)]
        self.committed: set[int] = set()
        self._round = 0
        self._round_state: Optional[dict] = None
        self.superblock_log: list[tuple[int, int]] = []  # (round, tx_count)

    def start(self) -> None:
        self.sim.schedule(self.p.round_period_ns, self._round_start,
                          target="round")

    def on_crash(self, node: int) -> None:
        self.queue[node] = []
        state = self._round_state
        if state is not None and not state["decided"]:
            state["complete"].discard(node)
            for holders in state["arrived"].values():
                holders.discard(node)

    def on_recover(self, node: int) -> None:
        self.queue[node] = []

    def on_submit(self, node: int, tx: Transaction) -> Outcome:
        if not self.buckets[node].allow(self.sim.now):
            return Outcome.RATE_LIMITED
        self.queue[node].append(tx)
        return Outcome.ACCEPTED

    # -- rounds -----------------------------------------------------------------

    def _round_start(self) -> None:
        self._round += 1
        state = {
            "r": self._round,
            "start": self.sim.now,
            "proposals": {},        # proposer -> list of txs
            "arrived": {},          # proposer -> set of nodes holding it
            "complete": set(),      # nodes with >= quorum distinct proposals
            "deciding": False,
            "decided": False,
        }
        self._round_state = state
        for i in range(self.n):
            if not self.alive(i):
                continue
            proposal = self.queue[i][:self.p.proposal_cap]
            state["proposals"][i] = proposal
            state["arrived"][i] = {i}
            self._check_node_complete(state, i)
            self._send_proposal(state, i,
                                [j for j in range(self.n) if j != i])
        self.sim.schedule(self.p.retry_interval_ns, self._round_retry, state,
                          target="round")

    def _send_proposal(self, state: dict, proposer: int, peers) -> None:
        proposal = state["proposals"][proposer]
        size = 100 + sum(tx.size for tx in proposal)
        for j in peers:
            self.fabric.send(
                proposer, j, size, Transport.RELIABLE_STREAM, conn=CONN,
                on_deliver=lambda m, st=state, p=proposer, j=j:
                    self._proposal_arrived(st, p, j))

    def _proposal_arrived(self, state: dict, proposer: int, node: int) -> None:
        if state["decided"] or not self.alive(node):
            return
        state["arrived"][proposer].add(node)
        self._check_node_complete(state, node)

    def _check_node_complete(self, state: dict, node: int) -> None:
        if node in state["complete"]:
            return
        holding = sum(1 for holders in state["arrived"].values() if node in holders)
        if holding >= self.quorum:
            state["complete"].add(node)
            if len(state["complete"]) >= self.quorum and not state["deciding"]:
                # quorum gathered; the binary-consensus exchange that fixes the
                # superblock contents takes one more grace period
                state["deciding"] = True
                self.sim.schedule(self.p.decision_grace_ns, self._decide, state,
                                  target="round")

    def _round_retry(self, state: dict) -> None:
        """Re-send proposals to peers that still miss them (undecided round)."""
        if state["decided"]:
            return
        for i in range(self.n):
            # governors that recovered mid-round join it with their own proposal
            if self.alive(i) and i not in state["proposals"]:
                state["proposals"][i] = self.queue[i][:self.p.proposal_cap]
                state["arrived"][i] = {i}
                self._check_node_complete(state, i)
        if state["decided"]:
            return
        for proposer in list(state["arrived"]):
            if not self.alive(proposer):
                continue
            holders = state["arrived"][proposer]
            missing = [j for j in range(self.n)
                       if j != proposer and j not in holders]
            if missing:
                self._send_proposal(state, proposer, missing)
        self.sim.schedule(self.p.retry_interval_ns, self._round_retry, state,
                          target="round")

    def _decide(self, state: dict) -> None:
        if state["decided"]:
            return
        state["decided"] = True
        now = self.sim.now
        union: dict[int, Transaction] = {}
        for proposer, txs in state["proposals"].items():
            if len(state["arrived"][proposer]) >= self.quorum:
                for tx in txs:
                    union[tx.id] = tx
        fresh = [tx for tx in union.values() if tx.id not in self.committed]
        for tx in fresh:
            self.committed.add(tx.id)
            self.metrics.record_commit(tx.id, now, state["r"])
        self.superblock_log.append((state["r"], len(fresh)))
        committed_here = {tx.id for tx in fresh}
        for i in range(self.n):
            self.queue[i] = [tx for tx in self.queue[i]
                             if tx.id not in committed_here]
        next_start = max(now + 10 * MS, state["start"] + self.p.round_period_ns)
        self.sim.schedule_at(next_start, self._round_start, target="round")

    def summary_extra(self) -> dict:
        return {"rounds_decided": len(self.superblock_log)}
