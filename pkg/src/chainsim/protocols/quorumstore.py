"""Quorum-store archetype: batch broadcast, CPU-priced signature collection,
reputation-elected leader rounds.

The node that receives a transaction is the only one that batches it and
drives its proof: it pays per-transaction intake CPU, broadcasts the batch,
and serially verifies the floor(2n/3)+1 returned signatures on its own CPU
budget, which is what saturates a single targeted receiver. Consensus commits
ready proofs under per-round block limits (proof count and transaction
count), so spreading the load across many receivers multiplies batch count
until the proof limit drops transactions. Batches persist across a crash (a
durable store); the intake pool does not.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from typing import Optional

from chainsim.engine import MS, SEC
from chainsim.fabric import Transport
from chainsim.protocols.base import Protocol, RunEnv
from chainsim.workload import Outcome, Transaction

CONN = "qs"


@dataclass
class QuorumStoreParams:
    batch_interval_ns: int = 250 * MS
    max_batch_size: int = 500
    sig_sign_cpu_ns: int = 1 * MS
    sig_verify_cpu_ns: int = 2 * MS
    intake_cpu_ns: int = 7 * MS
    pool_cap: int = 20_000
    round_period_ns: int = 1500 * MS
    round_timeout_ns: int = 1400 * MS
    max_proofs_per_block: int = 60
    max_txs_per_block: int = 450
    backpressure_threshold: int = 100
    proof_retry_ns: int = 30 * SEC
    rep_fail_rate_num: int = 1      # penalized when failed/proposals >= 1/10
    rep_fail_rate_den: int = 10
    rep_base_weight: int = 1000
    rep_penalty_div: int = 1000


class _Batch:
    __slots__ = ("batch_id", "creator", "txs", "created_at", "sigs",
                 "ready_at", "committed")

    def __init__(self, batch_id, creator, txs, created_at):
        self.batch_id = batch_id
        self.creator = creator
        self.txs = txs
        self.created_at = created_at
        self.sigs = 1  # creator's own signature
        self.ready_at: Optional[int] = None
        self.committed = False


class QuorumStoreProtocol(Protocol):
    name = "quorumstore"
    leader_based = True
    fault_numerator = 3

    def __init__(self, env: RunEnv, params: Optional[dict] = None):
        super().__init__(env)
        self.p = QuorumStoreParams(**(params or {}))
        self.sig_threshold = (2 * self.n) // 3 + 1
        self.pool: list[deque] = [deque() for _ in range(self.n)]  # (tx, ready_at)
        self.pool_size = [0] * self.n
        self.batches: dict[int, _Batch] = {}
        self._next_batch = 0
        self.pending_batches = [0] * self.n  # uncommitted batches per creator
        self.proofs_ready: deque[int] = deque()
        self.rep_proposals = [0] * self.n
        self.rep_failed = [0] * self.n
        self._round = 0
        self.leader_log: list[tuple] = []  # (round, leader, outcome, failed_count)
        self.backpressure_events = 0

    # -- reputation ---------------------------------------------------------------

    def weight(self, node: int) -> int:
        proposals = max(self.rep_proposals[node], 1)
        if (self.rep_failed[node] * self.p.rep_fail_rate_den
                >= proposals * self.p.rep_fail_rate_num):
            return self.p.rep_base_weight // self.p.rep_penalty_div
        return self.p.rep_base_weight

    def elect_leader(self, round_no: int) -> int:
        weights = [self.weight(i) for i in range(self.n)]
        return self.rng.stream("qs-leader", round_no).weighted_index(weights)

    # -- lifecycle ------------------------------------------------------------------

    def start(self) -> None:
        for i in range(self.n):
            self.sim.schedule(self.p.batch_interval_ns, self._batch_tick, i,
                              target=i)
        self.sim.schedule(self.p.round_period_ns, self._round_tick, target="round")

    def on_crash(self, node: int) -> None:
        self.pool[node] = deque()
        self.pool_size[node] = 0

    def on_recover(self, node: int) -> None:
        self.pool[node] = deque()
        self.pool_size[node] = 0
        for batch in self.batches.values():
            if batch.creator == node and not batch.committed and batch.ready_at is None:
                self._broadcast_batch(batch)

    # -- intake + batching -------------------------------------------------------------

    def on_submit(self, node: int, tx: Transaction) -> Outcome:
        if self.pool_size[node] >= self.p.pool_cap:
            return Outcome.POOL_FULL
        ready_at = self.sim.cpu_execute(node, self.p.intake_cpu_ns)
        self.pool[node].append((tx, ready_at))
        self.pool_size[node] += 1
        return Outcome.ACCEPTED

    def _batch_tick(self, i: int) -> None:
        self.sim.schedule(self.p.batch_interval_ns, self._batch_tick, i, target=i)
        if not self.alive(i):
            return
        if self.pending_batches[i] > self.p.backpressure_threshold:
            self.backpressure_events += 1  # intake deferred by backpressure
            return
        now = self.sim.now
        txs = []
        pool = self.pool[i]
        while pool and len(txs) < self.p.max_batch_size and pool[0][1] <= now:
            txs.append(pool.popleft()[0])
        if not txs:
            return
        self.pool_size[i] -= len(txs)
        batch = _Batch(self._next_batch, i, txs, now)
        self._next_batch += 1
        self.batches[batch.batch_id] = batch
        self.pending_batches[i] += 1
        self._broadcast_batch(batch)
        self.sim.schedule(self.p.proof_retry_ns, self._proof_retry,
                          batch.batch_id, target=i)

    def _broadcast_batch(self, batch: _Batch) -> None:
        size = 100 + sum(tx.size for tx in batch.txs)
        for peer in range(self.n):
            if peer == batch.creator:
                continue
            self.fabric.send(
                batch.creator, peer, size, Transport.RELIABLE_STREAM, conn=CONN,
                on_deliver=lambda m, peer=peer, b=batch.batch_id:
                    self._batch_received(peer, b))

    def _proof_retry(self, batch_id: int) -> None:
        batch = self.batches.get(batch_id)
        if batch is None or batch.ready_at is not None or batch.committed:
            return
        if not self.alive(batch.creator):
            return
        self._broadcast_batch(batch)
        self.sim.schedule(self.p.proof_retry_ns, self._proof_retry, batch_id,
                          target=batch.creator)

    def _batch_received(self, peer: int, batch_id: int) -> None:
        if not self.alive(peer):
            return
        done = self.sim.cpu_execute(peer, self.p.sig_sign_cpu_ns)
        self.sim.schedule_at(done, self._send_signature, peer, batch_id,
                             target=peer)

    def _send_signature(self, peer: int, batch_id: int) -> None:
        batch = self.batches.get(batch_id)
        if batch is None or not self.alive(peer):
            return
        self.fabric.send(
            peer, batch.creator, 150, Transport.RELIABLE_STREAM, conn=CONN,
            on_deliver=lambda m, b=batch_id: self._signature_received(b))

    def _signature_received(self, batch_id: int) -> None:
        batch = self.batches.get(batch_id)
        if batch is None or batch.ready_at is not None:
            return
        creator = batch.creator
        if not self.alive(creator):
            return
        done = self.sim.cpu_execute(creator, self.p.sig_verify_cpu_ns)
        self.sim.schedule_at(done, self._signature_verified, batch_id,
                             target=creator)

    def _signature_verified(self, batch_id: int) -> None:
        batch = self.batches.get(batch_id)
        if batch is None or batch.ready_at is not None:
            return
        batch.sigs += 1
        if batch.sigs >= self.sig_threshold:
            batch.ready_at = self.sim.now
            self.proofs_ready.append(batch_id)

    # -- consensus rounds ------------------------------------------------------------------

    def _round_tick(self) -> None:
        self._round += 1
        r = self._round
        self.sim.schedule(self.p.round_period_ns, self._round_tick, target="round")
        leader = self.elect_leader(r)
        self.rep_proposals[leader] += 1
        round_state = {"r": r, "leader": leader, "votes": 0, "done": False,
                       "block": []}
        self.sim.schedule(self.p.round_timeout_ns, self._round_timeout,
                          round_state, target=leader)
        if not self.alive(leader):
            return
        self.emit_leader(leader, True)
        self.sim.schedule(self.p.round_period_ns - 1, self._leader_ceased,
                          leader, target=leader)
        block, ntx = [], 0
        for batch_id in self.proofs_ready:
            batch = self.batches[batch_id]
            if batch.committed:
                continue
            if len(block) >= self.p.max_proofs_per_block:
                break
            if ntx + len(batch.txs) > self.p.max_txs_per_block and block:
                break
            block.append(batch_id)
            ntx += len(batch.txs)
        round_state["block"] = block
        size = 100 + 64 * max(len(block), 1)
        for peer in range(self.n):
            if peer == leader:
                continue
            self.fabric.send(
                leader, peer, size, Transport.RELIABLE_STREAM, conn=CONN,
                on_deliver=lambda m, peer=peer, rs=round_state:
                    self._proposal_received(peer, rs))

    def _leader_ceased(self, leader: int) -> None:
        self.emit_leader(leader, False)

    def _proposal_received(self, peer: int, round_state: dict) -> None:
        if not self.alive(peer) or round_state["done"]:
            return
        self.fabric.send(
            peer, round_state["leader"], 200, Transport.RELIABLE_STREAM,
            conn=CONN,
            on_deliver=lambda m, rs=round_state: self._vote_received(rs))

    def _vote_received(self, round_state: dict) -> None:
        if round_state["done"] or not self.alive(round_state["leader"]):
            return
        round_state["votes"] += 1
        if round_state["votes"] + 1 >= self.sig_threshold:
            round_state["done"] = True
            self._commit_round(round_state)

    def _commit_round(self, round_state: dict) -> None:
        r, leader = round_state["r"], round_state["leader"]
        now = self.sim.now
        ntx = 0
        for batch_id in round_state["block"]:
            batch = self.batches[batch_id]
            if batch.committed:
                continue
            batch.committed = True
            self.pending_batches[batch.creator] -= 1
            for tx in batch.txs:
                self.metrics.record_commit(tx.id, now, r)
                ntx += 1
        self.leader_log.append((r, leader, "committed", self.rep_failed[leader]))
        self.proofs_ready = deque(
            b for b in self.proofs_ready if not self.batches[b].committed)
        notice = 100 + 8 * max(ntx, 1)
        for peer in range(self.n):
            if peer != leader:
                self.fabric.send(leader, peer, notice,
                                 Transport.RELIABLE_STREAM, conn=CONN)

    def _round_timeout(self, round_state: dict) -> None:
        if round_state["done"]:
            return
        round_state["done"] = True
        leader = round_state["leader"]
        self.rep_failed[leader] += 1
        self.leader_log.append((round_state["r"], leader, "failed",
                                self.rep_failed[leader]))

    # -- reporting ------------------------------------------------------------------------

    def summary_extra(self) -> dict:
        reputation = {
            str(i): {"proposals": self.rep_proposals[i],
                     "failed": self.rep_failed[i],
                     "weight": self.weight(i)}
            for i in range(self.n)
            if self.rep_proposals[i] or self.rep_failed[i]
        }
        return {"reputation": reputation,
                "backpressure_events": self.backpressure_events}

    def extra_artifacts(self) -> dict[str, list]:
        rows = [["round", "leader", "outcome", "failed_count"]]
        rows += [list(entry) for entry in self.leader_log]
        return {"leader_log.csv": rows}

    def audit(self) -> None:
        for batch in self.batches.values():
            if batch.ready_at is not None and batch.sigs < self.sig_threshold:
                raise AssertionError(
                    f"proof ready with {batch.sigs} < {self.sig_threshold} sigs")
