"""Turbine archetype: leader-scheduled slots, erasure-coded shred dissemination
over datagrams through a two-layer tree, vote lockouts, supermajority rooting,
mempool-less transaction forwarding, and the restart trust gate.

Blocks are split into FEC sets of d data + c coding shreds; any d shreds of a
set reconstruct it. Shreds travel leader -> tree root -> validators as
datagrams (never retransmitted); validators missing shreds pull repairs over
a multiplexed stream. Validators vote on freshly reconstructed slots; votes
ride to the next leader and land on chain, and a slot roots once a
supermajority's landed votes reach it. Transactions commit 30 slots after
inclusion, so commit latency has a hard floor.

Recovery: a restarted validator rejoins only after observing a supermajority
rooted vote (a root advance) or completing verified catch-up, which needs
ceil(n/5) distinct up-to-date peers. With `wait_for_rooted_vote` off it
trusts a single repair peer and rejoins unconditionally.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

from chainsim.engine import MS, SEC
from chainsim.fabric import Transport
from chainsim.protocols.base import Protocol, RunEnv
from chainsim.workload import Outcome, Transaction

REPAIR_CONN = "repair"
FWD_CONN = "fwd"


def shred_block(size: int, d: int, c: int, max_payload: int,
                max_sets: int) -> tuple[int, int]:
    """(fec_sets, shred_payload) for a block of `size` bytes."""
    sets = min(max(1, math.ceil(size / (d * max_payload))), max_sets)
    payload = math.ceil(size / (sets * d))
    return sets, payload


def reconstruct(d: int, received: set) -> bool:
    """Threshold abstraction of Reed-Solomon: any d distinct shreds suffice."""
    return len(received) >= d


@dataclass
class TurbineParams:
    slot_ns: int = 400 * MS
    term_slots: int = 4
    data_shreds: int = 32
    coding_shreds: int = 32
    shred_payload_max: int = 1280
    max_fec_sets: int = 4
    block_tx_cap: int = 640
    commit_depth_slots: int = 30
    vote_freshness_slots: int = 8
    repair_delay_ns: int = 150 * MS
    repair_retry_ns: int = 1 * SEC
    forward_period_ns: int = 2 * SEC
    forward_tx_cap: int = 2000
    wait_for_rooted_vote: bool = True
    catchup_quorum_div: int = 5
    catchup_delay_ns: int = 3 * SEC
    catchup_check_ns: int = 2 * SEC
    lockout_base_slots: int = 2


class _Block:
    __slots__ = ("slot", "leader", "txs", "sets", "payload", "committed")

    def __init__(self, slot, leader, txs, sets, payload):
        self.slot = slot
        self.leader = leader
        self.txs = txs
        self.sets = sets
        self.payload = payload
        self.committed = False


class TurbineProtocol(Protocol):
    name = "turbine"
    leader_based = True
    fault_numerator = 3

    def __init__(self, env: RunEnv, params: Optional[dict] = None):
        super().__init__(env)
        self.p = TurbineParams(**(params or {}))
        n = self.n
        self.root_quorum = math.ceil(2 * n / 3)
        self.catchup_quorum = math.ceil(n / self.p.catchup_quorum_div)
        self.chain: dict[int, _Block] = {}
        self.produced: list[int] = []
        self._commit_idx = 0
        self.latest_landed = [-1] * n
        self.root_slot = -1
        self.staged_votes: list[dict[int, int]] = [{} for _ in range(n)]
        self.recv: dict[tuple[int, int], list[int]] = {}  # (node, slot) -> per-set count
        self.reconstructed: set[tuple[int, int]] = set()
        self.holder_pool: list[dict[int, Transaction]] = [{} for _ in range(n)]
        self.leader_queue: list[dict[int, Transaction]] = [{} for _ in range(n)]
        self.committed: set[int] = set()
        self.up_to_date = [True] * n
        self.root_at_restart = [-1] * n
        self.vote_trace: list[tuple[int, int, int]] = []  # (validator, slot, lockout_slots)
        self._consec_votes = [0] * n
        self.root_log: list[tuple[int, int, int]] = []
        self.leader_log: list[tuple[int, int]] = []
        self._repair_outstanding: set[tuple[int, int]] = set()
        self._slot = -1
        self._current_leader: Optional[int] = None

    # -- schedule -----------------------------------------------------------------

    def leader_for_term(self, term: int) -> int:
        return self.rng.stream("leader-sched", term).choice(range(self.n))

    def leader_for_slot(self, slot: int) -> int:
        return self.leader_for_term(slot // self.p.term_slots)

    # -- lifecycle ------------------------------------------------------------------

    def start(self) -> None:
        for i in range(self.n):
            self.sim.schedule(self.p.forward_period_ns, self._forward_tick, i,
                              target=i)
        self.sim.schedule(self.p.slot_ns, self._slot_tick, 0, target="slot")

    def on_submit(self, node: int, tx: Transaction) -> Outcome:
        self.holder_pool[node][tx.id] = tx
        return Outcome.ACCEPTED

    def on_crash(self, node: int) -> None:
        self.up_to_date[node] = False
        self.leader_queue[node] = {}
        self.holder_pool[node] = {}

    def on_recover(self, node: int) -> None:
        self.root_at_restart[node] = self.root_slot
        if not self.p.wait_for_rooted_vote:
            # trust a single repair peer and rejoin unconditionally
            self._catchup_traffic(node, 1)
            self.sim.schedule(self.p.catchup_delay_ns, self._rejoin, node,
                              target=node)
        else:
            self.sim.schedule(self.p.catchup_check_ns, self._catchup_check,
                              node, target=node)

    def _catchup_check(self, node: int) -> None:
        if not self.alive(node) or self.up_to_date[node]:
            return
        if self.root_slot > self.root_at_restart[node]:
            # a supermajority rooted vote is observable again
            self.sim.schedule(self.p.catchup_delay_ns, self._rejoin, node,
                              target=node)
            return
        donors = [u for u in range(self.n)
                  if u != node and self.alive(u) and self.up_to_date[u]]
        if len(donors) >= self.catchup_quorum:
            self._catchup_traffic(node, self.catchup_quorum)
            self.sim.schedule(self.p.catchup_delay_ns, self._rejoin, node,
                              target=node)
            return
        self.sim.schedule(self.p.catchup_check_ns, self._catchup_check, node,
                          target=node)

    def _catchup_traffic(self, node: int, peers: int) -> None:
        donors = [u for u in range(self.n) if u != node and self.alive(u)]
        for u in donors[:peers]:
            self.fabric.send(node, u, 200, Transport.MULTIPLEXED_STREAM,
                             conn=REPAIR_CONN)
            self.fabric.send(u, node, 10_000, Transport.MULTIPLEXED_STREAM,
                             conn=REPAIR_CONN)

    def _rejoin(self, node: int) -> None:
        if self.alive(node):
            self.up_to_date[node] = True

    # -- slots ---------------------------------------------------------------------------

    def _slot_tick(self, slot: int) -> None:
        self._slot = slot
        self.sim.schedule(self.p.slot_ns, self._slot_tick, slot + 1,
                          target="slot")
        leader = self.leader_for_slot(slot)
        if slot % self.p.term_slots == 0:
            if self._current_leader is not None:
                self.emit_leader(self._current_leader, False)
                self._current_leader = None
            if self.alive(leader):
                self._current_leader = leader
                self.emit_leader(leader, True)
        self.root_log.append((slot, self.root_slot,
                              sum(1 for s in self.latest_landed
                                  if s >= self.root_slot)))
        if not self.alive(leader):
            return
        if self.p.wait_for_rooted_vote and not self.up_to_date[leader]:
            return  # Hold: no supermajority rooted vote observed since restart
        self._produce(slot, leader)

    def _produce(self, slot: int, leader: int) -> None:
        txs = []
        queue = self.leader_queue[leader]
        for tx_id in list(queue):
            if len(txs) >= self.p.block_tx_cap:
                break
            tx = queue.pop(tx_id)
            if tx.id not in self.committed:
                txs.append(tx)
        votes = self.staged_votes[leader]
        for v, voted_slot in votes.items():
            if voted_slot > self.latest_landed[v]:
                self.latest_landed[v] = voted_slot
        self.staged_votes[leader] = {}
        self._advance_root()
        size = 200 + 250 * len(txs) + 50 * len(votes)
        sets, payload = shred_block(size, self.p.data_shreds,
                                    self.p.coding_shreds,
                                    self.p.shred_payload_max,
                                    self.p.max_fec_sets)
        block = _Block(slot, leader, txs, sets, payload)
        self.chain[slot] = block
        self.produced.append(slot)
        self.leader_log.append((slot, leader))
        self._mark_having(leader, slot, block)
        others = [v for v in range(self.n) if v != leader]
        tree_root = self.rng.stream("turbine", slot).choice(others)
        total_shreds = self.p.data_shreds + self.p.coding_shreds
        for set_i in range(sets):
            self.fabric.send_shred_batch(
                leader, tree_root, total_shreds, payload,
                lambda survivors, pl, tr=tree_root, s=slot, si=set_i:
                    self._root_receives(tr, s, si, survivors))
        deadline = self.sim.now + self.p.slot_ns + self.p.repair_delay_ns
        self.sim.schedule_at(deadline, self._repair_check, slot, target="repair")

    def _recv_state(self, node: int, slot: int) -> list[int]:
        key = (node, slot)
        state = self.recv.get(key)
        if state is None:
            state = self.recv[key] = [0] * self.chain[slot].sets
        return state

    def _root_receives(self, tree_root: int, slot: int, set_i: int,
                       survivors: int) -> None:
        if not self.alive(tree_root):
            return
        block = self.chain[slot]
        state = self._recv_state(tree_root, slot)
        state[set_i] = min(state[set_i] + survivors,
                           self.p.data_shreds + self.p.coding_shreds)
        self._try_reconstruct(tree_root, slot)
        for v in range(self.n):
            if v == block.leader or v == tree_root:
                continue
            self.fabric.send_shred_batch(
                tree_root, v, survivors, block.payload,
                lambda got, pl, v=v, s=slot, si=set_i:
                    self._shreds_received(v, s, si, got))

    def _shreds_received(self, node: int, slot: int, set_i: int,
                         survivors: int) -> None:
        if not self.alive(node):
            return
        state = self._recv_state(node, slot)
        state[set_i] = min(state[set_i] + survivors,
                           self.p.data_shreds + self.p.coding_shreds)
        self._try_reconstruct(node, slot)

    def _try_reconstruct(self, node: int, slot: int) -> None:
        if (node, slot) in self.reconstructed:
            return
        state = self._recv_state(node, slot)
        if all(count >= self.p.data_shreds for count in state):
            self._mark_having(node, slot, self.chain[slot])

    def _mark_having(self, node: int, slot: int, block: _Block) -> None:
        if (node, slot) in self.reconstructed:
            return
        self.reconstructed.add((node, slot))
        self._vote(node, slot)

    # -- repair ------------------------------------------------------------------------------

    def _repair_check(self, slot: int) -> None:
        block = self.chain.get(slot)
        if block is None:
            return
        for v in range(self.n):
            if v == block.leader or (v, slot) in self.reconstructed:
                continue
            if self.alive(v):
                self._request_repair(v, slot)

    def _request_repair(self, v: int, slot: int) -> None:
        if (v, slot) in self.reconstructed or not self.alive(v):
            return
        if self.sim.now > slot * self.p.slot_ns + 60 * SEC:
            return
        self.sim.schedule(self.p.repair_retry_ns, self._request_repair, v, slot,
                          target=v)
        if (v, slot) in self._repair_outstanding:
            return  # one repair exchange in flight per (validator, slot)
        block = self.chain[slot]
        source = block.leader if self.alive(block.leader) else None
        if source is None:
            haves = [u for u in range(self.n)
                     if u != v and self.alive(u) and (u, slot) in self.reconstructed]
            if not haves:
                return
            source = haves[0]
        self._repair_outstanding.add((v, slot))
        self.fabric.send(
            v, source, 100, Transport.MULTIPLEXED_STREAM, conn=REPAIR_CONN,
            on_deliver=lambda m, v=v, s=slot, src=source:
                self._serve_repair(src, v, s),
            on_fail=lambda m, v=v, s=slot:
                self._repair_outstanding.discard((v, s)))

    def _serve_repair(self, source: int, v: int, slot: int) -> None:
        if not self.alive(source) or (v, slot) in self.reconstructed:
            self._repair_outstanding.discard((v, slot))
            return
        block = self.chain[slot]
        state = self._recv_state(v, slot)
        missing = sum(max(0, self.p.data_shreds - got) for got in state)
        if missing == 0:
            self._repair_outstanding.discard((v, slot))
            return
        self.fabric.send(
            source, v, missing * block.payload, Transport.MULTIPLEXED_STREAM,
            conn=REPAIR_CONN,
            on_deliver=lambda m, v=v, s=slot: self._repair_arrived(v, s),
            on_fail=lambda m, v=v, s=slot:
                self._repair_outstanding.discard((v, s)))

    def _repair_arrived(self, v: int, slot: int) -> None:
        self._repair_outstanding.discard((v, slot))
        if not self.alive(v) or (v, slot) in self.reconstructed:
            return
        state = self._recv_state(v, slot)
        for i in range(len(state)):
            state[i] = self.p.data_shreds + self.p.coding_shreds
        self._mark_having(v, slot, self.chain[slot])

    # -- votes and rooting ----------------------------------------------------------------------

    def _vote(self, validator: int, slot: int) -> None:
        if not self.alive(validator):
            return
        if self.p.wait_for_rooted_vote and not self.up_to_date[validator]:
            return
        if slot < self._slot - self.p.vote_freshness_slots:
            return  # stale reconstruction; wait for a fresh slot
        self._consec_votes[validator] += 1
        # k-th consecutive same-fork vote: lockout doubles each time
        lockout = self.p.lockout_base_slots << min(
            self._consec_votes[validator] - 1, 24)
        self.vote_trace.append((validator, slot, lockout))
        next_leader = self.leader_for_slot(slot + 1)
        if next_leader == validator:
            staged = self.staged_votes[validator]
            if slot > staged.get(validator, -1):
                staged[validator] = slot
            return
        self.fabric.send(
            validator, next_leader, 150, Transport.DATAGRAM,
            on_deliver=lambda m, v=validator, s=slot, nl=next_leader:
                self._vote_arrived(nl, v, s))

    def _vote_arrived(self, leader: int, validator: int, slot: int) -> None:
        if not self.alive(leader):
            return
        staged = self.staged_votes[leader]
        if slot > staged.get(validator, -1):
            staged[validator] = slot

    def _advance_root(self) -> None:
        ranked = sorted(self.latest_landed, reverse=True)
        candidate = ranked[self.root_quorum - 1]
        if candidate > self.root_slot:
            self.root_slot = candidate
        self._commit_pass()

    def _commit_pass(self) -> None:
        now = self.sim.now
        while self._commit_idx < len(self.produced):
            slot = self.produced[self._commit_idx]
            if self.root_slot < slot + self.p.commit_depth_slots:
                break
            block = self.chain[slot]
            block.committed = True
            for tx in block.txs:
                if tx.id not in self.committed:
                    self.committed.add(tx.id)
                    self.metrics.record_commit(tx.id, now, slot)
            self._commit_idx += 1

    # -- transaction forwarding -------------------------------------------------------------------

    def _forward_tick(self, i: int) -> None:
        self.sim.schedule(self.p.forward_period_ns, self._forward_tick, i,
                          target=i)
        if not self.alive(i):
            return
        pool = self.holder_pool[i]
        for tx_id in [t for t in pool if t in self.committed]:
            pool.pop(tx_id)
        if not pool:
            return
        txs = list(pool.values())[:self.p.forward_tx_cap]
        term = self._slot // self.p.term_slots
        leaders = []
        for t in (term + 1, term + 2):
            leader = self.leader_for_term(t)
            if leader != i and leader not in leaders:
                leaders.append(leader)
        size = 100 + 250 * len(txs)
        for leader in leaders:
            self.fabric.send(
                i, leader, size, Transport.MULTIPLEXED_STREAM, conn=FWD_CONN,
                on_deliver=lambda m, ld=leader, batch=txs:
                    self._forward_in(ld, batch))
        if i in leaders or self.leader_for_term(term) == i:
            self._forward_in(i, txs)

    def _forward_in(self, leader: int, txs) -> None:
        if not self.alive(leader):
            return
        queue = self.leader_queue[leader]
        for tx in txs:
            if tx.id not in self.committed:
                queue[tx.id] = tx

    # -- reporting ----------------------------------------------------------------------------------

    def summary_extra(self) -> dict:
        return {
            "root_slot": self.root_slot,
            "produced_blocks": len(self.produced),
            "up_to_date_count": sum(self.up_to_date),
        }

    def extra_artifacts(self) -> dict[str, list]:
        rows = [["slot", "root_slot", "votes_observed"]]
        rows += [list(r) for r in self.root_log]
        leaders = [["slot", "leader"]]
        leaders += [list(r) for r in self.leader_log]
        return {"root_log.csv": rows, "leader_log.csv": leaders}

    def audit(self) -> None:
        last = -1
        for slot, root, _ in self.root_log:
            if root < last:
                raise AssertionError("root slot decreased")
            last = root
