"""Gossip-archetype protocol: flood dissemination with a bounded broadcast
queue, committee rounds, Bloom-filter tx sync and a post-stall resume lag.

Transactions spread through per-flush bundles forwarded at most once per
(node, peer). All traffic between a pair of nodes shares one reliable-stream
connection, so a stalled link blocks everything behind it and the shared
outbound queue can fill ("broadcast queue full"). Committee rounds committing
an empty proposer mempool count as successful exchanges but are reported
Skipped, not Committed. A node that lost consensus visibility for several
rounds resynchronizes for `resume_lag` once visibility returns before it
gossips or proposes transactions again.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from typing import Optional

from chainsim.engine import MS, SEC
from chainsim.fabric import Transport
from chainsim.protocols.base import Protocol, RunEnv
from chainsim.rng import p_to_threshold
from chainsim.workload import Outcome, Transaction

CONN = "g"

ST_OK = 0
ST_STALLED = 1
ST_RESYNC = 2


@dataclass
class GossipParams:
    fanout: int = 8
    flush_interval_ns: int = 250 * MS
    queue_cap: int = 1000              # pending bundle jobs per node
    bundle_tx_cap: int = 4000
    round_period_ns: int = 3300 * MS
    round_timeout_ns: int = 3 * SEC
    committee_size: int = 10
    committee_quorum: int = 7          # >= 2/3 of the committee
    block_cap: int = 5000
    sync_period_ns: int = 10 * SEC
    sync_batch: int = 5000
    fp_rate: float = 0.005
    sticky_fp: bool = True
    resume_lag_ns: int = 99 * SEC
    stall_rounds: int = 3


class _Node:
    __slots__ = ("mempool", "seen", "stage", "queued", "total_queued",
                 "inflight", "queue_drops", "state", "resync_until",
                 "skipped", "rounds_since_notice")

    def __init__(self):
        self.mempool: dict[int, Transaction] = {}
        self.seen: set[int] = set()
        self.stage: list[Transaction] = []
        self.queued: dict[int, deque] = {}
        self.total_queued = 0
        self.inflight: dict[int, bool] = {}
        self.queue_drops = 0
        self.state = ST_OK
        self.resync_until = 0
        self.skipped: set[int] = set()
        self.rounds_since_notice = 0


class GossipProtocol(Protocol):
    name = "gossip"
    leader_based = False
    fault_numerator = 5

    def __init__(self, env: RunEnv, params: Optional[dict] = None):
        super().__init__(env)
        self.p = GossipParams(**(params or {}))
        self.nodes = [_Node() for _ in range(self.n)]
        self.committed: set[int] = set()
        self.peers = self._build_mesh()
        self._round = 0
        self._fp_threshold = p_to_threshold(self.p.fp_rate) if self.p.fp_rate > 0 else 0
        self._committed_rounds: list[int] = []

    def _build_mesh(self) -> list[list[int]]:
        """Random symmetric fanout-k neighbor sets."""
        stream = self.rng.stream("gossip-mesh")
        peers = [set() for _ in range(self.n)]
        for i in range(self.n):
            candidates = [j for j in range(self.n) if j != i and j not in peers[i]]
            stream.shuffle(candidates)
            for j in candidates:
                if len(peers[i]) >= self.p.fanout:
                    break
                if len(peers[j]) < self.p.fanout + 2:
                    peers[i].add(j)
                    peers[j].add(i)
        return [sorted(s) for s in peers]

    # -- lifecycle --------------------------------------------------------------

    def start(self) -> None:
        for i in range(self.n):
            self.sim.schedule(self.p.flush_interval_ns, self._flush_tick, i,
                              target=i)
            offset = (i + 1) * self.p.sync_period_ns // (self.n + 1)
            self.sim.schedule(self.p.sync_period_ns + offset, self._sync_tick,
                              i, target=i)
        self.sim.schedule(self.p.round_period_ns, self._round_tick, target="round")

    def on_crash(self, node: int) -> None:
        self.nodes[node] = _Node()

    def on_recover(self, node: int) -> None:
        self.nodes[node] = _Node()

    # -- submission and gossip ---------------------------------------------------

    def on_submit(self, node: int, tx: Transaction) -> Outcome:
        self._remember(node, tx)
        return Outcome.ACCEPTED

    def _remember(self, node: int, tx: Transaction) -> None:
        st = self.nodes[node]
        if tx.id in self.committed or tx.id in st.seen:
            return
        st.seen.add(tx.id)
        st.mempool[tx.id] = tx
        st.stage.append(tx)

    def _resync_done(self, st: _Node, now: int) -> bool:
        if st.state == ST_RESYNC and now >= st.resync_until:
            st.state = ST_OK
        return st.state != ST_RESYNC

    def _flush_tick(self, i: int) -> None:
        self.sim.schedule(self.p.flush_interval_ns, self._flush_tick, i, target=i)
        st = self.nodes[i]
        if not self.alive(i) or not st.stage:
            return
        if not self._resync_done(st, self.sim.now):
            return
        bundle = st.stage[:self.p.bundle_tx_cap]
        st.stage = st.stage[self.p.bundle_tx_cap:]
        for peer in self.peers[i]:
            if st.total_queued >= self.p.queue_cap:
                st.queue_drops += 1  # "broadcast queue full": txs stay local
                continue
            st.queued.setdefault(peer, deque()).append(bundle)
            st.total_queued += 1
            self._kick(i, peer)

    def _kick(self, i: int, peer: int) -> None:
        st = self.nodes[i]
        if st.inflight.get(peer) or not st.queued.get(peer):
            return
        if not self.alive(i):
            return
        bundle = st.queued[peer].popleft()
        st.total_queued -= 1
        st.inflight[peer] = True
        size = 80 + sum(tx.size for tx in bundle)
        self.fabric.send(
            i, peer, size, Transport.RELIABLE_STREAM, conn=CONN,
            on_deliver=lambda m, i=i, peer=peer, bundle=bundle:
                self._bundle_delivered(i, peer, bundle),
            on_fail=lambda m, i=i, peer=peer: self._bundle_failed(i, peer))

    def _bundle_delivered(self, src: int, peer: int, bundle) -> None:
        if self.alive(peer):
            for tx in bundle:
                self._remember(peer, tx)
        st = self.nodes[src]
        st.inflight[peer] = False
        self._kick(src, peer)

    def _bundle_failed(self, src: int, peer: int) -> None:
        st = self.nodes[src]
        st.inflight[peer] = False
        self._kick(src, peer)

    # -- committee rounds ---------------------------------------------------------

    def _round_tick(self) -> None:
        self._round += 1
        r = self._round
        self.sim.schedule(self.p.round_period_ns, self._round_tick, target="round")
        committee = self.rng.stream("committee", r).sample(range(self.n),
                                                           self.p.committee_size)
        proposer = committee[0]
        for i in range(self.n):
            if self.alive(i):
                st = self.nodes[i]
                st.rounds_since_notice += 1
                if st.state == ST_OK and st.rounds_since_notice >= self.p.stall_rounds:
                    st.state = ST_STALLED
        if not self.alive(proposer):
            return
        st = self.nodes[proposer]
        self._resync_done(st, self.sim.now)
        if st.state == ST_OK:
            block = [tx_id for tx_id in st.mempool
                     if tx_id not in self.committed][:self.p.block_cap]
        else:
            block = []
        round_state = {"votes": 0, "done": False, "block": block, "r": r,
                       "proposer": proposer}
        deadline = self.sim.now + self.p.round_timeout_ns
        size = 80 + 64 * len(block)
        for member in committee[1:]:
            self.fabric.send(
                proposer, member, size, Transport.RELIABLE_STREAM, conn=CONN,
                on_deliver=lambda m, member=member, rs=round_state, dl=deadline:
                    self._proposal_received(member, rs, dl))

    def _proposal_received(self, member: int, round_state: dict,
                           deadline: int) -> None:
        if not self.alive(member) or self.sim.now > deadline:
            return
        self.fabric.send(
            member, round_state["proposer"], 200, Transport.RELIABLE_STREAM,
            conn=CONN,
            on_deliver=lambda m, rs=round_state, dl=deadline: self._vote(rs, dl))

    def _vote(self, round_state: dict, deadline: int) -> None:
        if round_state["done"] or self.sim.now > deadline:
            return
        if not self.alive(round_state["proposer"]):
            return
        round_state["votes"] += 1
        if round_state["votes"] + 1 >= self.p.committee_quorum:
            round_state["done"] = True
            self._commit(round_state)

    def _commit(self, round_state: dict) -> None:
        proposer, block, r = (round_state["proposer"], round_state["block"],
                              round_state["r"])
        now = self.sim.now
        fresh = [t for t in block if t not in self.committed]
        for tx_id in fresh:
            self.committed.add(tx_id)
            self.metrics.record_commit(tx_id, now, r)
        if fresh:
            self._committed_rounds.append(r)
        notice_size = 80 + 8 * len(fresh)
        for i in range(self.n):
            if i == proposer:
                self._notice(i, fresh, r)
                continue
            self.fabric.send(
                proposer, i, notice_size, Transport.RELIABLE_STREAM, conn=CONN,
                on_deliver=lambda m, i=i, fresh=fresh, r=r:
                    self._notice(i, fresh, r))

    def _notice(self, i: int, committed_ids, r: int) -> None:
        if not self.alive(i):
            return
        st = self.nodes[i]
        for tx_id in committed_ids:
            st.mempool.pop(tx_id, None)
        st.rounds_since_notice = 0
        if st.state == ST_STALLED:
            # consensus is visible again: catch up before gossiping/proposing
            st.state = ST_RESYNC
            st.resync_until = self.sim.now + self.p.resume_lag_ns

    # -- Bloom-filter tx sync ------------------------------------------------------

    def _sync_tick(self, i: int) -> None:
        self.sim.schedule(self.p.sync_period_ns, self._sync_tick, i, target=i)
        if not self.alive(i):
            return
        st = self.nodes[i]
        if st.state == ST_RESYNC and self.sim.now < st.resync_until:
            return
        peers_alive = [p for p in self.peers[i] if self.alive(p)]
        if not peers_alive:
            return
        peer = self.rng.stream("sync-pick", i, self._round).choice(peers_alive)
        self.fabric.send(
            i, peer, 1024, Transport.RELIABLE_STREAM, conn=CONN,
            on_deliver=lambda m, i=i, peer=peer: self._sync_serve(i, peer))

    def _sync_serve(self, requester: int, server: int) -> None:
        if not self.alive(server) or not self.alive(requester):
            return
        sst = self.nodes[server]
        if sst.state == ST_RESYNC and self.sim.now < sst.resync_until:
            return
        rst = self.nodes[requester]
        fp = self.rng.stream("bloom", requester, self.sim.now)
        picked = []
        for tx_id, tx in sst.mempool.items():
            if len(picked) >= self.p.sync_batch:
                break
            if tx_id in rst.seen or tx_id in self.committed or tx_id in rst.skipped:
                continue
            if self._fp_threshold and fp.bernoulli(self._fp_threshold):
                if self.p.sticky_fp:
                    rst.skipped.add(tx_id)
                continue
            picked.append(tx)
        if not picked:
            return
        size = 80 + sum(tx.size for tx in picked)
        self.fabric.send(
            server, requester, size, Transport.RELIABLE_STREAM, conn=CONN,
            on_deliver=lambda m, requester=requester, picked=picked:
                self._sync_receive(requester, picked))

    def _sync_receive(self, i: int, txs) -> None:
        if not self.alive(i):
            return
        for tx in txs:
            self._remember(i, tx)

    # -- checks / extras -------------------------------------------------------------

    def audit(self) -> None:
        for i, st in enumerate(self.nodes):
            if st.total_queued > self.p.queue_cap:
                raise AssertionError(f"gossip node {i} queue over capacity")

    def summary_extra(self) -> dict:
        return {"gossip_queue_drops": sum(st.queue_drops for st in self.nodes)}
