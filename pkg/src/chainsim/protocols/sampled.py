"""Sampled-consensus archetype: repeated peer sampling with throttling, a
pseudo-random proposer schedule with soft fallback, a bounded nonce-ordered
pool with an underpriced-rejection cascade, and optional base-fee escalation.

Block production waits on scheduled proposers (5 s window each, any validator
after the windows). Acceptance needs the proposer to win `beta` consecutive
sample rounds (alpha of k positive responses within the query timeout).
Failed rounds re-query immediately, waiting nodes poll peers for the missing
block, and transport-level retransmissions to unresponsive peers debit the
sender's own token ledger, so a burst of failed consensus traffic reads as
peer overload: suppression spreads and outlives the failure window.

The pool admits only the next nonce per account; a transaction lost to a full
pool leaves a gap that rejects every later nonce of that account.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

from chainsim.engine import MS, SEC
from chainsim.fabric import Transport
from chainsim.protocols.base import Protocol, RunEnv
from chainsim.workload import Outcome, Transaction

CONN = "av"


@dataclass
class SampledParams:
    k: int = 10
    alpha: int = 7
    beta: int = 8
    query_timeout_ns: int = 500 * MS
    requery_delay_ns: int = 250 * MS
    samplers_per_block: int = 5
    max_rounds_per_proposal: int = 30
    block_period_ns: int = 2 * SEC
    proposer_window_ns: int = 5 * SEC
    proposer_seq_len: int = 6
    fallback_retry_ns: int = 2 * SEC
    block_tx_cap: int = 714            # 15M block gas / 21k per transfer
    pool_cap: int = 6144
    gossip_fanout: int = 10
    gossip_flush_ns: int = 500 * MS
    fee_escalation: bool = False
    gas_per_tx: int = 21_000
    gas_target_per_10s: int = 15_000_000
    base_fee_init: int = 1000
    fee_num: int = 9
    fee_den: int = 8
    throttling: bool = True
    peer_capacity: int = 120
    peer_refill_per_s: int = 10
    node_capacity: int = 400
    node_refill_per_s: int = 70
    msg_cost: int = 1
    retry_cost: int = 2
    queue_bound: int = 50
    queue_delay_ns: int = 1 * SEC
    stall_grace_ns: int = 1 * SEC
    poll_interval_ns: int = 500 * MS
    poll_fanout: int = 3


class _Bucket:
    __slots__ = ("tokens_scaled", "last_ns", "capacity", "refill")

    def __init__(self, capacity: int, refill_per_s: int):
        self.capacity = capacity
        self.refill = refill_per_s
        self.tokens_scaled = capacity * SEC
        self.last_ns = 0

    def refresh(self, now: int) -> None:
        self.tokens_scaled = min(self.capacity * SEC,
                                 self.tokens_scaled + (now - self.last_ns) * self.refill)
        self.last_ns = now

    def depleted(self) -> bool:
        return self.tokens_scaled <= 0

    def debit(self, cost: int) -> None:
        self.tokens_scaled -= cost * SEC


class SampledProtocol(Protocol):
    name = "sampled"
    leader_based = True  # proposers are detectable while proposing
    fault_numerator = 5

    def __init__(self, env: RunEnv, params: Optional[dict] = None):
        super().__init__(env)
        self.p = SampledParams(**(params or {}))
        n = self.n
        # pool per node: executable (contiguous-nonce) txs plus a future queue
        self.pending: list[dict[int, Transaction]] = [{} for _ in range(n)]
        self.queued: list[dict[int, dict[int, Transaction]]] = [{} for _ in range(n)]
        self.queued_count = [0] * n
        self.pool_next: list[dict[int, int]] = [{} for _ in range(n)]
        self.stage: list[list[Transaction]] = [[] for _ in range(n)]
        self.watermark: dict[int, int] = {}  # account -> next nonce after commits
        self.committed: set[int] = set()
        self.base_fee = self.p.base_fee_init
        self._fee_usage: list[tuple[int, int]] = []
        self.halted_submissions = 0
        # throttle state
        self.peer_buckets: list[dict[int, _Bucket]] = [{} for _ in range(n)]
        self.node_buckets = [_Bucket(self.p.node_capacity, self.p.node_refill_per_s)
                             for _ in range(n)]
        self.queued: list[dict[int, int]] = [{} for _ in range(n)]
        self._suppressed_flags: dict[tuple[int, int], bool] = {}
        self.throttle_log: list[tuple] = []
        self.suppress_drops = 0
        # consensus state
        self.height = 0
        self.h_start = 0
        self.accepted_h = -1
        self.proposal: Optional[dict] = None  # current height's latest proposal
        self.has_block: set[int] = set()      # nodes holding the current proposal
        self._flush_no = 0
        self.fabric.retransmit_listeners.append(self._on_retransmit)

    # -- throttle -----------------------------------------------------------------

    def _bucket(self, node: int, peer: int) -> _Bucket:
        b = self.peer_buckets[node].get(peer)
        if b is None:
            b = self.peer_buckets[node][peer] = _Bucket(
                self.p.peer_capacity, self.p.peer_refill_per_s)
        return b

    def _log_suppressed(self, node: int, peer: int, suppressed: bool) -> None:
        if self._suppressed_flags.get((node, peer), False) != suppressed:
            self._suppressed_flags[(node, peer)] = suppressed
            self.throttle_log.append((self.sim.now, node, peer, suppressed))

    def _on_retransmit(self, src: int, dst: int) -> None:
        """Transport retries bill the sender's ledger for the unresponsive peer."""
        if not self.p.throttling:
            return
        now = self.sim.now
        pb = self._bucket(src, dst)
        pb.refresh(now)
        pb.debit(self.p.retry_cost)
        nb = self.node_buckets[src]
        nb.refresh(now)
        nb.debit(self.p.retry_cost)
        self._log_suppressed(src, dst, pb.depleted() or nb.depleted())

    def _inbound(self, node: int, peer: int, cost: int,
                 effect: Callable, queued_retry: bool = False) -> None:
        """Process | Suppress decision for a message from `peer` at `node`."""
        if not self.alive(node):
            return
        if not self.p.throttling:
            effect()
            return
        now = self.sim.now
        pb = self._bucket(node, peer)
        pb.refresh(now)
        nb = self.node_buckets[node]
        nb.refresh(now)
        suppressed = pb.depleted() or nb.depleted()
        self._log_suppressed(node, peer, suppressed)
        if suppressed:
            if queued_retry or self.queued[node].get(peer, 0) >= self.p.queue_bound:
                self.suppress_drops += 1
                return
            self.queued[node][peer] = self.queued[node].get(peer, 0) + 1
            self.sim.schedule(self.p.queue_delay_ns, self._dequeue, node, peer,
                              cost, effect, target=node)
            return
        pb.debit(cost)
        nb.debit(cost)
        effect()

    def _dequeue(self, node: int, peer: int, cost: int, effect: Callable) -> None:
        self.queued[node][peer] = max(0, self.queued[node].get(peer, 0) - 1)
        self._inbound(node, peer, cost, effect, queued_retry=True)

    # -- pool ---------------------------------------------------------------------

    def _pool_size(self, node: int) -> int:
        return len(self.pending[node]) + self.queued_count[node]

    def pool_admit(self, node: int, tx: Transaction,
                   from_client: bool) -> Optional[Outcome]:
        wm = self.watermark.get(tx.account, 0)
        if tx.nonce < wm or tx.id in self.committed:
            return None
        if self.p.fee_escalation and self.base_fee > tx.fee_cap:
            if from_client:
                self.halted_submissions += 1
            return Outcome.FEE_CAP_EXCEEDED
        next_needed = self.pool_next[node].get(tx.account, wm)
        if tx.nonce < next_needed:
            return None  # already pooled here
        if self._pool_size(node) >= self.p.pool_cap:
            # full pool: the eviction pricing rejects the newcomer; a dropped
            # nonce leaves a gap that rejects every later nonce of the account
            if tx.nonce > next_needed:
                return Outcome.UNDERPRICED
            return Outcome.POOL_FULL
        if tx.nonce > next_needed:
            # nonce gap with space: park it until the gap fills
            acct = self.queued[node].setdefault(tx.account, {})
            if tx.nonce not in acct:
                acct[tx.nonce] = tx
                self.queued_count[node] += 1
            return Outcome.ACCEPTED
        self.pending[node][tx.id] = tx
        self.pool_next[node][tx.account] = tx.nonce + 1
        self.stage[node].append(tx)
        self._promote(node, tx.account)
        return Outcome.ACCEPTED

    def _promote(self, node: int, account: int) -> None:
        acct = self.queued[node].get(account)
        if not acct:
            return
        next_needed = self.pool_next[node].get(account,
                                               self.watermark.get(account, 0))
        while next_needed in acct:
            tx = acct.pop(next_needed)
            self.queued_count[node] -= 1
            if tx.id not in self.committed:
                self.pending[node][tx.id] = tx
                self.stage[node].append(tx)
            next_needed += 1
        self.pool_next[node][account] = next_needed
        if not acct:
            del self.queued[node][account]

    def on_submit(self, node: int, tx: Transaction) -> Outcome:
        outcome = self.pool_admit(node, tx, from_client=True)
        return outcome if outcome is not None else Outcome.ACCEPTED

    # -- gossip ---------------------------------------------------------------------

    def _flush_tick(self, i: int) -> None:
        self.sim.schedule(self.p.gossip_flush_ns, self._flush_tick, i, target=i)
        self._flush_no += 1
        if not self.alive(i) or not self.stage[i]:
            return
        bundle = self.stage[i]
        self.stage[i] = []
        others = [j for j in range(self.n) if j != i]
        fanout = min(self.p.gossip_fanout, len(others))
        offset = (self._flush_no * fanout) % len(others)
        peers = (others[offset:] + others[:offset])[:fanout]
        size = 100 + sum(tx.size for tx in bundle)
        for j in peers:
            self.fabric.send(
                i, j, size, Transport.RELIABLE_STREAM, conn=CONN,
                on_deliver=lambda m, i=i, j=j, b=bundle:
                    self._inbound(j, i, self.p.msg_cost,
                                  lambda: self._gossip_in(j, b)))

    def _gossip_in(self, node: int, bundle) -> None:
        for tx in bundle:
            self.pool_admit(node, tx, from_client=False)

    # -- block production --------------------------------------------------------------

    def start(self) -> None:
        for i in range(self.n):
            self.sim.schedule(self.p.gossip_flush_ns, self._flush_tick, i,
                              target=i)
        self.sim.schedule(0, self._height_start, 0, target="consensus")

    def _height_start(self, h: int) -> None:
        self.height = h
        self.h_start = self.sim.now
        self.proposal = None
        self.has_block = set()
        seq = self.rng.stream("proposer-seq", h).sample(range(self.n),
                                                        self.p.proposer_seq_len)
        for i, proposer in enumerate(seq):
            self.sim.schedule(i * self.p.proposer_window_ns, self._window_open,
                              h, proposer, target="consensus")
        self.sim.schedule(self.p.proposer_seq_len * self.p.proposer_window_ns,
                          self._fallback, h, 0, target="consensus")
        self.sim.schedule(self.p.stall_grace_ns, self._poll_tick, h,
                          target="consensus")

    def _window_open(self, h: int, proposer: int) -> None:
        if self.accepted_h >= h:
            return
        if self.proposal is not None and self.proposal["accepting"]:
            return  # a live proposal is still being sampled
        self._attempt_propose(h, proposer)

    def _fallback(self, h: int, attempt: int) -> None:
        """After the scheduled windows, any active validator may propose."""
        if self.accepted_h >= h:
            return
        alive = [i for i in range(self.n) if self.alive(i)]
        if alive:
            proposer = self.rng.stream("fallback", h, attempt).choice(alive)
            self._attempt_propose(h, proposer)
        self.sim.schedule(self.p.fallback_retry_ns, self._fallback, h,
                          attempt + 1, target="consensus")

    def _attempt_propose(self, h: int, proposer: int) -> None:
        if not self.alive(proposer) or self.accepted_h >= h:
            return
        self.emit_leader(proposer, True)
        block, gas = [], 0
        for tx in self.pending[proposer].values():
            if tx.id in self.committed:
                continue
            if len(block) >= self.p.block_tx_cap:
                break
            block.append(tx)
            gas += self.p.gas_per_tx
        proposal = {"h": h, "proposer": proposer, "txs": block, "gas": gas,
                    "accepting": True, "streaks": {}, "rounds": {}}
        self.proposal = proposal
        self.has_block = {proposer}
        size = 100 + 64 * max(len(block), 1)
        for peer in range(self.n):
            if peer == proposer:
                continue
            self.fabric.send(
                proposer, peer, size, Transport.RELIABLE_STREAM, conn=CONN,
                on_deliver=lambda m, peer=peer, pr=proposal:
                    self._inbound(peer, pr["proposer"], self.p.msg_cost,
                                  lambda: self._proposal_in(peer, pr)))
        self._round_begin(proposer, proposal)

    def _proposal_in(self, node: int, proposal: dict) -> None:
        if proposal is not self.proposal or not proposal["accepting"]:
            return
        self.has_block.add(node)

    # -- repeated sampling ----------------------------------------------------------------

    def _round_begin(self, v: int, proposal: dict) -> None:
        if (proposal is not self.proposal or not proposal["accepting"]
                or self.accepted_h >= proposal["h"] or not self.alive(v)):
            return
        rounds = proposal["rounds"].get(v, 0) + 1
        proposal["rounds"][v] = rounds
        if rounds > self.p.max_rounds_per_proposal:
            if v == proposal["proposer"]:
                proposal["accepting"] = False  # give up; a later proposal retries
            return
        rstate = {"responses": 0, "closed": False}
        sample = self.rng.stream("sample", v, proposal["h"], rounds).sample(
            [u for u in range(self.n) if u != v], self.p.k)
        for peer in sample:
            self.fabric.send(
                v, peer, 200, Transport.RELIABLE_STREAM, conn=CONN,
                on_deliver=lambda m, peer=peer, v=v, pr=proposal, rs=rstate:
                    self._inbound(peer, v, self.p.msg_cost,
                                  lambda: self._query_in(peer, v, pr, rs)))
        self.sim.schedule(self.p.query_timeout_ns, self._round_close, v,
                          proposal, rstate, target=v)

    def _query_in(self, node: int, querier: int, proposal: dict,
                  rstate: dict) -> None:
        if not self.alive(node) or node not in self.has_block:
            return
        if proposal is not self.proposal:
            return
        self.fabric.send(
            node, querier, 200, Transport.RELIABLE_STREAM, conn=CONN,
            on_deliver=lambda m, q=querier, nd=node, pr=proposal, rs=rstate:
                self._inbound(q, nd, self.p.msg_cost,
                              lambda: self._response_in(q, pr, rs)))

    def _response_in(self, v: int, proposal: dict, rstate: dict) -> None:
        if rstate["closed"] or proposal is not self.proposal:
            return
        rstate["responses"] += 1
        if rstate["responses"] >= self.p.alpha:
            rstate["closed"] = True
            streak = proposal["streaks"].get(v, 0) + 1
            proposal["streaks"][v] = streak
            if streak >= self.p.beta and v == proposal["proposer"]:
                self._accept(proposal)
                return
            # successful rounds chain immediately; only failures are paced
            self.sim.schedule(10 * MS, self._round_begin, v, proposal, target=v)

    def _round_close(self, v: int, proposal: dict, rstate: dict) -> None:
        if rstate["closed"]:
            return
        rstate["closed"] = True
        proposal["streaks"][v] = 0
        self.sim.schedule(self.p.requery_delay_ns, self._round_begin, v,
                          proposal, target=v)

    def _poll_tick(self, h: int) -> None:
        """Nodes waiting on a missing block ask peers for it."""
        if self.accepted_h >= h or self.height != h:
            return
        stream = self.rng.stream("poll", h, self.sim.now)
        for i in range(self.n):
            if not self.alive(i) or i in self.has_block:
                continue
            peers = stream.sample([j for j in range(self.n) if j != i],
                                  self.p.poll_fanout)
            for j in peers:
                self.fabric.send(
                    i, j, 200, Transport.RELIABLE_STREAM, conn=CONN,
                    on_deliver=lambda m, j=j, i=i:
                        self._inbound(j, i, self.p.msg_cost,
                                      lambda: self._poll_in(j, i)))
        self.sim.schedule(self.p.poll_interval_ns, self._poll_tick, h,
                          target="consensus")

    def _poll_in(self, node: int, requester: int) -> None:
        if node in self.has_block and self.alive(node):
            self.fabric.send(
                node, requester, 200, Transport.RELIABLE_STREAM, conn=CONN,
                on_deliver=lambda m, r=requester, nd=node:
                    self._inbound(r, nd, self.p.msg_cost, lambda: None))

    # -- acceptance -------------------------------------------------------------------------

    def _accept(self, proposal: dict) -> None:
        h = proposal["h"]
        proposal["accepting"] = False
        self.accepted_h = h
        now = self.sim.now
        fresh = [tx for tx in proposal["txs"] if tx.id not in self.committed]
        accounts = set()
        for tx in fresh:
            self.committed.add(tx.id)
            self.metrics.record_commit(tx.id, now, h)
            accounts.add(tx.account)
            wm = self.watermark.get(tx.account, 0)
            if tx.nonce + 1 > wm:
                self.watermark[tx.account] = tx.nonce + 1
        ids = {tx.id for tx in fresh}
        if ids:
            for i in range(self.n):
                pool = self.pending[i]
                for tx_id in ids:
                    pool.pop(tx_id, None)
                for account in accounts:
                    wm = self.watermark[account]
                    if self.pool_next[i].get(account, 0) < wm:
                        self.pool_next[i][account] = wm
                    acct = self.queued[i].get(account)
                    if acct:
                        for nonce in [k for k in acct if k < wm]:
                            acct.pop(nonce)
                            self.queued_count[i] -= 1
                    self._promote(i, account)
        if self.p.fee_escalation:
            self._update_fee(now, proposal["gas"])
        self.sim.schedule_at(max(now, self.h_start + self.p.block_period_ns),
                             self._height_start, h + 1, target="consensus")

    def _update_fee(self, now: int, gas: int) -> None:
        self._fee_usage.append((now, gas))
        cutoff = now - 10 * SEC
        self._fee_usage = [(t, g) for t, g in self._fee_usage if t >= cutoff]
        usage = sum(g for _, g in self._fee_usage)
        if usage > self.p.gas_target_per_10s:
            self.base_fee = self.base_fee * self.p.fee_num // self.p.fee_den
        else:
            self.base_fee = max(self.p.base_fee_init,
                                self.base_fee * self.p.fee_den // self.p.fee_num)

    # -- crash/recover ------------------------------------------------------------------------

    def on_crash(self, node: int) -> None:
        self.pools[node] = {}
        self.pool_next[node] = {}
        self.stage[node] = []
        self.has_block.discard(node)

    def on_recover(self, node: int) -> None:
        # restarts with an empty pool; only the committed watermark is known
        self.pools[node] = {}
        self.pool_next[node] = {}
        self.stage[node] = []
        self.node_buckets[node] = _Bucket(self.p.node_capacity,
                                          self.p.node_refill_per_s)
        self.peer_buckets[node] = {}

    # -- reporting ------------------------------------------------------------------------------

    def summary_extra(self) -> dict:
        return {
            "base_fee": self.base_fee,
            "fee_rejected_submissions": self.halted_submissions,
            "suppress_drops": self.suppress_drops,
            "suppressed_pairs": sum(1 for v in self._suppressed_flags.values() if v),
            "accepted_height": self.accepted_h,
        }

    def extra_artifacts(self) -> dict[str, list]:
        rows = [["t_s", "node", "peer", "suppressed"]]
        for t_ns, node, peer, sup in self.throttle_log:
            rows.append([f"{t_ns / SEC:.3f}", node, peer, int(sup)])
        return {"throttle_log.csv": rows}
