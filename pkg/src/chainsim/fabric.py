"""Simulated network: links, transports, loss rules, crash handling, byte accounting.

Three transport models:

* DATAGRAM -- at-most-once. One Bernoulli loss trial per MTU packet; a payload
  larger than one MTU survives only if every packet does. No retransmission.
* MULTIPLEXED_STREAM -- reliable per message, no cross-message ordering. Lost
  segments retry on an RTO schedule (doubling per message, capped) until a
  retry budget expires (ConnectionTimeout).
* RELIABLE_STREAM -- like multiplexed, plus head-of-line blocking (messages on
  one connection reach the application strictly in send order) and
  connection-level backoff: every failed attempt on the connection raises its
  RTO level, every success lowers it, so a lossy path collapses the way a
  congestion-controlled stream does instead of retrying each segment
  independently.

Stream attempts must survive both directions (data and ack path), so a
bidirectional loss rule hits them twice; datagrams are one-way.

Loss rules compose multiplicatively (independent drops) and apply to packets
whose egress time falls inside the rule window, netem-style: traffic already
in flight when a rule appears escapes it. Every attempted byte (including
retransmissions) lands in the per-peer TX counters; RX counts delivered bytes.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Optional

from chainsim import kernels
from chainsim.engine import MS, SEC, Simulator
from chainsim.rng import RngFactory, Stream, p_to_threshold

log = logging.getLogger(__name__)


class Transport(Enum):
    RELIABLE_STREAM = "reliable"
    MULTIPLEXED_STREAM = "multiplexed"
    DATAGRAM = "datagram"


class MsgStatus(Enum):
    PENDING = "pending"
    DELIVERED = "delivered"
    DROPPED = "dropped"
    TIMED_OUT = "timed_out"
    SRC_CRASHED = "src_crashed"


@dataclass
class LinkSpec:
    latency_ns: int = 20 * MS
    bandwidth_bps: int = 125_000_000  # bytes/second (1 Gbit/s)
    mtu: int = 1280

    def __post_init__(self):
        if self.latency_ns <= 0 or self.bandwidth_bps <= 0 or self.mtu <= 0:
            raise ValueError("latency, bandwidth and mtu must be positive")


@dataclass
class FabricConfig:
    link: LinkSpec = field(default_factory=LinkSpec)
    rto_base_ns: int = 200 * MS
    rto_cap_ns: int = 10 * SEC
    rto_doubling: bool = True
    retry_budget_ns: int = 60 * SEC


@dataclass
class LossRule:
    rule_id: int
    src_set: frozenset
    dst_set: frozenset
    rate: float
    start_ns: int
    end_ns: int
    bidirectional: bool = False

    def __post_init__(self):
        if not 0.0 <= self.rate <= 1.0:
            raise ValueError("loss rate outside [0, 1]")
        if self.start_ns >= self.end_ns:
            raise ValueError("rule window start must precede end")

    def matches(self, src: int, dst: int, now: int) -> bool:
        if not self.start_ns <= now < self.end_ns:
            return False
        if src in self.src_set and dst in self.dst_set:
            return True
        return self.bidirectional and src in self.dst_set and dst in self.src_set


class Message:
    __slots__ = (
        "msg_id", "src", "dst", "size", "transport", "conn", "send_time",
        "status", "delivered_at", "on_deliver", "on_fail", "payload",
        "order_seq", "rng", "seg_index", "consec_fails", "arrived",
    )

    def __init__(self, msg_id, src, dst, size, transport, conn, send_time,
                 on_deliver, on_fail, payload):
        self.msg_id = msg_id
        self.src = src
        self.dst = dst
        self.size = size
        self.transport = transport
        self.conn = conn
        self.send_time = send_time
        self.status = MsgStatus.PENDING
        self.delivered_at: Optional[int] = None
        self.on_deliver = on_deliver
        self.on_fail = on_fail
        self.payload = payload
        self.order_seq: Optional[int] = None
        self.rng: Optional[Stream] = None
        self.seg_index = 0
        self.consec_fails = 0
        self.arrived = 0


class _ConnState:
    __slots__ = ("next_seq", "next_deliver", "resolved", "level")

    def __init__(self):
        self.next_seq = 0
        self.next_deliver = 0
        self.resolved: dict[int, Optional[Message]] = {}
        self.level = 0  # shared backoff level (reliable streams only)


class Fabric:
    def __init__(self, sim: Simulator, n: int, rng: RngFactory,
                 config: Optional[FabricConfig] = None):
        self.sim = sim
        self.n = n
        self.rng = rng
        self.cfg = config or FabricConfig()
        self.crashed: set[int] = set()
        self._rules: dict[int, LossRule] = {}
        self._next_rule_id = 1
        self._next_msg_id = 0
        self._conns: dict[tuple, _ConnState] = {}
        self._link_busy: dict[tuple, int] = {}
        # sampling counters (reset by sample()) and cumulative audit totals
        self._tx_window: dict[tuple, int] = {}
        self._rx_window: dict[tuple, int] = {}
        self._last_sample_ns = 0
        self.tx_total = 0
        self.rx_total = 0
        self.dropped_total = 0
        self.inflight = 0
        self.node_tx_total: dict[int, int] = {i: 0 for i in range(n)}
        self.crash_listeners: list[Callable[[int, bool], None]] = []
        self.retransmit_listeners: list[Callable[[int, int], None]] = []
        self.send_listener: Optional[Callable[[Message], None]] = None

    # -- loss rules -----------------------------------------------------------

    def apply_loss_rule(self, src_set, dst_set, rate: float, start_ns: int,
                        end_ns: int, bidirectional: bool = False) -> int:
        rule = LossRule(self._next_rule_id, frozenset(src_set), frozenset(dst_set),
                        rate, start_ns, end_ns, bidirectional)
        self._rules[rule.rule_id] = rule
        self._next_rule_id += 1
        return rule.rule_id

    def remove_loss_rule(self, rule_id: int) -> None:
        if self._rules.pop(rule_id, None) is None:
            log.warning("remove_loss_rule: unknown rule id %s", rule_id)

    def effective_loss(self, src: int, dst: int) -> float:
        keep = 1.0
        now = self.sim.now
        for rule in self._rules.values():
            if rule.matches(src, dst, now):
                keep *= 1.0 - rule.rate
        return 1.0 - keep

    # -- crash / recover ------------------------------------------------------

    def crash(self, node: int) -> None:
        if node in self.crashed:
            return
        self.crashed.add(node)
        for listener in self.crash_listeners:
            listener(node, True)

    def recover(self, node: int) -> None:
        if node not in self.crashed:
            return
        self.crashed.discard(node)
        for listener in self.crash_listeners:
            listener(node, False)

    def alive(self, node: int) -> bool:
        return node not in self.crashed

    # -- accounting helpers ---------------------------------------------------

    def _account_tx(self, src: int, dst: int, size: int) -> None:
        key = (src, dst)
        self._tx_window[key] = self._tx_window.get(key, 0) + size
        self.tx_total += size
        self.node_tx_total[src] += size

    def _account_rx(self, dst: int, src: int, size: int) -> None:
        key = (dst, src)
        self._rx_window[key] = self._rx_window.get(key, 0) + size
        self.rx_total += size

    def _egress(self, src: int, dst: int, size: int) -> tuple[int, int]:
        """Serialize on the directed link; returns (egress_end, arrival)."""
        now = self.sim.now
        start = max(now, self._link_busy.get((src, dst), 0))
        tx_time = size * SEC // self.cfg.link.bandwidth_bps
        end = start + tx_time
        self._link_busy[(src, dst)] = end
        return end, end + self.cfg.link.latency_ns

    def _segments(self, size: int) -> list[int]:
        mtu = self.cfg.link.mtu
        full, rem = divmod(size, mtu)
        return [mtu] * full + ([rem] if rem else [])

    # -- send -----------------------------------------------------------------

    def send(self, src: int, dst: int, size: int, transport: Transport,
             conn: str = "0", on_deliver: Optional[Callable] = None,
             on_fail: Optional[Callable] = None, payload=None) -> Message:
        if src == dst:
            raise ValueError("src == dst")
        if size <= 0:
            raise ValueError("size must be positive")
        msg = Message(self._next_msg_id, src, dst, size, transport, conn,
                      self.sim.now, on_deliver, on_fail, payload)
        self._next_msg_id += 1
        if src in self.crashed:
            msg.status = MsgStatus.SRC_CRASHED
            return msg
        if self.send_listener is not None:
            self.send_listener(msg)
        msg.rng = Stream(self.rng.key("fabric-loss", msg.msg_id))
        if transport is Transport.DATAGRAM:
            self._send_datagram(msg)
        else:
            if transport is Transport.RELIABLE_STREAM:
                state = self._conn_state(msg)
                msg.order_seq = state.next_seq
                state.next_seq += 1
            self._send_stream(msg)
        return msg

    def _conn_state(self, msg: Message) -> _ConnState:
        key = (msg.src, msg.dst, msg.conn)
        state = self._conns.get(key)
        if state is None:
            state = self._conns[key] = _ConnState()
        return state

    # -- datagram path --------------------------------------------------------

    def _send_datagram(self, msg: Message) -> None:
        packets = len(self._segments(msg.size))
        self._account_tx(msg.src, msg.dst, msg.size)
        p = self.effective_loss(msg.src, msg.dst)
        if p >= 1.0:
            drops = packets
        elif p <= 0.0:
            drops = 0
        else:
            drops = kernels.bernoulli_count(msg.rng.key, msg.rng.counter,
                                            packets, p_to_threshold(p))
            msg.rng.counter += packets
        if drops:
            self.dropped_total += msg.size
            msg.status = MsgStatus.DROPPED
            return
        _, arrival = self._egress(msg.src, msg.dst, msg.size)
        self.inflight += msg.size
        self.sim.schedule_at(arrival, self._datagram_arrival, msg, target=msg.dst)

    def _datagram_arrival(self, msg: Message) -> None:
        self.inflight -= msg.size
        if msg.dst in self.crashed:
            self.dropped_total += msg.size
            msg.status = MsgStatus.DROPPED
            return
        self._account_rx(msg.dst, msg.src, msg.size)
        msg.status = MsgStatus.DELIVERED
        msg.delivered_at = self.sim.now
        if msg.on_deliver is not None:
            msg.on_deliver(msg)

    def send_shred_batch(self, src: int, dst: int, count: int, size_each: int,
                         on_deliver: Callable, payload=None) -> None:
        """Batched datagram send: `count` packets of size_each in one call.

        Per-packet Bernoulli trials are identical to individual sends; the
        delivery callback receives the survivor count.
        """
        if src in self.crashed or count <= 0:
            return
        total = count * size_each
        self._account_tx(src, dst, total)
        p = self.effective_loss(src, dst)
        if p >= 1.0:
            survivors = 0
        elif p <= 0.0:
            survivors = count
        else:
            key = self.rng.key("fabric-loss", self._next_msg_id)
            drops = kernels.bernoulli_count(key, 0, count, p_to_threshold(p))
            survivors = count - drops
        self._next_msg_id += 1
        lost = (count - survivors) * size_each
        self.dropped_total += lost
        if survivors == 0:
            return
        size = survivors * size_each
        _, arrival = self._egress(src, dst, size)
        self.inflight += size
        self.sim.schedule_at(arrival, self._batch_arrival, src, dst, survivors,
                             size, on_deliver, payload, target=dst)

    def _batch_arrival(self, src, dst, survivors, size, on_deliver, payload):
        self.inflight -= size
        if dst in self.crashed:
            self.dropped_total += size
            return
        self._account_rx(dst, src, size)
        on_deliver(survivors, payload)

    # -- stream path ----------------------------------------------------------

    def _stream_loss(self, src: int, dst: int) -> float:
        """Per-attempt loss for streams: data and ack path must both survive."""
        fwd = self.effective_loss(src, dst)
        rev = self.effective_loss(dst, src)
        return 1.0 - (1.0 - fwd) * (1.0 - rev)

    def _send_stream(self, msg: Message) -> None:
        if self._stream_loss(msg.src, msg.dst) <= 0.0 and msg.dst not in self.crashed:
            # fast path: deterministic whole-message transfer
            self._account_tx(msg.src, msg.dst, msg.size)
            _, arrival = self._egress(msg.src, msg.dst, msg.size)
            self.inflight += msg.size
            msg.arrived = msg.size
            self.sim.schedule_at(arrival, self._stream_arrival, msg, target=msg.dst)
        else:
            self.sim.schedule_at(self.sim.now, self._stream_attempt, msg,
                                 target=msg.src)

    def _backoff_level(self, msg: Message) -> int:
        if msg.transport is Transport.RELIABLE_STREAM:
            return self._conn_state(msg).level
        return msg.consec_fails

    def _note_attempt(self, msg: Message, failed: bool) -> None:
        msg.consec_fails = msg.consec_fails + 1 if failed else 0
        if msg.transport is Transport.RELIABLE_STREAM:
            state = self._conn_state(msg)
            state.level = min(state.level + 1, 12) if failed else max(state.level - 1, 0)

    def _rto(self, level: int) -> int:
        if not self.cfg.rto_doubling:
            return self.cfg.rto_base_ns
        return min(self.cfg.rto_base_ns << min(max(level, 0), 12),
                   self.cfg.rto_cap_ns)

    def _stream_attempt(self, msg: Message) -> None:
        """One transmission attempt of the current segment (retry path)."""
        if msg.status is not MsgStatus.PENDING:
            return
        if msg.src in self.crashed:
            self._resolve_failure(msg, MsgStatus.SRC_CRASHED)
            return
        if self.sim.now - msg.send_time > self.cfg.retry_budget_ns:
            self._resolve_failure(msg, MsgStatus.TIMED_OUT)
            return
        segments = self._segments(msg.size)
        seg_size = segments[msg.seg_index]
        self._account_tx(msg.src, msg.dst, seg_size)
        if msg.consec_fails > 0:
            for listener in self.retransmit_listeners:
                listener(msg.src, msg.dst)
        if msg.dst in self.crashed:
            # probe a dead host: one segment per RTO until it recovers
            self.dropped_total += seg_size
            self._note_attempt(msg, failed=True)
            self.sim.schedule(self._rto(self._backoff_level(msg)),
                              self._stream_attempt, msg, target=msg.src)
            return
        p = self._stream_loss(msg.src, msg.dst)
        dropped = p >= 1.0 or (p > 0.0 and msg.rng.bernoulli(p_to_threshold(p)))
        if dropped:
            self.dropped_total += seg_size
            self._note_attempt(msg, failed=True)
            self.sim.schedule(self._rto(self._backoff_level(msg)),
                              self._stream_attempt, msg, target=msg.src)
            return
        self._note_attempt(msg, failed=False)
        seg_tx = seg_size * SEC // self.cfg.link.bandwidth_bps
        self.inflight += seg_size
        msg.arrived += seg_size
        if msg.seg_index + 1 < len(segments):
            msg.seg_index += 1
            self.sim.schedule(seg_tx, self._stream_attempt, msg, target=msg.src)
        else:
            arrival = self.sim.now + seg_tx + self.cfg.link.latency_ns
            self.sim.schedule_at(arrival, self._stream_arrival, msg, target=msg.dst)

    def _stream_arrival(self, msg: Message) -> None:
        """Whole transfer reached dst (fast path or last retry segment)."""
        if msg.status is not MsgStatus.PENDING:
            return
        self.inflight -= msg.arrived
        if msg.dst in self.crashed:
            # held by the transport: the whole message re-enters the retry path
            self.dropped_total += msg.arrived
            msg.arrived = 0
            msg.seg_index = 0
            self._note_attempt(msg, failed=True)
            if self.sim.now - msg.send_time > self.cfg.retry_budget_ns:
                self._resolve_failure(msg, MsgStatus.TIMED_OUT)
            else:
                self.sim.schedule(self._rto(self._backoff_level(msg)),
                                  self._stream_attempt, msg, target=msg.src)
            return
        self._account_rx(msg.dst, msg.src, msg.arrived)
        if msg.transport is Transport.RELIABLE_STREAM:
            self._resolve_ordered(msg, msg)
        else:
            self._deliver(msg)

    def _deliver(self, msg: Message) -> None:
        msg.status = MsgStatus.DELIVERED
        msg.delivered_at = self.sim.now
        if msg.on_deliver is not None:
            msg.on_deliver(msg)

    def _resolve_failure(self, msg: Message, status: MsgStatus) -> None:
        msg.status = status
        if msg.transport is Transport.RELIABLE_STREAM:
            self._resolve_ordered(msg, None)
        elif msg.on_fail is not None:
            msg.on_fail(msg)

    def _resolve_ordered(self, msg: Message, completed: Optional[Message]) -> None:
        """Reliable-stream in-order release; failures free their slot."""
        state = self._conn_state(msg)
        state.resolved[msg.order_seq] = completed
        while state.next_deliver in state.resolved:
            done = state.resolved.pop(state.next_deliver)
            state.next_deliver += 1
            if done is not None:
                # delivery time includes head-of-line blocking behind earlier
                # messages on the same connection
                self._deliver(done)
        if completed is None and msg.on_fail is not None:
            msg.on_fail(msg)

    # -- bandwidth sampling ---------------------------------------------------

    def sample(self) -> list[tuple[int, int, float, float]]:
        """Average per-peer rates since the previous sample; resets counters."""
        now = self.sim.now
        dt = now - self._last_sample_ns
        self._last_sample_ns = now
        if dt <= 0:
            self._tx_window.clear()
            self._rx_window.clear()
            return []
        dt_s = dt / SEC
        pairs = sorted(set(self._tx_window) | set(self._rx_window))
        rows = []
        for node, peer in pairs:
            tx = self._tx_window.get((node, peer), 0)
            rx = self._rx_window.get((node, peer), 0)
            rows.append((node, peer, tx / 1024.0 / dt_s, rx / 1024.0 / dt_s))
        self._tx_window.clear()
        self._rx_window.clear()
        return rows

    # -- audit ----------------------------------------------------------------

    def audit(self) -> None:
        """Byte conservation: TX == RX + dropped + in flight."""
        if self.tx_total != self.rx_total + self.dropped_total + self.inflight:
            raise AssertionError(
                f"byte conservation violated: tx={self.tx_total} "
                f"rx={self.rx_total} dropped={self.dropped_total} "
                f"inflight={self.inflight}")
