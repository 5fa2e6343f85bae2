"""Shared protocol plumbing: run environment, base class, leader-event fanout."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

from chainsim.engine import Simulator
from chainsim.fabric import Fabric
from chainsim.metrics import Metrics
from chainsim.rng import RngFactory
from chainsim.workload import Outcome, Transaction


@dataclass
class RunEnv:
    sim: Simulator
    fabric: Fabric
    rng: RngFactory
    metrics: Metrics
    n: int
    duration_ns: int = 0


class Protocol:
    """One node-state machine per node, driven entirely by events."""

    name = "base"
    leader_based = False  # emits leader events usable by isolation attacks
    fault_numerator = 3  # f = n // fault_numerator (claimed tolerance)

    def __init__(self, env: RunEnv, params: Optional[dict] = None):
        self.env = env
        self.sim = env.sim
        self.fabric = env.fabric
        self.rng = env.rng
        self.metrics = env.metrics
        self.n = env.n
        self.leader_listeners: list[Callable[[int, bool, int], None]] = []
        env.fabric.crash_listeners.append(self._on_crash_change)

    @classmethod
    def fault_tolerance(cls, n: int) -> int:
        return n // cls.fault_numerator

    def emit_leader(self, node: int, became: bool) -> None:
        for listener in self.leader_listeners:
            listener(node, became, self.sim.now)

    def alive(self, node: int) -> bool:
        return self.fabric.alive(node)

    def _on_crash_change(self, node: int, crashed: bool) -> None:
        if crashed:
            self.on_crash(node)
        else:
            self.on_recover(node)

    # -- interface for subclasses ---------------------------------------------

    def start(self) -> None:
        raise NotImplementedError

    def on_submit(self, node: int, tx: Transaction) -> Outcome:
        raise NotImplementedError

    def on_crash(self, node: int) -> None:
        pass

    def on_recover(self, node: int) -> None:
        pass

    def audit(self) -> None:
        """Protocol-level invariant checks run at the end of a run."""

    def summary_extra(self) -> dict:
        return {}

    def extra_artifacts(self) -> dict[str, list]:
        """Extra CSVs: filename -> rows (first row is the header)."""
        return {}
