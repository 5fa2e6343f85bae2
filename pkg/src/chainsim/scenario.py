"""Scenario files: schema, validation with path diagnostics, canonical builders.

A scenario JSON fully determines a run: protocol, node count, link defaults,
workload, attack, protocol parameter overrides, toggles and seed. Unknown
keys are rejected with the path to the offending field.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

from chainsim.attacks import KINDS, AttackSpec
from chainsim.engine import MS, SEC
from chainsim.fabric import FabricConfig, LinkSpec
from chainsim.protocols import PROTOCOLS
from chainsim.protocols.gossip import GossipParams
from chainsim.protocols.leaderless import LeaderlessParams
from chainsim.protocols.quorumstore import QuorumStoreParams
from chainsim.protocols.sampled import SampledParams
from chainsim.protocols.turbine import TurbineParams
from chainsim.workload import TargetPolicy

SCHEMA_VERSION = 1

PARAM_CLASSES = {
    "gossip": GossipParams,
    "quorumstore": QuorumStoreParams,
    "sampled": SampledParams,
    "leaderless": LeaderlessParams,
    "turbine": TurbineParams,
}


class ConfigError(ValueError):
    """Scenario validation failure; the message names the field path."""


@dataclass
class ScenarioSpec:
    name: str
    protocol: str
    n: int = 20
    seed: int = 1
    latency_ms: int = 20
    bandwidth_mbps: int = 1000
    mtu: int = 1280
    rto_base_ms: int = 200
    rto_cap_ms: int = 10_000
    rto_doubling: bool = True
    retry_budget_s: int = 60
    rate_tps: int = 200
    duration_s: int = 800
    drain_s: int = 200
    accounts: int = 20
    tx_size: int = 250
    fee_cap: int = 10_000
    policy: TargetPolicy = field(default_factory=lambda: TargetPolicy("uniform"))
    attack: Optional[AttackSpec] = None
    protocol_params: dict = field(default_factory=dict)
    toggles: dict = field(default_factory=dict)
    bandwidth_interval_s: int = 5

    def horizon_s(self) -> int:
        return self.duration_s + self.drain_s

    def link(self) -> LinkSpec:
        return LinkSpec(latency_ns=self.latency_ms * MS,
                        bandwidth_bps=self.bandwidth_mbps * 125_000,
                        mtu=self.mtu)

    def fabric_config(self) -> FabricConfig:
        return FabricConfig(link=self.link(),
                            rto_base_ns=self.rto_base_ms * MS,
                            rto_cap_ns=self.rto_cap_ms * MS,
                            rto_doubling=self.rto_doubling,
                            retry_budget_ns=self.retry_budget_s * SEC)

    def effective_params(self) -> dict:
        """Protocol params with toggles folded in."""
        params = dict(self.protocol_params)
        t = self.toggles
        if self.protocol == "sampled":
            if "throttling" in t:
                params["throttling"] = t["throttling"]
            if "fee_escalation" in t:
                params["fee_escalation"] = t["fee_escalation"]
            if t.get("recovery_mitigation"):
                params["pool_cap"] = params.get("pool_cap", 6144) * 10
                params["throttling"] = False
        elif self.protocol == "turbine" and "wait_for_rooted_vote" in t:
            params["wait_for_rooted_vote"] = t["wait_for_rooted_vote"]
        elif self.protocol == "gossip" and "sticky_bloom_fp" in t:
            params["sticky_fp"] = t["sticky_bloom_fp"]
        return params

    # -- serialization -----------------------------------------------------------

    def to_dict(self) -> dict:
        out: dict[str, Any] = {
            "schema": SCHEMA_VERSION,
            "name": self.name,
            "protocol": self.protocol,
            "n": self.n,
            "seed": self.seed,
            "link": {"latency_ms": self.latency_ms,
                     "bandwidth_mbps": self.bandwidth_mbps, "mtu": self.mtu},
            "transport": {"rto_base_ms": self.rto_base_ms,
                          "rto_cap_ms": self.rto_cap_ms,
                          "rto_doubling": self.rto_doubling,
                          "retry_budget_s": self.retry_budget_s},
            "workload": {"rate_tps": self.rate_tps,
                         "duration_s": self.duration_s,
                         "accounts": self.accounts,
                         "tx_size": self.tx_size,
                         "fee_cap": self.fee_cap,
                         "policy": self._policy_dict(self.policy)},
            "drain_s": self.drain_s,
            "attack": self._attack_dict(),
            "protocol_params": dict(self.protocol_params),
            "toggles": dict(self.toggles),
            "metrics": {"bandwidth_interval_s": self.bandwidth_interval_s},
        }
        return out

    @staticmethod
    def _policy_dict(policy: TargetPolicy) -> dict:
        out: dict[str, Any] = {"kind": policy.kind}
        if policy.kind == "single":
            out["node"] = policy.node
        elif policy.kind == "fraction":
            out["fraction"] = policy.fraction
        return out

    def _attack_dict(self) -> Optional[dict]:
        a = self.attack
        if a is None:
            return None
        out: dict[str, Any] = {"kind": a.kind}
        if a.kind == "targeted_load":
            if a.policy is not None:
                out["policy"] = self._policy_dict(a.policy)
            return out
        out["start_s"] = a.start_s
        out["end_s"] = a.end_s
        if a.kind in ("transient_failure", "stopping"):
            out["fraction"] = a.fraction
        elif a.kind == "packet_loss":
            out["rate"] = a.rate
            if a.group_size:
                out["group_size"] = a.group_size
        elif a.kind == "leader_isolation":
            out["loss_rate"] = a.loss_rate
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


# -- parsing -------------------------------------------------------------------------


def _need(mapping: dict, key: str, types, path: str, default=None, required=False):
    if key not in mapping:
        if required:
            raise ConfigError(f"{path}.{key}: missing required field")
        return default
    value = mapping[key]
    if not isinstance(types, tuple):
        types = (types,)
    if isinstance(value, bool) and bool not in types:
        raise ConfigError(f"{path}.{key}: expected {types[0].__name__}, got bool")
    if not isinstance(value, types):
        raise ConfigError(f"{path}.{key}: expected {types[0].__name__}, "
                          f"got {type(value).__name__}")
    return value


def _reject_unknown(mapping: dict, allowed: set, path: str) -> None:
    for key in mapping:
        if key not in allowed:
            raise ConfigError(f"{path}.{key}: unknown field")


def _parse_policy(data: dict, path: str) -> TargetPolicy:
    _reject_unknown(data, {"kind", "node", "fraction"}, path)
    kind = _need(data, "kind", str, path, required=True)
    if kind == "single":
        return TargetPolicy("single", node=_need(data, "node", int, path, 0))
    if kind == "fraction":
        frac = _need(data, "fraction", (int, float), path, required=True)
        return TargetPolicy("fraction", fraction=float(frac))
    if kind == "uniform":
        return TargetPolicy("uniform")
    raise ConfigError(f"{path}.kind: unknown policy {kind!r}")


def _parse_attack(data: Optional[dict], path: str) -> Optional[AttackSpec]:
    if data is None:
        return None
    _reject_unknown(data, {"kind", "start_s", "end_s", "fraction", "rate",
                           "group_size", "loss_rate", "policy"}, path)
    kind = _need(data, "kind", str, path, required=True)
    if kind not in KINDS:
        raise ConfigError(f"{path}.kind: unknown attack {kind!r}")
    policy = None
    if "policy" in data:
        policy = _parse_policy(data["policy"], f"{path}.policy")
    try:
        return AttackSpec(
            kind=kind,
            start_s=_need(data, "start_s", int, path, 133),
            end_s=_need(data, "end_s", int, path, 266),
            fraction=float(_need(data, "fraction", (int, float), path, 0.1)),
            rate=float(_need(data, "rate", (int, float), path, 0.5)),
            group_size=_need(data, "group_size", int, path, 0),
            loss_rate=float(_need(data, "loss_rate", (int, float), path, 0.75)),
            policy=policy,
        )
    except ValueError as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def parse_scenario(data: dict) -> ScenarioSpec:
    top = {"schema", "name", "protocol", "n", "seed", "link", "transport",
           "workload", "drain_s", "attack", "protocol_params", "toggles",
           "metrics"}
    _reject_unknown(data, top, "scenario")
    schema = _need(data, "schema", int, "scenario", required=True)
    if schema != SCHEMA_VERSION:
        raise ConfigError(f"scenario.schema: unsupported version {schema}")
    protocol = _need(data, "protocol", str, "scenario", required=True)
    if protocol not in PROTOCOLS:
        raise ConfigError(f"scenario.protocol: unknown protocol {protocol!r}")

    link = data.get("link", {})
    _reject_unknown(link, {"latency_ms", "bandwidth_mbps", "mtu"}, "scenario.link")
    transport = data.get("transport", {})
    _reject_unknown(transport, {"rto_base_ms", "rto_cap_ms", "rto_doubling",
                                "retry_budget_s"}, "scenario.transport")
    workload = data.get("workload", {})
    _reject_unknown(workload, {"rate_tps", "duration_s", "accounts", "tx_size",
                               "fee_cap", "policy"}, "scenario.workload")
    metrics = data.get("metrics", {})
    _reject_unknown(metrics, {"bandwidth_interval_s"}, "scenario.metrics")

    params = data.get("protocol_params", {})
    if not isinstance(params, dict):
        raise ConfigError("scenario.protocol_params: expected object")
    valid_params = {f.name for f in dataclasses.fields(PARAM_CLASSES[protocol])}
    for key in params:
        if key not in valid_params:
            raise ConfigError(f"scenario.protocol_params.{key}: "
                              f"unknown parameter for {protocol}")
    toggles = data.get("toggles", {})
    _reject_unknown(toggles, {"throttling", "fee_escalation",
                              "wait_for_rooted_vote", "sticky_bloom_fp",
                              "recovery_mitigation"}, "scenario.toggles")

    policy = TargetPolicy("uniform")
    if "policy" in workload:
        policy = _parse_policy(workload["policy"], "scenario.workload.policy")

    spec = ScenarioSpec(
        name=_need(data, "name", str, "scenario", "unnamed"),
        protocol=protocol,
        n=_need(data, "n", int, "scenario", 20),
        seed=_need(data, "seed", int, "scenario", 1),
        latency_ms=_need(link, "latency_ms", int, "scenario.link", 20),
        bandwidth_mbps=_need(link, "bandwidth_mbps", int, "scenario.link", 1000),
        mtu=_need(link, "mtu", int, "scenario.link", 1280),
        rto_base_ms=_need(transport, "rto_base_ms", int, "scenario.transport", 200),
        rto_cap_ms=_need(transport, "rto_cap_ms", int, "scenario.transport", 10_000),
        rto_doubling=_need(transport, "rto_doubling", bool, "scenario.transport", True),
        retry_budget_s=_need(transport, "retry_budget_s", int,
                             "scenario.transport", 60),
        rate_tps=_need(workload, "rate_tps", int, "scenario.workload", 200),
        duration_s=_need(workload, "duration_s", int, "scenario.workload", 800),
        drain_s=_need(data, "drain_s", int, "scenario", 200),
        accounts=_need(workload, "accounts", int, "scenario.workload", 20),
        tx_size=_need(workload, "tx_size", int, "scenario.workload", 250),
        fee_cap=_need(workload, "fee_cap", int, "scenario.workload", 10_000),
        policy=policy,
        attack=_parse_attack(data.get("attack"), "scenario.attack"),
        protocol_params=dict(params),
        toggles=dict(toggles),
        bandwidth_interval_s=_need(metrics, "bandwidth_interval_s", int,
                                   "scenario.metrics", 5),
    )
    if spec.n < 4:
        raise ConfigError("scenario.n: need at least 4 nodes")
    if spec.rate_tps <= 0 or spec.duration_s <= 0:
        raise ConfigError("scenario.workload: rate and duration must be positive")
    return spec


def load_scenario(path: str | Path) -> ScenarioSpec:
    with open(path) as f:
        try:
            data = json.load(f)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return parse_scenario(data)


# -- canonical scenarios ----------------------------------------------------------------

ATTACK_ORDER = ("targeted_load", "transient_failure", "packet_loss", "stopping",
                "leader_isolation")


def canonical(protocol: str, attack_kind: Optional[str], seed: int = 1,
              **overrides) -> ScenarioSpec:
    """The benchmark configuration for one (protocol, attack) cell."""
    if protocol not in PROTOCOLS:
        raise ConfigError(f"unknown protocol {protocol!r}")
    attack = None
    policy = TargetPolicy("fraction", fraction=0.25)
    if attack_kind == "targeted_load":
        attack = AttackSpec("targeted_load", policy=TargetPolicy("single", node=0))
        policy = attack.policy
    elif attack_kind == "transient_failure":
        fraction = 0.35 if protocol == "quorumstore" else 0.10
        attack = AttackSpec("transient_failure", fraction=fraction)
    elif attack_kind == "packet_loss":
        attack = AttackSpec("packet_loss", rate=0.5)
    elif attack_kind == "stopping":
        attack = AttackSpec("stopping", fraction=0.90)
    elif attack_kind == "leader_isolation":
        attack = AttackSpec("leader_isolation", loss_rate=0.75)
    elif attack_kind is not None:
        raise ConfigError(f"unknown attack kind {attack_kind!r}")
    name = f"{protocol}_{attack_kind or 'baseline'}"
    spec = ScenarioSpec(name=name, protocol=protocol, seed=seed, policy=policy,
                        attack=attack)
    for key, value in overrides.items():
        if not hasattr(spec, key):
            raise ConfigError(f"unknown scenario field {key!r}")
        setattr(spec, key, value)
    return spec
