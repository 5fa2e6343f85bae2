"""Run orchestration: wire a scenario, execute, classify, emit artifacts.

`run_scenario` performs one deterministic run and writes the artifact
directory. `matrix` executes the 25 canonical (protocol, attack) cells and
checks them against the expected vulnerability matrix; `sweep` varies one
scenario field across values.
"""

from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Optional

from chainsim.attacks import Injector, NotApplicable
from chainsim.engine import SEC, Simulator
from chainsim.fabric import Fabric
from chainsim.metrics import Metrics
from chainsim.protocols import PROTOCOLS
from chainsim.protocols.base import RunEnv
from chainsim.rng import RngFactory
from chainsim.scenario import ATTACK_ORDER, ScenarioSpec, canonical, parse_scenario
from chainsim.workload import Workload

RESILIENT = "Resilient"
VULNERABLE = "Vulnerable"
NOT_ASSERTED = "NotAsserted"

VULNERABLE_RATIO = 0.90
RESILIENT_RATIO = 0.99
GAP_WINDOW_FRACTION = 0.5
# the zero-gap rule judges attacks that interfere with live nodes' traffic;
# crash-style attacks trivially gap while nodes are down
GAP_RULE_ATTACKS = ("packet_loss", "leader_isolation")

# Expected verdicts for the canonical matrix ("R"/"V"; None = not asserted)
EXPECTED_MATRIX: dict[tuple[str, str], Optional[str]] = {
    ("gossip", "targeted_load"): "R",
    ("gossip", "transient_failure"): "R",
    ("gossip", "packet_loss"): "V",
    ("gossip", "stopping"): "R",
    ("gossip", "leader_isolation"): "R",
    ("quorumstore", "targeted_load"): "V",
    ("quorumstore", "transient_failure"): None,
    ("quorumstore", "packet_loss"): None,
    ("quorumstore", "stopping"): "R",
    ("quorumstore", "leader_isolation"): "V",
    ("sampled", "targeted_load"): None,
    ("sampled", "transient_failure"): "V",
    ("sampled", "packet_loss"): None,
    ("sampled", "stopping"): None,
    ("sampled", "leader_isolation"): None,
    ("leaderless", "targeted_load"): "R",
    ("leaderless", "transient_failure"): "R",
    ("leaderless", "packet_loss"): None,
    ("leaderless", "stopping"): "R",
    ("leaderless", "leader_isolation"): "R",
    ("turbine", "targeted_load"): "R",
    ("turbine", "transient_failure"): None,
    ("turbine", "packet_loss"): "R",
    ("turbine", "stopping"): "V",
    ("turbine", "leader_isolation"): "V",
}


def verdict_for(summary: dict, attack_kind: Optional[str],
                window_s: Optional[tuple[int, int]]) -> dict:
    ratio = summary["commit_ratio"]
    recovered = summary["recovered"]
    if ratio < VULNERABLE_RATIO:
        return {"outcome": VULNERABLE,
                "evidence": f"commit_ratio {ratio:.3f} < {VULNERABLE_RATIO}"}
    if not recovered:
        return {"outcome": VULNERABLE, "evidence": "recovery_time infinite"}
    if (attack_kind in GAP_RULE_ATTACKS and window_s is not None):
        window = window_s[1] - window_s[0]
        if summary["zero_gap_s"] > GAP_WINDOW_FRACTION * window:
            return {"outcome": VULNERABLE,
                    "evidence": f"zero-commit gap {summary['zero_gap_s']}s "
                                f"> 50% of {window}s window"}
    if ratio >= RESILIENT_RATIO:
        return {"outcome": RESILIENT,
                "evidence": f"commit_ratio {ratio:.3f}, recovery "
                            f"{summary['recovery_time_s']}s"}
    return {"outcome": NOT_ASSERTED,
            "evidence": f"commit_ratio {ratio:.3f} between thresholds"}


def run_scenario(spec: ScenarioSpec, outdir: Optional[Path] = None) -> dict:
    sim = Simulator()
    rng = RngFactory(spec.seed)
    fabric = Fabric(sim, spec.n, rng, spec.fabric_config())
    metrics = Metrics()
    env = RunEnv(sim, fabric, rng, metrics, spec.n,
                 duration_ns=spec.duration_s * SEC)
    protocol = PROTOCOLS[spec.protocol](env, spec.effective_params())

    policy = spec.policy
    attack = spec.attack
    if attack is not None and attack.kind == "targeted_load" and attack.policy:
        policy = attack.policy
    workload = Workload(sim, fabric, protocol, metrics, policy,
                        spec.rate_tps, spec.duration_s, spec.accounts, spec.n,
                        spec.tx_size, spec.fee_cap)

    attack_applicable = True
    window_s = None
    if attack is not None:
        injector = Injector(attack, sim, fabric, protocol, metrics,
                            workload.target_nodes(), rng)
        try:
            injector.arm()
            if attack.kind != "targeted_load":
                window_s = attack.window_s
        except NotApplicable as exc:
            attack_applicable = False
            metrics.record_attack(0, "not_applicable", str(exc))

    interval_ns = spec.bandwidth_interval_s * SEC
    horizon_ns = spec.horizon_s() * SEC

    def sample_bandwidth():
        metrics.record_bandwidth(sim.now, fabric.sample())
        if sim.now < horizon_ns:
            sim.schedule(interval_ns, sample_bandwidth, target="metrics")

    sim.schedule(interval_ns, sample_bandwidth, target="metrics")
    protocol.start()
    workload.start()
    sim.run(horizon_ns)

    fabric.audit()
    protocol.audit()

    extra = {
        "scenario": spec.to_dict(),
        "seed": spec.seed,
        "protocol": spec.protocol,
        "attack_kind": attack.kind if attack else None,
        "attack_applicable": attack_applicable,
        "attack_window_s": list(window_s) if window_s else None,
    }
    extra.update(protocol.summary_extra())
    summary = metrics.summary(spec.horizon_s(), window_s,
                              fabric.node_tx_total, extra)
    summary["verdict"] = verdict_for(summary, attack.kind if attack else None,
                                     window_s)
    if outdir is not None:
        outdir = Path(outdir)
        metrics.write_artifacts(outdir, spec.horizon_s(), summary)
        import csv
        for filename, rows in protocol.extra_artifacts().items():
            with open(outdir / filename, "w", newline="") as f:
                csv.writer(f).writerows(rows)
    return summary


def _run_cell(args) -> tuple:
    spec_data, outdir = args
    spec = parse_scenario(spec_data)
    summary = run_scenario(spec, Path(outdir) if outdir else None)
    return (spec.protocol, spec.attack.kind if spec.attack else None,
            spec.seed, summary)


def matrix(seeds=(1, 2, 3), outroot: Optional[Path] = None,
           jobs: Optional[int] = None) -> dict:
    """Run the 5x5 canonical cells on every seed; compare asserted cells."""
    tasks = []
    for protocol in PROTOCOLS:
        for attack_kind in ATTACK_ORDER:
            for seed in seeds:
                spec = canonical(protocol, attack_kind, seed=seed)
                outdir = None
                if outroot is not None:
                    outdir = str(Path(outroot) / f"{spec.name}_seed{seed}")
                tasks.append((spec.to_dict(), outdir))
    jobs = jobs or max(1, os.cpu_count() or 1)
    results = []
    if jobs == 1:
        results = [_run_cell(t) for t in tasks]
    else:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_cell, tasks))
    cells: dict[tuple[str, str], dict] = {}
    for protocol, attack_kind, seed, summary in results:
        cell = cells.setdefault((protocol, attack_kind), {"seeds": {}})
        cell["seeds"][seed] = {"outcome": summary["verdict"]["outcome"],
                               "commit_ratio": summary["commit_ratio"],
                               "evidence": summary["verdict"]["evidence"]}
    mismatches = []
    for (protocol, attack_kind), cell in cells.items():
        expected = EXPECTED_MATRIX[(protocol, attack_kind)]
        outcomes = {s: v["outcome"] for s, v in cell["seeds"].items()}
        cell["expected"] = expected
        if expected is None:
            cell["ok"] = True
            continue
        want = RESILIENT if expected == "R" else VULNERABLE
        cell["ok"] = all(o == want for o in outcomes.values())
        if not cell["ok"]:
            mismatches.append((protocol, attack_kind, want, outcomes))
    return {"cells": {f"{p}/{a}": c for (p, a), c in cells.items()},
            "mismatches": mismatches, "ok": not mismatches}


def set_by_path(spec: ScenarioSpec, path: str, value):
    """Assign a sweep value by dotted path into the scenario."""
    parts = path.split(".")
    target = spec
    for part in parts[:-1]:
        if isinstance(target, dict):
            target = target[part]
        else:
            target = getattr(target, part)
    leaf = parts[-1]
    if isinstance(target, dict):
        target[leaf] = value
    elif hasattr(target, leaf):
        setattr(target, leaf, value)
    else:
        raise KeyError(f"no scenario field at path {path!r}")


def sweep(spec: ScenarioSpec, param_path: str, values,
          outroot: Optional[Path] = None, jobs: Optional[int] = None) -> list[dict]:
    import copy
    tasks = []
    for value in values:
        variant = copy.deepcopy(spec)
        set_by_path(variant, param_path, value)
        variant.name = f"{spec.name}_{param_path.replace('.', '-')}-{value}"
        outdir = str(Path(outroot) / variant.name) if outroot else None
        tasks.append((variant.to_dict(), outdir, value))
    jobs = jobs or max(1, os.cpu_count() or 1)
    if jobs == 1:
        results = [_run_cell((t[0], t[1])) for t in tasks]
    else:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_cell, [(t[0], t[1]) for t in tasks]))
    rows = []
    for task, (protocol, _kind, _seed, summary) in zip(tasks, results):
        rows.append({"value": task[2], "protocol": protocol,
                     "outcome": summary["verdict"]["outcome"],
                     "commit_ratio": summary["commit_ratio"],
                     "median_latency_s": summary["latency_s"]["p50"],
                     "recovery_time_s": summary["recovery_time_s"],
                     "summary": summary})
    return rows
