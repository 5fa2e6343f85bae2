"""Run instrumentation: throughput windows, latency bins, bandwidth series, summary.

Mirrors the measurement setup the experiments use: commit throughput averaged
over a 2-second sliding window, latency percentiles over 10-second bins keyed
by commit time (empty bins are explicit gaps), per-peer bandwidth samples, and
a run summary with commit ratio, recovery time and per-node TX shares.
"""

from __future__ import annotations

import csv
import json
import math
from pathlib import Path
from typing import Optional

from chainsim.engine import SEC
from chainsim.workload import Outcome, Transaction

THROUGHPUT_WINDOW_S = 2
THROUGHPUT_STEP_S = 1
LATENCY_BIN_S = 10
RECOVERY_FRACTION = 0.9
RECOVERY_HOLD_S = 10
PERCENTILES = (50, 90, 95, 99)


def nearest_rank(sorted_values: list, q: int):
    """ceil(q/100 * N)-th smallest value; exact, no interpolation."""
    if not sorted_values:
        raise ValueError("empty bin")
    rank = math.ceil(q / 100 * len(sorted_values))
    return sorted_values[max(rank, 1) - 1]


class Metrics:
    def __init__(self):
        self.submissions: list[tuple] = []  # (t_ns, tx_id, account, nonce, target, outcome)
        self.submit_time: dict[int, int] = {}
        self.commit_time: dict[int, int] = {}
        self.commit_round: dict[int, int] = {}
        self.accepted = 0
        self.bandwidth_rows: list[tuple] = []  # (t_ns, node, peer, tx_kib, rx_kib)
        self.attack_rows: list[tuple] = []  # (t_ns, action, detail)

    # -- recording ------------------------------------------------------------

    def record_submit(self, tx: Transaction, node: int, outcome: Outcome) -> None:
        self.submissions.append(
            (tx.submit_time, tx.id, tx.account, tx.nonce, node, outcome.value))
        if tx.id not in self.submit_time:
            self.submit_time[tx.id] = tx.submit_time
        if outcome is Outcome.ACCEPTED:
            self.accepted += 1

    def record_commit(self, tx_id: int, at: int, round_no: int = -1) -> None:
        if tx_id in self.commit_time:
            raise AssertionError(f"double commit of tx {tx_id}")
        submit = self.submit_time.get(tx_id)
        if submit is None:
            raise AssertionError(f"commit of unknown tx {tx_id}")
        if at < submit:
            raise AssertionError(f"tx {tx_id} committed before submission")
        self.commit_time[tx_id] = at
        self.commit_round[tx_id] = round_no

    def record_bandwidth(self, t_ns: int, rows) -> None:
        for node, peer, tx_rate, rx_rate in rows:
            self.bandwidth_rows.append((t_ns, node, peer, tx_rate, rx_rate))

    def record_attack(self, t_ns: int, action: str, detail: str) -> None:
        self.attack_rows.append((t_ns, action, detail))

    # -- series ---------------------------------------------------------------

    def throughput_series(self, horizon_s: int) -> list[tuple[int, float]]:
        """(t, commits in (t-2s, t] / 2s) for t = 1..horizon."""
        times = sorted(self.commit_time.values())
        samples = []
        lo = hi = 0
        for t in range(1, horizon_s + 1):
            t_ns = t * SEC
            lo_ns = t_ns - THROUGHPUT_WINDOW_S * SEC
            while hi < len(times) and times[hi] <= t_ns:
                hi += 1
            while lo < len(times) and times[lo] <= lo_ns:
                lo += 1
            samples.append((t, (hi - lo) / THROUGHPUT_WINDOW_S))
        return samples

    def latency_bins(self, horizon_s: int) -> list[dict]:
        """Per 10 s commit-time bin: nearest-rank percentiles, explicit gaps."""
        bins: dict[int, list[int]] = {}
        for tx_id, at in self.commit_time.items():
            bins.setdefault(at // (LATENCY_BIN_S * SEC), []).append(
                at - self.submit_time[tx_id])
        out = []
        for b in range(0, math.ceil(horizon_s / LATENCY_BIN_S)):
            lat = sorted(bins.get(b, ()))
            row = {"bin_start_s": b * LATENCY_BIN_S, "count": len(lat)}
            for q in PERCENTILES:
                row[f"p{q}"] = nearest_rank(lat, q) / SEC if lat else None
            out.append(row)
        return out

    def latency_overall(self) -> dict[str, Optional[float]]:
        lat = sorted(self.commit_time[t] - self.submit_time[t]
                     for t in self.commit_time)
        out = {}
        for q in PERCENTILES:
            out[f"p{q}"] = nearest_rank(lat, q) / SEC if lat else None
        return out

    def zero_gap_s(self, window_s: tuple[int, int], horizon_s: int) -> int:
        """Longest contiguous zero-throughput stretch inside the window."""
        start, end = window_s
        longest = current = 0
        for t, tps in self.throughput_series(horizon_s):
            if start < t <= end:
                if tps == 0.0:
                    current += 1
                    longest = max(longest, current)
                else:
                    current = 0
        return longest

    def recovery_time_s(self, attack_window_s: Optional[tuple[int, int]],
                        horizon_s: int) -> Optional[float]:
        """Seconds from attack end until throughput holds >= 90% of the
        pre-attack mean for 10 consecutive 1 s samples; None means never."""
        if attack_window_s is None:
            return 0.0
        start, end = attack_window_s
        series = self.throughput_series(horizon_s)
        baseline = [tps for t, tps in series if t <= start]
        if not baseline or sum(baseline) == 0:
            return 0.0
        threshold = RECOVERY_FRACTION * (sum(baseline) / len(baseline))
        run = 0
        for t, tps in series:
            if t <= end:
                continue
            run = run + 1 if tps >= threshold else 0
            if run >= RECOVERY_HOLD_S:
                return float(t - RECOVERY_HOLD_S - end)
        return None

    # -- summary + artifacts ---------------------------------------------------

    def summary(self, horizon_s: int, attack_window_s, node_tx_totals,
                extra: Optional[dict] = None) -> dict:
        submitted = len({row[1] for row in self.submissions})
        committed = len(self.commit_time)
        total_tx = sum(node_tx_totals.values())
        shares = {str(node): (b / total_tx if total_tx else 0.0)
                  for node, b in sorted(node_tx_totals.items())}
        recovery = self.recovery_time_s(attack_window_s, horizon_s)
        out = {
            "submitted": submitted,
            "accepted": self.accepted,
            "committed": committed,
            "commit_ratio": committed / submitted if submitted else 0.0,
            "latency_s": self.latency_overall(),
            "recovery_time_s": recovery,
            "recovered": recovery is not None,
            "zero_gap_s": (self.zero_gap_s(attack_window_s, horizon_s)
                           if attack_window_s else 0),
            "node_tx_share": shares,
        }
        if extra:
            out.update(extra)
        return out

    def write_artifacts(self, outdir: Path, horizon_s: int, summary: dict) -> None:
        outdir.mkdir(parents=True, exist_ok=True)
        with open(outdir / "submissions.csv", "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["t_s", "tx_id", "account", "nonce", "target", "outcome"])
            for t_ns, tx_id, account, nonce, target, outcome in self.submissions:
                w.writerow([f"{t_ns / SEC:.3f}", tx_id, account, nonce, target,
                            outcome])
        with open(outdir / "commits.csv", "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["t_s", "tx_id", "commit_round"])
            for tx_id in sorted(self.commit_time, key=lambda t: (self.commit_time[t], t)):
                w.writerow([f"{self.commit_time[tx_id] / SEC:.3f}", tx_id,
                            self.commit_round[tx_id]])
        with open(outdir / "throughput.csv", "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["t_s", "tps"])
            for t, tps in self.throughput_series(horizon_s):
                w.writerow([t, f"{tps:.1f}"])
        with open(outdir / "latency_bins.csv", "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["bin_start_s", "p50", "p90", "p95", "p99", "count"])
            for row in self.latency_bins(horizon_s):
                w.writerow([row["bin_start_s"]]
                           + [("" if row[f"p{q}"] is None else f"{row[f'p{q}']:.3f}")
                              for q in PERCENTILES]
                           + [row["count"]])
        with open(outdir / "bandwidth.csv", "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["t_s", "node", "peer", "tx_kib_s", "rx_kib_s"])
            for t_ns, node, peer, tx_rate, rx_rate in self.bandwidth_rows:
                w.writerow([f"{t_ns / SEC:.3f}", node, peer, f"{tx_rate:.3f}",
                            f"{rx_rate:.3f}"])
        with open(outdir / "attack_trace.csv", "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["t_s", "action", "detail"])
            for t_ns, action, detail in self.attack_rows:
                w.writerow([f"{t_ns / SEC:.3f}", action, detail])
        with open(outdir / "summary.json", "w") as f:
            json.dump(summary, f, indent=2, sort_keys=True)
            f.write("\n")
