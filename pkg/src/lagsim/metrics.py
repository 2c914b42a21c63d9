"""Measurements over finished runs: failover delay, fairness, anomalies, CSV reports."""

from __future__ import annotations

import csv
import statistics
from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING, Iterable, Mapping, Optional, Sequence, Union

from .controller import FLOW_CSV_HEADER, FlowEntry
from .core import ConfigurationError, ConversationId, LagError, Micros, format_seconds, to_micros

if TYPE_CHECKING:
    from .scenario import ScenarioReport

RTT = "rtt"
THROUGHPUT = "throughput"

NORMAL_FACTOR = 2.0
SPIKE_FACTOR = 5.0
MIN_BURSTS = 3
SPACING_TOLERANCE = 0.2
FAIRNESS_TOLERANCE = 0.05


class ReportWriteError(LagError, OSError):
    def __init__(self, path: Path, cause: OSError):
        super().__init__(f"cannot write report file {path}: {cause}")
        self.path = path


@dataclass(frozen=True)
class MetricSample:
    """One RTT or throughput observation.

    ``time`` is the request send time (RTT) or window start (throughput), in
    microseconds. ``value`` is seconds or bits per second; a lost ping has
    ``value=None`` and the ``lost`` flag.
    """

    time: Micros
    conversation: ConversationId
    metric: str
    value: Optional[float]
    flags: frozenset[str] = frozenset()
    seq: int = 0

    def __post_init__(self):
        if self.metric not in (RTT, THROUGHPUT):
            raise ConfigurationError(f"metric: unknown kind {self.metric!r}")
        if self.value is not None and self.value < 0:
            raise ConfigurationError(f"value: must be >= 0, got {self.value}")

    @property
    def lost(self) -> bool:
        return self.value is None


@dataclass(frozen=True)
class FailoverDelay:
    seconds: Optional[float]

    @property
    def recovered(self) -> bool:
        return self.seconds is not None

    def __str__(self) -> str:
        return "not recovered" if self.seconds is None else f"{self.seconds:.6f}"


NOT_RECOVERED = FailoverDelay(None)


def _median_before(series: Sequence[MetricSample], kill: Micros) -> float:
    pre = [s.value for s in series if s.time < kill and not s.lost]
    if not pre:
        raise ConfigurationError("series: no answered samples before the kill")
    return statistics.median(pre)


def failover_delay(series: Sequence[MetricSample], kill_time: float) -> FailoverDelay:
    """Time from ``kill_time`` until the first request whose RTT is normal again.

    A sample is normal when it was answered within twice the pre-kill median.
    If the very first post-kill sample is already normal the delay is 0.
    """
    if not series:
        raise ConfigurationError("series: must not be empty")
    kill = to_micros(kill_time)
    ordered = sorted(series, key=lambda s: s.time)
    if not ordered[0].time <= kill <= ordered[-1].time:
        raise ConfigurationError(f"kill_time: {kill_time} outside the series span")
    limit = NORMAL_FACTOR * _median_before(ordered, kill)
    after = [s for s in ordered if s.time >= kill]
    for i, s in enumerate(after):
        if not s.lost and s.value <= limit:
            return FailoverDelay(0.0 if i == 0 else (s.time - kill) / 1e6)
    return NOT_RECOVERED


def is_disturbed(series: Sequence[MetricSample], kill_time: float) -> bool:
    """True when some post-kill sample was lost or above twice the pre-kill median."""
    kill = to_micros(kill_time)
    limit = NORMAL_FACTOR * _median_before(series, kill)
    return any(s.lost or s.value > limit for s in series if s.time >= kill)


def steady_rate(series: Sequence[MetricSample], start: float, stop: float) -> float:
    """Mean bits/s over the windows that start in [start, stop)."""
    lo, hi = to_micros(start), to_micros(stop)
    vals = [s.value for s in series if lo <= s.time < hi]
    if not vals:
        raise ConfigurationError(f"no throughput windows in [{start}, {stop})")
    return sum(vals) / len(vals)


@dataclass(frozen=True)
class FairnessVerdict:
    passed: bool
    mode: str
    target: float
    rates: dict[str, float]
    failing: tuple[str, ...]
    collisions: tuple[tuple[int, tuple[str, ...]], ...] = ()

    def describe(self) -> str:
        head = "PASS" if self.passed else "FAIL"
        parts = [f"{head} mode={self.mode} target={self.target:.0f}b/s"]
        for name in sorted(self.rates):
            parts.append(f"{name}={self.rates[name]:.0f}")
        for port, flows in self.collisions:
            parts.append(f"collision port={port}: {'+'.join(flows)}")
        return " ".join(parts)


def fairness_check(
    rates: Mapping[str, float],
    mode: str,
    capacity: float,
    flow_ports: Optional[Mapping[str, int]] = None,
    tolerance: float = FAIRNESS_TOLERANCE,
) -> FairnessVerdict:
    """Check every flow against ``capacity`` (per-link) or ``capacity / N`` (shared).

    ``flow_ports`` maps each flow to the aggregated link it was hashed onto;
    flows that share a link are reported as collisions.
    """
    mode = str(getattr(mode, "value", mode))
    if mode not in ("per-link", "shared"):
        raise ConfigurationError(f"mode: unknown bandwidth mode {mode!r}")
    if not rates:
        raise ConfigurationError("rates: need at least one flow")
    target = capacity if mode == "per-link" else capacity / len(rates)
    failing = tuple(sorted(n for n, r in rates.items() if abs(r - target) > tolerance * target))
    by_port: dict[int, list[str]] = {}
    for name, port in (flow_ports or {}).items():
        by_port.setdefault(port, []).append(name)
    collisions = tuple((p, tuple(sorted(f))) for p, f in sorted(by_port.items()) if len(f) > 1)
    return FairnessVerdict(not failing, mode, target, dict(rates), failing, collisions)


@dataclass(frozen=True)
class AnomalyReport:
    duplicate_count: int
    reorder_count: int
    periodic_burst_flag: bool
    duplicate_conversations: tuple[ConversationId, ...] = ()
    reordered_conversations: tuple[ConversationId, ...] = ()
    burst_hosts: tuple[str, ...] = ()


def _burst_times(series: Sequence[MetricSample]) -> list[Micros]:
    answered = [s.value for s in series if not s.lost]
    if not answered:
        return []
    limit = SPIKE_FACTOR * statistics.median(answered)
    starts, inside = [], False
    for s in sorted(series, key=lambda s: s.time):
        spike = not s.lost and s.value > limit
        if spike and not inside:
            starts.append(s.time)
        inside = spike
    return starts


def periodic_bursts(series: Sequence[MetricSample]) -> bool:
    """At least three separate RTT spikes whose spacing varies by under 20%."""
    starts = _burst_times(series)
    if len(starts) < MIN_BURSTS:
        return False
    gaps = [b - a for a, b in zip(starts, starts[1:])]
    mean = sum(gaps) / len(gaps)
    return (max(gaps) - min(gaps)) / mean < SPACING_TOLERANCE


def anomaly_scan(deliveries: Iterable, rtt: Mapping[str, Sequence[MetricSample]] = None) -> AnomalyReport:
    """Count collector flags and look for periodic delay bursts.

    ``deliveries`` holds anything with ``conversation`` and ``flags``
    attributes (flagged collector deliveries or metric samples).
    """
    dup = reo = 0
    dup_convs: dict[ConversationId, None] = {}
    reo_convs: dict[ConversationId, None] = {}
    for d in deliveries:
        if "duplicate" in d.flags:
            dup += 1
            dup_convs.setdefault(d.conversation)
        if "reordered" in d.flags:
            reo += 1
            reo_convs.setdefault(d.conversation)
    hosts = tuple(sorted(h for h, series in (rtt or {}).items() if periodic_bursts(series)))
    return AnomalyReport(dup, reo, bool(hosts), tuple(dup_convs), tuple(reo_convs), hosts)


# --- report files ---------------------------------------------------------------

RTT_CSV_HEADER = ["time", "host", "seq", "rtt_s", "flags"]
THROUGHPUT_CSV_HEADER = ["window_start", "host", "bits_per_s"]
EVENTS_CSV_HEADER = ["time", "kind", "detail"]
REPORT_FILES = ("rtt.csv", "throughput.csv", "flows_before.csv", "flows_after.csv", "events.csv", "summary.txt")


def _flags(flags: Iterable[str]) -> str:
    return "|".join(sorted(flags))


def _write_csv(path: Path, header: list[str], rows: Iterable[list[str]]) -> None:
    try:
        with path.open("w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(header)
            writer.writerows(rows)
    except OSError as exc:
        raise ReportWriteError(path, exc) from exc


def _flow_rows(entries: Sequence[FlowEntry]) -> list[list[str]]:
    return [e.csv_row() for e in entries]


def write_report(report: ScenarioReport, path: Union[str, Path]) -> list[Path]:
    """Write the six report files under ``path`` and return their paths."""
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ReportWriteError(out, exc) from exc

    rtt_rows = []
    for host in sorted(report.rtt):
        for s in report.rtt[host]:
            value = "" if s.lost else format_seconds(round(s.value * 1e6))
            rtt_rows.append([format_seconds(s.time), host, str(s.seq), value, _flags(s.flags)])
    rtt_rows.sort(key=lambda r: (to_micros(float(r[0])), r[1], int(r[2])))

    tp_rows = []
    for host in sorted(report.throughput):
        for s in report.throughput[host]:
            tp_rows.append([format_seconds(s.time), host, str(int(s.value))])
    tp_rows.sort(key=lambda r: (to_micros(float(r[0])), r[1]))

    files = [out / name for name in REPORT_FILES]
    _write_csv(files[0], RTT_CSV_HEADER, rtt_rows)
    _write_csv(files[1], THROUGHPUT_CSV_HEADER, tp_rows)
    _write_csv(files[2], FLOW_CSV_HEADER, _flow_rows(report.flows_before))
    _write_csv(files[3], FLOW_CSV_HEADER, _flow_rows(report.flows_after))
    _write_csv(files[4], EVENTS_CSV_HEADER, ([format_seconds(e.time), e.kind, e.detail] for e in report.events))
    try:
        files[5].write_text(report.summary_text())
    except OSError as exc:
        raise ReportWriteError(files[5], exc) from exc
    return files
