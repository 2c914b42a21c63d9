"""Named experiments: build a world, drive traffic, kill a link, measure."""

from __future__ import annotations

import statistics
from dataclasses import dataclass, field, fields, replace
from typing import Any, Optional

from .aggregator import Remap, hash_select
from .controller import FlowEntry
from .core import ConfigurationError, ConversationId, MacAddress, Micros, PortIdentity, format_seconds, to_micros
from .metrics import (
    NOT_RECOVERED,
    RTT,
    THROUGHPUT,
    AnomalyReport,
    FailoverDelay,
    FairnessVerdict,
    MetricSample,
    anomaly_scan,
    failover_delay,
    fairness_check,
    is_disturbed,
    steady_rate,
)
from .lacp import SHORT_TIMEOUT
from .simnet import (
    SCENARIO_ACTION,
    BandwidthMode,
    TopologySpec,
    World,
    WorldEvent,
    build_topology,
    bulk_generator,
    ping_generator,
    run,
    schedule_link_kill,
)

INJECT_MODES = ("none", "duplicate-on-reforward")
PING_START = 0.5
BULK_START = 1.0

PRESETS: dict[str, dict[str, Any]] = {
    "topo2": dict(links=2, clients=3, kill_link=1, kill_at=30.0, duration=60.0),
    "topo8": dict(links=8, clients=8, kill_link=1, kill_at=30.0, duration=60.0),
    "custom": dict(kill_link=None),
}


@dataclass(frozen=True)
class ScenarioParams:
    links: int = 2
    clients: int = 3
    kill_link: Optional[int] = None
    kill_at: float = 30.0
    duration: float = 60.0
    mode: BandwidthMode = BandwidthMode.PER_LINK
    inject: str = "none"
    inject_count: int = 1
    seed: int = 0
    pings: bool = True
    ping_interval: float = 0.1
    bulk: bool = False
    # client names that carry bulk traffic; None means every client
    bulk_clients: Optional[tuple[str, ...]] = None
    demand: Optional[float] = None
    detection: str = "first"
    poll_interval: float = 0.1
    link_capacity: int = 10_000_000
    client_macs: Optional[tuple[MacAddress, ...]] = None
    keep_trace: bool = False

    def __post_init__(self):
        try:
            object.__setattr__(self, "mode", BandwidthMode(self.mode))
        except ValueError:
            raise ConfigurationError(f"mode: unknown bandwidth mode {self.mode!r}") from None
        if self.kill_link == 0:
            object.__setattr__(self, "kill_link", None)
        if self.duration <= 0:
            raise ConfigurationError("duration: must be > 0")
        if self.kill_link is not None:
            if not 1 <= self.kill_link <= self.links:
                raise ConfigurationError(f"kill_link: must be in 1..{self.links}")
            if not 0 < self.kill_at < self.duration:
                raise ConfigurationError("kill_at: must fall inside (0, duration)")
        if self.inject not in INJECT_MODES:
            raise ConfigurationError(f"inject: unknown mode {self.inject!r}")
        if self.inject_count < 1:
            raise ConfigurationError("inject_count: must be >= 1")
        if not 0 <= self.seed < 2**64:
            raise ConfigurationError("seed: must fit in 64 unsigned bits")
        if self.ping_interval <= 0:
            raise ConfigurationError("ping_interval: must be > 0")
        if self.demand is not None and self.demand <= 0:
            raise ConfigurationError("demand: must be > 0")

    @property
    def ping_stop(self) -> float:
        # late enough that every request is answered or declared lost before the end
        return self.duration - 10 * self.ping_interval


@dataclass(frozen=True)
class PingCounts:
    sent: int
    answered: int
    lost: int
    duplicate_replies: int
    late_replies: int


@dataclass
class ScenarioReport:
    name: str = "custom"
    params: ScenarioParams = field(default_factory=ScenarioParams)
    rtt: dict[str, list[MetricSample]] = field(default_factory=dict)
    throughput: dict[str, list[MetricSample]] = field(default_factory=dict)
    failover: dict[str, FailoverDelay] = field(default_factory=dict)
    remapped_hosts: tuple[str, ...] = ()
    disturbed_hosts: tuple[str, ...] = ()
    duplicate_count: int = 0
    reorder_count: int = 0
    loss_count: int = 0
    ping_counts: dict[str, PingCounts] = field(default_factory=dict)
    flows_before: list[FlowEntry] = field(default_factory=list)
    flows_after: list[FlowEntry] = field(default_factory=list)
    events: list[WorldEvent] = field(default_factory=list)
    remaps: list[Remap] = field(default_factory=list)
    anomaly: AnomalyReport = field(default_factory=lambda: AnomalyReport(0, 0, False))
    injected_duplicates: int = 0
    fairness: Optional[FairnessVerdict] = None
    detection_complete: Optional[Micros] = None
    failover_bound: float = 0.0
    digest: str = ""
    world: Optional[World] = field(default=None, repr=False, compare=False)

    # --- summary ---------------------------------------------------------

    def claim_statuses(self) -> list[tuple[str, str, str]]:
        """(claim, status, detail) for the four headline claims."""
        return [self._claim_equal_rate(), self._claim_link_rate(), self._claim_failover(), self._claim_anomalies()]

    def _claim_equal_rate(self):
        claim = "every connection gets a roughly equal rate and its own link"
        v = self.fairness
        if v is None:
            return claim, "NOT-EXERCISED", "no bulk traffic"
        rates = list(v.rates.values())
        mean = sum(rates) / len(rates)
        equal = all(abs(r - mean) <= 0.05 * mean for r in rates)
        exclusive = v.mode == "shared" or not v.collisions
        return claim, "PASS" if equal and exclusive else "FAIL", v.describe()

    def _claim_link_rate(self):
        claim = "each connection's rate matches the single-link rate"
        v = self.fairness
        if v is None:
            return claim, "NOT-EXERCISED", "no bulk traffic"
        if v.mode == "per-link":
            return claim, "PASS" if v.passed else "FAIL", v.describe()
        status = "REPRODUCED-UNDER-INJECTION" if v.passed and len(v.rates) > 1 else "FAIL"
        return claim, status, "shared capacity model: " + v.describe()

    def _claim_failover(self):
        claim = "failover disturbs the re-forwarded connections and every connection recovers"
        if self.params.kill_link is None:
            return claim, "NOT-EXERCISED", "no link killed"
        remapped = set(self.remapped_hosts)
        disturbed = set(self.disturbed_hosts)
        recovered = all(d.recovered for d in self.failover.values())
        ok = remapped <= disturbed and recovered and self._all_end_normal()
        others = sorted(disturbed - remapped)
        detail = (
            f"remapped={','.join(sorted(remapped)) or '-'} "
            f"surviving hosts disturbed={','.join(others) or 'none'}"
        )
        return claim, "PASS" if ok else "FAIL", detail

    def _all_end_normal(self) -> bool:
        kill = self.params.kill_at
        for series in self.rtt.values():
            answered = [s for s in series if not s.lost]
            pre = [s.value for s in answered if s.time < to_micros(kill)]
            if not pre or not answered:
                continue
            median = statistics.median(pre)
            last = series[-1]
            if last.lost or last.value > 2 * median:
                return False
        return True

    def _claim_anomalies(self):
        claim = "periodic delay bursts and duplicate frames appear at the server"
        a = self.anomaly
        detail = f"duplicates={a.duplicate_count} reorders={a.reorder_count} periodic_bursts={a.periodic_burst_flag}"
        if self.params.inject == "none":
            clean = a.duplicate_count == 0 and not a.periodic_burst_flag
            return claim, "PASS" if clean else "FAIL", "absent without injection; " + detail
        if self.injected_duplicates == 0:
            return claim, "NOT-EXERCISED", "injection armed but no conversation was re-forwarded; " + detail
        status = "REPRODUCED-UNDER-INJECTION" if a.duplicate_count == self.injected_duplicates else "FAIL"
        return claim, status, f"injected={self.injected_duplicates} " + detail

    def summary_text(self) -> str:
        p = self.params
        lines = [
            f"scenario: {self.name}",
            f"seed: {p.seed}",
            f"links: {p.links} clients: {p.clients} mode: {p.mode.value} inject: {p.inject} detection: {p.detection}",
            f"duration: {p.duration:g} s",
        ]
        if p.kill_link is not None:
            lines.append(f"kill: lag{p.kill_link} at {p.kill_at:g} s")
            done = "-" if self.detection_complete is None else format_seconds(self.detection_complete)
            lines.append(f"detection complete: {done}")
            lines.append(f"failover bound: {self.failover_bound:.6f} s")
            for host in sorted(self.failover):
                lines.append(f"failover delay {host}: {self.failover[host]}")
        for host in sorted(self.ping_counts):
            c = self.ping_counts[host]
            lines.append(
                f"pings {host}: sent={c.sent} answered={c.answered} lost={c.lost} "
                f"duplicate_replies={c.duplicate_replies} late_replies={c.late_replies}"
            )
        lines.append(
            f"duplicates: {self.duplicate_count} reorders: {self.reorder_count} losses: {self.loss_count}"
        )
        if self.digest:
            lines.append(f"trace digest: {self.digest}")
        for i, (claim, status, detail) in enumerate(self.claim_statuses(), start=1):
            lines.append(f"claim {i}: {status}: {claim} ({detail})")
        return "\n".join(lines) + "\n"


def scenario_params(name: str, **overrides) -> ScenarioParams:
    if name not in PRESETS:
        raise ConfigurationError(f"scenario: unknown name {name!r}")
    known = {f.name for f in fields(ScenarioParams)}
    unknown = set(overrides) - known
    if unknown:
        raise ConfigurationError(f"unknown parameter(s): {', '.join(sorted(unknown))}")
    values = {**PRESETS[name], **{k: v for k, v in overrides.items() if v is not None}}
    return ScenarioParams(**values)


def _snapshot(world: World, store: dict) -> None:
    store["before"] = world.controller.flow_table_dump()


def execute(name: str, params: ScenarioParams) -> ScenarioReport:
    spec = TopologySpec(
        lag_width=params.links,
        client_count=params.clients,
        link_capacity=params.link_capacity,
        bandwidth_mode=params.mode,
        poll_interval=params.poll_interval,
        detection=params.detection,
        client_macs=params.client_macs,
    )
    inject = params.inject_count if params.inject != "none" else 0
    world = build_topology(spec, params.seed, keep_trace=params.keep_trace, inject_duplicates=inject)
    rng = world.rng
    interval_us = to_micros(params.ping_interval)
    for client in world.clients:
        offset = rng.randrange(interval_us)
        if params.pings:
            ping_generator(world, client, interval=params.ping_interval,
                           start=PING_START + offset / 1e6, stop=params.ping_stop)
    bulk_names = params.bulk_clients if params.bulk_clients is not None else tuple(c.name for c in world.clients)
    if params.bulk:
        for name_ in bulk_names:
            jitter = rng.randrange(1000)
            bulk_generator(world, name_, demand=params.demand, start=BULK_START + jitter / 1e6,
                           stop=params.duration)

    snapshots: dict[str, list[FlowEntry]] = {}
    if params.kill_link is not None:
        world.loop.schedule(to_micros(params.kill_at), SCENARIO_ACTION, _snapshot, world, snapshots,
                            detail="snapshot flows")
        schedule_link_kill(world, params.kill_link, params.kill_at)
    trace = run(world, params.duration)
    flows_after = world.controller.flow_table_dump()
    return _build_report(name, params, world, snapshots.get("before", flows_after), flows_after, trace.digest(),
                         bulk_names if params.bulk else ())


def run_scenario(name: str, params: Optional[ScenarioParams] = None, **overrides) -> ScenarioReport:
    """Run a named scenario. ``overrides`` replace fields of the preset."""
    if params is None:
        params = scenario_params(name, **overrides)
    elif overrides:
        params = replace(params, **overrides)
    if name not in PRESETS:
        raise ConfigurationError(f"scenario: unknown name {name!r}")
    return execute(name, params)


def _rtt_series(world: World) -> tuple[dict[str, list[MetricSample]], dict[str, PingCounts]]:
    series, counts = {}, {}
    server = world.server.mac
    for name, gen in sorted(world.pings.items()):
        conv = ConversationId(gen.client.mac, server)
        samples = []
        for seq in sorted(gen.records):
            rec = gen.records[seq]
            flags = set(rec.flags)
            if rec.reply_at is None:
                flags.add("lost")
            if rec.duplicate_replies:
                flags.add("duplicate")
            value = None if rec.reply_at is None else rec.rtt / 1e6
            samples.append(MetricSample(rec.sent_at, conv, RTT, value, frozenset(flags), seq))
        series[name] = samples
        recs = gen.records.values()
        counts[name] = PingCounts(
            sent=len(gen.records),
            answered=sum(r.reply_at is not None for r in recs),
            lost=sum(r.reply_at is None for r in recs),
            duplicate_replies=sum(r.duplicate_replies for r in recs),
            late_replies=sum(r.late_replies for r in recs),
        )
    return series, counts


def _detection_complete(world: World, port: int) -> Optional[Micros]:
    host = switch = None
    for e in world.events:
        if host is None and e.kind == "lacp" and e.detail.endswith(f"port={port} detach"):
            host = e.time
        if switch is None and e.kind == "flow-delete-applied" and e.detail.startswith(f"port={port} "):
            switch = e.time
    for e in world.controller.events:
        if switch is None and e.kind == "member-disabled" and e.detail.startswith(f"port={port} "):
            switch = e.time + to_micros(world.spec.controller_delay)
    if host is None or switch is None:
        return None
    return max(host, switch)


def _build_report(name, params, world, flows_before, flows_after, digest, bulk_names) -> ScenarioReport:
    duration_us = to_micros(params.duration)
    rtt, counts = _rtt_series(world)
    server = world.server.mac
    throughput = {
        c.name: [
            MetricSample(t, ConversationId(server, c.mac), THROUGHPUT, float(v))
            for t, v in world.meter.series(c.name, duration_us)
        ]
        for c in world.clients
    }
    anomaly = anomaly_scan(world.flagged, rtt)

    remapped: list[str] = []
    disturbed: list[str] = []
    failover: dict[str, FailoverDelay] = {}
    detection = None
    bound = 0.0
    if params.kill_link is not None:
        k = params.kill_link
        moved_macs = {e.match_src for e in flows_before if e.out_port == k and e.match_src is not None}
        moved_macs |= {r.conversation.dst for r in world.server.remaps
                       if r.old_port is not None and r.old_port.number == k}
        kill_us = to_micros(params.kill_at)
        for client in world.clients:
            series = rtt.get(client.name, [])
            if client.mac in moved_macs:
                remapped.append(client.name)
            usable = series and any(s.time < kill_us and not s.lost for s in series) and series[-1].time >= kill_us
            if not usable:
                continue
            if is_disturbed(series, params.kill_at):
                disturbed.append(client.name)
            if client.name in remapped or client.name in disturbed:
                failover[client.name] = failover_delay(series, params.kill_at)
        detection = _detection_complete(world, k)
        ctl_rtt = 2 * world.spec.controller_delay
        bound = params.poll_interval + SHORT_TIMEOUT / 1e6 + 2 * ctl_rtt

    fairness = None
    if bulk_names:
        hi = params.kill_at if params.kill_link is not None else params.duration
        lo = BULK_START + 1.0
        ports = [PortIdentity(0xFF, n) for n in range(1, params.links + 1)]
        try:
            rates = {n: steady_rate(throughput[n], lo, hi - 1.0) for n in bulk_names}
        except ConfigurationError:
            rates = None
        if rates:
            flow_ports = {
                n: hash_select(ConversationId(server, world.client(n).mac), ports).number for n in bulk_names
            }
            fairness = fairness_check(rates, params.mode, params.link_capacity, flow_ports)

    events = sorted(
        list(world.events) + [WorldEvent(e.time, e.kind, e.detail) for e in world.controller.events],
        key=lambda e: e.time,
    )
    return ScenarioReport(
        name=name,
        params=params,
        rtt=rtt,
        throughput=throughput,
        failover=failover,
        remapped_hosts=tuple(remapped),
        disturbed_hosts=tuple(disturbed),
        duplicate_count=anomaly.duplicate_count,
        reorder_count=anomaly.reorder_count,
        loss_count=sum(c.lost for c in counts.values()),
        ping_counts=counts,
        flows_before=flows_before,
        flows_after=flows_after,
        events=events,
        remaps=list(world.server.remaps),
        anomaly=anomaly,
        injected_duplicates=sum(i.count for i in world.controller.injected),
        fairness=fairness,
        detection_complete=detection,
        failover_bound=bound,
        digest=digest,
        world=world,
    )
