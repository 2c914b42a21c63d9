"""Deterministic discrete-event simulation of the aggregated-link testbed.

One bonded server (h1) reaches one switch (s1) over ``lag_width``
aggregated links; every client (h2, h3, ...) hangs off the switch on its
own access link; a controller drives the switch over an in-simulator
channel with a fixed one-way delay.

Events run in (time, seq) order with seq assigned at scheduling time, so a
run is a pure function of the topology, the scenario actions and the seed.
Public entry points take seconds; everything inside runs on integer
microseconds.
"""

from __future__ import annotations

import hashlib
import heapq
import random
from collections import deque
from dataclasses import dataclass, field, fields
from enum import Enum
from pathlib import Path
from typing import Any, Callable, Optional, Sequence, Union

from .aggregator import Aggregator, CollectorState, Delivery, NoDistributingPortError, Remap
from .controller import Controller, FlowAdd, FlowDelete, FlowEntry, PacketOut
from .core import (
    ConfigurationError,
    ConversationId,
    Frame,
    FrameKind,
    LagKey,
    MacAddress,
    Micros,
    PortIdentity,
    SequenceAllocator,
    SimulationError,
    SystemId,
    format_seconds,
    mac_from_int,
    parse_mac,
    to_micros,
)
from .lacp import (
    LACPDU_LENGTH,
    SHORT_TIMEOUT,
    SLOW_PROTOCOLS_MAC,
    AggregationControl,
    ControlOutput,
    LacpAction,
    LacpduError,
    PortEvent,
    decode_lacpdu,
    encode_lacpdu,
)
from .monitor import LinkMonitor, LinkState

FRAME_ARRIVAL = "frame-arrival"
TIMER = "timer"
LINK_TRANSITION = "link-transition"
TRAFFIC_TICK = "traffic-tick"
SCENARIO_ACTION = "scenario-action"

BULK_PAYLOAD = 1500
PING_PAYLOAD = 64
DEFAULT_SYSTEM_PRIORITY = 0x8000
HOST_PORT_PRIORITY = 0x00FF

SERVER_MAC = parse_mac("00:00:00:00:00:11")
SWITCH_SYSTEM_MAC = parse_mac("02:00:00:00:fe:00")


class BandwidthMode(str, Enum):
    PER_LINK = "per-link"
    SHARED = "shared"


def canonical_client_mac(host_number: int) -> MacAddress:
    """h2 -> 00:..:22, h3 -> 00:..:33, ... h9 -> 00:..:99."""
    if 2 <= host_number <= 15:
        return mac_from_int(host_number * 0x11)
    return mac_from_int(0x0200 + host_number)


@dataclass(frozen=True)
class TopologySpec:
    lag_width: int = 2
    client_count: int = 3
    link_capacity: int = 10_000_000  # bits per second
    link_delay: float = 0.001  # seconds, one way
    bandwidth_mode: BandwidthMode = BandwidthMode.PER_LINK
    poll_interval: float = 0.1
    controller_delay: float = 0.001
    access_capacity_factor: int = 10
    queue_limit: int = 1000
    detection: str = "first"
    client_macs: Optional[tuple[MacAddress, ...]] = None

    def __post_init__(self):
        def bad(name, why):
            raise ConfigurationError(f"{name}: {why}")

        if self.lag_width < 1:
            bad("lag_width", "must be >= 1")
        if self.client_count < 1:
            bad("client_count", "must be >= 1")
        if self.link_capacity <= 0:
            bad("link_capacity", "must be > 0")
        if self.link_delay < 0:
            bad("link_delay", "must be >= 0")
        if self.poll_interval <= 0:
            bad("poll_interval", "must be > 0")
        if self.controller_delay < 0:
            bad("controller_delay", "must be >= 0")
        if self.access_capacity_factor <= 0:
            bad("access_capacity_factor", "must be > 0")
        if self.queue_limit < 1:
            bad("queue_limit", "must be >= 1")
        if self.detection not in ("first", "mii", "lacp"):
            bad("detection", f"unknown mode {self.detection!r}")
        try:
            object.__setattr__(self, "bandwidth_mode", BandwidthMode(self.bandwidth_mode))
        except ValueError:
            bad("bandwidth_mode", f"unknown mode {self.bandwidth_mode!r}")
        if self.client_macs is not None:
            macs = tuple(m if isinstance(m, MacAddress) else parse_mac(m) for m in self.client_macs)
            if len(macs) != self.client_count:
                bad("client_macs", f"needs {self.client_count} addresses, got {len(macs)}")
            if len(set(macs)) != len(macs) or SERVER_MAC in macs:
                bad("client_macs", "addresses must be distinct and differ from the server")
            object.__setattr__(self, "client_macs", macs)

    def client_mac(self, index: int) -> MacAddress:
        if self.client_macs is not None:
            return self.client_macs[index]
        return canonical_client_mac(index + 2)


def load_topology_spec(path: Union[str, Path]) -> TopologySpec:
    """Read a ``key = value`` file (``#`` comments) into a TopologySpec."""
    types = {f.name: f.type for f in fields(TopologySpec)}
    values: dict[str, Any] = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"{path}:{lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in types:
            raise ConfigurationError(f"{path}:{lineno}: unknown key {key!r}")
        try:
            if key in ("lag_width", "client_count", "link_capacity", "access_capacity_factor", "queue_limit"):
                values[key] = int(float(value))
            elif key in ("link_delay", "poll_interval", "controller_delay"):
                values[key] = float(value)
            elif key == "client_macs":
                values[key] = tuple(parse_mac(v.strip()) for v in value.split(",") if v.strip())
            else:
                values[key] = value
        except ValueError as exc:
            raise ConfigurationError(f"{key}: {exc}") from exc
    return TopologySpec(**values)


# --- event loop --------------------------------------------------------------


@dataclass(frozen=True)
class TraceRecord:
    time: Micros
    seq: int
    kind: str
    detail: str

    def line(self) -> str:
        return f"{format_seconds(self.time)} {self.seq} {self.kind} {self.detail}"


class Trace:
    """Executed-event log. Always keeps a running digest; keeps records on request."""

    def __init__(self, keep_records: bool = True):
        self.keep_records = keep_records
        self.records: list[TraceRecord] = []
        self.count = 0
        self._hash = hashlib.sha256()

    def append(self, record: TraceRecord) -> None:
        self.count += 1
        self._hash.update(record.line().encode())
        self._hash.update(b"\n")
        if self.keep_records:
            self.records.append(record)

    def digest(self) -> str:
        return self._hash.hexdigest()

    def __len__(self) -> int:
        return self.count

    def lines(self) -> list[str]:
        return [r.line() for r in self.records]


class EventLoop:
    def __init__(self, keep_trace: bool = True):
        self.now: Micros = 0
        self._heap: list = []
        self._seq = 0
        self.trace = Trace(keep_trace)

    def schedule(self, at: Micros, kind: str, fn: Callable, *args, detail: str = "") -> None:
        if at < self.now:
            raise SimulationError(f"{kind} event at {at} scheduled in the past (now {self.now})")
        self._seq += 1
        heapq.heappush(self._heap, (at, self._seq, kind, detail, fn, args))

    def schedule_in(self, delay: Micros, kind: str, fn: Callable, *args, detail: str = "") -> None:
        self.schedule(self.now + delay, kind, fn, *args, detail=detail)

    def run(self, until: Micros) -> Trace:
        heap = self._heap
        while heap and heap[0][0] <= until:
            at, seq, kind, detail, fn, args = heapq.heappop(heap)
            self.now = at
            self.trace.append(TraceRecord(at, seq, kind, detail))
            fn(*args)
        self.now = max(self.now, until)
        return self.trace


# --- links -------------------------------------------------------------------


class Transmitter:
    """Serializes frames at ``capacity`` bits/s behind a drop-tail queue.

    In shared bandwidth mode one transmitter serves every aggregated link in
    a direction, so all of them draw from a single pooled capacity.
    """

    def __init__(self, capacity: int, queue_limit: int, shared: bool = False):
        self.capacity = int(capacity)
        self.queue_limit = queue_limit
        self.shared = shared
        self.busy_until: Micros = 0
        self._finishes: deque[Micros] = deque()

    def serialization_time(self, bits: int) -> Micros:
        return -(-bits * 1_000_000 // self.capacity)

    def backlog(self, now: Micros) -> int:
        while self._finishes and self._finishes[0] <= now:
            self._finishes.popleft()
        return len(self._finishes)

    def reserve(self, now: Micros, bits: int) -> Optional[Micros]:
        if self.backlog(now) >= self.queue_limit:
            return None
        finish = max(now, self.busy_until) + self.serialization_time(bits)
        self.busy_until = finish
        self._finishes.append(finish)
        return finish

    def reset(self, now: Micros) -> None:
        self._finishes.clear()
        self.busy_until = now


class Channel:
    """One direction of a link."""

    def __init__(self, link: Link, src: Node, src_port: int, dst: Node, dst_port: int, tx: Transmitter):
        self.link = link
        self.src, self.src_port = src, src_port
        self.dst, self.dst_port = dst, dst_port
        self.tx = tx
        # transmission id -> (frame, time the hop started)
        self.in_flight: dict[int, tuple[Frame, Micros]] = {}
        # every transmission attempt, including ones dropped on a dead link
        self.sent: list[tuple[Micros, Frame]] = []
        # (arrival time, wire bits, hop start time)
        self.delivered: list[tuple[Micros, int, Micros]] = []

    @property
    def name(self) -> str:
        return f"{self.link.id}:{self.src.name}>{self.dst.name}"


class Link:
    def __init__(self, link_id: str, a: Node, a_port: int, b: Node, b_port: int,
                 tx_ab: Transmitter, tx_ba: Transmitter, delay: Micros, aggregated: bool = False):
        self.id = link_id
        self.delay = delay
        self.aggregated = aggregated
        self.state = LinkState.UP
        self._prev_state = LinkState.UP
        self._changed_at: Optional[Micros] = None
        self.channels = {
            a.name: Channel(self, a, a_port, b, b_port, tx_ab),
            b.name: Channel(self, b, b_port, a, a_port, tx_ba),
        }
        a.port_links[a_port] = self
        b.port_links[b_port] = self

    def channel_from(self, node: Node) -> Channel:
        return self.channels[node.name]

    def set_state(self, state: LinkState, now: Micros) -> None:
        if self._changed_at != now:
            self._prev_state = self.state
            self._changed_at = now
        self.state = state

    def observed_state(self, now: Micros) -> LinkState:
        """State as a poller sees it: a transition at instant t shows only after t."""
        if self._changed_at == now:
            return self._prev_state
        return self.state


@dataclass
class FrameCounters:
    sent: int = 0
    delivered: int = 0
    dropped_dead: int = 0
    dropped_queue: int = 0


@dataclass(frozen=True)
class FlaggedDelivery:
    time: Micros
    host: str
    conversation: ConversationId
    seq: int
    flags: frozenset[str]


# --- nodes -------------------------------------------------------------------


class Node:
    def __init__(self, world: World, name: str):
        self.world = world
        self.name = name
        self.port_links: dict[int, Link] = {}

    def receive(self, frame: Frame, port: int) -> None:
        raise NotImplementedError


@dataclass
class HostStats:
    misdelivered: int = 0
    lacpdus_seen: int = 0
    malformed_pdus: int = 0
    dropped_not_collecting: int = 0
    dropped_no_port: int = 0
    duplicates_discarded: int = 0


class ClientHost(Node):
    PORT = 1

    def __init__(self, world: World, name: str, mac: MacAddress):
        super().__init__(world, name)
        self.mac = mac
        self.collector = CollectorState()
        self.seq = SequenceAllocator()
        self.stats = HostStats()
        self.ping: Optional[PingGenerator] = None

    def send(self, frame: Frame) -> Optional[Micros]:
        return self.world.transmit(self, self.PORT, frame)

    def receive(self, frame: Frame, port: int) -> None:
        if frame.kind is FrameKind.LACPDU or frame.dst == SLOW_PROTOCOLS_MAC:
            self.stats.lacpdus_seen += 1
            return
        if frame.dst != self.mac:
            self.stats.misdelivered += 1
            return
        for d in self.collector.collect(frame, PortIdentity(HOST_PORT_PRIORITY, port)):
            self.world.record_delivery(self.name, d)
            self.world.meter.record(self.name, self.world.now, d.frame.bits)
            if d.frame.kind is FrameKind.ECHO_REPLY and self.ping is not None:
                self.ping.on_reply(d, self.world.now)


class BondedServer(Node):
    """The server: LACP active on every bond port, one aggregator."""

    def __init__(self, world: World, name: str, mac: MacAddress, lag_width: int):
        super().__init__(world, name)
        self.mac = mac
        self.ports = [PortIdentity(HOST_PORT_PRIORITY, n) for n in range(1, lag_width + 1)]
        self.port_macs = {p.number: mac_from_int(0x0200_0000_0100 + p.number) for p in self.ports}
        self.control = AggregationControl(
            SystemId(DEFAULT_SYSTEM_PRIORITY, mac), LagKey(1), self.ports, (1,), active=True, short_timeout=True
        )
        self.aggregator = Aggregator(1, mac)
        self.collector = CollectorState()
        self.seq = SequenceAllocator()
        self.stats = HostStats()
        self.remaps: list[Remap] = []
        self.monitor: Optional[LinkMonitor] = None
        self._wakeups: set[Micros] = set()

    def _port(self, number: int) -> PortIdentity:
        return PortIdentity(HOST_PORT_PRIORITY, number)

    def start(self) -> None:
        self._apply(self.control.start(self.world.now))

    def send(self, frame: Frame) -> Optional[Micros]:
        try:
            port, frame = self.aggregator.distribute(frame)
        except NoDistributingPortError:
            self.stats.dropped_no_port += 1
            return None
        return self.world.transmit(self, port.number, frame)

    def receive(self, frame: Frame, port: int) -> None:
        now = self.world.now
        if frame.dst == SLOW_PROTOCOLS_MAC:
            try:
                pdu = decode_lacpdu(frame.payload)
            except LacpduError:
                self.stats.malformed_pdus += 1
                return
            self._apply(self.control.receive(self._port(port), pdu, now))
            return
        if frame.dst != self.mac:
            self.stats.misdelivered += 1
            return
        pid = self._port(port)
        if not self.aggregator.is_collecting(pid):
            self.stats.dropped_not_collecting += 1
            return
        for d in self.collector.collect(frame, pid):
            self.world.record_delivery(self.name, d)
            if d.frame.kind is FrameKind.ECHO_REQUEST:
                if d.duplicate:
                    self.stats.duplicates_discarded += 1
                    continue
                self._reply(d.frame)

    def on_link_transition(self, port: int, state: LinkState) -> None:
        event = PortEvent.LINK_DOWN if state is LinkState.DOWN else PortEvent.LINK_UP
        self._apply(self.control.receive(self._port(port), event, self.world.now))

    def _reply(self, request: Frame) -> None:
        conv = ConversationId(self.mac, request.src)
        reply = Frame(
            src=self.mac,
            dst=request.src,
            seq=self.seq.next(conv),
            payload_len=request.payload_len,
            sent_at=self.world.now,
            kind=FrameKind.ECHO_REPLY,
            echo_seq=request.seq,
        )
        self.send(reply)

    def _apply(self, out: ControlOutput) -> None:
        now = self.world.now
        agg = self.aggregator
        for port, _agg_id, action in out.actions:
            remaps: list[Remap] = []
            if action is LacpAction.ATTACH:
                agg.attach(port)
            elif action is LacpAction.ENABLE_COLLECTING:
                agg.enable_collecting(port)
            elif action is LacpAction.ENABLE_DISTRIBUTING:
                remaps = agg.on_port_state_change(port, True, now)
            elif action is LacpAction.DETACH:
                remaps = agg.detach(port, now)
            self.world.note("lacp", f"host={self.name} port={port.number} {action.value}")
            for r in remaps:
                self.remaps.append(r)
                self.world.note("remap", ",".join(r.csv_row()[1:]))
        for port, pdu in out.pdus:
            src = self.port_macs[port.number]
            frame = Frame(
                src=src,
                dst=SLOW_PROTOCOLS_MAC,
                seq=self.seq.next(ConversationId(src, SLOW_PROTOCOLS_MAC)),
                payload_len=LACPDU_LENGTH,
                sent_at=now,
                kind=FrameKind.LACPDU,
                payload=encode_lacpdu(pdu),
            )
            self.world.transmit(self, port.number, frame)
        deadline = self.control.next_deadline()
        if deadline is not None:
            deadline = max(deadline, now)
            if deadline not in self._wakeups:
                self._wakeups.add(deadline)
                self.world.loop.schedule(deadline, TIMER, self._wake, deadline, detail=f"{self.name} lacp")

    def _wake(self, deadline: Micros) -> None:
        self._wakeups.discard(deadline)
        self._apply(self.control.tick(self.world.now))


class Switch(Node):
    def __init__(self, world: World, name: str):
        super().__init__(world, name)
        self.flow_table: dict[tuple, FlowEntry] = {}
        self.port_macs: dict[int, MacAddress] = {}

    def lookup(self, frame: Frame) -> Optional[FlowEntry]:
        return self.flow_table.get((frame.src, frame.dst)) or self.flow_table.get((None, frame.dst))

    def receive(self, frame: Frame, port: int) -> None:
        if frame.dst == SLOW_PROTOCOLS_MAC:
            self.world.packet_in(port, frame)
            return
        entry = self.lookup(frame)
        if entry is None:
            self.world.packet_in(port, frame)
        elif entry.out_port != port:
            self.world.transmit(self, entry.out_port, frame)

    def apply(self, actions: list) -> None:
        for action in actions:
            if isinstance(action, FlowAdd):
                self.flow_table[action.entry.match] = action.entry
            elif isinstance(action, FlowDelete):
                doomed = [k for k, e in self.flow_table.items() if e.out_port == action.out_port]
                for k in doomed:
                    del self.flow_table[k]
                self.world.note("flow-delete-applied", f"port={action.out_port} flows={len(doomed)}")
            elif isinstance(action, PacketOut):
                self.world.transmit(self, action.port, action.frame)


# --- traffic -----------------------------------------------------------------


@dataclass
class PingRecord:
    seq: int
    sent_at: Micros
    reply_at: Optional[Micros] = None
    lost: bool = False
    duplicate_replies: int = 0
    late_replies: int = 0
    flags: set[str] = field(default_factory=set)

    @property
    def rtt(self) -> Optional[Micros]:
        return None if self.reply_at is None else self.reply_at - self.sent_at


class PingGenerator:
    """Echo requests every ``interval``; a request is lost after 10 intervals without reply."""

    LOSS_FACTOR = 10

    def __init__(self, world: World, client: ClientHost, server_mac: MacAddress,
                 interval: Micros, start: Micros, stop: Micros):
        if interval <= 0:
            raise ConfigurationError("interval: must be > 0")
        self.world = world
        self.client = client
        self.server_mac = server_mac
        self.interval = interval
        self.stop = stop
        self.records: dict[int, PingRecord] = {}
        client.ping = self
        world.loop.schedule(start, TRAFFIC_TICK, self._tick, detail=f"ping {client.name}")

    @property
    def timeout(self) -> Micros:
        return self.LOSS_FACTOR * self.interval

    def _tick(self) -> None:
        now = self.world.now
        if now >= self.stop:
            return
        conv = ConversationId(self.client.mac, self.server_mac)
        seq = self.client.seq.next(conv)
        frame = Frame(self.client.mac, self.server_mac, seq, PING_PAYLOAD, now, FrameKind.ECHO_REQUEST)
        self.records[seq] = PingRecord(seq, now)
        self.client.send(frame)
        loop = self.world.loop
        loop.schedule_in(self.timeout, TIMER, self._expire, seq, detail=f"ping-timeout {self.client.name}")
        if now + self.interval < self.stop:
            loop.schedule_in(self.interval, TRAFFIC_TICK, self._tick, detail=f"ping {self.client.name}")

    def _expire(self, seq: int) -> None:
        rec = self.records[seq]
        if rec.reply_at is None:
            rec.lost = True

    def on_reply(self, delivery: Delivery, now: Micros) -> None:
        rec = self.records.get(delivery.frame.echo_seq)
        if rec is None:
            return
        rec.flags |= delivery.flags
        if rec.reply_at is not None or delivery.duplicate:
            rec.duplicate_replies += 1
        elif rec.lost:
            rec.late_replies += 1
        else:
            rec.reply_at = now


class BulkSource:
    """Server-to-client bulk flow offered at ``demand`` bits/s.

    Back-pressure: a frame is only offered while fewer than ``window`` of this
    flow's frames are still waiting for the wire, so the achieved rate is
    set by the link rather than by queue drops.
    """

    def __init__(self, world: World, server: BondedServer, client_mac: MacAddress, demand: int,
                 start: Micros, stop: Micros, *, window: int = 4, payload: int = BULK_PAYLOAD, name: str = ""):
        if demand <= 0:
            raise ConfigurationError("demand: must be > 0")
        self.world = world
        self.server = server
        self.client_mac = client_mac
        self.stop = stop
        self.window = window
        self.payload = payload
        self.name = name or str(client_mac)
        frame_bits = Frame(server.mac, client_mac, 0, payload, 0, FrameKind.BULK).bits
        self.interval = max(1, -(-frame_bits * 1_000_000 // int(demand)))
        self.offered = 0
        self.skipped = 0
        self._pending: deque[Micros] = deque()
        world.loop.schedule(start, TRAFFIC_TICK, self._tick, detail=f"bulk {self.name}")

    def _tick(self) -> None:
        now = self.world.now
        if now >= self.stop:
            return
        while self._pending and self._pending[0] <= now:
            self._pending.popleft()
        if len(self._pending) < self.window:
            conv = ConversationId(self.server.mac, self.client_mac)
            frame = Frame(self.server.mac, self.client_mac, self.server.seq.next(conv),
                          self.payload, now, FrameKind.BULK)
            finish = self.server.send(frame)
            self.offered += 1
            if finish is not None:
                self._pending.append(finish)
        else:
            self.skipped += 1
        self.world.loop.schedule_in(self.interval, TRAFFIC_TICK, self._tick, detail=f"bulk {self.name}")


class ThroughputMeter:
    def __init__(self, window: Micros = 1_000_000):
        self.window = window
        self.bits: dict[str, dict[int, int]] = {}

    def record(self, host: str, now: Micros, bits: int) -> None:
        per_host = self.bits.setdefault(host, {})
        idx = now // self.window
        per_host[idx] = per_host.get(idx, 0) + bits

    def series(self, host: str, until: Micros) -> list[tuple[Micros, int]]:
        """(window_start, bits/s) for every complete window before ``until``."""
        per_host = self.bits.get(host, {})
        n = until // self.window
        scale = 1_000_000 / self.window
        return [(i * self.window, int(per_host.get(i, 0) * scale)) for i in range(n)]


# --- world -------------------------------------------------------------------


@dataclass(frozen=True)
class WorldEvent:
    time: Micros
    kind: str
    detail: str


class World:
    def __init__(self, spec: Optional[TopologySpec] = None, seed: int = 0, keep_trace: bool = True):
        self.spec = spec
        self.seed = seed
        self.rng = random.Random(seed)
        self.loop = EventLoop(keep_trace)
        self.links: dict[str, Link] = {}
        self.nodes: dict[str, Node] = {}
        self.server: Optional[BondedServer] = None
        self.switch: Optional[Switch] = None
        self.controller: Optional[Controller] = None
        self.clients: list[ClientHost] = []
        self.counters = FrameCounters()
        self.events: list[WorldEvent] = []
        self.flagged: list[FlaggedDelivery] = []
        self.meter = ThroughputMeter()
        self.pings: dict[str, PingGenerator] = {}
        self.bulk: dict[str, BulkSource] = {}
        self._tid = 0

    @property
    def now(self) -> Micros:
        return self.loop.now

    def note(self, kind: str, detail: str) -> None:
        self.events.append(WorldEvent(self.now, kind, detail))

    def record_delivery(self, host: str, d: Delivery) -> None:
        if d.duplicate or d.reordered:
            self.flagged.append(FlaggedDelivery(self.now, host, d.frame.conversation, d.frame.seq, d.flags))

    def client(self, name: str) -> ClientHost:
        node = self.nodes.get(name)
        if not isinstance(node, ClientHost):
            raise ConfigurationError(f"no client named {name!r}")
        return node

    def link(self, link_id: Union[str, int]) -> Link:
        key = f"lag{link_id}" if isinstance(link_id, int) else link_id
        if key not in self.links:
            raise ConfigurationError(f"unknown link {link_id!r}")
        return self.links[key]

    # frames

    def transmit(self, node: Node, port: int, frame: Frame) -> Optional[Micros]:
        link = node.port_links[port]
        ch = link.channel_from(node)
        now = self.now
        self.counters.sent += 1
        ch.sent.append((now, frame))
        if link.state is LinkState.DOWN:
            self.counters.dropped_dead += 1
            return None
        finish = ch.tx.reserve(now, frame.bits)
        if finish is None:
            self.counters.dropped_queue += 1
            return None
        self._tid += 1
        ch.in_flight[self._tid] = (frame, now)
        self.loop.schedule(finish + link.delay, FRAME_ARRIVAL, self._arrive, ch, self._tid,
                           detail=f"{ch.name} {frame.kind.value} {frame.seq}")
        return finish

    def _arrive(self, ch: Channel, tid: int) -> None:
        entry = ch.in_flight.pop(tid, None)
        if entry is None:
            return
        frame, started = entry
        self.counters.delivered += 1
        ch.delivered.append((self.now, frame.bits, started))
        ch.dst.receive(frame, ch.dst_port)

    def in_flight(self) -> int:
        return sum(len(ch.in_flight) for link in self.links.values() for ch in link.channels.values())

    # control channel

    def packet_in(self, port: int, frame: Frame) -> None:
        delay = to_micros(self.spec.controller_delay)
        self.loop.schedule_in(delay, FRAME_ARRIVAL, self._controller_packet_in, port, frame,
                              detail=f"ctl packet-in {port} {frame.kind.value}")

    def _controller_packet_in(self, port: int, frame: Frame) -> None:
        actions = self.controller.on_packet_in(port, frame, self.now)
        if frame.dst == SLOW_PROTOCOLS_MAC:
            self.loop.schedule_in(self.controller.timeout + 1, TIMER, self._controller_expire,
                                  detail="ctl lacp-timeout-check")
        self._to_switch(actions)

    def _controller_expire(self) -> None:
        self._to_switch(self.controller.expire_members(self.now))

    def _to_switch(self, actions: list) -> None:
        if actions:
            delay = to_micros(self.spec.controller_delay)
            self.loop.schedule_in(delay, FRAME_ARRIVAL, self.switch.apply, actions,
                                  detail=f"ctl to-switch {len(actions)}")

    def _port_status(self, port: int, up: bool) -> None:
        self._to_switch(self.controller.on_port_status(port, up, self.now))

    # link state

    def kill_link(self, link_id: Union[str, int]) -> None:
        link = self.link(link_id)
        if link.state is LinkState.DOWN:
            return
        link.set_state(LinkState.DOWN, self.now)
        for ch in link.channels.values():
            self.counters.dropped_dead += len(ch.in_flight)
            ch.in_flight.clear()
            if not ch.tx.shared:
                ch.tx.reset(self.now)
        self.note(LINK_TRANSITION, f"{link.id},down")

    def restore_link(self, link_id: Union[str, int]) -> None:
        link = self.link(link_id)
        if link.state is LinkState.UP:
            return
        link.set_state(LinkState.UP, self.now)
        self.note(LINK_TRANSITION, f"{link.id},up")

    def _poll(self, interval: Micros) -> None:
        server_events = self.server.monitor.poll_all(self.now)
        switch_events = self.switch_monitor.poll_all(self.now)
        for ev in server_events:
            self.note("monitor", f"{ev.link_id},{ev.new_state.value},side=host")
            if self.spec.detection != "lacp":
                self.server.on_link_transition(self.link(ev.link_id).channels[self.server.name].src_port,
                                               ev.new_state)
        for ev in switch_events:
            self.note("monitor", f"{ev.link_id},{ev.new_state.value},side=switch")
            port = self.link(ev.link_id).channels[self.switch.name].src_port
            delay = to_micros(self.spec.controller_delay)
            self.loop.schedule_in(delay, FRAME_ARRIVAL, self._port_status, port, ev.new_state is LinkState.UP,
                                  detail=f"ctl port-status {port}")
        self.loop.schedule_in(interval, TIMER, self._poll, interval, detail="mii-poll")

    def start(self) -> None:
        self.loop.schedule(self.now, TIMER, self.server.start, detail=f"{self.server.name} lacp-start")
        interval = to_micros(self.spec.poll_interval)
        self.loop.schedule(self.now + interval, TIMER, self._poll, interval, detail="mii-poll")


def _probe(world: World) -> Callable[[str, Micros], LinkState]:
    return lambda link_id, now: world.links[link_id].observed_state(now)


def build_topology(spec: TopologySpec, seed: int = 0, *, keep_trace: bool = True,
                   inject_duplicates: int = 0) -> World:
    """Server h1 bonded over ``lag_width`` links to s1, clients h2.. on access links."""
    if not isinstance(spec, TopologySpec):
        raise ConfigurationError("spec: expected a TopologySpec")
    world = World(spec, seed, keep_trace)
    delay = to_micros(spec.link_delay)
    cap = spec.link_capacity
    shared = spec.bandwidth_mode is BandwidthMode.SHARED

    server = BondedServer(world, "h1", SERVER_MAC, spec.lag_width)
    switch = Switch(world, "s1")
    world.server, world.switch = server, switch
    world.nodes.update({"h1": server, "s1": switch})

    pool_up = Transmitter(cap, spec.queue_limit, shared=True) if shared else None
    pool_down = Transmitter(cap, spec.queue_limit, shared=True) if shared else None
    lag_ports = []
    for i in range(1, spec.lag_width + 1):
        up = pool_up or Transmitter(cap, spec.queue_limit)
        down = pool_down or Transmitter(cap, spec.queue_limit)
        world.links[f"lag{i}"] = Link(f"lag{i}", server, i, switch, i, up, down, delay, aggregated=True)
        switch.port_macs[i] = mac_from_int(0x0200_0000_FE00 + i)
        lag_ports.append(i)

    access_cap = cap * spec.access_capacity_factor
    for k in range(spec.client_count):
        name = f"h{k + 2}"
        client = ClientHost(world, name, spec.client_mac(k))
        port = spec.lag_width + 1 + k
        world.links[f"acc-{name}"] = Link(
            f"acc-{name}", client, ClientHost.PORT, switch, port,
            Transmitter(access_cap, spec.queue_limit), Transmitter(access_cap, spec.queue_limit), delay,
        )
        switch.port_macs[port] = mac_from_int(0x0200_0000_FE00 + port)
        world.clients.append(client)
        world.nodes[name] = client

    world.controller = Controller(
        lag_ports,
        sorted(switch.port_macs),
        SystemId(DEFAULT_SYSTEM_PRIORITY, SWITCH_SYSTEM_MAC),
        switch.port_macs,
        timeout=SHORT_TIMEOUT,
        detection=spec.detection,
        inject_duplicates=inject_duplicates,
    )

    poll_us = to_micros(spec.poll_interval)
    server.monitor = LinkMonitor(_probe(world), poll_us)
    world.switch_monitor = LinkMonitor(_probe(world), poll_us)
    for i in lag_ports:
        server.monitor.watch(f"lag{i}")
        world.switch_monitor.watch(f"lag{i}")
    world.start()
    return world


def run(world: World, until: float) -> Trace:
    """Advance the world to ``until`` seconds and return the cumulative trace."""
    if until <= 0:
        raise ConfigurationError("until: must be > 0")
    return world.loop.run(to_micros(until))


def schedule_link_kill(world: World, link_id: Union[str, int], at: float) -> World:
    link = world.link(link_id)
    at_us = to_micros(at)
    if at_us < world.now:
        raise ConfigurationError(f"at: {at} is before the current time")
    world.loop.schedule(at_us, SCENARIO_ACTION, world.kill_link, link.id, detail=f"kill {link.id}")
    return world


def schedule_link_restore(world: World, link_id: Union[str, int], at: float) -> World:
    link = world.link(link_id)
    world.loop.schedule(to_micros(at), SCENARIO_ACTION, world.restore_link, link.id, detail=f"restore {link.id}")
    return world


def ping_generator(world: World, client: Union[str, ClientHost], server: Optional[BondedServer] = None,
                   interval: float = 0.1, *, start: float = 0.5, stop: Optional[float] = None) -> PingGenerator:
    host = world.client(client) if isinstance(client, str) else client
    server = server or world.server
    stop_us = to_micros(stop) if stop is not None else 2**62
    gen = PingGenerator(world, host, server.mac, to_micros(interval), to_micros(start), stop_us)
    world.pings[host.name] = gen
    return gen


def bulk_generator(world: World, client: Union[str, ClientHost], server: Optional[BondedServer] = None,
                   demand: Optional[float] = None, *, start: float = 1.0, stop: Optional[float] = None,
                   window: int = 4) -> BulkSource:
    host = world.client(client) if isinstance(client, str) else client
    server = server or world.server
    demand = demand if demand is not None else world.spec.link_capacity
    stop_us = to_micros(stop) if stop is not None else 2**62
    src = BulkSource(world, server, host.mac, int(demand), to_micros(start), stop_us,
                     window=window, name=host.name)
    world.bulk[host.name] = src
    return src
