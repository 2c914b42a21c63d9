"""Control-plane application for the switch in front of the bonded server.

The controller terminates LACPDUs as a passive responder, learns where
MAC addresses live, installs flow entries and, when a LAG member dies,
deletes the flows that pointed at it so traffic re-learns over the
surviving members (delete-and-relearn).

Frames toward the bonded server are pinned per conversation with the same
XOR hash the server uses, so a LAG flow matches on (src, dst) while every
other flow matches on dst alone.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

from .aggregator import hash_select
from .core import (
    ConversationId,
    Frame,
    FrameKind,
    LagKey,
    MacAddress,
    Micros,
    PortIdentity,
    SequenceAllocator,
    SystemId,
    format_seconds,
)
from .lacp import (
    LACPDU_LENGTH,
    SHORT_TIMEOUT,
    SLOW_PROTOCOLS_MAC,
    LacpduError,
    LacpPortState,
    Lacpdu,
    PeerInfo,
    decode_lacpdu,
    encode_lacpdu,
)

log = logging.getLogger(__name__)

# mac table marker for "behind the LAG"
LAG = "lag"

SWITCH_PORT_PRIORITY = 0x00FF


@dataclass(frozen=True)
class FlowEntry:
    match_dst: MacAddress
    out_port: int
    installed_at: Micros
    # None matches any source
    match_src: Optional[MacAddress] = None

    @property
    def match(self) -> tuple[Optional[MacAddress], MacAddress]:
        return (self.match_src, self.match_dst)

    def csv_row(self) -> list[str]:
        src = "" if self.match_src is None else str(self.match_src)
        return [str(self.match_dst), str(self.out_port), format_seconds(self.installed_at), src]


FLOW_CSV_HEADER = ["dst_mac", "out_port", "installed_at", "src_mac"]


@dataclass
class MemberState:
    enabled: bool = False
    last_rx: Optional[Micros] = None
    link_up: bool = True


@dataclass(frozen=True)
class FlowAdd:
    entry: FlowEntry


@dataclass(frozen=True)
class FlowDelete:
    out_port: int


@dataclass(frozen=True)
class PacketOut:
    port: int
    frame: Frame


Action = Union[FlowAdd, FlowDelete, PacketOut]


@dataclass(frozen=True)
class ControllerEvent:
    time: Micros
    kind: str
    detail: str


@dataclass(frozen=True)
class InjectedDuplicate:
    time: Micros
    conversation: ConversationId
    count: int


@dataclass
class ControllerStats:
    lacpdus_received: int = 0
    malformed_pdus: int = 0
    dropped_no_member: int = 0
    packet_ins: int = 0


class Controller:
    def __init__(
        self,
        lag_ports: Sequence[int],
        ports: Sequence[int],
        system: SystemId,
        port_macs: dict[int, MacAddress],
        *,
        timeout: Micros = SHORT_TIMEOUT,
        detection: str = "first",
        inject_duplicates: int = 0,
    ):
        if detection not in ("first", "mii", "lacp"):
            raise ValueError(f"unknown detection mode {detection!r}")
        self.lag_ports = tuple(sorted(lag_ports))
        self.ports = tuple(sorted(ports))
        self.system = system
        self.port_macs = port_macs
        self.timeout = timeout
        self.detection = detection
        self.inject_duplicates = inject_duplicates

        self.members: dict[int, MemberState] = {p: MemberState() for p in self.lag_ports}
        self.mac_table: dict[MacAddress, Union[int, str]] = {}
        self.flows: dict[tuple, FlowEntry] = {}
        self.pending_reforward: set[ConversationId] = set()
        self.injected: list[InjectedDuplicate] = []
        self.events: list[ControllerEvent] = []
        self.stats = ControllerStats()
        self._seq = SequenceAllocator()

    # --- queries ---------------------------------------------------------

    def enabled_members(self) -> list[int]:
        return [p for p, m in self.members.items() if m.enabled]

    def flow_table_dump(self) -> list[FlowEntry]:
        def key(e: FlowEntry):
            return (e.match_dst, e.match_src is not None, e.match_src or e.match_dst)

        return sorted(self.flows.values(), key=key)

    def lag_member_for(self, conversation: ConversationId) -> Optional[int]:
        members = self.enabled_members()
        if not members:
            return None
        ports = [PortIdentity(SWITCH_PORT_PRIORITY, p) for p in members]
        return hash_select(conversation, ports).number

    # --- events ----------------------------------------------------------

    def on_packet_in(self, port: int, frame: Frame, now: Micros) -> list[Action]:
        self.stats.packet_ins += 1
        if frame.kind is FrameKind.LACPDU or frame.dst == SLOW_PROTOCOLS_MAC:
            return self._on_lacpdu(port, frame, now)
        return self._on_data(port, frame, now)

    def on_member_timeout(self, port: int, now: Micros, reason: str = "lacp-timeout") -> list[Action]:
        member = self.members[port]
        if not member.enabled:
            return []
        member.enabled = False
        self._note(now, "member-disabled", f"port={port} reason={reason}")
        doomed = [e for e in self.flows.values() if e.out_port == port]
        for entry in doomed:
            del self.flows[entry.match]
            if entry.match_src is not None:
                self.pending_reforward.add(ConversationId(entry.match_src, entry.match_dst))
        if doomed:
            self._note(now, "flow-purge", f"port={port} flows={len(doomed)}")
            return [FlowDelete(port)]
        return []

    def on_port_status(self, port: int, up: bool, now: Micros) -> list[Action]:
        if port not in self.members:
            return []
        member = self.members[port]
        member.link_up = up
        self._note(now, "port-status", f"port={port} state={'up' if up else 'down'}")
        if not up and self.detection != "lacp":
            return self.on_member_timeout(port, now, reason="monitor")
        return []

    def expire_members(self, now: Micros) -> list[Action]:
        if self.detection == "mii":
            return []
        actions: list[Action] = []
        for port, member in self.members.items():
            if member.enabled and member.last_rx is not None and now - member.last_rx > self.timeout:
                actions += self.on_member_timeout(port, now, reason="lacp-timeout")
        return actions

    # --- internals -------------------------------------------------------

    def _note(self, now: Micros, kind: str, detail: str) -> None:
        self.events.append(ControllerEvent(now, kind, detail))
        log.debug("%s %s %s", format_seconds(now), kind, detail)

    def _on_lacpdu(self, port: int, frame: Frame, now: Micros) -> list[Action]:
        if port not in self.members:
            return []
        try:
            pdu = decode_lacpdu(frame.payload)
        except LacpduError:
            self.stats.malformed_pdus += 1
            return []
        self.stats.lacpdus_received += 1
        member = self.members[port]
        member.last_rx = now
        # the partner system id carries the bond's own address
        self.mac_table[pdu.actor.system.address] = LAG
        if not member.enabled and member.link_up:
            member.enabled = True
            self._note(now, "member-enabled", f"port={port}")

        on = member.enabled
        actor = PeerInfo(
            system=self.system,
            key=pdu.actor.key,
            port=PortIdentity(SWITCH_PORT_PRIORITY, port),
            state=LacpPortState(
                lacp_activity=False,
                lacp_timeout=pdu.actor.state.lacp_timeout,
                aggregation=True,
                synchronization=on,
                collecting=on,
                distributing=on,
            ),
        )
        reply = Lacpdu(actor=actor, partner=pdu.actor)
        src = self.port_macs[port]
        out = Frame(
            src=src,
            dst=SLOW_PROTOCOLS_MAC,
            seq=self._seq.next(ConversationId(src, SLOW_PROTOCOLS_MAC)),
            payload_len=LACPDU_LENGTH,
            sent_at=now,
            kind=FrameKind.LACPDU,
            payload=encode_lacpdu(reply),
        )
        return [PacketOut(port, out)]

    def _install(self, entry: FlowEntry) -> list[Action]:
        current = self.flows.get(entry.match)
        if current is not None and current.out_port == entry.out_port:
            return []
        self.flows[entry.match] = entry
        return [FlowAdd(entry)]

    def _on_data(self, port: int, frame: Frame, now: Micros) -> list[Action]:
        actions: list[Action] = []
        src, dst = frame.src, frame.dst
        if port in self.members:
            self.mac_table[src] = LAG
        else:
            self.mac_table[src] = port
            actions += self._install(FlowEntry(match_dst=src, out_port=port, installed_at=now))

        where = self.mac_table.get(dst)
        if where == LAG:
            conv = frame.conversation
            member = self.lag_member_for(conv)
            if member is None:
                self.stats.dropped_no_member += 1
                return actions
            actions += self._install(FlowEntry(match_dst=dst, out_port=member, installed_at=now, match_src=src))
            actions.append(PacketOut(member, frame))
            if conv in self.pending_reforward:
                self.pending_reforward.discard(conv)
                self._note(now, "flow-reforward", f"{conv} port={member}")
                if self.inject_duplicates:
                    actions += [PacketOut(member, frame)] * self.inject_duplicates
                    self.injected.append(InjectedDuplicate(now, conv, self.inject_duplicates))
                    self._note(now, "inject-duplicate", f"{conv} count={self.inject_duplicates}")
            return actions
        if where is None:
            return actions + self._flood(port, frame)
        if where != port:
            actions.append(PacketOut(where, frame))
        return actions

    def _flood(self, in_port: int, frame: Frame) -> list[Action]:
        # the LAG is one logical port: at most one member gets a flooded copy
        out = [PacketOut(p, frame) for p in self.ports if p not in self.members and p != in_port]
        if in_port not in self.members:
            member = self.lag_member_for(frame.conversation)
            if member is not None:
                out.append(PacketOut(member, frame))
        return out
