"""LACP protocol machinery.

The wire codec and the per-port machines (receive, periodic transmit, mux)
are pure functions over frozen dataclasses: each takes a context and
returns a new context plus whatever it wants the caller to do. The
simulator owns the clock and every timer.

:class:`AggregationControl` is the thin stateful driver that runs those
steps for all ports of one system, re-runs selection when needed and
reports PDUs to send and aggregator bindings to apply.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Iterable, Optional, Sequence, Union

from .core import (
    NO_PORT,
    LagKey,
    MacAddress,
    Micros,
    PortIdentity,
    SystemId,
    parse_mac,
)

LACPDU_LENGTH = 110
SLOW_PROTOCOLS_MAC = parse_mac("01:80:c2:00:00:02")

FAST_PERIOD: Micros = 1_000_000
SLOW_PERIOD: Micros = 30_000_000
SHORT_TIMEOUT: Micros = 3 * FAST_PERIOD
LONG_TIMEOUT: Micros = 3 * SLOW_PERIOD

_SUBTYPE_LACP = 0x01
_VERSION = 0x01
_TLV_ACTOR, _TLV_PARTNER, _TLV_COLLECTOR, _TLV_TERMINATOR = 0x01, 0x02, 0x03, 0x00
_INFO_LEN, _COLLECTOR_LEN = 0x14, 0x10

_PEER = "BBH6sHHHB3x"
_LAYOUT = struct.Struct("!BB" + _PEER + _PEER + "BBH12x" + "BB50x")
assert _LAYOUT.size == LACPDU_LENGTH

# (offset, expected type, expected length) for each TLV header
_TLV_HEADERS = (
    (2, _TLV_ACTOR, _INFO_LEN),
    (22, _TLV_PARTNER, _INFO_LEN),
    (42, _TLV_COLLECTOR, _COLLECTOR_LEN),
    (58, _TLV_TERMINATOR, 0),
)


class LacpduError(ValueError):
    pass


class FrameLengthError(LacpduError):
    def __init__(self, length: int):
        self.length = length
        super().__init__(f"LACPDU must be {LACPDU_LENGTH} octets, got {length}")


class NotLacpError(LacpduError):
    def __init__(self, subtype: int):
        self.subtype = subtype
        super().__init__(f"slow-protocol subtype 0x{subtype:02x} is not LACP")


class MalformedPduError(LacpduError):
    def __init__(self, offset: int, reason: str):
        self.offset = offset
        super().__init__(f"malformed LACPDU at offset {offset}: {reason}")


_STATE_BITS = (
    "lacp_activity",
    "lacp_timeout",
    "aggregation",
    "synchronization",
    "collecting",
    "distributing",
    "defaulted",
    "expired",
)


@dataclass(frozen=True)
class LacpPortState:
    lacp_activity: bool = False
    # True requests the short timeout (fast periodic transmission)
    lacp_timeout: bool = False
    aggregation: bool = False
    synchronization: bool = False
    collecting: bool = False
    distributing: bool = False
    defaulted: bool = False
    expired: bool = False

    def to_octet(self) -> int:
        octet = 0
        for bit, name in enumerate(_STATE_BITS):
            if getattr(self, name):
                octet |= 1 << bit
        return octet

    @classmethod
    def from_octet(cls, octet: int) -> LacpPortState:
        return cls(**{name: bool(octet >> bit & 1) for bit, name in enumerate(_STATE_BITS)})


@dataclass(frozen=True)
class PeerInfo:
    system: SystemId
    key: LagKey
    port: PortIdentity
    state: LacpPortState

    def same_identity(self, other: PeerInfo) -> bool:
        return (self.system, self.key, self.port) == (other.system, other.key, other.port)


DEFAULT_PARTNER = PeerInfo(
    system=SystemId(0, MacAddress((0,) * 6)),
    key=LagKey(0),
    port=NO_PORT,
    state=LacpPortState(defaulted=True),
)


@dataclass(frozen=True)
class Lacpdu:
    actor: PeerInfo
    partner: PeerInfo
    # units of tens of microseconds
    collector_max_delay: int = 0


def encode_lacpdu(pdu: Lacpdu) -> bytes:
    def peer_fields(tlv_type: int, info: PeerInfo):
        return (
            tlv_type,
            _INFO_LEN,
            info.system.priority,
            info.system.address.to_bytes(),
            info.key.value,
            info.port.priority,
            info.port.number,
            info.state.to_octet(),
        )

    return _LAYOUT.pack(
        _SUBTYPE_LACP,
        _VERSION,
        *peer_fields(_TLV_ACTOR, pdu.actor),
        *peer_fields(_TLV_PARTNER, pdu.partner),
        _TLV_COLLECTOR,
        _COLLECTOR_LEN,
        pdu.collector_max_delay,
        _TLV_TERMINATOR,
        0,
    )


def decode_lacpdu(wire: bytes) -> Lacpdu:
    if len(wire) != LACPDU_LENGTH:
        raise FrameLengthError(len(wire))
    if wire[0] != _SUBTYPE_LACP:
        raise NotLacpError(wire[0])
    if wire[1] != _VERSION:
        raise MalformedPduError(1, f"unsupported version {wire[1]}")
    for offset, tlv_type, length in _TLV_HEADERS:
        if wire[offset] != tlv_type:
            raise MalformedPduError(offset, f"TLV type {wire[offset]:#04x}, expected {tlv_type:#04x}")
        if wire[offset + 1] != length:
            raise MalformedPduError(offset + 1, f"TLV length {wire[offset + 1]:#04x}, expected {length:#04x}")

    fields = _LAYOUT.unpack(wire)

    def peer(chunk) -> PeerInfo:
        _, _, sys_prio, sys_mac, key, port_prio, port_num, state = chunk
        return PeerInfo(
            system=SystemId(sys_prio, MacAddress.from_bytes(sys_mac)),
            key=LagKey(key),
            port=PortIdentity(port_prio, port_num),
            state=LacpPortState.from_octet(state),
        )

    return Lacpdu(actor=peer(fields[2:10]), partner=peer(fields[10:18]), collector_max_delay=fields[20])


# --- per-port machines -------------------------------------------------------


class PortEvent(Enum):
    TIMER_EXPIRY = "timer-expiry"
    LINK_DOWN = "link-down"
    LINK_UP = "link-up"


class LacpAction(Enum):
    NOTIFY_SELECTION = "notify-selection"
    ATTACH = "attach"
    DETACH = "detach"
    ENABLE_COLLECTING = "enable-collecting"
    ENABLE_DISTRIBUTING = "enable-distributing"


@dataclass(frozen=True)
class PortContext:
    my_info: PeerInfo
    partner_view: PeerInfo = DEFAULT_PARTNER
    # absolute deadline of the current_while timer; None when stopped
    current_while: Optional[Micros] = None
    periodic_due: Micros = 0
    selected_aggregator: Optional[int] = None
    link_up: bool = True
    # need-to-transmit: our state changed and the partner should hear about it
    ntt: bool = False

    @property
    def port(self) -> PortIdentity:
        return self.my_info.port

    @property
    def defaulted(self) -> bool:
        return self.my_info.state.defaulted

    @property
    def partner_in_sync(self) -> bool:
        return not self.defaulted and self.partner_view.state.synchronization


def initial_port_context(
    system: SystemId,
    key: LagKey,
    port: PortIdentity,
    *,
    active: bool = True,
    short_timeout: bool = True,
    now: Micros = 0,
) -> PortContext:
    if port.is_null:
        raise ValueError("aggregation ports need a nonzero port number")
    state = LacpPortState(
        lacp_activity=active,
        lacp_timeout=short_timeout,
        aggregation=True,
        defaulted=True,
    )
    return PortContext(my_info=PeerInfo(system, key, port, state), periodic_due=now)


def _timeout_window(ctx: PortContext) -> Micros:
    return SHORT_TIMEOUT if ctx.my_info.state.lacp_timeout else LONG_TIMEOUT


def _with_state(ctx: PortContext, **changes) -> PeerInfo:
    return replace(ctx.my_info, state=replace(ctx.my_info.state, **changes))



def _reset_to_defaulted(ctx: PortContext, *, expired: bool) -> tuple[PortContext, list[LacpAction]]:
    st = ctx.my_info.state
    was_bound = st.synchronization or st.collecting or st.distributing
    my_info = _with_state(
        ctx,
        synchronization=False,
        collecting=False,
        distributing=False,
        defaulted=True,
        expired=expired,
    )
    new = replace(
        ctx,
        my_info=my_info,
        partner_view=DEFAULT_PARTNER,
        current_while=None,
        selected_aggregator=None,
        ntt=True,
    )
    actions = [LacpAction.DETACH] if was_bound else []
    actions.append(LacpAction.NOTIFY_SELECTION)
    return new, actions


_NTT_STATE_BITS = ("lacp_activity", "lacp_timeout", "aggregation", "synchronization")


def receive_step(
    ctx: PortContext,
    event: Union[Lacpdu, PortEvent],
    now: Micros,
) -> tuple[PortContext, list[LacpAction]]:
    """Receive machine: record a partner PDU or react to timer/link events."""
    if event is PortEvent.LINK_DOWN:
        new, actions = _reset_to_defaulted(ctx, expired=False)
        return replace(new, link_up=False, ntt=False), actions

    if event is PortEvent.LINK_UP:
        if ctx.link_up:
            return ctx, []
        return replace(ctx, link_up=True, periodic_due=now, ntt=True), []

    if event is PortEvent.TIMER_EXPIRY:
        if ctx.current_while is None or now < ctx.current_while:
            return ctx, []
        # expired and defaulted collapse into one step so a silent partner is
        # written off within a single timeout window
        return _reset_to_defaulted(ctx, expired=True)

    pdu = event
    if not ctx.link_up:
        return ctx, []

    mine = ctx.my_info
    their_view = pdu.partner
    matched = their_view.same_identity(mine)
    partner_state = pdu.actor.state
    if not matched and partner_state.synchronization:
        # the partner is in sync with somebody else's idea of us
        partner_state = replace(partner_state, synchronization=False)
    partner = replace(pdu.actor, state=partner_state)

    stale_view = not matched or any(
        getattr(their_view.state, b) != getattr(mine.state, b) for b in _NTT_STATE_BITS
    )
    identity_changed = ctx.defaulted or not partner.same_identity(ctx.partner_view)

    periodic_due = ctx.periodic_due
    if partner.state.lacp_timeout:
        periodic_due = min(periodic_due, now + FAST_PERIOD)

    new = replace(
        ctx,
        my_info=_with_state(ctx, defaulted=False, expired=False),
        partner_view=partner,
        current_while=now + _timeout_window(ctx),
        periodic_due=periodic_due,
        ntt=ctx.ntt or stale_view,
    )
    actions = []
    if identity_changed:
        new = replace(new, selected_aggregator=None)
        actions.append(LacpAction.NOTIFY_SELECTION)
    return new, actions


def periodic_step(ctx: PortContext, now: Micros) -> tuple[PortContext, Optional[Lacpdu]]:
    """Periodic transmission; also flushes a pending need-to-transmit."""
    if not ctx.link_up:
        return ctx, None
    if not (ctx.my_info.state.lacp_activity or ctx.partner_view.state.lacp_activity):
        return ctx, None
    due = now >= ctx.periodic_due
    if not (due or ctx.ntt):
        return ctx, None
    interval = FAST_PERIOD if ctx.partner_view.state.lacp_timeout else SLOW_PERIOD
    partner = ctx.partner_view
    if ctx.defaulted:
        partner = replace(DEFAULT_PARTNER, state=LacpPortState())
    pdu = Lacpdu(actor=ctx.my_info, partner=partner)
    new = replace(
        ctx,
        periodic_due=now + interval if due else ctx.periodic_due,
        ntt=False,
    )
    return new, pdu


def mux_step(ctx: PortContext) -> tuple[PortContext, list[LacpAction]]:
    """Advance the mux by at most one transition.

    Bring-up runs attach, then collecting, then distributing, one per call.
    Losing selection or partner sync tears everything down in a single call
    so distributing => collecting => synchronization always holds.
    """
    st = ctx.my_info.state
    selected = ctx.selected_aggregator is not None and ctx.link_up

    if not selected or (st.collecting and not ctx.partner_in_sync):
        if st.synchronization or st.collecting or st.distributing:
            info = _with_state(ctx, synchronization=False, collecting=False, distributing=False)
            return replace(ctx, my_info=info, ntt=True), [LacpAction.DETACH]
        return ctx, []

    if not st.synchronization:
        return replace(ctx, my_info=_with_state(ctx, synchronization=True), ntt=True), [LacpAction.ATTACH]
    if not ctx.partner_in_sync:
        return ctx, []
    if not st.collecting:
        return replace(ctx, my_info=_with_state(ctx, collecting=True), ntt=True), [LacpAction.ENABLE_COLLECTING]
    if not st.distributing:
        return replace(ctx, my_info=_with_state(ctx, distributing=True), ntt=True), [LacpAction.ENABLE_DISTRIBUTING]
    return ctx, []


# --- selection ---------------------------------------------------------------


@dataclass(frozen=True)
class Selection:
    assignment: dict[PortIdentity, int]
    # eligible ports left without an aggregator because groups outnumber aggregators
    unbound: tuple[PortIdentity, ...] = ()


def _selectable(ctx: PortContext) -> bool:
    return ctx.link_up and not ctx.defaulted


def select_aggregators(ports: Iterable[PortContext], aggregators: Sequence[int]) -> Selection:
    """Bind ports that share (actor key, partner system, partner key) to one aggregator.

    Ports that are down or still defaulted are not selectable and appear in
    neither field of the result.
    """
    if not aggregators:
        raise ValueError("select_aggregators needs at least one aggregator id")
    eligible = sorted((c for c in ports if _selectable(c)), key=lambda c: c.port)
    groups: dict[tuple, list[PortIdentity]] = {}
    for ctx in eligible:
        if ctx.my_info.state.aggregation and ctx.partner_view.state.aggregation:
            gkey = (ctx.my_info.key, ctx.partner_view.system, ctx.partner_view.key)
        else:
            gkey = ("individual", ctx.port)
        groups.setdefault(gkey, []).append(ctx.port)

    free = sorted(aggregators)
    assignment: dict[PortIdentity, int] = {}
    unbound: list[PortIdentity] = []
    # dict preserves insertion order, i.e. groups ordered by their lowest port
    for members in groups.values():
        if free:
            agg = free.pop(0)
            for p in members:
                assignment[p] = agg
        else:
            unbound.extend(members)
    return Selection(assignment, tuple(unbound))


# --- per-system driver -------------------------------------------------------


@dataclass
class ControlOutput:
    pdus: list[tuple[PortIdentity, Lacpdu]] = field(default_factory=list)
    # (port, aggregator id, action); the aggregator id is where the action applies
    actions: list[tuple[PortIdentity, int, LacpAction]] = field(default_factory=list)

    def extend(self, other: ControlOutput) -> None:
        self.pdus.extend(other.pdus)
        self.actions.extend(other.actions)


class AggregationControl:
    """Runs the LACP machines for every aggregation port of one system."""

    def __init__(
        self,
        system: SystemId,
        key: LagKey,
        ports: Sequence[PortIdentity],
        aggregator_ids: Sequence[int] = (1,),
        *,
        active: bool = True,
        short_timeout: bool = True,
        now: Micros = 0,
    ):
        self.system = system
        self.aggregator_ids = tuple(aggregator_ids)
        self.contexts: dict[PortIdentity, PortContext] = {
            p: initial_port_context(system, key, p, active=active, short_timeout=short_timeout, now=now)
            for p in sorted(ports)
        }
        self._bound: dict[PortIdentity, int] = {}
        self.unbound: tuple[PortIdentity, ...] = ()

    def context(self, port: PortIdentity) -> PortContext:
        return self.contexts[port]

    def start(self, now: Micros) -> ControlOutput:
        return self._settle(now, reselect=True)

    def receive(self, port: PortIdentity, event: Union[Lacpdu, PortEvent], now: Micros) -> ControlOutput:
        ctx, actions = receive_step(self.contexts[port], event, now)
        self.contexts[port] = ctx
        out = ControlOutput()
        if LacpAction.DETACH in actions:
            out.extend(self._detach(port))
        return self._settle(now, reselect=LacpAction.NOTIFY_SELECTION in actions, out=out)

    def tick(self, now: Micros) -> ControlOutput:
        """Fire whichever current_while timers and periodic transmissions are due."""
        out = ControlOutput()
        reselect = False
        for port, ctx in list(self.contexts.items()):
            if ctx.current_while is not None and now >= ctx.current_while:
                ctx, actions = receive_step(ctx, PortEvent.TIMER_EXPIRY, now)
                self.contexts[port] = ctx
                if LacpAction.DETACH in actions:
                    out.extend(self._detach(port))
                reselect |= LacpAction.NOTIFY_SELECTION in actions
        return self._settle(now, reselect=reselect, out=out)

    def next_deadline(self) -> Optional[Micros]:
        times = []
        for ctx in self.contexts.values():
            if ctx.current_while is not None:
                times.append(ctx.current_while)
            if ctx.link_up and (ctx.my_info.state.lacp_activity or ctx.partner_view.state.lacp_activity):
                times.append(ctx.periodic_due)
        return min(times) if times else None

    def _detach(self, port: PortIdentity) -> ControlOutput:
        out = ControlOutput()
        agg = self._bound.pop(port, None)
        if agg is not None:
            out.actions.append((port, agg, LacpAction.DETACH))
        return out

    def _settle(self, now: Micros, *, reselect: bool, out: Optional[ControlOutput] = None) -> ControlOutput:
        out = out or ControlOutput()
        if reselect:
            selection = select_aggregators(self.contexts.values(), self.aggregator_ids)
            self.unbound = selection.unbound
            # drop stale bindings first so a port never moves while attached
            for port, ctx in self.contexts.items():
                want = selection.assignment.get(port)
                if ctx.selected_aggregator is not None and ctx.selected_aggregator != want:
                    self.contexts[port] = replace(ctx, selected_aggregator=None)
            self._run_mux(out)
            for port, agg in selection.assignment.items():
                self.contexts[port] = replace(self.contexts[port], selected_aggregator=agg)
        self._run_mux(out)
        for port, ctx in self.contexts.items():
            ctx, pdu = periodic_step(ctx, now)
            self.contexts[port] = ctx
            if pdu is not None:
                out.pdus.append((port, pdu))
        return out

    def _run_mux(self, out: ControlOutput) -> None:
        for port in self.contexts:
            while True:
                ctx, actions = mux_step(self.contexts[port])
                self.contexts[port] = ctx
                if not actions:
                    break
                for action in actions:
                    if action is LacpAction.ATTACH:
                        self._bound[port] = ctx.selected_aggregator
                        out.actions.append((port, ctx.selected_aggregator, action))
                    elif action is LacpAction.DETACH:
                        out.extend(self._detach(port))
                    else:
                        out.actions.append((port, self._bound[port], action))
