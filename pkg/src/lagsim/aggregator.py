"""Frame distribution and collection for one aggregator.

The default distribution policy hashes the XOR-fold of both MAC addresses
onto the distributing ports sorted by port number. Because the hash is
stateless, a conversation stays on one port for as long as the
distributing set does not change, and returns to its original port when
a failed port comes back.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Iterable, Optional, Protocol, Sequence, Union

from .core import ConversationId, Frame, LagError, MacAddress, Micros, PortIdentity, format_seconds


class NoDistributingPortError(LagError):
    pass


def fold_mac(mac: MacAddress) -> int:
    return mac.fold()


def conversation_hash(conversation: ConversationId) -> int:
    return fold_mac(conversation.src) ^ fold_mac(conversation.dst)


def hash_select(frame: Union[Frame, ConversationId], ports: Sequence[PortIdentity]) -> PortIdentity:
    """Pick the port for a frame (or conversation) by XOR-of-MAC hashing."""
    if not ports:
        raise NoDistributingPortError("no distributing port available")
    conversation = frame.conversation if isinstance(frame, Frame) else frame
    ordered = sorted(ports, key=lambda p: p.number)
    return ordered[conversation_hash(conversation) % len(ordered)]


class DistributionPolicy(Protocol):
    def select(self, frame: Frame, ports: Sequence[PortIdentity]) -> PortIdentity: ...


class XorPolicy:
    def select(self, frame: Frame, ports: Sequence[PortIdentity]) -> PortIdentity:
        return hash_select(frame, ports)


class RoundRobinPolicy:
    """Per-frame round robin. Spreads load perfectly but does not keep
    conversations on one port, so it can reorder frames; experiments only."""

    def __init__(self):
        self._next = 0

    def select(self, frame: Frame, ports: Sequence[PortIdentity]) -> PortIdentity:
        if not ports:
            raise NoDistributingPortError("no distributing port available")
        ordered = sorted(ports, key=lambda p: p.number)
        port = ordered[self._next % len(ordered)]
        self._next += 1
        return port


@dataclass(frozen=True)
class Remap:
    time: Micros
    conversation: ConversationId
    old_port: Optional[PortIdentity]
    new_port: Optional[PortIdentity]

    def csv_row(self) -> list[str]:
        def port(p):
            return "" if p is None else str(p.number)

        return [
            format_seconds(self.time),
            str(self.conversation.src),
            str(self.conversation.dst),
            port(self.old_port),
            port(self.new_port),
        ]


REMAP_CSV_HEADER = ["time", "conversation_src", "conversation_dst", "old_port", "new_port"]


class Aggregator:
    def __init__(
        self,
        agg_id: int,
        mac: MacAddress,
        policy: Optional[DistributionPolicy] = None,
    ):
        self.id = agg_id
        self.mac = mac
        self.policy = policy or XorPolicy()
        self._attached: set[PortIdentity] = set()
        self._collecting: set[PortIdentity] = set()
        self._distributing: set[PortIdentity] = set()
        # insertion-ordered record of every conversation this aggregator has sent
        self._observed: dict[ConversationId, None] = {}

    @property
    def attached_ports(self) -> list[PortIdentity]:
        return sorted(self._attached, key=lambda p: p.number)

    @property
    def distributing_ports(self) -> list[PortIdentity]:
        return sorted(self._distributing, key=lambda p: p.number)

    @property
    def observed_conversations(self) -> list[ConversationId]:
        return list(self._observed)

    def is_collecting(self, port: PortIdentity) -> bool:
        return port in self._collecting

    def attach(self, port: PortIdentity) -> None:
        self._attached.add(port)

    def detach(self, port: PortIdentity, now: Micros = 0) -> list[Remap]:
        remaps = []
        if port in self._distributing:
            remaps = self.on_port_state_change(port, False, now)
        self._collecting.discard(port)
        self._attached.discard(port)
        return remaps

    def enable_collecting(self, port: PortIdentity) -> None:
        self._require_attached(port)
        self._collecting.add(port)

    def distribute(self, frame: Frame) -> tuple[PortIdentity, Frame]:
        port = self.policy.select(frame, self.distributing_ports)
        self._observed.setdefault(frame.conversation)
        return port, frame

    def on_port_state_change(self, port: PortIdentity, distributing: bool, now: Micros = 0) -> list[Remap]:
        """Add or remove ``port`` from the distributing set.

        Returns one :class:`Remap` for every observed conversation whose
        hashed port differs between the old and the new set.
        """
        self._require_attached(port)
        old = self.distributing_ports
        if distributing:
            self._distributing.add(port)
        else:
            self._distributing.discard(port)
        new = self.distributing_ports
        if old == new:
            return []
        remaps = []
        for conv in self._observed:
            before = hash_select(conv, old) if old else None
            after = hash_select(conv, new) if new else None
            if before != after:
                remaps.append(Remap(now, conv, before, after))
        return remaps

    def _require_attached(self, port: PortIdentity) -> None:
        if port not in self._attached:
            raise LagError(f"port {port} is not attached to aggregator {self.id}")


@dataclass(frozen=True)
class Delivery:
    frame: Frame
    port: PortIdentity
    duplicate: bool = False
    reordered: bool = False

    @property
    def flags(self) -> frozenset[str]:
        out = set()
        if self.duplicate:
            out.add("duplicate")
        if self.reordered:
            out.add("reordered")
        return frozenset(out)


@dataclass
class _ConversationLog:
    seen: set[int] = field(default_factory=set)
    max_seq: int = -1


class CollectorState:
    """Frame collector: per-port FIFO hand-off plus duplicate/reorder flags.

    Frames are drained to the client as soon as they arrive, so order across
    ports is simply arrival order; order within one port is never changed.
    """

    def __init__(self):
        self._queues: dict[PortIdentity, deque[Frame]] = {}
        self._log: dict[ConversationId, _ConversationLog] = {}
        self.duplicate_count = 0
        self.reorder_count = 0

    def collect(self, frame: Frame, port: PortIdentity) -> list[Delivery]:
        queue = self._queues.setdefault(port, deque())
        queue.append(frame)
        delivered = []
        while queue:
            f = queue.popleft()
            log = self._log.setdefault(f.conversation, _ConversationLog())
            duplicate = f.seq in log.seen
            reordered = not duplicate and f.seq < log.max_seq
            log.seen.add(f.seq)
            log.max_seq = max(log.max_seq, f.seq)
            self.duplicate_count += duplicate
            self.reorder_count += reordered
            delivered.append(Delivery(f, port, duplicate, reordered))
        return delivered

    def delivered_seqs(self, conversation: ConversationId) -> Iterable[int]:
        log = self._log.get(conversation)
        return sorted(log.seen) if log else []
