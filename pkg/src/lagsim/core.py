"""Shared identities and value types for the link-aggregation simulator.

Simulated time is carried everywhere as an integer count of microseconds
(``Micros``); floats only appear at the edges (config files, CLI, CSV).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Optional

Micros = int

US_PER_SECOND = 1_000_000

# Ethernet header (14) + FCS (4); added to payload_len for wire size.
FRAME_OVERHEAD_OCTETS = 18


class LagError(Exception):
    """Base class for errors raised by lagsim."""


class ConfigurationError(LagError, ValueError):
    """Invalid topology, scenario or component configuration."""


class SimulationError(LagError, RuntimeError):
    """Internal consistency failure inside the event loop."""


class MacParseError(LagError, ValueError):
    def __init__(self, text: str, position: int, reason: str):
        self.text = text
        self.position = position
        super().__init__(f"invalid MAC {text!r} at pair {position}: {reason}")


def to_micros(seconds: float) -> Micros:
    return int(round(seconds * US_PER_SECOND))


def format_seconds(t: Micros) -> str:
    """Render microseconds as fixed six-decimal seconds without float rounding."""
    sign = "-" if t < 0 else ""
    whole, frac = divmod(abs(t), US_PER_SECOND)
    return f"{sign}{whole}.{frac:06d}"


@dataclass(frozen=True, order=True)
class MacAddress:
    octets: tuple[int, ...]

    def __post_init__(self):
        if len(self.octets) != 6 or any(not 0 <= o <= 0xFF for o in self.octets):
            raise ValueError(f"MAC address needs six octets, got {self.octets!r}")

    @classmethod
    def from_bytes(cls, raw: bytes) -> MacAddress:
        return cls(tuple(raw))

    def to_bytes(self) -> bytes:
        return bytes(self.octets)

    def fold(self) -> int:
        """XOR of all six octets."""
        h = 0
        for o in self.octets:
            h ^= o
        return h

    def __str__(self) -> str:
        return ":".join(f"{o:02x}" for o in self.octets)

    def __repr__(self) -> str:
        return f"MacAddress('{self}')"


def parse_mac(text: str) -> MacAddress:
    pairs = text.split(":")
    if len(pairs) != 6:
        # first missing pair, or the first surplus one
        position = len(pairs) + 1 if len(pairs) < 6 else 7
        raise MacParseError(text, position,
                            f"expected 6 colon-separated pairs, found {len(pairs)}")
    octets = []
    for i, pair in enumerate(pairs, start=1):
        if len(pair) != 2 or any(c not in "0123456789abcdefABCDEF" for c in pair):
            raise MacParseError(text, i, f"{pair!r} is not a hex pair")
        octets.append(int(pair, 16))
    return MacAddress(tuple(octets))


def mac_from_int(value: int) -> MacAddress:
    return MacAddress(tuple(value.to_bytes(6, "big")))


def _check_u16(name: str, value: int) -> None:
    if not 0 <= value <= 0xFFFF:
        raise ValueError(f"{name} must fit in 16 bits, got {value}")


@dataclass(frozen=True, order=True)
class SystemId:
    """LACP system identifier; lower priority wins, address breaks ties."""

    priority: int
    address: MacAddress

    def __post_init__(self):
        _check_u16("system priority", self.priority)

    def __str__(self) -> str:
        return f"{self.priority:04x},{self.address}"


def compare_system(a: SystemId, b: SystemId) -> int:
    """Three-way comparison: -1 if ``a`` sorts first, 0 if equal, 1 otherwise."""
    return (a > b) - (a < b)


@dataclass(frozen=True, order=True)
class PortIdentity:
    """Port priority and number.

    Number 0 is the reserved "no port" value: it may appear inside a PDU
    (a partner nobody has heard from yet) but never names a real
    aggregation port; use :meth:`is_null` to tell them apart.
    """

    priority: int
    number: int

    def __post_init__(self):
        _check_u16("port priority", self.priority)
        _check_u16("port number", self.number)

    @property
    def is_null(self) -> bool:
        return self.number == 0

    def __str__(self) -> str:
        return str(self.number)


NO_PORT = PortIdentity(0, 0)


def aggregation_port(number: int, priority: int = 0x00FF) -> PortIdentity:
    if number == 0:
        raise ValueError("port number 0 is reserved")
    return PortIdentity(priority, number)


@dataclass(frozen=True, order=True)
class LagKey:
    value: int

    def __post_init__(self):
        _check_u16("key", self.value)


@dataclass(frozen=True, order=True)
class ConversationId:
    src: MacAddress
    dst: MacAddress

    def __str__(self) -> str:
        return f"{self.src}>{self.dst}"


class FrameKind(Enum):
    ECHO_REQUEST = "echo-request"
    ECHO_REPLY = "echo-reply"
    BULK = "bulk"
    LACPDU = "lacpdu"


@dataclass(frozen=True)
class Frame:
    src: MacAddress
    dst: MacAddress
    seq: int
    payload_len: int
    sent_at: Micros
    kind: FrameKind
    # echo-reply only: the request sequence number being answered
    echo_seq: Optional[int] = None
    payload: bytes = field(default=b"", repr=False)

    def __post_init__(self):
        if self.payload_len < 0:
            raise ValueError("payload_len must be >= 0")
        if not 0 <= self.seq < 2**64:
            raise ValueError("seq must fit in 64 bits")

    @property
    def conversation(self) -> ConversationId:
        return ConversationId(self.src, self.dst)

    @property
    def bits(self) -> int:
        return (self.payload_len + FRAME_OVERHEAD_OCTETS) * 8


class SequenceAllocator:
    """Hands out strictly increasing sequence numbers per conversation."""

    def __init__(self, start: int = 1):
        self._start = start
        self._next: dict[ConversationId, int] = {}

    def next(self, conversation: ConversationId) -> int:
        seq = self._next.get(conversation, self._start)
        self._next[conversation] = seq + 1
        return seq
