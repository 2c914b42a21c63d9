"""MII-style polled link monitoring.

A monitor never sees a link directly; it samples the physical state at
poll ticks. Any transition is therefore reported at the first tick after
it happens, and a flap shorter than the poll interval can go unnoticed.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from enum import Enum
from typing import Callable, Hashable, Optional

from .core import Micros

DEFAULT_POLL_INTERVAL: Micros = 100_000


class LinkState(Enum):
    UP = "up"
    DOWN = "down"


@dataclass(frozen=True)
class MonitorConfig:
    poll_interval: Micros = DEFAULT_POLL_INTERVAL
    state: LinkState = LinkState.UP
    last_poll: Micros = 0

    def __post_init__(self):
        if self.poll_interval <= 0:
            raise ValueError("poll_interval must be positive")


@dataclass(frozen=True)
class TransitionEvent:
    time: Micros
    link_id: Hashable
    new_state: LinkState


def poll(
    cfg: MonitorConfig,
    physical_state: LinkState,
    now: Micros,
    link_id: Hashable = None,
) -> tuple[MonitorConfig, Optional[TransitionEvent]]:
    if now < cfg.last_poll:
        raise ValueError(f"poll at {now} precedes last poll at {cfg.last_poll}")
    if now - cfg.last_poll < cfg.poll_interval:
        return cfg, None
    if physical_state == cfg.state:
        return replace(cfg, last_poll=now), None
    return (
        replace(cfg, last_poll=now, state=physical_state),
        TransitionEvent(now, link_id, physical_state),
    )


class LinkMonitor:
    """Polls a set of links through a probe callable, one config per link."""

    def __init__(self, probe: Callable[[Hashable, Micros], LinkState], poll_interval: Micros = DEFAULT_POLL_INTERVAL):
        self.probe = probe
        self.poll_interval = poll_interval
        self.configs: dict[Hashable, MonitorConfig] = {}

    def watch(self, link_id: Hashable, state: LinkState = LinkState.UP, now: Micros = 0) -> None:
        self.configs[link_id] = MonitorConfig(self.poll_interval, state, now)

    def poll_all(self, now: Micros) -> list[TransitionEvent]:
        events = []
        for link_id, cfg in self.configs.items():
            cfg, event = poll(cfg, self.probe(link_id, now), now, link_id)
            self.configs[link_id] = cfg
            if event is not None:
                events.append(event)
        return events
