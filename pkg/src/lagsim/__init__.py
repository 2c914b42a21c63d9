"""Link aggregation (LACP) over a flow-programmed switch, simulated deterministically."""

from .aggregator import Aggregator, CollectorState, hash_select
from .controller import Controller, FlowEntry
from .core import (
    ConfigurationError,
    ConversationId,
    Frame,
    FrameKind,
    LagError,
    LagKey,
    MacAddress,
    PortIdentity,
    SimulationError,
    SystemId,
    compare_system,
    parse_mac,
)
from .lacp import Lacpdu, LacpPortState, PeerInfo, decode_lacpdu, encode_lacpdu
from .metrics import anomaly_scan, failover_delay, fairness_check, write_report
from .monitor import LinkMonitor, LinkState
from .scenario import ScenarioParams, ScenarioReport, run_scenario
from .simnet import (
    BandwidthMode,
    TopologySpec,
    build_topology,
    bulk_generator,
    load_topology_spec,
    ping_generator,
    run,
    schedule_link_kill,
)

__version__ = "0.1.0"
