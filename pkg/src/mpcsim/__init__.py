"""Synthesis, steady-state analysis and switched simulation of n-switch
multiport dc-dc converters built on a series capacitor stack."""

from mpcsim.analysis import SteadyStateReport, solve_port_voltages, steady_state, switch_stresses
from mpcsim.pwm import DutyVector, PIGains, make_schedule, update_duties
from mpcsim.simulator import SimConfig, WaveformTrace, measure, run_closed_loop, run_to_steady_state
from mpcsim.topology import (
    Attachment,
    AttachmentKind,
    InductorStyle,
    PortSpan,
    TopologyDescriptor,
    build_common_ground,
    build_different_ground,
    build_universalized,
    derive_nonsynchronous,
    enumerate_port_assignments,
    export_netlist,
)

__version__ = "0.1.0"

__all__ = [
    "Attachment", "AttachmentKind", "DutyVector", "InductorStyle", "PIGains", "PortSpan",
    "SimConfig", "SteadyStateReport", "TopologyDescriptor", "WaveformTrace",
    "build_common_ground", "build_different_ground", "build_universalized",
    "derive_nonsynchronous", "enumerate_port_assignments", "export_netlist", "make_schedule",
    "measure", "run_closed_loop", "run_to_steady_state", "solve_port_voltages", "steady_state",
    "switch_stresses", "update_duties",
]
