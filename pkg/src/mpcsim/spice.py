"""SPICE-compatible netlist text for cross-checking in an external simulator.

Power-stage elements come first, one card each, in netlist order.  Each
switch is a voltage-controlled ``S`` element whose control node ``g<k>`` is
driven by a PULSE source that drops to 0 V during mode ``k``; those drive
sources sit in their own section after the power stage.
"""

from __future__ import annotations

from mpcsim.pwm import DutyVector, make_schedule
from mpcsim.topology import ElementKind, Netlist

_PREFIX = {
    ElementKind.SWITCH: "S",
    ElementKind.DIODE: "D",
    ElementKind.INDUCTOR: "L",
    ElementKind.CAPACITOR: "C",
    ElementKind.RESISTOR: "R",
    ElementKind.VOLTAGE_SOURCE: "V",
    ElementKind.CURRENT_SOURCE: "I",
}

EDGE = 1e-9  # gate-drive rise/fall time, s


def _num(x: float) -> str:
    return f"{x:.12g}"


def _card_name(prefix: str, ident: str) -> str:
    return ident if ident[:1].upper() == prefix else prefix + ident


def export_netlist(
    netlist: Netlist,
    duties,
    f_sw: float,
    r_on: float = 1e-3,
    r_off: float = 1e6,
    periods: int = 200,
    title: str = "multiport converter",
) -> str:
    """Render ``netlist`` at one operating point as SPICE text.

    Output depends only on the arguments, so equal inputs give identical
    bytes.
    """
    duties = DutyVector.of(duties)
    if len(duties) != netlist.n_switches:
        raise ValueError("duty vector length differs from the switch count")
    sched = make_schedule(duties, f_sw)
    period = sched.period
    lines = [f"* {title}: n={netlist.n_switches}, f_sw={_num(f_sw)} Hz",
             "* duties (off-time fractions): " + " ".join(_num(d) for d in duties),
             "* power stage"]
    for e in netlist.elements:
        prefix = _PREFIX[e.kind]
        name = _card_name(prefix, e.id)
        a, b = e.terminals
        if e.kind is ElementKind.SWITCH:
            lines.append(f"{name} {a} {b} g{e.switch_index} 0 SWMOD")
        elif e.kind is ElementKind.DIODE:
            lines.append(f"{name} {a} {b} DMOD")
        elif e.kind is ElementKind.VOLTAGE_SOURCE or e.kind is ElementKind.CURRENT_SOURCE:
            lines.append(f"{name} {a} {b} DC {_num(e.value)}")
        else:
            lines.append(f"{name} {a} {b} {_num(e.value)}")

    lines.append("* gate drives: g<k> is 0 V while switch k is off (mode k)")
    for e in netlist.gated():
        if e.kind is not ElementKind.SWITCH:
            continue
        k = e.switch_index
        d = duties[k - 1]
        if d <= 0:
            lines.append(f"VG{k} g{k} 0 DC 1")
        elif d >= 1:
            lines.append(f"VG{k} g{k} 0 DC 0")
        else:
            delay = sched.boundaries[k - 1]
            width = max(d * period - EDGE, EDGE)
            lines.append(
                f"VG{k} g{k} 0 PULSE(1 0 {_num(delay)} {_num(EDGE)} {_num(EDGE)} {_num(width)} {_num(period)})"
            )

    lines += [
        f".model SWMOD SW(Ron={_num(r_on)} Roff={_num(r_off)} Vt=0.5 Vh=0)",
        f".model DMOD D(Ron={_num(r_on)} Roff={_num(r_off)} Vfwd=0)",
        f"* .tran {_num(period / 1000)} {_num(periods * period)}",
        ".end",
    ]
    return "\n".join(lines) + "\n"


def element_cards(text: str) -> list[str]:
    """Power-stage element cards of an exported netlist."""
    cards = []
    for line in text.splitlines():
        if line.startswith("* gate drives"):
            break
        if line and not line.startswith(("*", ".")):
            cards.append(line)
    return cards
