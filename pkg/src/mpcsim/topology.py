"""Netlists for the integrated n-switch multiport converter family.

The universalized converter is a ladder of ``n`` switches with a series stack
of ``n`` port capacitors beside it.  Ladder node ``i`` and stack junction
``T_i`` are tied together either by a wire or by a filter inductor.  Every
other member of the family (common-ground SIDO/DISO converters, their
different-ground variants, nonsynchronous derivations) is a special case
obtained by choosing where sources and loads attach along the stack.

Numbering: ladder nodes ``1..n`` are node ids ``1..n``; the bottom of the
ladder and the bottom of the stack are the common reference ``G`` (node 0).
Stack junctions ``T_2..T_n`` get ids ``n+1..2n-1``.  ``T_1`` coincides with
ladder node 1 unless a top inductor is requested.
"""

from __future__ import annotations

import enum
import math
from collections import deque
from dataclasses import dataclass, replace
from typing import TYPE_CHECKING, Iterable, Mapping, Sequence

import numpy as np

if TYPE_CHECKING:
    from mpcsim.analysis import SteadyStateReport

GROUND = 0


class TopologyError(ValueError):
    """Raised for malformed netlists and descriptors."""


class NoDerivationError(TopologyError):
    """No switch can be replaced by a diode for the requested power flow."""

    def __init__(self, message: str, bidirectional: Sequence[int] = ()):
        super().__init__(message)
        self.bidirectional = tuple(bidirectional)


class ElementKind(str, enum.Enum):
    SWITCH = "switch"
    DIODE = "diode"
    INDUCTOR = "inductor"
    CAPACITOR = "capacitor"
    RESISTOR = "resistor"
    VOLTAGE_SOURCE = "voltage-source"
    CURRENT_SOURCE = "current-source"


class AttachmentKind(str, enum.Enum):
    VOLTAGE_SOURCE = "voltage-source"
    RESISTIVE_LOAD = "resistive-load"
    CURRENT_LOAD = "current-load"
    OPEN = "open"


class InductorStyle(str, enum.Enum):
    MIDDLE_BRANCHES = "middle-branches"
    PLUS_TOP = "plus-top"
    PLUS_TOP_AND_BOTTOM = "plus-top-and-bottom"


_POSITIVE_KINDS = (ElementKind.INDUCTOR, ElementKind.CAPACITOR, ElementKind.RESISTOR)


@dataclass(frozen=True)
class Element:
    """One two-terminal circuit element.

    ``terminals`` is ordered: positive current flows from the first terminal
    through the element to the second, and the element voltage is
    ``v(first) - v(second)``.  For diodes the first terminal is the anode.
    Switch and diode values are unused; their resistances come from the
    simulation settings.
    """

    id: str
    kind: ElementKind
    terminals: tuple[int, int]
    value: float = 0.0
    switch_index: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "kind", ElementKind(self.kind))
        a, b = self.terminals
        object.__setattr__(self, "terminals", (int(a), int(b)))
        if a < 0 or b < 0:
            raise TopologyError(f"{self.id}: node ids must be non-negative")
        if a == b:
            raise TopologyError(f"{self.id}: both terminals on node {a}")
        if self.kind in _POSITIVE_KINDS and not self.value > 0:
            raise TopologyError(f"{self.id}: {self.kind.value} value must be > 0, got {self.value}")
        gated = self.kind in (ElementKind.SWITCH, ElementKind.DIODE)
        if gated and self.switch_index is None:
            raise TopologyError(f"{self.id}: switch/diode needs a switch_index")
        if not gated and self.switch_index is not None:
            raise TopologyError(f"{self.id}: only switches and diodes carry a switch_index")


@dataclass(frozen=True)
class Netlist:
    """Element-level circuit graph over integer nodes, node 0 being ``G``.

    ``ladder`` and ``junctions`` record which node ids play the role of ladder
    positions ``1..n+1`` and stack junctions ``T_1..T_{n+1}`` when the netlist
    came out of :func:`build_universalized`; they are empty for hand-made
    netlists.
    """

    elements: tuple[Element, ...]
    n_switches: int
    ladder: tuple[int, ...] = ()
    junctions: tuple[int, ...] = ()
    inductor_style: InductorStyle | None = None

    def __post_init__(self):
        object.__setattr__(self, "elements", tuple(self.elements))
        if self.n_switches < 1:
            raise TopologyError("a netlist needs at least one switch")
        ids = [e.id for e in self.elements]
        dupes = {i for i in ids if ids.count(i) > 1}
        if dupes:
            raise TopologyError(f"duplicate element ids: {sorted(dupes)}")
        indices = sorted(e.switch_index for e in self.elements if e.switch_index is not None)
        if indices != list(range(1, self.n_switches + 1)):
            raise TopologyError(
                f"switch indices must be exactly 1..{self.n_switches}, got {indices}"
            )
        if GROUND not in self.nodes:
            raise TopologyError("netlist has no element attached to G (node 0)")
        isolated = self.nodes - _reachable(self.elements, GROUND)
        if isolated:
            raise TopologyError(f"netlist is not connected; unreachable nodes {sorted(isolated)}")

    @property
    def nodes(self) -> frozenset[int]:
        return frozenset(n for e in self.elements for n in e.terminals) | {GROUND}

    def of_kind(self, *kinds: ElementKind) -> list[Element]:
        return [e for e in self.elements if e.kind in kinds]

    def element(self, element_id: str) -> Element:
        for e in self.elements:
            if e.id == element_id:
                return e
        raise KeyError(element_id)

    def gated(self) -> list[Element]:
        """Switches and diodes ordered by switch index."""
        return sorted(
            self.of_kind(ElementKind.SWITCH, ElementKind.DIODE), key=lambda e: e.switch_index
        )

    def kind_counts(self) -> dict[str, int]:
        counts: dict[str, int] = {}
        for e in self.elements:
            counts[e.kind.value] = counts.get(e.kind.value, 0) + 1
        return counts

    def structure(self) -> tuple:
        """Hashable structural fingerprint (used for equality checks)."""
        return tuple((e.id, e.kind.value, e.terminals, float(e.value), e.switch_index) for e in self.elements)


def _reachable(elements: Iterable[Element], start: int) -> set[int]:
    adj: dict[int, set[int]] = {}
    for e in elements:
        a, b = e.terminals
        adj.setdefault(a, set()).add(b)
        adj.setdefault(b, set()).add(a)
    seen = {start}
    todo = deque([start])
    while todo:
        for m in adj.get(todo.popleft(), ()):
            if m not in seen:
                seen.add(m)
                todo.append(m)
    return seen


@dataclass(frozen=True, order=True)
class PortSpan:
    """Junction pair ``T_top .. T_bottom``; it covers capacitors ``top..bottom-1``."""

    top: int
    bottom: int

    def __post_init__(self):
        if not (1 <= self.top < self.bottom):
            raise TopologyError(f"invalid span T{self.top}..T{self.bottom}: need 1 <= top < bottom")

    def check(self, n: int) -> None:
        if self.bottom > n + 1:
            raise TopologyError(
                f"span T{self.top}..T{self.bottom} out of range for n={n} (max junction {n + 1})"
            )

    def positions(self) -> range:
        """Capacitor (port) positions covered, 1-based."""
        return range(self.top, self.bottom)

    def indicator(self, n: int) -> np.ndarray:
        row = np.zeros(n)
        row[self.top - 1:self.bottom - 1] = 1.0
        return row

    def label(self, n: int) -> str:
        bottom = "G" if self.bottom == n + 1 else f"T{self.bottom}"
        return f"T{self.top}..{bottom}"


@dataclass(frozen=True)
class Attachment:
    span: PortSpan
    kind: AttachmentKind
    value: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "kind", AttachmentKind(self.kind))
        if not math.isfinite(self.value):
            raise TopologyError(f"{self.kind.value} across {self.span} has a non-finite value")
        if self.kind is AttachmentKind.RESISTIVE_LOAD and not self.value > 0:
            raise TopologyError(f"resistive load across {self.span} needs a positive resistance")
        if self.kind is AttachmentKind.VOLTAGE_SOURCE and self.value < 0:
            raise TopologyError(f"voltage source across {self.span} must be non-negative (orient the span instead)")


def inductor_count(n: int, style: InductorStyle | str) -> int:
    return {
        InductorStyle.MIDDLE_BRANCHES: n - 1,
        InductorStyle.PLUS_TOP: n,
        InductorStyle.PLUS_TOP_AND_BOTTOM: n + 1,
    }[InductorStyle(style)]


def filtered_branches(n: int, style: InductorStyle | str) -> list[int]:
    """Junction indices that get an inductor, top to bottom (``n+1`` is G)."""
    style = InductorStyle(style)
    branches = list(range(2, n + 1))
    if style in (InductorStyle.PLUS_TOP, InductorStyle.PLUS_TOP_AND_BOTTOM):
        branches.insert(0, 1)
    if style is InductorStyle.PLUS_TOP_AND_BOTTOM:
        branches.append(n + 1)
    return branches


def _per_item(value, count: int, what: str) -> tuple[float, ...]:
    if np.ndim(value) == 0:
        return (float(value),) * count
    values = tuple(float(v) for v in value)
    if len(values) != count:
        raise TopologyError(f"expected {count} {what} values, got {len(values)}")
    return values


@dataclass(frozen=True)
class TopologyDescriptor:
    """High-level description from which :func:`build_universalized` builds a netlist.

    ``inductance`` and ``capacitance`` may be scalars or per-branch /
    per-position sequences.
    """

    n: int
    attachments: tuple[Attachment, ...] = ()
    synchronous: bool = True
    inductor_style: InductorStyle = InductorStyle.MIDDLE_BRANCHES
    inductance: float | tuple[float, ...] = 0.72e-3
    capacitance: float | tuple[float, ...] = 560e-6

    def __post_init__(self):
        if self.n < 2:
            raise TopologyError("a multiport converter needs n >= 2 switches")
        style = InductorStyle(self.inductor_style)
        object.__setattr__(self, "inductor_style", style)
        object.__setattr__(self, "attachments", tuple(self.attachments))
        object.__setattr__(
            self, "inductance", _per_item(self.inductance, inductor_count(self.n, style), "inductance")
        )
        object.__setattr__(self, "capacitance", _per_item(self.capacitance, self.n, "capacitance"))
        if any(v <= 0 for v in self.inductance + self.capacitance):
            raise TopologyError("inductances and capacitances must be positive")
        for att in self.attachments:
            att.span.check(self.n)

    @property
    def sources(self) -> list[Attachment]:
        return [a for a in self.attachments if a.kind is AttachmentKind.VOLTAGE_SOURCE]

    def require_source(self) -> None:
        if not self.sources:
            raise TopologyError("at least one voltage-source attachment is required")


# ---------------------------------------------------------------------------
# enumeration of common-ground port assignments

@dataclass(frozen=True)
class PortAssignment:
    """Input/output labelling of the ``n`` non-ground nodes."""

    n: int
    inputs: frozenset[int]

    @property
    def outputs(self) -> frozenset[int]:
        return frozenset(range(1, self.n + 1)) - self.inputs

    @property
    def k(self) -> int:
        return len(self.inputs)

    @property
    def p(self) -> int:
        return self.n - self.k

    @property
    def mask(self) -> int:
        return sum(1 << (i - 1) for i in self.inputs)

    def label(self, node: int) -> str:
        return "input" if node in self.inputs else "output"

    def __str__(self):
        ins = ",".join(map(str, sorted(self.inputs)))
        outs = ",".join(map(str, sorted(self.outputs)))
        return f"in[{ins}] out[{outs}]"


def enumerate_port_assignments(n: int) -> list[PortAssignment]:
    """All ways to label nodes ``1..n`` as inputs/outputs with at least one of each.

    Returns ``2**n - 2`` assignments grouped by input count ``k`` and ordered
    by input bitmask inside each group.
    """
    if n < 2:
        raise TopologyError("need at least two ports besides ground")
    out = []
    for mask in range(1, 2 ** n - 1):
        inputs = frozenset(i + 1 for i in range(n) if mask >> i & 1)
        out.append(PortAssignment(n, inputs))
    out.sort(key=lambda a: (a.k, a.mask))
    return out


def _as_assignment(n: int, assignment) -> PortAssignment:
    if isinstance(assignment, PortAssignment):
        if assignment.n != n:
            raise TopologyError(f"assignment is for n={assignment.n}, not n={n}")
        return assignment
    if isinstance(assignment, Mapping):
        if set(assignment) != set(range(1, n + 1)):
            raise TopologyError(f"assignment must label every node 1..{n}")
        bad = {v for v in assignment.values() if v not in ("input", "output")}
        if bad:
            raise TopologyError(f"labels must be 'input' or 'output', got {sorted(bad)}")
        return PortAssignment(n, frozenset(k for k, v in assignment.items() if v == "input"))
    return PortAssignment(n, frozenset(int(i) for i in assignment))


def build_common_ground(
    n: int,
    assignment,
    source_volts: float | Mapping[int, float],
    load_ohms: float | Mapping[int, float],
    **components,
) -> TopologyDescriptor:
    """Descriptor with every port referenced to ``G``.

    ``assignment`` is a :class:`PortAssignment`, a ``{node: "input"|"output"}``
    mapping, or an iterable of input nodes.  Sources go across ``T_i..G`` for
    input nodes, resistive loads across ``T_j..G`` for output nodes.
    """
    a = _as_assignment(n, assignment)
    if a.k == 0 or a.p == 0:
        raise TopologyError("assignment needs at least one input and one output node")

    def pick(table, node, what):
        if isinstance(table, Mapping):
            try:
                return float(table[node])
            except KeyError:
                raise TopologyError(f"no {what} value for node {node}") from None
        return float(table)

    atts = []
    for node in range(1, n + 1):
        span = PortSpan(node, n + 1)
        if node in a.inputs:
            atts.append(Attachment(span, AttachmentKind.VOLTAGE_SOURCE, pick(source_volts, node, "source")))
        else:
            atts.append(Attachment(span, AttachmentKind.RESISTIVE_LOAD, pick(load_ohms, node, "load")))
    return TopologyDescriptor(n, tuple(atts), **components)


def check_source_consistency(n: int, attachments: Sequence[Attachment]) -> None:
    """Reject voltage sources that contradict each other for every duty choice.

    Each source pins the sum of the port voltages in its span; a set of such
    linear constraints with no solution (e.g. two different sources across one
    span) can never be satisfied.
    """
    rows, rhs = [], []
    for att in attachments:
        if att.kind is AttachmentKind.VOLTAGE_SOURCE:
            rows.append(att.span.indicator(n))
            rhs.append(att.value)
    if len(rows) < 2:
        return
    a = np.array(rows)
    b = np.array(rhs)
    x, *_ = np.linalg.lstsq(a, b, rcond=None)
    if np.max(np.abs(a @ x - b)) > 1e-9 * max(1.0, np.max(np.abs(b))):
        raise TopologyError("voltage sources pin the same capacitors inconsistently")


def build_different_ground(n: int, ports: Sequence[Attachment], **components) -> TopologyDescriptor:
    """Descriptor with ports across arbitrary junction pairs.

    One port must sit in the ``V_0`` position across ``T_1..G``.
    """
    ports = tuple(ports)
    for att in ports:
        att.span.check(n)
    if not any(att.span == PortSpan(1, n + 1) for att in ports):
        raise TopologyError(f"no port across T1..G (the V0 position) for n={n}")
    check_source_consistency(n, ports)
    return TopologyDescriptor(n, ports, **components)


# ---------------------------------------------------------------------------
# netlist construction

def build_universalized(desc: TopologyDescriptor) -> Netlist:
    """Build the ladder + series stack + LC filter netlist for ``desc``.

    Element order is fixed: switches ``S1..Sn``, inductors top to bottom,
    capacitors ``C1..Cn``, then one element per attachment in attachment
    order (``V``/``R``/``I`` prefixes, numbered per prefix).
    """
    n = desc.n
    style = desc.inductor_style
    for att in desc.attachments:
        att.span.check(n)

    ladder = list(range(1, n + 1)) + [GROUND]
    junction = [0] * (n + 2)  # 1-based
    next_id = n + 1
    for j in range(2, n + 1):
        junction[j] = next_id
        next_id += 1
    junction[1] = 1
    junction[n + 1] = GROUND
    if style in (InductorStyle.PLUS_TOP, InductorStyle.PLUS_TOP_AND_BOTTOM):
        junction[1] = next_id
        next_id += 1
    if style is InductorStyle.PLUS_TOP_AND_BOTTOM:
        ladder[n] = next_id
        next_id += 1

    elements = [
        Element(f"S{i}", ElementKind.SWITCH, (ladder[i - 1], ladder[i]), switch_index=i)
        for i in range(1, n + 1)
    ]
    for value, j in zip(desc.inductance, filtered_branches(n, style)):
        name = "LG" if j == n + 1 else f"L{j}"
        elements.append(Element(name, ElementKind.INDUCTOR, (ladder[j - 1], junction[j]), value))
    for i in range(1, n + 1):
        elements.append(
            Element(f"C{i}", ElementKind.CAPACITOR, (junction[i], junction[i + 1]), desc.capacitance[i - 1])
        )
    counters = {"V": 0, "R": 0, "I": 0}
    for att in desc.attachments:
        nodes = (junction[att.span.top], junction[att.span.bottom])
        if att.kind is AttachmentKind.OPEN:
            continue
        prefix, kind = {
            AttachmentKind.VOLTAGE_SOURCE: ("V", ElementKind.VOLTAGE_SOURCE),
            AttachmentKind.RESISTIVE_LOAD: ("R", ElementKind.RESISTOR),
            AttachmentKind.CURRENT_LOAD: ("I", ElementKind.CURRENT_SOURCE),
        }[att.kind]
        counters[prefix] += 1
        elements.append(Element(f"{prefix}{counters[prefix]}", kind, nodes, att.value))

    return Netlist(
        tuple(elements),
        n,
        ladder=tuple(ladder),
        junctions=tuple(junction[1:]),
        inductor_style=style,
    )


def ladder_position(netlist: Netlist, node: int) -> int | None:
    """1-based ladder position of ``node`` (``n+1`` for the bottom), or None."""
    try:
        return netlist.ladder.index(node) + 1
    except ValueError:
        return None


# ---------------------------------------------------------------------------
# nonsynchronous derivation

@dataclass(frozen=True)
class SwitchVerdict:
    index: int
    currents: tuple[float, ...]  # per conducting mode, transistor direction positive
    modes: tuple[int, ...]
    replaceable: bool
    peaks: tuple[float, ...] = ()  # largest instantaneous current per mode when ripple is known

    @property
    def bidirectional(self) -> bool:
        return any(c > 0 for c in self.currents) and any(c < 0 for c in self.currents)


def classify_switches(steady: "SteadyStateReport", rel_tol: float = 1e-9) -> list[SwitchVerdict]:
    """Decide for each switch whether it only ever conducts through its body diode.

    A switch qualifies when its Table II current is ``<= 0`` in every mode of
    non-zero length in which it is gated on.  When the report carries ripple
    (it was solved with ``f_sw``) the test uses the instantaneous peak of
    each mode instead of the average, so a diode never has to block
    mid-mode.
    """
    table = steady.stress_table
    rows = np.asarray(table.rows)
    peaks = None if table.mode_extremes is None else np.asarray(table.mode_extremes)[:, :, 1]
    duties = np.asarray(steady.duties)
    n = rows.shape[0]
    scale = max(float(np.max(np.abs(rows), initial=0.0)), 1e-30)
    verdicts = []
    for j in range(n):
        modes = tuple(k + 1 for k in range(n) if k != j and duties[k] > 0)
        currents = tuple(float(rows[k - 1, j]) for k in modes)
        worst = currents if peaks is None else tuple(float(peaks[k - 1, j]) for k in modes)
        ok = all(c <= rel_tol * scale for c in worst)
        verdicts.append(SwitchVerdict(j + 1, currents, modes, ok, worst))
    return verdicts


def derive_nonsynchronous(netlist: Netlist, steady: "SteadyStateReport") -> Netlist:
    """Replace every body-diode-only switch with a diode.

    The diode takes the switch's body-diode orientation (anode on the lower
    ladder node) and keeps its switch index.  Raises
    :class:`NoDerivationError` when nothing can be replaced, or when every
    switch would be replaced.
    """
    verdicts = classify_switches(steady)
    if len(verdicts) != netlist.n_switches:
        raise TopologyError("steady-state report does not match the netlist switch count")
    loads = (AttachmentKind.RESISTIVE_LOAD, AttachmentKind.CURRENT_LOAD)
    if not any(a.kind in loads for a in steady.descriptor.attachments):
        # storage on every port: the external system picks the flow direction
        bidi = [v.index for v in verdicts]
        raise NoDerivationError(
            "no load fixes the power-flow direction (storage on every port); "
            "every switch must stay bidirectional: " + ", ".join(f"S{i}" for i in bidi),
            bidi,
        )
    chosen = {v.index for v in verdicts if v.replaceable}
    if not chosen:
        bidi = [v.index for v in verdicts]
        raise NoDerivationError(
            "no nonsynchronous derivation exists for this power flow; "
            "switches carrying transistor-direction current: "
            + ", ".join(f"S{i}" for i in bidi),
            bidi,
        )
    if len(chosen) == netlist.n_switches:
        raise NoDerivationError(
            "every switch would become a diode; no active switch would remain", []
        )
    new = []
    for e in netlist.elements:
        if e.kind is ElementKind.SWITCH and e.switch_index in chosen:
            hi, lo = e.terminals
            e = Element(f"D{e.switch_index}", ElementKind.DIODE, (lo, hi), e.value, e.switch_index)
        new.append(e)
    return replace(netlist, elements=tuple(new))


# convenience used by the examples and the CLI

FIG2_LABELS = {
    frozenset({1}): "a",  # two buck outputs
    frozenset({2}): "b",  # one boost, one buck output
    frozenset({3}): "c",  # two boost outputs
    frozenset({1, 2}): "d",  # two buck inputs
    frozenset({1, 3}): "e",  # one buck, one boost input
    frozenset({2, 3}): "f",  # two boost inputs
}


def group_sizes(assignments: Iterable[PortAssignment]) -> dict[int, int]:
    sizes: dict[int, int] = {}
    for a in assignments:
        sizes[a.k] = sizes.get(a.k, 0) + 1
    return sizes


def export_netlist(netlist: Netlist, duties, f_sw: float, **kwargs) -> str:
    """SPICE text for ``netlist`` at one operating point (see :mod:`mpcsim.spice`)."""
    from mpcsim.spice import export_netlist as _export

    return _export(netlist, duties, f_sw, **kwargs)


__all__ = [
    "GROUND", "TopologyError", "NoDerivationError", "ElementKind", "AttachmentKind",
    "InductorStyle", "Element", "Netlist", "PortSpan", "Attachment", "TopologyDescriptor",
    "PortAssignment", "enumerate_port_assignments", "build_common_ground",
    "build_different_ground", "build_universalized", "derive_nonsynchronous",
    "classify_switches", "SwitchVerdict", "check_source_consistency", "inductor_count",
    "filtered_branches", "ladder_position", "group_sizes", "FIG2_LABELS", "export_netlist",
]
