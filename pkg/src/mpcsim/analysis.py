"""Closed-form steady state of the universalized converter.

Volt-second balance on every filter inductor gives ``V_i = D_i * V_0`` for
each port position, so one voltage source fixes the whole stack.  Average
currents follow from charge balance on the stack capacitors, and switch
currents per mode follow from KCL on the ladder (the Table II pattern).

Current conventions used throughout this module:

* junction current ``I_j`` is the average current flowing from stack
  junction ``T_j`` into ladder node ``j`` (``j = 1..n+1``, ``n+1`` is G);
* inductor currents are reported in element orientation, ladder node to
  junction, i.e. ``-I_j``;
* attachment currents flow from the span's top junction through the
  attachment to its bottom junction, so a load draws positive current and a
  source delivering power carries negative current;
* switch currents are positive from ladder node ``j`` down to ``j+1``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from mpcsim.pwm import DutyVector
from mpcsim.topology import (
    Attachment,
    AttachmentKind,
    InductorStyle,
    Netlist,
    PortSpan,
    TopologyDescriptor,
    TopologyError,
    filtered_branches,
)

CONSISTENCY_RTOL = 1e-6


class AnalysisError(ValueError):
    pass


class InconsistentSourcesError(AnalysisError):
    def __init__(self, message: str, implied_v0: Sequence[float]):
        super().__init__(message)
        self.implied_v0 = tuple(implied_v0)


class UnpoweredSpanError(AnalysisError):
    pass


# ---------------------------------------------------------------------------
# port voltages

def span_duty(duties: DutyVector, span: PortSpan) -> float:
    return float(sum(duties[i - 1] for i in span.positions()))


def solve_port_voltages(duties, sources: Sequence) -> tuple[np.ndarray, float]:
    """Port voltages ``V_1..V_n`` and the stack voltage ``v0``.

    A source across ``T_a..T_b`` pins ``sum(D_a..D_{b-1}) * v0``.  The first
    source sets ``v0``; the others must agree within a relative 1e-6.
    ``sources`` holds ``(span, volts)`` pairs or voltage-source attachments.
    """
    duties = DutyVector.of(duties)
    n = len(duties)
    if not sources:
        raise AnalysisError("at least one voltage source is needed to fix the stack voltage")
    implied = []
    for item in sources:
        span, volts = (item.span, item.value) if isinstance(item, Attachment) else item
        span.check(n)
        share = span_duty(duties, span)
        if share <= 0:
            raise UnpoweredSpanError(f"span unpowered: source across {span.label(n)} covers only zero duties")
        implied.append(volts / share)
    v0 = implied[0]
    bad = [x for x in implied[1:] if abs(x - v0) > CONSISTENCY_RTOL * max(abs(v0), abs(x))]
    if bad:
        raise InconsistentSourcesError(
            "sources imply different stack voltages: " + ", ".join(f"{x:.9g} V" for x in implied),
            implied,
        )
    return duties.as_array() * v0, v0


def solve_duties_for_voltages(
    n: int,
    targets: Sequence[tuple[PortSpan, float]],
    slack: int | Sequence[int],
    v0: float | None = None,
) -> DutyVector:
    """Invert ``V_i = D_i v0`` for the ports fixed by ``targets``.

    ``v0`` comes from a target across ``T_1..G`` unless given.  Ports not
    pinned by any target are slack ports and share the remaining duty
    equally; ``slack`` names them (an int or a sequence).
    """
    slack = (slack,) if np.ndim(slack) == 0 else tuple(slack)
    full = PortSpan(1, n + 1)
    rows, rhs = [], []
    for span, volts in targets:
        span.check(n)
        if span == full:
            if v0 is not None and abs(v0 - volts) > CONSISTENCY_RTOL * abs(volts):
                raise AnalysisError(f"full-span target {volts} V disagrees with v0 = {v0} V")
            v0 = float(volts)
        else:
            rows.append(span.indicator(n))
            rhs.append(float(volts))
    if v0 is None or v0 <= 0:
        raise AnalysisError("targets do not determine a positive stack voltage v0")
    if any(not 1 <= s <= n for s in slack):
        raise AnalysisError(f"slack ports must be within 1..{n}")

    d = np.full(n, np.nan)
    if rows:
        a = np.array(rows)
        b = np.array(rhs) / v0
        slack_cols = [s - 1 for s in slack]
        fixed = [i for i in range(n) if i not in slack_cols]
        sub = a[:, fixed]
        if np.any(a[:, slack_cols] != 0):
            raise AnalysisError("a target span covers a slack port")
        sol, *_ = np.linalg.lstsq(sub, b, rcond=None)
        if np.max(np.abs(sub @ sol - b)) > 1e-9:
            raise AnalysisError("targets are mutually inconsistent")
        if np.linalg.matrix_rank(sub) < len(fixed):
            raise AnalysisError("targets leave non-slack ports undetermined")
        d[fixed] = sol
    elif len(slack) != n:
        raise AnalysisError("targets leave non-slack ports undetermined")
    remainder = 1.0 - np.nansum(d)
    if remainder < -1e-12 or np.any(d[~np.isnan(d)] < -1e-12):
        raise AnalysisError(
            f"targets exceed source voltage: ports need {np.nansum(d) * v0:g} V of {v0:g} V"
        )
    d[[s - 1 for s in slack]] = max(remainder, 0.0) / len(slack)
    d = np.clip(d, 0.0, 1.0)
    return DutyVector(tuple(d / d.sum()))


# ---------------------------------------------------------------------------
# switch current pattern

def table_ii_coefficients(n: int) -> np.ndarray:
    """``c[k, j, :]`` maps junction currents ``I_1..I_{n+1}`` to the current of
    switch ``j+1`` in mode ``k+1`` (0-based array indices)."""
    c = np.zeros((n, n, n + 1))
    for k in range(1, n + 1):
        for j in range(1, n + 1):
            if j > k:
                c[k - 1, j - 1, k:j] = 1.0  # I_{k+1..j}
            elif j < k:
                c[k - 1, j - 1, j:k] = -1.0  # -I_{j+1..k}
    return c


@dataclass(frozen=True)
class StressTable:
    """Per-mode (rows) per-switch (columns) currents in amperes.

    ``rows`` evaluates the pattern on period-average junction currents.
    ``mode_mean_rows`` evaluates it on each mode's own average inductor
    currents, i.e. the mean current a switch actually carries during that
    mode once ripple is accounted for.
    """

    rows: np.ndarray
    mode_mean_rows: np.ndarray
    mode_extremes: np.ndarray | None = None  # (mode, switch, min/max) with ripple

    def total_current_stress(self) -> np.ndarray:
        """Largest magnitude per switch over all modes."""
        return np.max(np.abs(self.rows), axis=0)


def switch_stresses(
    duties,
    junction_currents: Sequence[float],
    v0: float,
    mode_offsets: np.ndarray | None = None,
) -> tuple[float, StressTable]:
    """Voltage stress (``v0`` for every switch) and the per-mode current table."""
    duties = DutyVector.of(duties)
    n = len(duties)
    currents = np.asarray(junction_currents, dtype=float)
    if currents.shape != (n + 1,):
        raise AnalysisError(f"expected {n + 1} junction currents, got {currents.shape}")
    c = table_ii_coefficients(n)
    rows = c @ currents
    if mode_offsets is None:
        mean_rows = rows.copy()
    else:
        per_mode = currents[None, :] + mode_offsets
        mean_rows = np.einsum("kjm,km->kj", c, per_mode)
    return abs(v0), StressTable(rows, mean_rows)


# ---------------------------------------------------------------------------
# ideal waveforms

def _junction_potential(n: int, j: int, k: int, v0: float) -> float:
    """Ideal ladder-node potential of position ``j`` in mode ``k``."""
    return v0 if j <= k else 0.0


def inductor_mode_voltages(duties, v0: float, junctions: Sequence[int]) -> np.ndarray:
    """Ideal voltage (ladder node minus junction) of the inductor at each
    junction in each mode; shape ``(n_modes, len(junctions))``."""
    duties = DutyVector.of(duties)
    n = len(duties)
    volts = duties.as_array() * v0
    t_volts = np.concatenate([np.cumsum(volts[::-1])[::-1], [0.0]])  # V(T_1..T_{n+1})
    out = np.zeros((n, len(junctions)))
    for k in range(1, n + 1):
        for col, j in enumerate(junctions):
            out[k - 1, col] = _junction_potential(n, j, k, v0) - t_volts[j - 1]
    return out


def _shape(duties: DutyVector, slopes: np.ndarray, period: float):
    """Piecewise-linear waveform with zero start, given per-mode slopes.

    Returns boundary values and the per-mode means relative to the period mean.
    """
    tau = duties.as_array() * period
    rise = np.cumsum(slopes * tau[:, None], axis=0)
    starts = np.vstack([np.zeros((1, slopes.shape[1])), rise[:-1]])
    mode_mean = starts + slopes * tau[:, None] / 2
    period_mean = (tau[:, None] * mode_mean).sum(axis=0) / period
    return starts, mode_mean - period_mean


def mode_offsets(desc: TopologyDescriptor, duties, v0: float, f_sw: float) -> np.ndarray:
    """Per-mode mean of each junction current minus its period mean.

    Shape ``(n, n+1)``; only inductor-filtered junctions have non-zero entries.
    """
    duties = DutyVector.of(duties)
    n = desc.n
    branches = filtered_branches(n, desc.inductor_style)
    inductance = np.array(desc.inductance)
    v_l = inductor_mode_voltages(duties, v0, branches)
    # junction current is minus the inductor current
    _, offs = _shape(duties, -v_l / inductance[None, :], 1.0 / f_sw)
    out = np.zeros((n, n + 1))
    for col, j in enumerate(branches):
        out[:, j - 1] = offs[:, col]
    return out


def junction_current_edges(
    desc: TopologyDescriptor, duties, v0: float, junction_currents: Sequence[float], f_sw: float
) -> np.ndarray:
    """Ideal junction currents at the start and end of every mode.

    Shape ``(n, n+1, 2)``.  Inside a mode each current is linear in time, so
    these edges bound it.
    """
    duties = DutyVector.of(duties)
    n = desc.n
    branches = filtered_branches(n, desc.inductor_style)
    period = 1.0 / f_sw
    slopes = -inductor_mode_voltages(duties, v0, branches) / np.array(desc.inductance)[None, :]
    starts, offs = _shape(duties, slopes, period)
    tau = duties.as_array()[:, None] * period
    # period mean of the zero-start shape, recovered from any mode
    shift = (starts + slopes * tau / 2 - offs)[0]
    base = np.asarray(junction_currents, dtype=float)
    out = np.repeat(base[None, :, None], n, axis=0).repeat(2, axis=2)
    for col, j in enumerate(branches):
        out[:, j - 1, 0] += starts[:, col] - shift[col]
        out[:, j - 1, 1] += starts[:, col] + slopes[:, col] * tau[:, 0] - shift[col]
    return out


def switch_current_extremes(edges: np.ndarray) -> np.ndarray:
    """Smallest and largest current of each switch in each mode, shape ``(n, n, 2)``."""
    n = edges.shape[0]
    c = table_ii_coefficients(n)
    ends = np.einsum("kjm,kme->kje", c, edges)
    return np.stack([ends.min(axis=2), ends.max(axis=2)], axis=2)


# ---------------------------------------------------------------------------
# average currents

@dataclass(frozen=True)
class BranchCurrents:
    junction: np.ndarray  # I_1..I_{n+1}, junction -> ladder
    attachments: tuple[float, ...]  # top -> bottom through each attachment
    inductors: dict[str, float]  # element orientation, ladder -> junction
    power_residual: float

    @property
    def i1(self) -> float:
        return float(self.junction[0])

    @property
    def ig(self) -> float:
        return float(self.junction[-1])


def _attachment_matrix(n: int, attachments: Sequence[Attachment]) -> np.ndarray:
    """Map attachment currents to net injection into each junction."""
    m = np.zeros((n + 1, len(attachments)))
    for col, att in enumerate(attachments):
        m[att.span.top - 1, col] -= 1.0
        m[att.span.bottom - 1, col] += 1.0
    return m


def solve_branch_currents(
    desc: TopologyDescriptor,
    duties,
    v0: float,
    f_sw: float | None = None,
) -> BranchCurrents:
    """Average attachment, junction and inductor currents.

    Loads fix their own currents from the span voltage.  Source currents
    follow from power balance.  With more than one source the ideal
    converter leaves the split between them free; it is resolved by
    minimising switch conduction loss for equal on-resistances, which is
    where a converter with small identical switch resistances settles.
    Ripple is included in that loss when ``f_sw`` is given.
    """
    duties = DutyVector.of(duties)
    n = desc.n
    atts = desc.attachments
    volts = duties.as_array() * v0
    span_v = np.array([float(att.span.indicator(n) @ volts) for att in atts])

    known = np.zeros(len(atts))
    src_cols = []
    for col, att in enumerate(atts):
        if att.kind is AttachmentKind.RESISTIVE_LOAD:
            known[col] = span_v[col] / att.value
        elif att.kind is AttachmentKind.CURRENT_LOAD:
            known[col] = att.value
        elif att.kind is AttachmentKind.VOLTAGE_SOURCE:
            src_cols.append(col)

    inject = _attachment_matrix(n, atts)
    currents = known.copy()
    if src_cols and not np.any(span_v):
        pass  # dead stack: every current is zero
    elif src_cols:
        a_pb = span_v[src_cols]  # power balance row over source currents
        b_pb = -float(span_v @ known)
        if len(src_cols) == 1:
            if abs(a_pb[0]) == 0:
                raise UnpoweredSpanError("sole source sees zero span voltage")
            currents[src_cols[0]] = b_pb / a_pb[0]
        else:
            currents[src_cols] = _min_loss_split(
                desc, duties, v0, f_sw, inject, known, src_cols, a_pb, b_pb
            )
    junction = inject @ currents
    branches = filtered_branches(n, desc.inductor_style)
    inductors = {("LG" if j == n + 1 else f"L{j}"): 0.0 - float(junction[j - 1]) for j in branches}
    residual = float(span_v @ currents)
    return BranchCurrents(junction, tuple(float(x) for x in currents), inductors, residual)


def _min_loss_split(desc, duties, v0, f_sw, inject, known, src_cols, a_pb, b_pb) -> np.ndarray:
    n = desc.n
    tau = duties.as_array()
    coeff = table_ii_coefficients(n)
    offs = np.zeros((n, n + 1)) if f_sw is None else mode_offsets(desc, duties, v0, f_sw)
    b_src = inject[:, src_cols]
    fixed = inject @ known
    m = len(src_cols)
    hess = np.zeros((m, m))
    grad = np.zeros(m)
    for k in range(n):
        if tau[k] == 0:
            continue
        for j in range(n):
            row = coeff[k, j]
            g = row @ b_src
            base = row @ (fixed + offs[k])
            hess += tau[k] * np.outer(g, g)
            grad += tau[k] * g * base
    # KKT system: minimise x^T H x / 2 + grad^T x subject to a_pb . x = b_pb
    kkt = np.zeros((m + 1, m + 1))
    kkt[:m, :m] = hess
    kkt[:m, m] = a_pb
    kkt[m, :m] = a_pb
    rhs = np.concatenate([-grad, [b_pb]])
    sol, *_ = np.linalg.lstsq(kkt, rhs, rcond=None)
    return sol[:m]


# ---------------------------------------------------------------------------
# ripple

@dataclass(frozen=True)
class Ripple:
    inductor_pp: dict[str, float]  # amperes peak-to-peak
    capacitor_pp: dict[str, float]  # volts peak-to-peak


def _require_middle_style(style) -> None:
    if InductorStyle(style) is not InductorStyle.MIDDLE_BRANCHES:
        raise TopologyError(
            "closed-form analysis needs T_1 and G wired to the ladder ends "
            f"(inductor style 'middle-branches'), got '{InductorStyle(style).value}'"
        )


def ripple_estimates(
    netlist: Netlist | TopologyDescriptor,
    duties,
    steady: "SteadyStateReport",
    f_sw: float,
    samples: int = 4000,
) -> Ripple:
    """Peak-to-peak inductor current and capacitor voltage ripple in CCM.

    Inductor ripple is the volt-seconds of the charging modes divided by L;
    the discharging volt-seconds must match.  Capacitor ripple integrates the
    ideal stack currents with sources absorbing all AC current on the spans
    they pin.
    """
    desc = steady.descriptor
    _require_middle_style(desc.inductor_style)
    if isinstance(netlist, Netlist) and netlist.n_switches != desc.n:
        raise AnalysisError("netlist and steady-state report disagree on n")
    duties = DutyVector.of(duties)
    n = desc.n
    period = 1.0 / f_sw
    tau = duties.as_array() * period
    branches = filtered_branches(n, desc.inductor_style)
    v_l = inductor_mode_voltages(duties, steady.v0, branches)
    inductor_pp = {}
    for col, j in enumerate(branches):
        vs = v_l[:, col] * tau
        up = vs[vs > 0].sum()
        down = -vs[vs < 0].sum()
        if abs(up - down) > 1e-9 * max(up, down, 1e-30):
            raise RuntimeError(f"volt-second imbalance on L{j}: {up:.12g} vs {down:.12g}")
        inductor_pp[f"L{j}"] = float(up / desc.inductance[col])

    # sampled ideal junction currents over one period
    t = (np.arange(samples) + 0.5) * period / samples
    edges = np.concatenate([[0.0], np.cumsum(tau)])
    mode = np.clip(np.searchsorted(edges, t, side="right"), 1, n)  # 1-based
    slopes = -v_l / np.array(desc.inductance)[None, :]
    starts, _ = _shape(duties, slopes, period)
    i_j = np.zeros((samples, n + 1))
    for col, j in enumerate(branches):
        wave = starts[mode - 1, col] + slopes[mode - 1, col] * (t - edges[mode - 1])
        i_j[:, j - 1] = wave - wave.mean() + steady.branch_currents.junction[j - 1]
    for s in range(samples):
        k = mode[s]
        i_j[s, 0] = -i_j[s, 1:k].sum()  # node 1 wire closes KCL of the top group
        i_j[s, n] = -i_j[s, :n].sum()

    atts = desc.attachments
    inject = _attachment_matrix(n, atts)
    known = np.array([0.0 if a.kind is AttachmentKind.VOLTAGE_SOURCE else c
                      for a, c in zip(atts, steady.branch_currents.attachments)])
    ext = (inject @ known)[None, :] - i_j  # net current into each junction from outside the ladder
    stack = np.cumsum(ext, axis=1)[:, :n]  # current through C_i, T_i -> T_{i+1}
    caps = np.array(desc.capacitance)
    src = [a for a in atts if a.kind is AttachmentKind.VOLTAGE_SOURCE]
    if src:
        s_mat = np.array([a.span.indicator(n) for a in src]).T  # (n, m)
        w = np.array([a.span.indicator(n) / caps for a in src])  # (m, n)
        x, *_ = np.linalg.lstsq(w @ s_mat, -(w @ stack.T), rcond=None)
        stack = stack + (s_mat @ x).T
    dv = np.cumsum(stack - stack.mean(axis=0), axis=0) * (period / samples) / caps[None, :]
    capacitor_pp = {f"C{i + 1}": float(np.ptp(dv[:, i])) for i in range(n)}
    return Ripple(inductor_pp, capacitor_pp)


# ---------------------------------------------------------------------------
# report

@dataclass(frozen=True)
class SteadyStateReport:
    descriptor: TopologyDescriptor
    duties: DutyVector
    v0: float
    port_voltages: np.ndarray
    span_voltages: tuple[float, ...]  # one per attachment
    branch_currents: BranchCurrents
    switch_voltage_stress: float
    stress_table: StressTable
    power_balance_residual: float
    f_sw: float | None = None
    ripple: Ripple | None = field(default=None)

    def junction_voltage(self, j: int) -> float:
        """Voltage of junction ``T_j`` above G."""
        return float(self.port_voltages[j - 1:].sum())

    def span_voltage(self, span: PortSpan) -> float:
        return float(span.indicator(self.descriptor.n) @ self.port_voltages)

    def to_dict(self) -> dict:
        n = self.descriptor.n
        out = {
            "n": n,
            "duties": list(self.duties.d),
            "v0": self.v0,
            "port_voltages": self.port_voltages.tolist(),
            "attachments": [
                {
                    "span": [a.span.top, a.span.bottom],
                    "label": a.span.label(n),
                    "kind": a.kind.value,
                    "value": a.value,
                    "voltage": v,
                    "current": i,
                }
                for a, v, i in zip(self.descriptor.attachments, self.span_voltages,
                                   self.branch_currents.attachments)
            ],
            "junction_currents": self.branch_currents.junction.tolist(),
            "inductor_currents": dict(self.branch_currents.inductors),
            "switch_voltage_stress": self.switch_voltage_stress,
            "stress_table": self.stress_table.rows.tolist(),
            "stress_table_mode_mean": self.stress_table.mode_mean_rows.tolist(),
            "power_balance_residual": self.power_balance_residual,
        }
        if self.f_sw is not None:
            out["f_sw"] = self.f_sw
        if self.stress_table.mode_extremes is not None:
            out["stress_table_extremes"] = self.stress_table.mode_extremes.tolist()
        if self.ripple is not None:
            out["ripple"] = {
                "inductor_pp": dict(self.ripple.inductor_pp),
                "capacitor_pp": dict(self.ripple.capacitor_pp),
            }
        return out


def steady_state(desc: TopologyDescriptor, duties, f_sw: float | None = None) -> SteadyStateReport:
    """Solve voltages, currents, stresses (and ripple when ``f_sw`` is given)."""
    _require_middle_style(desc.inductor_style)
    duties = DutyVector.of(duties)
    if len(duties) != desc.n:
        raise AnalysisError(f"{len(duties)} duties for an n={desc.n} converter")
    desc.require_source()
    sources = [(a.span, a.value) for a in desc.sources]
    volts, v0 = solve_port_voltages(duties, sources)
    currents = solve_branch_currents(desc, duties, v0, f_sw)
    offs = None if f_sw is None else mode_offsets(desc, duties, v0, f_sw)
    stress_v, table = switch_stresses(duties, currents.junction, v0, offs)
    if f_sw is not None:
        edges = junction_current_edges(desc, duties, v0, currents.junction, f_sw)
        table = StressTable(table.rows, table.mode_mean_rows, switch_current_extremes(edges))
    span_v = tuple(float(a.span.indicator(desc.n) @ volts) for a in desc.attachments)
    report = SteadyStateReport(
        desc, duties, v0, volts, span_v, currents, stress_v, table, currents.power_residual, f_sw
    )
    if f_sw is not None:
        report = SteadyStateReport(
            desc, duties, v0, volts, span_v, currents, stress_v, table,
            currents.power_residual, f_sw, ripple_estimates(desc, duties, report, f_sw),
        )
    return report
