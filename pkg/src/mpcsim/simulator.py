"""Fixed-step piecewise-linear simulation of switched netlists.

Switches and diodes are two-valued resistors (``r_on``/``r_off``), so each
switching mode is a linear RLC network.  Every (gate pattern, diode state,
step kind) combination is assembled once with modified nodal analysis,
factorised, and reduced to an affine map on the extended state

    s = [inductor currents, capacitor voltages,
         inductor voltages, capacitor currents]

where the last two blocks are the trapezoidal history terms.  The first step
after any topology change is a backward-Euler step: it starts each interval
from the physical state only, which keeps the trapezoidal rule from ringing
on algebraic constraints (capacitors pinned by sources) and makes the state
exact at the switching instants.

Periodic steady state is reached by shooting: the one-period map is affine,
so its fixed point is a single linear solve (repeated until the diode
conduction pattern stops changing), and a couple of ordinary periods then
confirm convergence.
"""

from __future__ import annotations

import itertools
import math
import re
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
import scipy.linalg

from mpcsim.pwm import DutyVector, ModeSchedule, PIGains, PIState, make_schedule, update_duties
from mpcsim.topology import GROUND, ElementKind, Netlist, TopologyDescriptor, _reachable

TR, BE = 0, 1


class SimulationError(RuntimeError):
    pass


class DiodeStateError(SimulationError):
    pass


@dataclass(frozen=True)
class SimConfig:
    f_sw: float = 30e3
    steps_per_period: int = 1000
    n_periods_max: int = 5000
    ss_tolerance: float = 1e-5
    r_on: float = 1e-3
    r_off: float = 1e6
    diode_vf: float = 0.0
    init_mode: str = "algebraic"
    shooting: bool = True

    def __post_init__(self):
        if self.steps_per_period < 50:
            raise ValueError("steps_per_period must be at least 50")
        if not 0 < self.r_on < self.r_off:
            raise ValueError("need 0 < r_on < r_off")
        if not self.ss_tolerance > 0:
            raise ValueError("ss_tolerance must be positive")
        if not self.f_sw > 0:
            raise ValueError("f_sw must be positive")
        if self.n_periods_max < 1:
            raise ValueError("n_periods_max must be at least 1")
        if self.init_mode not in ("zero", "algebraic"):
            raise ValueError(f"init_mode must be 'zero' or 'algebraic', got {self.init_mode!r}")

    @property
    def period(self) -> float:
        return 1.0 / self.f_sw

    @property
    def h(self) -> float:
        return self.period / self.steps_per_period


@dataclass
class DiscreteSystem:
    """Affine one-step map for one topology: ``s' = phi @ s + psi``.

    ``out_mat``/``out_vec`` give every trace channel at the end of the step
    from the state at its start; ``diode_v``/``diode_i`` do the same for the
    diode voltages and currents used by the conduction check.
    """

    phi: np.ndarray
    psi: np.ndarray
    out_mat: np.ndarray
    out_vec: np.ndarray
    diode_v: np.ndarray
    diode_vb: np.ndarray
    diode_i: np.ndarray
    diode_ib: np.ndarray


class SwitchedCircuit:
    """A netlist compiled for one step size."""

    def __init__(self, netlist: Netlist, config: SimConfig):
        self.netlist = netlist
        self.config = config
        self.h = config.h
        els = netlist.elements
        self.inductors = [e for e in els if e.kind is ElementKind.INDUCTOR]
        self.capacitors = [e for e in els if e.kind is ElementKind.CAPACITOR]
        self.resistors = [e for e in els if e.kind is ElementKind.RESISTOR]
        self.vsources = [e for e in els if e.kind is ElementKind.VOLTAGE_SOURCE]
        self.isources = [e for e in els if e.kind is ElementKind.CURRENT_SOURCE]
        self.gated = netlist.gated()
        self.diode_pos = [i for i, e in enumerate(self.gated) if e.kind is ElementKind.DIODE]
        self.node_ids = sorted(netlist.nodes - {GROUND})
        self.node_index = {nd: i for i, nd in enumerate(self.node_ids)}
        self.n_l = len(self.inductors)
        self.n_c = len(self.capacitors)
        self.n_state = self.n_l + self.n_c
        self.n_ext = 2 * self.n_state
        self.size = len(self.node_ids) + len(self.vsources)
        self._cache: dict[tuple, DiscreteSystem] = {}
        self.channels = self._channel_names()

    # -- naming ---------------------------------------------------------
    @property
    def state_labels(self) -> list[str]:
        return [f"i({e.id})" for e in self.inductors] + [f"v({e.id})" for e in self.capacitors]

    def _junction_labels(self) -> list[tuple[str, int]]:
        js = self.netlist.junctions
        return [(f"v(T{j + 1})", nd) for j, nd in enumerate(js[:-1])] if js else []

    def _span_labels(self) -> list[tuple[str, int, int]]:
        js = self.netlist.junctions
        if not js:
            return []
        n = len(js) - 1
        pos = {nd: j + 1 for j, nd in enumerate(js)}
        out = []
        for e in self.vsources + self.resistors + self.isources:
            a, b = e.terminals
            if a in pos and b in pos and pos[a] < pos[b]:
                bottom = "G" if pos[b] == n + 1 else f"T{pos[b]}"
                name = f"v(T{pos[a]}..{bottom})"
                if name not in [o[0] for o in out]:
                    out.append((name, a, b))
        return out

    def _channel_names(self) -> list[str]:
        names = list(self.state_labels)
        names += [f"v(n{nd})" for nd in self.node_ids]
        names += [lab for lab, _ in self._junction_labels()]
        names += [lab for lab, _, _ in self._span_labels()]
        for e in self.netlist.elements:
            if e.kind is not ElementKind.CAPACITOR:
                names.append(f"v({e.id})")
            if e.kind is not ElementKind.INDUCTOR:
                names.append(f"i({e.id})")
        names += [f"g({e.id})" for e in self.gated]
        return names

    # -- assembly -------------------------------------------------------
    def _incidence(self, a: int, b: int) -> np.ndarray:
        row = np.zeros(self.size)
        if a != GROUND:
            row[self.node_index[a]] += 1.0
        if b != GROUND:
            row[self.node_index[b]] -= 1.0
        return row

    def gate_key(self, gates: Sequence[bool], diodes: Sequence[bool]) -> tuple[bool, ...]:
        """Conduction pattern of all gated elements: switches follow their
        gate, diodes their conduction state."""
        key = list(gates)
        for pos, on in zip(self.diode_pos, diodes):
            key[pos] = on
        return tuple(bool(k) for k in key)

    def system(self, key: tuple[bool, ...], kind: int, scale: float = 1.0) -> DiscreteSystem:
        """Step map for conduction pattern ``key``; ``scale`` stretches the step."""
        cached = self._cache.get((key, kind, scale))
        if cached is None:
            cached = self._cache[(key, kind, scale)] = self._assemble(key, kind, scale)
        return cached

    def _assemble(self, key: tuple[bool, ...], kind: int, scale: float) -> DiscreteSystem:
        cfg = self.config
        h = self.h * scale
        size, n_ext, n_l = self.size, self.n_ext, self.n_l
        n_nodes = len(self.node_ids)
        m = np.zeros((size, size))
        rs = np.zeros((size, n_ext))
        rb = np.zeros(size)

        def stamp(e, g):
            p = self._incidence(*e.terminals)
            m[:] += g * np.outer(p, p)
            return p

        out_rows_z: dict[str, np.ndarray] = {}
        out_const: dict[str, float] = {}

        for e in self.resistors:
            p = stamp(e, 1.0 / e.value)
            out_rows_z[f"i({e.id})"] = p / e.value

        gated_g = []
        for on, e in zip(key, self.gated):
            g = 1.0 / (cfg.r_on if on else cfg.r_off)
            p = stamp(e, g)
            offset = 0.0
            if e.kind is ElementKind.DIODE and on and cfg.diode_vf:
                # conducting diode: i = g (v - vf)
                rb[:] += g * cfg.diode_vf * p
                offset = -g * cfg.diode_vf
            out_rows_z[f"i({e.id})"] = g * p
            out_const[f"i({e.id})"] = offset
            out_const[f"g({e.id})"] = 1.0 if on else 0.0
            gated_g.append((g, p, offset))

        g_l = []
        for idx, e in enumerate(self.inductors):
            g = h / (2 * e.value) if kind == TR else h / e.value
            p = stamp(e, g)
            g_l.append((g, p))
            # history current source flowing a -> b
            rs[:, idx] -= p
            if kind == TR:
                # previous inductor voltage lives at s[n_state + idx]
                rs[:, self.n_state + idx] -= g * p

        g_c = []
        for idx, e in enumerate(self.capacitors):
            g = 2 * e.value / h if kind == TR else e.value / h
            p = stamp(e, g)
            g_c.append((g, p))
            rs[:, n_l + idx] += g * p
            if kind == TR:
                rs[:, self.n_state + n_l + idx] += p

        for e in self.isources:
            p = self._incidence(*e.terminals)
            rb[:] -= e.value * p
            out_const[f"i({e.id})"] = e.value

        for idx, e in enumerate(self.vsources):
            p = self._incidence(*e.terminals)
            col = n_nodes + idx
            m[:, col] += p
            m[col, :] += p
            rb[col] = e.value
            sel = np.zeros(size)
            sel[col] = 1.0
            out_rows_z[f"i({e.id})"] = sel

        try:
            lu = scipy.linalg.lu_factor(m, check_finite=True)
        except (ValueError, scipy.linalg.LinAlgError) as exc:  # pragma: no cover - scipy raises rarely
            raise SimulationError(f"singular mode system: {exc}") from None
        diag = np.abs(np.diag(lu[0]))
        if diag.min() <= 1e-14 * max(diag.max(), 1.0):
            raise SimulationError(
                "singular mode system (floating subcircuit); isolated nodes: "
                + str(sorted(self._isolated(key)) or "none found, check source loops")
            )
        zs = scipy.linalg.lu_solve(lu, rs)
        zb = scipy.linalg.lu_solve(lu, rb)

        # state update s' = a_z z + a_s s
        a_z = np.zeros((n_ext, size))
        a_s = np.zeros((n_ext, n_ext))
        for idx, (g, p) in enumerate(g_l):
            a_z[idx] = g * p  # i' = g v' + i (+ g v for TR)
            a_s[idx, idx] = 1.0
            if kind == TR:
                a_s[idx, self.n_state + idx] = g
            a_z[self.n_state + idx] = p  # v_L'
        for idx, (g, p) in enumerate(g_c):
            a_z[n_l + idx] = p  # v_C'
            row = self.n_state + n_l + idx
            a_z[row] = g * p  # i_C' = g (v' - v) (- i for TR)
            a_s[row, n_l + idx] = -g
            if kind == TR:
                a_s[row, row] = -1.0
        phi = a_z @ zs + a_s
        psi = a_z @ zb

        # outputs: y = oz z + os s'
        names = self.channels
        oz = np.zeros((len(names), size))
        os_ = np.zeros((len(names), n_ext))
        oc = np.zeros(len(names))
        col_of = {nm: i for i, nm in enumerate(names)}
        for idx in range(self.n_state):
            os_[idx, idx] = 1.0
        for nd in self.node_ids:
            oz[col_of[f"v(n{nd})"], self.node_index[nd]] = 1.0
        for lab, nd in self._junction_labels():
            if nd != GROUND:
                oz[col_of[lab], self.node_index[nd]] = 1.0
        for lab, a, b in self._span_labels():
            oz[col_of[lab]] = self._incidence(a, b)
        for e in self.netlist.elements:
            vname = f"v({e.id})"
            if vname in col_of and e.kind is not ElementKind.CAPACITOR:
                oz[col_of[vname]] = self._incidence(*e.terminals)
        for nm, row in out_rows_z.items():
            oz[col_of[nm]] = row
        for nm, val in out_const.items():
            oc[col_of[nm]] = val
        for idx, e in enumerate(self.capacitors):
            os_[col_of[f"i({e.id})"], self.n_state + n_l + idx] = 1.0
        out_mat = oz @ zs + os_ @ phi
        out_vec = oz @ zb + os_ @ psi + oc

        dv = np.array([gated_g[pos][1] for pos in self.diode_pos]).reshape(len(self.diode_pos), size)
        di = np.array([gated_g[pos][0] * gated_g[pos][1] for pos in self.diode_pos]).reshape(
            len(self.diode_pos), size
        )
        dib = np.array([gated_g[pos][2] for pos in self.diode_pos])
        return DiscreteSystem(
            phi, psi, out_mat, out_vec,
            dv @ zs, dv @ zb, di @ zs, di @ zb + dib,
        )

    def _isolated(self, key) -> set[int]:
        live = [e for e in self.netlist.elements if e.kind is not ElementKind.CURRENT_SOURCE]
        return set(self.node_ids) - _reachable(live, GROUND)

    def check_floating(self, gate_patterns: Sequence[tuple[bool, ...]]) -> None:
        """Every node must reach G through non-switch elements or closed
        switches in at least one mode."""
        static = [e for e in self.netlist.elements
                  if e.kind not in (ElementKind.SWITCH, ElementKind.CURRENT_SOURCE)]
        reached: set[int] = set()
        for gates in gate_patterns:
            closed = [e for on, e in zip(gates, self.gated) if on and e.kind is ElementKind.SWITCH]
            reached |= _reachable(static + closed, GROUND)
        floating = set(self.node_ids) - reached
        if floating:
            raise SimulationError(f"nodes never connected to G in any mode: {sorted(floating)}")


# ---------------------------------------------------------------------------
# public building blocks

@dataclass
class ModeSystems:
    """Compiled circuit plus the per-period step plan."""

    circuit: SwitchedCircuit
    schedule: ModeSchedule
    plan: list[tuple[int, float, int]]  # (mode, first step length in h, step count)
    gates: dict[int, tuple[bool, ...]]

    def systems(self, diodes: Sequence[bool] | None = None) -> dict[int, DiscreteSystem]:
        """Trapezoidal systems per mode for one diode conduction pattern."""
        diodes = diodes if diodes is not None else (True,) * len(self.circuit.diode_pos)
        return {
            mode: self.circuit.system(self.circuit.gate_key(self.gates[mode], diodes), TR)
            for mode, _, _ in self.plan
        }

    @property
    def steps_per_period(self) -> int:
        return sum(count for _, _, count in self.plan)


MIN_MODE_STEPS = 1e-3


def _plan(schedule: ModeSchedule, steps_per_period: int) -> list[tuple[int, float, int]]:
    """Per-mode step plan with exact mode lengths.

    The first (backward-Euler) step of every mode absorbs the fractional part
    of ``D_k * steps_per_period`` so that it lasts between 0.5 and 1.5 steps;
    modes shorter than ``MIN_MODE_STEPS`` steps are dropped.
    """
    plan = []
    for i, d in enumerate(schedule.duties):
        exact = d * steps_per_period
        if exact < MIN_MODE_STEPS:
            continue
        whole = math.floor(exact)
        frac = exact - whole
        if whole == 0:
            plan.append((i + 1, frac, 1))
        elif frac < 0.5:
            plan.append((i + 1, 1.0 + frac, whole))
        else:
            plan.append((i + 1, frac, whole + 1))
    return plan


def build_mode_systems(
    netlist: Netlist,
    schedule: ModeSchedule,
    config: SimConfig,
    circuit: SwitchedCircuit | None = None,
) -> ModeSystems:
    """Compile ``netlist`` and assemble one system per non-empty mode.

    Diode combinations beyond the all-conducting pattern are assembled
    lazily during stepping.
    """
    if schedule.dead_time > 0:
        raise SimulationError("dead time is not supported by the simulator; use dead_time=0")
    if len(schedule.duties) != netlist.n_switches:
        raise SimulationError("schedule and netlist disagree on the switch count")
    if abs(schedule.period - config.period) > 1e-12 * config.period:
        raise SimulationError("schedule period does not match config.f_sw")
    circuit = circuit or SwitchedCircuit(netlist, config)
    plan = _plan(schedule, config.steps_per_period)
    n = netlist.n_switches
    gates = {mode: tuple(i != mode for i in range(1, n + 1)) for mode, _, _ in plan}
    circuit.check_floating(list(gates.values()))
    systems = ModeSystems(circuit, schedule, plan, gates)
    systems.systems()
    return systems


def _candidate_patterns(prev: tuple[bool, ...], n: int):
    yield prev
    for bits in itertools.product((True, False), repeat=n):
        if bits != prev:
            yield bits


def step(
    systems: ModeSystems,
    state: np.ndarray,
    mode: int,
    first: bool,
    diodes: tuple[bool, ...] = (),
    scale: float = 1.0,
) -> tuple[np.ndarray, tuple[bool, ...], int]:
    """Advance the extended state by one step in ``mode``.

    ``first`` marks the opening step of a mode (always backward Euler, of
    length ``scale`` steps).  Returns the new state, the diode conduction
    pattern used and the step kind (``TR`` or ``BE``).  With diodes present,
    patterns are tried with the previous one first until every conducting
    diode carries forward current and every blocking diode is reverse biased.
    """
    circ = systems.circuit
    gates = systems.gates[mode]
    nd = len(circ.diode_pos)
    scale = scale if first else 1.0
    if nd == 0:
        kind = BE if first else TR
        sys_ = circ.system(circ.gate_key(gates, ()), kind, scale)
        return sys_.phi @ state + sys_.psi, (), kind
    if not diodes:
        diodes = (True,) * nd
    cfg = circ.config
    for trial in _candidate_patterns(tuple(diodes), nd):
        kind = BE if (first or trial != diodes) else TR
        sys_ = circ.system(circ.gate_key(gates, trial), kind, scale)
        if _consistent(sys_, state, trial, cfg):
            return sys_.phi @ state + sys_.psi, trial, kind
    raise DiodeStateError("diode state oscillation: no consistent conduction pattern")


def _consistent(sys_: DiscreteSystem, state, trial, cfg: SimConfig) -> bool:
    v = sys_.diode_v @ state + sys_.diode_vb
    i = sys_.diode_i @ state + sys_.diode_ib
    for on, vv, ii in zip(trial, v, i):
        if on and ii < -1e-7:
            return False
        if not on and vv > cfg.diode_vf + 1e-6:
            return False
    return True


# ---------------------------------------------------------------------------
# traces

@dataclass
class WaveformTrace:
    """Sampled channels, one sample per integration step.

    ``data[k]`` holds every channel at ``time[k]``.  ``be[k]`` and ``mode[k]``
    describe the step from sample ``k`` to ``k+1``; backward-Euler steps
    represent the interval by their end value, trapezoidal ones by the mean
    of both ends, and :func:`measure` integrates accordingly.  Steps are
    uniform except the first step of each mode, which is stretched or
    shrunk so that mode boundaries fall exactly at ``D_k T``.
    """

    time: np.ndarray
    channels: list[str]
    data: np.ndarray
    be: np.ndarray
    mode: np.ndarray
    period: float
    steps_per_period: int

    def __post_init__(self):
        self._col = {c: i for i, c in enumerate(self.channels)}

    def __contains__(self, name: str) -> bool:
        return name in self._col or _span_parts(name) is not None

    def column(self, name: str) -> np.ndarray:
        if name in self._col:
            return self.data[:, self._col[name]]
        parts = _span_parts(name)
        if parts is not None:
            return self._junction(parts[0]) - self._junction(parts[1])
        raise KeyError(f"unknown channel {name!r}")

    def _junction(self, label: str) -> np.ndarray:
        if label == "G":
            return np.zeros(len(self.time))
        key = f"v({label})"
        if key not in self._col:
            raise KeyError(f"unknown channel v({label})")
        return self.data[:, self._col[key]]

    def interval_values(self, values: np.ndarray) -> np.ndarray:
        """Per-step representative values consistent with the integrator."""
        return np.where(self.be, values[1:], 0.5 * (values[:-1] + values[1:]))

    def average(self, values: np.ndarray, select: np.ndarray | None = None) -> float:
        """Time average of ``values`` (one per sample) over the trace."""
        seg = self.interval_values(values)
        dt = np.diff(self.time)
        if select is not None:
            seg, dt = seg[select], dt[select]
        return float(np.dot(seg, dt) / dt.sum())

    def window(self, periods: int) -> "WaveformTrace":
        steps = periods * self.steps_per_period
        if steps > len(self.be):
            raise ValueError(f"trace holds {len(self.be) // self.steps_per_period} periods, asked for {periods}")
        start = len(self.be) - steps
        return WaveformTrace(
            self.time[start:], self.channels, self.data[start:], self.be[start:], self.mode[start:],
            self.period, self.steps_per_period,
        )

    def to_csv(self, path) -> None:
        header = "time," + ",".join(self.channels)
        table = np.column_stack([self.time, self.data])
        np.savetxt(path, table, delimiter=",", header=header, comments="", fmt="%.17g")


_SPAN_RE = re.compile(r"^v\((T\d+)\.\.(T\d+|G)\)$")


def _span_parts(name: str):
    m = _SPAN_RE.match(name)
    return (m.group(1), m.group(2)) if m else None


def measure(trace: WaveformTrace, channel: str, window: int | None = None) -> dict[str, float]:
    """Mean, rms, peak-to-peak, min and max of ``channel`` over the last
    ``window`` periods (the whole trace when None)."""
    if window is not None:
        trace = trace.window(window)
    y = trace.column(channel)
    return {
        "mean": trace.average(y),
        "rms": math.sqrt(max(trace.average(y * y), 0.0)),
        "p2p": float(y.max() - y.min()),
        "min": float(y.min()),
        "max": float(y.max()),
    }


def mean_product(trace: WaveformTrace, a: str, b: str) -> float:
    return trace.average(trace.column(a) * trace.column(b))


def mode_means(trace: WaveformTrace, channel: str) -> dict[int, float]:
    """Average of ``channel`` over each mode's steps."""
    y = trace.column(channel)
    return {int(k): trace.average(y, trace.mode == k) for k in np.unique(trace.mode)}


# ---------------------------------------------------------------------------
# period simulation

@dataclass
class _PeriodRun:
    states: np.ndarray  # extended state at the start of every step, plus the final one
    keys: list[tuple]  # (mode, diode pattern, kind, step scale) per step
    diodes: tuple[bool, ...]


def _run_period(systems: ModeSystems, s0: np.ndarray, diodes: tuple[bool, ...]) -> _PeriodRun:
    circ = systems.circuit
    states = np.empty((systems.steps_per_period + 1, circ.n_ext))
    states[0] = s0
    keys = []
    s = s0
    k = 0
    if not circ.diode_pos:
        for mode, first, count in systems.plan:
            key = circ.gate_key(systems.gates[mode], ())
            be = circ.system(key, BE, first)
            tr = circ.system(key, TR)
            s = be.phi @ s + be.psi
            k += 1
            states[k] = s
            phi, psi = tr.phi, tr.psi
            for _ in range(count - 1):
                s = phi @ s + psi
                k += 1
                states[k] = s
            keys.append((mode, (), BE, first))
            keys.extend([(mode, (), TR, 1.0)] * (count - 1))
        return _PeriodRun(states, keys, ())
    for mode, first, count in systems.plan:
        for i in range(count):
            s, diodes, kind = step(systems, s, mode, i == 0, diodes, first)
            k += 1
            states[k] = s
            keys.append((mode, diodes, kind, first if i == 0 else 1.0))
    return _PeriodRun(states, keys, diodes)


def _system_for(systems: ModeSystems, key) -> DiscreteSystem:
    mode, diodes, kind, scale = key
    circ = systems.circuit
    return circ.system(circ.gate_key(systems.gates[mode], diodes), kind, scale)


def _outputs(systems: ModeSystems, run: _PeriodRun) -> np.ndarray:
    """Channel values at the end of every step of ``run``."""
    out = np.empty((len(run.keys), len(systems.circuit.channels)))
    start = 0
    for key, group in itertools.groupby(run.keys):
        count = len(list(group))
        sys_ = _system_for(systems, key)
        out[start:start + count] = run.states[start:start + count] @ sys_.out_mat.T + sys_.out_vec
        start += count
    return out


def _period_map(systems: ModeSystems, keys) -> tuple[np.ndarray, np.ndarray]:
    dim = systems.circuit.n_ext
    aug = np.eye(dim + 1)
    for key, group in itertools.groupby(keys):
        count = len(list(group))
        sys_ = _system_for(systems, key)
        step_aug = np.eye(dim + 1)
        step_aug[:dim, :dim] = sys_.phi
        step_aug[:dim, dim] = sys_.psi
        aug = np.linalg.matrix_power(step_aug, count) @ aug
    return aug[:dim, :dim], aug[:dim, dim]


def _fixed_point(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    a = np.eye(len(q)) - p
    try:
        x = np.linalg.solve(a, q)
        if np.all(np.isfinite(x)) and np.allclose(a @ x, q, rtol=1e-8, atol=1e-9 * max(1.0, np.abs(q).max())):
            return x
    except np.linalg.LinAlgError:
        pass
    x, *_ = np.linalg.lstsq(a, q, rcond=1e-13)
    return x


def _shoot(systems: ModeSystems, s0: np.ndarray, diodes: tuple[bool, ...], max_iter: int = 40):
    """Periodic orbit by repeated fixed-point solves of the one-period map."""
    if not systems.circuit.diode_pos:
        keys = []
        for mode, first, count in systems.plan:
            keys += [(mode, (), BE, first)] + [(mode, (), TR, 1.0)] * (count - 1)
        p, q = _period_map(systems, keys)
        return _fixed_point(p, q), ()
    s = s0
    seen_keys = None
    for _ in range(max_iter):
        run = _run_period(systems, s, diodes)
        if run.keys == seen_keys and np.allclose(run.states[-1], s, rtol=1e-9, atol=1e-9):
            return s, run.diodes
        seen_keys = run.keys
        p, q = _period_map(systems, run.keys)
        s_next = _fixed_point(p, q)
        s = s_next
        diodes = run.keys[-1][1]
    return s, diodes


def _cycle_average(run: _PeriodRun, n_state: int) -> np.ndarray:
    dt = np.array([k[3] for k in run.keys])
    return dt @ run.states[1:, :n_state] / dt.sum()


def _relative_change(prev: np.ndarray, new: np.ndarray, n_l: int) -> float:
    worst = 0.0
    for block in (slice(0, n_l), slice(n_l, len(new))):
        a, b = prev[block], new[block]
        if a.size == 0:
            continue
        floor = 1e-3 * max(np.abs(a).max(), np.abs(b).max()) + 1e-12
        scale = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
        worst = max(worst, float(np.max(np.abs(b - a) / scale)))
    return worst


@dataclass
class SimResult:
    trace: WaveformTrace
    periods_used: int
    converged: bool
    state: np.ndarray  # physical state at the end of the trace
    state_labels: list[str]
    duties: DutyVector
    extra: dict = field(default_factory=dict)


def initial_state(
    circuit: SwitchedCircuit,
    duties: DutyVector,
    config: SimConfig,
    descriptor: TopologyDescriptor | None,
) -> np.ndarray:
    """Extended start state: zeros, or the closed-form averages."""
    s = np.zeros(circuit.n_ext)
    if config.init_mode == "zero" or descriptor is None:
        return s
    from mpcsim.analysis import steady_state

    try:
        report = steady_state(descriptor, duties)
    except ValueError:
        return s
    currents = report.branch_currents.inductors
    for idx, e in enumerate(circuit.inductors):
        s[idx] = currents.get(e.id, 0.0)
    for idx, e in enumerate(circuit.capacitors):
        pos = e.id[1:]
        if e.id.startswith("C") and pos.isdigit() and 1 <= int(pos) <= descriptor.n:
            s[circuit.n_l + idx] = report.port_voltages[int(pos) - 1]
    return s


def _make_trace(systems: ModeSystems, run: _PeriodRun, prev_last: np.ndarray | None, t0: float) -> WaveformTrace:
    out = _outputs(systems, run)
    first = out[0] if prev_last is None else prev_last
    data = np.vstack([first, out])
    n = len(run.keys)
    h = systems.circuit.h
    time = t0 + h * np.concatenate([[0.0], np.cumsum([k[3] for k in run.keys])])
    be = np.array([k[2] == BE for k in run.keys])
    mode = np.array([k[0] for k in run.keys])
    return WaveformTrace(time, systems.circuit.channels, data, be, mode,
                         systems.schedule.period, n)


def run_to_steady_state(
    netlist: Netlist,
    schedule: ModeSchedule,
    config: SimConfig,
    descriptor: TopologyDescriptor | None = None,
    state: np.ndarray | None = None,
) -> SimResult:
    """Simulate whole periods until the cycle-averaged state settles.

    ``descriptor`` (the attachments and component values the netlist was
    built from) enables algebraic seeding.  Non-convergence within
    ``n_periods_max`` is reported in the result, not raised.
    """
    systems = build_mode_systems(netlist, schedule, config)
    circ = systems.circuit
    if state is None:
        s = initial_state(circ, schedule.duties, config, descriptor)
    else:
        s = np.zeros(circ.n_ext)
        s[: len(state)] = state
    diodes: tuple[bool, ...] = (True,) * len(circ.diode_pos)
    if config.shooting:
        s, diodes = _shoot(systems, s, diodes)

    prev_avg = None
    prev_last = None
    converged = False
    periods = 0
    run = None
    while periods < config.n_periods_max:
        if run is not None:
            prev_last = _outputs(systems, run)[-1]
        run = _run_period(systems, s, diodes)
        periods += 1
        s = run.states[-1]
        diodes = run.diodes
        avg = _cycle_average(run, circ.n_state)
        if prev_avg is not None and _relative_change(prev_avg, avg, circ.n_l) < config.ss_tolerance:
            converged = True
            break
        prev_avg = avg
    trace = _make_trace(systems, run, prev_last, (periods - 1) * schedule.period)
    return SimResult(trace, periods, converged, s[: circ.n_state].copy(), circ.state_labels, schedule.duties)


# ---------------------------------------------------------------------------
# closed loop

def port_voltage_channels(netlist: Netlist) -> list[str]:
    """Channels giving ``V_1..V_n`` (the stack capacitor voltages)."""
    if not netlist.junctions:
        raise SimulationError("netlist has no stack junction metadata")
    n = netlist.n_switches
    names = []
    for i in range(1, n + 1):
        bottom = "G" if i + 1 == n + 1 else f"T{i + 1}"
        names.append(f"v(T{i}..{bottom})")
    return names


@dataclass
class ClosedLoopResult:
    trace: WaveformTrace
    duties: DutyVector
    periods: int
    converged: bool
    duty_history: np.ndarray
    state: PIState


def run_closed_loop(
    netlist: Netlist,
    config: SimConfig,
    references: Mapping[int, float],
    initial_duties,
    gains: PIGains = PIGains(),
    slack: int | None = None,
    descriptor: TopologyDescriptor | None = None,
    max_periods: int | None = None,
    duty_tol: float = 1e-5,
) -> ClosedLoopResult:
    """Simulate with duties updated once per period by the PI regulator.

    Stops when the duties move less than ``duty_tol`` and the plant's
    cycle-averaged state changes less than ``ss_tolerance`` between
    consecutive periods.
    """
    duties = DutyVector.of(initial_duties)
    max_periods = max_periods or config.n_periods_max
    circ = SwitchedCircuit(netlist, config)
    pi = PIState.start(duties, references)
    channels = port_voltage_channels(netlist)
    s = initial_state(circ, duties, config, descriptor)
    diodes: tuple[bool, ...] = (True,) * len(circ.diode_pos)
    history = [duties.d]
    prev_avg = None
    prev_last = None
    run = systems = None
    converged = False
    periods = 0
    while periods < max_periods:
        schedule = make_schedule(duties, config.f_sw)
        if run is not None:
            prev_last = _outputs(systems, run)[-1]
        systems = build_mode_systems(netlist, schedule, config, circuit=circ)
        run = _run_period(systems, s, diodes)
        periods += 1
        s = run.states[-1]
        diodes = run.diodes
        trace = _make_trace(systems, run, prev_last, (periods - 1) * config.period)
        measured = [measure(trace, ch)["mean"] for ch in channels]
        new_duties, pi = update_duties(measured, references, pi, config.period, gains, slack)
        history.append(new_duties.d)
        avg = _cycle_average(run, circ.n_state)
        settled = prev_avg is not None and _relative_change(prev_avg, avg, circ.n_l) < config.ss_tolerance
        moved = float(np.max(np.abs(new_duties.as_array() - duties.as_array())))
        prev_avg = avg
        duties = new_duties
        if settled and moved < duty_tol:
            converged = True
            break
    return ClosedLoopResult(trace, duties, periods, converged, np.array(history), pi)
