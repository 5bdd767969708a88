"""Gate scheduling and duty-ratio control.

Duty ratio ``D_i`` is the fraction of the switching period during which
switch ``S_i`` is OFF.  One period is split into ``n`` consecutive modes; in
mode ``i`` switch ``S_i`` is off and every other switch conducts.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

DUTY_SUM_TOL = 1e-9


class DutyError(ValueError):
    pass


class ReferencesUnreachable(DutyError):
    pass


@dataclass(frozen=True)
class DutyVector:
    """Per-switch OFF-duty ratios; they sum to one."""

    d: tuple[float, ...]

    def __post_init__(self):
        d = tuple(float(x) for x in self.d)
        object.__setattr__(self, "d", d)
        if len(d) < 1:
            raise DutyError("empty duty vector")
        if any(not math.isfinite(x) for x in d):
            raise DutyError(f"non-finite duty ratio in {d}")
        if any(x < 0 for x in d):
            raise DutyError(f"negative duty ratio in {d}")
        if any(x > 1 for x in d):
            raise DutyError(f"duty ratio above 1 in {d}")
        if abs(sum(d) - 1.0) > DUTY_SUM_TOL:
            raise DutyError(f"duty ratios must sum to 1, got {sum(d):.12g}")

    @classmethod
    def of(cls, duties: "DutyVector | Iterable[float]") -> "DutyVector":
        return duties if isinstance(duties, DutyVector) else cls(tuple(duties))

    def __len__(self):
        return len(self.d)

    def __iter__(self):
        return iter(self.d)

    def __getitem__(self, i):
        return self.d[i]

    def as_array(self) -> np.ndarray:
        return np.array(self.d)


@dataclass(frozen=True)
class GateState:
    bits: tuple[bool, ...]  # True = switch gated on

    @property
    def off(self) -> tuple[int, ...]:
        """1-based indices of the switches gated off."""
        return tuple(i + 1 for i, b in enumerate(self.bits) if not b)


@dataclass(frozen=True)
class ModeSchedule:
    """Time partition of one switching period into the ``n`` modes.

    ``boundaries`` holds ``t_0 = 0 < ... < t_n = period`` (equal neighbours
    mark zero-length modes).  With ``dead_time > 0`` the first ``dead_time``
    seconds of every non-empty mode have all switches off.
    """

    duties: DutyVector
    period: float
    boundaries: tuple[float, ...]
    dead_time: float = 0.0

    @property
    def n(self) -> int:
        return len(self.duties)

    @property
    def f_sw(self) -> float:
        return 1.0 / self.period

    def durations(self) -> np.ndarray:
        return np.diff(self.boundaries)

    def active_modes(self) -> list[int]:
        """1-based indices of modes with non-zero length."""
        return [i + 1 for i, d in enumerate(self.duties) if d > 0]


def make_schedule(duties, f_sw: float, dead_time: float = 0.0) -> ModeSchedule:
    """Sequential mode schedule, modes ``1..n`` in order, mode ``i`` lasting ``D_i T``."""
    duties = DutyVector.of(duties)
    if not f_sw > 0:
        raise DutyError(f"switching frequency must be positive, got {f_sw}")
    period = 1.0 / f_sw
    edges = np.concatenate([[0.0], np.cumsum(duties.as_array())]) * period
    edges[-1] = period
    if dead_time < 0:
        raise DutyError("dead time must be non-negative")
    if dead_time > 0:
        shortest = min(d for d in duties if d > 0) * period
        if dead_time >= shortest:
            raise DutyError(f"dead time {dead_time:g}s does not fit the shortest mode ({shortest:g}s)")
    return ModeSchedule(duties, period, tuple(float(t) for t in edges), float(dead_time))


def mode_at(schedule: ModeSchedule, t: float) -> int:
    """1-based mode active at time ``t`` (periodic in ``t``)."""
    tau = math.fmod(t, schedule.period)
    if tau < 0:
        tau += schedule.period
    edges = schedule.boundaries
    for i in range(schedule.n):
        if edges[i] <= tau < edges[i + 1]:
            return i + 1
    # tau rounded up to exactly one period: wrap to the first non-empty mode
    return schedule.active_modes()[0]


def gate_states_at(schedule: ModeSchedule, t: float) -> GateState:
    if t < 0:
        raise DutyError("time must be non-negative")
    mode = mode_at(schedule, t)
    if schedule.dead_time > 0:
        tau = math.fmod(t, schedule.period)
        if tau - schedule.boundaries[mode - 1] < schedule.dead_time:
            return GateState((False,) * schedule.n)
    return GateState(tuple(i != mode for i in range(1, schedule.n + 1)))


def quantize(schedule: ModeSchedule, steps_per_period: int) -> list[int]:
    """Whole-step mode lengths summing to ``steps_per_period``.

    Largest-remainder rounding; each mode is off by less than one step.
    """
    exact = schedule.duties.as_array() * steps_per_period
    steps = np.floor(exact).astype(int)
    short = steps_per_period - int(steps.sum())
    order = np.argsort(-(exact - steps), kind="stable")
    steps[order[:short]] += 1
    return [int(s) for s in steps]


# ---------------------------------------------------------------------------
# duty-ratio control

@dataclass(frozen=True)
class PIGains:
    kp: float = 0.001  # per volt
    ki: float = 0.3  # per volt-second
    d_min: float = 0.02


@dataclass(frozen=True)
class PIState:
    """Integrator values per port (1-based key) plus the last duty vector."""

    duties: DutyVector
    integrators: Mapping[int, float] = field(default_factory=dict)

    @classmethod
    def start(cls, duties, regulated: Iterable[int]) -> "PIState":
        duties = DutyVector.of(duties)
        return cls(duties, {i: duties[i - 1] for i in regulated})


def update_duties(
    measured: Sequence[float],
    references: Mapping[int, float],
    state: PIState,
    dt: float,
    gains: PIGains = PIGains(),
    slack: int | None = None,
) -> tuple[DutyVector, PIState]:
    """One PI update of the duty vector.

    Each regulated port ``i`` (key of ``references``) gets
    ``D_i = integral + kp * error``.  Ports that are neither regulated nor the
    slack keep their previous duty; the slack port takes ``1 - sum(others)``.
    All duties are clamped to ``[d_min, 1]`` and, if the slack would fall
    below ``d_min``, the others are scaled down to make room.
    """
    measured = np.asarray(measured, dtype=float)
    n = len(measured)
    if n != len(state.duties):
        raise DutyError("measurement and duty vector sizes differ")
    if dt <= 0:
        raise DutyError("dt must be positive")
    regulated = sorted(int(i) for i in references)
    if len(regulated) > n - 1:
        raise DutyError(f"at most {n - 1} ports can be regulated, got {len(regulated)}")
    if any(not 1 <= i <= n for i in regulated):
        raise DutyError(f"regulated ports must be within 1..{n}")
    free = [i for i in range(1, n + 1) if i not in regulated]
    if slack is None:
        slack = free[0]
    if slack in regulated:
        raise DutyError(f"slack port {slack} cannot also be regulated")

    v0 = float(measured.sum())
    demand = sum(references[i] for i in regulated)
    if v0 > 0 and demand > v0 * (1.0 - gains.d_min * len(free)):
        raise ReferencesUnreachable(
            f"references unreachable: regulated ports ask for {demand:g} V of a {v0:g} V stack"
        )

    d = np.array(state.duties.d)
    integrators = dict(state.integrators)
    for i in regulated:
        err = references[i] - measured[i - 1]
        integ = integrators.get(i, d[i - 1]) + gains.ki * err * dt
        integrators[i] = integ
        d[i - 1] = integ + gains.kp * err

    others = [i - 1 for i in range(1, n + 1) if i != slack]
    d[others] = np.clip(d[others], gains.d_min, 1.0)
    rest = 1.0 - d[others].sum()
    if rest < gains.d_min:
        d[others] *= (1.0 - gains.d_min) / d[others].sum()
        if np.any(d[others] < gains.d_min - 1e-12):
            raise ReferencesUnreachable("references unreachable: duties cannot be renormalized")
        rest = gains.d_min
    d[slack - 1] = rest
    d = np.clip(d, 0.0, 1.0)
    d /= d.sum()
    duties = DutyVector(tuple(d))
    return duties, PIState(duties, integrators)
