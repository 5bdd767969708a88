import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mpcsim.pwm import (
    DutyError,
    DutyVector,
    PIGains,
    PIState,
    ReferencesUnreachable,
    gate_states_at,
    make_schedule,
    mode_at,
    quantize,
    update_duties,
)


def duty_vectors(n_min=2, n_max=8, floor=0.0):
    """Random duty vectors, each entry at least ``floor``."""
    @st.composite
    def build(draw):
        n = draw(st.integers(n_min, n_max))
        raw = draw(st.lists(st.floats(0.01, 1.0), min_size=n, max_size=n))
        w = np.array(raw) / sum(raw)
        d = floor + (1 - n * floor) * w
        return DutyVector(tuple(d / d.sum()))
    return build()


# -- duty vectors -------------------------------------------------------------

@pytest.mark.parametrize("bad", [(0.5, 0.4), (0.6, 0.5), (-0.1, 1.1), (float("nan"), 1.0), ()])
def test_duty_vector_rejects(bad):
    with pytest.raises(DutyError):
        DutyVector(bad)


def test_duty_vector_allows_zero_entries():
    d = DutyVector((0.0, 1.0, 0.0))
    assert len(d) == 3 and d[1] == 1.0


def test_duty_sum_tolerance():
    DutyVector((0.35, 0.25, 0.4 + 1e-12))
    with pytest.raises(DutyError, match="sum to 1"):
        DutyVector((0.35, 0.25, 0.41))


# -- schedule -----------------------------------------------------------------

def test_schedule_boundaries():
    s = make_schedule((0.35, 0.25, 0.40), 30e3)
    assert s.period == pytest.approx(1 / 30e3)
    assert np.allclose(np.array(s.boundaries) * 30e3, [0, 0.35, 0.6, 1.0])
    assert s.boundaries[-1] == s.period


def test_mode_at_and_gates():
    s = make_schedule((0.35, 0.25, 0.40), 1.0)
    assert [mode_at(s, t) for t in (0.0, 0.34, 0.35, 0.59, 0.6, 0.99)] == [1, 1, 2, 2, 3, 3]
    assert mode_at(s, 1.1) == 1
    assert gate_states_at(s, 0.5).off == (2,)
    assert gate_states_at(s, 0.5).bits == (True, False, True)


def test_zero_length_mode_is_skipped():
    s = make_schedule((0.5, 0.0, 0.5), 1.0)
    assert s.active_modes() == [1, 3]
    assert mode_at(s, 0.5) == 3


def test_dead_time_gates_all_off():
    s = make_schedule((0.5, 0.5), 1.0, dead_time=0.01)
    assert gate_states_at(s, 0.505).off == (1, 2)
    assert gate_states_at(s, 0.52).off == (2,)
    with pytest.raises(DutyError, match="dead time"):
        make_schedule((0.5, 0.5), 1.0, dead_time=0.6)


def test_schedule_rejects_bad_frequency():
    with pytest.raises(DutyError):
        make_schedule((0.5, 0.5), 0.0)


@given(duty_vectors(), st.floats(0.0, 0.999))
def test_exactly_one_switch_off(d, frac):
    s = make_schedule(d, 1e4)
    g = gate_states_at(s, frac * s.period)
    assert len(g.off) == 1
    assert d[g.off[0] - 1] > 0


@given(duty_vectors(), st.integers(50, 5000))
@settings(max_examples=200)
def test_quantize_sums_and_rounds(d, steps):
    q = quantize(make_schedule(d, 1.0), steps)
    assert sum(q) == steps
    assert all(abs(qi - di * steps) < 1 for qi, di in zip(q, d))


# -- PI duty update ------------------------------------------------------------

def test_pi_moves_duty_toward_reference():
    st0 = PIState.start((0.45, 0.25, 0.30), [3])
    d, st1 = update_duties([50.0, 25.0, 25.0], {3: 40.0}, st0, dt=1e-3, slack=1)
    assert d[2] > 0.30  # V3 too low -> larger off-duty on port 3
    assert d[1] == pytest.approx(0.25)
    assert math.fsum(d) == pytest.approx(1.0)
    d2, _ = update_duties([40.0, 25.0, 35.0], {3: 30.0}, st1, dt=1e-3, slack=1)
    assert d2[2] < d[2]


def test_pi_clamps_to_minimum():
    st0 = PIState.start((0.5, 0.5), [2])
    d, _ = update_duties([50.0, 50.0], {2: 0.0}, st0, dt=10.0, gains=PIGains(ki=1.0))
    assert d[1] == pytest.approx(0.02)
    assert d[0] == pytest.approx(0.98)


def test_pi_keeps_slack_at_minimum():
    st0 = PIState.start((0.3, 0.3, 0.4), [2, 3])
    d, _ = update_duties([30.0, 30.0, 40.0], {2: 48.0, 3: 49.0}, st0, dt=10.0, gains=PIGains(ki=1.0), slack=1)
    assert d[0] == pytest.approx(0.02)
    assert math.fsum(d) == pytest.approx(1.0)


def test_pi_unreachable_references():
    st0 = PIState.start((0.3, 0.3, 0.4), [2, 3])
    with pytest.raises(ReferencesUnreachable, match="unreachable"):
        update_duties([30.0, 30.0, 40.0], {2: 60.0, 3: 50.0}, st0, dt=1e-3)


@pytest.mark.parametrize("refs,slack", [({1: 1.0, 2: 1.0}, None), ({2: 1.0}, 2), ({4: 1.0}, None)])
def test_pi_rejects_bad_port_sets(refs, slack):
    st0 = PIState.start((0.5, 0.5), [])
    with pytest.raises(DutyError):
        update_duties([1.0, 1.0], refs, st0, dt=1e-3, slack=slack)


@given(duty_vectors(n_min=3, n_max=6, floor=0.03), st.floats(-20, 20), st.floats(1e-6, 1e-2))
def test_pi_output_is_a_duty_vector(d, err, dt):
    n = len(d)
    measured = np.array(d.d) * 100.0
    refs = {n: float(measured[-1] + err)}
    try:
        out, _ = update_duties(measured, refs, PIState.start(d, refs), dt=dt)
    except ReferencesUnreachable:
        return
    assert math.fsum(out) == pytest.approx(1.0)
    assert min(out) >= 0.02 - 1e-9
