from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import D_TEST, F_SW, diso_desc, dual_buck_desc, random_operating_point, sido_desc
from oracles import kcl_switch_currents, ripple_pp, volt_second_junction_potentials
from mpcsim.analysis import (
    AnalysisError,
    InconsistentSourcesError,
    UnpoweredSpanError,
    inductor_mode_voltages,
    solve_branch_currents,
    solve_duties_for_voltages,
    solve_port_voltages,
    steady_state,
    switch_stresses,
    table_ii_coefficients,
)
from mpcsim.topology import Attachment, AttachmentKind, PortSpan, TopologyDescriptor, TopologyError

K = AttachmentKind
G3 = 4  # bottom junction index for n = 3


# -- port voltages --------------------------------------------------------------

def test_single_bottom_source():
    v, v0 = solve_port_voltages(D_TEST, [(PortSpan(3, G3), 40.0)])
    assert v0 == pytest.approx(100.0)
    assert np.allclose(v, [35, 25, 40])
    assert v[1:].sum() == pytest.approx(65.0)


def test_two_consistent_sources():
    v, v0 = solve_port_voltages(D_TEST, [(PortSpan(1, G3), 50.0), (PortSpan(3, G3), 20.0)])
    assert v0 == pytest.approx(50.0)
    assert v[1:].sum() == pytest.approx(32.5)


@given(st.lists(st.floats(0.01, 1.0), min_size=2, max_size=8), st.floats(0.1, 1000))
def test_full_span_source_sets_v0(raw, vs):
    d = np.array(raw) / sum(raw)
    n = len(d)
    v, v0 = solve_port_voltages(tuple(d / d.sum()), [(PortSpan(1, n + 1), vs)])
    assert v0 == pytest.approx(vs)
    assert v.sum() == pytest.approx(vs)


def test_inconsistent_sources_report_both():
    with pytest.raises(InconsistentSourcesError) as info:
        solve_port_voltages(D_TEST, [(PortSpan(1, G3), 100.0), (PortSpan(3, G3), 30.0)])
    assert info.value.implied_v0 == pytest.approx((100.0, 75.0))
    assert "100 V" in str(info.value) and "75 V" in str(info.value)


def test_consistency_tolerance():
    solve_port_voltages(D_TEST, [(PortSpan(1, G3), 100.0), (PortSpan(3, G3), 40.0 * (1 + 5e-7))])
    with pytest.raises(InconsistentSourcesError):
        solve_port_voltages(D_TEST, [(PortSpan(1, G3), 100.0), (PortSpan(3, G3), 40.0 * (1 + 5e-6))])


def test_unpowered_span():
    with pytest.raises(UnpoweredSpanError, match="span unpowered"):
        solve_port_voltages((0.5, 0.5, 0.0), [(PortSpan(3, G3), 10.0)])


def test_needs_a_source():
    with pytest.raises(AnalysisError):
        solve_port_voltages(D_TEST, [])


def test_accepts_attachments():
    att = Attachment(PortSpan(3, G3), K.VOLTAGE_SOURCE, 40.0)
    _, v0 = solve_port_voltages(D_TEST, [att])
    assert v0 == pytest.approx(100.0)


@given(st.lists(st.fractions(Fraction(1, 50), Fraction(1)), min_size=2, max_size=8),
       st.fractions(Fraction(1), Fraction(500)))
@settings(max_examples=60)
def test_voltages_match_volt_second_oracle(raw, v0):
    total = sum(raw, Fraction(0))
    duties = [r / total for r in raw]
    n = len(duties)
    pots = volt_second_junction_potentials(duties, v0)
    v, got_v0 = solve_port_voltages(tuple(float(d) for d in duties), [(PortSpan(1, n + 1), float(v0))])
    for j in range(1, n + 1):
        assert v[j - 1:].sum() == pytest.approx(float(pots[j - 1]), rel=1e-9, abs=1e-9)
    # zero inductor voltage on average, per junction, mode by mode
    mv = inductor_mode_voltages(tuple(float(d) for d in duties), float(v0), list(range(2, n + 1)))
    assert np.allclose(np.array([float(d) for d in duties]) @ mv, 0.0, atol=1e-9 * float(v0))


# -- duty inversion --------------------------------------------------------------

def test_duties_for_bottom_port():
    d = solve_duties_for_voltages(3, [(PortSpan(1, G3), 100.0), (PortSpan(3, G3), 40.0)], slack=[1, 2])
    assert d[2] == pytest.approx(0.4)
    assert d[0] == pytest.approx(0.3) and d[1] == pytest.approx(0.3)


def test_duties_for_two_ports():
    targets = [(PortSpan(1, 2), 35.0), (PortSpan(2, 3), 25.0)]
    d = solve_duties_for_voltages(3, targets, slack=3, v0=100.0)
    assert np.allclose(d.d, D_TEST)


def test_duties_exceeding_source():
    with pytest.raises(AnalysisError, match="targets exceed source voltage"):
        solve_duties_for_voltages(3, [(PortSpan(1, 2), 30.0), (PortSpan(2, 3), 30.0)], slack=3, v0=50.0)


def test_duties_span_targets():
    # T2..G at 65 V pins D2 + D3, T3..G at 40 V pins D3
    d = solve_duties_for_voltages(3, [(PortSpan(2, G3), 65.0), (PortSpan(3, G3), 40.0)], slack=1, v0=100.0)
    assert np.allclose(d.d, D_TEST)


def test_duties_need_v0():
    with pytest.raises(AnalysisError, match="v0"):
        solve_duties_for_voltages(3, [(PortSpan(3, G3), 40.0)], slack=1)


@given(st.lists(st.floats(0.05, 1.0), min_size=2, max_size=7), st.floats(1.0, 400.0), st.data())
def test_duty_inversion_round_trip(raw, v0, data):
    d = np.array(raw) / sum(raw)
    d = tuple(d / d.sum())
    n = len(d)
    slack = data.draw(st.integers(1, n))
    v, _ = solve_port_voltages(d, [(PortSpan(1, n + 1), v0)])
    targets = [(PortSpan(i, i + 1), v[i - 1]) for i in range(1, n + 1) if i != slack]
    back = solve_duties_for_voltages(n, targets, slack=slack, v0=v0)
    assert np.allclose(back.d, d, atol=1e-9)


# -- currents ----------------------------------------------------------------------

def test_sido_currents(sido):
    rep = steady_state(sido, D_TEST)
    bc = rep.branch_currents
    assert bc.inductors["L2"] == pytest.approx(1.3)
    assert bc.attachments[0] == pytest.approx(-7.1125)  # source delivers 284.5 W at 40 V
    assert bc.attachments[1:] == pytest.approx((2.0, 1.3))
    assert abs(bc.power_residual) < 1e-9


def test_diso_currents(diso):
    rep = steady_state(diso, D_TEST)
    bc = rep.branch_currents
    assert rep.span_voltages[2] == pytest.approx(32.5)
    assert bc.inductors["L2"] == pytest.approx(0.65)
    # junction T3 carries exactly the 20 V source current
    assert bc.junction[2] == pytest.approx(-bc.attachments[1])
    p = sum(v * i for v, i in zip(rep.span_voltages, bc.attachments))
    assert p == pytest.approx(0.0, abs=1e-9)


def test_source_only_gives_zero_currents():
    desc = TopologyDescriptor(3, (Attachment(PortSpan(1, G3), K.VOLTAGE_SOURCE, 10.0),))
    bc = steady_state(desc, D_TEST).branch_currents
    assert np.allclose(bc.junction, 0.0)
    assert all(i == 0 for i in bc.inductors.values())


def test_current_load():
    desc = TopologyDescriptor(3, (
        Attachment(PortSpan(1, G3), K.VOLTAGE_SOURCE, 100.0),
        Attachment(PortSpan(2, G3), K.CURRENT_LOAD, 2.0),
    ))
    bc = solve_branch_currents(desc, D_TEST, 100.0)
    assert bc.inductors["L2"] == pytest.approx(2.0)
    assert bc.attachments[0] == pytest.approx(-1.3)


@pytest.mark.parametrize("seed", range(25))
def test_power_balance_random(seed):
    desc, d = random_operating_point(np.random.default_rng(seed))
    rep = steady_state(desc, d)
    powers = [v * i for v, i in zip(rep.span_voltages, rep.branch_currents.attachments)]
    throughput = sum(abs(p) for p in powers) / 2
    assert abs(sum(powers)) <= 1e-6 * throughput


@pytest.mark.parametrize("alpha", [0.5, 2.0, 7.3])
def test_linear_scaling(sido, alpha):
    base = steady_state(sido, D_TEST)
    src = sido.attachments[0]
    scaled = TopologyDescriptor(3, (Attachment(src.span, src.kind, src.value * alpha),) + sido.attachments[1:])
    rep = steady_state(scaled, D_TEST)
    assert np.allclose(rep.port_voltages, alpha * base.port_voltages)
    assert np.allclose(rep.branch_currents.junction, alpha * base.branch_currents.junction)


def test_report_invariants_and_dict(sido):
    rep = steady_state(sido, D_TEST)
    assert rep.port_voltages.sum() == pytest.approx(rep.v0, abs=1e-9)
    assert np.allclose(rep.port_voltages, np.array(D_TEST) * rep.v0, atol=1e-9)
    assert rep.junction_voltage(2) == pytest.approx(65.0)
    d = rep.to_dict()
    assert d["v0"] == pytest.approx(100.0)
    assert len(d["stress_table"]) == 3


def test_analysis_rejects_other_styles():
    desc = TopologyDescriptor(3, (Attachment(PortSpan(1, G3), K.VOLTAGE_SOURCE, 10.0),), inductor_style="plus-top")
    with pytest.raises(TopologyError, match="middle-branches"):
        steady_state(desc, D_TEST)


def test_duty_length_checked(sido):
    with pytest.raises(AnalysisError):
        steady_state(sido, (0.5, 0.5))


# -- switch stresses -------------------------------------------------------------

def test_table_ii_rows_n3():
    i = np.array([0.0, 2.0, 3.0, 0.0])  # I_2 = 2, I_3 = 3
    v, table = switch_stresses(D_TEST, i, 100.0)
    assert v == 100.0
    assert np.allclose(table.rows, [[0, 2, 5], [-2, 0, 3], [-5, -3, 0]])


@given(st.integers(2, 9), st.data())
@settings(max_examples=60)
def test_table_ii_matches_kcl(n, data):
    inj = data.draw(st.lists(st.floats(-10, 10), min_size=n + 1, max_size=n + 1))
    d = tuple([1.0 / n] * n)
    _, table = switch_stresses(d, inj, 1.0)
    for k in range(1, n + 1):
        assert np.allclose(table.rows[k - 1], kcl_switch_currents(n, k, inj), atol=1e-9)


@given(st.integers(2, 9))
def test_table_ii_antisymmetry_and_zero_diagonal(n):
    c = table_ii_coefficients(n)
    assert np.all(c[range(n), range(n), :] == 0)
    assert np.array_equal(c, -c.transpose(1, 0, 2))


def test_sido_stress_table(sido):
    rep = steady_state(sido, D_TEST)
    assert rep.switch_voltage_stress == pytest.approx(100.0)
    assert np.allclose(rep.stress_table.rows, [[0, -1.3, 5.8125], [1.3, 0, 7.1125], [-5.8125, -7.1125, 0]])
    assert np.allclose(rep.stress_table.total_current_stress(), [5.8125, 7.1125, 7.1125])


def test_stress_currents_shape_checked():
    with pytest.raises(AnalysisError):
        switch_stresses(D_TEST, [1.0, 2.0], 10.0)


# -- ripple ------------------------------------------------------------------------

def test_bottom_inductor_ripple_both_half_cycles(sido):
    rep = steady_state(sido, D_TEST, F_SW)
    t = 1 / F_SW
    charge = ripple_pp(100.0 - 40.0, 0.40 * t, 0.72e-3)  # mode 3: ladder node 3 at v0
    discharge = ripple_pp(-40.0, 0.60 * t, 0.72e-3)
    assert charge == pytest.approx(discharge)
    assert charge == pytest.approx(1.111, abs=1e-3)
    assert rep.ripple.inductor_pp["L3"] == pytest.approx(charge, rel=1e-9)


def test_ripple_zero_when_no_reversal():
    rep = steady_state(dual_buck_desc(), (0.5, 0.5, 0.0), F_SW)
    assert rep.ripple.inductor_pp["L3"] == pytest.approx(0.0, abs=1e-12)


def test_ripple_scales_inversely_with_inductance(sido):
    a = steady_state(sido, D_TEST, F_SW).ripple
    desc = TopologyDescriptor(3, sido.attachments, inductance=1.44e-3)
    b = steady_state(desc, D_TEST, F_SW).ripple
    for name in a.inductor_pp:
        assert b.inductor_pp[name] == pytest.approx(a.inductor_pp[name] / 2)


def test_capacitor_ripple_reported(sido):
    rip = steady_state(sido, D_TEST, F_SW).ripple
    assert set(rip.capacitor_pp) == {"C1", "C2", "C3"}
    assert all(v >= 0 for v in rip.capacitor_pp.values())
    # C3 is pinned by the 40 V source
    assert rip.capacitor_pp["C3"] == pytest.approx(0.0, abs=1e-9)


def test_diso_sanity():
    rep = steady_state(diso_desc(), D_TEST)
    assert rep.v0 == pytest.approx(50.0)
    assert steady_state(sido_desc(), D_TEST).v0 == pytest.approx(100.0)
