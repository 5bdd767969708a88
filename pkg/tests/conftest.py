import numpy as np
import pytest

from mpcsim.topology import Attachment, AttachmentKind, PortSpan, TopologyDescriptor

D_TEST = (0.35, 0.25, 0.40)
F_SW = 30e3


def sido_desc() -> TopologyDescriptor:
    """40 V on the bottom port, 50 ohm loads on T1..G and T2..G."""
    return TopologyDescriptor(3, (
        Attachment(PortSpan(3, 4), AttachmentKind.VOLTAGE_SOURCE, 40.0),
        Attachment(PortSpan(1, 4), AttachmentKind.RESISTIVE_LOAD, 50.0),
        Attachment(PortSpan(2, 4), AttachmentKind.RESISTIVE_LOAD, 50.0),
    ))


def diso_desc() -> TopologyDescriptor:
    """50 V across the stack, 20 V on the bottom port, 50 ohm on T2..G."""
    return TopologyDescriptor(3, (
        Attachment(PortSpan(1, 4), AttachmentKind.VOLTAGE_SOURCE, 50.0),
        Attachment(PortSpan(3, 4), AttachmentKind.VOLTAGE_SOURCE, 20.0),
        Attachment(PortSpan(2, 4), AttachmentKind.RESISTIVE_LOAD, 50.0),
    ))


def dual_buck_desc() -> TopologyDescriptor:
    """100 V on T1..G feeding 50 ohm loads on T2..G and T3..G."""
    return TopologyDescriptor(3, (
        Attachment(PortSpan(1, 4), AttachmentKind.VOLTAGE_SOURCE, 100.0),
        Attachment(PortSpan(2, 4), AttachmentKind.RESISTIVE_LOAD, 50.0),
        Attachment(PortSpan(3, 4), AttachmentKind.RESISTIVE_LOAD, 50.0),
    ))


@pytest.fixture
def sido():
    return sido_desc()


@pytest.fixture
def diso():
    return diso_desc()


@pytest.fixture
def dual_buck():
    return dual_buck_desc()


def random_operating_point(rng: np.random.Generator, n_range=(2, 5), d_min=0.05):
    """Seeded synchronous operating point with one source and resistive loads.

    Loads are sized for 0.1..2 A at the ideal span voltage; points whose
    source current would exceed 10 A are redrawn.  Returns ``(desc, duties)``.
    """
    from mpcsim.analysis import steady_state

    while True:
        n = int(rng.integers(n_range[0], n_range[1] + 1))
        w = rng.dirichlet(np.ones(n))
        duties = tuple(d_min + (1 - n * d_min) * w)
        v0 = float(rng.uniform(20.0, 200.0))
        spans = [PortSpan(a, b) for a in range(1, n + 1) for b in range(a + 1, n + 2)]
        picks = rng.permutation(len(spans))[: int(rng.integers(2, min(4, len(spans)) + 1))]
        src, loads = spans[picks[0]], [spans[i] for i in picks[1:]]
        v_src = v0 * sum(duties[i - 1] for i in src.positions())
        atts = [Attachment(src, AttachmentKind.VOLTAGE_SOURCE, round(v_src, 6))]
        for span in loads:
            v = v0 * sum(duties[i - 1] for i in span.positions())
            atts.append(Attachment(span, AttachmentKind.RESISTIVE_LOAD, v / rng.uniform(0.1, 2.0)))
        desc = TopologyDescriptor(n, tuple(atts))
        report = steady_state(desc, duties)
        if abs(report.branch_currents.attachments[0]) <= 10.0:
            return desc, duties
