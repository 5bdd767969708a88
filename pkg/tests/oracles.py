"""Independent reference computations used by the tests.

None of these call into the closed-form code they check.
"""

from __future__ import annotations

import itertools
import math
from fractions import Fraction

import numpy as np


def brute_force_assignments(n: int) -> list[frozenset[int]]:
    """Input-node sets of every labelling with at least one input and one output."""
    out = []
    for labels in itertools.product("io", repeat=n):
        if "i" in labels and "o" in labels:
            out.append(frozenset(i + 1 for i, c in enumerate(labels) if c == "i"))
    return out


def kcl_switch_currents(n: int, mode: int, injections) -> np.ndarray:
    """Switch currents (top to bottom) in ``mode`` from ladder KCL.

    ``injections[i-1]`` is the current entering ladder node ``i`` from its
    junction for ``i = 2..n``; node 1 and the bottom node take whatever KCL
    leaves over.  ``S_mode`` is open.
    """
    n_nodes = n + 1
    edges = [j for j in range(1, n + 1) if j != mode]
    unknowns = len(edges) + 2  # closed switches, slack at node 1, slack at bottom
    a = np.zeros((n_nodes, unknowns))
    b = np.zeros(n_nodes)
    for col, j in enumerate(edges):
        a[j - 1, col] += 1.0  # leaves node j
        a[j, col] -= 1.0  # enters node j+1
    a[0, len(edges)] = -1.0
    a[n, len(edges) + 1] = -1.0
    for i in range(2, n + 1):
        b[i - 1] = injections[i - 1]
    # KCL: outflow - inflow = injection; the open switch splits the ladder
    # into two groups, each with its own slack, so the system is square
    x, *_ = np.linalg.lstsq(a, b, rcond=None)
    currents = np.zeros(n)
    for col, j in enumerate(edges):
        currents[j - 1] = x[col]
    return currents


def volt_second_junction_potentials(duties: list[Fraction], v0: Fraction) -> list[Fraction]:
    """Junction potentials ``V(T_j)`` from mode-by-mode inductor voltages.

    In mode ``k`` ladder nodes ``1..k`` sit at ``v0`` and the rest at 0.  The
    average voltage of the inductor from ladder node ``j`` to ``T_j`` must
    vanish; this accumulates that average explicitly, mode by mode.
    """
    n = len(duties)
    pots = [v0]
    for j in range(2, n + 1):
        # sum_k D_k * (node_j(k) - V_Tj) = 0  ->  V_Tj = sum_k D_k * node_j(k)
        avg_node = sum((d * (v0 if j <= k else Fraction(0)) for k, d in enumerate(duties, start=1)), Fraction(0))
        pots.append(avg_node / sum(duties, Fraction(0)))
    pots.append(Fraction(0))
    return pots


def dcm_buck_ratio(d_on: float, inductance: float, resistance: float, period: float) -> float:
    """Voltage conversion ratio of an ideal buck; DCM branch when it applies."""
    k = 2 * inductance / (resistance * period)
    if k >= 1 - d_on:
        return d_on
    return 2.0 / (1.0 + math.sqrt(1.0 + 4.0 * k / d_on**2))


def ripple_pp(v_on: float, t_on: float, inductance: float) -> float:
    return abs(v_on) * t_on / inductance
