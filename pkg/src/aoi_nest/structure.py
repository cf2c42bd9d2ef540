"""Structural diagnostics for solved value tables.

A healthy solved policy is a ladder: as a user's age grows (generation
age fixed) the preferred action climbs from the passive one through the
slow classes toward the fast ones, crossing each pairwise boundary at
most once.  This module extracts those crossing ages, verifies the
ladder shape, and checks price-sensitivity bounds on the solved values.

The sensitivity and monotonicity checks are restricted to layer-2 states
with a live completion hazard (elapsed service beyond the warm-up time).
While the warm-up clock is still running the chain pays the slot cost
with no chance to finish, so the value can legitimately hump there and
a price raise can bill up to ``warm-up x delta`` extra slots; no fixed
per-class constant covers that region.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .mdp import (
    PASSIVE,
    PREEMPTIVE,
    ValueTable,
    l2_valid_mask,
    q_layer1,
    q_layer2,
    spell_local_values,
)

_TIE = 1e-11  # action values closer than this count as a tie


@dataclass
class ThresholdTable:
    """First ages at which one action overtakes another.

    ``H[(m, m2, D)]`` is the first age at which action ``m2`` is preferred
    to ``m`` at generation age ``D`` (``D = 0`` means layer 1), with pairs
    keyed in ladder order: passive against any class, slower class against
    faster.  Layer-2 scans cover live-hazard ages only.  ``None`` means
    the preference never flips inside the scanned range.  A healthy pair
    crosses at most once — upward (engagement past a critical age) or,
    only at layer 2, downward (a stale task fading back to passive, since
    finishing it would reset the age to almost its current value).
    ``violations`` lists ``(m, m2, D, age)`` second flips — preferences
    that are not monotone in age.
    """

    mode: str
    a_max: int
    n_classes: int
    H: dict[tuple[int, int, int], int | None]
    violations: list[tuple[int, int, int, int]] = field(default_factory=list)

    def layer1(self, m: int, m2: int) -> int | None:
        return self.H[(m, m2, 0)]


def _scan_pair(q_m: np.ndarray, q_m2: np.ndarray, first_age: int, tie_to_m2: bool):
    """First age where m2 is preferred over m, plus any second flips.

    Returns ``(crossing_age | None, [ages of flips beyond the first])``.
    A healthy pair settles its preference with at most one flip across
    the scanned ages, in either direction.
    """
    wins = np.where(
        q_m2 < q_m - _TIE,
        True,
        np.where(q_m < q_m2 - _TIE, False, tie_to_m2),
    )
    hits = np.flatnonzero(wins)
    crossing = int(first_age + hits[0]) if hits.size else None
    flips = np.flatnonzero(wins[:-1] != wins[1:])
    return crossing, [int(first_age + i + 1) for i in flips[1:]]


def _ladder_pairs(n_classes: int) -> list[tuple[int, int]]:
    acts = list(range(n_classes + 1))  # 0 is passive
    return [(m, m2) for m in acts for m2 in acts if m < m2]


def extract_policy_and_thresholds(vt: ValueTable) -> ThresholdTable:
    """Scan pairwise action preferences of a solved table into thresholds.

    Layer 1 is scanned over all ladder-direction action pairs; layer 2
    likewise per generation age in preemptive mode, while non-preemptive
    layer 2 only weighs continuing the holder class against dropping.
    """
    K, tau, M = vt.a_max, vt.tau_min, len(vt.p)
    q1 = q_layer1(vt)
    q2 = q_layer2(vt)
    H: dict[tuple[int, int, int], int | None] = {}
    violations: list[tuple[int, int, int, int]] = []

    def record(m, m2, d, q_m, q_m2, first_age):
        tie_to_m2 = m == PASSIVE  # active beats passive at a tie, slow beats fast
        crossing, bad = _scan_pair(q_m, q_m2, first_age, tie_to_m2)
        H[(m, m2, d)] = crossing
        violations.extend((m, m2, d, age) for age in bad)

    for m, m2 in _ladder_pairs(M):
        record(m, m2, 0, q1[1:, m], q1[1:, m2], 1)
    for d in range(1, K):
        a0 = d + tau + 1  # first age with a live hazard
        if a0 > K:
            continue
        if vt.mode == PREEMPTIVE:
            for m, m2 in _ladder_pairs(M):
                record(m, m2, d, q2[d, a0:, m], q2[d, a0:, m2], a0)
        else:
            for j in range(1, M + 1):
                record(PASSIVE, j, d, q2[j - 1, d, a0:, 0], q2[j - 1, d, a0:, 1], a0)
    return ThresholdTable(mode=vt.mode, a_max=K, n_classes=M, H=H, violations=violations)


@dataclass
class StructureReport:
    ok: bool
    violations: list[tuple]


def check_mltt(vt: ValueTable) -> StructureReport:
    """Ladder shape of the solved policy.

    Asserts that the completion probability of the chosen action is
    non-decreasing in age: over all ages at layer 1 and over the engaged
    live-hazard states per generation age at layer 2 — a stale task may
    fade back to passive, but while engaged the class may only get
    faster.  Pairwise value crossings are recorded by
    :func:`extract_policy_and_thresholds`; between actions the policy
    never picks they may legitimately wiggle, so they are not policed
    here — a broken band structure always surfaces as a chosen-p dip.
    """
    K, tau = vt.a_max, vt.tau_min
    violations: list[tuple] = []
    p_of = np.concatenate(([0.0], vt.p))

    def dips(actions: np.ndarray, ages: np.ndarray, label: tuple) -> None:
        seq = p_of[actions]
        bad = np.flatnonzero(np.diff(seq) < -1e-12)
        violations.extend(label + (int(ages[i + 1]),) for i in bad)

    dips(vt.pol1[1:], np.arange(1, K + 1), ("layer1",))
    for d in range(1, K):
        a0 = d + tau + 1  # first age with a live hazard
        if a0 > K:
            continue
        ages = np.arange(a0, K + 1)
        if vt.mode == PREEMPTIVE:
            row = vt.pol2[d, a0:]
            on = row != PASSIVE
            dips(row[on], ages[on], ("layer2", d))
        else:
            for j in range(1, len(vt.p) + 1):
                row = vt.pol2[j - 1, d, a0:]
                on = row != PASSIVE
                dips(row[on], ages[on], ("layer2", j, d))
    return StructureReport(ok=not violations, violations=violations)


def check_value_monotonicity(vt: ValueTable, slack: float = 1e-8) -> StructureReport:
    """Values are non-decreasing in age, at fixed generation age.

    Layer 2 is checked on live-hazard states only (see module docstring);
    layer 1 everywhere.
    """
    K, tau = vt.a_max, vt.tau_min
    violations: list[tuple] = []
    bad = np.flatnonzero(np.diff(vt.v1[1:]) < -slack)
    violations.extend(("layer1", int(i + 2)) for i in bad)

    def scan_row(row: np.ndarray, d: int, label: tuple) -> None:
        a0 = d + tau + 1  # first age with a live hazard
        if a0 >= K:
            return
        bad = np.flatnonzero(np.diff(row[a0:]) < -slack)
        violations.extend(label + (d, int(a0 + i + 1)) for i in bad)

    if vt.mode == PREEMPTIVE:
        for d in range(1, K):
            scan_row(vt.v2[d], d, ("layer2",))
    else:
        for j in range(1, len(vt.p) + 1):
            for d in range(1, K):
                scan_row(vt.v2[j - 1, d], d, ("layer2", j))
    return StructureReport(ok=not violations, violations=violations)


def check_value_bounds(
    vt_low: ValueTable,
    vt_high: ValueTable,
    m: int,
    delta_nu: float,
) -> StructureReport:
    """Price-sensitivity bounds on per-spell layer-2 values.

    ``vt_high`` must be solved with class ``m``'s price raised by
    ``delta_nu`` and nothing else changed.  Both price points are
    evaluated under ``vt_low``'s layer-2 policy via
    :func:`spell_local_values`, so the difference isolates what the raise
    bills to one service spell: at most ``delta_nu / p_m`` per slot-count
    in non-preemptive mode (the holder never changes) and at most
    ``delta_nu / p_m**2`` under preemption; past the crossing to the
    next-faster class the spell runs at that hazard, so the difference is
    bounded below by ``-delta_nu / p_{m+1}**2`` (probability one past the
    fastest class).  Checked on live-hazard states.
    """
    K, tau, M = vt_low.a_max, vt_low.tau_min, len(vt_low.p)
    if not 1 <= m <= M:
        raise ValueError(f"class index {m} out of range 1..{M}")
    if vt_high.mode != vt_low.mode or vt_high.a_max != K or vt_high.tau_min != tau:
        raise ValueError("tables describe different processes")
    want = np.asarray(vt_low.nu, dtype=float).copy()
    want[m - 1] += delta_nu
    if not np.allclose(vt_high.nu, want, rtol=0, atol=1e-9):
        raise ValueError("vt_high prices are not vt_low plus delta_nu on class m")
    if delta_nu == 0.0:
        same = np.allclose(vt_high.v1[1:], vt_low.v1[1:], atol=1e-9) and np.allclose(
            np.nan_to_num(vt_high.v2), np.nan_to_num(vt_low.v2), atol=1e-9
        )
        return StructureReport(ok=same, violations=[] if same else [("tables-differ",)])

    w_lo = spell_local_values(vt_low)
    w_hi = spell_local_values(vt_high, pol2=vt_low.pol2)
    diff = w_hi - w_lo
    tol = 1e-7 * (1.0 + abs(delta_nu))
    violations: list[tuple] = []
    if vt_high.gamma < vt_low.gamma - tol:
        violations.append(("gamma-dropped", float(vt_high.gamma - vt_low.gamma)))

    d_grid = np.arange(K + 1)[:, None]
    a_grid = np.arange(K + 1)[None, :]
    live = l2_valid_mask(K) & (a_grid - d_grid > tau)
    pm = vt_low.p[m - 1]

    if vt_low.mode == PREEMPTIVE:
        upper = delta_nu / pm**2
        for d, a in zip(*np.nonzero(live & (diff > upper + tol))):
            violations.append(("upper", int(d), int(a), float(diff[d, a])))
        p_next = vt_low.p[m] if m < M else 1.0
        lower = -delta_nu / p_next**2
        if m < M:
            tt = extract_policy_and_thresholds(vt_low)
            beyond = np.zeros_like(live)
            for d in range(1, K):
                crossing = tt.H.get((m, m + 1, d))
                if crossing is not None:
                    beyond[d, crossing:] = True
            region = live & beyond
        else:
            region = live
        for d, a in zip(*np.nonzero(region & (diff < lower - tol))):
            violations.append(("lower", int(d), int(a), float(diff[d, a])))
    else:
        upper = delta_nu / pm
        for j, d, a in zip(*np.nonzero(live[None, :, :] & (diff > upper + tol))):
            violations.append(("upper", int(j + 1), int(d), int(a), float(diff[j, d, a])))
    return StructureReport(ok=not violations, violations=violations)


def dump_value_table_csv(vt: ValueTable, path: str) -> None:
    """Write the solved values/policy as rows of (layer, class, gen_age, age, value, action)."""
    K, M = vt.a_max, len(vt.p)
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(["layer", "holder", "gen_age", "age", "value", "action"])
        for a in range(1, K + 1):
            out.writerow([1, "", 0, a, repr(float(vt.v1[a])), int(vt.pol1[a])])
        for d in range(1, K):
            for a in range(d + 1, K + 1):
                if vt.mode == PREEMPTIVE:
                    out.writerow([2, "", d, a, repr(float(vt.v2[d, a])), int(vt.pol2[d, a])])
                else:
                    for j in range(1, M + 1):
                        out.writerow(
                            [2, j, d, a, repr(float(vt.v2[j - 1, d, a])), int(vt.pol2[j - 1, d, a])]
                        )


def dump_thresholds_csv(tt: ThresholdTable, path: str) -> None:
    """Write crossing ages as rows of (m, m2, gen_age, age); blank age means no crossing."""
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(["m", "m2", "gen_age", "age"])
        for (m, m2, d), age in sorted(tt.H.items(), key=lambda kv: (kv[0][2], kv[0][0], kv[0][1])):
            out.writerow([m, m2, d, "" if age is None else age])
