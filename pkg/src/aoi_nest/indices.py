"""Per-server activation indices and their consistency diagnostics.

The closed form prices server class m at age ``delta`` as
``max(0, nu_pred + delta - gamma)`` where ``nu_pred`` is the activation
cost of the next-faster class (0 beyond the fastest): the premium a class
can command is capped by what the class above it charges.  A class is
worth engaging once its index reaches its own price, which pins the
prior-free threshold ladder ``H_m = ceil(gamma + nu_m - nu_pred)``.

Two bisection routes sit next to the formula.  ``ladder_critical_price``
inverts the ladder itself: raise the class's own price until the class
stops being worth it at the probed age, holding gamma fixed — its flip
point must match the closed form to bisection accuracy.
``nested_index_numeric`` prices states off the truncated model instead:
re-solve the subproblem at each trial cost and find where some other
action starts beating the class at the state.  On truncated instances
that exact critical price is a different (blunter near the age cap,
flatter in age) curve than the ladder formula, so the two are reconciled
through consistency properties — a numeric index below the class's own
price must coincide with passive-set membership, and the trichotomy
checks in ``check_precise_division`` — rather than by value equality.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .mdp import (
    PASSIVE,
    ValueTable,
    l2_valid_mask,
    q_layer1,
    q_layer2,
    solve_subproblem,
)
from .model import NON_PREEMPTIVE, PREEMPTIVE

_WEAK = 1e-12  # comparison slack: identical twins must tie exactly


def predecessor_costs(nu) -> np.ndarray:
    """Per-class cost of the next-faster class; 0 beyond the fastest.

    Classes are ascending in completion probability, so class m's
    predecessor in the ladder is class m+1.
    """
    nu = np.asarray(nu, dtype=float)
    return np.concatenate([nu[1:], [0.0]])


def nested_index_closed_form(delta: int, nu, gamma: float, m: int) -> float:
    """Index of class m (1-based) at age delta; layer-agnostic."""
    pred = predecessor_costs(nu)[m - 1]
    return max(0.0, pred + float(delta) - gamma)


def ladder_thresholds(nu, gamma: float) -> list[int | None]:
    """First eligible age per class: index >= own price and index > 0.

    Entry m-1 is class m's threshold (None would never appear here; ages
    are unbounded in the formula, truncation is applied by callers).
    """
    nu = np.asarray(nu, dtype=float)
    pred = predecessor_costs(nu)
    out: list[int | None] = []
    for m in range(len(nu)):
        h_price = math.ceil(gamma + nu[m] - pred[m] - 1e-12)
        h_positive = math.floor(gamma - pred[m] + 1e-12) + 1
        out.append(max(h_price, h_positive, 1))
    return out


@dataclass
class IndexTable:
    """Closed-form index values for one user type at a fixed gamma.

    values[m-1, a] is class m's index at age a (column 0 unused); the
    index never looks at gen_age, so layer-2 states read the same row.
    ladder[m-1] is the first eligible age clipped to the table (None if
    beyond a_max).
    """

    p: np.ndarray
    nu: np.ndarray
    gamma: float
    a_max: int
    values: np.ndarray
    ladder: list[int | None]

    def index(self, delta: int, m: int) -> float:
        return float(self.values[m - 1, delta])

    def eligible(self, delta: int, m: int) -> bool:
        i = self.values[m - 1, delta]
        return i >= self.nu[m - 1] - 1e-12 and i > 1e-12


def build_index_table(p, nu, gamma: float, a_max: int) -> IndexTable:
    """Tabulate the closed form and the ladder; cross-check the bracket.

    The ceil that places threshold H forces
    ``nu_pred - nu_m + H - 1 <= gamma <= nu_pred - nu_m + H``; asserting
    it here guards the sign conventions whenever a crossing exists inside
    the table.
    """
    p = np.asarray(p, dtype=float)
    nu = np.asarray(nu, dtype=float)
    pred = predecessor_costs(nu)
    ages = np.arange(a_max + 1, dtype=float)
    values = np.maximum(0.0, pred[:, None] + ages[None, :] - gamma)
    values[:, 0] = np.nan
    ladder_all = ladder_thresholds(nu, gamma)
    ladder: list[int | None] = []
    for m in range(len(nu)):
        h = math.ceil(gamma + nu[m] - pred[m] - 1e-12)
        if h <= a_max:
            lo = pred[m] - nu[m] + h - 1
            hi = pred[m] - nu[m] + h
            if not (lo - 1e-9 <= gamma <= hi + 1e-9):
                raise AssertionError(
                    f"ladder bracket broken for class {m + 1}: "
                    f"{lo} <= gamma={gamma} <= {hi} fails"
                )
        ladder.append(ladder_all[m] if ladder_all[m] <= a_max else None)
    return IndexTable(p=p, nu=nu, gamma=gamma, a_max=a_max, values=values, ladder=ladder)


def ladder_critical_price(
    delta: int,
    p,
    nu,
    gamma: float,
    m: int,
    tol: float = 1e-4,
) -> float:
    """Critical own-price of class m at age delta within the ladder model.

    Bisects on the class's own activation cost with gamma and every other
    price held fixed, re-tabulating the ladder at each trial and testing
    whether engaging the class at ``delta`` is still worth the price.
    The flip point is the definitional counterpart of
    :func:`nested_index_closed_form` and must agree with it to within
    ``tol``; it shares no inversion algebra with the formula's threshold
    ceiling, so the pair cross-checks the ladder's sign conventions.
    """
    nu = np.asarray(nu, dtype=float)
    M = len(nu)
    if not 1 <= m <= M:
        raise ValueError(f"class index {m} out of range 1..{M}")
    if delta < 1:
        raise ValueError(f"age must be positive, got {delta}")

    def worth_it(trial: float) -> bool:
        nu_t = nu.copy()
        nu_t[m - 1] = trial
        table = build_index_table(p, nu_t, gamma, a_max=delta)
        return table.eligible(delta, m)

    if not worth_it(0.0):
        return 0.0
    hi = float(predecessor_costs(nu)[m - 1] + delta + 1.0)
    lo = 0.0
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if worth_it(mid):
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


# ---------------------------------------------------------------------------
# exact per-state action costs and passive sets
# ---------------------------------------------------------------------------


def mu_values(vt: ValueTable, state: tuple) -> dict[int, float]:
    """Expected one-step-plus-continuation cost of every feasible action.

    Keys are action ids (0 passive, m engages class m); infeasible
    actions are absent (non-preemptive layer 2 offers only drop and the
    holder's class).
    """
    if state[0] == "L1":
        row = q_layer1(vt)[state[1]]
        return {a: float(row[a]) for a in range(len(row))}
    if vt.mode == PREEMPTIVE:
        row = q_layer2(vt)[state[2], state[1]]
        return {a: float(row[a]) for a in range(len(row))}
    j = state[3]
    pair = q_layer2(vt)[j - 1, state[2], state[1]]
    return {PASSIVE: float(pair[0]), j: float(pair[1])}


@dataclass
class PassiveSet:
    """States where some other action weakly beats engaging class m."""

    m: int
    layer: int
    members: set = field(default_factory=set)
    domain: int = 0

    def __contains__(self, state) -> bool:
        return state in self.members

    def __len__(self) -> int:
        return len(self.members)


def passive_set(vt: ValueTable, m: int, layer: int) -> PassiveSet:
    """Exact membership by comparing action costs under the solved table.

    Layer 1 ranges over all ages; layer 2 over valid (gen_age, age)
    pairs, restricted to the states where class m is feasible at all
    (the holder's slice in non-preemptive mode).
    """
    if not 1 <= m <= vt.n_classes:
        raise ValueError(f"class index {m} out of range 1..{vt.n_classes}")
    K = vt.a_max
    out = PassiveSet(m=m, layer=layer)
    if layer == 1:
        q1 = q_layer1(vt)
        others = [a for a in range(vt.n_classes + 1) if a != m]
        out.domain = K
        for a in range(1, K + 1):
            if min(q1[a, o] for o in others) <= q1[a, m] + _WEAK:
                out.members.add(("L1", a))
        return out
    if layer != 2:
        raise ValueError(f"layer must be 1 or 2, got {layer!r}")
    q2 = q_layer2(vt)
    valid = l2_valid_mask(K)
    if vt.mode == PREEMPTIVE:
        others = [a for a in range(vt.n_classes + 1) if a != m]
        for d, a in zip(*np.nonzero(valid)):
            out.domain += 1
            row = q2[d, a]
            if min(row[o] for o in others) <= row[m] + _WEAK:
                out.members.add(("L2", int(a), int(d)))
    else:
        for d, a in zip(*np.nonzero(valid)):
            out.domain += 1
            drop, cont = q2[m - 1, d, a]
            if drop <= cont + _WEAK:
                out.members.add(("L2", int(a), int(d), m))
    return out


# ---------------------------------------------------------------------------
# definitional index by bisection on the class's own price
# ---------------------------------------------------------------------------


@dataclass
class NumericIndex:
    """Bisection outcome: critical price for one (state, class) probe."""

    value: float
    saturated: bool
    gamma_at_critical: float
    solves: int


def nested_index_numeric(
    p,
    nu,
    tau_min: int,
    a_max: int,
    mode: str,
    state: tuple,
    m: int,
    tol: float = 1e-4,
    nu_hi: float | None = None,
) -> NumericIndex:
    """Critical own-price of class m at a state, to within tol.

    Bisects on class m's activation cost, re-solving the subproblem at
    every trial (warm-started policy iteration) and testing whether some
    other feasible action strictly beats engaging m at the state.  The
    returned value is the boundary of the beaten region, clamped at 0;
    if m is still preferred at ``nu_hi`` (default: own price + a_max) the
    search saturates and says so.
    """
    p = np.asarray(p, dtype=float)
    base = np.asarray(nu, dtype=float)
    M = len(base)
    if not 1 <= m <= M:
        raise ValueError(f"class index {m} out of range 1..{M}")
    if state[0] == "L2" and mode == NON_PREEMPTIVE and state[3] != m:
        raise ValueError("non-preemptive layer-2 probe must target the holder class")
    if nu_hi is None:
        nu_hi = float(base[m - 1] + a_max)

    warm = None
    gamma_seen = 0.0
    solves = 0

    def beaten(trial: float) -> bool:
        nonlocal warm, gamma_seen, solves
        nu_t = base.copy()
        nu_t[m - 1] = trial
        vt = solve_subproblem(p, nu_t, tau_min, a_max, mode, policy_init=warm)
        warm = (vt.pol1, vt.pol2)
        gamma_seen = vt.gamma
        solves += 1
        mu = mu_values(vt, state)
        return min(v for a, v in mu.items() if a != m) < mu[m]

    if beaten(0.0):
        return NumericIndex(0.0, False, gamma_seen, solves)
    if not beaten(nu_hi):
        return NumericIndex(float(nu_hi), True, gamma_seen, solves)
    lo, hi = 0.0, float(nu_hi)
    gamma_hi = gamma_seen
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if beaten(mid):
            hi, gamma_hi = mid, gamma_seen
        else:
            lo = mid
    return NumericIndex(0.5 * (lo + hi), False, gamma_hi, solves)


# ---------------------------------------------------------------------------
# indexability and precise-division diagnostics
# ---------------------------------------------------------------------------


@dataclass
class IndexabilityReport:
    """Passive-set growth along an ascending own-price grid."""

    ok: bool
    grid: list[float]
    counts: dict[int, list[int]]  # layer -> |passive set| per grid point
    domains: dict[int, int]
    violations: list[tuple]


def check_intra_indexability(
    p,
    nu_base,
    tau_min: int,
    a_max: int,
    mode: str,
    m: int,
    grid,
) -> IndexabilityReport:
    """Sweep class m's price upward and watch its passive sets only grow.

    Re-solves at every grid point (warm-started).  Reports any strict
    shrink per layer, and whether the sets have swallowed their whole
    layer by the top of the grid.
    """
    grid = [float(g) for g in grid]
    if sorted(grid) != grid:
        raise ValueError("grid must be ascending")
    counts: dict[int, list[int]] = {1: [], 2: []}
    domains: dict[int, int] = {1: 0, 2: 0}
    violations: list[tuple] = []
    if not grid:
        return IndexabilityReport(True, grid, counts, domains, violations)

    p = np.asarray(p, dtype=float)
    base = np.asarray(nu_base, dtype=float)
    warm = None
    for g in grid:
        nu_t = base.copy()
        nu_t[m - 1] = g
        vt = solve_subproblem(p, nu_t, tau_min, a_max, mode, policy_init=warm)
        warm = (vt.pol1, vt.pol2)
        for layer in (1, 2):
            ps = passive_set(vt, m, layer)
            counts[layer].append(len(ps))
            domains[layer] = ps.domain
    for layer in (1, 2):
        seq = counts[layer]
        for i in range(1, len(seq)):
            if seq[i] < seq[i - 1]:
                violations.append(("shrink", layer, grid[i], seq[i - 1], seq[i]))
        if seq[-1] != domains[layer]:
            violations.append(("top-not-full", layer, grid[-1], seq[-1], domains[layer]))
    return IndexabilityReport(not violations, grid, counts, domains, violations)


@dataclass
class DivisionReport:
    """Trichotomy checks of numeric indices against own prices."""

    ok: bool
    cases: list[tuple]  # (state, m, index, nu_m, verdict)
    violations: list[tuple]


def check_precise_division(
    p,
    nu,
    tau_min: int,
    a_max: int,
    mode: str,
    states,
    classes=None,
    tol: float = 1e-6,
    bisect_tol: float = 1e-4,
) -> DivisionReport:
    """Index vs own price decides who wins at the state, three ways.

    For each sampled state and class: an index above the class's price
    means the class strictly beats every alternative there; below means
    some alternative strictly beats it; at the price (within the
    bisection's resolution) the class is minimal within tol.  All action
    costs are read from the table solved at the unmodified prices.
    """
    p = np.asarray(p, dtype=float)
    nu = np.asarray(nu, dtype=float)
    vt = solve_subproblem(p, nu, tau_min, a_max, mode)
    cases: list[tuple] = []
    violations: list[tuple] = []
    eq_band = max(2.0 * bisect_tol, tol)
    for state in states:
        if state[0] == "L2" and mode == NON_PREEMPTIVE:
            probe_classes = [state[3]]
        else:
            probe_classes = list(classes) if classes is not None else list(range(1, len(nu) + 1))
        for m in probe_classes:
            ni = nested_index_numeric(
                p, nu, tau_min, a_max, mode, state, m, tol=bisect_tol
            )
            mu = mu_values(vt, state)
            best_other = min(v for a, v in mu.items() if a != m)
            own = nu[m - 1]
            if ni.saturated or ni.value > own + eq_band:
                verdict = "engage"
                good = mu[m] < best_other + tol
            elif ni.value < own - eq_band:
                verdict = "beaten"
                good = best_other < mu[m] + tol
            else:
                verdict = "critical"
                good = mu[m] <= best_other + tol
            cases.append((state, m, ni.value, float(own), verdict))
            if not good:
                violations.append((state, m, ni.value, float(own), verdict, mu[m], best_other))
    return DivisionReport(not violations, cases, violations)
