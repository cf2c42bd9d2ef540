"""Per-slot decision rules for the multi-user offloading system.

Five policies share one interface: given the current user states they return
a Decision whose assignment maps each user id to a server id (offload or
keep computing there), DROP, or None (stay idle / abandon).

* nested   — activation-index rule: each (user, server-class) pair gets the
             closed-form index at the user's age; pairs whose index clears
             that class's current price enter an exact maximum-weight
             assignment, whose dual prices feed the smoothed price update.
* mamp     — greedy: oldest users first, fastest free servers first.
* marp     — greedy by estimated post-completion age reduction.
* rrp      — each user proposes its solved single-user policy's action;
             collisions on a class are resolved uniformly at random.
* relaxed  — every user follows its solved single-user policy with server
             capacity ignored (the lower-bound regime; one virtual server
             bank per user).

The greedy benchmarks rank all users, layer-2 included.  Under
non-preemptive scheduling a ranked layer-2 user still consumes the server
offer it wins — the offer is wasted, since the user must keep its own server
— which is precisely what separates the two greedy rules there: marp's
weight inflates users that are already computing, so it wastes more offers.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .indices import IndexTable
from .matching import MatchResult, max_weight_assignment, verify_duals
from .model import DROP, NON_PREEMPTIVE, PREEMPTIVE, ServerSpec, UserSpec, UserState

__all__ = [
    "POLICY_NAMES",
    "ClassMenu",
    "build_class_menu",
    "Decision",
    "DualState",
    "update_dual",
    "decide_nested",
    "decide_mamp",
    "decide_marp",
    "decide_rrp",
    "decide_relaxed",
    "dual_prices_from_assignment",
    "marp_weight",
    "check_assignment",
]

POLICY_NAMES = ("nested", "mamp", "marp", "rrp", "relaxed-lb")


# ---------------------------------------------------------------------------
# server classes
# ---------------------------------------------------------------------------


@dataclass
class ClassMenu:
    """Distinct server classes, ascending by completion probability.

    Servers sharing exact (p, nu) form one class (replicated banks in scaled
    systems).  p/nu0 are the per-class parameters; members[c] lists the
    server ids of class c in ascending id order.  Index tables and price
    vectors are per class; the matcher expands classes into their free units.
    """

    p: np.ndarray
    nu0: np.ndarray
    members: list[list[int]]

    def __post_init__(self):
        self.p = np.asarray(self.p, dtype=float)
        self.nu0 = np.asarray(self.nu0, dtype=float)
        self._of_server = {
            sid: c for c, sids in enumerate(self.members) for sid in sids
        }

    @property
    def n_classes(self) -> int:
        return len(self.members)

    def class_of(self, server_id: int) -> int:
        return self._of_server[server_id]


def build_class_menu(servers: list[ServerSpec]) -> ClassMenu:
    """Group servers into classes by exact (p, nu), ascending."""
    groups: dict[tuple[float, float], list[int]] = {}
    for s in servers:
        groups.setdefault((s.p, s.nu), []).append(s.id)
    keys = sorted(groups)
    return ClassMenu(
        p=np.array([k[0] for k in keys]),
        nu0=np.array([k[1] for k in keys]),
        members=[sorted(groups[k]) for k in keys],
    )


# ---------------------------------------------------------------------------
# decisions
# ---------------------------------------------------------------------------


@dataclass
class Decision:
    """One slot's actions plus, for the nested policy, its dual certificate.

    assignment: user id -> server id (offload/continue), DROP, or None.
    class_prices: per-class dual price of this slot's assignment problem;
    NaN for classes that had no free unit this slot (price carries forward).
    """

    policy: str
    assignment: dict
    match: MatchResult | None = None
    weights: np.ndarray | None = None
    row_user: list[int] = field(default_factory=list)
    col_server: list[int] = field(default_factory=list)
    col_class: list[int] = field(default_factory=list)
    class_prices: np.ndarray | None = None


def _busy_servers(states: dict, busy=None) -> set[int]:
    """Servers held by layer-2 users (authoritative set may be passed in)."""
    if busy is not None:
        return set(busy)
    return {s.server for s in states.values() if s.layer == "L2"}


def _default_assignment(states: dict, mode: str) -> dict:
    """Every user's do-nothing action: idle at L1, continue (or lose the
    task) at L2 depending on the scheduling structure."""
    out = {}
    for uid, st in states.items():
        if st.layer == "L2" and mode == NON_PREEMPTIVE:
            out[uid] = st.server
        else:
            out[uid] = None
    return out


def decide_nested(
    states: dict,
    users: list[UserSpec],
    menu: ClassMenu,
    tables: dict[int, IndexTable],
    mode: str,
    busy=None,
) -> Decision:
    """Index rule: exact max-weight assignment over price-cleared pairs.

    A (user, class) pair is admissible when the user's index at its current
    age is positive and at least the class's current price (the price the
    tables were built with).  Non-preemptive: only idle users are assigned
    and held servers are excluded; computing users keep computing.
    Preemptive: every user and every server participates each slot, so a
    running task may be moved or abandoned by the assignment.
    """
    assignment = _default_assignment(states, mode)
    busy_set = _busy_servers(states, busy) if mode == NON_PREEMPTIVE else set()

    if mode == NON_PREEMPTIVE:
        rows = [u for u in users if states[u.id].layer == "L1"]
    else:
        rows = list(users)
    col_server: list[int] = []
    col_class: list[int] = []
    for c, sids in enumerate(menu.members):
        for sid in sids:
            if sid not in busy_set:
                col_server.append(sid)
                col_class.append(c)

    weights = np.full((len(rows), len(col_server)), -np.inf)
    if rows and col_server:
        # vectorized per user type: gather each class's index column at the
        # clamped ages, mask by the eligibility rule, then scatter to the
        # unit columns (same arithmetic as IndexTable.index/eligible)
        col_class_arr = np.asarray(col_class)
        by_tau: dict[int, list[int]] = {}
        for r, u in enumerate(rows):
            by_tau.setdefault(u.tau_min, []).append(r)
        for tau, rixs in by_tau.items():
            table = tables[tau]
            ages = np.array(
                [min(states[rows[r].id].delta, table.a_max) for r in rixs]
            )
            vals = table.values[:, ages]  # (n_classes, n_rows_of_type)
            elig = (vals >= table.nu[:, None] - 1e-12) & (vals > 1e-12)
            wt = np.where(elig, vals, -np.inf)
            weights[rixs, :] = wt[col_class_arr, :].T

    match = max_weight_assignment(weights)
    pairs = _layer_matched_pairs(weights, match.pairs, rows, states, menu,
                                 col_class)
    for r, k in pairs.items():
        assignment[rows[r].id] = col_server[k]

    prices = np.full(menu.n_classes, np.nan)
    for k, c in enumerate(col_class):
        price = match.col_prices[k]
        prices[c] = price if np.isnan(prices[c]) else max(prices[c], price)

    return Decision(
        policy="nested",
        assignment=assignment,
        match=match,
        weights=weights,
        row_user=[u.id for u in rows],
        col_server=col_server,
        col_class=col_class,
        class_prices=prices,
    )


def _layer_matched_pairs(
    weights: np.ndarray,
    pairs: dict[int, int],
    rows: list[UserSpec],
    states: dict,
    menu: ClassMenu,
    col_class: list[int],
) -> dict[int, int]:
    """Rearrange an optimal matching so older users sit on faster classes.

    Each admissible weight is the class's predecessor cost plus the user's
    age gap, so the summed index depends only on which users and which
    units are matched — the optimal face contains every admissible bijection
    between the two sets.  The assignment solver's internal tie resolution
    tends to park the oldest user on the slowest matched class (its largest
    own index), inverting the age layering, so swap matched pairs whenever
    the senior one holds the slower class and the crossed pairs are still
    admissible at the same total weight.
    """
    matched = sorted(
        ([r, k] for r, k in pairs.items()),
        key=lambda rk: (-states[rows[rk[0]].id].delta, rows[rk[0]].id),
    )
    changed = True
    while changed:
        changed = False
        for a in range(len(matched)):
            ra, ka = matched[a]
            for b in range(a + 1, len(matched)):
                rb, kb = matched[b]
                if menu.p[col_class[ka]] >= menu.p[col_class[kb]]:
                    continue
                own = weights[ra, ka] + weights[rb, kb]
                cross = weights[ra, kb] + weights[rb, ka]
                if (
                    weights[ra, kb] > 0.0
                    and weights[rb, ka] > 0.0
                    and abs(cross - own) <= 1e-9 * (1.0 + abs(own))
                ):
                    matched[a][1], matched[b][1] = kb, ka
                    ka = kb
                    changed = True
    return {r: k for r, k in matched}


def _greedy_assign(
    states: dict,
    ranked: list[UserSpec],
    servers: list[ServerSpec],
    mode: str,
    busy=None,
    policy: str = "mamp",
) -> Decision:
    """Walk ranked users, handing each the fastest remaining free server.

    Non-preemptive: a ranked computing user consumes the offer without using
    it (it must stay on its own server), so offers can be wasted.
    """
    assignment = _default_assignment(states, mode)
    busy_set = _busy_servers(states, busy) if mode == NON_PREEMPTIVE else set()
    units = sorted(
        (s for s in servers if s.id not in busy_set),
        key=lambda s: (-s.p, s.nu, s.id),
    )
    k = 0
    for u in ranked:
        if k >= len(units):
            break
        st = states[u.id]
        if st.layer == "L2" and mode == NON_PREEMPTIVE:
            k += 1  # offer wasted on a locked user
            continue
        assignment[u.id] = units[k].id
        k += 1
    return Decision(policy=policy, assignment=assignment)


def decide_mamp(
    states: dict,
    users: list[UserSpec],
    servers: list[ServerSpec],
    mode: str,
    busy=None,
) -> Decision:
    """Greedy max-age rule: oldest users get the fastest free servers."""
    ranked = sorted(users, key=lambda u: (-states[u.id].delta, u.id))
    return _greedy_assign(states, ranked, servers, mode, busy, policy="mamp")


def marp_weight(delta: int, gen_age: int, p: float) -> float:
    """Estimated age reduction from finishing now: delta + (delta - gen_age)/p.

    Idle users pass gen_age = delta, collapsing the second term.
    """
    return float(delta) + (float(delta) - float(gen_age)) / p


def decide_marp(
    states: dict,
    users: list[UserSpec],
    servers: list[ServerSpec],
    mode: str,
    busy=None,
) -> Decision:
    """Greedy age-reduction rule.

    Weight per user: marp_weight with p resolved as the holding server's
    completion probability for computing users, and the best available
    probability for idle users (whose weight is just their age).
    """
    p_by_id = {s.id: s.p for s in servers}
    p_best = max(p_by_id.values())

    def weight(u: UserSpec) -> float:
        st = states[u.id]
        if st.layer == "L2":
            return marp_weight(st.delta, st.gen_age, p_by_id[st.server])
        return marp_weight(st.delta, st.delta, p_best)

    ranked = sorted(users, key=lambda u: (-weight(u), u.id))
    return _greedy_assign(states, ranked, servers, mode, busy, policy="marp")


def _policy_action(sol, state: UserState) -> int:
    """Action of a solved single-user policy at a live state (ages clamped)."""
    a = min(state.delta, sol.a_max)
    if state.layer == "L1":
        return sol.action(("L1", a))
    assert sol.mode == PREEMPTIVE, "held non-preemptive tasks are decided separately"
    d = min(state.gen_age, a - 1)
    return sol.action(("L2", a, d))


def decide_rrp(
    states: dict,
    users: list[UserSpec],
    menu: ClassMenu,
    policies: dict[int, object],
    rng,
    mode: str,
    busy=None,
) -> Decision:
    """Randomized capacity repair of the solved single-user policies.

    Each user proposes the action its solved policy takes at its state; when
    a class receives more proposals than it has free units, the units go to
    a uniformly random subset and the rest idle (losing the task under
    preemptive scheduling).
    """
    assignment = _default_assignment(states, mode)
    busy_set = _busy_servers(states, busy) if mode == NON_PREEMPTIVE else set()
    free_units = [
        [sid for sid in sids if sid not in busy_set] for sids in menu.members
    ]

    proposals: dict[int, list[int]] = {c: [] for c in range(menu.n_classes)}
    for u in users:
        st = states[u.id]
        sol = policies[u.tau_min]
        if st.layer == "L2" and mode == NON_PREEMPTIVE:
            act = _l2_action_non_preemptive(sol, st, menu)
            assignment[u.id] = st.server if act else DROP
            continue
        act = _policy_action(sol, st)
        if act > 0:
            proposals[act - 1].append(u.id)
        # act == 0: idle (or abandon under preemptive scheduling)

    for c, proposers in proposals.items():
        units = free_units[c]
        if not proposers or not units:
            continue
        keep = min(len(proposers), len(units))
        order = rng.permutation(len(proposers))
        winners = sorted(proposers[i] for i in order[:keep])
        for uid, sid in zip(winners, units):
            assignment[uid] = sid
    return Decision(policy="rrp", assignment=assignment)


def _l2_action_non_preemptive(sol, state: UserState, menu: ClassMenu) -> int:
    """Solved policy's keep(1)/drop(0) call for a held non-preemptive task."""
    a = min(state.delta, sol.a_max)
    d = min(state.gen_age, a - 1)
    cls = menu.class_of(state.server)
    return 1 if sol.action(("L2", a, d, cls + 1)) > 0 else 0


def decide_relaxed(
    states: dict,
    users: list[UserSpec],
    menu: ClassMenu,
    policies: dict[int, object],
    mode: str,
) -> Decision:
    """Capacity-ignoring regime: each user follows its solved policy.

    Chosen classes map to their first member server id; several users may
    share one id, so this decision is only valid in the relaxed simulation,
    where every user sees a private bank of servers.
    """
    assignment = {}
    for u in users:
        st = states[u.id]
        sol = policies[u.tau_min]
        if st.layer == "L2" and mode == NON_PREEMPTIVE:
            act = _l2_action_non_preemptive(sol, st, menu)
            assignment[u.id] = st.server if act else DROP
            continue
        act = _policy_action(sol, st)
        assignment[u.id] = menu.members[act - 1][0] if act > 0 else None
    return Decision(policy="relaxed-lb", assignment=assignment)


# ---------------------------------------------------------------------------
# dual prices
# ---------------------------------------------------------------------------


def dual_prices_from_assignment(weights, pairs: dict) -> np.ndarray:
    """Optimal dual prices of the per-slot assignment problem.

    weights: the slot's (user x server) weight matrix; pairs: an optimal
    matching of it (row -> column).  Re-solves the assignment to extract a
    dual certificate, confirms the given matching attains the optimum and
    that complementary slackness holds to 1e-9, then returns the per-column
    price vector.
    """
    w = np.asarray(weights, dtype=float)
    result = max_weight_assignment(w)
    given = float(sum(w[r, c] for r, c in pairs.items()))
    if abs(given - result.weight) > 1e-9 * (1.0 + abs(result.weight)):
        raise ValueError(
            f"matching weight {given} is not optimal (optimum {result.weight})"
        )
    check = verify_duals(w, MatchResult(dict(pairs), given,
                                        result.row_potentials, result.col_prices))
    if not check.ok:
        raise AssertionError(f"dual certificate failed: {check.failures}")
    return result.col_prices


@dataclass
class DualState:
    """Smoothed per-class prices driving the index tables.

    nu_t is the current price vector; nu_trace holds one copy per update
    (index 0 is the initial vector); beta in (0,1) is the smoothing weight
    on each slot's assignment duals.
    """

    nu_t: np.ndarray
    beta: float
    nu_trace: list = field(default_factory=list)

    def __post_init__(self):
        if not (0.0 < self.beta < 1.0):
            raise ValueError(f"beta must be in (0, 1), got {self.beta}")
        self.nu_t = np.asarray(self.nu_t, dtype=float).copy()
        if (self.nu_t < 0).any():
            raise ValueError("prices must be nonnegative")
        if not self.nu_trace:
            self.nu_trace.append(self.nu_t.copy())


def update_dual(ds: DualState, nu_prime) -> DualState:
    """Convex price step: nu <- (1-beta) nu + beta nu'.

    NaN entries of nu_prime keep their current price (a class with no free
    unit this slot exposes no dual).  Mutates and returns ds; the new vector
    is appended to nu_trace.
    """
    prime = np.asarray(nu_prime, dtype=float)
    if prime.shape != ds.nu_t.shape:
        raise ValueError(f"price shape {prime.shape} != state {ds.nu_t.shape}")
    effective = np.where(np.isnan(prime), ds.nu_t, prime)
    if (effective < -1e-12).any() or np.isinf(effective).any():
        raise ValueError(f"invalid dual prices {nu_prime}")
    ds.nu_t = (1.0 - ds.beta) * ds.nu_t + ds.beta * np.maximum(effective, 0.0)
    ds.nu_trace.append(ds.nu_t.copy())
    return ds


# ---------------------------------------------------------------------------
# feasibility audit
# ---------------------------------------------------------------------------


def check_assignment(
    assignment: dict,
    states: dict,
    users: list[UserSpec],
    servers: list[ServerSpec],
    mode: str,
    busy=None,
    allow_shared: bool = False,
) -> None:
    """Raise ValueError unless the assignment is feasible for the slot.

    Feasible: every user appears; each server is used by at most one user;
    idle users only offload to free servers; non-preemptive computing users
    only keep their own server or drop.  With allow_shared (the relaxed
    regime, where each user sees a private copy of every server) the
    capacity rules are waived: ids may repeat and may collide with servers
    that are really busy.  Per-user rules still apply.
    """
    ids = {u.id for u in users}
    if set(assignment) != ids:
        raise ValueError("assignment must cover exactly the user set")
    known = {s.id for s in servers}
    if mode == NON_PREEMPTIVE and not allow_shared:
        busy_set = _busy_servers(states, busy)
    else:
        busy_set = set()
    used: set[int] = set()
    for uid, act in assignment.items():
        if act is None:
            continue
        st = states[uid]
        if act == DROP:
            if st.layer != "L2" or mode != NON_PREEMPTIVE:
                raise ValueError(f"user {uid}: drop outside a held task")
            continue
        if act not in known:
            raise ValueError(f"user {uid}: unknown server {act}")
        if st.layer == "L2" and mode == NON_PREEMPTIVE:
            if act != st.server:
                raise ValueError(
                    f"user {uid}: must keep server {st.server}, got {act}"
                )
        elif mode == NON_PREEMPTIVE and act in busy_set:
            raise ValueError(f"user {uid}: offload to busy server {act}")
        if not allow_shared:
            if act in used:
                raise ValueError(f"server {act} assigned twice")
            used.add(act)
