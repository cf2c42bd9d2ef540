"""Independent reference oracles used by the test suite.

Everything in this module is written from first principles (renewal-reward
algebra, occupancy-measure LPs, exhaustive enumeration) and deliberately does
NOT import the package under test.  Tests compare package outputs against
these values.
"""

from __future__ import annotations

import itertools

import numpy as np
from scipy.optimize import linprog
from scipy.sparse import lil_matrix

# ---------------------------------------------------------------------------
# shifted-geometric service law
# ---------------------------------------------------------------------------


def service_pmf(p: float, tau_min: int, k_max: int) -> np.ndarray:
    """pmf[s] = P(service takes s slots), s = 0..k_max.

    Service = tau_min + Geometric(p) (support starts at tau_min + 1): the
    completion coin is only flipped once elapsed time exceeds tau_min.
    """
    pmf = np.zeros(k_max + 1)
    for s in range(tau_min + 1, k_max + 1):
        pmf[s] = p * (1.0 - p) ** (s - tau_min - 1)
    return pmf


def _service_grid(p: float, tau_min: int, eps: float = 1e-14) -> np.ndarray:
    """pmf grid covering all but eps of the service-time mass."""
    # tail mass after tau_min + j slots is (1-p)^j
    j = 1
    while (1.0 - p) ** j > eps:
        j += 1
    return service_pmf(p, tau_min, tau_min + j + 1)


# ---------------------------------------------------------------------------
# renewal-reward average AoI for single-server threshold policies
# ---------------------------------------------------------------------------


def threshold_policy_average_aoi(p: float, tau_min: int, h: int) -> float:
    """Exact long-run average AoI of the offload-at-age->=h policy, one server.

    Cycle anatomy (reset to reset): the age after a completion is R = S' + 1
    where S' is the previous service length; the user waits (if R < h) and
    offloads at age A0 = max(R, h); service takes S slots while the age keeps
    climbing, so the cycle covers ages R .. A0 + S over A0 - R + S + 1 slots.
    S and S' are independent draws of the shifted-geometric law, which makes
    every expectation below a finite double sum.
    """
    pmf = _service_grid(p, tau_min)
    support = np.nonzero(pmf)[0]

    def tri(x: float) -> float:
        return x * (x + 1) / 2.0

    num = 0.0  # E[sum of ages over a cycle]
    den = 0.0  # E[cycle length]
    for s_prev in support:
        r = s_prev + 1
        a0 = max(r, h)
        for s in support:
            w = pmf[s_prev] * pmf[s]
            num += w * (tri(a0 + s) - tri(r - 1))
            den += w * (a0 - r + s + 1)
    return num / den


def best_threshold_average_aoi(p: float, tau_min: int, h_max: int = 60) -> tuple[int, float]:
    """Optimal threshold and its average AoI by direct enumeration."""
    vals = {h: threshold_policy_average_aoi(p, tau_min, h) for h in range(1, h_max + 1)}
    h_star = min(vals, key=vals.get)
    return h_star, vals[h_star]


# ---------------------------------------------------------------------------
# idealized unshifted identity: recurrence of single-slot deliveries
# ---------------------------------------------------------------------------


def idealized_recursion_value(p: float, iters: int = 10_000) -> float:
    """Fixed point of  A = p*1 + sum_{i>=2} p(1-p)^{i-1} (i + A).

    Solved by direct iteration of the truncated series (no algebra), so it
    independently checks the closed form 1/p^2.  The quantity is the mean
    recurrence time of deliveries whose (unshifted geometric) service took
    exactly one slot.
    """
    i = np.arange(1, 2000)
    pmf = p * (1.0 - p) ** (i - 1)
    a = 0.0
    for _ in range(iters):
        a_next = pmf[0] * 1.0 + float(np.sum(pmf[1:] * (i[1:] + a)))
        if abs(a_next - a) < 1e-15:
            a = a_next
            break
        a = a_next
    return a


# ---------------------------------------------------------------------------
# exact average-cost optimum of a finite MDP via the occupancy-measure LP
# ---------------------------------------------------------------------------


def mdp_average_cost_lp(
    n_states: int,
    actions: list[list[int]],
    kernel: dict[tuple[int, int], list[tuple[int, float]]],
    cost: dict[tuple[int, int], float],
) -> float:
    """Minimal long-run average cost via linear programming.

    Variables x[s,a] >= 0 (stationary state-action frequencies) with
    sum x = 1 and flow balance sum_a x[s',a] = sum_{s,a} x[s,a] P(s'|s,a).
    This route is solver-independent of any value-iteration code.
    """
    pairs = [(s, a) for s in range(n_states) for a in actions[s]]
    idx = {sa: i for i, sa in enumerate(pairs)}
    n = len(pairs)

    a_eq = lil_matrix((n_states + 1, n))
    b_eq = np.zeros(n_states + 1)
    for (s, a), i in idx.items():
        a_eq[n_states, i] = 1.0  # normalization row
        a_eq[s, i] += 1.0
        for s2, pr in kernel[(s, a)]:
            a_eq[s2, i] -= pr
    b_eq[n_states] = 1.0

    c = np.array([cost[sa] for sa in pairs])
    res = linprog(
        c,
        A_eq=a_eq.tocsr(),
        b_eq=b_eq,
        bounds=(0, None),
        method="highs",
        options={
            # default feasibility tolerances can leave the objective off by
            # ~1e-5 on these degenerate flow polytopes
            "primal_feasibility_tolerance": 1e-10,
            "dual_feasibility_tolerance": 1e-10,
        },
    )
    assert res.status == 0, res.message
    return float(res.fun)


# ---------------------------------------------------------------------------
# single-user two-layer MDP, built with plain loops (oracle-side kernel)
# ---------------------------------------------------------------------------

WAIT = -1
DROP = -2


def build_single_user_mdp(
    p_list: list[float],
    nu_list: list[float],
    tau_min: int,
    a_max: int,
    mode: str,
):
    """Tiny explicit single-user MDP for cross-checking the package builder.

    States: ("L1", delta) for delta = 1..a_max; ("L2", delta, d, m) with
    1 <= d < delta <= a_max (m = serving server; kept also in preemptive mode
    where switching between servers is allowed).  Actions at L1: WAIT or
    offload to any server; at L2: continue on some server (the same one in
    non-preemptive mode) or DROP (non-preemptive) / WAIT-equivalent abandon
    (preemptive).  Ages cap at a_max; at the cap the elapsed clock keeps
    counting (gen_age decrements toward 1) so a capped task still completes.
    """
    assert mode in ("preemptive", "non_preemptive")
    m_count = len(p_list)
    states: list[tuple] = [("L1", d) for d in range(1, a_max + 1)]
    for delta in range(2, a_max + 1):
        for d in range(1, delta):
            for m in range(m_count):
                states.append(("L2", delta, d, m))
    sid = {s: i for i, s in enumerate(states)}

    def clip(x: int) -> int:
        return min(x, a_max)

    def advance_l2(delta: int, d: int) -> tuple[int, int]:
        # Saturating age: at the cap the elapsed clock keeps counting.
        if delta >= a_max:
            return a_max, max(1, d - 1)
        return delta + 1, d

    actions: list[list[int]] = []
    kernel: dict[tuple[int, int], list[tuple[int, float]]] = {}
    cost: dict[tuple[int, int], float] = {}

    for s in states:
        i = sid[s]
        acts = []
        if s[0] == "L1":
            delta = s[1]
            acts.append(WAIT)
            kernel[(i, WAIT)] = [(sid[("L1", clip(delta + 1))], 1.0)]
            cost[(i, WAIT)] = float(delta)
            for m in range(m_count):
                acts.append(m)
                d = min(delta, a_max - 1)  # offload at the cap keeps d < delta
                kernel[(i, m)] = [(sid[("L2", clip(delta + 1), d, m)], 1.0)]
                cost[(i, m)] = float(delta) + nu_list[m]
        else:
            _, delta, d, m_cur = s
            elapsed = delta - d
            choices = range(m_count) if mode == "preemptive" else [m_cur]
            for m in choices:
                acts.append(m)
                nxt = []
                if elapsed > tau_min:
                    nxt.append((sid[("L1", clip(elapsed + 1))], p_list[m]))
                    stay = 1.0 - p_list[m]
                else:
                    stay = 1.0
                if stay > 0:
                    a2, d2 = advance_l2(delta, d)
                    nxt.append((sid[("L2", a2, d2, m)], stay))
                kernel[(i, m)] = nxt
                cost[(i, m)] = float(delta) + nu_list[m]
            acts.append(DROP)
            kernel[(i, DROP)] = [(sid[("L1", clip(delta + 1))], 1.0)]
            cost[(i, DROP)] = float(delta)
        actions.append(acts)

    return states, sid, actions, kernel, cost


def single_user_optimal_average_cost(
    p_list, nu_list, tau_min, a_max, mode
) -> float:
    """Exact optimal average cost of the single-user subproblem (LP route)."""
    states, _, actions, kernel, cost = build_single_user_mdp(
        p_list, nu_list, tau_min, a_max, mode
    )
    return mdp_average_cost_lp(len(states), actions, kernel, cost)


def chain_average_cost(states, sid, kernel, cost, act_of) -> float:
    """Average cost of a fixed policy via the stationary distribution.

    act_of maps an oracle state tuple to the action taken there.  The
    induced chain must be unichain; the stationary distribution comes from
    replacing one balance equation with normalization, which is independent
    of any policy-evaluation code in the package under test.
    """
    n = len(states)
    trans = np.zeros((n, n))
    c = np.zeros(n)
    for s in states:
        i = sid[s]
        a = act_of(s)
        for j, w in kernel[(i, a)]:
            trans[i, j] += w
        c[i] = cost[(i, a)]
    a_mat = trans.T - np.eye(n)
    a_mat[-1, :] = 1.0
    b = np.zeros(n)
    b[-1] = 1.0
    pi = np.linalg.solve(a_mat, b)
    assert pi.min() > -1e-9, "stationary solve produced negative mass"
    return float(pi @ c)


# ---------------------------------------------------------------------------
# joint two-user one-server MDP (non-preemptive), exact optimum
# ---------------------------------------------------------------------------


def build_joint_two_user_mdp(p: float, tau_min: int, a_max: int):
    """Joint MDP for two users sharing one server, non-preemptive mode.

    Per-user states: ("L1", delta) or ("L2", delta, d); at most one user may
    hold the server.  Joint actions: which user offloads (if the server is
    free), whether the holder drops.  Objective: average of the two ages.
    """

    def clip(x):
        return min(x, a_max)

    user_states = [("L1", d) for d in range(1, a_max + 1)]
    user_states += [
        ("L2", delta, d) for delta in range(2, a_max + 1) for d in range(1, delta)
    ]

    joint = [
        (u1, u2)
        for u1 in user_states
        for u2 in user_states
        if not (u1[0] == "L2" and u2[0] == "L2")
    ]
    sid = {s: i for i, s in enumerate(joint)}

    def step_user(u, act):
        """Per-user sub-distribution given its action id.

        act: "wait", "offload", "continue", "drop".  Returns [(state, prob)].
        """
        if u[0] == "L1":
            delta = u[1]
            if act == "offload":
                return [(("L2", clip(delta + 1), min(delta, a_max - 1)), 1.0)]
            return [(("L1", clip(delta + 1)), 1.0)]
        _, delta, d = u
        elapsed = delta - d
        if act == "drop":
            return [(("L1", clip(delta + 1)), 1.0)]
        out = []
        if elapsed > tau_min:
            out.append((("L1", clip(elapsed + 1)), p))
            stay = 1.0 - p
        else:
            stay = 1.0
        if stay > 0:
            if delta >= a_max:
                out.append((("L2", a_max, max(1, d - 1)), stay))
            else:
                out.append((("L2", delta + 1, d), stay))
        return out

    actions: list[list[int]] = []
    kernel: dict[tuple[int, int], list[tuple[int, float]]] = {}
    cost: dict[tuple[int, int], float] = {}

    for s in joint:
        u1, u2 = s
        i = sid[s]
        acts = []
        if u1[0] == "L1" and u2[0] == "L1":
            joint_acts = [("wait", "wait"), ("offload", "wait"), ("wait", "offload")]
        elif u1[0] == "L2":
            joint_acts = [("continue", "wait"), ("drop", "wait")]
        else:
            joint_acts = [("wait", "continue"), ("wait", "drop")]
        for k, (a1, a2) in enumerate(joint_acts):
            acts.append(k)
            dist: dict[int, float] = {}
            for v1, p1 in step_user(u1, a1):
                for v2, p2 in step_user(u2, a2):
                    j = sid[(v1, v2)]
                    dist[j] = dist.get(j, 0.0) + p1 * p2
            kernel[(i, k)] = list(dist.items())
            cost[(i, k)] = (u1[1] + u2[1]) / 2.0
        actions.append(acts)

    return joint, sid, actions, kernel, cost


def joint_two_user_optimal_average_cost(p, tau_min, a_max) -> float:
    """Exact joint optimum (mean per-user AoI) for N=2, M=1, via the LP."""
    joint, _, actions, kernel, cost = build_joint_two_user_mdp(p, tau_min, a_max)
    return mdp_average_cost_lp(len(joint), actions, kernel, cost)


# ---------------------------------------------------------------------------
# brute-force maximum-weight bipartite matching
# ---------------------------------------------------------------------------


def bruteforce_max_weight_matching(weights: np.ndarray, eligible: np.ndarray) -> float:
    """Exhaustive optimum of the at-most-one assignment with optional pairs.

    weights: (n_users, n_servers); eligible: boolean mask.  Pairs may be left
    unmatched; ineligible pairs never match.  Returns the best total weight.
    """
    n, m = weights.shape
    cols = range(m)
    best = 0.0
    for k in range(min(n, m) + 1):
        for rows in itertools.combinations(range(n), k):
            for perm in itertools.permutations(cols, k):
                if all(eligible[r, c] for r, c in zip(rows, perm)):
                    w = sum(weights[r, c] for r, c in zip(rows, perm))
                    best = max(best, w)
    return best
