"""Average-cost solvers for the single-user offloading subproblem.

The subproblem is a two-layer Markov decision process over the user's age.
Layer-1 states are plain ages ``1..a_max`` (no task in flight); layer-2
states are ``(age, gen_age)`` pairs where ``gen_age`` is the age the task
was generated at, so ``age - gen_age`` is the elapsed service time.  In
non-preemptive mode a layer-2 state is additionally tagged with the class
of the server holding the task.

Server classes are indexed ``1..M`` in ascending completion probability;
action ``0`` is the passive one (wait at layer 1, drop/abandon at layer 2).

Ages saturate at ``a_max``.  At the cap the elapsed clock keeps counting
(``gen_age`` slides down, never below 1), so capped tasks still complete
and the chain stays connected.

Two solver routes are provided on purpose and cross-checked in tests:

* :func:`relative_value_iteration` — span-seminorm value iteration over an
  explicit :class:`MdpTable`; the reference implementation.
* :func:`solve_subproblem` — policy iteration with exact policy evaluation
  (cycle decomposition + one dense linear solve); much faster, used by the
  dual-price machinery and the simulator.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import NON_PREEMPTIVE, PREEMPTIVE, ServerSpec, UserSpec

PASSIVE = 0

_WALK_EPS = 1e-15  # survival mass below this is closed out analytically


# ---------------------------------------------------------------------------
# explicit table
# ---------------------------------------------------------------------------


@dataclass
class MdpTable:
    """Explicit truncated subproblem: states, kernel rows, stage costs.

    states: ("L1", age) and — preemptive — ("L2", age, gen_age), or
    non-preemptive ("L2", age, gen_age, holder_class).  kernel maps
    (state_index, action) to a list of (successor_index, probability);
    action 0 is passive, action j engages class j.  At layer 2 in
    non-preemptive mode only the holder's class is available.
    """

    mode: str
    tau_min: int
    a_max: int
    p: tuple
    nu: tuple
    server_ids: tuple
    states: list
    sid: dict
    actions: list
    kernel: dict
    cost: dict

    def check_rows(self, tol: float = 1e-12) -> None:
        for key, row in self.kernel.items():
            total = sum(w for _, w in row)
            if abs(total - 1.0) > tol:
                raise AssertionError(f"kernel row {key} sums to {total!r}")

    def check_connectivity(self) -> None:
        """Layered-connectivity sanity: offload exists from every layer-1
        state, some layer-2 self transition exists, and every layer-2 state
        can reach layer 1."""
        l2_self = False
        for s in self.states:
            i = self.sid[s]
            if s[0] == "L1":
                if not any(
                    self.states[j][0] == "L2"
                    for a in self.actions[i]
                    for j, _ in self.kernel[(i, a)]
                ):
                    raise AssertionError(f"no layer-2 exit from {s}")
            else:
                for a in self.actions[i]:
                    if any(self.states[j][0] == "L2" for j, _ in self.kernel[(i, a)]):
                        l2_self = True
        if not l2_self:
            raise AssertionError("no layer-2 self transitions anywhere")
        # bullet 3: reverse reachability of the layer-1 set
        incoming: dict[int, list[int]] = {i: [] for i in range(len(self.states))}
        for (i, _a), row in self.kernel.items():
            for j, w in row:
                if w > 0:
                    incoming[j].append(i)
        reached = {i for i, s in enumerate(self.states) if s[0] == "L1"}
        frontier = list(reached)
        while frontier:
            j = frontier.pop()
            for i in incoming[j]:
                if i not in reached:
                    reached.add(i)
                    frontier.append(i)
        missing = [self.states[i] for i in range(len(self.states)) if i not in reached]
        if missing:
            raise AssertionError(f"{len(missing)} states cannot reach layer 1: {missing[:3]}")


def build_truncated_mdp(
    user: UserSpec,
    servers,
    nu=None,
    a_max: int = 300,
    mode: str = NON_PREEMPTIVE,
) -> MdpTable:
    """Build the explicit truncated subproblem for one user.

    servers: iterable of ServerSpec; they are sorted by ascending completion
    probability and addressed as classes 1..M thereafter.  nu overrides the
    per-server costs (aligned with `servers` as passed, before sorting).
    """
    servers = list(servers)
    if nu is None:
        nu = [s.nu for s in servers]
    if len(nu) != len(servers):
        raise ValueError(f"nu has {len(nu)} entries for {len(servers)} servers")
    if a_max <= user.tau_min + 2:
        raise ValueError(f"a_max={a_max} too small for tau_min={user.tau_min}")
    order = sorted(range(len(servers)), key=lambda i: (servers[i].p, nu[i], servers[i].id))
    p = tuple(float(servers[i].p) for i in order)
    nu_sorted = tuple(float(nu[i]) for i in order)
    ids = tuple(servers[i].id for i in order)
    tau, K, M = user.tau_min, a_max, len(servers)

    states: list[tuple] = [("L1", a) for a in range(1, K + 1)]
    if mode == PREEMPTIVE:
        states += [("L2", a, d) for a in range(2, K + 1) for d in range(1, a)]
    elif mode == NON_PREEMPTIVE:
        states += [
            ("L2", a, d, j)
            for a in range(2, K + 1)
            for d in range(1, a)
            for j in range(1, M + 1)
        ]
    else:
        raise ValueError(f"unknown mode {mode!r}")
    sid = {s: i for i, s in enumerate(states)}

    def advance(a: int, d: int) -> tuple[int, int]:
        if a >= K:
            return K, max(1, d - 1)
        return a + 1, d

    actions: list[list[int]] = []
    kernel: dict = {}
    cost: dict = {}
    for s in states:
        i = sid[s]
        acts: list[int] = []
        if s[0] == "L1":
            a = s[1]
            acts.append(PASSIVE)
            kernel[(i, PASSIVE)] = [(sid[("L1", min(a + 1, K))], 1.0)]
            cost[(i, PASSIVE)] = float(a)
            for j in range(1, M + 1):
                acts.append(j)
                d0 = min(a, K - 1)
                tgt = ("L2", min(a + 1, K), d0) if mode == PREEMPTIVE else (
                    "L2", min(a + 1, K), d0, j)
                kernel[(i, j)] = [(sid[tgt], 1.0)]
                cost[(i, j)] = a + nu_sorted[j - 1]
        else:
            a, d = s[1], s[2]
            elapsed = a - d
            choices = range(1, M + 1) if mode == PREEMPTIVE else [s[3]]
            for j in choices:
                acts.append(j)
                row = []
                stay = 1.0
                if elapsed > tau:
                    pr = p[j - 1]
                    row.append((sid[("L1", min(elapsed + 1, K))], pr))
                    stay -= pr
                if stay > 0:
                    a2, d2 = advance(a, d)
                    tgt = ("L2", a2, d2) if mode == PREEMPTIVE else ("L2", a2, d2, s[3])
                    row.append((sid[tgt], stay))
                kernel[(i, j)] = row
                cost[(i, j)] = a + nu_sorted[j - 1]
            acts.append(PASSIVE)  # drop / abandon
            kernel[(i, PASSIVE)] = [(sid[("L1", min(a + 1, K))], 1.0)]
            cost[(i, PASSIVE)] = float(a)
        actions.append(acts)

    table = MdpTable(
        mode=mode, tau_min=tau, a_max=K, p=p, nu=nu_sorted, server_ids=ids,
        states=states, sid=sid, actions=actions, kernel=kernel, cost=cost,
    )
    table.check_rows()
    table.check_connectivity()
    return table


# ---------------------------------------------------------------------------
# value tables
# ---------------------------------------------------------------------------


@dataclass
class ValueTable:
    """Solved subproblem: relative values, average cost, greedy policy.

    Arrays are age-indexed from 1 (index 0 unused).  v2/pol2 layouts:
    preemptive (gen_age, age); non-preemptive (class-1, gen_age, age) —
    valid entries have gen_age < age.  pol1[a]: 0 wait, j offload to class
    j; pol2: 0 drop/abandon, j keep class j engaged.  gamma sits at the
    midpoint of the final one-step span bounds [bound_lo, bound_hi]; the
    reference state (layer-1 age 1) has value 0.
    """

    mode: str
    tau_min: int
    a_max: int
    p: np.ndarray
    nu: np.ndarray
    gamma: float
    v1: np.ndarray
    v2: np.ndarray
    pol1: np.ndarray
    pol2: np.ndarray
    bound_lo: float
    bound_hi: float
    residual: float
    span: float
    iterations: int
    converged: bool
    server_ids: tuple = ()

    @property
    def n_classes(self) -> int:
        return len(self.p)

    def value(self, state: tuple) -> float:
        """Relative value of ("L1", a), ("L2", a, d) or ("L2", a, d, j)."""
        if state[0] == "L1":
            return float(self.v1[state[1]])
        if self.mode == PREEMPTIVE:
            return float(self.v2[state[2], state[1]])
        return float(self.v2[state[3] - 1, state[2], state[1]])

    def action(self, state: tuple) -> int:
        if state[0] == "L1":
            return int(self.pol1[state[1]])
        if self.mode == PREEMPTIVE:
            return int(self.pol2[state[2], state[1]])
        return int(self.pol2[state[3] - 1, state[2], state[1]])


def l2_valid_mask(a_max: int) -> np.ndarray:
    """(a_max+1, a_max+1) boolean mask of valid (gen_age, age) pairs."""
    d = np.arange(a_max + 1)[:, None]
    a = np.arange(a_max + 1)[None, :]
    return (d >= 1) & (d < a)


@dataclass
class _Params:
    mode: str
    tau: int
    K: int
    p: np.ndarray
    nu: np.ndarray


def _params_of(mode, tau_min, a_max, p, nu) -> _Params:
    if mode not in (PREEMPTIVE, NON_PREEMPTIVE):
        raise ValueError(f"unknown mode {mode!r}")
    p = np.asarray(p, dtype=float)
    nu = np.asarray(nu, dtype=float)
    if p.ndim != 1 or p.size == 0 or np.any(np.diff(p) < 0):
        raise ValueError("class completion probabilities must be ascending")
    if np.any(p <= 0) or np.any(p > 1):
        raise ValueError("completion probabilities must lie in (0, 1]")
    if a_max <= tau_min + 2:
        raise ValueError(f"a_max={a_max} too small for tau_min={tau_min}")
    return _Params(mode=mode, tau=int(tau_min), K=int(a_max), p=p, nu=nu)


# ---------------------------------------------------------------------------
# vectorized backups
# ---------------------------------------------------------------------------


def _q_layer1(pr: _Params, v1: np.ndarray, v2: np.ndarray) -> np.ndarray:
    """(K+1, M+1) action values at layer 1; column 0 is wait."""
    K, M = pr.K, len(pr.p)
    ages = np.arange(K + 1)
    nxt = np.minimum(ages + 1, K)
    q = np.empty((K + 1, M + 1))
    q[:, 0] = ages + v1[nxt]
    off_d = np.minimum(ages, K - 1)
    for j in range(1, M + 1):
        tgt = v2[off_d, nxt] if pr.mode == PREEMPTIVE else v2[j - 1, off_d, nxt]
        q[:, j] = ages + pr.nu[j - 1] + tgt
    q[0, :] = np.nan
    return q


def _greedy_layer1(q: np.ndarray) -> np.ndarray:
    """Argmin over layer-1 actions; ties prefer engaging the lowest class
    over waiting (active at the critical age) and slower among servers."""
    M = q.shape[1] - 1
    stacked = np.column_stack([q[:, 1:], q[:, 0]])  # classes first, wait last
    pick = np.nanargmin(np.where(np.isnan(stacked), np.inf, stacked), axis=1)
    pol = np.where(pick == M, PASSIVE, pick + 1).astype(np.int16)
    pol[0] = PASSIVE
    return pol


def _l2_pass_nonpreemptive(pr, v1, gamma, pol2=None):
    """Exact backward pass over layer-2 values, non-preemptive mode.

    With pol2 given (shape (M, K+1, K+1), entries 0 drop / j continue) this
    evaluates that policy; otherwise it takes the greedy minimum.  Returns
    (v2, pol2_out).  The age axis runs backward so each row is resolved
    against already-final successor values; the cap column, where gen_age
    slides, is resolved by an ascending sweep with a closed-form self-loop.
    """
    K, M, tau = pr.K, len(pr.p), pr.tau
    v2 = np.zeros((M, K + 1, K + 1))
    out = np.zeros((M, K + 1, K + 1), dtype=np.int16)
    nxt_l1 = v1[min(K + 1, K)]  # == v1[K]
    for j in range(1, M + 1):
        pj, nuj = pr.p[j - 1], pr.nu[j - 1]
        # cap column, gen_age ascending (advance target is (d-1, K))
        drop_q = K - gamma + nxt_l1
        for d in range(1, K):
            e = K - d
            elig = e > tau
            h = pj if elig else 0.0
            reset = v1[min(e + 1, K)]
            if d == 1:
                # self-loop: x = K + nu - gamma + h reset + (1-h) x
                cont_q = (K + nuj - gamma) / h + reset if h > 0 else np.inf
            else:
                cont_q = K + nuj - gamma + h * reset + (1 - h) * v2[j - 1, d - 1, K]
            if pol2 is None:
                take_drop = drop_q < cont_q
            else:
                take_drop = pol2[j - 1, d, K] == PASSIVE
            v2[j - 1, d, K] = drop_q if take_drop else cont_q
            out[j - 1, d, K] = PASSIVE if take_drop else j
        # interior ages, descending
        for a in range(K - 1, 1, -1):
            d = np.arange(1, a)
            e = a - d
            h = pr.p[j - 1] * (e > tau)
            cont = a + nuj - gamma + h * v1[e + 1] + (1 - h) * v2[j - 1, 1:a, a + 1]
            drop = a - gamma + v1[a + 1]
            if pol2 is None:
                take_drop = drop < cont
            else:
                take_drop = pol2[j - 1, 1:a, a] == PASSIVE
            v2[j - 1, 1:a, a] = np.where(take_drop, drop, cont)
            out[j - 1, 1:a, a] = np.where(take_drop, PASSIVE, j)
    return v2, out


def _l2_pass_preemptive(pr, v1, gamma, pol2=None):
    """Exact backward pass over layer-2 values, preemptive mode.

    Action set per state: abandon (0) or engage any class; ties prefer the
    slowest class and any class over abandoning.
    """
    K, M, tau = pr.K, len(pr.p), pr.tau
    v2 = np.zeros((K + 1, K + 1))
    out = np.zeros((K + 1, K + 1), dtype=np.int16)
    for d in range(1, K):  # cap column ascending
        e = K - d
        elig = e > tau
        reset = v1[min(e + 1, K)]
        qs = np.empty(M + 1)
        for j in range(1, M + 1):
            h = pr.p[j - 1] if elig else 0.0
            if d == 1:
                qs[j - 1] = (K + pr.nu[j - 1] - gamma) / h + reset if h > 0 else np.inf
            else:
                qs[j - 1] = K + pr.nu[j - 1] - gamma + h * reset + (1 - h) * v2[d - 1, K]
        qs[M] = K - gamma + v1[K]  # abandon
        if pol2 is None:
            pick = int(np.argmin(qs))
        else:
            act = int(pol2[d, K])
            pick = M if act == PASSIVE else act - 1
        v2[d, K] = qs[pick]
        out[d, K] = PASSIVE if pick == M else pick + 1
    for a in range(K - 1, 1, -1):
        d = np.arange(1, a)
        e = a - d
        elig = e > tau
        h = pr.p[:, None] * elig[None, :]  # (M, a-1)
        cand = a + pr.nu[:, None] - gamma + h * v1[e + 1][None, :] \
            + (1 - h) * v2[1:a, a + 1][None, :]
        abandon = np.full(a - 1, a - gamma + v1[a + 1])
        stacked = np.vstack([cand, abandon[None, :]])  # classes first
        if pol2 is None:
            pick = np.argmin(stacked, axis=0)
        else:
            act = pol2[1:a, a].astype(int)
            pick = np.where(act == PASSIVE, M, act - 1)
        v2[1:a, a] = np.take_along_axis(stacked, pick[None, :], axis=0)[0]
        out[1:a, a] = np.where(pick == M, PASSIVE, pick + 1)
    return v2, out


def _jacobi_backup(pr: _Params, v1, v2):
    """One synchronous optimal backup; returns (tv1, tv2) without any
    average-cost subtraction (used for span bounds and residuals)."""
    K, M, tau = pr.K, len(pr.p), pr.tau
    q1 = _q_layer1(pr, v1, v2)
    tv1 = np.empty(K + 1)
    tv1[0] = 0.0
    tv1[1:] = q1[1:].min(axis=1)
    ages = np.arange(K + 1)
    d_grid = ages[:, None]
    a_grid = ages[None, :]
    valid = l2_valid_mask(K)
    e = a_grid - d_grid
    # successor (gen_age, age) after one in-service slot
    adv_a = np.minimum(a_grid + 1, K)
    adv_d = np.where(a_grid >= K, np.maximum(d_grid - 1, 1), d_grid)
    ridx = np.clip(e + 1, 0, K)
    drop = a_grid + v1[np.minimum(a_grid + 1, K)]
    if pr.mode == PREEMPTIVE:
        elig = (e > tau) & valid
        tv2 = np.full((K + 1, K + 1), np.inf)
        for j in range(1, M + 1):
            h = pr.p[j - 1] * elig
            q = a_grid + pr.nu[j - 1] + h * v1[ridx] + (1 - h) * v2[adv_d, adv_a]
            tv2 = np.minimum(tv2, q)
        tv2 = np.minimum(tv2, drop)
        tv2[~valid] = 0.0
    else:
        elig = (e > tau) & valid
        tv2 = np.zeros((M, K + 1, K + 1))
        for j in range(1, M + 1):
            h = pr.p[j - 1] * elig
            q = a_grid + pr.nu[j - 1] + h * v1[ridx] + (1 - h) * v2[j - 1][adv_d, adv_a]
            tv2[j - 1] = np.minimum(q, drop)
            tv2[j - 1][~valid] = 0.0
    return tv1, tv2


def _span_stats(pr, v1, v2, tv1, tv2):
    diffs = [tv1[1:] - v1[1:]]
    valid = l2_valid_mask(pr.K)
    if pr.mode == PREEMPTIVE:
        diffs.append((tv2 - v2)[valid])
    else:
        diffs.append((tv2 - v2)[:, valid])
    alld = np.concatenate([np.ravel(x) for x in diffs])
    return float(alld.min()), float(alld.max())


def _finalize(pr, v1, v2, pol1, pol2, iterations, span, converged) -> ValueTable:
    """Anchor values at the reference state, measure one-step bounds."""
    tv1, tv2 = _jacobi_backup(pr, v1, v2)
    lo, hi = _span_stats(pr, v1, v2, tv1, tv2)
    gamma = 0.5 * (lo + hi)
    residual = 0.5 * (hi - lo)
    ref = v1[1]
    v1 = v1 - ref
    v1[0] = np.nan
    v2 = v2 - ref
    valid = l2_valid_mask(pr.K)
    if pr.mode == PREEMPTIVE:
        v2[~valid] = 0.0
    else:
        v2[:, ~valid] = 0.0
    return ValueTable(
        mode=pr.mode, tau_min=pr.tau, a_max=pr.K, p=pr.p.copy(), nu=pr.nu.copy(),
        gamma=float(gamma), v1=v1, v2=v2, pol1=pol1, pol2=pol2,
        bound_lo=lo, bound_hi=hi, residual=float(residual), span=float(span),
        iterations=iterations, converged=converged,
    )


# ---------------------------------------------------------------------------
# relative value iteration (reference solver)
# ---------------------------------------------------------------------------


def relative_value_iteration(
    mdp: MdpTable,
    tol: float = 1e-9,
    max_iters: int = 100_000,
) -> ValueTable:
    """Span-seminorm relative value iteration on the explicit table's model.

    Each sweep is one synchronous optimal backup followed by subtracting
    the backed-up value of the reference state (layer-1 age 1), which pins
    that state to 0 throughout.  Stops when the span of the one-step value
    gain TV - V falls below tol; its min/max then bracket the optimal
    average cost and the midpoint is reported as gamma.  Slow but simple;
    :func:`solve_subproblem` is the fast route and tests hold the two to
    agreement.
    """
    pr = _params_of(mdp.mode, mdp.tau_min, mdp.a_max, mdp.p, mdp.nu)
    K, M = pr.K, len(pr.p)
    v1 = np.zeros(K + 1)
    v2 = np.zeros((K + 1, K + 1)) if pr.mode == PREEMPTIVE else np.zeros((M, K + 1, K + 1))
    span = np.inf
    converged = False
    it = 0
    for it in range(1, max_iters + 1):
        tv1, tv2 = _jacobi_backup(pr, v1, v2)
        lo, hi = _span_stats(pr, v1, v2, tv1, tv2)
        span = hi - lo
        ref = tv1[1]
        v1 = tv1 - ref
        v1[0] = 0.0
        v2 = tv2 - ref
        if pr.mode == PREEMPTIVE:
            v2[~l2_valid_mask(K)] = 0.0
        else:
            v2[:, ~l2_valid_mask(K)] = 0.0
        if span < tol:
            converged = True
            break
    pol1, pol2 = _greedy_from_values(pr, v1, v2)
    return _finalize(pr, v1, v2, pol1, pol2, it, float(span), converged)


def _greedy_from_values(pr: _Params, v1, v2):
    """Greedy policy for given values; ties prefer active over passive and
    slower classes over faster ones (deterministic, reproducible)."""
    K, M, tau = pr.K, len(pr.p), pr.tau
    pol1 = _greedy_layer1(_q_layer1(pr, v1, v2))
    ages = np.arange(K + 1)
    d_grid, a_grid = ages[:, None], ages[None, :]
    valid = l2_valid_mask(K)
    e = a_grid - d_grid
    adv_a = np.minimum(a_grid + 1, K)
    adv_d = np.where(a_grid >= K, np.maximum(d_grid - 1, 1), d_grid)
    ridx = np.clip(e + 1, 0, K)
    elig = (e > tau) & valid
    drop = a_grid + v1[np.minimum(a_grid + 1, K)]
    if pr.mode == PREEMPTIVE:
        stacked = np.empty((M + 1, K + 1, K + 1))
        for j in range(1, M + 1):
            h = pr.p[j - 1] * elig
            stacked[j - 1] = a_grid + pr.nu[j - 1] + h * v1[ridx] + (1 - h) * v2[adv_d, adv_a]
        stacked[M] = drop
        pick = np.argmin(np.where(np.isnan(stacked), np.inf, stacked), axis=0)
        pol2 = np.where(pick == M, PASSIVE, pick + 1).astype(np.int16)
        pol2[~valid] = PASSIVE
    else:
        pol2 = np.zeros((M, K + 1, K + 1), dtype=np.int16)
        for j in range(1, M + 1):
            h = pr.p[j - 1] * elig
            cont = a_grid + pr.nu[j - 1] + h * v1[ridx] + (1 - h) * v2[j - 1][adv_d, adv_a]
            pol2[j - 1] = np.where(drop < cont, PASSIVE, j)
            pol2[j - 1][~valid] = PASSIVE
    return pol1, pol2


# ---------------------------------------------------------------------------
# policy iteration with exact evaluation (fast solver)
# ---------------------------------------------------------------------------


def _service_walk(pr: _Params, pol1, pol2):
    """Deterministic unrolling of the in-service phase per offload age.

    For every layer-1 age a0 where pol1 offloads, follow the layer-2
    trajectory under pol2 (hazards where elapsed > tau_min, drop exits,
    cap sliding) and accumulate, in expectation per offload:

      w[a0, r]        re-entry distribution over layer-1 ages r
      length[a0]      in-service slots (offload slot excluded)
      age_sum[a0]     sum of ages over those slots
      cls_slots[a0,j] slots with class j engaged (1-based columns)

    Residual mass in the cap's steady self-loop is closed out analytically.
    """
    K, M, tau = pr.K, len(pr.p), pr.tau
    a0 = np.arange(K + 1)
    active = pol1 > 0
    active[0] = False
    w = np.zeros((K + 1, K + 1))
    length = np.zeros(K + 1)
    age_sum = np.zeros(K + 1)
    cls_slots = np.zeros((K + 1, M + 1))
    surv = np.where(active, 1.0, 0.0)
    a = np.minimum(a0 + 1, K)
    d = np.minimum(a0, K - 1)
    hold = pol1.astype(int)  # non-preemptive: class fixed at offload
    for _ in range(2 * K + 4):
        alive = surv > _WALK_EPS
        if not alive.any():
            break
        at_loop = alive & (d == 1) & (a == K)
        if at_loop.any():
            # constant-hazard tail: elapsed frozen at K-1 (> tau), so the
            # engaged class completes geometrically; all mass re-enters at K
            idx = np.nonzero(at_loop)[0]
            for i in idx:
                if pr.mode == NON_PREEMPTIVE:
                    j = hold[i] if pol2[hold[i] - 1, 1, K] != PASSIVE else PASSIVE
                else:
                    j = int(pol2[1, K])
                if j == PASSIVE:
                    # dropping at the cap exits through layer 1 age K
                    w[i, K] += surv[i]
                    length[i] += surv[i]
                    age_sum[i] += surv[i] * K
                    surv[i] = 0.0
                    continue
                h = pr.p[j - 1]
                extra = surv[i] / h
                length[i] += extra
                age_sum[i] += extra * K
                cls_slots[i, j] += extra
                w[i, K] += surv[i]
                surv[i] = 0.0
            alive = surv > _WALK_EPS
            if not alive.any():
                break
        e = a - d
        if pr.mode == NON_PREEMPTIVE:
            act = np.where(alive, pol2[np.maximum(hold - 1, 0), d, a], 0)
            act = np.where(alive & (act > 0), hold, act)
        else:
            act = np.where(alive, pol2[d, a], 0)
        exiting = alive & (act == PASSIVE)
        if exiting.any():
            tgt = np.minimum(a + 1, K)
            np.add.at(w, (a0[exiting], tgt[exiting]), surv[exiting])
            length[exiting] += surv[exiting]
            age_sum[exiting] += surv[exiting] * a[exiting]
            surv[exiting] = 0.0
        cont = alive & (act > 0)
        if cont.any():
            j = act[cont]
            h = pr.p[j - 1] * (e[cont] > tau)
            length[cont] += surv[cont]
            age_sum[cont] += surv[cont] * a[cont]
            np.add.at(cls_slots, (a0[cont], j), surv[cont])
            tgt = np.minimum(e[cont] + 1, K)
            np.add.at(w, (a0[cont], tgt), surv[cont] * h)
            surv[cont] = surv[cont] * (1 - h)
        nxt_a = np.minimum(a + 1, K)
        d = np.where(a >= K, np.maximum(d - 1, 1), d)
        a = nxt_a
    return w, length, age_sum, cls_slots


def _first_offload_age(pol1, K) -> np.ndarray:
    """A0[r] = first age >= r with an offload action (K+1 if none)."""
    A0 = np.full(K + 2, K + 1, dtype=int)
    for a in range(K, 0, -1):
        A0[a] = a if pol1[a] > 0 else A0[a + 1]
    return A0


def _policy_evaluation(pr: _Params, pol1, pol2):
    """Exact average cost and layer-1 relative values for a fixed policy.

    Collapses each offload's service phase via :func:`_service_walk`, then
    solves the dense (K+1)-unknown linear system over layer-1 values and
    the average cost, anchored at age 1.
    """
    K = pr.K
    w, length, age_sum, cls_slots = _service_walk(pr, pol1, pol2)
    n = K + 1  # unknowns: v1[1..K] and gamma (column K)
    A = np.zeros((n, n))
    b = np.zeros(n)
    A[0, 0] = 1.0  # anchor v1[1] = 0
    for a in range(1, K + 1):
        row = a  # equation index; unknown column a-1 <-> v1[a]
        A[row, a - 1] += 1.0
        if pol1[a] == PASSIVE:
            nxt = min(a + 1, K)
            # at the cap self-loop this cancels the diagonal, leaving gamma = a
            A[row, nxt - 1] -= 1.0
            A[row, K] += 1.0
            b[row] = a
        else:
            j = int(pol1[a])
            A[row, 0:K] -= w[a, 1:]
            A[row, K] += 1.0 + length[a]
            nu_cost = float(cls_slots[a, 1:] @ pr.nu)
            b[row] = a + pr.nu[j - 1] + age_sum[a] + nu_cost
    x = np.linalg.solve(A, b)
    v1 = np.empty(K + 1)
    v1[0] = np.nan
    v1[1:] = x[0:K]
    gamma = float(x[K])
    return v1, gamma


def solve_subproblem(
    p,
    nu,
    tau_min: int,
    a_max: int,
    mode: str = NON_PREEMPTIVE,
    policy_init=None,
    max_rounds: int = 80,
) -> ValueTable:
    """Policy iteration on the subproblem; exact evaluation each round.

    p, nu: per-class completion probabilities (ascending) and costs.
    policy_init: optional (pol1, pol2) warm start, e.g. from the solution
    at a nearby cost vector.  Converges when the greedy policy is stable;
    the returned table carries the same diagnostics as the RVI route.
    """
    pr = _params_of(mode, tau_min, a_max, p, nu)
    K, M = pr.K, len(pr.p)
    if policy_init is not None:
        pol1 = policy_init[0].astype(np.int16).copy()
        pol2 = policy_init[1].astype(np.int16).copy()
    else:
        pol1 = np.full(K + 1, M, dtype=np.int16)  # offload fastest everywhere
        pol1[0] = PASSIVE
        if mode == PREEMPTIVE:
            pol2 = np.full((K + 1, K + 1), M, dtype=np.int16)
        else:
            pol2 = np.zeros((M, K + 1, K + 1), dtype=np.int16)
            for j in range(1, M + 1):
                pol2[j - 1] = j  # always continue
        _mask_pol2(pol2, K, mode)
    it = 0
    converged = False
    v1 = np.zeros(K + 1)
    v2 = None
    gamma = 0.0
    for it in range(1, max_rounds + 1):
        v1, gamma = _policy_evaluation(pr, pol1, pol2)
        if pr.mode == PREEMPTIVE:
            v2, _ = _l2_pass_preemptive(pr, v1, gamma, pol2=pol2)
            v2g, pol2_new = _l2_pass_preemptive(pr, v1, gamma)
        else:
            v2, _ = _l2_pass_nonpreemptive(pr, v1, gamma, pol2=pol2)
            v2g, pol2_new = _l2_pass_nonpreemptive(pr, v1, gamma)
        q1 = _q_layer1(pr, v1, v2)
        pol1_new = _greedy_layer1(q1)
        # keep the incumbent on near-ties so exact ties cannot cycle
        q_inc = np.take_along_axis(q1[1:], pol1[1:, None].astype(int), axis=1)[:, 0]
        q_new = np.take_along_axis(q1[1:], pol1_new[1:, None].astype(int), axis=1)[:, 0]
        keep = q_inc <= q_new + 1e-11
        pol1_new[1:][keep] = pol1[1:][keep]
        _mask_pol2(pol2_new, K, mode)
        if np.array_equal(pol1_new, pol1) and np.array_equal(pol2_new, pol2):
            converged = True
            break
        pol1, pol2 = pol1_new, pol2_new
    return _finalize(pr, v1, v2, pol1, pol2, it, 0.0, converged)


def _mask_pol2(pol2, K, mode) -> None:
    """Zero out the invalid (gen_age >= age) region of a layer-2 policy."""
    valid = l2_valid_mask(K)
    if mode == PREEMPTIVE:
        pol2[~valid] = PASSIVE
    else:
        pol2[:, ~valid] = PASSIVE


# ---------------------------------------------------------------------------
# exact chain statistics for a solved policy
# ---------------------------------------------------------------------------


@dataclass
class PolicyStats:
    """Long-run statistics of the policy's renewal chain."""

    gamma: float                 # average cost (age + engaged-class cost)
    avg_age: float               # average age alone
    rates: np.ndarray            # expected busy fraction per class, 1-based
    entry_dist: np.ndarray       # stationary distribution over re-entry ages
    degenerate: bool = False     # True if the chain can stall waiting forever


def evaluate_policy_chain(vt: ValueTable) -> PolicyStats:
    """Exact long-run averages of the policy in a ValueTable.

    Works on the cycle structure: layer-1 re-entry ages form a finite
    Markov chain whose rows come from the deterministic wait stretch plus
    the unrolled service phase; the stationary distribution then weights
    per-cycle cost, length, and class-engagement sums.  Entirely solver-free,
    so it doubles as an independent check that the greedy policy's average
    cost matches the solver's gamma.
    """
    pr = _params_of(vt.mode, vt.tau_min, vt.a_max, vt.p, vt.nu)
    K, M = pr.K, len(pr.p)
    pol1, pol2 = vt.pol1.astype(int), vt.pol2
    w, length, age_sum, cls_slots = _service_walk(pr, pol1, pol2)
    A0 = _first_offload_age(pol1, K)
    degenerate = False
    P = np.zeros((K + 1, K + 1))
    cyc_len = np.zeros(K + 1)
    cyc_age = np.zeros(K + 1)
    cyc_cls = np.zeros((K + 1, M + 1))
    for r in range(1, K + 1):
        a0 = A0[r]
        if a0 > K:
            degenerate = True
            P[r, r] = 1.0
            cyc_len[r] = 1.0
            cyc_age[r] = K
            continue
        j = int(pol1[a0])
        P[r, :] = w[a0, :]
        wait = a0 - r
        cyc_len[r] = wait + 1.0 + length[a0]
        cyc_age[r] = (r + a0 - 1) * wait / 2.0 + a0 + age_sum[a0]
        cyc_cls[r, :] = cls_slots[a0, :]
        cyc_cls[r, j] += 1.0  # the offload slot engages the class too
    rho = np.full(K + 1, 1.0 / K)
    rho[0] = 0.0
    for _ in range(400):
        nxt = rho @ P
        if np.abs(nxt - rho).max() < 1e-15:
            rho = nxt
            break
        rho = nxt
    rho = np.clip(rho, 0.0, None)
    rho /= rho.sum()
    el = float(rho @ cyc_len)
    ages = float(rho @ cyc_age)
    nu_cost = float((rho @ cyc_cls[:, 1:]) @ pr.nu)
    rates = np.zeros(M + 1)
    rates[1:] = (rho @ cyc_cls[:, 1:]) / el
    return PolicyStats(
        gamma=(ages + nu_cost) / el,
        avg_age=ages / el,
        rates=rates,
        entry_dist=rho,
        degenerate=degenerate,
    )


# ---------------------------------------------------------------------------
# diagnostics
# ---------------------------------------------------------------------------


def bellman_residual(vt: ValueTable) -> float:
    """max |gamma + V - TV| over states, from one synchronous backup."""
    pr = _params_of(vt.mode, vt.tau_min, vt.a_max, vt.p, vt.nu)
    v1 = vt.v1.copy()
    v1[0] = 0.0
    tv1, tv2 = _jacobi_backup(pr, v1, vt.v2)
    lo, hi = _span_stats(pr, v1, vt.v2, tv1, tv2)
    return max(abs(vt.gamma - lo), abs(hi - vt.gamma))


def q_layer1(vt: ValueTable) -> np.ndarray:
    """(K+1, M+1) layer-1 action values; column 0 waits."""
    pr = _params_of(vt.mode, vt.tau_min, vt.a_max, vt.p, vt.nu)
    v1 = vt.v1.copy()
    v1[0] = 0.0
    return _q_layer1(pr, v1, vt.v2)


def q_layer2(vt: ValueTable) -> np.ndarray:
    """Layer-2 action values.

    Preemptive: (K+1, K+1, M+1) over (gen_age, age, action); non-preemptive:
    (M, K+1, K+1, 2) per holder class with trailing axis (drop, continue).
    Only gen_age < age entries are meaningful.
    """
    pr = _params_of(vt.mode, vt.tau_min, vt.a_max, vt.p, vt.nu)
    K, M, tau = pr.K, len(pr.p), pr.tau
    v1 = vt.v1.copy()
    v1[0] = 0.0
    ages = np.arange(K + 1)
    d_grid, a_grid = ages[:, None], ages[None, :]
    valid = l2_valid_mask(K)
    e = a_grid - d_grid
    adv_a = np.minimum(a_grid + 1, K)
    adv_d = np.where(a_grid >= K, np.maximum(d_grid - 1, 1), d_grid)
    ridx = np.clip(e + 1, 0, K)
    elig = (e > tau) & valid
    drop = a_grid + v1[np.minimum(a_grid + 1, K)]
    if vt.mode == PREEMPTIVE:
        q = np.zeros((K + 1, K + 1, M + 1))
        q[:, :, 0] = drop
        for j in range(1, M + 1):
            h = pr.p[j - 1] * elig
            q[:, :, j] = a_grid + pr.nu[j - 1] + h * v1[ridx] + (1 - h) * vt.v2[adv_d, adv_a]
        return q
    q = np.zeros((M, K + 1, K + 1, 2))
    for j in range(1, M + 1):
        h = pr.p[j - 1] * elig
        q[j - 1, :, :, 0] = drop
        q[j - 1, :, :, 1] = a_grid + pr.nu[j - 1] + h * v1[ridx] \
            + (1 - h) * vt.v2[j - 1][adv_d, adv_a]
    return q


def spell_local_values(vt: ValueTable, pol2: np.ndarray | None = None) -> np.ndarray:
    """Layer-2 values accumulated until the first return to layer 1.

    Same backward pass that produced ``vt.v2``, but with every layer-1
    continuation pinned to zero, so the result measures only the
    ``cost - gamma`` mass of the remaining service spell.  This is the
    right quantity for price-sensitivity bounds: the full relative values
    also move with the layer-1 landscape, which has no per-class bound.
    ``pol2`` overrides the evaluated layer-2 policy (default: the table's
    own), which lets two price points be compared under one fixed policy.
    Shape matches ``vt.v2``.
    """
    pr = _params_of(vt.mode, vt.tau_min, vt.a_max, vt.p, vt.nu)
    zeros = np.zeros(pr.K + 1)
    if pol2 is None:
        pol2 = vt.pol2
    if vt.mode == PREEMPTIVE:
        w, _ = _l2_pass_preemptive(pr, zeros, vt.gamma, pol2=pol2)
        return w
    w, _ = _l2_pass_nonpreemptive(pr, zeros, vt.gamma, pol2=pol2)
    return w
