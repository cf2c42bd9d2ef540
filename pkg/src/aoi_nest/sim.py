"""Slot-driven system simulator.

One run drives every user through the shared slot loop: observe states,
ask the selected policy for an assignment, audit its feasibility, advance
the transition kernels, record metrics, and (index policy only) fold the
slot's assignment duals into the smoothed class prices.  Runs are
deterministic given (config, policy, seed): per-user completion streams
are common random numbers keyed by user id, policy randomness has its own
stream, and all iteration orders are fixed.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field

import numpy as np

from .indices import IndexTable, build_index_table
from .mdp import ValueTable, solve_subproblem
from .model import (
    DROP,
    NON_PREEMPTIVE,
    Assignment,
    SystemConfig,
    UserState,
    l1,
    policy_rng,
    scale_config,
    stage_cost,
    step_non_preemptive,
    step_preemptive,
    user_rng,
)
from .policies import (
    POLICY_NAMES,
    ClassMenu,
    DualState,
    build_class_menu,
    check_assignment,
    decide_mamp,
    decide_marp,
    decide_nested,
    decide_relaxed,
    decide_rrp,
    update_dual,
)

# ring buffer of structured events; older entries are overwritten first
EVENT_CAP = 1_000_000
EVENT_KINDS = ("offload", "complete", "drop", "switch", "abandon")
_KIND_CODE = {name: i for i, name in enumerate(EVENT_KINDS)}
_EVENT_DTYPE = np.dtype(
    [
        ("t", np.int64),
        ("uid", np.int32),
        ("kind", np.int8),
        ("age_before", np.int32),
        ("age_after", np.int32),
        ("server", np.int32),
        ("reset_age", np.int32),
    ]
)


class EventLog:
    """Fixed-capacity ring of transition events (oldest overwritten)."""

    def __init__(self, cap: int = EVENT_CAP):
        self.cap = int(cap)
        self._buf = np.zeros(self.cap, dtype=_EVENT_DTYPE)
        self.total = 0

    def record(self, t, uid, kind, age_before, age_after, server, reset_age):
        self._buf[self.total % self.cap] = (
            t,
            uid,
            _KIND_CODE[kind],
            age_before,
            age_after,
            -1 if server is None else server,
            -1 if reset_age is None else reset_age,
        )
        self.total += 1

    @property
    def dropped(self) -> int:
        return max(0, self.total - self.cap)

    def as_array(self) -> np.ndarray:
        """Stored events in chronological order."""
        n = min(self.total, self.cap)
        if self.total <= self.cap:
            return self._buf[:n].copy()
        head = self.total % self.cap
        return np.concatenate([self._buf[head:], self._buf[:head]])

    def kind_name(self, code: int) -> str:
        return EVENT_KINDS[code]


@dataclass
class Metrics:
    """Everything one run produces.

    slot_avg_aoi[t] is the user-mean age observed at the start of slot t;
    avg_aoi_trace is its running mean from slot 0 (the headline trace) and
    windowed_aoi the trailing-window mean, since plots disagree on which
    convention they use.  nu_trace rows are the smoothed class prices after
    each slot (None for price-free policies).
    """

    policy: str
    mode: str
    n_users: int
    horizon: int
    seed: int
    slot_avg_aoi: np.ndarray
    avg_aoi_trace: np.ndarray
    windowed_aoi: np.ndarray
    slot_avg_cost: np.ndarray
    per_user_aoi: np.ndarray
    final_avg_aoi: float
    final_avg_cost: float
    tail_window: int
    nu_trace: np.ndarray | None
    events: EventLog
    completions: int
    offloads: int
    wallclock_s: float

    def recompute_running_average(self) -> np.ndarray:
        """Arithmetic mean of the recorded per-slot values (invariant check)."""
        if self.slot_avg_aoi.size == 0:
            return self.slot_avg_aoi.copy()
        return np.cumsum(self.slot_avg_aoi) / np.arange(
            1, self.slot_avg_aoi.size + 1
        )


@dataclass
class PolicyContext:
    """Prepared decision machinery for one run (consumed by it).

    For the index policy: per-type index tables at the current prices plus
    the solved subproblems that seeded them (warm starts for rebuilds) and
    the smoothed price state.  For proposal-driven policies (rrp and the
    relaxed regime): the solved per-type policies at the supplied prices.
    pinned_gamma freezes the tables at an externally chosen average cost
    (no rebuilds); update_prices=False freezes the price state entirely.

    Tables are refreshed when the smoothed prices have drifted more than
    rebuild_tol (relative) from the prices they were built at, checked
    every rebuild_every slots: the smoothing makes per-slot drift tiny, so
    a per-slot check would re-solve the subproblems during the entire
    opening transient for no behavioural gain.
    """

    policy: str
    menu: ClassMenu
    tables: dict[int, IndexTable] = field(default_factory=dict)
    solved: dict[int, ValueTable] = field(default_factory=dict)
    dual: DualState | None = None
    pinned_gamma: float | None = None
    update_prices: bool = True
    rebuild_tol: float = 0.05
    rebuild_every: int = 25
    nu_built: np.ndarray | None = None  # prices the tables were built at
    rebuilds: int = 0


def build_policy_context(
    config: SystemConfig,
    policy: str,
    nu=None,
    pinned_gamma: float | None = None,
    update_prices: bool = True,
    rebuild_tol: float = 0.05,
) -> PolicyContext:
    """Solve whatever the named policy needs at the given class prices.

    nu defaults to the configured server costs (grouped by class).  For
    rrp and relaxed-lb, pass the converged relaxed prices when reproducing
    the benchmark tables; the subproblems are solved here either way.
    """
    if policy not in POLICY_NAMES:
        raise ValueError(f"unknown policy {policy!r}; choose from {POLICY_NAMES}")
    menu = build_class_menu(config.servers)
    nu0 = menu.nu0.copy() if nu is None else np.asarray(nu, dtype=float).copy()
    if nu0.shape != menu.nu0.shape:
        raise ValueError(f"nu must have {menu.nu0.size} entries, got {nu0.size}")
    ctx = PolicyContext(
        policy=policy,
        menu=menu,
        pinned_gamma=pinned_gamma,
        update_prices=update_prices,
        rebuild_tol=rebuild_tol,
    )
    if policy in ("nested", "rrp", "relaxed-lb"):
        for tau in sorted(config.user_types()):
            sol = solve_subproblem(menu.p, nu0, tau, config.a_max, config.mode)
            ctx.solved[tau] = sol
            if policy == "nested":
                gamma = sol.gamma if pinned_gamma is None else pinned_gamma
                ctx.tables[tau] = build_index_table(
                    menu.p, nu0, gamma, config.a_max
                )
    if policy == "nested":
        ctx.dual = DualState(nu0.copy(), beta=config.beta)
        ctx.nu_built = nu0.copy()
    return ctx


def _rebuild_tables(ctx: PolicyContext, config: SystemConfig) -> None:
    """Re-solve each type at the current smoothed prices (warm-started)."""
    nu_t = ctx.dual.nu_t.copy()
    for tau, old in ctx.solved.items():
        sol = solve_subproblem(
            ctx.menu.p,
            nu_t,
            tau,
            config.a_max,
            config.mode,
            policy_init=(old.pol1, old.pol2),
        )
        ctx.solved[tau] = sol
        ctx.tables[tau] = build_index_table(ctx.menu.p, nu_t, sol.gamma, config.a_max)
    ctx.nu_built = nu_t
    ctx.rebuilds += 1


def _prices_moved(ctx: PolicyContext) -> bool:
    ref = np.maximum(np.abs(ctx.nu_built), 1e-9)
    return bool(np.any(np.abs(ctx.dual.nu_t - ctx.nu_built) / ref > ctx.rebuild_tol))


def run(
    config: SystemConfig,
    policy: str,
    T: int | None = None,
    seed: int | None = None,
    ctx: PolicyContext | None = None,
    initial_states: dict[int, UserState] | None = None,
    rng_overrides: dict | None = None,
    event_cap: int = EVENT_CAP,
) -> Metrics:
    """Simulate T slots of the system under one policy.

    Slot order: observe -> decide -> audit -> transition -> metrics ->
    price update (index policy only).  `ctx` may be supplied to reuse
    already-solved tables (it is mutated by price updates, so pass a fresh
    one per run); `rng_overrides` swaps individual users' completion
    streams (anything with .random()), which is how scripted traces are
    driven.
    """
    T = config.horizon if T is None else int(T)
    seed = config.seed if seed is None else int(seed)
    if T < 0:
        raise ValueError("T must be >= 0")
    if ctx is None:
        ctx = build_policy_context(config, policy)
    elif ctx.policy != policy:
        raise ValueError(f"context prepared for {ctx.policy!r}, not {policy!r}")
    t0 = time.perf_counter()

    users = config.users
    servers_by_id = {s.id: s for s in config.servers}
    states: dict[int, UserState] = {u.id: l1(1) for u in users}
    if initial_states:
        for uid, st in initial_states.items():
            if uid not in states:
                raise KeyError(f"unknown user id {uid}")
            states[uid] = st
    rngs = {u.id: user_rng(seed, u.id) for u in users}
    if rng_overrides:
        rngs.update(rng_overrides)
    prng = policy_rng(seed)

    relaxed = policy == "relaxed-lb"
    non_pre = config.mode == NON_PREEMPTIVE
    busy: dict[int, bool] = {}
    private_busy: dict[int, dict[int, bool]] = {u.id: {} for u in users}
    for uid, st in states.items():
        if st.layer == "L2" and non_pre:
            (private_busy[uid] if relaxed else busy)[st.server] = True

    n = len(users)
    slot_aoi = np.zeros(T)
    slot_cost = np.zeros(T)
    user_age_sum = {u.id: 0.0 for u in users}
    log = EventLog(event_cap)
    completions = offloads = 0

    for t in range(T):
        ages = np.array([states[u.id].delta for u in users], dtype=float)
        slot_aoi[t] = ages.mean() if n else 0.0

        if policy == "nested":
            decision = decide_nested(
                states, users, ctx.menu, ctx.tables, config.mode
            )
        elif policy == "mamp":
            decision = decide_mamp(states, users, config.servers, config.mode)
        elif policy == "marp":
            decision = decide_marp(states, users, config.servers, config.mode)
        elif policy == "rrp":
            decision = decide_rrp(
                states, users, ctx.menu, ctx.solved, prng, config.mode
            )
        else:
            decision = decide_relaxed(
                states, users, ctx.menu, ctx.solved, config.mode
            )
        assignment: Assignment = decision.assignment
        check_assignment(
            assignment, states, users, config.servers, config.mode,
            allow_shared=relaxed,
        )

        cost = 0.0
        for u in users:
            uid = u.id
            old = states[uid]
            act = assignment[uid]
            cost += stage_cost(old, act, servers_by_id)
            if non_pre:
                bd = private_busy[uid] if relaxed else busy
                new = step_non_preemptive(old, act, bd, u, servers_by_id,
                                          rngs[uid], config.a_max)
            else:
                new = step_preemptive(old, act, u, servers_by_id, rngs[uid],
                                      config.a_max)
            kind = _event_kind(old, act, new, non_pre)
            if kind is not None:
                reset = old.elapsed if kind == "complete" else None
                log.record(t, uid, kind, old.delta, new.delta,
                           act if act != DROP else old.server, reset)
                if kind == "complete":
                    completions += 1
                elif kind == "offload":
                    offloads += 1
            states[uid] = new
            user_age_sum[uid] += old.delta
        slot_cost[t] = cost / n if n else 0.0

        if non_pre and not relaxed:
            holders = {st.server for st in states.values() if st.layer == "L2"}
            marked = {sid for sid, b in busy.items() if b}
            assert marked == holders, (
                f"slot {t}: busy servers {sorted(marked)} != holders "
                f"{sorted(holders)}"
            )

        if policy == "nested" and ctx.update_prices:
            update_dual(ctx.dual, decision.class_prices)
            if ctx.pinned_gamma is None and _prices_moved(ctx):
                _rebuild_tables(ctx, config)

    wall = time.perf_counter() - t0
    tail = min(config.tail_window, T) if T else 0
    running = (
        np.cumsum(slot_aoi) / np.arange(1, T + 1) if T else np.zeros(0)
    )
    windowed = _trailing_mean(slot_aoi, tail) if T else np.zeros(0)
    nu_trace = (
        np.asarray(ctx.dual.nu_trace) if policy == "nested" else None
    )
    return Metrics(
        policy=policy,
        mode=config.mode,
        n_users=n,
        horizon=T,
        seed=seed,
        slot_avg_aoi=slot_aoi,
        avg_aoi_trace=running,
        windowed_aoi=windowed,
        slot_avg_cost=slot_cost,
        per_user_aoi=np.array([user_age_sum[u.id] / T if T else np.nan
                               for u in users]),
        final_avg_aoi=float(slot_aoi[-tail:].mean()) if tail else float("nan"),
        final_avg_cost=float(slot_cost[-tail:].mean()) if tail else float("nan"),
        tail_window=tail,
        nu_trace=nu_trace,
        events=log,
        completions=completions,
        offloads=offloads,
        wallclock_s=wall,
    )


def _event_kind(old: UserState, act, new: UserState, non_pre: bool):
    """Classify what happened to one user this slot (None = nothing to log)."""
    if old.layer == "L1":
        return "offload" if act is not None else None
    if act == DROP:
        return "drop"
    if act is None:
        return "abandon" if not non_pre else None
    if new.layer == "L1":
        return "complete"
    if not non_pre and act != old.server:
        return "switch"
    return None


def _trailing_mean(x: np.ndarray, window: int) -> np.ndarray:
    if window <= 1:
        return x.copy()
    c = np.concatenate([[0.0], np.cumsum(x)])
    out = np.empty_like(x)
    for i in range(x.size):
        lo = max(0, i + 1 - window)
        out[i] = (c[i + 1] - c[lo]) / (i + 1 - lo)
    return out


# ---------------------------------------------------------------------------
# scale sweeps
# ---------------------------------------------------------------------------


def sweep_scale(
    config: SystemConfig,
    r_list,
    policies,
    T: int | None = None,
    seeds=(0,),
    lower_bound: float | None = None,
    csv_path=None,
) -> list[dict]:
    """Run every (r, policy, seed) cell and tabulate normalized tail AoI.

    lower_bound is the per-user relaxed value used for the gap column; the
    per-user subproblem value is scale-free, so one number covers every r.
    When omitted it is computed from the relaxed dual ascent on the base
    config.
    """
    if lower_bound is None:
        from .fluid import solve_relaxed_dual

        lower_bound = solve_relaxed_dual(config).lower_bound / config.n_users
    rows = []
    for r in r_list:
        scaled = scale_config(config, r)
        for policy in policies:
            for seed in seeds:
                m = run(scaled, policy, T=T, seed=seed)
                gap = (
                    (m.final_avg_cost - lower_bound) / lower_bound
                    if lower_bound > 0
                    else float("nan")
                )
                rows.append(
                    {
                        "policy": policy,
                        "r": int(r),
                        "seed": int(seed),
                        "tail_avg_aoi": m.final_avg_aoi,
                        "tail_avg_cost": m.final_avg_cost,
                        "lower_bound": lower_bound,
                        "gap_vs_lb": gap,
                    }
                )
    if csv_path is not None:
        write_summary_csv(rows, csv_path)
    return rows


# ---------------------------------------------------------------------------
# CSV artifacts
# ---------------------------------------------------------------------------


def write_trace_csv(metrics: Metrics, config: SystemConfig, path) -> None:
    """Per-slot trace: t, policy, avg_aoi (running), nu_1..nu_M per server.

    Price-free policies emit the configured server costs in the nu columns.
    """
    menu = build_class_menu(config.servers)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(
            ["t", "policy", "avg_aoi"]
            + [f"nu_{i + 1}" for i in range(config.n_servers)]
        )
        static = [s.nu for s in config.servers]
        for t in range(metrics.horizon):
            if metrics.nu_trace is not None:
                nu_t = metrics.nu_trace[t + 1]
                per_server = [
                    float(nu_t[menu.class_of(s.id)]) for s in config.servers
                ]
            else:
                per_server = static
            w.writerow([t, metrics.policy, float(metrics.avg_aoi_trace[t])]
                       + per_server)


def write_summary_csv(rows: list[dict], path) -> None:
    """Sweep summary: policy, r, seed, tail_avg_aoi, gap_vs_lb (+ extras)."""
    cols = ["policy", "r", "seed", "tail_avg_aoi", "tail_avg_cost",
            "lower_bound", "gap_vs_lb"]
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(cols)
        for row in rows:
            w.writerow([row[c] for c in cols])
