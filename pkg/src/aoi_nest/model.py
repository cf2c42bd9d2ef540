"""Domain types and slot-transition kernels for the AoI offloading system.

A population of users keeps its information fresh by offloading compute tasks
(generate-at-will) to a bank of heterogeneous servers.  Each server m
completes a running task per slot with probability p_m, but never before the
user's minimum computing time tau_min has elapsed, so the service law is
tau_min + Geometric(p_m).  A user is either idle (layer 1, tracked by its age
delta) or computing (layer 2, tracked by (delta, gen_age): gen_age is the age
the user had when the running task was generated, so elapsed service time is
delta - gen_age).

Two scheduling structures are supported:
  * preemptive      — an in-flight task may be moved to another server or
                      abandoned at any slot; the generation age is preserved
                      across moves and the elapsed clock keeps counting.
  * non_preemptive  — offloading locks the (user, server) pair until the task
                      completes or the user drops it.

Completion during slot t posts the reset age elapsed + 1 at slot t + 1 (one
slot passes while the result returns); event logs additionally record the
age measured at the return instant itself, which is elapsed.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

PREEMPTIVE = "preemptive"
NON_PREEMPTIVE = "non_preemptive"

#: layer-2 action sentinel: abandon the in-flight task (unit age growth).
DROP = "drop"

SCHEMA_VERSION = 1


# ---------------------------------------------------------------------------
# types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ServerSpec:
    """One server: per-slot completion probability and activation cost."""

    id: int
    p: float
    nu: float = 0.0

    def __post_init__(self):
        if not (0.0 < self.p <= 1.0):
            raise ValueError(f"server {self.id}: p must be in (0, 1], got {self.p}")
        if self.nu < 0:
            raise ValueError(f"server {self.id}: nu must be >= 0, got {self.nu}")


@dataclass(frozen=True)
class UserSpec:
    """One user: identity and minimum computing time in slots."""

    id: int
    tau_min: int

    def __post_init__(self):
        if self.tau_min < 0:
            raise ValueError(f"user {self.id}: tau_min must be >= 0")


@dataclass(frozen=True)
class UserState:
    """Per-slot user state.

    layer "L1": idle, only `delta` is meaningful.
    layer "L2": computing; `gen_age` is the age at task generation and
    `server` the holding server id (meaningful for non-preemptive locking;
    tracked in preemptive mode too so the current assignment is visible).
    """

    layer: str
    delta: int
    gen_age: int | None = None
    server: int | None = None

    @property
    def elapsed(self) -> int:
        """Slots since offload (delta - gen_age); layer 2 only."""
        assert self.layer == "L2" and self.gen_age is not None
        return self.delta - self.gen_age

    def __post_init__(self):
        assert self.delta >= 1
        if self.layer == "L2":
            assert self.gen_age is not None and 1 <= self.gen_age < self.delta
        else:
            assert self.layer == "L1"


def l1(delta: int) -> UserState:
    return UserState("L1", delta)


def l2(delta: int, gen_age: int, server: int | None = None) -> UserState:
    return UserState("L2", delta, gen_age, server)


@dataclass
class SystemConfig:
    """Full experiment configuration.

    Servers are stored sorted ascending by p (ties by ascending nu, then id);
    the sorted order defines the ladder used by the index closed form and the
    nu_1..nu_M columns of the trace CSV.
    """

    users: list[UserSpec]
    servers: list[ServerSpec]
    mode: str = NON_PREEMPTIVE
    horizon: int = 10_000
    seed: int = 0
    beta: float = 0.05
    a_max: int = 300
    tail_window: int = 500

    def __post_init__(self):
        if self.mode not in (PREEMPTIVE, NON_PREEMPTIVE):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.horizon < 0:
            raise ValueError("horizon must be >= 0")
        if not (0.0 < self.beta < 1.0):
            raise ValueError(f"beta must be in (0, 1), got {self.beta}")
        max_tau = max((u.tau_min for u in self.users), default=0)
        if self.a_max <= max_tau + 10:
            raise ValueError(
                f"a_max={self.a_max} too small: need > max tau_min + 10 = {max_tau + 10}"
            )
        self.servers = sorted(self.servers, key=lambda s: (s.p, s.nu, s.id))
        ids = [s.id for s in self.servers]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate server ids")
        if len({u.id for u in self.users}) != len(self.users):
            raise ValueError("duplicate user ids")

    @property
    def n_users(self) -> int:
        return len(self.users)

    @property
    def n_servers(self) -> int:
        return len(self.servers)

    def server_by_id(self, sid: int) -> ServerSpec:
        for s in self.servers:
            if s.id == sid:
                return s
        raise KeyError(f"unknown server id {sid}")

    def user_types(self) -> dict[int, list[UserSpec]]:
        """Group users by tau_min (the solver-relevant type)."""
        groups: dict[int, list[UserSpec]] = {}
        for u in self.users:
            groups.setdefault(u.tau_min, []).append(u)
        return groups


#: An assignment maps user id -> server id (or None for idle/unmatched).
Assignment = dict


# ---------------------------------------------------------------------------
# transition kernels
# ---------------------------------------------------------------------------


def sample_completion(p: float, elapsed: int, tau_min: int, rng) -> bool:
    """One completion draw: forced failure within tau_min, Bernoulli(p) after.

    Draws from `rng` only when elapsed > tau_min, so common-random-number
    streams stay aligned across policies that idle for different lengths.
    """
    if not (0.0 < p <= 1.0):
        raise ValueError(f"completion probability must be in (0, 1], got {p}")
    assert elapsed >= 1
    if elapsed <= tau_min:
        return False
    return rng.random() < p


def _clip_age(delta: int, a_max: int | None) -> int:
    return delta if a_max is None else min(delta, a_max)


def _advance_l2(delta: int, gen_age: int, a_max: int | None) -> tuple[int, int]:
    """Next (delta, gen_age) for an uninterrupted in-service slot.

    With a saturating age cap the elapsed clock must keep counting, else a
    capped task whose elapsed time is still below tau_min could never finish;
    gen_age slides down (never below 1) so delta - gen_age keeps growing.
    """
    if a_max is not None and delta + 1 > a_max:
        return a_max, max(1, gen_age - 1)
    return delta + 1, gen_age


def step_preemptive(
    state: UserState,
    action: int | None,
    user: UserSpec,
    servers: dict[int, ServerSpec],
    rng,
    a_max: int | None = None,
) -> UserState:
    """Advance one user one slot under preemptive scheduling.

    action None: idle / abandon (unit age growth, back to layer 1).
    action m at layer 1: offload, generation age = current delta.
    action m at layer 2: keep computing on m (switching servers preserves
    gen_age and the elapsed clock; tau_min is not re-applied after a switch).
    """
    if action is None:
        return l1(_clip_age(state.delta + 1, a_max))
    if action not in servers:
        raise KeyError(f"unknown server id {action}")
    if state.layer == "L1":
        gen = min(state.delta, (a_max - 1) if a_max else state.delta)
        return l2(_clip_age(state.delta + 1, a_max), gen, action)
    # layer 2: service continues on `action` (may differ from state.server)
    if sample_completion(servers[action].p, state.elapsed, user.tau_min, rng):
        return l1(_clip_age(state.elapsed + 1, a_max))
    delta, gen = _advance_l2(state.delta, state.gen_age, a_max)
    return l2(delta, gen, action)


def step_non_preemptive(
    state: UserState,
    action,
    busy: dict[int, bool],
    user: UserSpec,
    servers: dict[int, ServerSpec],
    rng,
    a_max: int | None = None,
) -> UserState:
    """Advance one user one slot under non-preemptive scheduling.

    Layer-1 actions: None (wait) or a free server id (offload; sets busy).
    Layer-2 actions: the holder's own server id (continue) or DROP.
    Completion and DROP release the server effective next slot; `busy` is
    mutated in place accordingly.
    """
    if state.layer == "L1":
        if action is None:
            return l1(_clip_age(state.delta + 1, a_max))
        if action == DROP:
            raise ValueError("layer-1 users cannot drop")
        if action not in servers:
            raise KeyError(f"unknown server id {action}")
        if busy.get(action, False):
            raise ValueError(f"offload to busy server {action}")
        busy[action] = True
        gen = min(state.delta, (a_max - 1) if a_max else state.delta)
        return l2(_clip_age(state.delta + 1, a_max), gen, action)

    if action == DROP:
        busy[state.server] = False
        return l1(_clip_age(state.delta + 1, a_max))
    if action != state.server:
        raise ValueError(
            f"non-preemptive continue must stay on server {state.server}, got {action}"
        )
    if sample_completion(servers[action].p, state.elapsed, user.tau_min, rng):
        busy[state.server] = False
        return l1(_clip_age(state.elapsed + 1, a_max))
    delta, gen = _advance_l2(state.delta, state.gen_age, a_max)
    return l2(delta, gen, action)


def stage_cost(state: UserState, action, servers: dict[int, ServerSpec]) -> float:
    """Per-slot cost: current age plus the activation cost of the used server."""
    if action is None or action == DROP:
        return float(state.delta)
    return float(state.delta) + servers[action].nu


# ---------------------------------------------------------------------------
# RNG streams
# ---------------------------------------------------------------------------


def user_rng(seed: int, user_id: int) -> np.random.Generator:
    """Per-user completion stream (common random numbers across policies)."""
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(0, user_id)))


def policy_rng(seed: int) -> np.random.Generator:
    """Stream for policy-internal randomness (e.g. uniform collision keeps)."""
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(1, 0)))


# ---------------------------------------------------------------------------
# configuration I/O and scaling
# ---------------------------------------------------------------------------

_KNOWN_KEYS = {
    "schema_version",
    "mode",
    "horizon",
    "seed",
    "beta",
    "a_max",
    "tail_window",
    "users",
    "servers",
}

_DEFAULTS = {
    "mode": NON_PREEMPTIVE,
    "horizon": 10_000,
    "seed": 0,
    "beta": 0.05,
    "a_max": 300,
    "tail_window": 500,
}


def config_from_dict(doc: dict) -> SystemConfig:
    """Validate a JSON document into a SystemConfig, applying defaults."""
    if not isinstance(doc, dict):
        raise ValueError("config root must be a JSON object")
    if doc.get("schema_version") != SCHEMA_VERSION:
        raise ValueError(
            f"schema_version must be {SCHEMA_VERSION}, got {doc.get('schema_version')!r}"
        )
    unknown = set(doc) - _KNOWN_KEYS
    if unknown:
        warnings.warn(f"ignoring unknown config fields: {sorted(unknown)}")

    vals = dict(_DEFAULTS)
    for k in _DEFAULTS:
        if k in doc:
            vals[k] = doc[k]

    if "servers" not in doc or not doc["servers"]:
        raise ValueError("config field 'servers' missing or empty")
    if "users" not in doc or not doc["users"]:
        raise ValueError("config field 'users' missing or empty")

    servers = []
    for i, s in enumerate(doc["servers"]):
        if "p" not in s:
            raise ValueError(f"servers[{i}]: missing field 'p'")
        servers.append(ServerSpec(id=s.get("id", i), p=s["p"], nu=s.get("nu", 0.0)))

    users = []
    next_id = 0
    for i, g in enumerate(doc["users"]):
        if "tau_min" not in g:
            raise ValueError(f"users[{i}]: missing field 'tau_min'")
        count = g.get("count", 1)
        if count < 1:
            raise ValueError(f"users[{i}]: count must be >= 1")
        for _ in range(count):
            users.append(UserSpec(id=next_id, tau_min=g["tau_min"]))
            next_id += 1

    return SystemConfig(users=users, servers=servers, **vals)


def load_config(path) -> SystemConfig:
    """Load and validate a JSON config file."""
    with open(path, "r", encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as e:
            raise ValueError(f"config {path}: not valid JSON ({e})") from None
    return config_from_dict(doc)


def scale_config(config: SystemConfig, r: int) -> SystemConfig:
    """Replicate users and servers r times, preserving group proportions.

    Replica users keep their tau_min and get fresh ids (and therefore fresh
    RNG streams); replica servers keep (p, nu).  The user/server ratio is
    unchanged, which is the scaling regime of the asymptotic experiments.
    """
    if r < 1:
        raise ValueError("r must be >= 1")
    if r == 1:
        return replace(config)
    users = []
    uid = 0
    for _ in range(r):
        for u in config.users:
            users.append(UserSpec(id=uid, tau_min=u.tau_min))
            uid += 1
    servers = []
    sid = 0
    for _ in range(r):
        for s in config.servers:
            servers.append(ServerSpec(id=sid, p=s.p, nu=s.nu))
            sid += 1
    return replace(config, users=users, servers=servers)
