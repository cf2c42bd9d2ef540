"""Exact maximum-weight bipartite assignment with dual prices.

The per-slot scheduling step assigns at most one user to each server so that
the summed index weight is maximal.  Both sides of the linear program matter
here: the primal matching drives the schedule, and the dual potentials price
each server's slot, which is what the smoothed cost update consumes.  The
solver is the classic O(rows * cols^2) shortest-augmenting-path method with
potentials, run on the negated weights with one always-free virtual column so
that leaving a row unmatched is itself a zero-weight option.

Weight conventions: entries <= 0 (and -inf) mark pairs that must never be
matched; they are dropped from the problem up front, which leaves the primal
value unchanged and keeps the duals feasible (nonnegative potentials already
dominate any non-positive weight).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "MatchResult",
    "DualCheck",
    "max_weight_assignment",
    "verify_duals",
]


@dataclass(frozen=True)
class MatchResult:
    """Optimal assignment plus the dual certificate.

    pairs maps row index -> column index for matched rows only.  weight is
    the summed weight over matched pairs.  row_potentials (one per row) and
    col_prices (one per column) are optimal duals of the assignment LP:
    nonnegative, dominating every admissible pair's weight, and tight on the
    matched pairs.
    """

    pairs: dict[int, int]
    weight: float
    row_potentials: np.ndarray
    col_prices: np.ndarray

    @property
    def n_matched(self) -> int:
        return len(self.pairs)


@dataclass
class DualCheck:
    """Outcome of a complementary-slackness audit of a MatchResult."""

    ok: bool
    max_violation: float
    failures: list[str] = field(default_factory=list)


def _admissible(weights: np.ndarray) -> np.ndarray:
    """Mask of pairs the matcher may use: finite and strictly positive."""
    with np.errstate(invalid="ignore"):
        return np.isfinite(weights) & (weights > 0.0)


def max_weight_assignment(weights) -> MatchResult:
    """Solve max sum(w[r,c] * y[r,c]) with each row and column used at most once.

    weights: 2-D array; -inf (or any value <= 0) excludes a pair.  NaN and
    +inf entries are rejected.  Returns the optimal matching together with
    dual potentials extracted from the augmenting-path run; ties are resolved
    deterministically by lowest column index.
    """
    w = np.asarray(weights, dtype=float)
    if w.ndim != 2:
        raise ValueError(f"weights must be 2-D, got shape {w.shape}")
    if np.isnan(w).any() or np.isposinf(w).any():
        raise ValueError("weights must not contain NaN or +inf")
    n_rows, n_cols = w.shape

    admissible = _admissible(w)
    rows = np.flatnonzero(admissible.any(axis=1))
    if rows.size == 0 or n_cols == 0:
        return MatchResult(
            {}, 0.0, np.zeros(n_rows), np.zeros(n_cols)
        )

    # Minimization form on the admissible submatrix.  Column layout:
    # 0 = virtual root of the alternating tree, 1..C = real columns,
    # C+1 = the always-free drop column (cost 0: row stays unmatched).
    cols = np.flatnonzero(admissible[rows].any(axis=0))
    cost = np.full((rows.size, cols.size + 2), np.inf)
    cost[:, 1:-1] = np.where(admissible[np.ix_(rows, cols)], -w[np.ix_(rows, cols)], np.inf)
    cost[:, -1] = 0.0
    n_c = cols.size + 2

    u = np.zeros(rows.size)
    v = np.zeros(n_c)
    col_row = np.full(n_c, -1)  # matched row per column; virtual+drop stay -1

    for r in range(rows.size):
        col_row[0] = r
        minv = np.full(n_c, np.inf)
        way = np.zeros(n_c, dtype=int)
        used = np.zeros(n_c, dtype=bool)
        used[0] = True
        j0 = 0
        while True:
            i0 = col_row[j0]
            slack = cost[i0] - u[i0] - v
            better = ~used & (slack < minv)
            minv[better] = slack[better]
            way[better] = j0
            open_slack = np.where(used, np.inf, minv)
            j1 = int(np.argmin(open_slack))
            delta = open_slack[j1]
            assert np.isfinite(delta), "drop column must keep the tree reachable"
            tree = used.nonzero()[0]
            u[col_row[tree]] += delta
            v[tree] -= delta
            minv[~used] -= delta
            j0 = j1
            if col_row[j0] == -1:
                break
            used[j0] = True
        while j0 != 0:
            j1 = way[j0]
            col_row[j0] = col_row[j1]
            j0 = j1
        col_row[-1] = -1  # drop column swallows a row but stays free
    col_row[0] = -1

    pairs: dict[int, int] = {}
    for j in range(1, n_c - 1):
        if col_row[j] >= 0:
            pairs[int(rows[col_row[j]])] = int(cols[j - 1])
    weight = float(sum(w[r, c] for r, c in pairs.items()))

    row_potentials = np.zeros(n_rows)
    row_potentials[rows] = np.maximum(0.0, -u) + 0.0
    col_prices = np.zeros(n_cols)
    col_prices[cols] = -v[1:-1] + 0.0  # normalize -0.0
    return MatchResult(pairs, weight, row_potentials, col_prices)


def verify_duals(weights, result: MatchResult, tol: float = 1e-9) -> DualCheck:
    """Audit a MatchResult against its own dual certificate.

    Checks primal feasibility (each row/column at most once, only admissible
    pairs), dual feasibility (nonnegative potentials dominating every
    admissible weight), complementary slackness (matched pairs tight, positive
    potentials only on matched rows/columns), and strong duality (summed
    potentials equal the matching weight).
    """
    w = np.asarray(weights, dtype=float)
    admissible = _admissible(w)
    u, v = result.row_potentials, result.col_prices
    failures: list[str] = []
    worst = 0.0

    def flag(violation: float, text: str) -> None:
        nonlocal worst
        if violation > tol:
            failures.append(f"{text} (by {violation:.3g})")
        worst = max(worst, violation)

    cols_seen: set[int] = set()
    for r, c in result.pairs.items():
        if not admissible[r, c]:
            failures.append(f"pair ({r},{c}) is not admissible")
        if c in cols_seen:
            failures.append(f"column {c} matched twice")
        cols_seen.add(c)
        flag(abs(u[r] + v[c] - w[r, c]), f"matched pair ({r},{c}) not tight")

    flag(float(-min(u.min(initial=0.0), 0.0)), "negative row potential")
    flag(float(-min(v.min(initial=0.0), 0.0)), "negative column price")

    slack = u[:, None] + v[None, :] - np.where(admissible, w, -np.inf)
    flag(float(-min(slack.min(initial=0.0), 0.0)), "dual infeasible pair")

    for r in np.flatnonzero(u > tol):
        if int(r) not in result.pairs:
            failures.append(f"row {r} has positive potential but is unmatched")
    for c in np.flatnonzero(v > tol):
        if int(c) not in cols_seen:
            failures.append(f"column {c} has positive price but is unmatched")

    flag(abs(float(u.sum() + v.sum()) - result.weight), "strong duality gap")
    return DualCheck(ok=not failures, max_violation=worst, failures=failures)
