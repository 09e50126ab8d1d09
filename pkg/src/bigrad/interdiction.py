"""Exact forward solvers for the interdiction games and the top-B selection game.

Both games are min-max programs over a surcharge objective

    min_{y in Y} max_{x in X} <z + x * w, y>        (* elementwise)

where y ranges over grid paths or Hamiltonian tours and x over interdiction
vectors with ||x||_1 <= budget.  They are solved exactly by scenario
generation: a scenario-restricted master (a label-correcting DP carrying one
accumulated cost per scenario, pruned by Pareto dominance) alternates with
the adversary's greedy best response until the values match, which
certifies a saddle point.

Tie-breaking is deterministic everywhere so that brute-force enumeration
oracles can be compared solution-for-solution:
  - grid paths prefer DOWN, then RIGHT, then DIAG, applied from the target
    backwards (equivalently: lexicographically smallest reversed move-code
    sequence);
  - tours are lexicographically smallest city sequences starting at 0;
  - interdictions take the budget largest surcharge entries, ties toward the
    lowest index.
"""

from __future__ import annotations

import enum
import itertools
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import (
    BudgetExceedsDim,
    DimensionMismatch,
    LabelExplosion,
    NonBinaryInput,
    NonConvergence,
    TooLarge,
    TooManyCities,
)

Array = np.ndarray

#: Total label cap for the scenario-restricted masters.
LABEL_CAP = 1_000_000

#: Value-improvement threshold that ends scenario generation.
SADDLE_TOL = 1e-9


class MoveSet(enum.Enum):
    DOWN_RIGHT = "down_right"
    DOWN_RIGHT_DIAG = "down_right_diag"


# forward step offsets in preference order: DOWN, RIGHT, DIAG
_MOVE_OFFSETS = {
    MoveSet.DOWN_RIGHT: ((1, 0), (0, 1)),
    MoveSet.DOWN_RIGHT_DIAG: ((1, 0), (0, 1), (1, 1)),
}


def _check_costs(mat: Array, shape: tuple[int, int], name: str) -> Array:
    a = np.asarray(mat, dtype=np.float64)
    if a.shape != shape:
        raise DimensionMismatch(f"{name} has shape {a.shape}, expected {shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name} must be finite")
    if np.any(a < 0):
        raise ValueError(f"{name} must be nonnegative")
    return a


@dataclass(frozen=True)
class GridInstance:
    """Grid game data: per-cell traversal costs z and surcharges w."""

    height: int
    width: int
    moves: MoveSet
    z: Array
    w: Array
    budget: int

    def __post_init__(self):
        if self.height < 1 or self.width < 1:
            raise DimensionMismatch("grid must be at least 1x1")
        object.__setattr__(self, "z", _check_costs(self.z, (self.height, self.width), "z"))
        object.__setattr__(self, "w", _check_costs(self.w, (self.height, self.width), "w"))
        if not 0 <= self.budget <= self.height * self.width:
            raise BudgetExceedsDim(
                f"budget {self.budget} outside 0..{self.height * self.width}"
            )

    @property
    def cells(self) -> int:
        return self.height * self.width


@dataclass(frozen=True)
class TspInstance:
    """Tour game data: city-to-city costs z and surcharges w (zero diagonals)."""

    k: int
    z: Array
    w: Array
    budget: int

    def __post_init__(self):
        if self.k < 3:
            raise DimensionMismatch("tour instances need k >= 3")
        object.__setattr__(self, "z", _check_costs(self.z, (self.k, self.k), "z"))
        object.__setattr__(self, "w", _check_costs(self.w, (self.k, self.k), "w"))
        if np.any(np.diag(self.z) != 0.0):
            raise ValueError("z must have a zero diagonal")
        if not 0 <= self.budget <= self.k * self.k:
            raise BudgetExceedsDim(f"budget {self.budget} outside 0..{self.k * self.k}")


@dataclass(frozen=True)
class RobustSolution:
    """Certified saddle pair: value = <z + x * w, y> for the returned (x, y)."""

    y: Array
    x: Array
    value: float
    scenarios_generated: int


# ---------------------------------------------------------------------------
# grid shortest path


def grid_sp_dp(costs: Array, moves: MoveSet) -> tuple[Array, float]:
    """Minimum-cost top-left to bottom-right path over the grid DAG.

    Returns (flat indicator over cells, cost).  Ties prefer arriving DOWN,
    then RIGHT, then DIAG, resolved from the target backwards.
    """
    c = np.asarray(costs, dtype=np.float64)
    if c.ndim != 2:
        raise DimensionMismatch("costs must be 2-D")
    h, w = c.shape
    offsets = _MOVE_OFFSETS[MoveSet(moves)]
    dp = np.full((h, w), np.inf)
    parent = np.full((h, w), -1, dtype=np.int64)
    dp[0, 0] = c[0, 0]
    for i in range(h):
        for j in range(w):
            if i == 0 and j == 0:
                continue
            best = np.inf
            best_code = -1
            for code, (di, dj) in enumerate(offsets):
                pi, pj = i - di, j - dj
                if pi < 0 or pj < 0:
                    continue
                cand = dp[pi, pj]
                if cand < best:  # strict: ties keep the earlier (preferred) move
                    best = cand
                    best_code = code
            dp[i, j] = best + c[i, j]
            parent[i, j] = best_code
    path = np.zeros(h * w)
    i, j = h - 1, w - 1
    while True:
        path[i * w + j] = 1.0
        if i == 0 and j == 0:
            break
        di, dj = offsets[parent[i, j]]
        i, j = i - di, j - dj
    return path, float(dp[h - 1, w - 1])


def _path_cells_to_moves(cells: Sequence[tuple[int, int]], moves: MoveSet) -> tuple[int, ...]:
    offsets = _MOVE_OFFSETS[MoveSet(moves)]
    codes = []
    for (i0, j0), (i1, j1) in zip(cells, cells[1:]):
        codes.append(offsets.index((i1 - i0, j1 - j0)))
    return tuple(codes)


def path_preference_key(cells: Sequence[tuple[int, int]], moves: MoveSet) -> tuple[int, ...]:
    """Canonical tie-break key: reversed move codes, smaller is preferred."""
    return tuple(reversed(_path_cells_to_moves(cells, moves)))


def enumerate_grid_paths(height: int, width: int, moves: MoveSet) -> list[tuple[Array, tuple]]:
    """All source-to-target paths as (flat indicator, preference key), preference-sorted."""
    offsets = _MOVE_OFFSETS[MoveSet(moves)]
    out: list[tuple[Array, tuple]] = []
    stack = [(0, 0)]

    def dfs():
        i, j = stack[-1]
        if (i, j) == (height - 1, width - 1):
            ind = np.zeros(height * width)
            for (a, b) in stack:
                ind[a * width + b] = 1.0
            out.append((ind, path_preference_key(list(stack), moves)))
            return
        for di, dj in offsets:
            ni, nj = i + di, j + dj
            if ni < height and nj < width:
                stack.append((ni, nj))
                dfs()
                stack.pop()

    dfs()
    out.sort(key=lambda t: t[1])
    return out


# ---------------------------------------------------------------------------
# adversary


def worst_interdiction(y: Array, w: Array, budget: int) -> Array:
    """Best interdiction response to a fixed plan y.

    Surcharges are nonnegative, so interdicting the budget largest entries of
    w * y is optimal; ties go to the lowest index.
    """
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    w = np.asarray(w, dtype=np.float64).reshape(-1)
    if y.shape != w.shape:
        raise DimensionMismatch(f"y length {y.size} vs w length {w.size}")
    if not np.all((y == 0.0) | (y == 1.0)):
        raise NonBinaryInput("plan indicator must be 0/1-valued")
    if budget < 0:
        raise BudgetExceedsDim("budget must be >= 0")
    x = np.zeros_like(w)
    if budget == 0:
        return x
    order = np.argsort(-(w * y), kind="stable")
    x[order[: min(budget, y.size)]] = 1.0
    return x


def budget_interdictions(dim: int, budget: int) -> Iterable[Array]:
    """All interdictions with at most ``budget`` ones.

    Yields sizes from the budget downward, each size in lexicographic index
    order, so the first maximizer found by a scan equals the greedy
    worst_interdiction choice.
    """
    for size in range(min(budget, dim), -1, -1):
        for combo in itertools.combinations(range(dim), size):
            x = np.zeros(dim)
            x[list(combo)] = 1.0
            yield x


# ---------------------------------------------------------------------------
# scenario-restricted grid master


def _pareto_keep(cand: Array) -> Array:
    """Stable weak-dominance filter; returns indices kept, original order.

    Row a dominates row b when cand[a] <= cand[b] componentwise and either
    they differ somewhere or a comes first (duplicate collapse).
    """
    k = cand.shape[0]
    if k <= 1:
        return np.arange(k)
    le = np.all(cand[:, None, :] <= cand[None, :, :], axis=-1)
    eq = le & le.T
    strict = le & ~eq
    earlier = np.tri(k, k, -1, dtype=bool).T  # [a, b] true when a < b
    dominated = (strict | (eq & earlier)).any(axis=0)
    return np.nonzero(~dominated)[0]


def robust_master(instance: GridInstance, scenarios: Sequence[Array],
                  label_cap: int = LABEL_CAP) -> tuple[Array, float]:
    """Path minimizing the max cost over the given interdiction scenarios.

    Label-setting DP over the grid DAG; each label carries the accumulated
    per-scenario cost vector and labels are pruned by Pareto dominance,
    which is exact for the minimax objective.  Raises LabelExplosion past
    ``label_cap`` total labels.
    """
    if len(scenarios) == 0:
        raise ValueError("scenario list must be nonempty")
    h, w = instance.height, instance.width
    z_flat = instance.z.reshape(-1)
    w_flat = instance.w.reshape(-1)
    scen = np.stack([z_flat + np.asarray(x, float).reshape(-1) * w_flat
                     for x in scenarios])  # (S, cells)
    offsets = _MOVE_OFFSETS[instance.moves]
    # labels[(i, j)] = (vecs (L, S), parents list of (pi, pj, label_idx))
    labels: dict[tuple[int, int], tuple[Array, list]] = {}
    total = 0
    for i in range(h):
        for j in range(w):
            cell_cost = scen[:, i * w + j]
            if i == 0 and j == 0:
                labels[(0, 0)] = (cell_cost[None, :].copy(), [None])
                total += 1
                continue
            cand_rows = []
            cand_parents = []
            for di, dj in offsets:
                pi, pj = i - di, j - dj
                if pi < 0 or pj < 0:
                    continue
                vecs, _ = labels[(pi, pj)]
                cand_rows.append(vecs + cell_cost)
                cand_parents.extend((pi, pj, idx) for idx in range(vecs.shape[0]))
            cand = np.concatenate(cand_rows, axis=0)
            keep = _pareto_keep(cand)
            labels[(i, j)] = (cand[keep], [cand_parents[idx] for idx in keep])
            total += len(keep)
            if total > label_cap:
                raise LabelExplosion(f"more than {label_cap} labels")
    vecs, parents = labels[(h - 1, w - 1)]
    maxima = vecs.max(axis=1)
    best = min(range(vecs.shape[0]), key=lambda idx: (maxima[idx], tuple(vecs[idx]), idx))
    path = np.zeros(h * w)
    node: tuple[int, int] | None = (h - 1, w - 1)
    idx = best
    while node is not None:
        path[node[0] * w + node[1]] = 1.0
        parent = labels[node][1][idx]
        if parent is None:
            node = None
        else:
            node, idx = (parent[0], parent[1]), parent[2]
    return path, float(maxima[best])


def minmax_solve_grid(instance: GridInstance, label_cap: int = LABEL_CAP) -> RobustSolution:
    """Scenario generation for the grid game, certified at termination.

    Starts from the zero scenario; repeatedly solves the restricted master,
    computes the adversary's best response, and stops once the response no
    longer improves on the master value (gap <= 1e-9).
    """
    w_flat = instance.w.reshape(-1)
    z_flat = instance.z.reshape(-1)
    scenarios: list[Array] = [np.zeros(instance.cells)]
    prev_master = -np.inf
    max_rounds = instance.cells * instance.cells + 16
    for _ in range(max_rounds):
        y, master_val = robust_master(instance, scenarios, label_cap=label_cap)
        if master_val < prev_master - SADDLE_TOL:
            raise NonConvergence("master value decreased across scenario rounds")
        prev_master = master_val
        x_br = worst_interdiction(y, w_flat, instance.budget)
        br_val = float((z_flat + x_br * w_flat) @ y)
        if br_val <= master_val + SADDLE_TOL:
            return RobustSolution(y=y, x=x_br, value=br_val,
                                  scenarios_generated=len(scenarios))
        scenarios.append(x_br)
    raise NonConvergence("scenario generation failed to certify a saddle point")


# ---------------------------------------------------------------------------
# tours


def held_karp(costs: Array) -> tuple[tuple[int, ...], float]:
    """Optimal Hamiltonian cycle from city 0 by bitmask dynamic programming.

    Returns (tour as a city sequence starting at 0, cost).  Ties break
    toward the lexicographically smallest tour sequence.
    """
    c = np.asarray(costs, dtype=np.float64)
    if c.ndim != 2 or c.shape[0] != c.shape[1]:
        raise DimensionMismatch("cost matrix must be square")
    if not np.all(np.isfinite(c)):
        raise ValueError("costs must be finite")
    k = c.shape[0]
    if k > 20:
        raise TooManyCities(f"k={k} exceeds the bitmask bound 20")
    if k < 2:
        raise DimensionMismatch("need at least 2 cities")
    full = (1 << k) - 1
    # tail[mask, j]: min cost from j through all cities outside mask, then to 0
    tail = np.full((1 << k, k), np.inf)
    tail[full, :] = c[:, 0]
    for mask in range(full - 1, 0, -1):
        if not mask & 1:
            continue
        rem = [j for j in range(k) if not mask >> j & 1]
        rem_tail = np.array([tail[mask | (1 << nxt), nxt] for nxt in rem])
        for j in range(k):
            if mask >> j & 1:
                tail[mask, j] = np.min(c[j, rem] + rem_tail)
    tour = [0]
    mask, j = 1, 0
    while mask != full:
        for nxt in range(k):
            if mask >> nxt & 1:
                continue
            if c[j, nxt] + tail[mask | (1 << nxt), nxt] == tail[mask, j]:
                tour.append(nxt)
                mask |= 1 << nxt
                j = nxt
                break
        else:
            raise NonConvergence("tour reconstruction failed")
    return tuple(tour), float(tail[1, 0])


def tour_indicator(tour: Sequence[int], k: int) -> Array:
    """Directed-edge indicator (flat k x k) of a city sequence starting at 0."""
    ind = np.zeros(k * k)
    for a, b in zip(tour, tour[1:]):
        ind[a * k + b] = 1.0
    ind[tour[-1] * k + tour[0]] = 1.0
    return ind


def enumerate_tours(k: int) -> list[tuple[Array, tuple[int, ...]]]:
    """All tours from city 0 as (edge indicator, sequence), lexicographic order."""
    out = []
    for perm in itertools.permutations(range(1, k)):
        tour = (0,) + perm
        out.append((tour_indicator(tour, k), tour))
    return out


def _tsp_master(instance: TspInstance, scenarios: Sequence[Array],
                label_cap: int) -> tuple[Array, float, tuple[int, ...]]:
    """Vector-label Held-Karp: per-scenario accumulated costs, Pareto-pruned.

    Labels live on (visited mask, last city); equal cost vectors keep the
    lexicographically smallest partial tour, and the closure picks the
    minimax tour.
    """
    k = instance.k
    s_count = len(scenarios)
    mats = [instance.z + np.asarray(x, float).reshape(instance.k, instance.k) * instance.w
            for x in scenarios]
    # edge_cost[a][b] = tuple of per-scenario costs
    edge = [[tuple(m[a, b] for m in mats) for b in range(k)] for a in range(k)]
    full = (1 << k) - 1
    # state -> list of (cost vector tuple, partial tour tuple)
    states: dict[tuple[int, int], list[tuple[tuple, tuple]]] = {(1, 0): [((0.0,) * s_count, (0,))]}
    total = 1

    def prune(cands: list[tuple[tuple, tuple]]) -> list[tuple[tuple, tuple]]:
        kept: list[tuple[tuple, tuple]] = []
        for vec, tour in sorted(cands, key=lambda t: (t[0], t[1])):
            dominated = False
            for kvec, _ in kept:
                if all(a <= b for a, b in zip(kvec, vec)):
                    dominated = True  # covers duplicates: earlier sort order wins
                    break
            if not dominated:
                kept.append((vec, tour))
        return kept

    for mask in range(1, full + 1):
        if not mask & 1:
            continue
        for last in range(k):
            if not mask >> last & 1 or (mask, last) not in states:
                continue
            labels = prune(states[(mask, last)])
            states[(mask, last)] = labels
            total += len(labels)
            if total > label_cap:
                raise LabelExplosion(f"more than {label_cap} labels")
            if mask == full:
                continue
            for nxt in range(k):
                if mask >> nxt & 1:
                    continue
                step = edge[last][nxt]
                nmask = mask | (1 << nxt)
                bucket = states.setdefault((nmask, nxt), [])
                for vec, tour in labels:
                    bucket.append((tuple(a + b for a, b in zip(vec, step)),
                                   tour + (nxt,)))

    finals: list[tuple[float, tuple[int, ...]]] = []
    for last in range(1, k):
        for vec, tour in states.get((full, last), []):
            closed = tuple(a + b for a, b in zip(vec, edge[last][0]))
            finals.append((max(closed), tour))
    if not finals:
        raise NonConvergence("no tour found")
    # group values within the saddle tolerance so that reversed tours, whose
    # sums differ only by rounding, tie-break lexicographically
    low = min(v for v, _ in finals)
    value, tour = min(((v, t) for v, t in finals if v <= low + SADDLE_TOL),
                      key=lambda item: item[1])
    return tour_indicator(tour, k), float(value), tour


def minmax_solve_tsp(instance: TspInstance, label_cap: int = LABEL_CAP) -> RobustSolution:
    """Scenario generation for the tour game; same loop as the grid."""
    if instance.k > 16:
        raise TooManyCities(f"k={instance.k} above the master bound 16")
    z_flat = instance.z.reshape(-1)
    w_flat = instance.w.reshape(-1)
    scenarios: list[Array] = [np.zeros(instance.k * instance.k)]
    prev_master = -np.inf
    max_rounds = instance.k ** 4 + 16
    for _ in range(max_rounds):
        y, master_val, _ = _tsp_master(instance, scenarios, label_cap)
        if master_val < prev_master - SADDLE_TOL:
            raise NonConvergence("master value decreased across scenario rounds")
        prev_master = master_val
        x_br = worst_interdiction(y, w_flat, instance.budget)
        br_val = float((z_flat + x_br * w_flat) @ y)
        if br_val <= master_val + SADDLE_TOL:
            return RobustSolution(y=y, x=x_br, value=br_val,
                                  scenarios_generated=len(scenarios))
        scenarios.append(x_br)
    raise NonConvergence("scenario generation failed to certify a saddle point")


# ---------------------------------------------------------------------------
# brute force oracle


def brute_force_minmax(enumerate_y: Callable[[], Iterable[Array]] | Iterable[Array],
                       enumerate_x: Callable[[], Iterable[Array]] | Iterable[Array],
                       z: Array, w: Array,
                       pair_cap: int = 10_000_000) -> RobustSolution:
    """Exact min over enumerated y of max over enumerated x of <z + x * w, y>.

    Enumeration order is the tie-break: the first y attaining the min and,
    for it, the first x attaining the max are returned, so oracles listed in
    the fast solvers' preference order reproduce their solutions exactly.
    """
    z = np.asarray(z, dtype=np.float64).reshape(-1)
    w = np.asarray(w, dtype=np.float64).reshape(-1)
    ys = list(enumerate_y() if callable(enumerate_y) else enumerate_y)
    xs = list(enumerate_x() if callable(enumerate_x) else enumerate_x)
    if len(ys) * len(xs) > pair_cap:
        raise TooLarge(f"{len(ys)} x {len(xs)} pairs exceed the cap")
    if not ys or not xs:
        raise ValueError("enumerations must be nonempty")
    xs_arr = np.stack([np.asarray(x, float).reshape(-1) for x in xs])
    worst: list[tuple[float, int]] = []
    for y in ys:
        yv = np.asarray(y, dtype=np.float64).reshape(-1)
        vals = (z + xs_arr * w) @ yv
        xi = int(np.argmax(vals))  # first maximizer in enumeration order
        worst.append((float(vals[xi]), xi))
    low = min(v for v, _ in worst)
    # first y within the saddle tolerance of the min: enumeration order is the
    # tie-break, and near-ties from float summation order collapse together
    yi = next(i for i, (v, _) in enumerate(worst) if v <= low + SADDLE_TOL)
    y_sel = np.asarray(ys[yi], dtype=np.float64).reshape(-1)
    x_sel = xs_arr[worst[yi][1]].copy()
    value = float((z + x_sel * w) @ y_sel)
    return RobustSolution(y=y_sel, x=x_sel, value=value, scenarios_generated=0)


# ---------------------------------------------------------------------------
# top-B selection game


def topb_game(z: Array, b: int, q: int, window: str = "to_b") -> tuple[Array, Array]:
    """Greedy solution of the top-B selection game with q obscured slots.

    Features are ranked by value (stable sort, descending; ties toward the
    lowest index).  The attacker x marks the top q ranks; the selection y
    marks ranks q+1..b ("to_b").  ``window="shifted"`` instead selects the
    next b ranks after the attack (ranks q+1..q+b), kept behind this flag as
    the alternative reading.
    """
    z = np.asarray(z, dtype=np.float64).reshape(-1)
    d = z.size
    if window not in ("to_b", "shifted"):
        raise ValueError(f"unknown window {window!r}")
    if not (0 <= q <= b <= d):
        raise BudgetExceedsDim(f"need 0 <= q <= b <= {d}, got q={q}, b={b}")
    order = np.argsort(-z, kind="stable")
    x = np.zeros(d)
    y = np.zeros(d)
    x[order[:q]] = 1.0
    if window == "to_b":
        y[order[q:b]] = 1.0
    else:
        y[order[q : min(q + b, d)]] = 1.0
    return x, y


# ---------------------------------------------------------------------------
# instance JSON interface


@dataclass(frozen=True)
class TopbInstance:
    z: Array
    budget: int
    q: int


def _require(obj: dict, field: str, game: str):
    if field not in obj:
        raise ValueError(f"{game} instance is missing field '{field}'")
    return obj[field]


def load_instance(obj: dict):
    """Parse the instance JSON schema into a typed instance.

    Matrices arrive as flat row-major arrays; schema violations raise
    ValueError naming the offending field.
    """
    game = _require(obj, "game", "any")
    if game == "grid":
        h = int(_require(obj, "height", game))
        w = int(_require(obj, "width", game))
        moves = MoveSet(_require(obj, "moves", game)) if "moves" in obj else MoveSet.DOWN_RIGHT
        z = np.asarray(_require(obj, "z", game), dtype=np.float64)
        ww = np.asarray(_require(obj, "w", game), dtype=np.float64)
        try:
            return GridInstance(h, w, moves, z.reshape(h, w), ww.reshape(h, w),
                                int(_require(obj, "budget", game)))
        except ValueError as exc:
            raise ValueError(f"grid instance field invalid: {exc}") from exc
    if game == "tsp":
        k = int(_require(obj, "k", game))
        z = np.asarray(_require(obj, "z", game), dtype=np.float64)
        ww = np.asarray(_require(obj, "w", game), dtype=np.float64)
        try:
            return TspInstance(k, z.reshape(k, k), ww.reshape(k, k),
                               int(_require(obj, "budget", game)))
        except ValueError as exc:
            raise ValueError(f"tsp instance field invalid: {exc}") from exc
    if game == "topb":
        return TopbInstance(np.asarray(_require(obj, "z", game), dtype=np.float64),
                            int(_require(obj, "budget", game)),
                            int(_require(obj, "q", game)))
    raise ValueError(f"unknown game '{game}' (want grid, tsp, or topb)")


def solve_instance(inst) -> dict:
    """Solve a loaded instance, returning a JSON-ready result dict."""
    if isinstance(inst, GridInstance):
        sol = minmax_solve_grid(inst)
        return {"game": "grid", "x": sol.x.tolist(), "y": sol.y.tolist(),
                "value": sol.value, "scenarios": sol.scenarios_generated}
    if isinstance(inst, TspInstance):
        sol = minmax_solve_tsp(inst)
        return {"game": "tsp", "x": sol.x.tolist(), "y": sol.y.tolist(),
                "value": sol.value, "scenarios": sol.scenarios_generated}
    if isinstance(inst, TopbInstance):
        x, y = topb_game(inst.z, inst.budget, inst.q)
        return {"game": "topb", "x": x.tolist(), "y": y.tolist(),
                "value": float(inst.z @ y)}
    raise TypeError(f"cannot solve {type(inst).__name__}")
