"""Synthetic interdiction-learning experiments: data, training, metrics.

Reproduces the experiment structure of the combinatorial games at desk
scale: a generator hides ground-truth costs behind features, labels come
from the exact min-max solvers, and a linear predictor is trained through
the game layer with one of the gradient estimators

    BB         per-level black-box differences (frozen other level)
    BB_MERGED  one extra full game solve under the stacked perturbation
    PT         straight-through surrogate, no extra solves
    BB_1/PT_1  single-level ablations (interdiction frozen at zero in training)
    SL         structure-blind regression straight onto the solution indicators

Exact-match accuracy counts a sample only when both the plan y and the
interdiction x match the labels elementwise.
"""

from __future__ import annotations

import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .discrete import hamming_loss
from .errors import DivergedTraining, NoSamples, SolverFailure, TooLarge
from . import interdiction as games
from .interdiction import GridInstance, MoveSet, TspInstance

Array = np.ndarray

ESTIMATORS = ("BB", "BB_MERGED", "PT", "BB_1", "PT_1", "SL")

DEFAULT_TAU = 0.5


def worker_count() -> int:
    """Worker cap from BIGRAD_THREADS (default: all cores)."""
    env = os.environ.get("BIGRAD_THREADS", "").strip()
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            pass
    return os.cpu_count() or 1


# ---------------------------------------------------------------------------
# data model


@dataclass(frozen=True)
class GameSpec:
    """Which game a dataset plays, plus its fixed topology."""

    kind: str  # "grid" | "tsp"
    budget: int
    height: int = 0
    width: int = 0
    moves: MoveSet = MoveSet.DOWN_RIGHT
    k_subset: int = 0
    k_total: int = 0
    w_fixed: Array | None = None  # grid surcharges are constant, not learned

    @property
    def solution_dim(self) -> int:
        if self.kind == "grid":
            return self.height * self.width
        return self.k_subset * self.k_subset


@dataclass(frozen=True)
class Sample:
    features: Array
    true_z: Array
    true_w: Array
    label_x: Array
    label_y: Array


@dataclass
class Dataset:
    game: GameSpec
    samples: list[Sample]
    train_idx: list[int]
    val_idx: list[int]

    def split(self, name: str) -> list[Sample]:
        idx = {"train": self.train_idx, "val": self.val_idx}[name]
        return [self.samples[i] for i in idx]


class _GridGame:
    def __init__(self, spec: GameSpec):
        self.spec = spec

    def solve(self, z: Array, w: Array):
        inst = GridInstance(self.spec.height, self.spec.width, self.spec.moves,
                            z.reshape(self.spec.height, self.spec.width),
                            w.reshape(self.spec.height, self.spec.width),
                            self.spec.budget)
        sol = games.minmax_solve_grid(inst)
        return sol.x, sol.y

    def plan_solve(self, cost: Array) -> Array:
        path, _ = games.grid_sp_dp(
            cost.reshape(self.spec.height, self.spec.width), self.spec.moves)
        return path

    def worst_x(self, y: Array, w: Array) -> Array:
        return games.worst_interdiction(y, w, self.spec.budget)


class _TspGame:
    def __init__(self, spec: GameSpec):
        self.spec = spec

    def solve(self, z: Array, w: Array):
        k = self.spec.k_subset
        inst = TspInstance(k, z.reshape(k, k), w.reshape(k, k), self.spec.budget)
        sol = games.minmax_solve_tsp(inst)
        return sol.x, sol.y

    def plan_solve(self, cost: Array) -> Array:
        k = self.spec.k_subset
        tour, _ = games.held_karp(cost.reshape(k, k))
        return games.tour_indicator(tour, k)

    def worst_x(self, y: Array, w: Array) -> Array:
        return games.worst_interdiction(y, w, self.spec.budget)


def _game_for(spec: GameSpec):
    return _GridGame(spec) if spec.kind == "grid" else _TspGame(spec)


# ---------------------------------------------------------------------------
# dataset generation


def gen_grid_dataset(seed: int, n_samples: int, height: int, width: int,
                     budget: int, tile_types: int, *, n_val: int = 0,
                     noise_std: float = 0.05,
                     moves: MoveSet = MoveSet.DOWN_RIGHT) -> Dataset:
    """Synthetic tile grids with exact interdiction labels.

    Every cell draws a tile type; a hidden embedding maps types to traversal
    costs; features are the flattened one-hot tile indicators plus additive
    Gaussian noise so that repeated tile maps stay distinguishable.
    Surcharges are constant one.  Label consistency (re-solving reproduces
    the stored labels) is asserted for every sample.
    """
    if tile_types < 2:
        raise ValueError("need at least two tile types")
    rng = np.random.default_rng(seed)
    embedding = rng.uniform(1.0, 10.0, size=tile_types)
    w_fixed = np.ones(height * width)
    spec = GameSpec(kind="grid", budget=budget, height=height, width=width,
                    moves=moves, w_fixed=w_fixed)
    game = _GridGame(spec)
    samples = []
    for _ in range(n_samples):
        tiles = rng.integers(0, tile_types, size=height * width)
        one_hot = np.zeros((height * width, tile_types))
        one_hot[np.arange(height * width), tiles] = 1.0
        features = one_hot.reshape(-1) + noise_std * rng.standard_normal(
            height * width * tile_types)
        true_z = embedding[tiles]
        label_x, label_y = game.solve(true_z, w_fixed)
        check_x, check_y = game.solve(true_z, w_fixed)
        if not (np.array_equal(label_x, check_x) and np.array_equal(label_y, check_y)):
            raise SolverFailure("label consistency violated at generation")
        samples.append(Sample(features, true_z, w_fixed.copy(), label_x, label_y))
    idx = list(range(n_samples))
    split_at = n_samples - n_val
    return Dataset(spec, samples, idx[:split_at], idx[split_at:])


def gen_tsp_dataset(seed: int, n_samples: int, k_subset: int, k_total: int,
                    budget: int, *, n_val: int = 0) -> Dataset:
    """City subsets drawn from a hidden map, labeled by the exact tour game.

    Ground truth: pairwise Euclidean distances between k_total hidden city
    coordinates plus a symmetric surcharge table.  Each sample draws a
    k_subset-subset; features are the selected city indices.
    """
    if not 3 <= k_subset <= k_total:
        raise ValueError("need 3 <= k_subset <= k_total")
    rng = np.random.default_rng(seed)
    coords = rng.uniform(0.0, 1.0, size=(k_total, 2))
    dists = np.linalg.norm(coords[:, None, :] - coords[None, :, :], axis=-1)
    raw = rng.uniform(0.2, 0.6, size=(k_total, k_total)) * float(np.mean(dists))
    w_table = 0.5 * (raw + raw.T)
    np.fill_diagonal(w_table, 0.0)
    spec = GameSpec(kind="tsp", budget=budget, k_subset=k_subset, k_total=k_total)
    game = _TspGame(spec)
    samples = []
    for _ in range(n_samples):
        subset = np.sort(rng.choice(k_total, size=k_subset, replace=False))
        true_z = dists[np.ix_(subset, subset)].reshape(-1)
        true_w = w_table[np.ix_(subset, subset)].reshape(-1)
        label_x, label_y = game.solve(true_z, true_w)
        check_x, check_y = game.solve(true_z, true_w)
        if not (np.array_equal(label_x, check_x) and np.array_equal(label_y, check_y)):
            raise SolverFailure("label consistency violated at generation")
        samples.append(Sample(subset.astype(np.float64), true_z, true_w,
                              label_x, label_y))
    idx = list(range(n_samples))
    split_at = n_samples - n_val
    return Dataset(spec, samples, idx[:split_at], idx[split_at:])


# ---------------------------------------------------------------------------
# predictors


COST_FLOOR = 1e-6


class LinearPredictor:
    """z = theta_z @ features, clamped to the solver's nonnegativity floor.

    Used for the grid game, where surcharges are fixed; theta_w is absent.
    """

    kind = "linear"

    def __init__(self, theta_z: Array, spec: GameSpec):
        self.theta_z = np.asarray(theta_z, dtype=np.float64)
        self.spec = spec

    @classmethod
    def init(cls, spec: GameSpec, feature_dim: int) -> "LinearPredictor":
        return cls(np.zeros((spec.solution_dim, feature_dim)), spec)

    def predict_costs(self, sample: Sample) -> tuple[Array, Array]:
        z = np.maximum(self.theta_z @ sample.features, COST_FLOOR)
        return z, self.spec.w_fixed

    def update(self, sample: Sample, d_z: Array, d_w: Array, lr: float) -> None:
        self.theta_z -= lr * np.outer(d_z, sample.features)

    def predict_solution(self, sample: Sample):
        z, w = self.predict_costs(sample)
        return _game_for(self.spec).solve(z, w)


class TablePredictor:
    """Global cost tables indexed by city identity; the tour-game model.

    Features are the drawn city subset; predictions select the subset block,
    and updates scatter the gradients back onto it.  theta_w can be frozen.
    """

    kind = "table"

    def __init__(self, theta_z: Array, theta_w: Array, spec: GameSpec,
                 freeze_w: bool = False):
        self.theta_z = np.asarray(theta_z, dtype=np.float64)
        self.theta_w = np.asarray(theta_w, dtype=np.float64)
        self.spec = spec
        self.freeze_w = freeze_w

    @classmethod
    def init(cls, spec: GameSpec, freeze_w: bool = False) -> "TablePredictor":
        k = spec.k_total
        return cls(np.full((k, k), 1.0), np.full((k, k), 0.3), spec, freeze_w)

    def predict_costs(self, sample: Sample) -> tuple[Array, Array]:
        subset = sample.features.astype(int)
        sel = np.ix_(subset, subset)
        z = np.maximum(self.theta_z[sel], COST_FLOOR)
        w = np.maximum(self.theta_w[sel], COST_FLOOR)
        np.fill_diagonal(z, 0.0)
        np.fill_diagonal(w, 0.0)
        return z.reshape(-1), w.reshape(-1)

    def update(self, sample: Sample, d_z: Array, d_w: Array, lr: float) -> None:
        subset = sample.features.astype(int)
        k = subset.size
        sel = np.ix_(subset, subset)
        self.theta_z[sel] -= lr * d_z.reshape(k, k)
        if not self.freeze_w:
            self.theta_w[sel] -= lr * d_w.reshape(k, k)

    def predict_solution(self, sample: Sample):
        z, w = self.predict_costs(sample)
        return _game_for(self.spec).solve(z, w)


class SolutionRegressor:
    """Structure-blind baseline: regress solution indicators directly.

    Scores for (x, y) are linear in the features (grid) or entries of global
    tables (tsp).  Decoding stays feasible: the plan comes from the plain
    solver on inverted scores, the interdiction from the top-budget scores.
    """

    kind = "solution"

    def __init__(self, theta_x: Array, theta_y: Array, spec: GameSpec):
        self.theta_x = np.asarray(theta_x, dtype=np.float64)
        self.theta_y = np.asarray(theta_y, dtype=np.float64)
        self.spec = spec

    @classmethod
    def init(cls, spec: GameSpec, feature_dim: int = 0) -> "SolutionRegressor":
        if spec.kind == "grid":
            shape = (spec.solution_dim, feature_dim)
        else:
            shape = (spec.k_total, spec.k_total)
        return cls(np.zeros(shape), np.zeros(shape), spec)

    def _scores(self, sample: Sample) -> tuple[Array, Array]:
        if self.spec.kind == "grid":
            return self.theta_x @ sample.features, self.theta_y @ sample.features
        subset = sample.features.astype(int)
        sel = np.ix_(subset, subset)
        return self.theta_x[sel].reshape(-1), self.theta_y[sel].reshape(-1)

    def regress_step(self, sample: Sample, lr: float) -> float:
        sx, sy = self._scores(sample)
        gx = sx - sample.label_x
        gy = sy - sample.label_y
        if self.spec.kind == "grid":
            self.theta_x -= lr * np.outer(gx, sample.features)
            self.theta_y -= lr * np.outer(gy, sample.features)
        else:
            subset = sample.features.astype(int)
            k = subset.size
            sel = np.ix_(subset, subset)
            self.theta_x[sel] -= lr * gx.reshape(k, k)
            self.theta_y[sel] -= lr * gy.reshape(k, k)
        return float(0.5 * gx @ gx + 0.5 * gy @ gy)

    def predict_solution(self, sample: Sample):
        sx, sy = self._scores(sample)
        game = _game_for(self.spec)
        cost = np.maximum(1.0 - sy, 0.0)
        if self.spec.kind == "tsp":
            cost = cost.reshape(self.spec.k_subset, self.spec.k_subset).copy()
            np.fill_diagonal(cost, 0.0)
            cost = cost.reshape(-1)
        y = game.plan_solve(cost)
        x = np.zeros_like(sx)
        if self.spec.budget > 0:
            order = np.argsort(-sx, kind="stable")
            x[order[: self.spec.budget]] = 1.0
        return x, y


# ---------------------------------------------------------------------------
# estimator backward passes (game-level)


def _estimator_step(game, spec: GameSpec, z: Array, w: Array, x_hat: Array,
                    y_hat: Array, g_int: Array, g_path: Array,
                    estimator: str, tau: float) -> tuple[Array, Array, int]:
    """(d_z, d_w, solver_calls) for one sample.

    The plan level is a minimization in the cost z (+ interdiction
    surcharge), the interdictor a maximization in w * y; the max level is
    mapped through its min form, which flips the perturbation and difference
    signs on the w side.
    """
    if estimator == "PT":
        d_z = -g_path
        d_w = y_hat * g_int - x_hat * g_path
        return d_z, d_w, 0
    if estimator == "BB_MERGED":
        z_p = z + tau * g_path
        w_p = np.maximum(w - tau * g_int, 0.0)
        x_p, y_p = game.solve(z_p, w_p)
        d_z = (y_p - y_hat) / tau
        d_w = -(x_p - x_hat) / tau
        return d_z, d_w, 1
    if estimator == "BB":
        base_cost = z + x_hat * w
        y_base = game.plan_solve(np.maximum(base_cost, 0.0))
        y_pert = game.plan_solve(np.maximum(base_cost + tau * g_path, 0.0))
        d_z = (y_pert - y_base) / tau
        x_pert = game.worst_x(y_hat, np.maximum(w - tau * g_int, 0.0))
        d_w = -(x_pert - x_hat) / tau
        return d_z, d_w, 2
    if estimator == "PT_1":
        return -g_path, np.zeros_like(w), 0
    if estimator == "BB_1":
        y_base = game.plan_solve(z)
        y_pert = game.plan_solve(np.maximum(z + tau * g_path, 0.0))
        return (y_pert - y_base) / tau, np.zeros_like(w), 2
    raise ValueError(f"unknown estimator {estimator!r}")


# ---------------------------------------------------------------------------
# metrics


@dataclass(frozen=True)
class MetricsRow:
    epoch: int
    train_loss: float
    train_exact: float
    val_exact: float
    solver_calls: int
    wall_ms: float


@dataclass
class Metrics:
    rows: list[MetricsRow] = field(default_factory=list)

    HEADER = "epoch,train_loss,train_exact,val_exact,solver_calls,wall_ms"

    def append(self, row: MetricsRow) -> None:
        if self.rows and row.epoch <= self.rows[-1].epoch:
            raise ValueError("epoch index must increase")
        self.rows.append(row)

    def to_csv(self, path: str) -> None:
        lines = [self.HEADER]
        for r in self.rows:
            lines.append(f"{r.epoch},{r.train_loss:.10g},{r.train_exact:.10g},"
                         f"{r.val_exact:.10g},{r.solver_calls},{r.wall_ms:.10g}")
        with open(path, "w") as fh:
            fh.write("\n".join(lines) + "\n")

    @property
    def final(self) -> MetricsRow:
        if not self.rows:
            raise NoSamples("no metrics recorded")
        return self.rows[-1]


# ---------------------------------------------------------------------------
# training and evaluation


def _pair_exact(pred, sample: Sample) -> bool:
    x, y = pred
    return np.array_equal(x, sample.label_x) and np.array_equal(y, sample.label_y)


def _pair_hamming(pred, sample: Sample) -> float:
    x, y = pred
    n = sample.label_x.size + sample.label_y.size
    agree = np.sum(x == sample.label_x) + np.sum(y == sample.label_y)
    return float(agree) / n


def evaluate(dataset: Dataset, predictor, split: str = "val") -> dict:
    """Exact-match and per-element accuracies of a predictor on a split."""
    samples = dataset.split(split)
    if not samples:
        raise NoSamples(f"split {split!r} is empty")
    with ThreadPoolExecutor(max_workers=worker_count()) as pool:
        preds = list(pool.map(predictor.predict_solution, samples))
    exact = float(np.mean([_pair_exact(p, s) for p, s in zip(preds, samples)]))
    hamming = float(np.mean([_pair_hamming(p, s) for p, s in zip(preds, samples)]))
    return {"exact": exact, "hamming": hamming, "n": len(samples)}


def train(dataset: Dataset, predictor, estimator: str, epochs: int, lr: float,
          seed: int, tau: float = DEFAULT_TAU) -> tuple[object, Metrics]:
    """Pure-SGD training of a predictor through the game layer.

    Forward: predict costs and solve the game (plain solver for the
    single-level ablations).  Backward: Hamming loss gradients on the
    solution pair, the chosen estimator's (d_z, d_w), chained through the
    predictor.  SL bypasses the solver and regresses indicators.
    """
    if estimator not in ESTIMATORS:
        raise ValueError(f"estimator must be one of {ESTIMATORS}")
    rng = np.random.default_rng(seed)
    spec = dataset.game
    game = _game_for(spec)
    metrics = Metrics()
    order = list(dataset.train_idx)
    initial_loss = None
    for epoch in range(epochs):
        t0 = time.perf_counter()
        rng.shuffle(order)
        losses = []
        exact = []
        calls = 0
        for idx in order:
            sample = dataset.samples[idx]
            if estimator == "SL":
                losses.append(predictor.regress_step(sample, lr))
                exact_pred = predictor.predict_solution(sample)
                exact_here = _pair_exact(exact_pred, sample)
                exact_flag = exact_here
            else:
                z, w = predictor.predict_costs(sample)
                if not (np.all(np.isfinite(z)) and np.all(np.isfinite(w))):
                    raise DivergedTraining("predicted costs are not finite")
                if estimator in ("BB_1", "PT_1"):
                    y_hat = game.plan_solve(z)
                    x_hat = np.zeros_like(w)
                    calls += 1
                else:
                    x_hat, y_hat = game.solve(z, w)
                    calls += 1
                loss_x, g_int = hamming_loss(x_hat, sample.label_x)
                loss_y, g_path = hamming_loss(y_hat, sample.label_y)
                losses.append(loss_x + loss_y)
                if lr > 0:
                    d_z, d_w, extra = _estimator_step(
                        game, spec, z, w, x_hat, y_hat, g_int, g_path,
                        estimator, tau)
                    calls += extra
                    predictor.update(sample, d_z, d_w, lr)
                exact_flag = (loss_x + loss_y) == 0
            exact.append(exact_flag)
        train_loss = float(np.mean(losses)) if losses else 0.0
        if initial_loss is None:
            initial_loss = max(train_loss, 1e-9)
        if train_loss > 1e3 * initial_loss:
            raise DivergedTraining(f"epoch {epoch} loss {train_loss:.3e}")
        val = evaluate(dataset, predictor, "val") if dataset.val_idx else {"exact": 0.0}
        calls += len(dataset.val_idx)
        metrics.append(MetricsRow(
            epoch=epoch,
            train_loss=train_loss,
            train_exact=float(np.mean(exact)) if exact else 0.0,
            val_exact=val["exact"],
            solver_calls=calls,
            wall_ms=(time.perf_counter() - t0) * 1e3,
        ))
    return predictor, metrics


# ---------------------------------------------------------------------------
# estimator cross-checks


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    detail: str


@dataclass
class CheckReport:
    suite: str
    results: list[CheckResult]

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.results)

    def lines(self) -> list[str]:
        out = []
        for r in self.results:
            out.append(f"[{'PASS' if r.passed else 'FAIL'}] {self.suite}:{r.name} {r.detail}")
        return out


def grad_check(suite: str, seed: int = 0, mutate: str | None = None) -> CheckReport:
    """Compare estimator outputs against their independent oracles.

    ``mutate`` injects a deliberate fault ("flip_bb_sign" negates the
    black-box perturbation) so the calling pipeline can verify the checks
    actually detect sign regressions.
    """
    from . import gradcheck_suites

    return gradcheck_suites.run(suite, seed=seed, mutate=mutate)


# ---------------------------------------------------------------------------
# model files


def save_model(predictor, path: str) -> None:
    import json

    payload = {"kind": predictor.kind}
    if predictor.kind == "linear":
        payload.update(theta_z=predictor.theta_z.reshape(-1).tolist(),
                       rows=predictor.theta_z.shape[0],
                       cols=predictor.theta_z.shape[1])
    elif predictor.kind == "table":
        payload.update(theta_z=predictor.theta_z.reshape(-1).tolist(),
                       theta_w=predictor.theta_w.reshape(-1).tolist(),
                       rows=predictor.theta_z.shape[0],
                       cols=predictor.theta_z.shape[1],
                       freeze_w=predictor.freeze_w)
    else:
        payload.update(theta_x=predictor.theta_x.reshape(-1).tolist(),
                       theta_y=predictor.theta_y.reshape(-1).tolist(),
                       rows=predictor.theta_x.shape[0],
                       cols=predictor.theta_x.shape[1])
    with open(path, "w") as fh:
        json.dump(payload, fh)


def load_model(path: str, spec: GameSpec):
    import json

    with open(path) as fh:
        payload = json.load(fh)
    kind = payload.get("kind")
    rows, cols = int(payload["rows"]), int(payload["cols"])
    if kind == "linear":
        theta = np.asarray(payload["theta_z"], dtype=np.float64).reshape(rows, cols)
        return LinearPredictor(theta, spec)
    if kind == "table":
        tz = np.asarray(payload["theta_z"], dtype=np.float64).reshape(rows, cols)
        tw = np.asarray(payload["theta_w"], dtype=np.float64).reshape(rows, cols)
        return TablePredictor(tz, tw, spec, bool(payload.get("freeze_w", False)))
    if kind == "solution":
        tx = np.asarray(payload["theta_x"], dtype=np.float64).reshape(rows, cols)
        ty = np.asarray(payload["theta_y"], dtype=np.float64).reshape(rows, cols)
        return SolutionRegressor(tx, ty, spec)
    raise ValueError(f"unknown model kind {kind!r}")


def make_predictor(dataset: Dataset, estimator: str):
    """Fresh predictor of the right family for a dataset/estimator pair."""
    spec = dataset.game
    feat_dim = dataset.samples[0].features.size if dataset.samples else 0
    if estimator == "SL":
        return SolutionRegressor.init(spec, feat_dim)
    if spec.kind == "grid":
        return LinearPredictor.init(spec, feat_dim)
    return TablePredictor.init(spec)
