"""Command-line interface: solve instances, check gradients, train, evaluate.

Subcommands:
  solve      solve one game instance from its JSON file
  gradcheck  run an estimator-vs-oracle suite; nonzero exit on failure
  train      run a learning experiment from a JSON config; metrics to CSV
  eval       evaluate a saved model on a freshly generated dataset
  bench      wall-time table for the solvers
"""

from __future__ import annotations

import argparse
import json
import sys
import time

import numpy as np

from . import control as ctl
from . import harness
from . import interdiction as games
from .gradcheck_suites import MUTATIONS, SUITES


def _cmd_solve(args) -> int:
    with open(args.instance) as fh:
        payload = json.load(fh)
    inst = games.load_instance(payload)
    result = games.solve_instance(inst)
    text = json.dumps(result, indent=2)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text + "\n")
    else:
        print(text)
    return 0


def _cmd_gradcheck(args) -> int:
    report = harness.grad_check(args.suite, seed=args.seed, mutate=args.mutate)
    for line in report.lines():
        print(line)
    if report.passed:
        print(f"gradcheck suite '{args.suite}': all checks passed")
        return 0
    print(f"gradcheck suite '{args.suite}': FAILURES detected")
    return 1


def _load_config(path: str) -> dict:
    with open(path) as fh:
        return json.load(fh)


def _build_dataset(experiment: str, cfg: dict) -> harness.Dataset:
    if experiment == "grid":
        return harness.gen_grid_dataset(
            seed=int(cfg.get("seed", 0)),
            n_samples=int(cfg.get("n_train", 200)) + int(cfg.get("n_val", 100)),
            height=int(cfg.get("height", 8)),
            width=int(cfg.get("width", 8)),
            budget=int(cfg.get("budget", 3)),
            tile_types=int(cfg.get("tile_types", 5)),
            n_val=int(cfg.get("n_val", 100)),
            noise_std=float(cfg.get("noise_std", 0.05)),
        )
    if experiment == "tsp":
        return harness.gen_tsp_dataset(
            seed=int(cfg.get("seed", 0)),
            n_samples=int(cfg.get("n_train", 150)) + int(cfg.get("n_val", 75)),
            k_subset=int(cfg.get("k_subset", 8)),
            k_total=int(cfg.get("k_total", 100)),
            budget=int(cfg.get("budget", 1)),
            n_val=int(cfg.get("n_val", 75)),
        )
    raise ValueError(f"unknown experiment {experiment!r}")


def _cmd_train(args) -> int:
    cfg = _load_config(args.config)
    if args.experiment == "control":
        sys_ = ctl.make_default_system(
            seed=int(cfg.get("seed", 0)),
            state_dim=int(cfg.get("state_dim", 2)),
            horizon=int(cfg.get("horizon", 20)),
            noise_std=float(cfg.get("sigma_noise", 0.1)),
            adv_budget=float(cfg.get("sigma_adv", 0.2)),
        )
        ctrl = ctl.lqr_controller(sys_)
        seeds = cfg.get("seed_list", [0])
        mode = cfg.get("mode", "BILEVEL")
        rows = ["epoch,train_loss,train_exact,val_exact,solver_calls,wall_ms"]
        curves = []
        for seed in seeds:
            t0 = time.perf_counter()
            trained, curve = ctl.train_controller(
                sys_, ctrl, epochs=int(cfg.get("epochs", 10)),
                lr=float(cfg.get("lr", 0.1)), rng_seed=int(seed), mode=mode)
            curves.append(curve)
            final = ctl.evaluate_controller(sys_, trained, seeds=[int(seed) + 1000])
            print(f"seed {seed}: final adversarial cost {final:.6f} "
                  f"({time.perf_counter() - t0:.1f}s)")
        mean_curve = np.mean(np.array(curves), axis=0)
        for epoch, cost in enumerate(mean_curve):
            rows.append(f"{epoch},{cost:.10g},0,0,0,0")
        if args.metrics_out:
            with open(args.metrics_out, "w") as fh:
                fh.write("\n".join(rows) + "\n")
        return 0

    dataset = _build_dataset(args.experiment, cfg)
    estimator = cfg.get("estimator", "PT")
    predictor = harness.make_predictor(dataset, estimator)
    predictor, metrics = harness.train(
        dataset, predictor, estimator,
        epochs=int(cfg.get("epochs", 30)),
        lr=float(cfg.get("lr", 1e-2)),
        seed=int(cfg.get("train_seed", cfg.get("seed", 0))),
        tau=float(cfg.get("tau", harness.DEFAULT_TAU)),
    )
    final = metrics.final
    print(f"final: train_exact={final.train_exact:.4f} val_exact={final.val_exact:.4f}")
    if args.metrics_out:
        metrics.to_csv(args.metrics_out)
    if args.model_out:
        harness.save_model(predictor, args.model_out)
    return 0


def _cmd_eval(args) -> int:
    cfg = _load_config(args.config)
    dataset = _build_dataset(args.experiment, cfg)
    predictor = harness.load_model(args.model, dataset.game)
    out = harness.evaluate(dataset, predictor, split=args.split)
    print(json.dumps(out, indent=2))
    return 0


def _cmd_bench(args) -> int:
    rng = np.random.default_rng(args.seed)
    rows = []
    if args.suite in ("all", "grid"):
        for size in (4, 6, 8):
            z = rng.uniform(1, 10, (size, size))
            inst = games.GridInstance(size, size, games.MoveSet.DOWN_RIGHT,
                                      z, np.ones((size, size)), 3)
            t0 = time.perf_counter()
            games.minmax_solve_grid(inst)
            rows.append((f"grid {size}x{size} B=3", time.perf_counter() - t0))
    if args.suite in ("all", "tsp"):
        for k in (6, 8, 10):
            pts = rng.uniform(0, 1, (k, 2))
            z = np.linalg.norm(pts[:, None] - pts[None, :], axis=-1)
            w = np.full((k, k), 0.2)
            np.fill_diagonal(w, 0.0)
            inst = games.TspInstance(k, z, w, 1)
            t0 = time.perf_counter()
            games.minmax_solve_tsp(inst)
            rows.append((f"tsp k={k} B=1", time.perf_counter() - t0))
    if args.suite in ("all", "linops"):
        from . import linops

        for dim in (50, 200):
            mat = rng.standard_normal((dim, dim))
            spd = mat.T @ mat + dim * np.eye(dim)
            b = rng.standard_normal(dim)
            t0 = time.perf_counter()
            linops.cg_solve(linops.LinearOperator.from_matrix(spd), b, tol=1e-10)
            rows.append((f"cg dim={dim}", time.perf_counter() - t0))
    width = max(len(name) for name, _ in rows)
    print(f"{'case'.ljust(width)}  wall_s")
    for name, wall in rows:
        print(f"{name.ljust(width)}  {wall:.4f}")
    return 0


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="bigrad",
                                     description="bilevel optimization layers")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("solve", help="solve one game instance")
    p.add_argument("--instance", required=True)
    p.add_argument("--out")
    p.set_defaults(fn=_cmd_solve)

    p = sub.add_parser("gradcheck", help="estimator-vs-oracle checks")
    p.add_argument("--suite", choices=SUITES, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--mutate", choices=[m for m in MUTATIONS if m], default=None,
                   help="inject a deliberate fault (smoke test hook)")
    p.set_defaults(fn=_cmd_gradcheck)

    p = sub.add_parser("train", help="run a learning experiment")
    p.add_argument("--experiment", choices=("grid", "tsp", "control"), required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--metrics-out")
    p.add_argument("--model-out")
    p.set_defaults(fn=_cmd_train)

    p = sub.add_parser("eval", help="evaluate a saved model")
    p.add_argument("--experiment", choices=("grid", "tsp"), required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--split", default="val", choices=("train", "val"))
    p.set_defaults(fn=_cmd_eval)

    p = sub.add_parser("bench", help="solver wall-time table")
    p.add_argument("--suite", default="all", choices=("all", "grid", "tsp", "linops"))
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=_cmd_bench)

    args = parser.parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
