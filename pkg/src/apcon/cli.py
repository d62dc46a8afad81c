"""Command-line entry point: ``apcon <command> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np


def _cmd_data_gen(args) -> int:
    from apcon import data
    ds = data.make_dataset(args.problem, m=args.m, l=args.l, seed=args.seed)
    data.save(ds, args.out)
    if args.csv:
        data.export_csv(ds, args.csv, which="test")
    print(f"wrote {args.out}: {len(ds.train)} train / {len(ds.test)} test samples")
    return 0


def _load_config(args):
    from apcon.evaluate import ExperimentConfig
    cfg = ExperimentConfig.from_yaml(args.config)
    changes = {}
    if getattr(args, "trials", None) is not None:
        changes["trials"] = args.trials
    if getattr(args, "out_dir", None):
        changes["out_dir"] = args.out_dir
    if getattr(args, "results", None):
        changes["results_csv"] = args.results
    return cfg.replace(**changes) if changes else cfg


def _print_row(row) -> None:
    from apcon.evaluate import RESULT_FIELDS
    print(",".join(RESULT_FIELDS))
    print(",".join(str(getattr(row, k)) for k in RESULT_FIELDS))


def _cmd_train(args) -> int:
    from apcon.evaluate import run_experiment
    cfg = _load_config(args)
    row = run_experiment(cfg)
    _print_row(row)
    print(f"artifacts in {cfg.out_dir}")
    return 0 if row.status != "failed" else 1


def _cmd_eval(args) -> int:
    from apcon import data, plotting
    from apcon.evaluate import load_trained, obtain_reference, write_density_grids
    from apcon.physics import make_density_fn
    from apcon.train import predict_density, relative_l2_batch

    model, params, cfg = load_trained(args.checkpoint)
    ds = data.load(args.dataset)
    if ds.problem_id != cfg.problem:
        print(f"dataset is for problem {ds.problem_id}, checkpoint for {cfg.problem}", file=sys.stderr)
        return 2
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ref = obtain_reference(cfg, ds, out)
    t_eval, x_eval = cfg.eval_grid()
    pred = predict_density(make_density_fn(model, t_eval, x_eval), params.values, ds.test)
    errs = relative_l2_batch(pred, ref)
    samples = list(range(min(args.n_plot, len(ds.test))))
    write_density_grids(out / "density_grids.csv", pred, ref, t_eval, x_eval, samples)
    np.savetxt(out / "per_sample_rel_l2.csv", errs, delimiter=",", header="rel_l2", comments="")
    plotting.density_figures(out, pred, ref, t_eval, x_eval, samples, title=cfg.model)
    print(f"method,rel_l2,n_test\n{cfg.model},{float(np.mean(errs))!r},{len(errs)}")
    return 0


def _cmd_ablate(args) -> int:
    from apcon import plotting
    from apcon.evaluate import run_ablation
    cfg = _load_config(args)
    rows = run_ablation(args.kind, cfg, args.csv)
    root = Path(cfg.out_dir) / f"ablation_{args.kind}"
    plotting.ablation_figure(root / "comparison.png", rows, title=args.kind)
    print("setting,method,rel_l2,param_count,status")
    for r in rows:
        print(f"{r.setting},{r.method},{r.rel_l2},{r.param_count},{r.status}")
    return 0 if all(r.status != "failed" for r in rows) else 1


def _cmd_bench(args) -> int:
    from apcon import data
    from apcon.evaluate import load_trained, time_inference, time_reference
    model, params, cfg = load_trained(args.checkpoint)
    if args.dataset:
        ds = data.load(args.dataset)
        inputs = ds.test
        xg, vg = ds.x_grid, ds.v_grid
    else:
        samples = data.generate_samples(cfg.problem, max(1, min(args.reps, 8)), seed=cfg.data_seed + 1)
        inputs = np.stack([s.values for s in samples])
        xg, vg = samples[0].x_grid, samples[0].v_grid
    t_eval, x_eval = cfg.eval_grid()
    model_stats = time_inference(model, params.values, inputs, t_eval, x_eval, args.reps)
    ref_stats = time_reference(cfg.problem_spec(), inputs, xg, vg, t_eval, x_eval, args.reps,
                               cfg.ref_nx, cfg.n_velocities)
    speedup = (ref_stats["mean_ms"] / model_stats["mean_ms"]) if model_stats["n"] and ref_stats["n"] else None
    print("what,n,mean_ms,std_ms")
    for name, st in (("model", model_stats), ("reference", ref_stats)):
        print(f"{name},{st['n']},{st['mean_ms']},{st['std_ms']}")
    print(f"speedup,{speedup}")
    return 0


def _cmd_reference(args) -> int:
    from apcon import data, plotting
    from apcon.physics import make_problem
    from apcon.quadrature import gauss_legendre
    from apcon.refsolve import kinetic_grid, solve_transport_ap

    problem = make_problem(args.problem, args.eps, args.t_max)
    sample = data.generate_samples(args.problem, 1, seed=args.seed)[0]
    grid = kinetic_grid(problem, nx=args.nx, quad=gauss_legendre(args.n_velocities))
    field = solve_transport_ap(problem, sample.values, sample.x_grid, sample.v_grid, grid,
                               record_every=max(1, grid.nt // 500))
    t_eval = np.linspace(0.0, problem.t_max, args.nt_eval)
    x_eval = np.linspace(*problem.x_range, args.nx_eval)
    coarse = field.at(t_eval, x_eval)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    field.save(out / "reference.bin")
    coarse.to_csv(out / "reference.csv")
    plotting.density_figures(out, coarse.rho[None], coarse.rho[None], t_eval, x_eval, [0],
                             title=f"reference, problem {args.problem}, eps={args.eps:g}")
    print(json.dumps({k: v for k, v in field.meta.items()}, default=str))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="apcon", description="Operator networks for the multiscale linear transport equation.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    d = sub.add_parser("data", help="dataset utilities")
    dsub = d.add_subparsers(dest="data_command", required=True)
    g = dsub.add_parser("gen", help="generate and split random initial functions")
    g.add_argument("--problem", choices=["I", "II"], required=True)
    g.add_argument("--m", type=int, default=1024)
    g.add_argument("--l", type=float, default=0.5, help="GRF length scale")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.add_argument("--csv", help="also export the test split as CSV")
    g.set_defaults(func=_cmd_data_gen)

    t = sub.add_parser("train", help="run one experiment from a YAML config")
    t.add_argument("--config", required=True)
    t.add_argument("--trials", type=int)
    t.add_argument("--out-dir")
    t.add_argument("--results", help="results CSV to append to")
    t.set_defaults(func=_cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint against the reference solver")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--dataset", required=True)
    e.add_argument("--out", default="eval_out")
    e.add_argument("--n-plot", type=int, default=3)
    e.set_defaults(func=_cmd_eval)

    a = sub.add_parser("ablate", help="run one ablation grid")
    a.add_argument("--kind", choices=["layernorm", "pool_order", "kernel_shape", "channels", "filter_layers"],
                   required=True)
    a.add_argument("--config", required=True)
    a.add_argument("--out-dir")
    a.add_argument("--csv", help="comparison CSV path")
    a.set_defaults(func=_cmd_ablate)

    b = sub.add_parser("bench", help="time model inference against the reference solver")
    b.add_argument("--checkpoint", required=True)
    b.add_argument("--reps", type=int, default=10)
    b.add_argument("--dataset")
    b.set_defaults(func=_cmd_bench)

    r = sub.add_parser("reference", help="reference density for one random initial function")
    r.add_argument("--problem", choices=["I", "II"], required=True)
    r.add_argument("--eps", type=float, required=True)
    r.add_argument("--t-max", type=float)
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--nx", type=int, default=200)
    r.add_argument("--n-velocities", type=int, default=32)
    r.add_argument("--nt-eval", type=int, default=50)
    r.add_argument("--nx-eval", type=int, default=32)
    r.add_argument("--out", default="reference_out")
    r.set_defaults(func=_cmd_reference)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
