"""Experiments: data, training, reference, error, timing and result files."""

from __future__ import annotations

import csv
import dataclasses
import fcntl
import logging
import math
import statistics
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from apcon import data as data_mod
from apcon.nets import param_count
from apcon.physics import VARIANTS, NetSpec, OperatorModel, ProblemSpec, build_model, make_density_fn, make_problem
from apcon.quadrature import gauss_legendre
from apcon.refsolve import DensityField, kinetic_grid, solve_transport_ap
from apcon.container import read_container, write_container
from apcon.train import (DivergenceError, TrainConfig, config_hash, fit, load_checkpoint, predict_density,
                         relative_l2_batch, save_checkpoint, AdamState)

log = logging.getLogger(__name__)

DIVERGED = "diverged"


class UndefinedMetricError(ZeroDivisionError):
    pass


class ConfigError(ValueError):
    pass


def relative_l2(rho_pred: DensityField, rho_ref: DensityField) -> float:
    """sqrt(sum |pred - ref|^2 / sum |ref|^2) over the shared grid."""
    if not (np.array_equal(rho_pred.t_grid, rho_ref.t_grid) and np.array_equal(rho_pred.x_grid, rho_ref.x_grid)):
        raise ValueError("fields live on different grids")
    den = float(np.sum(rho_ref.rho**2))
    if den == 0.0:
        raise UndefinedMetricError("reference density is identically zero")
    return math.sqrt(float(np.sum((rho_pred.rho - rho_ref.rho) ** 2)) / den)


# ---------------------------------------------------------------- config

@dataclass
class ExperimentConfig:
    problem: str = "I"
    eps: float = 1.0
    model: str = "APCON_V2"
    net: dict = field(default_factory=dict)          # NetSpec overrides
    train: TrainConfig = field(default_factory=TrainConfig)
    m: int = 1024
    l: float = 0.5
    data_seed: int = 0
    dataset: str | None = None
    t_max: float | None = None
    nt_eval: int = 50
    nx_eval: int = 32
    ref_nx: int = 200
    n_velocities: int = 32
    trials: int = 1
    diverge_threshold: float = 0.5
    out_dir: str = "runs/experiment"
    results_csv: str | None = None
    n_plot: int = 3
    figures: bool = True
    name: str = ""

    def __post_init__(self):
        if isinstance(self.train, dict):
            self.train = TrainConfig(**self.train)
        if self.problem not in ("I", "II"):
            raise ConfigError(f"problem must be I or II, got {self.problem!r}")
        if not self.eps > 0:
            raise ConfigError("eps must be positive")
        if self.model not in VARIANTS:
            raise ConfigError(f"unknown model {self.model!r}; choose from {sorted(VARIANTS)}")
        unknown = set(self.net) - {f.name for f in dataclasses.fields(NetSpec)}
        if unknown:
            raise ConfigError(f"unknown net fields {sorted(unknown)}")
        if self.trials < 1:
            raise ConfigError("trials must be at least 1")
        if self.dataset is not None:
            path = Path(self.dataset)
            if not path.exists():
                raise ConfigError(f"dataset {path} does not exist")
            ds = data_mod.load(path)
            if ds.problem_id != self.problem:
                raise ConfigError(f"dataset {path} is for problem {ds.problem_id}, config says {self.problem}")

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        unknown = set(d) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        d = dict(d)
        if "net" in d and d["net"] and "kernel" in d["net"]:
            d["net"] = {**d["net"], "kernel": tuple(d["net"]["kernel"])}
        return cls(**d)

    @classmethod
    def from_yaml(cls, path) -> "ExperimentConfig":
        with open(path) as fh:
            return cls.from_dict(yaml.safe_load(fh) or {})

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["net"] = {k: list(v) if isinstance(v, tuple) else v for k, v in self.net.items()}
        return d

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)

    def digest(self) -> str:
        d = self.to_dict()
        for k in ("out_dir", "results_csv", "name", "figures", "n_plot"):
            d.pop(k)
        return config_hash(d)

    def net_spec(self) -> NetSpec:
        branch = VARIANTS[self.model][1]
        kw = {"branch": branch, "layer_norm": branch == "conv", **self.net}
        if "kernel" in kw:
            kw["kernel"] = tuple(kw["kernel"])
        return NetSpec(**kw)

    def problem_spec(self) -> ProblemSpec:
        return make_problem(self.problem, self.eps, self.t_max)

    def build_model(self) -> OperatorModel:
        return build_model(self.model, (32, 64), gauss_legendre(self.n_velocities), self.net_spec())

    def eval_grid(self) -> tuple[np.ndarray, np.ndarray]:
        p = self.problem_spec()
        return np.linspace(0.0, p.t_max, self.nt_eval), np.linspace(p.x_range[0], p.x_range[1], self.nx_eval)


@dataclass
class ResultRow:
    method: str
    rel_l2: float | str
    param_count: int
    wall_time_train_s: float
    wall_time_infer_ms: float
    trials: int
    problem: str = ""
    eps: float = math.nan
    status: str = "ok"
    config_hash: str = ""
    setting: str = ""

    def __post_init__(self):
        if isinstance(self.rel_l2, float) and self.rel_l2 < 0:
            raise ValueError("rel_l2 must be non-negative")

    @property
    def diverged(self) -> bool:
        return self.rel_l2 == DIVERGED

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)


RESULT_FIELDS = [f.name for f in dataclasses.fields(ResultRow)]


def append_result(path, row: ResultRow) -> None:
    """Append one row under an exclusive lock; writes the header for a new file."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "a+", newline="") as fh:
        fcntl.flock(fh, fcntl.LOCK_EX)
        try:
            fh.seek(0, 2)
            wr = csv.DictWriter(fh, fieldnames=RESULT_FIELDS)
            if fh.tell() == 0:
                wr.writeheader()
            d = row.as_dict()
            d["rel_l2"] = d["rel_l2"] if isinstance(d["rel_l2"], str) else repr(float(d["rel_l2"]))
            wr.writerow(d)
            fh.flush()
        finally:
            fcntl.flock(fh, fcntl.LOCK_UN)


def read_results(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# ---------------------------------------------------------------- stages

def obtain_dataset(cfg: ExperimentConfig, out: Path):
    if cfg.dataset is not None:
        return data_mod.load(cfg.dataset)
    cached = out / "dataset.bin"
    if cached.exists():
        ds = data_mod.load(cached)
        if ds.meta.get("m") == cfg.m and ds.meta.get("seed") == cfg.data_seed and ds.meta.get("l") == cfg.l \
                and ds.problem_id == cfg.problem:
            return ds
    ds = data_mod.make_dataset(cfg.problem, m=cfg.m, l=cfg.l, seed=cfg.data_seed)
    data_mod.save(ds, cached)
    return ds


def reference_densities(problem: ProblemSpec, inputs, x_grid, v_grid, t_eval, x_eval, nx: int = 200,
                        n_velocities: int = 32) -> np.ndarray:
    """Kinetic reference rho for each input function, on the evaluation grid."""
    grid = kinetic_grid(problem, nx=nx, quad=gauss_legendre(n_velocities))
    out = []
    for f0 in inputs:
        field = solve_transport_ap(problem, f0, x_grid, v_grid, grid, record_every=max(1, grid.nt // 500))
        out.append(field.at(t_eval, x_eval).rho)
    return np.stack(out) if out else np.zeros((0, len(t_eval), len(x_eval)))


def obtain_reference(cfg: ExperimentConfig, ds, out: Path) -> np.ndarray:
    key = config_hash({"problem": cfg.problem, "eps": cfg.eps, "t_max": cfg.t_max, "nt": cfg.nt_eval,
                       "nx": cfg.nx_eval, "ref_nx": cfg.ref_nx, "nv": cfg.n_velocities,
                       "data": ds.meta, "n_test": int(len(ds.test))})
    path = out / "reference.bin"
    if path.exists():
        arrays, meta, _ = read_container(path)
        if meta.get("key") == key:
            return arrays["rho"]
    t_eval, x_eval = cfg.eval_grid()
    ref = reference_densities(cfg.problem_spec(), ds.test, ds.x_grid, ds.v_grid, t_eval, x_eval,
                              cfg.ref_nx, cfg.n_velocities)
    write_container(path, {"rho": ref, "t_grid": t_eval, "x_grid": x_eval}, meta={"key": key}, kind="reference")
    return ref


def time_inference(model: OperatorModel, flat, inputs, t_grid, x_grid, reps: int) -> dict:
    """Wall time of predicting rho on the evaluation grid for one input function.
    Compilation is excluded by a warm-up call."""
    if reps <= 0 or len(inputs) == 0:
        return {"n": 0, "mean_ms": None, "std_ms": None, "samples_ms": []}
    density = make_density_fn(model, t_grid, x_grid)
    flat = np.asarray(flat)
    np.asarray(density(flat, np.asarray(inputs[:1])))
    times = []
    for i in range(reps):
        a = np.asarray(inputs[i % len(inputs)])[None]
        t0 = time.perf_counter()
        np.asarray(density(flat, a))
        times.append(1e3 * (time.perf_counter() - t0))
    return _stats(times)


def time_reference(problem: ProblemSpec, inputs, x_grid, v_grid, t_grid, x_eval, reps: int,
                   nx: int = 200, n_velocities: int = 32) -> dict:
    """Wall time of one kinetic reference solve, interpolated onto the evaluation grid."""
    if reps <= 0 or len(inputs) == 0:
        return {"n": 0, "mean_ms": None, "std_ms": None, "samples_ms": []}
    times = []
    for i in range(reps):
        t0 = time.perf_counter()
        reference_densities(problem, [inputs[i % len(inputs)]], x_grid, v_grid, t_grid, x_eval, nx, n_velocities)
        times.append(1e3 * (time.perf_counter() - t0))
    return _stats(times)


def _stats(times) -> dict:
    return {"n": len(times), "mean_ms": statistics.fmean(times),
            "std_ms": statistics.stdev(times) if len(times) > 1 else 0.0, "samples_ms": times}


def write_density_grids(path, pred, ref, t_grid, x_grid, samples) -> None:
    """Long-format CSV of predicted and reference rho for the chosen test samples."""
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["sample", "t", "x", "rho_pred", "rho_ref"])
        for s in samples:
            for i, t in enumerate(t_grid):
                for j, x in enumerate(x_grid):
                    wr.writerow([s, repr(float(t)), repr(float(x)), repr(float(pred[s, i, j])),
                                 repr(float(ref[s, i, j]))])


# ---------------------------------------------------------------- experiment

@dataclass
class ExperimentOutcome:
    row: ResultRow
    params: object = None
    history: object = None
    per_trial: list = field(default_factory=list)
    pred: np.ndarray | None = None
    ref: np.ndarray | None = None


def run_experiment(cfg: ExperimentConfig, full: bool = False):
    """Data, best-of-``trials`` training, reference, error and artifacts.

    Returns the :class:`ResultRow` (or an :class:`ExperimentOutcome` with
    ``full=True``). A stage failure yields a row with status ``failed``.
    A trial diverges when its end-of-training test error exceeds
    ``diverge_threshold`` or is not finite; the row reports the best
    checkpoint of the remaining trials, or the sentinel if none remain.
    """
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "config.yaml", "w") as fh:
        yaml.safe_dump(cfg.to_dict(), fh, sort_keys=False)
    model = None
    outcome = ExperimentOutcome(ResultRow(cfg.name or cfg.model, math.nan, 0, 0.0, math.nan, cfg.trials,
                                          cfg.problem, cfg.eps, "failed", cfg.digest()))
    try:
        model = cfg.build_model()
        outcome.row.param_count = param_count(model.layout)
        problem = cfg.problem_spec()
        ds = obtain_dataset(cfg, out)
        ref = obtain_reference(cfg, ds, out)
        t_eval, x_eval = cfg.eval_grid()
        density = make_density_fn(model, t_eval, x_eval)
        best_err, best, fallback = math.inf, None, None
        train_time = 0.0
        for k in range(cfg.trials):
            tcfg = dataclasses.replace(cfg.train, seed=cfg.train.seed + k)
            tdir = out / f"trial{k}"
            t0 = time.perf_counter()
            try:
                params, hist = fit(model, ds, problem, tcfg, reference=ref, eval_grid=(t_eval, x_eval),
                                   checkpoint_dir=tdir, log_path=out / f"trial{k}_log.csv")
                finite = True
            except DivergenceError as exc:
                params, hist, finite = exc.params, exc.history, False
                hist.to_csv(out / f"trial{k}_log.csv")
                log.warning("trial %d: %s", k, exc)
            train_time += time.perf_counter() - t0
            pred = predict_density(density, params.values, ds.test)
            err = float(np.mean(relative_l2_batch(pred, ref))) if finite else math.nan
            if not math.isfinite(err):
                err = math.nan
            # the sentinel looks at the end of training, not at the best checkpoint
            final = hist.test_error[-1] if finite and hist.test_error else err
            diverged = not (math.isfinite(final) and final <= cfg.diverge_threshold)
            outcome.per_trial.append({"seed": tcfg.seed, "rel_l2": err, "final_rel_l2": final, "finite": finite,
                                      "diverged": diverged, "best_epoch": hist.best_epoch})
            if not diverged and err < best_err:
                best_err, best = err, (params, hist, pred)
            elif best is None and math.isfinite(err) and (fallback is None or err < fallback[0]):
                fallback = (err, (params, hist, pred))
        outcome.row.wall_time_train_s = train_time
        meta = {"model": cfg.model, "config": cfg.to_dict(), "config_hash": cfg.digest()}
        if best is None and fallback is None:
            outcome.row.rel_l2 = DIVERGED
            outcome.row.status = "diverged"
            return outcome if full else outcome.row
        if best is None:
            # every trial diverged; artifacts still come from the least bad one
            best_err, best = fallback
            outcome.row.rel_l2 = DIVERGED
            outcome.row.status = "diverged"
        else:
            outcome.row.rel_l2 = best_err
            outcome.row.status = "ok"
        params, hist, pred = best
        save_checkpoint(out / "best.ckpt", params, AdamState.zeros(len(params)), {**meta, "rel_l2": best_err})
        outcome.params, outcome.history, outcome.pred, outcome.ref = params, hist, pred, ref
        samples = list(range(min(cfg.n_plot, len(ds.test))))
        write_density_grids(out / "density_grids.csv", pred, ref, t_eval, x_eval, samples)
        np.savetxt(out / "per_sample_rel_l2.csv", relative_l2_batch(pred, ref), delimiter=",", header="rel_l2",
                   comments="")
        stats = time_inference(model, params.values, ds.test, t_eval, x_eval, reps=5)
        outcome.row.wall_time_infer_ms = stats["mean_ms"] if stats["n"] else math.nan
        if cfg.figures:
            from apcon import plotting
            plotting.density_figures(out, pred, ref, t_eval, x_eval, samples, title=cfg.name or cfg.model)
            plotting.loss_figure(out / "loss.png", hist)
    except Exception as exc:  # the row records the failure, artifacts stay on disk
        log.exception("experiment failed: %s", exc)
        outcome.row.status = "failed"
        outcome.row.rel_l2 = math.nan
    finally:
        if cfg.results_csv:
            append_result(cfg.results_csv, outcome.row)
    return outcome if full else outcome.row


# ---------------------------------------------------------------- ablations

# model, eps and the swept NetSpec field of each ablation grid
ABLATIONS = {
    "layernorm": ("APCON_V2", 1e-4, "layer_norm", [False, True], ["without LayerNorm", "with LayerNorm"]),
    "pool_order": ("APCON_V1", 1.0, "order", ["act_then_pool", "pool_then_act"],
                   ["Activation + Pooling", "Pooling + Activation"]),
    "kernel_shape": ("APCON_V2", 1e-4, "kernel", [(1, 2), (2, 2), (2, 4)], ["(1, 2)", "(2, 2)", "(2, 4)"]),
    "channels": ("APCON_V2", 1e-4, "channels", [2, 4, 6], ["2", "4", "6"]),
    "filter_layers": ("APCON_V2", 1e-4, "filter_layers", [1, 2], ["1", "2"]),
}


def run_ablation(kind: str, base: ExperimentConfig, csv_path=None) -> list[ResultRow]:
    """Every setting of one ablation grid, all other settings from ``base``
    (model and eps follow the grid's definition)."""
    if kind not in ABLATIONS:
        raise ConfigError(f"unknown ablation {kind!r}; choose from {sorted(ABLATIONS)}")
    model, eps, key, values, labels = ABLATIONS[kind]
    root = Path(base.out_dir) / f"ablation_{kind}"
    rows = []
    for value, label in zip(values, labels):
        tag = str(value).replace(" ", "").replace("(", "").replace(")", "").replace(",", "x")
        cfg = base.replace(model=model, eps=eps, net={**base.net, key: value}, out_dir=str(root / tag),
                           name=f"{model} {key}={label}")
        row = run_experiment(cfg)
        row.setting = label
        rows.append(row)
    csv_path = Path(csv_path) if csv_path else root / "comparison.csv"
    csv_path.parent.mkdir(parents=True, exist_ok=True)
    with open(csv_path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["ablation", "setting", "method", "rel_l2", "param_count", "status"])
        for r in rows:
            wr.writerow([kind, r.setting, r.method, r.rel_l2 if isinstance(r.rel_l2, str) else repr(float(r.rel_l2)),
                         r.param_count, r.status])
    return rows


def load_trained(path):
    """(model, params, config) from a checkpoint written by run_experiment or fit."""
    params, _, meta = load_checkpoint(path)
    cfg = meta.get("config")
    if cfg is None:
        raise ConfigError(f"{path} lacks the experiment config needed to rebuild the model")
    cfg = ExperimentConfig.from_dict({**cfg, "dataset": None})
    model = cfg.build_model()
    if model.layout != params.layout:
        raise ConfigError(f"{path}: parameters do not match the configured model")
    return model, params, cfg
