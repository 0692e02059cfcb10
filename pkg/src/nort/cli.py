"""Command-line front end: ``gen``, ``solve``, ``eval`` and ``sweep``.

Each command reads a flat ``key = value`` config file (TOML syntax without
tables) and writes its outputs into ``--out``.  Exit codes: 0 success,
2 config error, 3 data error, 4 solver did not meet its stopping tolerance.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import datagen, io
from .losses import Logistic, RobustSmoothed, Square
from .penalties import PenaltySpec, penalty_from_name
from .solver import SolverConfig, nort_solve, random_init, smoothing_nort
from .tensor import FactoredTensor

try:  # Python < 3.11
    import tomllib
except ModuleNotFoundError:  # pragma: no cover - depends on interpreter
    import tomli as tomllib

__all__ = ["main", "ConfigError", "DataError", "load_config", "run_sweep", "build_solver_config"]

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NONCONVERGED = 0, 2, 3, 4


class ConfigError(ValueError):
    pass


class DataError(ValueError):
    pass


_GEN_KEYS = {
    "shape": None, "rank": None, "noise_sigma": 0.0, "n_obs": "paper-default", "seed": 0,
    "fractions": [0.5, 0.5], "n_test": None, "noisy_heldout": False,
    "outlier_fraction": 0.0, "outlier_scale": 5.0,
}
_SOLVE_KEYS = {
    "train": None, "validation": None, "shape": None, "penalty": "lsp", "theta": None,
    "lambda": None, "modes": None, "loss": "square", "robust_base": "lsp", "robust_theta": 1.0,
    "delta0": None, "outer_iters": 1, "tau_multiplier": 1.01, "gamma1": 0.1, "p": 0.5,
    "max_iter": 2000, "rel_tol": 1e-4, "svd_tol": 1e-9, "seed": 0, "laplacian": None,
    "laplacian_kind": "laplacian", "mu": 0.0, "init": "zero", "init_rank": 5, "init_scale": 1.0,
}
_EVAL_KEYS = {"factors": None, "heldout": None, "metric": "rmse", "relation_mode": 3}
_SWEEP_KEYS = dict(_GEN_KEYS)
_SWEEP_KEYS.update({k: v for k, v in _SOLVE_KEYS.items() if k not in ("train", "validation", "shape", "laplacian", "laplacian_kind", "mu")})
_SWEEP_KEYS.update({"axis": None, "values": None, "size": None, "fixed_data": False})
_SWEEP_AXES = ("sigma", "n_obs", "order", "rank")


def load_config(path, allowed: dict, required=()) -> dict:
    """Parse a flat config file, fill defaults, and reject unknown keys."""
    try:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return validate_config(raw, allowed, required)


def validate_config(raw: dict, allowed: dict, required=()) -> dict:
    for key, value in raw.items():
        if isinstance(value, dict):
            raise ConfigError(f"nested table '{key}' not allowed; configs are flat")
    unknown = sorted(set(raw) - set(allowed))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    cfg = dict(allowed)
    cfg.update(raw)
    missing = [k for k in required if cfg.get(k) is None]
    if missing:
        raise ConfigError(f"missing required keys: {', '.join(missing)}")
    return cfg


# ---------------------------------------------------------------------------
# config -> library objects


def _shape(value):
    if not isinstance(value, list) or not all(isinstance(v, int) for v in value):
        raise ConfigError("shape must be a list of integers")
    return tuple(value)


def _loss(cfg):
    name = cfg["loss"]
    if name == "square":
        return Square()
    if name == "logistic":
        return Logistic()
    if name == "robust":
        base = penalty_from_name(cfg["robust_base"], cfg["robust_theta"])
        delta = cfg["delta0"] if cfg["delta0"] is not None else 0.5
        return RobustSmoothed(base, float(delta))
    raise ConfigError(f"unknown loss {name!r}")


def build_solver_config(cfg: dict, n_modes: int, laplacian=None) -> SolverConfig:
    if cfg["lambda"] is None:
        raise ConfigError("missing required key: lambda")
    d = int(cfg["modes"]) if cfg["modes"] is not None else n_modes
    if not 1 <= d <= n_modes:
        raise ConfigError(f"modes must lie in 1..{n_modes}")
    lams = cfg["lambda"] if isinstance(cfg["lambda"], list) else [cfg["lambda"]] * d
    if len(lams) != d:
        raise ConfigError("lambda list length must equal the number of regularised modes")
    try:
        kind = penalty_from_name(cfg["penalty"], cfg["theta"])
        specs = [PenaltySpec(kind, float(l)) for l in lams]
        smoothing = None
        if cfg["loss"] == "robust" and cfg["delta0"] is not None:
            smoothing = (float(cfg["delta0"]), int(cfg["outer_iters"]))
        return SolverConfig(
            specs, loss=_loss(cfg), tau_multiplier=float(cfg["tau_multiplier"]),
            gamma1=float(cfg["gamma1"]), p=float(cfg["p"]), max_iter=int(cfg["max_iter"]),
            rel_tol=float(cfg["rel_tol"]), svd_tol=float(cfg["svd_tol"]), seed=int(cfg["seed"]),
            laplacian=laplacian, smoothing=smoothing,
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def _run_solver(obs, shape, scfg: SolverConfig, cfg: dict):
    init = None
    if cfg["init"] == "random":
        init = random_init(shape, scfg.n_modes, int(cfg["init_rank"]), float(cfg["init_scale"]), scfg.seed)
    elif cfg["init"] != "zero":
        raise ConfigError("init must be 'zero' or 'random'")
    if scfg.smoothing is not None:
        return smoothing_nort(obs, shape, scfg, init=init)
    return nort_solve(obs, shape, scfg, init=init)


def _read_coo(path):
    try:
        return io.coo_read(path)
    except FileNotFoundError:
        raise DataError(f"data file not found: {path}") from None
    except io.ParseError as exc:
        raise DataError(str(exc)) from None


# ---------------------------------------------------------------------------
# outputs


def write_trace(path, trace, n_modes: int):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["iter", "time_s", "objective", "residual"]
                   + [f"rank_mode_{d}" for d in range(1, n_modes + 1)] + ["gamma", "accepted"])
        for n in range(len(trace)):
            res = trace.residual[n]
            w.writerow([trace.iteration[n], f"{trace.time_s[n]:.6f}", repr(trace.objective[n]),
                        "" if math.isnan(res) else repr(res), *trace.ranks[n],
                        repr(trace.gamma[n]), int(trace.accepted[n])])


def _manifest(out: Path, command: str, cfg: dict, extra: dict):
    data = {"command": command, "config": cfg}
    data.update(extra)
    (out / "manifest.json").write_text(json.dumps(data, indent=2, default=str) + "\n")


def _generate(cfg, shape, seed):
    if int(cfg["rank"]) < 1:
        raise ConfigError("rank must be >= 1")
    try:
        prob = datagen.synth_lowrank(
            shape, int(cfg["rank"]), float(cfg["noise_sigma"]), cfg["n_obs"], seed=seed,
            n_test=cfg["n_test"], noisy_heldout=bool(cfg["noisy_heldout"]))
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    observed = prob.observed
    if cfg["outlier_fraction"]:
        observed = datagen.add_outliers(observed, float(cfg["outlier_fraction"]),
                                        float(cfg["outlier_scale"]), seed=seed + 1)
    try:
        parts = datagen.split(observed, cfg["fractions"], seed=seed)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return prob, parts


# ---------------------------------------------------------------------------
# commands


def cmd_gen(cfg: dict, out: Path) -> int:
    shape = _shape(cfg["shape"])
    seed = int(cfg["seed"])
    prob, parts = _generate(cfg, shape, seed)
    out.mkdir(parents=True, exist_ok=True)
    np.savez(out / "truth.npz", weights=prob.weights, **{f"factor_{m}": f for m, f in enumerate(prob.factors, 1)})
    io.coo_write(parts.train, out / "train.coo")
    io.coo_write(parts.validation, out / "validation.coo")
    io.coo_write(prob.test, out / "test.coo")
    total = math.prod(shape)
    _manifest(out, "gen", cfg, {
        "n_observed": prob.observed.nnz, "density": prob.observed.nnz / total,
        "n_train": parts.train.nnz, "n_validation": parts.validation.nnz, "n_test": prob.test.nnz,
    })
    print(f"observed={prob.observed.nnz} density={prob.observed.nnz / total:.4%} "
          f"train={parts.train.nnz} validation={parts.validation.nnz} test={prob.test.nnz}")
    return EXIT_OK


def _load_laplacian(cfg, shape):
    if cfg["laplacian"] is None or float(cfg["mu"]) == 0.0:
        return None
    try:
        mat = io.matrix_read(cfg["laplacian"])
    except FileNotFoundError:
        raise DataError(f"matrix file not found: {cfg['laplacian']}") from None
    except io.ParseError as exc:
        raise DataError(str(exc)) from None
    kind = cfg["laplacian_kind"]
    try:
        if kind == "distance":
            mat = datagen.laplacian_from_affinity(datagen.affinity_from_distance(mat))
        elif kind == "affinity":
            mat = datagen.laplacian_from_affinity(mat)
        elif kind != "laplacian":
            raise ConfigError("laplacian_kind must be laplacian, affinity or distance")
    except ValueError as exc:
        raise DataError(str(exc)) from None
    if mat.shape != (shape[0], shape[0]):
        raise DataError(f"graph matrix is {mat.shape}, expected {(shape[0], shape[0])}")
    return (float(cfg["mu"]), mat)


def cmd_solve(cfg: dict, out: Path) -> int:
    train = _read_coo(cfg["train"])
    shape = train.shape
    if cfg["shape"] is not None and _shape(cfg["shape"]) != shape:
        raise DataError(f"train file has shape {shape}, config says {tuple(cfg['shape'])}")
    validation = _read_coo(cfg["validation"]) if cfg["validation"] else None
    if validation is not None and validation.shape != shape:
        raise DataError("validation shape differs from train shape")
    lap = _load_laplacian(cfg, shape)
    scfg = build_solver_config(cfg, len(shape), lap)
    try:
        result = _run_solver(train, shape, scfg, cfg)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    out.mkdir(parents=True, exist_ok=True)
    io.factors_save(out / "factors.npz", shape, result.factors, result.coeffs)
    write_trace(out / "trace.csv", result.trace, scfg.n_modes)
    summary = {
        "iterations": len(result.trace) - 1, "final_objective": result.final_objective,
        "converged": result.converged, "ranks": list(result.ranks), "tau": result.tau,
    }
    if validation is not None and validation.nnz:
        summary["validation_rmse"] = datagen.rmse(result.tensor, validation)
    _manifest(out, "solve", cfg, summary)
    print(" ".join(f"{k}={v}" for k, v in summary.items()))
    return EXIT_OK if result.converged else EXIT_NONCONVERGED


def _load_factored(path) -> FactoredTensor:
    try:
        shape, factors, coeffs = io.factors_load(path)
    except FileNotFoundError:
        raise DataError(f"factor file not found: {path}") from None
    except (KeyError, ValueError, OSError) as exc:
        raise DataError(f"{path}: unreadable factor archive ({exc})") from None
    return FactoredTensor(shape, list(zip(coeffs, factors)))


def cmd_eval(cfg: dict, out: Path) -> int:
    x = _load_factored(cfg["factors"])
    heldout = _read_coo(cfg["heldout"])
    if heldout.shape != x.shape:
        raise ConfigError(f"factor shape {x.shape} does not match held-out shape {heldout.shape}")
    metric = cfg["metric"]
    if metric == "rmse":
        report = {"rmse": datagen.rmse(x, heldout), "n": heldout.nnz}
    elif metric == "mrr":
        mode = int(cfg["relation_mode"])
        if not 1 <= mode <= len(x.shape):
            raise ConfigError("relation_mode out of range")
        pairs = np.delete(heldout.indices, mode - 1, axis=1)
        scores = datagen.relation_scores(x, pairs, mode)
        mrr, h1, h3 = datagen.mrr_hits(scores, heldout.indices[:, mode - 1] + 1)
        report = {"mrr": mrr, "hits1": h1, "hits3": h3, "n": heldout.nnz}
    else:
        raise ConfigError("metric must be 'rmse' or 'mrr'")
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.json").write_text(json.dumps(report, indent=2) + "\n")
    print(" ".join(f"{k}={v}" for k, v in report.items()))
    return EXIT_OK


def run_sweep(cfg: dict) -> list[dict]:
    """Solve once per value of the single sweep axis; returns one row per point."""
    axis = cfg["axis"]
    if isinstance(axis, list):
        if len(axis) != 1:
            raise ConfigError("sweeps vary exactly one axis")
        axis = axis[0]
    if axis not in _SWEEP_AXES:
        raise ConfigError(f"axis must be one of {_SWEEP_AXES}")
    values = cfg["values"]
    if not isinstance(values, list) or not values:
        raise ConfigError("values must be a nonempty list")
    if any(isinstance(v, list) for v in values):
        raise ConfigError("sweeps vary exactly one axis")
    base_seed = int(cfg["seed"])
    rows = []
    for idx, value in enumerate(values):
        point = dict(cfg)
        seed = base_seed + idx
        data_seed = base_seed if cfg["fixed_data"] else seed
        if axis == "sigma":
            point["noise_sigma"] = float(value)
        elif axis == "n_obs":
            point["n_obs"] = int(value)
        elif axis == "rank":
            point["rank"] = int(value)
        else:
            size = cfg["size"] if cfg["size"] is not None else (cfg["shape"] or [None])[0]
            if size is None:
                raise ConfigError("order sweeps need 'size' (or 'shape')")
            point["shape"] = [int(size)] * int(value)
        if point["shape"] is None:
            raise ConfigError("missing required key: shape")
        shape = _shape(point["shape"])
        prob, parts = _generate(point, shape, data_seed)
        point["seed"] = seed
        scfg = build_solver_config(point, len(shape))
        start = time.perf_counter()
        try:
            result = _run_solver(parts.train, shape, scfg, point)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        wall = time.perf_counter() - start
        rows.append({
            "axis": axis, "value": value, "seed": seed, "n_train": parts.train.nnz,
            "test_rmse": datagen.rmse(result.tensor, prob.test), "wall_time_s": wall,
            "iterations": len(result.trace) - 1, "converged": result.converged,
            "final_ranks": ";".join(str(r) for r in result.ranks),
        })
    return rows


def cmd_sweep(cfg: dict, out: Path) -> int:
    rows = run_sweep(cfg)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "sweep.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        for row in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
    _manifest(out, "sweep", cfg, {"points": len(rows)})
    for row in rows:
        print(f"{row['axis']}={row['value']} test_rmse={row['test_rmse']:.6g} ranks={row['final_ranks']}")
    return EXIT_OK if all(r["converged"] for r in rows) else EXIT_NONCONVERGED


_COMMANDS = {
    "gen": (cmd_gen, _GEN_KEYS, ("shape", "rank")),
    "solve": (cmd_solve, _SOLVE_KEYS, ("train", "lambda")),
    "eval": (cmd_eval, _EVAL_KEYS, ("factors", "heldout")),
    "sweep": (cmd_sweep, _SWEEP_KEYS, ("axis", "values", "rank", "lambda")),
}


def _threads(arg):
    if arg is not None:
        return arg
    env = os.environ.get("NORT_THREADS")
    if env:
        try:
            return int(env)
        except ValueError:
            raise ConfigError("NORT_THREADS must be an integer") from None
    return None


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="nort", description="Nonconvex low-rank tensor completion.")
    parser.add_argument("command", choices=sorted(_COMMANDS))
    parser.add_argument("--config", required=True, help="flat key = value config file")
    parser.add_argument("--out", default=".", help="output directory")
    parser.add_argument("--seed", type=int, help="override the config seed")
    parser.add_argument("--threads", type=int, help="BLAS threads (fallback: NORT_THREADS)")
    args = parser.parse_args(argv)

    func, allowed, required = _COMMANDS[args.command]
    try:
        cfg = load_config(args.config, allowed, required)
        if args.seed is not None and "seed" in cfg:
            cfg["seed"] = args.seed
        threads = _threads(args.threads)
        if threads is not None and threads < 1:
            raise ConfigError("threads must be >= 1")
        from threadpoolctl import threadpool_limits

        with threadpool_limits(limits=threads):
            return func(cfg, Path(args.out))
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
