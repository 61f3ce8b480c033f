"""Command-line driver: ``llfmc {train,evaluate,synth,sweep,graph-build}``.

Every command writes its outputs under ``--out`` together with a
``manifest.json`` holding the argument echo, the resolved configuration, the
seed and SHA-256 hashes of all input files.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 divergence.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import itertools
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .analysis import (SubgroupSpec, generate_subgroup_instance, identify_subgroups,
                       pairwise_agreement, relative_error, rmse, similarity_matrix)
from .core import (ConfigError, DataError, DivergenceError, FactorPair, ObservedMatrix,
                   RunConfig, load_config, load_csv_coo, load_movielens,
                   load_movielens_split, split_train_test)
from .graph import (PairGraph, build_knn_graph, cut_cycles, distance_source,
                    refine_weights)
from .penalty import PenaltySpec
from .solver import solve

log = logging.getLogger("llfmc")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGENCE = 0, 2, 3, 4


# ---------------------------------------------------------------------------
# shared helpers

def sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(out: Path, args, config: RunConfig | None, inputs: dict, extra=None):
    echo = {k: v for k, v in vars(args).items() if k not in ("func", "command_line")}
    manifest = {
        "version": __version__,
        "command": args.command,
        "command_line": getattr(args, "command_line", None),
        "argv": echo,
        "config": config.to_dict() if config is not None else None,
        "seed": getattr(args, "seed", None) if config is None else config.seed,
        "inputs": {name: {"path": str(p), "sha256": sha256(p)}
                   for name, p in inputs.items() if p is not None},
    }
    if extra:
        manifest.update(extra)
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, default=str))


def write_trace(path: Path, trace) -> None:
    with open(path, "w") as fh:
        for rec in trace:
            fh.write(json.dumps(rec.to_dict()) + "\n")


def write_factors(out: Path, factors: FactorPair, prefix="") -> None:
    np.savetxt(out / f"{prefix}X.csv", factors.X, delimiter=",")
    np.savetxt(out / f"{prefix}Y.csv", factors.Y, delimiter=",")


def write_metrics(out: Path, metrics: dict) -> None:
    (out / "metrics.json").write_text(json.dumps(metrics, indent=2))
    with open(out / "metrics.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["metric", "value"])
        for k, v in metrics.items():
            w.writerow([k, v])


def write_rows(path: Path, rows: list[dict]) -> None:
    if not rows:
        path.write_text("")
        return
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)


def load_matrix(path, fmt: str, shape=None) -> ObservedMatrix:
    if fmt == "csv":
        return load_csv_coo(path, shape=shape)
    return load_movielens(path, format=fmt)


def load_train_test(args):
    """Training and (optional) test matrices sharing one index space."""
    if args.test is not None:
        if args.format == "csv":
            train = load_csv_coo(args.data)
            return train, load_csv_coo(args.test, shape=train.shape)
        return load_movielens_split(args.data, args.test, format=args.format)
    M = load_matrix(args.data, args.format)
    if args.test_fraction > 0:
        return split_train_test(M, args.test_fraction, seed=args.seed)
    return M, None


def config_from_args(args) -> RunConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else RunConfig()
    changes = {}
    for name in ("rank", "alpha", "eta", "max_iter", "tol1", "tol2", "cg_max_inner", "seed"):
        v = getattr(args, name, None)
        if v is not None:
            changes[name] = v
    if args.penalty is not None or args.t is not None or args.b is not None:
        kind = args.penalty or cfg.penalty_x.kind
        for side in ("x", "y"):
            old = getattr(cfg, f"penalty_{side}")
            t = args.t if args.t is not None else (old.t if old.kind == kind else None)
            b = args.b if args.b is not None else (old.b if old.kind == kind else None)
            if kind == "mcp" and t is None:
                t = 2.0
            if kind == "mtype" and b is None:
                b = 3.0
            try:
                changes[f"penalty_{side}"] = PenaltySpec(kind, old.gamma, t=t, b=b)
            except ValueError as exc:
                raise ConfigError(str(exc)) from None
    cfg = cfg.replace(**changes)
    gx = args.gamma_x if args.gamma_x is not None else args.gamma
    gy = args.gamma_y if args.gamma_y is not None else args.gamma
    if gx is not None:
        cfg = cfg.replace(gamma_x=gx)
    if gy is not None:
        cfg = cfg.replace(gamma_y=gy)
    return cfg


def auto_graphs(M: ObservedMatrix, distance: str, k: int, weighting: str, seed: int):
    """k-NN graphs over rows and columns, cut to forests."""
    gx = build_knn_graph(distance_source(M, distance), min(k, M.n_rows - 1), weighting)
    gy = build_knn_graph(distance_source(M, distance, transpose=True),
                         min(k, M.n_cols - 1), weighting)
    return cut_cycles(gx, seed), cut_cycles(gy, seed + 1)


def resolve_graphs(args, M: ObservedMatrix):
    if args.graph_x or args.graph_y:
        gx = PairGraph.from_csv(args.graph_x, M.n_rows) if args.graph_x else PairGraph.empty(M.n_rows)
        gy = PairGraph.from_csv(args.graph_y, M.n_cols) if args.graph_y else PairGraph.empty(M.n_cols)
        if not args.no_cut:
            gx, gy = cut_cycles(gx, args.seed or 0), cut_cycles(gy, (args.seed or 0) + 1)
        return gx, gy
    if args.auto_graph:
        return auto_graphs(M, args.auto_graph, args.k, args.weighting, args.seed or 0)
    return PairGraph.empty(M.n_rows), PairGraph.empty(M.n_cols)


def fit_pipeline(M, gx, gy, cfg, two_pass=False, refine_k=10, cut_seed=0):
    """One solve, or the two-pass adaptive refinement when ``two_pass``."""
    res = solve(M, gx, gy, cfg)
    if not two_pass:
        return res, (gx, gy)
    rx, ry = refine_weights(M, res.factors, refine_k)
    rx, ry = cut_cycles(rx, cut_seed), cut_cycles(ry, cut_seed + 1)
    res2 = solve(M, rx, ry, cfg)
    res2.extras["first_pass_trace_len"] = len(res.trace)
    return res2, (rx, ry)


# ---------------------------------------------------------------------------
# commands

def cmd_train(args) -> int:
    cfg = config_from_args(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    train, test = load_train_test(args)
    gx, gy = resolve_graphs(args, train)
    res, (gx, gy) = fit_pipeline(train, gx, gy, cfg, args.two_pass, args.refine_k,
                                 cfg.seed)
    write_factors(out, res.factors)
    write_trace(out / "trace.jsonl", res.trace)
    gx.to_csv(out / "graph_x.csv")
    gy.to_csv(out / "graph_y.csv")
    metrics = {"iterations": len(res.trace), "stop_reason": res.stop_reason,
               "train_rmse": rmse(res.factors.predict_observed(train), train.values),
               "edges_x": gx.n_edges, "edges_y": gy.n_edges}
    if test is not None:
        metrics["test_rmse"] = rmse(res.factors.predict_observed(test), test.values)
    write_metrics(out, metrics)
    write_manifest(out, args, cfg, {"data": args.data, "test": args.test,
                                    "config": args.config, "graph_x": args.graph_x,
                                    "graph_y": args.graph_y})
    print(json.dumps(metrics))
    return EXIT_OK


def cmd_evaluate(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    X = np.atleast_2d(np.loadtxt(args.x, delimiter=","))
    Y = np.atleast_2d(np.loadtxt(args.y, delimiter=","))
    if X.shape[1] != Y.shape[1] and X.shape[0] == 1:
        X = X.T
    factors = FactorPair(X, Y)
    if args.train is not None and args.format != "csv":
        M = load_movielens_split(args.train, args.data, format=args.format)[1]
    else:
        M = load_matrix(args.data, args.format, shape=(X.shape[0], Y.shape[0]))
    if M.n_rows > X.shape[0] or M.n_cols > Y.shape[0]:
        raise DataError(f"matrix shape {M.shape} exceeds factor sizes "
                        f"({X.shape[0]}, {Y.shape[0]})")
    metrics = {"rmse": rmse(factors.predict_observed(M), M.values), "n": M.nnz}
    write_metrics(out, metrics)
    write_manifest(out, args, None, {"data": args.data, "train": args.train,
                                     "x": args.x, "y": args.y})
    print(json.dumps(metrics))
    return EXIT_OK


def synth_config(args) -> RunConfig:
    return RunConfig(
        rank=args.d, alpha=args.alpha, eta=args.eta,
        penalty_x=PenaltySpec("mcp", args.gamma, t=args.t),
        penalty_y=PenaltySpec("mcp", args.gamma, t=args.t),
        max_iter=args.max_iter, tol1=args.tol1, tol2=args.tol2, seed=args.seed,
    )


def run_synth(spec: SubgroupSpec, cfg: RunConfig, k_w: int, tau: float = 0.01):
    """LLFMC and its ``gamma = 0`` baseline on one synthetic instance."""
    inst = generate_subgroup_instance(spec)
    M = inst.M_obs
    gx = build_knn_graph(distance_source(M, "d1"), min(k_w, M.n_rows - 1), "adaptive")
    gy = build_knn_graph(distance_source(M, "d1", transpose=True),
                         min(k_w, M.n_cols - 1), "adaptive")
    gx, gy = cut_cycles(gx, cfg.seed), cut_cycles(gy, cfg.seed + 1)
    res = solve(M, gx, gy, cfg)
    base = solve(M, gx, gy, cfg.replace(gamma_x=0.0, gamma_y=0.0))
    ident = identify_subgroups(res.factors.X, tau)
    ident0 = identify_subgroups(base.factors.X, tau)
    row = {
        "n": spec.n, "k": spec.k_x, "rho": spec.rho, "sigma": spec.sigma, "seed": spec.seed,
        "label": "subgroups" if inst.has_subgroups else "no subgroups",
        "relerr_llfmc": relative_error(res.factors, inst.M_star),
        "relerr_baseline": relative_error(base.factors, inst.M_star),
        "agreement_llfmc": pairwise_agreement(ident, inst.truth_x),
        "agreement_baseline": pairwise_agreement(ident0, inst.truth_x),
        "iters_llfmc": len(res.trace), "iters_baseline": len(base.trace),
    }
    return row, inst, res, base


def cmd_synth(args) -> int:
    spec = SubgroupSpec(n=args.n, m=args.m, d=args.d, k_x=args.k, k_y=args.k,
                        sigma=args.sigma, rho=args.rho, seed=args.seed)
    cfg = synth_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    k_w = args.k_w if args.k_w is not None else max(1, round(args.k_w_frac * spec.n))
    row, inst, res, base = run_synth(spec, cfg, k_w, args.tau)
    write_rows(out / "relerr.csv", [row])
    np.savetxt(out / "S_truth.csv", inst.truth_x.pair_matrix().astype(int), fmt="%d", delimiter=",")
    np.savetxt(out / "S_llfmc.csv", similarity_matrix(res.factors.X, args.tau).astype(int),
               fmt="%d", delimiter=",")
    np.savetxt(out / "S_baseline.csv", similarity_matrix(base.factors.X, args.tau).astype(int),
               fmt="%d", delimiter=",")
    write_factors(out, res.factors)
    write_factors(out, base.factors, prefix="baseline_")
    write_trace(out / "trace.jsonl", res.trace)
    write_metrics(out, row)
    write_manifest(out, args, cfg, {}, {"k_w": k_w})
    print(json.dumps(row))
    return EXIT_OK


def _sweep_cell(payload):
    M_fit, M_eval, gx, gy, cfg = payload
    try:
        res = solve(M_fit, gx, gy, cfg)
        score = rmse(res.factors.predict_observed(M_eval), M_eval.values)
        status = res.stop_reason
    except DivergenceError:
        score, status = float("nan"), "diverged"
    return score, status


def parse_grid(text: str) -> list[float]:
    """Comma list of numbers; ``2^a..b`` expands to powers of two."""
    vals = []
    for part in filter(None, (p.strip() for p in text.split(","))):
        if part.startswith("2^") and ".." in part:
            lo, hi = part[2:].split("..")
            vals.extend(2.0 ** e for e in range(int(lo), int(hi) + 1))
        else:
            vals.append(float(part))
    return vals


def grid_cells(gammas_x, gammas_y, ts, tie=False) -> list[tuple]:
    """``(gamma_x, gamma_y, t)`` cells; ``tie`` keeps only ``gamma_x == gamma_y``."""
    if not len(gammas_x) or not len(gammas_y) or not len(ts):
        raise ConfigError("sweep grid is empty")
    if tie:
        return [(g, g, t) for g in gammas_x for t in ts]
    return list(itertools.product(gammas_x, gammas_y, ts))


def n_workers() -> int:
    cap = os.environ.get("LLFMC_THREADS")
    n = os.cpu_count() or 1
    if cap:
        try:
            n = min(n, max(1, int(cap)))
        except ValueError:
            raise ConfigError(f"LLFMC_THREADS={cap!r} is not an integer") from None
    return n


def cmd_sweep(args) -> int:
    base_cfg = config_from_args(args)
    gammas_x = parse_grid(args.gammas)
    gammas_y = parse_grid(args.gammas_y) if args.gammas_y else gammas_x
    ts = parse_grid(args.ts) if args.ts else [base_cfg.penalty_x.t]
    cells = grid_cells(gammas_x, gammas_y, ts, args.tie_gammas)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    train, test = load_train_test(args)
    if args.validation_fraction > 0:
        fit, val = split_train_test(train, args.validation_fraction, seed=base_cfg.seed)
    else:
        if test is None:
            raise ConfigError("sweep needs a test set or a validation fraction")
        fit, val = train, test
    gx, gy = resolve_graphs(args, fit)
    cfgs = [base_cfg.replace(gamma_x=a, gamma_y=b, t=t) if t is not None
            else base_cfg.replace(gamma_x=a, gamma_y=b) for a, b, t in cells]
    payloads = [(fit, val, gx, gy, c) for c in cfgs]
    workers = min(n_workers(), len(payloads))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            scores = list(ex.map(_sweep_cell, payloads))
    else:
        scores = [_sweep_cell(p) for p in payloads]
    rows = [{"gamma_x": a, "gamma_y": b, "t": t, "score": s, "status": st,
             "baseline": a == 0 and b == 0}
            for (a, b, t), (s, st) in zip(cells, scores)]
    write_rows(out / "sweep.csv", rows)
    finite = [r for r in rows if np.isfinite(r["score"])]
    if not finite:
        raise DivergenceError("every sweep cell diverged")
    best = min(finite, key=lambda r: r["score"])
    summary = {"best": best, "selected_on": "validation" if args.validation_fraction > 0 else "test",
               "cells": len(rows)}
    if args.validation_fraction > 0 and test is not None:
        cfg = base_cfg.replace(gamma_x=best["gamma_x"], gamma_y=best["gamma_y"])
        if best["t"] is not None:
            cfg = cfg.replace(t=best["t"])
        gx_full, gy_full = resolve_graphs(args, train)
        res = solve(train, gx_full, gy_full, cfg)
        summary["test_rmse"] = rmse(res.factors.predict_observed(test), test.values)
    write_metrics(out, {k: v for k, v in summary.items() if k != "best"}
                  | {f"best_{k}": v for k, v in best.items()})
    write_manifest(out, args, base_cfg, {"data": args.data, "test": args.test,
                                         "config": args.config})
    print(json.dumps(summary, default=str))
    return EXIT_OK


def cmd_graph_build(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    M = load_matrix(args.data, args.format)
    transpose = args.side == "cols"
    n = M.n_cols if transpose else M.n_rows
    g = build_knn_graph(distance_source(M, args.distance, transpose=transpose),
                        min(args.k, n - 1), args.weighting)
    if args.cut:
        g = cut_cycles(g, args.seed)
    g.to_csv(out / f"graph_{'y' if transpose else 'x'}.csv")
    write_manifest(out, args, None, {"data": args.data})
    print(json.dumps({"n_nodes": g.n_nodes, "n_edges": g.n_edges, "acyclic": g.acyclic}))
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing

def _add_data(p, test=True):
    p.add_argument("--data", required=True, help="training ratings (MovieLens or COO CSV)")
    p.add_argument("--format", default="tab_100k", choices=["tab_100k", "dat_1m", "csv"])
    if test:
        p.add_argument("--test", help="held-out ratings in the same format")
        p.add_argument("--test-fraction", type=float, default=0.0,
                       help="random held-out fraction when --test is absent")


def _add_config(p):
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--rank", type=int)
    p.add_argument("--alpha", type=float)
    p.add_argument("--eta", type=float)
    p.add_argument("--penalty", choices=["mcp", "scad", "mtype", "l1", "sql2", "none"])
    p.add_argument("--gamma", type=float, help="sets both gamma-x and gamma-y")
    p.add_argument("--gamma-x", type=float)
    p.add_argument("--gamma-y", type=float)
    p.add_argument("--t", type=float, help="MCP concavity")
    p.add_argument("--b", type=float, help="M-type half-width")
    p.add_argument("--max-iter", type=int)
    p.add_argument("--tol1", type=float)
    p.add_argument("--tol2", type=float)
    p.add_argument("--cg-max-inner", type=int)
    p.add_argument("--seed", type=int)


def _add_graph(p):
    p.add_argument("--graph-x", help="row graph CSV (l1,l2,w)")
    p.add_argument("--graph-y", help="column graph CSV (l1,l2,w)")
    p.add_argument("--no-cut", action="store_true", help="graph files are already forests")
    p.add_argument("--auto-graph", choices=["d1", "d2"], help="build k-NN graphs from the data")
    p.add_argument("--k", type=int, default=10, help="neighbours for --auto-graph")
    p.add_argument("--weighting", choices=["unit", "adaptive"], default="unit")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="llfmc", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=__version__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="fit factors on one dataset")
    _add_data(p)
    _add_config(p)
    _add_graph(p)
    p.add_argument("--two-pass", action="store_true",
                   help="refit on adaptive graphs built from first-pass factors")
    p.add_argument("--refine-k", type=int, default=10)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="RMSE of saved factors on a ratings file")
    _add_data(p, test=False)
    p.add_argument("--x", required=True, help="X.csv")
    p.add_argument("--y", required=True, help="Y.csv")
    p.add_argument("--train", help="ratings the factors were fit on; fixes the MovieLens id mapping")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("synth", help="synthetic subgroup experiment against the gamma=0 baseline")
    p.add_argument("--n", type=int, default=200)
    p.add_argument("--m", type=int)
    p.add_argument("--d", type=int, default=5)
    p.add_argument("--k", type=int, default=20, help="groups per side (k = n: no subgroups)")
    p.add_argument("--sigma", type=float, default=100.0)
    p.add_argument("--rho", type=float, default=0.3)
    p.add_argument("--k-w", type=int, help="neighbours for the d1 weights")
    p.add_argument("--k-w-frac", type=float, default=0.15)
    p.add_argument("--gamma", type=float, default=1.0)
    p.add_argument("--t", type=float, default=2.0)
    p.add_argument("--alpha", type=float, default=1.0)
    p.add_argument("--eta", type=float, default=1e4)
    p.add_argument("--max-iter", type=int, default=500)
    p.add_argument("--tol1", type=float, default=1e-1)
    p.add_argument("--tol2", type=float, default=1e-4)
    p.add_argument("--tau", type=float, default=0.01)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("sweep", help="grid search over gamma-x, gamma-y and t")
    _add_data(p)
    _add_config(p)
    _add_graph(p)
    p.add_argument("--gammas", required=True, help="e.g. 0,2^-2..10")
    p.add_argument("--gammas-y", help="defaults to --gammas")
    p.add_argument("--ts", help="MCP t values, e.g. 0.5,2,20")
    p.add_argument("--tie-gammas", action="store_true", help="only cells with gamma-x = gamma-y")
    p.add_argument("--validation-fraction", type=float, default=0.1,
                   help="select on a split of the training data (0: select on --test)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("graph-build", help="k-NN graph over rows or columns")
    _add_data(p, test=False)
    p.add_argument("--distance", choices=["d1", "d2"], default="d2")
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--weighting", choices=["unit", "adaptive"], default="adaptive")
    p.add_argument("--side", choices=["rows", "cols"], default="rows")
    p.add_argument("--cut", action="store_true", help="cut cycles before writing")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_graph_build)
    return ap


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(argv)
    args.command_line = argv
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as exc:
        print(f"divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except (DataError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as exc:
        # ParseError and generator argument errors
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
