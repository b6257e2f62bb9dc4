"""Command-line interface: ``bym2 {scale,prior-phi,fit,simulate,study}``.

Exit codes: 0 success, 2 usage or input-format error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .graph import Graph, GraphFormatError, read_graph, write_graph
from .inference import (DataFormatError, Dataset, FixedEffects, GridConfig, NonConvergence,
                        fit, read_data, write_data)
from .linalg import NotPositiveDefinite
from .models import MODEL_KINDS, build_latent_model
from .priors import PhiPriorTable, parse_phi_prior, parse_prec_prior, phi_eigenvalues, _parse_number
from .scaling import scale_structured
from .sim import (DEFAULT_MODELS, STUDY_GRID, Scenario, StudyConfig, default_scenarios, run_study,
                  simulate_dataset)

logger = logging.getLogger("bym2")

THREADS_ENV = "BYM2_THREADS"
EXIT_OK, EXIT_INPUT, EXIT_NUMERIC = 0, 2, 3


class UsageError(Exception):
    pass


def _threads(value) -> int:
    if value is None:
        value = int(os.environ.get(THREADS_ENV, "1"))
    if value < 0:
        raise UsageError("--threads must be >= 0")
    if value == 0:
        return os.cpu_count() or 1
    return value


def _fraction(text: str) -> float:
    try:
        return _parse_number(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a number: {text!r}") from None


def _lattice(text: str):
    try:
        r, c = (int(t) for t in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError("lattice must look like 10x10") from None
    if r < 1 or c < 1:
        raise argparse.ArgumentTypeError("lattice dimensions must be positive")
    return r, c


def _load_graph(args) -> Graph:
    if getattr(args, "graph", None):
        return read_graph(args.graph)
    if getattr(args, "lattice", None):
        return Graph.lattice(*args.lattice)
    raise UsageError("a graph file or --lattice is required")


def _region_base(g: Graph) -> int:
    return int(g.metadata.get("index_base", 0)) if g.metadata else 0


def _write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def write_coordinate(matrix, path) -> int:
    """Lower triangle as 1-based ``i j value`` lines; returns the entry count."""
    coo = matrix.lower.tocoo()
    order = np.lexsort((coo.row, coo.col))
    with open(path, "w") as fh:
        for k in order:
            fh.write(f"{coo.row[k] + 1} {coo.col[k] + 1} {coo.data[k]:.17g}\n")
    return len(order)


# ---------------------------------------------------------------------------


def cmd_scale(args) -> int:
    g = _load_graph(args)
    s = scale_structured(g)
    prefix = Path(args.out)
    nnz = write_coordinate(s.q_star, f"{prefix}.txt")
    base = _region_base(g)
    meta = s.metadata()
    meta.update(
        scale_factor=float(s.scale_factors[0]) if len(s.scale_factors) == 1 else None,
        singleton_regions=[int(i) + base for i in s.singleton_regions],
        region_index_base=base,
        matrix_file=f"{prefix.name}.txt",
        matrix_index_base=1,
        matrix_storage="lower triangle",
        matrix_entries=nnz,
        graph_metadata=dict(g.metadata or {}),
    )
    _write_json(f"{prefix}.json", meta)
    print(json.dumps({"scale_factors": meta["scale_factors"], "rank_deficiency": meta["rank_deficiency"]}))
    return EXIT_OK


def cmd_prior_phi(args) -> int:
    g = _load_graph(args)
    if args.uniform:
        table = PhiPriorTable.uniform()
    else:
        if not (0 < args.U < 1 and 0 < args.alpha < 1):
            raise UsageError("U and alpha must lie in (0, 1)")
        s = scale_structured(g)
        c = s.full_constraints()
        table = PhiPriorTable.pc(args.U, args.alpha, phi_eigenvalues(s.q_star, c.k))
    phi, logit, logd = table.table()
    out = open(args.out, "w", newline="") if args.out else sys.stdout
    try:
        w = csv.writer(out)
        w.writerow(["logit_phi", "phi", "log_density"])
        for a, b, c in zip(logit, phi, logd):
            w.writerow([f"{a:.10g}", f"{b:.10g}", f"{c:.12g}"])
    finally:
        if out is not sys.stdout:
            out.close()
    return EXIT_OK


def _fit_tables(res, data: Dataset, prefix: Path, base: int):
    with open(f"{prefix}_risk.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["region", "y", "E", "smr", "eta_mean", "eta_sd", "theta_mean", "theta_sd", "cpo",
                    "cpo_unstable"])
        for i in range(data.n):
            w.writerow([i + base, int(data.y[i]), f"{data.E[i]:.10g}", f"{data.smr[i]:.10g}",
                        f"{res.eta_mean[i]:.10g}", f"{res.eta_sd[i]:.10g}", f"{res.theta_mean[i]:.10g}",
                        f"{res.theta_sd[i]:.10g}", f"{res.cpo[i]:.10g}", int(res.cpo_unstable[i])])
    rows = res.table()
    with open(f"{prefix}_summary.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
    return rows


def cmd_fit(args) -> int:
    g = _load_graph(args)
    data = read_data(args.data)
    if data.n != g.n_regions:
        raise UsageError(f"data has {data.n} rows but the graph has {g.n_regions} regions")
    try:
        prec = parse_prec_prior(args.prec_prior) if args.prec_prior else None
        phi = parse_phi_prior(args.phi_prior) if args.phi_prior else None
        grid = GridConfig(args.dz, args.diff_logdens)
        fixed = FixedEffects(args.fixed_prior_var)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    model = build_latent_model(args.model, scale_structured(g), prec_prior=prec, phi_prior=phi,
                               scale_dean=args.scale_dean)
    res = fit(model, data, grid, fixed, n_jobs=_threads(args.threads))
    prefix = Path(args.out)
    out = res.to_dict()
    out["metadata"]["region_index_base"] = _region_base(g)
    out["metadata"]["data_file"] = str(args.data)
    out["table"] = res.table()
    _write_json(f"{prefix}.json", out)
    rows = _fit_tables(res, data, prefix, _region_base(g))
    cols = ["Mean", "SD", "2.5%", "Median", "97.5%", "Mode"]
    print(f"{'':>14}" + "".join(f"{c:>11}" for c in cols))
    for r in rows:
        print(f"{r['parameter']:>14}" + "".join(f"{r[c]:>11.4f}" for c in cols))
    print(f"DIC {res.dic:.3f}  pD {res.p_d:.3f}  LS {res.ls:.4f}  RMSE {res.rmse:.4f}")
    return EXIT_OK


def cmd_simulate(args) -> int:
    g = _load_graph(args)
    try:
        sc = Scenario(args.risk, 0.0 if args.risk == "constant" else args.sigma, args.E, args.mu)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    s = scale_structured(g)
    prefix = Path(args.out)
    # the graph goes alongside so the replicates can be refitted directly
    write_graph(g, f"{prefix}.graph")
    truth = {"scenario": {"risk_kind": sc.risk_kind, "sigma": sc.sigma, "E_level": sc.E_level, "mu": sc.mu},
             "seed": args.seed, "graph": f"{prefix.name}.graph", "replicates": []}
    for rep in range(args.replicates):
        rng = np.random.default_rng(np.random.SeedSequence(args.seed, spawn_key=(0, rep)))
        data, eta = simulate_dataset(sc, s, rng, return_eta=True)
        path = f"{prefix}_{rep:03d}.txt"
        write_data(data, path)
        truth["replicates"].append({"file": Path(path).name, "eta": eta.tolist()})
    _write_json(f"{prefix}_truth.json", truth)
    return EXIT_OK


def cmd_study(args) -> int:
    if args.config:
        cfg_path = Path(args.config)
        try:
            raw = json.loads(cfg_path.read_text())
        except json.JSONDecodeError as exc:
            raise UsageError(f"config is not valid JSON: {exc}") from None
        try:
            cfg = StudyConfig.from_dict(raw, base_dir=cfg_path.parent)
        except (TypeError, ValueError, KeyError) as exc:
            raise UsageError(f"invalid study config: {exc}") from None
    else:
        cfg = StudyConfig()
    if args.graph or args.lattice:
        cfg.graph = _load_graph(args)
    if args.replicates is not None:
        cfg.replicates = args.replicates
    if args.seed is not None:
        cfg.seed = args.seed
    if args.models:
        cfg.models = args.models.split(",")
    if args.E_levels:
        cfg.scenarios = [sc for sc in default_scenarios(E_levels=args.E_levels)]
    if args.threads is not None or os.environ.get(THREADS_ENV):
        cfg.n_jobs = _threads(args.threads)
    try:
        cfg.__post_init__()
    except (ValueError, TypeError) as exc:
        raise UsageError(str(exc)) from None
    summary = run_study(cfg)
    prefix = Path(args.out)
    summary.write_csv(f"{prefix}_summary.csv")
    summary.write_jsonl(f"{prefix}_records.jsonl")
    _write_json(f"{prefix}_config.json", summary.config)
    n_fail = sum(r["status"] != "ok" for r in summary.records)
    print(f"{len(summary.records)} fits, {n_fail} failed, {summary.elapsed:.1f}s")
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="bym2", description="Scaled BYM2 disease mapping tools.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def graph_args(sp, required=True):
        sp.add_argument("graph", nargs=None if required else "?", help="adjacency graph file")

    sp = sub.add_parser("scale", help="scale the ICAR structure of a graph")
    graph_args(sp)
    sp.add_argument("-o", "--out", default="scaled", help="output prefix (.txt matrix, .json metadata)")
    sp.set_defaults(func=cmd_scale)

    sp = sub.add_parser("prior-phi", help="tabulate the prior on the mixing parameter")
    graph_args(sp)
    sp.add_argument("--U", type=_fraction, default=0.5)
    sp.add_argument("--alpha", type=_fraction, default=2.0 / 3.0)
    sp.add_argument("--uniform", action="store_true", help="tabulate Unif(0,1) instead")
    sp.add_argument("-o", "--out", help="CSV path (default stdout)")
    sp.set_defaults(func=cmd_prior_phi)

    sp = sub.add_parser("fit", help="fit a model to count data")
    graph_args(sp)
    sp.add_argument("data", help="data file with columns y E [z...]")
    sp.add_argument("--model", choices=MODEL_KINDS, default="bym2")
    sp.add_argument("--prec-prior", help='e.g. "pc:0.2/0.31,0.01" or "gamma:1,0.01"')
    sp.add_argument("--phi-prior", help='e.g. "pc:0.5,2/3" or "uniform"')
    sp.add_argument("--dz", type=float, default=0.2)
    sp.add_argument("--diff-logdens", type=float, default=20.0)
    sp.add_argument("--fixed-prior-var", type=float, default=100.0)
    sp.add_argument("--scale-dean", action="store_true", help="use the scaled structure in the Dean model")
    sp.add_argument("--threads", type=int, help=f"0 = all cores; default ${THREADS_ENV} or 1")
    sp.add_argument("-o", "--out", default="fit", help="output prefix")
    sp.set_defaults(func=cmd_fit)

    sp = sub.add_parser("simulate", help="simulate count datasets")
    graph_args(sp, required=False)
    sp.add_argument("--lattice", type=_lattice, help="use an RxC rook lattice, e.g. 10x10")
    sp.add_argument("--risk", choices=("constant", "iid", "structured"), default="structured")
    sp.add_argument("--sigma", type=float, default=0.5)
    sp.add_argument("--E", type=float, default=60.0)
    sp.add_argument("--mu", type=float, default=0.0)
    sp.add_argument("--replicates", type=int, default=1)
    sp.add_argument("--seed", type=int, default=1)
    sp.add_argument("-o", "--out", default="sim", help="output prefix")
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("study", help="run the replicated simulation study")
    graph_args(sp, required=False)
    sp.add_argument("--config", help="study configuration JSON")
    sp.add_argument("--lattice", type=_lattice)
    sp.add_argument("--replicates", type=int)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--models", help=f"comma list, default {','.join(DEFAULT_MODELS)}")
    sp.add_argument("--E-levels", type=lambda t: [float(v) for v in t.split(",")])
    sp.add_argument("--threads", type=int)
    sp.add_argument("-o", "--out", default="study", help="output prefix")
    sp.set_defaults(func=cmd_study)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"bym2: error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (GraphFormatError, DataFormatError) as exc:
        print(f"bym2: input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except OSError as exc:
        print(f"bym2: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (NotPositiveDefinite, NonConvergence, np.linalg.LinAlgError, FloatingPointError) as exc:
        print(f"bym2: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
