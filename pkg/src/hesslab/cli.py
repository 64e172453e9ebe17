"""``hesslab`` command-line front end.

Every subcommand takes ``--seed``, ``--out-dir`` and ``--config`` (a JSON
object whose keys are option names; flags given on the command line win).
Each run writes its tables as CSV, scalar summaries as JSON, and a
``manifest.json`` listing the resolved configuration and every output file.

Exit codes: 0 success, 1 numerical failure or divergence, 2 usage error.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__, autolr, lanczos, nn, rmt, scaling
from ._random import spawn

log = logging.getLogger("hesslab")

EXIT_OK, EXIT_NUMERIC, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _workers() -> int:
    try:
        return max(1, int(os.environ.get("HESSLAB_THREADS", "1")))
    except ValueError:
        return 1


def _parse_float(text) -> float:
    if isinstance(text, (int, float)):
        return float(text)
    if str(text).lower() in ("inf", "infinity"):
        return math.inf
    return float(text)


def _float_list(text) -> list[float]:
    if isinstance(text, (list, tuple)):
        return [float(x) for x in text]
    return [float(x) for x in str(text).split(",") if x.strip()]


def _int_list(text) -> list[int]:
    if isinstance(text, (list, tuple)):
        return [int(x) for x in text]
    return [int(x) for x in str(text).split(",") if x.strip()]


def _jsonable(x):
    if isinstance(x, float) and not math.isfinite(x):
        return "inf" if x > 0 else ("-inf" if x < 0 else "nan")
    if isinstance(x, dict):
        return {k: _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.generic):
        return _jsonable(x.item())
    return x


class Outputs:
    """Collects files written by one command so the manifest can list them."""

    def __init__(self, out_dir: Path):
        self.dir = out_dir
        self.dir.mkdir(parents=True, exist_ok=True)
        self.files: list[str] = []

    def text(self, name: str, content: str) -> Path:
        path = self.dir / name
        path.write_text(content, newline="")
        self.files.append(name)
        return path

    def json(self, name: str, obj) -> Path:
        return self.text(name, json.dumps(_jsonable(obj), indent=2, sort_keys=True) + "\n")

    def table(self, name: str, header, rows) -> Path:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])
        return self.text(name, buf.getvalue())

    def binary(self, name: str, writer) -> Path:
        path = self.dir / name
        writer(path)
        self.files.append(name)
        return path


# --------------------------------------------------------------------------
# Shared model / dataset options
# --------------------------------------------------------------------------


def _add_model_args(p: argparse.ArgumentParser):
    g = p.add_argument_group("model and data")
    g.add_argument("--spec", help="model spec JSON file")
    g.add_argument("--widths", help="layer widths, e.g. 10,16,3 (overrides the data-derived default)")
    g.add_argument("--loss", choices=[l.value for l in nn.Loss], default="softmax_ce")
    g.add_argument("--params", help="parameter file (HESSLAB1 binary); default: fresh init")
    g.add_argument("--init-scale", type=float, default=1.0)
    g.add_argument("--data", help="dataset CSV (x_0..x_{d-1},label); default: Gaussian mixture")
    g.add_argument("--classes", type=int, default=3)
    g.add_argument("--dim", type=int, default=10)
    g.add_argument("--n-per-class", type=int, default=200)
    g.add_argument("--separation", type=float, default=3.0)
    g.add_argument("--hidden", type=int, default=16, help="hidden width when --widths/--spec are absent")


def _load_model_and_data(args, ss_data, ss_init):
    if args.data:
        data = nn.Dataset.from_csv(Path(args.data).read_text())
    else:
        data = nn.gaussian_mixture(args.classes, args.dim, args.n_per_class, args.separation, seed=ss_data)
    if args.spec:
        spec = nn.MlpSpec.from_json(Path(args.spec).read_text())
    elif args.widths:
        spec = nn.MlpSpec(tuple(_int_list(args.widths)), nn.Loss(args.loss))
    else:
        k = int(data.labels.max()) + 1
        spec = nn.MlpSpec((data.d_x, args.hidden, k), nn.Loss(args.loss))
    if spec.d_x != data.d_x:
        raise UsageError(f"model input width {spec.d_x} does not match data dimension {data.d_x}")
    params = nn.load_params(args.params) if args.params else nn.init_params(spec, ss_init, args.init_scale)
    if params.size != spec.P:
        raise UsageError(f"parameter file has {params.size} entries, model needs {spec.P}")
    return spec, data, params


def _seeds(args, n):
    return spawn(args.seed, n)


# --------------------------------------------------------------------------
# Commands
# --------------------------------------------------------------------------


def _noise_scale(args) -> rmt.NoiseScale:
    if args.s2 is None:
        raise UsageError("--s2 is required")
    if args.q is not None:
        return rmt.NoiseScale.from_q(float(args.q), float(args.s2))
    if args.P is None or args.B is None:
        raise UsageError("give either --q or both --P and --B (and optionally --N)")
    return rmt.NoiseScale(int(args.P), int(args.B), _parse_float(args.N), float(args.s2))


def cmd_predict_spike(args, out: Outputs) -> int:
    if args.lambda1 is None:
        raise UsageError("--lambda1 is required")
    ns = _noise_scale(args)
    lam = float(args.lambda1)
    if args.law == "wigner":
        pred = rmt.wigner_spike(lam, ns, args.tail)
        result = {"law": "wigner", **pred.as_dict()}
    else:
        routes = rmt.mp_spike_routes(lam, ns)
        pred = routes[args.route]
        result = {"law": "mp", "route": args.route, **pred.as_dict()}
        result["other_routes"] = {r: p.as_dict() for r, p in routes.items() if r != args.route}
    result.update(lambda1=lam, q=ns.q, s2=ns.s2)
    out.json("predict_spike.json", result)
    print(json.dumps(_jsonable(result), sort_keys=True))
    return EXIT_OK


def _rmt_cell(law, lam, q, sigma, P, trials, ss, route):
    """Monte-Carlo trials for one (lambda1, q) cell; returns a result row."""
    ns = rmt.NoiseScale.from_q(q, sigma**2)
    tops, overlaps = [], []
    for t_ss in ss.spawn(trials):
        s_mat, s_eig = t_ss.spawn(2)
        if law == "wigner":
            a, u = rmt.sample_spiked_goe(P, math.sqrt(q) * sigma, [lam], seed=s_mat, return_vectors=True)
        else:
            a, u = rmt.sample_spiked_wishart(P, max(1, round(P / q)), sigma, [lam], seed=s_mat, return_vectors=True)
        top, vec = rmt.top_eigenpair(a, s_eig)
        tops.append(top)
        overlaps.append(float(u[:, 0] @ vec) ** 2)
    pred = rmt.wigner_spike(lam, ns) if law == "wigner" else rmt.mp_spike(lam, ns, route)
    tops = np.array(tops)
    mean = float(tops.mean())
    return {
        "law": law,
        "lambda1": lam,
        "q": q,
        "trials": trials,
        "regime": pred.regime.value,
        "predicted": pred.lambda_prime,
        "measured_mean": mean,
        "measured_std": float(tops.std(ddof=1)) if trials > 1 else 0.0,
        "rel_err": abs(mean - pred.lambda_prime) / abs(pred.lambda_prime),
        "overlap_predicted": pred.overlap_sq,
        "overlap_measured": float(np.mean(overlaps)),
    }


def cmd_validate_rmt(args, out: Outputs) -> int:
    lams = _float_list(args.lambda1s)
    qs = _float_list(args.qs)
    laws = ["wigner", "mp"] if args.law == "both" else [args.law]
    cells = [(law, lam, q) for law in laws for lam in lams for q in qs]
    seeds = _seeds(args, len(cells))
    jobs = [(law, lam, q, args.sigma, args.p, args.trials, ss, args.route) for (law, lam, q), ss in zip(cells, seeds)]
    if _workers() > 1:
        with ThreadPoolExecutor(max_workers=_workers()) as pool:
            rows = list(pool.map(lambda j: _rmt_cell(*j), jobs))
    else:
        rows = [_rmt_cell(*j) for j in jobs]
    for r in rows:
        r["pass"] = r["rel_err"] <= args.tol
    header = list(rows[0].keys())
    out.table("validate_rmt.csv", header, [[r[k] for k in header] for r in rows])
    separated = [r for r in rows if r["regime"] == "separated"]
    summary = {
        "cells": len(rows),
        "tolerance": args.tol,
        "passed": sum(r["pass"] for r in rows),
        "separated_cells": len(separated),
        "separated_passed": sum(r["pass"] for r in separated),
        "all_pass": all(r["pass"] for r in rows),
    }
    out.json("validate_rmt_summary.json", summary)
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


def cmd_spectrum(args, out: Outputs) -> int:
    ss_data, ss_init, ss_batch, ss_slq = _seeds(args, 4)
    spec, data, params = _load_model_and_data(args, ss_data, ss_init)
    target = data
    if args.batch_size:
        target = nn.sample_batch(data, args.batch_size, np.random.default_rng(ss_batch))
    op = nn.hessian_operator(params, spec, target, args.kind)
    m = min(args.m, spec.P)
    density = lanczos.slq_density(op, m, args.n_vectors, seed=ss_slq, probe=args.probe)
    out.text("spectrum.csv", density.to_csv())
    if args.dump_dense:
        dense = nn.dense_curvature(params, spec, target, args.kind)
        out.table("dense_curvature.csv", [f"c{j}" for j in range(spec.P)], dense.tolist())
    summary = {
        "P": spec.P,
        "N": target.N,
        "kind": args.kind,
        "m": m,
        "n_vectors": args.n_vectors,
        "top": float(density.nodes[-1]),
        "bottom": float(density.nodes[0]),
        "trace_estimate": spec.P * density.moment(1),
    }
    out.json("spectrum_summary.json", summary)
    print(json.dumps(_jsonable(summary), sort_keys=True))
    return EXIT_OK


def cmd_variance(args, out: Outputs) -> int:
    ss_data, ss_init, ss_vec = _seeds(args, 3)
    spec, data, params = _load_model_and_data(args, ss_data, ss_init)
    rows = []
    for i, ss in enumerate(ss_vec.spawn(args.n_vectors)):
        v = lanczos.random_unit_vector(spec.P, ss)
        norm = lanczos.hessian_variance(nn.per_sample_operators(params, spec, data, args.kind), v, normalize=True)
        raw = lanczos.hessian_variance(nn.per_sample_operators(params, spec, data, args.kind), v, normalize=False)
        rows.append((i, norm, raw))
    out.table("variance.csv", ["vector", "normalized", "unnormalized"], rows)
    mean_norm = float(np.mean([r[1] for r in rows]))
    result = {
        "P": spec.P,
        "N": data.N,
        "kind": args.kind,
        "n_vectors": args.n_vectors,
        "normalized": mean_norm,
        "unnormalized": float(np.mean([r[2] for r in rows])),
        "s2": lanczos.per_element_variance(mean_norm, spec.P),
    }
    out.json("variance.json", result)
    print(json.dumps(_jsonable(result), sort_keys=True))
    return EXIT_OK


def cmd_scale_lr(args, out: Outputs) -> int:
    batches = _int_list(args.batch_sizes)
    rule = None
    if args.rule:
        if args.base_lr is None or args.base_batch is None:
            raise UsageError("--rule needs --base-lr and --base-batch")
        rule = scaling.ScalingRule(args.rule, args.base_lr, args.base_batch, args.threshold_b)

    reports = {}
    if args.lambda1 is not None:
        if args.s2 is None or args.P is None:
            raise UsageError("explicit curvature mode needs --lambda1, --s2 and --P")
        lam1, s2, P, N = float(args.lambda1), float(args.s2), int(args.P), _parse_float(args.N)
    else:
        ss_data, ss_init, ss_full, ss_var, ss_meas = _seeds(args, 5)
        spec, data, params = _load_model_and_data(args, ss_data, ss_init)
        lam1, _ = lanczos.extremal_eigenvalues(nn.hessian_operator(params, spec, data, args.kind), min(args.m, spec.P), seed=ss_full)
        s2 = scaling.estimate_s2(params, spec, data, args.kind, seed=ss_var, n_vectors=args.s2_vectors)
        P, N = spec.P, data.N
        if args.measure:
            for B, ss in zip(batches, ss_meas.spawn(len(batches))):
                reports[B] = scaling.curvature_report(params, spec, data, B, args.n_batches, args.m, args.kind, args.law, seed=ss, s2_vectors=args.s2_vectors)

    header = ["B", "b_eff", "lambda_batch_predicted", "max_lr_sgd"]
    if rule:
        header.append("rule_lr")
    if reports:
        header += ["lambda_batch_measured_mean", "lambda_batch_measured_std"]
    rows = []
    for B in batches:
        pred = scaling.predict_batch_lambda(lam1, s2, P, B, N, args.law)
        row = [B, rmt.effective_batch(B, N), pred.lambda_prime, scaling.max_lr_sgd(pred.lambda_prime)]
        if rule:
            row.append(scaling.scale_lr(rule, B))
        if reports:
            row += [reports[B].lambda1_batch_measured_mean, reports[B].lambda1_batch_measured_std]
        rows.append(row)
    out.table("scale_lr.csv", header, rows)
    b_star, B_star = scaling.threshold_batch(lam1, s2, P, N)
    summary = {"lambda1_full": lam1, "s2": s2, "P": P, "N": N, "law": args.law, "b_star": b_star, "B_star": B_star}
    if reports:
        summary["reports"] = {str(B): json.loads(r.to_json()) for B, r in reports.items()}
    out.json("scale_lr.json", summary)
    print(json.dumps(_jsonable(summary), sort_keys=True))
    return EXIT_OK


def cmd_rank_bound(args, out: Outputs) -> int:
    if None in (args.d_x, args.d_y, args.P):
        raise UsageError("--d-x, --d-y and --P are required")
    hidden = _int_list(args.hidden) if args.hidden else []
    arch = rmt.FfnArch(int(args.d_x), int(args.d_y), tuple(hidden), int(float(args.P)))
    bound, floor = rmt.rank_bound_ffn(arch)
    result = {"d_x": arch.d_x, "d_y": arch.d_y, "sum_hidden": sum(hidden), "P": arch.P, "rank_bound": bound, "degeneracy_floor": floor}
    out.json("rank_bound.json", result)
    print(json.dumps(result, sort_keys=True))
    return EXIT_OK


def _add_train_args(p: argparse.ArgumentParser):
    _add_model_args(p)
    g = p.add_argument_group("training")
    g.add_argument("--val-fraction", type=float, default=0.2)
    g.add_argument("--val-data", help="validation CSV; overrides --val-fraction")
    g.add_argument("--optimizer", choices=["sgd", "adam"], default="sgd")
    g.add_argument("--lr", type=float, default=0.05)
    g.add_argument("--momentum", type=float, default=0.0)
    g.add_argument("--adam-delta", type=float, default=1e-8)
    g.add_argument("--weight-decay", type=float, default=0.0)
    g.add_argument("--schedule", choices=["constant", "flat_linear"], default="constant")
    g.add_argument("--schedule-r", type=float, default=0.01)
    g.add_argument("--autolr", choices=["polyak", "nesterov"])
    g.add_argument("--probe-period", type=int, default=20)
    g.add_argument("--probe-m", type=int, default=20)
    g.add_argument("--mass-threshold", type=float, default=0.5)
    g.add_argument("--psd-floor", type=float, default=1e-6)
    g.add_argument("--probe-kind", choices=["hessian", "ggn"], default="hessian")
    g.add_argument("--nesterov-lr-normalized", action="store_true")
    g.add_argument("--polyak-lr-verbatim", action="store_true", help="use the unsquared Polyak step 2/(sqrt(top)+sqrt(bottom))")
    g.add_argument("--batch-size", type=int, default=32)
    g.add_argument("--epochs", type=int, default=20)
    g.add_argument("--swa-start", type=int)


def _run_config(args) -> autolr.RunConfig:
    ss_data, ss_init, ss_split, ss_run = _seeds(args, 4)
    spec, data, params = _load_model_and_data(args, ss_data, ss_init)
    if args.val_data:
        train, val = data, nn.Dataset.from_csv(Path(args.val_data).read_text())
    elif args.val_fraction > 0:
        perm = np.random.default_rng(ss_split).permutation(data.N)
        n_val = int(round(args.val_fraction * data.N))
        train, val = data.subset(perm[n_val:]), data.subset(perm[:n_val])
    else:
        train, val = data, None
    auto = None
    if args.autolr:
        auto = autolr.AutoLrConfig(
            mode=args.autolr,
            probe_period_epochs=args.probe_period,
            m=args.probe_m,
            mass_threshold=args.mass_threshold,
            psd_floor=args.psd_floor,
            kind=args.probe_kind,
            nesterov_lr_normalized=args.nesterov_lr_normalized,
            polyak_lr_verbatim=args.polyak_lr_verbatim,
        )
    return autolr.RunConfig(
        spec=spec,
        train=train,
        val=val,
        optimizer=args.optimizer,
        lr=args.lr,
        momentum=args.momentum,
        adam_delta=args.adam_delta,
        weight_decay=args.weight_decay,
        schedule=args.schedule,
        schedule_r=args.schedule_r,
        autolr=auto,
        batch_size=min(args.batch_size, train.N),
        epochs=args.epochs,
        swa_start=args.swa_start,
        init_params=params,
        seed=int(ss_run.generate_state(1)[0]),
    )


def cmd_train(args, out: Outputs) -> int:
    cfg = _run_config(args)
    hist = autolr.train(cfg)
    out.text("history.csv", hist.to_csv())
    if hist.probes:
        keys = ["epoch", "accepted", "top", "bottom", "alpha", "rho"]
        out.table("probes.csv", keys, [[p.get(k, "") for k in keys] for p in hist.probes])
    if isinstance(hist.state, autolr.Adam):
        eta = autolr.inspect_adam_eta(hist.state)
        pos = eta[eta > 0]
        if pos.size:
            counts, edges = np.histogram(np.log10(pos), bins=30)
            out.table("adam_eta_hist.csv", ["log10_eta_lo", "log10_eta_hi", "count"], zip(edges[:-1], edges[1:], counts))
    if not hist.diverged:
        out.binary("params.bin", lambda p: nn.save_params(p, hist.params))
    summary = {
        "outcome": hist.outcome,
        "diverged_epoch": hist.diverged_epoch,
        "final_train_loss": hist.rows[-1]["train_loss"] if hist.rows else None,
        "final_val_err": hist.final_val_err,
        "swa_val_err": hist.swa_val_err,
        "run": cfg.manifest(),
    }
    out.json("train_summary.json", summary)
    print(json.dumps(_jsonable({k: v for k, v in summary.items() if k != "run"}), sort_keys=True))
    return EXIT_NUMERIC if hist.diverged else EXIT_OK


def cmd_lr_grid(args, out: Outputs) -> int:
    cfg = _run_config(args)
    grid = autolr.log_grid(args.lr_min, args.lr_max, args.n_lr)
    try:
        result = autolr.lr_grid_search(cfg, grid, workers=_workers())
        outcomes, best = result.outcomes, result.best_alpha
    except autolr.GridSearchError as exc:
        outcomes, best = exc.outcomes, None
    keys = ["alpha", "outcome", "diverged_epoch", "final_val_err"]
    out.table("lr_grid.csv", keys, [[o[k] if o[k] is not None else "" for k in keys] for o in outcomes])
    summary = {"best_alpha": best, "grid": list(map(float, grid)), "run": cfg.manifest()}
    out.json("lr_grid.json", summary)
    print(json.dumps(_jsonable({"best_alpha": best}), sort_keys=True))
    if best is None:
        print("error: every learning rate on the grid diverged", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


# --------------------------------------------------------------------------
# Parser
# --------------------------------------------------------------------------


COMMANDS = {
    "predict-spike": cmd_predict_spike,
    "validate-rmt": cmd_validate_rmt,
    "spectrum": cmd_spectrum,
    "variance": cmd_variance,
    "scale-lr": cmd_scale_lr,
    "rank-bound": cmd_rank_bound,
    "train": cmd_train,
    "lr-grid": cmd_lr_grid,
}


def build_parser() -> tuple[argparse.ArgumentParser, dict[str, argparse.ArgumentParser]]:
    parser = argparse.ArgumentParser(prog="hesslab", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    subs = {}

    def add(name, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out-dir", default=".")
        p.add_argument("--config", help="JSON file of option defaults; flags override it")
        p.add_argument("-v", "--verbose", action="store_true")
        subs[name] = p
        return p

    p = add("predict-spike", "batch outlier predicted from a full-data outlier")
    p.add_argument("--law", choices=["wigner", "mp"], default="wigner")
    p.add_argument("--lambda1", type=float)
    p.add_argument("--s2", type=float)
    p.add_argument("--q", type=float, help="shape factor P/b_eff (alternative to --P/--B/--N)")
    p.add_argument("--P", type=int)
    p.add_argument("--B", type=int)
    p.add_argument("--N", default="inf")
    p.add_argument("--route", choices=list(rmt.MP_ROUTES), default=rmt.DEFAULT_MP_ROUTE)
    p.add_argument("--tail", choices=[t.value for t in rmt.Tail], default="top")

    p = add("validate-rmt", "Monte-Carlo check of the spike predictions")
    p.add_argument("--law", choices=["wigner", "mp", "both"], default="wigner")
    p.add_argument("--lambda1s", default="1.5,3,5")
    p.add_argument("--qs", default="0.25,0.5,1")
    p.add_argument("--sigma", type=float, default=1.0)
    p.add_argument("--p", type=int, default=1000)
    p.add_argument("--trials", type=int, default=5)
    p.add_argument("--tol", type=float, default=0.02)
    p.add_argument("--route", choices=list(rmt.MP_ROUTES), default=rmt.DEFAULT_MP_ROUTE)

    p = add("spectrum", "stochastic Lanczos quadrature of the Hessian or GGN")
    _add_model_args(p)
    p.add_argument("--kind", choices=["hessian", "ggn"], default="hessian")
    p.add_argument("--batch-size", type=int, help="use one random batch instead of the full data")
    p.add_argument("--m", type=int, default=50)
    p.add_argument("--n-vectors", type=int, default=1)
    p.add_argument("--probe", choices=["rademacher", "gaussian"], default="rademacher")
    p.add_argument("--dump-dense", action="store_true", help="also write the dense matrix (row-major CSV)")

    p = add("variance", "per-sample Hessian variance along random directions")
    _add_model_args(p)
    p.add_argument("--kind", choices=["hessian", "ggn"], default="hessian")
    p.add_argument("--n-vectors", type=int, default=1)

    p = add("scale-lr", "learning rate against batch size")
    _add_model_args(p)
    p.add_argument("--batch-sizes", default="8,16,32,64,128")
    p.add_argument("--law", choices=["wigner", "mp"], default="wigner")
    p.add_argument("--rule", choices=[r.value for r in scaling.RuleKind])
    p.add_argument("--base-lr", type=float)
    p.add_argument("--base-batch", type=int)
    p.add_argument("--threshold-b", type=float)
    p.add_argument("--lambda1", type=float, help="full-data top eigenvalue (skips the model)")
    p.add_argument("--s2", type=float)
    p.add_argument("--P", type=int)
    p.add_argument("--N", default="inf")
    p.add_argument("--kind", choices=["hessian", "ggn"], default="hessian")
    p.add_argument("--m", type=int, default=100)
    p.add_argument("--s2-vectors", type=int, default=1)
    p.add_argument("--measure", action="store_true", help="also measure batch top eigenvalues")
    p.add_argument("--n-batches", type=int, default=10)

    p = add("rank-bound", "Hessian rank bound of a feed-forward network")
    p.add_argument("--d-x", type=int)
    p.add_argument("--d-y", type=int)
    p.add_argument("--hidden", help="comma-separated hidden widths, or --sum-hidden")
    p.add_argument("--sum-hidden", type=int, help="total hidden neurons")
    p.add_argument("--P", type=float)

    p = add("train", "train a model and record its history")
    _add_train_args(p)

    p = add("lr-grid", "largest stable learning rate on a log grid")
    _add_train_args(p)
    p.add_argument("--lr-min", type=float, default=1e-3)
    p.add_argument("--lr-max", type=float, default=1.0)
    p.add_argument("--n-lr", type=int, default=7)

    return parser, subs


def _apply_config(parser, subs, argv):
    """Two-pass parse: the JSON config becomes subparser defaults, flags still win."""
    args = parser.parse_args(argv)
    if not args.config:
        return args
    try:
        config = json.loads(Path(args.config).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        parser.error(f"cannot read config {args.config}: {exc}")
    if not isinstance(config, dict):
        parser.error("config must be a JSON object")
    if isinstance(config.get("config"), dict) and "command" in config:
        # a manifest from an earlier run
        if config["command"] != args.command:
            parser.error(f"manifest is for {config['command']!r}, not {args.command!r}")
        config = {k: v for k, v in config["config"].items() if k != "config"}
    sp = subs[args.command]
    known = {a.dest for a in sp._actions}
    cleaned = {}
    for key, value in config.items():
        dest = key.lstrip("-").replace("-", "_")
        if dest not in known or dest in ("config", "help"):
            sp.error(f"unknown config key {key!r}")
        cleaned[dest] = value
    sp.set_defaults(**cleaned)
    return parser.parse_args(argv)


def main(argv=None) -> int:
    parser, subs = build_parser()
    args = _apply_config(parser, subs, argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    if args.command == "rank-bound" and args.sum_hidden is not None and not args.hidden:
        args.hidden = str(args.sum_hidden)
    out = Outputs(Path(args.out_dir))
    code = EXIT_OK
    outcome = "ok"
    try:
        with np.errstate(over="ignore", invalid="ignore"):
            code = COMMANDS[args.command](args, out)
        outcome = "ok" if code == EXIT_OK else "numeric_failure"
    except UsageError as exc:
        subs[args.command].print_usage(sys.stderr)
        print(f"hesslab {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FloatingPointError, ArithmeticError, np.linalg.LinAlgError, autolr.RitzFilterError) as exc:
        print(f"hesslab {args.command}: numerical failure: {exc}", file=sys.stderr)
        code, outcome = EXIT_NUMERIC, "numeric_failure"
    except ValueError as exc:
        subs[args.command].print_usage(sys.stderr)
        print(f"hesslab {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    config = {k: v for k, v in sorted(vars(args).items()) if k not in ("command", "verbose", "out_dir", "config")}
    out.json(
        "manifest.json",
        {
            "command": args.command,
            "config": config,
            "seed": args.seed,
            "version": __version__,
            "outputs": sorted(out.files) + ["manifest.json"],
            "outcome": outcome,
            "exit_code": code,
        },
    )
    return code


if __name__ == "__main__":
    sys.exit(main())
