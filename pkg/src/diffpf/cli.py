"""Command-line entry point: ``diffpf {pf,gen,train,eval,sweep}``.

Standard output carries one machine-readable JSON summary per run; the
resolved configuration and progress go to standard error. Exit codes: 0 on
success, 1 on usage errors, 2 on runtime errors.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import time

import numpy as np

from . import caseio
from .datagen import ScenarioConfig, generate_dataset, split_dataset
from .errors import DiffPFError
from .estimator import (
    LossSpec,
    TrainConfig,
    loss,
    perturb_params,
    reconstruction_error,
    train,
    validation_error,
)
from .network import admittance_matrix
from .powerflow import compute_injections, max_mismatch, nr_converge, nr_solve

log = logging.getLogger("diffpf")

SCHEMAS = """file schemas:
  case      MATPOWER subset: mpc.baseMVA, mpc.bus, mpc.gen, mpc.branch
  dataset   JSON header line {case, n_samples, seed, split_rule, ...} then CSV
            sample,split,g{b}_v,g{b}_theta,g{b}_p,g{b}_q,...,l{b}_p,l{b}_q,...,h{b}_v,h{b}_theta
  params    JSON {format: diffpf.params, lines, gamma, beta, shunt_g, shunt_b, trainable}
  metrics   CSV epoch,loss,are,valid_err,elapsed_s
"""


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _positive_int(text):
    try:
        val = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if val < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {val}")
    return val


def _positive_float(text):
    try:
        val = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a number, got {text!r}") from None
    if not val > 0:
        raise argparse.ArgumentTypeError(f"must be > 0, got {val}")
    return val


def _nonneg_float(text):
    val = float(text)
    if val < 0:
        raise argparse.ArgumentTypeError(f"must be >= 0, got {val}")
    return val


def _n_list(text):
    try:
        vals = [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad n list {text!r}") from None
    if not vals or min(vals) < 1:
        raise argparse.ArgumentTypeError("n values must be positive integers")
    return vals


def _init_spec(text):
    kind, _, arg = text.partition(":")
    if kind == "perturb":
        try:
            return ("perturb", float(arg))
        except ValueError:
            pass
    elif kind == "file" and arg:
        return ("file", arg)
    raise argparse.ArgumentTypeError("--init must be perturb:SIGMA or file:PATH")


def _add_train_flags(p):
    p.add_argument("--case", required=True, help="case file path or bundled name")
    p.add_argument("--data", required=True, help="dataset file (see schemas below)")
    p.add_argument("--lr", type=_positive_float, default=1e-4, help="Adam learning rate (default 1e-4)")
    p.add_argument("--epochs", type=_positive_int, default=80000, help="epoch budget (default 80000)")
    p.add_argument("--batch", type=_positive_int, default=8, help="mini-batch size (default 8)")
    p.add_argument("--seed", type=int, default=0, help="run seed for init and shuffling (default 0)")
    p.add_argument("--init", type=_init_spec, default=("perturb", 0.2),
                   help="perturb:SIGMA (lognormal around the case values) or file:PATH (default perturb:0.2)")
    p.add_argument("--ref-params", default=None,
                   help="reference parameters for ARE: a params file or 'case' for the case values")
    p.add_argument("--loss", default="default",
                   help="loss terms: 'default' (theta_g,q_g,p_g), 'literal' (v_g,theta_g,p_g) or a comma list")
    p.add_argument("--eval-every", type=_positive_int, default=1000,
                   help="validation-error cadence in epochs (default 1000)")
    p.add_argument("--stop-on-are-rise", action="store_true",
                   help="stop when ARE rises over a 1000-epoch window while the loss falls")
    p.add_argument("--no-elapsed", action="store_true",
                   help="leave elapsed_s empty so metrics files are byte-reproducible")
    p.add_argument("--log-every", type=_positive_int, default=1000,
                   help="progress line cadence on stderr (default 1000)")


def build_parser():
    parser = _Parser(prog="diffpf", description=__doc__.splitlines()[0],
                     formatter_class=argparse.RawDescriptionHelpFormatter, epilog=SCHEMAS)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    fmt = argparse.ArgumentDefaultsHelpFormatter

    p = sub.add_parser("pf", help="solve the base-case power flow", epilog=SCHEMAS,
                       formatter_class=fmt)
    p.add_argument("--case", required=True, help="case file path or bundled name")
    mode = p.add_mutually_exclusive_group()
    mode.add_argument("--n", type=_positive_int, help="run exactly N Newton steps")
    mode.add_argument("--tol", type=_positive_float, help="iterate to this mismatch tolerance")
    p.add_argument("--max-iter", type=_positive_int, default=50, help="iteration cap with --tol")
    p.add_argument("--out", required=True, help="output CSV: id,index,kind,v,theta,p,q")

    p = sub.add_parser("gen", help="generate a synthetic dataset", epilog=SCHEMAS,
                       formatter_class=fmt)
    p.add_argument("--case", required=True, help="case file path or bundled name")
    p.add_argument("--samples", type=_positive_int, default=2000, help="number of samples")
    p.add_argument("--seed", type=int, default=0, help="scenario seed")
    p.add_argument("--spread", type=_nonneg_float, default=0.2,
                   help="multiplicative half-width of load factors")
    p.add_argument("--q-spread", type=_nonneg_float, default=None,
                   help="half-width for reactive load factors (default: --spread)")
    p.add_argument("--vg-spread", type=_nonneg_float, default=0.02,
                   help="additive half-width on generator voltage set-points (pu)")
    p.add_argument("--tol", type=_positive_float, default=1e-10, help="solve tolerance")
    p.add_argument("--split-k", type=_positive_int, default=50,
                   help="every k-th sample goes to the training split")
    p.add_argument("--out", required=True, help="dataset file to write")

    p = sub.add_parser("train", help="fit line admittances", epilog=SCHEMAS,
                       formatter_class=fmt)
    _add_train_flags(p)
    p.add_argument("--nr-steps", type=_positive_int, default=3, help="unrolled Newton steps")
    p.add_argument("--out-params", required=True, help="trained parameter file")
    p.add_argument("--out-metrics", required=True, help="metrics CSV (overwritten)")

    p = sub.add_parser("eval", help="evaluate parameters on a dataset", epilog=SCHEMAS,
                       formatter_class=fmt)
    p.add_argument("--case", required=True, help="case file path or bundled name")
    p.add_argument("--data", required=True, help="dataset file")
    p.add_argument("--params", required=True, help="parameter file to evaluate ('case' for case values)")
    p.add_argument("--nr-steps", type=_positive_int, default=3, help="unrolled Newton steps")
    p.add_argument("--ref-params", default=None, help="reference parameters ('case' allowed)")
    p.add_argument("--init-params", default=None, help="initial parameters normalizing ARE")
    p.add_argument("--loss", default="default", help="loss terms, as for train")
    p.add_argument("--split", choices=("all", "train", "valid"), default="valid",
                   help="samples used for the validation error")
    p.add_argument("--residuals-out", default=None, help="optional per-bus residual CSV")

    p = sub.add_parser("sweep", help="train once per unroll depth and tabulate the results", epilog=SCHEMAS,
                       formatter_class=fmt)
    _add_train_flags(p)
    p.add_argument("--n-list", type=_n_list, default=[1, 2, 3, 4, 6, 8],
                   help="comma-separated unroll depths")
    p.add_argument("--out", required=True, help="output directory")
    return parser


def _resolve_params(spec, case, topology):
    if spec == "case":
        return case.params
    return caseio.read_params(spec, topology)


def _train_config(args, n):
    return TrainConfig(
        lr=args.lr, epochs=args.epochs, batch_size=args.batch, seed=args.seed, n=n,
        eval_every=args.eval_every, terms=LossSpec.parse(args.loss).terms,
        record_elapsed=not args.no_elapsed, stop_on_are_rise=args.stop_on_are_rise,
    )


def _init_params(args, case):
    kind, arg = args.init
    if kind == "perturb":
        return perturb_params(case.params, arg, args.seed)
    return caseio.read_params(arg, case.topology)


def _progress(log_every):
    def cb(rec, params):
        if rec.epoch % log_every == 0:
            parts = [f"epoch {rec.epoch}", f"loss {rec.loss:.4e}"]
            if rec.are is not None:
                parts.append(f"ARE {rec.are:.4f}")
            if rec.valid_err is not None:
                parts.append(f"E {rec.valid_err:.4e}")
            print("  ".join(parts), file=sys.stderr)
    return cb


def _emit(summary):
    print(json.dumps(summary))


def _echo_config(args):
    cfg = {k: v for k, v in vars(args).items()}
    print("config: " + json.dumps(cfg, default=str, sort_keys=True), file=sys.stderr)


def cmd_pf(args):
    case = caseio.load_case(args.case)
    topo = case.topology
    inputs = case.base.inputs(topo)
    if args.n is not None:
        out = nr_solve(inputs, case.params, topo, args.n)
        iterations = args.n
    else:
        out, iterations = nr_converge(inputs, case.params, topo, args.tol or 1e-10, args.max_iter)
    state = out.state()
    p, q = compute_injections(state, case.params, topo)
    residual = float(max_mismatch(inputs, case.params, topo, state)[0])
    with open(args.out, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("id,index,kind,v,theta,p,q\n")
        for i in range(topo.n_bus):
            fh.write(",".join([
                str(topo.labels[i]), str(i), topo.kinds[i].value,
                caseio._fmt(state.v[i, 0]), caseio._fmt(state.theta[i, 0]),
                caseio._fmt(p[i, 0]), caseio._fmt(q[i, 0]),
            ]) + "\n")
    _emit({"command": "pf", "case": case.name, "iterations": iterations, "residual": residual})


def cmd_gen(args):
    case = caseio.load_case(args.case)
    config = ScenarioConfig(
        n_samples=args.samples, load_spread=args.spread, q_spread=args.q_spread,
        vg_spread=args.vg_spread, seed=args.seed, tol=args.tol,
    )
    ds = generate_dataset(case, config)
    ds = split_dataset(ds, ("every_kth", args.split_k))
    caseio.write_dataset(args.out, ds)
    _emit({"command": "gen", "case": case.name, "n_samples": ds.n_samples,
           "n_train": ds.header["n_train"], "n_valid": ds.header["n_valid"],
           "resampled": ds.header["resampled"]})


def _run_training(args, case, ds, n, metrics_path):
    topo = case.topology
    init = _init_params(args, case)
    ref = _resolve_params(args.ref_params, case, topo) if args.ref_params else None
    config = _train_config(args, n)
    if os.path.exists(metrics_path):
        os.remove(metrics_path)
    t0 = time.perf_counter()
    params, history = train(ds, topo, init, config, ref_params=ref,
                            metrics_path=metrics_path, on_epoch=_progress(args.log_every))
    return params, history, time.perf_counter() - t0


def cmd_train(args):
    case = caseio.load_case(args.case)
    ds = caseio.read_dataset(args.data, case.topology)
    params, history, duration = _run_training(args, case, ds, args.nr_steps, args.out_metrics)
    caseio.write_params(args.out_params, params, case.topology)
    last = history[-1]
    _emit({"command": "train", "epochs": len(history), "final_loss": last.loss,
           "final_are": last.are, "final_valid_err": last.valid_err, "duration_s": duration})


def cmd_eval(args):
    case = caseio.load_case(args.case)
    topo = case.topology
    ds = caseio.read_dataset(args.data, topo)
    params = _resolve_params(args.params, case, topo)
    spec = LossSpec.parse(args.loss, args.nr_steps)
    train_idx = ds.indices("train")
    loss_set = ds.subset(train_idx) if train_idx.size else ds
    summary = {"command": "eval", "n": args.nr_steps,
               "loss": loss(params, loss_set, args.nr_steps, spec, topo)}
    if args.split == "all":
        eval_set = ds
    else:
        idx = ds.indices(args.split)
        eval_set = ds.subset(idx) if idx.size else ds
    summary["valid_err"] = validation_error(params, eval_set, args.nr_steps, topo)
    if args.ref_params:
        ref = _resolve_params(args.ref_params, case, topo)
        init = _resolve_params(args.init_params, case, topo) if args.init_params else None
        if init is not None:
            summary["are"] = reconstruction_error(params, ref, init, topo)
        inc = topo.incidence
        summary["frobenius"] = float(np.linalg.norm(
            admittance_matrix(params, inc) - admittance_matrix(ref, inc)))
    if args.residuals_out:
        _write_residuals(args.residuals_out, params, eval_set, args.nr_steps, topo)
    _emit(summary)


def _write_residuals(path, params, ds, n, topo):
    """Root-mean-square prediction error per bus over the evaluated samples."""
    out = nr_solve(ds.inputs(topo), params, topo, n)
    gen, load = topo.gen_idx, topo.load_idx
    rows = []
    for k, i in enumerate(gen):
        rows.append((i, "theta", out.theta[i] - ds.gen_theta[k]))
        rows.append((i, "q", out.q_g[k] - ds.gen_q[k]))
    if ds.has_ground_truth:
        for k, i in enumerate(load):
            rows.append((i, "theta", out.theta[i] - ds.hidden_theta[k]))
            rows.append((i, "v", out.v[i] - ds.hidden_v[k]))
    rows.sort(key=lambda r: (r[0], r[1]))
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("id,index,kind,quantity,rms\n")
        for i, qty, d in rows:
            rms = float(np.sqrt(np.mean(d * d)))
            fh.write(f"{topo.labels[i]},{i},{topo.kinds[i].value},{qty},{caseio._fmt(rms)}\n")


def cmd_sweep(args):
    case = caseio.load_case(args.case)
    ds = caseio.read_dataset(args.data, case.topology)
    os.makedirs(args.out, exist_ok=True)
    results = []
    for n in args.n_list:
        print(f"sweep: n={n}", file=sys.stderr)
        metrics_path = os.path.join(args.out, f"metrics_n{n}.csv")
        try:
            params, history, duration = _run_training(args, case, ds, n, metrics_path)
        except DiffPFError as exc:
            print(f"sweep: n={n} failed: {exc}", file=sys.stderr)
            results.append({"n": n, "status": f"failed: {type(exc).__name__}"})
            continue
        caseio.write_params(os.path.join(args.out, f"params_n{n}.json"), params, case.topology)
        last = history[-1]
        results.append({"n": n, "status": "ok", "final_loss": last.loss,
                        "final_valid_err": last.valid_err, "final_are": last.are,
                        "duration_s": duration})
    base = next((r["duration_s"] for r in results if r["n"] == 1 and r["status"] == "ok"), None)
    for r in results:
        if base and r["status"] == "ok":
            r["duration_ratio"] = r["duration_s"] / base
    write_summary(os.path.join(args.out, "summary.csv"), results)
    _emit({"command": "sweep", "runs": results})


SUMMARY_COLUMNS = ("n", "final_loss", "final_valid_err", "final_are", "duration_s",
                   "duration_ratio", "status")


def write_summary(path, results):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(SUMMARY_COLUMNS)
        for r in results:
            row = []
            for col in SUMMARY_COLUMNS:
                val = r.get(col)
                if val is None:
                    row.append("")
                elif col == "duration_ratio":
                    row.append(f"{val:.2f}")
                elif isinstance(val, float):
                    row.append(caseio._fmt(val))
                else:
                    row.append(str(val))
            writer.writerow(row)


COMMANDS = {"pf": cmd_pf, "gen": cmd_gen, "train": cmd_train, "eval": cmd_eval,
            "sweep": cmd_sweep}


def main(argv=None):
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s: %(message)s",
                        stream=sys.stderr)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"diffpf: error: {exc}", file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return 0 if not exc.code else 1
    _echo_config(args)
    try:
        COMMANDS[args.command](args)
    except (DiffPFError, OSError, ValueError) as exc:
        print(f"diffpf: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
