"""Command-line entry point: ``trail {simulate,schedule,hsmm-fit,report}``.

Exit codes: 0 success, 2 configuration or input error, 3 runtime failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import math
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from trail._io import atomic_write_csv, atomic_write_text
from trail.errors import FormatError, InvalidInputError, NumericalDegeneracyError, NumericalDivergenceError

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3


def _read_csv(path, required):
    """Rows as dicts; FormatError names the offending line."""
    try:
        fh = open(path, newline="")
    except OSError as exc:
        raise InvalidInputError(f"cannot open {path}: {exc.strerror}") from None
    with fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise FormatError(f"{path}: empty file (line 1)")
        header = [h.strip() for h in header]
        missing = [c for c in required if c not in header]
        if missing:
            raise FormatError(f"{path}: line 1: missing columns {missing}")
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise FormatError(f"{path}: line {lineno}: expected {len(header)} fields, got {len(row)}")
            rows.append((lineno, dict(zip(header, (c.strip() for c in row)))))
    return header, rows


def _num(value, path, lineno, kind=float):
    try:
        x = kind(value)
    except ValueError:
        raise FormatError(f"{path}: line {lineno}: not a number: {value!r}") from None
    if kind is float and not math.isfinite(x) and x != float("-inf"):
        raise FormatError(f"{path}: line {lineno}: not finite: {value!r}")
    return x


# --- simulate ---------------------------------------------------------------

def _simulate_one(args):
    cfg_dict, out_dir, jobs = args
    from trail.config import from_dict
    from trail.fedsim import run_experiment, write_outputs

    cfg = from_dict(cfg_dict)
    return write_outputs(run_experiment(cfg, jobs=jobs), out_dir)


def cmd_simulate(ns):
    from trail.config import load_config

    cfg = load_config(ns.config, seed=ns.seed, out=ns.out)
    base = Path(cfg.out)
    if ns.seeds == 1:
        summary = _simulate_one((cfg.to_dict(), base, ns.jobs))
        print(f"{base}: final_acc={summary['final_acc']:.4f} final_loss={summary['final_loss']:.4f}")
        return EXIT_OK
    tasks = []
    for k in range(ns.seeds):
        seed = cfg.seed + k
        out = base / f"seed_{seed}"
        tasks.append((cfg.replace(seed=seed, out=str(out)).to_dict(), out, 1))
    if ns.jobs > 1:
        with ProcessPoolExecutor(ns.jobs) as pool:
            summaries = list(pool.map(_simulate_one, tasks))
    else:
        summaries = [_simulate_one(t) for t in tasks]
    for (_, out, _), s in zip(tasks, summaries):
        print(f"{out}: final_acc={s['final_acc']:.4f} final_loss={s['final_loss']:.4f}")
    return EXIT_OK


# --- schedule ---------------------------------------------------------------

def read_trust_table(path):
    """``client,server,TL`` rows -> (U, S) matrix; missing pairs are ineligible (-inf)."""
    _, rows = _read_csv(path, ("client", "server", "TL"))
    entries = []
    for lineno, r in rows:
        i = _num(r["client"], path, lineno, int)
        s = _num(r["server"], path, lineno, int)
        if i < 0 or s < 0:
            raise FormatError(f"{path}: line {lineno}: negative client or server id")
        entries.append((i, s, _num(r["TL"], path, lineno)))
    if not entries:
        raise FormatError(f"{path}: no data rows (line 2)")
    U = max(e[0] for e in entries) + 1
    S = max(e[1] for e in entries) + 1
    trust = np.full((U, S), -np.inf)
    for i, s, tl in entries:
        trust[i, s] = tl
    return trust


def read_sizes(path, num_clients):
    _, rows = _read_csv(path, ("client", "n"))
    sizes = np.full(num_clients, np.nan)
    for lineno, r in rows:
        i = _num(r["client"], path, lineno, int)
        if not 0 <= i < num_clients:
            raise FormatError(f"{path}: line {lineno}: client {i} not in the trust table")
        sizes[i] = _num(r["n"], path, lineno)
    if np.any(np.isnan(sizes)):
        raise FormatError(f"{path}: no size for clients {np.flatnonzero(np.isnan(sizes)).tolist()}")
    return sizes


def cmd_schedule(ns):
    from trail.scheduler import EXHAUSTIVE_LIMIT, SchedulingInstance, exhaustive_schedule, is_feasible, solve, \
        surrogate_objective

    trust = read_trust_table(ns.trust)
    sizes = read_sizes(ns.sizes, trust.shape[0])
    # the instance needs finite trust; absent pairs sit far below any threshold
    finite = np.isfinite(trust)
    if not finite.all() and not math.isfinite(ns.threshold):
        raise InvalidInputError("the trust table has missing (client, server) pairs; give a finite --threshold")
    floor = min(ns.threshold, trust[finite].min()) - 1.0 if not finite.all() else 0.0
    inst = SchedulingInstance(sizes, np.where(finite, trust, floor), ns.threshold, ns.capacity or None)
    d = solve(inst, ns.solver, seed=ns.seed, order=ns.order)
    B = surrogate_objective(d, inst)
    gap = None
    if (inst.num_servers + 1) ** inst.num_clients <= EXHAUSTIVE_LIMIT:
        _, best = exhaustive_schedule(inst)
        gap = (B - best) / abs(best) if best != 0 else B - best
    out = Path(ns.out)
    rows = [(int(i), int(s)) for i, s in np.argwhere(d)]
    atomic_write_csv(out / "assignment.csv", ("client", "server"), rows)
    summary = {"B": B, "feasible": is_feasible(d, inst), "solver": ns.solver, "gap_to_oracle": gap,
               "assigned": len(rows), "capacity": inst.capacity,
               "threshold": ns.threshold if math.isfinite(ns.threshold) else str(ns.threshold)}
    atomic_write_text(out / "schedule.json", json.dumps(summary, indent=2) + "\n")
    print(json.dumps(summary))
    return EXIT_OK


# --- hsmm-fit ---------------------------------------------------------------

def read_observations(path):
    """Channel columns, plus an optional ``sequence`` column splitting the rows into sequences."""
    header, rows = _read_csv(path, ())
    channels = [h for h in header if h != "sequence"]
    if not channels:
        raise FormatError(f"{path}: line 1: no observation columns")
    if not rows:
        raise FormatError(f"{path}: no data rows (line 2)")
    seqs = {}
    for lineno, r in rows:
        key = r.get("sequence", "")
        vals = [_num(r[c], path, lineno) for c in channels]
        if not all(math.isfinite(v) for v in vals):
            raise FormatError(f"{path}: line {lineno}: observations must be finite")
        seqs.setdefault(key, []).append(vals)
    return [np.array(v) for v in seqs.values()]


def cmd_hsmm_fit(ns):
    from trail.hsmm import QualityHsmm, baum_welch_fit, initial_model

    seqs = read_observations(ns.observations)
    if ns.init:
        init = QualityHsmm.load(ns.init)
    else:
        init = initial_model(seqs, ns.states, ns.max_duration, ns.min_var)
    model, trace = baum_welch_fit(init, seqs, max_iters=ns.max_iters, tol=ns.tol, min_var=ns.min_var)
    out = Path(ns.out)
    out.mkdir(parents=True, exist_ok=True)
    model.save(out / "model.json")
    atomic_write_csv(out / "trace.csv", ("iter", "loglik"), [(k, repr(float(v))) for k, v in enumerate(trace)])
    print(f"iterations={len(trace) - 1} loglik={trace[-1]:.6f}")
    return EXIT_OK


# --- report -----------------------------------------------------------------

_SCENARIO_KEYS = ("seed", "out")


def _comparable(cfg):
    c = json.loads(json.dumps(cfg))
    for k in _SCENARIO_KEYS:
        c.pop(k, None)
    c["scheduler"].pop("solver", None)
    c["degradation"].pop("fraction", None)
    return c


def collect_summaries(dirs):
    found = []
    for d in dirs:
        p = Path(d)
        paths = [p] if p.is_file() else sorted(p.rglob("summary.json"))
        for path in paths:
            with open(path) as fh:
                found.append((path, json.load(fh)))
    return found


def report_tables(summaries):
    """Per-seed rows, and one row of means per (fraction, solver) with the best solver flagged."""
    groups = {}
    for path, s in summaries:
        cfg = s["config"]
        key = (cfg["degradation"]["fraction"], cfg["scheduler"]["solver"])
        groups.setdefault(key, []).append((cfg["seed"], s["final_acc"], s["final_loss"], str(path.parent)))
    runs, table = [], []
    for frac, solver in sorted(groups):
        members = sorted(groups[(frac, solver)])
        runs.extend((frac, solver, seed, acc, loss, where) for seed, acc, loss, where in members)
        acc = np.array([m[1] for m in members])
        loss = np.array([m[2] for m in members])
        table.append([frac, solver, len(members), float(acc.mean()), float(acc.std()),
                      float(loss.mean()), float(loss.std()), ""])
    for frac in {row[0] for row in table}:
        best = max((row for row in table if row[0] == frac), key=lambda row: row[3])
        best[7] = "*"
    return runs, [tuple(row) for row in table]


RUNS_HEADER = ("fraction", "solver", "seed", "final_acc", "final_loss", "run")
REPORT_HEADER = ("fraction", "solver", "seeds", "acc_mean", "acc_std", "loss_mean", "loss_std", "best")


def cmd_report(ns):
    summaries = collect_summaries(ns.runs)
    if not summaries:
        raise InvalidInputError("no summary.json found under the given run directories")
    ref = _comparable(summaries[0][1]["config"])
    for path, s in summaries[1:]:
        if _comparable(s["config"]) != ref:
            print(f"warning: {path}: configuration differs from {summaries[0][0]} "
                  "beyond seed, solver and fraction", file=sys.stderr)
            break
    runs, table = report_tables(summaries)
    out = Path(ns.out)
    atomic_write_csv(out / "runs.csv", RUNS_HEADER, runs)
    atomic_write_csv(out / "report.csv", REPORT_HEADER, table)
    print(f"{'fraction':>8} {'solver':>10} {'seeds':>5} {'acc':>8} {'±':>7} {'loss':>8} {'±':>7}")
    for frac, solver, n, acc, acc_sd, loss, loss_sd, flag in table:
        print(f"{frac:8.2f} {solver:>10} {n:5d} {acc:8.4f} {acc_sd:7.4f} {loss:8.4f} {loss_sd:7.4f} {flag}")
    return EXIT_OK


# --- entry point ------------------------------------------------------------

def build_parser():
    # global flags are accepted before or after the subcommand
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="root seed (overrides the config)")
    common.add_argument("--out", default=argparse.SUPPRESS, help="output directory")
    common.add_argument("--jobs", type=int, default=argparse.SUPPRESS, help="parallel workers")
    p = argparse.ArgumentParser(prog="trail", description=__doc__.splitlines()[0], parents=[common])
    sub = p.add_subparsers(dest="command", required=True)
    _add = sub.add_parser
    sub.add_parser = lambda *a, **kw: _add(*a, parents=[common], **kw)

    s = sub.add_parser("simulate", help="run an experiment from a TOML config")
    s.add_argument("config")
    s.add_argument("--seeds", type=int, default=1, help="run this many consecutive seeds")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("schedule", help="associate clients with servers from a trust table")
    s.add_argument("trust", help="CSV with columns client,server,TL")
    s.add_argument("--sizes", required=True, help="CSV with columns client,n")
    s.add_argument("--threshold", type=float, default=0.0, help="minimum trust level (default 0)")
    s.add_argument("--capacity", type=int, default=0, help="per-server capacity (0: twice the even split)")
    s.add_argument("--solver", default="trail", choices=["trail", "greedy", "random", "trust-only", "exhaustive"])
    s.add_argument("--order", default="descending", choices=["descending", "ascending"])
    s.set_defaults(func=cmd_schedule)

    s = sub.add_parser("hsmm-fit", help="fit a quality-state model to observation sequences")
    s.add_argument("observations", help="CSV of channel columns, optional 'sequence' column")
    s.add_argument("--states", type=int, default=3, help="number of quality states")
    s.add_argument("--max-duration", type=int, default=10, help="longest dwell in rounds")
    s.add_argument("--max-iters", type=int, default=100, help="EM iteration cap")
    s.add_argument("--tol", type=float, default=1e-6, help="stop when the log-likelihood gains less")
    s.add_argument("--min-var", type=float, default=1e-6, help="emission variance floor")
    s.add_argument("--init", default=None, help="start from a saved model instead of the default guess")
    s.set_defaults(func=cmd_hsmm_fit)

    s = sub.add_parser("report", help="compare finished runs")
    s.add_argument("runs", nargs="+", help="run directories, or parents searched for summary.json")
    s.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    ns = build_parser().parse_args(argv)
    for name, default in (("seed", None), ("out", None), ("jobs", 1)):
        if not hasattr(ns, name):
            setattr(ns, name, default)
    if ns.jobs < 1:
        print("error: --jobs must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    if ns.out is None and ns.command != "simulate":
        ns.out = "."
    try:
        return ns.func(ns)
    except (InvalidInputError, FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericalDivergenceError, NumericalDegeneracyError, ArithmeticError, OSError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
