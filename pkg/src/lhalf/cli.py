"""Command line entry point: ``lhalf simulate | fit | report``.

Exit codes: 0 success, 2 usage or validation error, 3 numerical failure.
The default thread count comes from ``LHALF_THREADS``; ``--threads`` wins.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
import warnings

import numpy as np

from . import datagen, postsel, storage
from .dist import NumericError, ParameterDomainError
from .gibbs import GibbsConfig, run_chain
from .prior import Hyperparams
from .state import IngestionError, StandardizationError, load_chain, load_matrix, standardize
from .vi import ANCHORS, VIConfig, load_state, run_vi, save_state

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 2, 3
THREADS_ENV = "LHALF_THREADS"


class UsageError(Exception):
    pass


def _default_threads():
    raw = os.environ.get(THREADS_ENV)
    if raw is None:
        return None
    try:
        val = int(raw)
    except ValueError:
        raise UsageError(f"{THREADS_ENV} must be an integer, got {raw!r}") from None
    if val < 1:
        raise UsageError(f"{THREADS_ENV} must be >= 1")
    return val


def _writable_dir(path):
    try:
        os.makedirs(path, exist_ok=True)
    except OSError as exc:
        raise UsageError(f"cannot create output directory {path}: {exc}") from exc
    if not os.access(path, os.W_OK):
        raise UsageError(f"output directory {path} is not writable")
    return path


def cmd_simulate(args):
    _writable_dir(args.out)
    if args.example == 1:
        if args.p is not None and args.p != datagen.EX1_P:
            raise UsageError(f"example 1 has p = {datagen.EX1_P}")
        n = datagen.EX1_N if args.n is None else args.n
        if n < 1:
            raise UsageError("--n must be >= 1")
        d, B0, _ = datagen.synth_example1(args.seed, n=n)
        omega = np.ones(datagen.EX1_P)
    else:
        n = 100 if args.n is None else args.n
        p = 1000 if args.p is None else args.p
        if n < 1 or p < 1:
            raise UsageError("--n and --p must be >= 1")
        d, B0, omega, _ = datagen.synth_example2(n, p, args.seed)
    datagen.save_truth(args.out, d, B0, omega, meta={"example": args.example, "seed": args.seed})
    print(f"wrote {d.n}x{d.p} data and truth to {args.out}")
    return EXIT_OK


def _hyperparams(args):
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        h = Hyperparams(a=args.a, c1=args.c1, c2=args.c2, b=args.b, a_sigma=args.a_sigma, b_sigma=args.b_sigma, K=args.k)
    for w in caught:
        print(f"warning: {w.message}", file=sys.stderr)
    return h


def cmd_fit(args):
    threads = args.threads if args.threads is not None else _default_threads()
    if threads is not None and threads < 1:
        raise UsageError("--threads must be >= 1")
    h = _hyperparams(args)
    d = load_matrix(args.data)
    if args.standardize:
        d = standardize(d)
    out = _writable_dir(args.out or f"fit-{args.method}")
    run = {
        "kind": "run",
        "method": args.method,
        "data": os.path.abspath(args.data),
        "n": d.n,
        "p": d.p,
        "standardized": bool(args.standardize),
        "hyperparams": h.to_dict(),
    }
    if args.method == "gibbs":
        cfg = GibbsConfig(
            n_iter=args.iters, n_burn=args.burn, thin=args.thin, seed=args.seed, threads=threads, store_all=args.store_all
        )
        run["config"] = cfg.__dict__.copy()
        chain = run_chain(d, h, cfg, out_dir=out)
        run["seconds"] = chain.meta["seconds"]
        run["n_draws"] = chain.n_draws
    else:
        cfg = VIConfig(
            T1=args.t1,
            T2=args.t2,
            rho0=args.rho0,
            decay=args.decay,
            mc_samples=args.mc_samples,
            tol=args.tol,
            max_outer=args.max_outer,
            seed=args.seed,
            threads=threads,
            anchor=args.anchor,
        )
        run["config"] = cfg.__dict__.copy()
        state = run_vi(d, h, cfg)
        save_state(state, out)
        run["seconds"] = state.trace["seconds"]
        run["n_outer"] = state.trace["n_outer"]
        run["converged"] = state.trace["converged"]
        run["stop_reason"] = state.trace["stop_reason"]
        run["switched_at"] = state.trace["switched_at"]
    if args.standardize:
        run["column_means"] = d.column_means.tolist()
        run["column_sds"] = d.column_sds.tolist()
    storage.write_manifest(os.path.join(out, "run.json"), run)
    print(f"{args.method} fit written to {out} ({run['seconds']:.1f} s)")
    return EXIT_OK


def _load_truth(path):
    if path.lower().endswith(".csv"):
        return np.asarray(load_matrix(path).X)
    return datagen.load_truth(path)[2]


def cmd_report(args):
    if not 0 < args.level < 1:
        raise UsageError("--level must lie in (0, 1)")
    if not args.threshold > 0:
        raise UsageError("--threshold must be > 0")
    run_path = os.path.join(args.fit, "run.json")
    if not os.path.isfile(run_path):
        raise UsageError(f"{args.fit} has no run.json; not a fit directory")
    run = storage.read_manifest(run_path)
    source = load_chain(args.fit) if run["method"] == "gibbs" else load_state(args.fit)
    Sigma_true = _load_truth(args.truth) if args.truth else None
    rep = postsel.build_report(source, args.level, args.threshold, Sigma_true, args.include_diagonal)
    payload = {"method": run["method"], **rep.to_dict(with_mask=not args.no_mask)}
    if args.ess:
        if run["method"] != "gibbs":
            raise UsageError("--ess needs a Gibbs fit")
        ess = postsel.ess_loadings(source)
        postsel.write_matrix_csv(os.path.join(args.fit, "ess.csv"), ess)
        postsel.write_heatmap_png(os.path.join(args.fit, "ess.png"), ess)
        payload["ess"] = {"min": float(ess.min()), "median": float(np.median(ess)), "max": float(ess.max())}
    if args.sigma_csv:
        postsel.write_matrix_csv(os.path.join(args.fit, "sigma_hat.csv"), rep.Sigma_hat)
    if args.sigma_png:
        postsel.write_heatmap_png(os.path.join(args.fit, "sigma_hat.png"), np.abs(rep.Sigma_hat))
    out = args.out or os.path.join(args.fit, "report.json")
    with open(out, "w", encoding="utf-8") as fh:
        json.dump({"schema": 1, **payload}, fh, indent=2)
    summary = {k: payload[k] for k in ("K_hat", "fdr", "fnr", "frob") if k in payload}
    print(json.dumps(summary))
    return EXIT_OK


def build_parser():
    ap = argparse.ArgumentParser(prog="lhalf", description="Sparse Bayesian factor models with the L1/2 prior.")
    sub = ap.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("simulate", help="generate a synthetic data set and its truth")
    sp.add_argument("--example", type=int, choices=(1, 2), required=True)
    sp.add_argument("--n", type=int)
    sp.add_argument("--p", type=int)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_simulate)

    fp = sub.add_parser("fit", help="fit the model by Gibbs sampling or variational inference")
    fp.add_argument("--method", choices=("gibbs", "vi"), default="gibbs")
    fp.add_argument("--data", required=True)
    fp.add_argument("--out")
    fp.add_argument("--k", type=int, default=50)
    fp.add_argument("--a", type=float, default=15.0)
    fp.add_argument("--c1", type=float, default=2.3)
    fp.add_argument("--c2", type=float, default=0.7)
    fp.add_argument("--b", type=float, default=1.0)
    fp.add_argument("--a-sigma", type=float, default=1.0)
    fp.add_argument("--b-sigma", type=float, default=1.0)
    fp.add_argument("--iters", type=int, default=10000)
    fp.add_argument("--burn", type=int, default=5000)
    fp.add_argument("--thin", type=int, default=1)
    fp.add_argument("--store-all", action="store_true", help="also keep eta, tau2 and v draws")
    fp.add_argument("--max-outer", type=int, default=VIConfig.max_outer)
    fp.add_argument("--t1", type=int, default=VIConfig.T1)
    fp.add_argument("--t2", type=int, default=VIConfig.T2)
    fp.add_argument("--rho0", type=float, default=VIConfig.rho0)
    fp.add_argument("--decay", type=float, default=VIConfig.decay)
    fp.add_argument("--mc-samples", type=int, default=VIConfig.mc_samples)
    fp.add_argument("--tol", type=float, default=VIConfig.tol)
    fp.add_argument("--anchor", choices=ANCHORS, default=VIConfig.anchor, help="where the prior minorizer touches")
    fp.add_argument("--seed", type=int, default=0)
    fp.add_argument("--threads", type=int)
    fp.add_argument("--standardize", action="store_true")
    fp.set_defaults(func=cmd_fit)

    rp = sub.add_parser("report", help="support selection and accuracy metrics for a fit")
    rp.add_argument("--fit", required=True)
    rp.add_argument("--truth", help="truth.json (or its directory) or a Sigma0 CSV")
    rp.add_argument("--level", type=float, default=0.95)
    rp.add_argument("--threshold", type=float, default=1e-4)
    rp.add_argument("--include-diagonal", action="store_true")
    rp.add_argument("--ess", action="store_true", help="write loading ESS as CSV and PNG")
    rp.add_argument("--sigma-csv", action="store_true")
    rp.add_argument("--sigma-png", action="store_true")
    rp.add_argument("--no-mask", action="store_true", help="leave the support mask out of the JSON")
    rp.add_argument("--out")
    rp.set_defaults(func=cmd_report)
    return ap


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except NumericError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (
        UsageError,
        ParameterDomainError,
        IngestionError,
        StandardizationError,
        storage.ContainerError,
        postsel.SelectionError,
        ValueError,
        OSError,
    ) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
