"""Command line entry point: ``ssblab <subcommand> [options]``."""
from __future__ import annotations

import argparse
import logging
import sys
from contextlib import nullcontext
from pathlib import Path

import numpy as np

from . import __version__
from .basis import DickeBasis, enumerate_sector
from .dynamics import diagonalize
from .gge import ChargeTargets, GgeParameters, fit_beta, gge_density, solve_multipliers
from .io import basis_csv, dumps, emit_results, histogram_csv, operator_csv, parse_config, series_csv
from .operators import (ModelParameters, build_fully_connected, build_K, build_magnetization, build_parity,
                        build_perturbed, build_scaled_m, build_tfim, build_W, sign_star)
from .protocol import ConfigError, ProtocolConfig, build_model, run_perturbation_sweep, run_preparation, run_quench

OBSERVABLES = ("m", "W", "C", "K", "Pi")


def _load_config(args) -> ProtocolConfig:
    if args.config:
        return parse_config(args.config)
    return ProtocolConfig()


def _floats(text, count, name):
    try:
        vals = [float(x) for x in text.split(",")]
    except ValueError:
        raise SystemExit(f"--{name}: expected {count} comma-separated numbers, got {text!r}")
    if len(vals) != count:
        raise SystemExit(f"--{name}: expected {count} comma-separated numbers, got {len(vals)}")
    return vals


def _parity_arg(text):
    return {"+": 1, "-": -1, "both": None}[text]


def cmd_basis(args):
    basis = enumerate_sector(args.n, _parity_arg(args.parity))
    print(basis.dimension)
    if args.out:
        Path(args.out).write_text(basis_csv(basis))


def _ring_operator(args):
    name = args.name
    if args.model == "fully-connected":
        op = build_fully_connected(args.n, args.h)
        basis = DickeBasis(args.n)
        if name == "H":
            return basis, op
    else:
        parity = _parity_arg(args.parity)
        basis = enumerate_sector(args.n, parity)
        if name == "H":
            if args.model == "tfim":
                if args.epsilon:
                    raise SystemExit("--eps needs --model perturbed")
                return basis, build_tfim(basis, ModelParameters(args.n, args.alpha, args.j, args.h))
            return basis, build_perturbed(basis, ModelParameters(args.n, args.alpha, args.j, args.h, args.epsilon))
    if name == "Pi":
        return basis, build_parity(basis)
    if name == "M":
        return basis, build_magnetization(basis)
    if name == "m":
        return basis, build_scaled_m(basis)
    if name == "W":
        return basis, build_W(basis)
    c = sign_star(build_magnetization(basis))
    if name == "C":
        return basis, c
    return basis, build_K(c, build_parity(basis))


def cmd_operator(args):
    basis, op = _ring_operator(args)
    text = operator_csv(op.matrix)
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)


def cmd_spectrum(args):
    basis = enumerate_sector(args.n, _parity_arg(args.parity))
    h = build_perturbed(basis, ModelParameters(args.n, args.alpha, args.j, args.h, args.epsilon))
    es = diagonalize(h)
    par = es.parities if es.parities is not None else np.zeros(es.dim, dtype=int)
    lines = ["index,energy,parity"] + [f"{i},{format(float(e), '.17g')},{int(p)}"
                                       for i, (e, p) in enumerate(zip(es.values, par))]
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)


def _require_out(args):
    if not args.out:
        raise SystemExit("--out is required for this subcommand")
    return args.out


def cmd_protocol(args):
    out = _require_out(args)
    cfg = _load_config(args)
    res = run_preparation(cfg, cache_dir=args.cache)
    emit_results(res, out)
    print(dumps(res.scalars.get("fit", {})))


def cmd_quench(args):
    out = _require_out(args)
    cfg = _load_config(args)
    res = run_quench(cfg, cache_dir=args.cache)
    if out.endswith(".csv"):
        Path(out).write_text(series_csv(res.series))
    else:
        emit_results(res, out)
    print(dumps(res.gge))


def cmd_sweep(args):
    out = _require_out(args)
    cfg = _load_config(args)
    eps = _floats(args.epsilons, len(args.epsilons.split(",")), "epsilons") if args.epsilons else None
    res = run_perturbation_sweep(cfg, eps, cache_dir=args.cache)
    emit_results(res, out)
    print(dumps(res.scalars))


def cmd_distribution(args):
    cfg = _load_config(args).replace(fit_gge=False)
    res = run_quench(cfg, cache_dir=args.cache)
    text = histogram_csv(res.histogram)
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)


def _gge_model(args):
    cfg = _load_config(args)
    model = build_model(cfg, keep_svd=False)
    h = model.hamiltonian(cfg.h3, cfg.epsilon)
    return cfg, model, h


def cmd_gge_fit(args):
    pi_t, c_t, k_t, energy = _floats(args.targets, 4, "targets")
    cfg, model, h = _gge_model(args)
    delta = args.delta if args.delta is not None else cfg.delta
    targets = ChargeTargets(pi_t, c_t, k_t, energy)
    lam = solve_multipliers(targets, delta)
    fit = fit_beta(h, model.c, model.k, model.pi, lam, energy, delta)
    rho = fit.density
    res = {"beta": fit.beta, "lambda_pi": lam[0], "lambda_c": lam[1], "lambda_k": lam[2],
           "residuals": {"Pi": rho.expectation(model.pi) - pi_t, "C": rho.expectation(model.c) - c_t,
                         "K": rho.expectation(model.k) - k_t, "E": fit.residual}}
    print(dumps(res))


def cmd_gge_predict(args):
    beta, lc, lk, lp = _floats(args.params, 4, "params")
    cfg, model, h = _gge_model(args)
    rho = gge_density(h, model.c, model.k, model.pi, GgeParameters(beta, lc, lk, lp, cfg.delta))
    obs = {"m": model.m_scaled, "W": model.w, "C": model.c, "K": model.k, "Pi": model.pi}[args.observable]
    print(dumps({"observable": args.observable, "value": rho.expectation(obs)}))


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat JSON run configuration")
    common.add_argument("--out", help="output directory or file")
    common.add_argument("--threads", type=int, default=None, help="BLAS thread count")
    common.add_argument("--seed", type=int, default=0, help="seed for randomised checks")
    common.add_argument("--cache", default=None, help="directory for cached experiment results")
    common.add_argument("-v", "--verbose", action="store_true")

    ap = argparse.ArgumentParser(prog="ssblab", description=__doc__)
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", required=True)

    def model_flags(p, name=False):
        p.add_argument("--n", type=int, required=True)
        p.add_argument("--parity", choices=("+", "-", "both"), default="both")
        p.add_argument("--alpha", type=float, default=1.1)
        p.add_argument("--j", type=float, default=2.0)
        p.add_argument("--h", type=float, default=0.0)
        p.add_argument("--epsilon", "--eps", type=float, default=0.0)
        if name:
            p.add_argument("--model", choices=("tfim", "perturbed", "fully-connected"), default="perturbed")
            p.add_argument("--name", choices=("H", "M", "m", "Pi", "C", "K", "W"), default="H")
            p.add_argument("--dump", dest="out", help="alias of --out")

    p = sub.add_parser("basis", parents=[common], help="sector dimension and representatives")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--parity", choices=("+", "-", "both"), default="both")
    p.set_defaults(func=cmd_basis)

    p = sub.add_parser("operator", parents=[common], help="operator matrix as row,col,re,im triplets")
    model_flags(p, name=True)
    p.set_defaults(func=cmd_operator)

    p = sub.add_parser("spectrum", parents=[common], help="eigenvalues with parity labels")
    model_flags(p)
    p.set_defaults(func=cmd_spectrum)

    for name, func, text in (("protocol", cmd_protocol, "ramp preparation protocol"),
                             ("quench", cmd_quench, "doublet quench with GGE fit"),
                             ("distribution", cmd_distribution, "magnetisation histogram after a quench")):
        p = sub.add_parser(name, parents=[common], help=text)
        p.set_defaults(func=func)

    p = sub.add_parser("sweep", parents=[common], help="quenches with a symmetry-breaking field")
    p.add_argument("--epsilons", default=None, help="comma-separated field strengths")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("gge-fit", parents=[common], help="fit multipliers and beta")
    p.add_argument("--targets", required=True, help="pi,c,k,E")
    p.add_argument("--delta", type=float, default=None)
    p.set_defaults(func=cmd_gge_fit)

    p = sub.add_parser("gge-predict", parents=[common], help="GGE expectation value")
    p.add_argument("--params", required=True, help="beta,lambda_c,lambda_k,lambda_pi")
    p.add_argument("--observable", choices=OBSERVABLES, required=True)
    p.set_defaults(func=cmd_gge_predict)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    if args.threads is not None:
        from threadpoolctl import threadpool_limits

        ctx = threadpool_limits(args.threads)
    else:
        ctx = nullcontext()
    try:
        with ctx:
            args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
