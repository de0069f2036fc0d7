"""Ramp preparation on the fully connected model: slow and fast ramps.

Usage: python3 scripts/run_ramp_preparation.py [--n 20] [--cache .cache] [--out results/ramp]
"""
import argparse
from pathlib import Path

from ssblab.io import dumps, emit_results
from ssblab.protocol import ProtocolConfig, run_preparation

ap = argparse.ArgumentParser()
ap.add_argument("--n", type=int, default=20)
ap.add_argument("--cache", default=".cache")
ap.add_argument("--out", default=None)
ap.add_argument("--slow", type=float, default=40.96)
ap.add_argument("--fast", type=float, default=0.9)
args = ap.parse_args()

base = ProtocolConfig(model="fully-connected", n=args.n)
for label, tau_q in (("slow", args.slow), ("fast", args.fast)):
    res = run_preparation(base.replace(tau_q=tau_q), cache_dir=args.cache)
    print(label, "tau_q =", tau_q)
    print(dumps(res.scalars["fit"]))
    if args.out:
        emit_results(res, Path(args.out) / label)
