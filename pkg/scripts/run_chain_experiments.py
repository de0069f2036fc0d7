"""Run the chain quench and the symmetry-breaking sweep, caching results.

Usage: python3 scripts/run_chain_experiments.py [--n 19] [--cache .cache]
"""
import argparse
import logging

from ssblab.protocol import ProtocolConfig, run_perturbation_sweep, run_quench

ap = argparse.ArgumentParser()
ap.add_argument("--n", type=int, default=19)
ap.add_argument("--cache", default=".cache")
ap.add_argument("--skip-sweep", action="store_true")
args = ap.parse_args()
logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s %(message)s")

cfg = ProtocolConfig(n=args.n)
q = run_quench(cfg, cache_dir=args.cache)
print("quench gge:", q.gge)
if not args.skip_sweep:
    s = run_perturbation_sweep(cfg, cache_dir=args.cache)
    print("sweep lambda_c:", s.scalars["lambda_c"])
