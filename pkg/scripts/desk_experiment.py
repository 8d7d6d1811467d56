"""Run the desk-scale experiment for several seeds in parallel and print the trend summary.

Usage: python scripts/desk_experiment.py [--out results/desk] [--seeds 0 1 2] [--workers 3]

Results are cached per seed, so a second invocation only prints the summary.
"""
import argparse
import os

os.environ.setdefault("OMP_NUM_THREADS", "1")
os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")

from concurrent.futures import ProcessPoolExecutor  # noqa: E402

from fusionseg.experiment import DeskConfig, run_seed, summarize  # noqa: E402


def _one(args):
    seed, out = args
    return run_seed(DeskConfig(), seed, out, log=lambda m: print(m, flush=True))


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="results/desk")
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--workers", type=int, default=3)
    a = ap.parse_args()
    with ProcessPoolExecutor(a.workers) as pool:
        results = list(pool.map(_one, [(s, a.out) for s in a.seeds]))
    for line in summarize(results):
        print(line)


if __name__ == "__main__":
    main()
