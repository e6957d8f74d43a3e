"""
sweep.py

Grid sweep over the loss length scales and weights.

Each of sigma_x, sigma_g, lambda_sep, lambda_inv and lambda_cap is varied
one at a time by half an order of magnitude either side of the base config;
every point trains and evaluates as an independent seeded run.
"""

import argparse
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from itertools import product
from typing import List

from dotenv import load_dotenv

from config import RunConfig, worker_cap
from errors import GridSSLError
from logs import banner, console, setup_logging
from main import run_ablation

SWEPT_KEYS = ("sigma_x", "sigma_g", "lambda_sep", "lambda_inv", "lambda_cap")
FACTORS = (10 ** -0.5, 10 ** 0.5)


def sweep_configs(base: RunConfig) -> List[RunConfig]:
    """One config per (key, factor), labelled e.g. `sweep-sigma_g-x3.16`."""
    configs = []
    for key, factor in product(SWEPT_KEYS, FACTORS):
        value = getattr(base.loss, key) * factor
        configs.append(base.with_overrides(**{key: value, "ablation": f"sweep-{key}-x{factor:.2f}"}))
    return configs


def main() -> int:
    load_dotenv()
    p = argparse.ArgumentParser(description="Half-decade sweep of the loss hyperparameters")
    p.add_argument("--config", default="default.cfg")
    p.add_argument("--max-steps", type=int, default=None)
    p.add_argument(
        "--parallel",
        type=int,
        default=int(os.getenv("GRIDSSL_SWEEP_PARALLEL", 1)),
        help="Concurrent runs (CLI > env:GRIDSSL_SWEEP_PARALLEL > 1), capped by GRIDSSL_THREADS",
    )
    args = p.parse_args()
    setup_logging()

    try:
        base = RunConfig.from_file(args.config)
        if args.max_steps is not None:
            base = base.with_overrides(max_steps=args.max_steps)
        configs = sweep_configs(base)
        banner(f"gridssl sweep ({len(configs)} runs)")
        workers = min(args.parallel, worker_cap(), len(configs))
        if workers > 1:
            with ProcessPoolExecutor(max_workers=workers) as pool:
                summaries = list(pool.map(run_ablation, configs))
        else:
            summaries = [run_ablation(c) for c in configs]
    except GridSSLError as e:
        console.print(f"[red]{e}")
        return e.exit_code

    for s in summaries:
        console.print(f"{s['ablation']:<28} {s['status']:<8} modules={s.get('n_modules', '-')}  {s['run_dir']}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
