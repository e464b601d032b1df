"""Regenerate tests/data/cmaes_reference.json from the current implementation.

Run only after a deliberate change to the optimizer's numerics.
"""
import json
from pathlib import Path

import numpy as np

from qbitalloc.cmaes import cma_optimize

KEYS = ("evals", "best_f", "mean_f", "sigma", "axis_ratio")


def sphere(x):
    return float(np.sum(x * x))


def rosenbrock(x):
    return float(np.sum(100 * (x[1:] - x[:-1] ** 2) ** 2 + (1 - x[:-1]) ** 2))


CASES = {
    "sphere": (sphere, 10, 3.0, 2.0, 10000),
    "rosenbrock": (rosenbrock, 5, 0.0, 0.5, 50000),
}


def main():
    out = {}
    for name, (f, d, m0, s0, budget) in CASES.items():
        x, fb, hist = cma_optimize(f, d, m0, s0, budget, seed=0)
        out[name] = {"d": d, "m0": m0, "sigma0": s0, "budget": budget, "seed": 0,
                     "best_x": x.tolist(), "best_f": fb,
                     "history": [{k: h[k] for k in KEYS} for h in hist]}
    path = Path(__file__).resolve().parents[1] / "tests" / "data" / "cmaes_reference.json"
    path.write_text(json.dumps(out, indent=1) + "\n")


if __name__ == "__main__":
    main()
