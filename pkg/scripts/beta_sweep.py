"""Extreme-weight sweep over both loss regimes on the benchmark scenario.

Usage: python scripts/beta_sweep.py --seed 1 --out runs/sweep
Then: dartkit report --runs runs/sweep
"""

import argparse
from dataclasses import replace

from dartkit.synthlab import ScenarioConfig, generate_scenario
from dartkit.trainer import DESK_RECIPE, SWEEP_BETAS, beta_sweep


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seed", type=int, default=1)
    ap.add_argument("--out", required=True)
    ap.add_argument("--regimes", default="conservative,aggressive")
    args = ap.parse_args()

    sc = generate_scenario(ScenarioConfig(seed=args.seed))
    rows = beta_sweep(sc, replace(DESK_RECIPE, seed=args.seed), SWEEP_BETAS, args.regimes.split(","), args.out)
    print("regime        beta   csi    pod    far    bias")
    for r in rows:
        print(f"{r['regime']:12s} {r['beta']:5.2f} {r['csi']:.3f} {r['pod']:.3f} {r['far']:.3f} {r['bias']:.3f}")


if __name__ == "__main__":
    main()
