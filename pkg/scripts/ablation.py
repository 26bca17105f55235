"""Predictor-subset ablation on the IVT-paradox scenario (all 21 combinations by default).

Usage: python scripts/ablation.py --seed 1 --out runs/ablation [--combos loo]
``--combos loo`` runs only the full set and the five leave-one-out subsets.
"""

import argparse
from dataclasses import replace

from dartkit.fields import CHANNELS
from dartkit.synthlab import generate_scenario, ivt_paradox_config
from dartkit.trainer import ABLATION_COMBOS, DESK_RECIPE, ablation_run


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seed", type=int, default=1)
    ap.add_argument("--out", required=True)
    ap.add_argument("--combos", choices=("all", "loo"), default="all")
    args = ap.parse_args()

    sc = generate_scenario(ivt_paradox_config(args.seed))
    combos = ABLATION_COMBOS if args.combos == "all" else [c for c in ABLATION_COMBOS if len(c) >= 4]
    rows = ablation_run(sc, replace(DESK_RECIPE, seed=args.seed), combos, args.out)
    width = max(len(r["combo"]) for r in rows)
    for r in rows:
        print(f"{r['combo']:{width}s} csi@220={r['csi@220']:.3f} pct_delta={r['pct_delta_csi@220']}")
    print(f"full set: {'+'.join(CHANNELS)}")


if __name__ == "__main__":
    main()
