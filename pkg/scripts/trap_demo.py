"""Correlation versus cold-core skill for MOS, bicubic, DART and the single-decoder U-Net.

Usage: python scripts/trap_demo.py --seed 1 [--out runs/trap]
"""

import argparse
from dataclasses import replace
from pathlib import Path

from dartkit.baselines import bicubic_baseline, mos_fit, mos_predict
from dartkit.synthlab import ScenarioConfig, coarse_pairs, generate_scenario
from dartkit.trainer import DESK_RECIPE, evaluate_fields, prepare_training_data, train_from_config


def summarize(name, ev):
    s = ev.scores[220.0]
    print(f"{name:8s} corr={ev.bulk['pearson_corr'][0]:.3f} rmse={ev.bulk['rmse'][0]:6.2f} "
          f"csi@220={s['csi'][0]:.3f} pod={s['pod'][0]:.3f} far={s['far'][0]:.3f} bias={s['bias'][0]:.3f}")


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seed", type=int, default=1)
    ap.add_argument("--out")
    args = ap.parse_args()

    sc = generate_scenario(ScenarioConfig(seed=args.seed))
    cfg = replace(DESK_RECIPE, seed=args.seed)
    obs = [r.target.values for r in sc.test]

    train = [(p.select(cfg.channels), t) for p, t in coarse_pairs(sc, "train")]
    mos = mos_fit(train)
    preds = [mos_predict(mos, p.select(cfg.channels)).values for p, _ in coarse_pairs(sc, "test")]
    summarize("mos", evaluate_fields(preds, obs))

    factor = sc.config.fine_dims[0] // sc.config.coarse_dims[0]
    summarize("bicubic", evaluate_fields([bicubic_baseline(r.target, factor).values for r in sc.test], obs))

    data = prepare_training_data(sc, cfg.channels)
    for name, c in (("dart", cfg), ("unet", replace(cfg, model="unet"))):
        out = None if args.out is None else Path(args.out) / name
        summarize(name, train_from_config(sc, c, out, data).test)


if __name__ == "__main__":
    main()
