"""Command-line entry point: synth, train, eval, sweep-beta, ablate, verify-map, report.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import logging
import os
import shutil
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .baselines import bicubic_baseline, mos_fit, mos_predict, save_mos
from .decomposition import write_distribution_csv
from .fields import CHANNELS, ManifestError, NormStats, _parse_kv
from .synthlab import (ScenarioConfig, coarse_pairs, config_lines, generate_scenario, load_scenario,
                       parse_scenario_config, save_scenario, stats_report)
from .tensorcore.dtsr import DtsrFormatError, load_checkpoint, read_dtsr
from .tensorcore.optim import NonFiniteGradientError
from .trainer import (ABLATION_COLUMNS, ABLATION_COMBOS, SWEEP_BETAS, SWEEP_COLUMNS, NonFiniteLossError,
                      TargetScaling, TrainConfig, _arrays, ablation_rows, build_model, combo_key, config_hash,
                      evaluate_fields, parse_train_config, predict, prepare_training_data, sweep_row,
                      train_from_config, write_table)
from .verify import (contingency, scores, table_from_map, verification_map, write_scores_csv,
                     write_verification_map)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
SECTIONS = ("synth", "train")

log = logging.getLogger("dartkit")


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# -- config files -------------------------------------------------------------

def parse_config_text(text: str) -> Dict[str, str]:
    """Flat ``key=value`` lines; ``#`` starts a comment; dotted keys name a section."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"config line {lineno}: expected key=value, got {raw.strip()!r}")
        k, _, v = line.partition("=")
        k = k.strip()
        if not k:
            raise UsageError(f"config line {lineno}: empty key")
        out[k] = v.strip()
    return out


def split_sections(kv: Dict[str, str], default: str) -> Dict[str, Dict[str, str]]:
    out: Dict[str, Dict[str, str]] = {s: {} for s in SECTIONS}
    for k, v in kv.items():
        section, dot, key = k.partition(".")
        if not dot:
            section, key = default, k
        if section not in out:
            raise UsageError(f"unknown config key: {k}")
        out[section][key] = v
    return out


def load_config(path: Optional[str], default: str) -> Dict[str, Dict[str, str]]:
    if path is None:
        return {s: {} for s in SECTIONS}
    p = Path(path)
    if not p.is_file():
        raise DataError(f"config file not found: {path}")
    return split_sections(parse_config_text(p.read_text()), default)


def _scenario_config(kv: Dict[str, str], seed: Optional[int]) -> ScenarioConfig:
    kv = dict(kv)
    if seed is not None:
        kv["seed"] = str(seed)
    try:
        return parse_scenario_config(kv)
    except KeyError as e:
        raise UsageError(f"unknown config key: synth.{e.args[0]}")
    except ValueError as e:
        raise UsageError(f"invalid synth config: {e}")


def _train_config(kv: Dict[str, str], seed: Optional[int], overrides: Dict[str, str]) -> TrainConfig:
    kv = dict(kv)
    kv.update({k: v for k, v in overrides.items() if v is not None})
    if seed is not None:
        kv["seed"] = str(seed)
    try:
        return parse_train_config(kv)
    except KeyError as e:
        raise UsageError(f"unknown config key: train.{e.args[0]}")
    except ValueError as e:
        raise UsageError(f"invalid train config: {e}")


def resolve_seed(arg_seed: Optional[int]) -> Optional[int]:
    if arg_seed is not None:
        return arg_seed
    env = os.environ.get("DARTKIT_SEED")
    if env is None or env == "":
        return None
    try:
        return int(env)
    except ValueError:
        raise UsageError(f"DARTKIT_SEED must be an integer, got {env!r}")


def prepare_out(path: str, force: bool) -> Path:
    out = Path(path)
    if out.exists() and any(out.iterdir()):
        if not force:
            raise UsageError(f"output directory {out} is not empty; pass --force to overwrite")
        shutil.rmtree(out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_data(path: str):
    try:
        return load_scenario(path)
    except (FileNotFoundError, ManifestError, DtsrFormatError, KeyError, ValueError) as e:
        raise DataError(f"cannot load scenario from {path}: {e}")


def _write_report(out: Path, lines: Sequence[str]) -> None:
    (out / "report.txt").write_text("\n".join(lines) + "\n")


# -- subcommands --------------------------------------------------------------

def cmd_synth(args) -> int:
    cfg = _scenario_config(load_config(args.config, "synth")["synth"], resolve_seed(args.seed))
    out = prepare_out(args.out, args.force)
    sc = generate_scenario(cfg)
    save_scenario(sc, out)
    report = stats_report(sc, "train")
    write_distribution_csv(out / "distribution.csv", report)
    lines = [f"config_hash={config_hash(config_lines(cfg))}", f"n_samples={cfg.n_samples}",
             f"n_train={len(sc.train)}", f"n_val={len(sc.val)}", f"n_test={len(sc.test)}"]
    for thr, row in report.items():
        lines.append(f"train_mean_pct@{thr:g}={row['mean_pct']:.4f}")
        lines.append(f"train_zero_frac@{thr:g}={row['zero_frac']:.4f}")
    _write_report(out, lines)
    return EXIT_OK


def _train_overrides(args) -> Dict[str, str]:
    keys = ("beta", "regime", "sampling", "model")
    return {k: (None if getattr(args, k, None) is None else str(getattr(args, k))) for k in keys}


def cmd_train(args) -> int:
    conf = load_config(args.config, "train")
    cfg = _train_config(conf["train"], resolve_seed(args.seed), _train_overrides(args))
    sc = _load_data(args.data)
    out = prepare_out(args.out, args.force)
    train_from_config(sc, cfg, out)
    return EXIT_OK


def _load_run(run_dir: Path):
    cfg = _train_config(_parse_kv((run_dir / "config.txt").read_text()), None, {})
    state = load_checkpoint(run_dir / "checkpoint")
    kv = _parse_kv((run_dir / "checkpoint" / "normalization.txt").read_text())
    norm = NormStats(tuple(kv["channels"].split(",")), tuple(float(v) for v in kv["mean"].split(",")),
                     tuple(float(v) for v in kv["std"].split(",")))
    scaling = TargetScaling(float(kv["target_mean"]), float(kv["target_std"]))
    model = build_model(cfg)
    model.load_state_dict(state)
    return cfg, model, norm, scaling


def cmd_eval(args) -> int:
    sc = _load_data(args.data)
    out = prepare_out(args.out, args.force)
    test = sc.split("test")
    obs = [r.target.values for r in test]
    ids = [r.id for r in test]
    if args.run is not None:
        run = Path(args.run)
        if not (run / "checkpoint").is_dir():
            raise DataError(f"no checkpoint under {run}")
        cfg, model, norm, scaling = _load_run(run)
        arr = _arrays(test, cfg.channels, norm)
        preds = list(predict(model, arr.x, scaling))
        head = [f"config_hash={config_hash(cfg.as_lines())}", "source=checkpoint"]
    elif args.baseline == "mos":
        channels = tuple(c for c in CHANNELS if c in args.channels.split(","))
        if not sc.coarse:
            raise DataError("scenario has no coarse predictors for the regression baseline")
        model = mos_fit([(p.select(channels), t) for p, t in coarse_pairs(sc, "train")])
        save_mos(out / "mos.dtsr", model)
        preds = [mos_predict(model, p.select(channels)).values for p, _ in coarse_pairs(sc, "test")]
        head = [f"config_hash={config_hash(['mos'] + list(channels))}", "source=mos"]
    else:
        factor = sc.config.fine_dims[0] // sc.config.coarse_dims[0]
        preds = [bicubic_baseline(r.target, factor).values for r in test]
        head = [f"config_hash={config_hash(['bicubic', str(factor)])}", "source=bicubic"]
    summary = evaluate_fields(preds, obs, ids)
    write_scores_csv(out / "scores.csv", summary.rows)
    lines = head + [f"n_test_significant={summary.n_significant}"]
    for thr, s in summary.scores.items():
        for k, (m, sd) in s.items():
            lines.append(f"{k}@{thr:g}={m:.6f}+-{sd:.6f}")
    for k, (m, sd) in summary.bulk.items():
        lines.append(f"{k}={m:.6f}+-{sd:.6f}")
    _write_report(out, lines)
    return EXIT_OK


def _cell(task):
    """Worker for parallel sweep/ablation cells."""
    data_dir, cfg, cell_dir = task
    sc = load_scenario(data_dir)
    return train_from_config(sc, cfg, cell_dir)


def _run_cells(data_dir: str, cells: List[Tuple[TrainConfig, Path]], jobs: int, sc=None):
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            return list(ex.map(_cell, [(data_dir, c, d) for c, d in cells]))
    data = None
    reports = []
    for cfg, d in cells:
        if data is None or data[0] != cfg.channels:
            data = (cfg.channels, prepare_training_data(sc, cfg.channels))
        reports.append(train_from_config(sc, cfg, d, data[1]))
    return reports


def _floats(text: str) -> List[float]:
    try:
        return [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise UsageError(f"expected comma-separated numbers, got {text!r}")


def cmd_sweep_beta(args) -> int:
    conf = load_config(args.config, "train")
    base = _train_config(conf["train"], resolve_seed(args.seed), {})
    sc = _load_data(args.data)
    out = prepare_out(args.out, args.force)
    regimes = [r for r in args.regimes.split(",") if r]
    bad = [r for r in regimes if r not in ("conservative", "aggressive")]
    if bad:
        raise UsageError(f"unknown regime(s) {bad}")
    betas = _floats(args.betas)
    cells = [(replace(base, beta=b, regime=r, model="dart"), out / f"beta{b:g}_{r}")
             for r in regimes for b in betas]
    reports = _run_cells(args.data, cells, args.jobs, sc)
    rows = [sweep_row(c.beta, c.regime, rep) for (c, _), rep in zip(cells, reports)]
    write_table(out / "beta_sweep.csv", rows, SWEEP_COLUMNS)
    lines = [f"config_hash={config_hash(base.as_lines() + [args.betas, args.regimes])}", f"cells={len(rows)}"]
    lines += [f"beta={r['beta']:g} regime={r['regime']} csi@220={r['csi']:.6f} bias@220={r['bias']:.6f}"
              for r in rows]
    _write_report(out, lines)
    return EXIT_OK


def cmd_ablate(args) -> int:
    conf = load_config(args.config, "train")
    base = _train_config(conf["train"], resolve_seed(args.seed), {})
    sc = _load_data(args.data)
    missing = [c for c in CHANNELS if c not in sc.train[0].predictors.channel_names]
    if missing:
        raise DataError(f"ablation needs all five channels; scenario lacks {missing}")
    out = prepare_out(args.out, args.force)
    if args.combos == "all":
        combos = list(ABLATION_COMBOS)
    else:
        combos = [tuple(c for c in CHANNELS if c in part.split("+")) for part in args.combos.split(",")]
        if CHANNELS not in combos:
            combos.append(CHANNELS)
    cells = [(replace(base, channels=c), out / combo_key(c)) for c in combos]
    reports = dict(zip(combos, _run_cells(args.data, cells, args.jobs, sc)))
    rows = ablation_rows(reports)
    full = reports[CHANNELS].test.scores[220.0]["csi"][0]
    write_table(out / "ablation.csv", rows, ABLATION_COLUMNS)
    lines = [f"config_hash={config_hash(base.as_lines() + [combo_key(c) for c in combos])}",
             f"combos={len(combos)}", f"csi@220_full={full:.6f}"]
    lines += [f"{r['combo']} csi@220={r['csi@220']:.6f} pct_delta={r['pct_delta_csi@220']}" for r in rows]
    _write_report(out, lines)
    return EXIT_OK


def cmd_verify_map(args) -> int:
    try:
        pred = read_dtsr(args.pred)
        obs = read_dtsr(args.obs)
    except (FileNotFoundError, DtsrFormatError) as e:
        raise DataError(str(e))
    if pred.shape != obs.shape or pred.ndim != 2:
        raise DataError(f"pred {pred.shape} and obs {obs.shape} must be equal 2-D shapes")
    out = prepare_out(args.out, args.force)
    vmap = verification_map(pred, obs, args.threshold)
    write_verification_map(out, "verification_map", vmap)
    t = table_from_map(vmap)
    s = scores(contingency(pred, obs, args.threshold))
    with open(out / "categories.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["hits", "misses", "false_alarms", "correct_negatives", "csi", "pod", "far", "bias", "hss"])
        w.writerow([t.hits, t.misses, t.false_alarms, t.correct_negatives, f"{s.csi:.10g}", f"{s.pod:.10g}",
                    f"{s.far:.10g}", f"{s.bias:.10g}", f"{s.hss:.10g}"])
    digest = hashlib.sha256(pred.tobytes() + obs.tobytes()).hexdigest()[:16]
    _write_report(out, [f"config_hash={digest}", f"threshold={args.threshold:g}", f"hits={t.hits}",
                        f"misses={t.misses}", f"false_alarms={t.false_alarms}",
                        f"correct_negatives={t.correct_negatives}", f"csi={s.csi:.6f}", f"bias={s.bias:.6f}"])
    return EXIT_OK


# -- report -------------------------------------------------------------------

def scatter_svg(points: Sequence[Tuple[float, float, str]], x_label: str = "bias", y_label: str = "CSI@220",
                width: int = 480, height: int = 360) -> str:
    """Labelled scatter plot as a standalone SVG document."""
    pad = 50
    xs = [p[0] for p in points] or [0.0]
    ys = [p[1] for p in points] or [0.0]
    x0, x1 = min(xs + [0.0]), max(xs + [1.0])
    y0, y1 = min(ys + [0.0]), max(ys + [0.1])
    x1 = x1 if x1 > x0 else x0 + 1
    y1 = y1 if y1 > y0 else y0 + 1

    def sx(v):
        return pad + (v - x0) / (x1 - x0) * (width - 2 * pad)

    def sy(v):
        return height - pad - (v - y0) / (y1 - y0) * (height - 2 * pad)

    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
             f'viewBox="0 0 {width} {height}">',
             f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
             f'<line x1="{pad}" y1="{height - pad}" x2="{width - pad}" y2="{height - pad}" stroke="black"/>',
             f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{height - pad}" stroke="black"/>',
             f'<text x="{width / 2}" y="{height - 12}" text-anchor="middle" font-size="12">{x_label}</text>',
             f'<text x="14" y="{height / 2}" text-anchor="middle" font-size="12" '
             f'transform="rotate(-90 14 {height / 2})">{y_label}</text>']
    for v in np.linspace(x0, x1, 5):
        parts.append(f'<text x="{sx(v):.1f}" y="{height - pad + 16}" text-anchor="middle" font-size="10">{v:.2f}</text>')
    for v in np.linspace(y0, y1, 5):
        parts.append(f'<text x="{pad - 6}" y="{sy(v) + 3:.1f}" text-anchor="end" font-size="10">{v:.2f}</text>')
    for x, y, label in points:
        parts.append(f'<circle cx="{sx(x):.1f}" cy="{sy(y):.1f}" r="4" fill="steelblue"/>')
        parts.append(f'<text x="{sx(x) + 6:.1f}" y="{sy(y) - 6:.1f}" font-size="10">{label}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def _read_csv(path: Path) -> List[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _summarize_scores(path: Path) -> Dict[str, float]:
    """Per-sample means at 220 K from a stored scores CSV."""
    rows = [r for r in _read_csv(path) if float(r["threshold"]) == 220.0]
    if not rows:
        return {}
    return {k: float(np.mean([float(r[k]) for r in rows])) for k in ("csi", "pod", "far", "bias", "hss")}


def cmd_report(args) -> int:
    runs = Path(args.runs)
    if not runs.is_dir():
        raise DataError(f"runs directory not found: {runs}")
    out = Path(args.out) if args.out else runs / "report"
    out = prepare_out(str(out), args.force)
    points, rows = [], []
    sweep_files = sorted(runs.rglob("beta_sweep.csv"))
    for f in sweep_files:
        for r in _read_csv(f):
            label = f"b{float(r['beta']):g}-{r['regime'][:3]}"
            rows.append({"source": str(f.parent.relative_to(runs)), "label": label,
                         "csi": float(r["csi"]), "bias": float(r["bias"]), "pod": float(r["pod"]),
                         "far": float(r["far"])})
    if not sweep_files:
        for f in sorted(runs.rglob("scores.csv")):
            if out in f.parents:
                continue
            s = _summarize_scores(f)
            if s:
                rows.append({"source": str(f.parent.relative_to(runs)), "label": f.parent.name,
                             "csi": s["csi"], "bias": s["bias"], "pod": s["pod"], "far": s["far"]})
    if not rows:
        raise DataError(f"no beta_sweep.csv or scores.csv found under {runs}")
    for r in rows:
        points.append((r["bias"], r["csi"], r["label"]))
    write_table(out / "summary.csv", rows, ["source", "label", "csi", "bias", "pod", "far"])
    (out / "bias_csi.svg").write_text(scatter_svg(points))
    digest = hashlib.sha256((out / "summary.csv").read_bytes()).hexdigest()[:16]
    best = max(rows, key=lambda r: r["csi"])
    _write_report(out, [f"config_hash={digest}", f"configurations={len(rows)}",
                        f"best={best['label']} csi@220={best['csi']:.6f} bias@220={best['bias']:.6f}"])
    return EXIT_OK


# -- entry point --------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="dartkit", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def common(sp, data=True, out=True):
        sp.add_argument("--config")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--force", action="store_true")
        if data:
            sp.add_argument("--data", required=True)
        if out:
            sp.add_argument("--out", required=True)

    s = sub.add_parser("synth", help="generate a synthetic scenario")
    common(s, data=False)
    s.set_defaults(fn=cmd_synth)

    s = sub.add_parser("train", help="train one model")
    common(s)
    s.add_argument("--beta", type=float)
    s.add_argument("--regime", choices=("conservative", "aggressive"))
    s.add_argument("--sampling", choices=("uniform", "weighted"))
    s.add_argument("--model", choices=("dart", "unet"))
    s.set_defaults(fn=cmd_train)

    s = sub.add_parser("eval", help="score a checkpoint or a classical baseline on the test split")
    common(s)
    g = s.add_mutually_exclusive_group(required=True)
    g.add_argument("--run")
    g.add_argument("--baseline", choices=("mos", "bicubic"))
    s.add_argument("--channels", default=",".join(("T500", "T850", "RH700", "W500")))
    s.set_defaults(fn=cmd_eval)

    s = sub.add_parser("sweep-beta", help="beta x regime sweep")
    common(s)
    s.add_argument("--betas", default=",".join(f"{b:g}" for b in SWEEP_BETAS))
    s.add_argument("--regimes", default="conservative,aggressive")
    s.add_argument("--jobs", type=int, default=1)
    s.set_defaults(fn=cmd_sweep_beta)

    s = sub.add_parser("ablate", help="predictor-subset ablation")
    common(s)
    s.add_argument("--combos", default="all", help="'all' or comma-separated subsets joined by '+'")
    s.add_argument("--jobs", type=int, default=1)
    s.set_defaults(fn=cmd_ablate)

    s = sub.add_parser("verify-map", help="per-pixel verification map")
    s.add_argument("--pred", required=True)
    s.add_argument("--obs", required=True)
    s.add_argument("--threshold", type=float, default=220.0)
    s.add_argument("--out", required=True)
    s.add_argument("--force", action="store_true")
    s.set_defaults(fn=cmd_verify_map)

    s = sub.add_parser("report", help="aggregate stored run CSVs into a table and SVG")
    s.add_argument("--runs", required=True)
    s.add_argument("--out")
    s.add_argument("--force", action="store_true")
    s.set_defaults(fn=cmd_report)
    return p


def run(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("missing subcommand")
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        return args.fn(args)
    except UsageError as e:
        print(f"dartkit: usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as e:
        print(f"dartkit: data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (NonFiniteLossError, NonFiniteGradientError, FloatingPointError) as e:
        print(f"dartkit: numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
