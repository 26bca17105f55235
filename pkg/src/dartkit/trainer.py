"""Deterministic training loop, evaluation, the beta sweep and the predictor ablation."""

from __future__ import annotations

import csv
import hashlib
import logging
import time
from dataclasses import dataclass, field, fields, replace
from fractions import Fraction
from pathlib import Path
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from .dartnet import Dart, DartConfig, SingleDecoderUNet
from .decomposition import decompose, sampler_weight, eventfulness
from .fields import CHANNELS, NormStats, compute_norm_stats
from .losses import (CompositeWeights, TierSpec, advanced_loss, composite_dart_loss, mse,
                     tiered_weighted_mse)
from .synthlab import Scenario
from .tensorcore import Tensor, no_grad
from .tensorcore.dtsr import save_checkpoint
from .tensorcore.nn import Module
from .tensorcore.optim import OptimizerState, adamw_step, clip_grad_norm
from .verify import (THRESHOLDS, ScoreSet, aggregate_mean, aggregate_pooled, bulk_scores,
                     contingency, filter_significant, score_rows, scores, write_scores_csv)

log = logging.getLogger(__name__)

DEFAULT_CHANNELS = ("T500", "T850", "RH700", "W500")


class NonFiniteLossError(FloatingPointError):
    """Training produced a NaN/Inf loss; the last good checkpoint is kept."""

    def __init__(self, message: str, last_good_state: Optional[Dict[str, np.ndarray]] = None,
                 epoch: int = 0):
        super().__init__(message)
        self.last_good_state = last_good_state
        self.epoch = epoch


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    weight_decay: float = 1e-2
    batch_size: int = 4
    max_epochs: int = 50
    patience: int = 10
    min_delta: float = 1e-4
    clip_max_norm: float = 1.0
    alpha: float = 0.5
    beta: float = 1.5
    delta: float = 0.4
    regime: str = "conservative"      # conservative | aggressive
    sampling: str = "weighted"        # uniform | weighted
    seed: int = 1
    model: str = "dart"               # dart | unet
    unet_loss: str = "tiered"         # tiered | mse | advanced (single-decoder objective)
    tier_normalize: str = "weights"   # weights | pixels
    channels: Tuple[str, ...] = DEFAULT_CHANNELS
    width_scale: Fraction = Fraction(1, 4)

    def __post_init__(self):
        if self.patience >= self.max_epochs:
            raise ValueError(f"patience ({self.patience}) must be below max_epochs ({self.max_epochs})")
        if not self.min_delta > 0:
            raise ValueError("min_delta must be positive")
        if self.learning_rate < 0 or self.weight_decay < 0:
            raise ValueError("learning_rate and weight_decay must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if self.regime not in ("conservative", "aggressive"):
            raise ValueError(f"unknown regime {self.regime!r}")
        if self.sampling not in ("uniform", "weighted"):
            raise ValueError(f"unknown sampling {self.sampling!r}")
        if self.model not in ("dart", "unet"):
            raise ValueError(f"unknown model {self.model!r}")
        if self.unet_loss not in ("tiered", "mse", "advanced"):
            raise ValueError(f"unknown unet_loss {self.unet_loss!r}")
        bad = [c for c in self.channels if c not in CHANNELS]
        if bad or not self.channels:
            raise ValueError(f"invalid channel set {self.channels}")
        object.__setattr__(self, "channels", tuple(c for c in CHANNELS if c in self.channels))
        object.__setattr__(self, "width_scale", Fraction(self.width_scale))

    def as_lines(self) -> List[str]:
        out = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(v)
            out.append(f"{f.name}={v}")
        return out


# Single-core CPU schedule used by the acceptance experiments and scripts.
DESK_RECIPE = TrainConfig(learning_rate=1e-3, max_epochs=12, patience=4, width_scale=Fraction(1, 8),
                          regime="aggressive", beta=1.2, sampling="weighted")


def architecture_study_config(cfg: TrainConfig) -> TrainConfig:
    """Shorter 25-epoch / patience-7 schedule used for single-decoder parity runs."""
    return replace(cfg, max_epochs=25, patience=7)


def parse_train_config(kv: Dict[str, str], base: TrainConfig = TrainConfig()) -> TrainConfig:
    """Override ``base`` from ``key=value`` strings; unknown keys raise KeyError."""
    kinds = {f.name: type(getattr(base, f.name)) for f in fields(base)}
    kwargs = {}
    for k, v in kv.items():
        if k not in kinds:
            raise KeyError(k)
        kind = kinds[k]
        if kind is tuple:
            kwargs[k] = tuple(c.strip() for c in v.split(",") if c.strip())
        elif kind is Fraction:
            kwargs[k] = Fraction(v)
        else:
            kwargs[k] = kind(v)
    return replace(base, **kwargs)


def config_hash(lines: Sequence[str]) -> str:
    return hashlib.sha256("\n".join(lines).encode()).hexdigest()[:16]


# -- sampling -----------------------------------------------------------------

def weighted_batch_stream(weights, batch_size: int, seed: int, epochs: int = 1) -> Iterator[np.ndarray]:
    """Batches of indices drawn with replacement, probability proportional to weight.

    Each epoch draws ``len(weights)`` indices.
    """
    w = np.asarray(weights, dtype=np.float64)
    if w.ndim != 1 or w.size == 0:
        raise ValueError("weights must be a non-empty 1-D sequence")
    if np.any(w < 0) or not np.all(np.isfinite(w)):
        raise ValueError("weights must be finite and non-negative")
    total = w.sum()
    if total <= 0:
        raise ValueError("at least one weight must be positive")
    rng = np.random.default_rng(seed)
    p = w / total
    for _ in range(epochs):
        idx = rng.choice(w.size, size=w.size, replace=True, p=p)
        for start in range(0, w.size, batch_size):
            yield idx[start:start + batch_size]


def uniform_batch_stream(n: int, batch_size: int, seed: int, epochs: int = 1) -> Iterator[np.ndarray]:
    """A fresh permutation per epoch, in batches."""
    rng = np.random.default_rng(seed)
    for _ in range(epochs):
        idx = rng.permutation(n)
        for start in range(0, n, batch_size):
            yield idx[start:start + batch_size]


# -- data preparation ---------------------------------------------------------

@dataclass
class SplitArrays:
    ids: List[str]
    x: np.ndarray       # N×C×H×W normalised predictors
    t_gt: np.ndarray    # N×H×W kelvin
    t_bg: np.ndarray
    t_res: np.ndarray


@dataclass
class TargetScaling:
    """``final' = (T - mean) / std``; residuals scale by ``1/std`` only."""

    mean: float
    std: float

    def forward(self, t: np.ndarray) -> np.ndarray:
        return ((t - self.mean) / self.std).astype(np.float32)

    def residual(self, r: np.ndarray) -> np.ndarray:
        return (r / self.std).astype(np.float32)

    def inverse(self, y: np.ndarray) -> np.ndarray:
        return (y.astype(np.float64) * self.std + self.mean).astype(np.float32)


def _arrays(records, channels, norm: NormStats) -> SplitArrays:
    stacks = [r.predictors.select(channels) for r in records]
    sel = norm.select(channels)
    m = np.asarray(sel.mean, dtype=np.float64)[:, None, None]
    s = np.asarray(sel.std, dtype=np.float64)[:, None, None]
    x = np.stack([((st.values - m) / s) for st in stacks]).astype(np.float32)
    t_gt = np.stack([r.target.values for r in records]).astype(np.float32)
    d = decompose(t_gt)
    return SplitArrays([r.id for r in records], x, t_gt, d.t_bg, d.t_res)


@dataclass
class PreparedData:
    train: SplitArrays
    val: SplitArrays
    norm: NormStats
    scaling: TargetScaling
    sampler_weights: np.ndarray


def prepare_training_data(scenario: Scenario, channels: Sequence[str]) -> PreparedData:
    """Normalisation and target scaling from the training split only; no test access."""
    train = scenario.split("train")
    val = scenario.split("val")
    norm = compute_norm_stats([r.predictors.select(channels) for r in train])
    tr = _arrays(train, channels, norm)
    va = _arrays(val, channels, norm)
    scaling = TargetScaling(float(tr.t_gt.astype(np.float64).mean()), float(tr.t_gt.astype(np.float64).std()))
    weights = np.array([sampler_weight(eventfulness(t)) for t in tr.t_gt])
    return PreparedData(tr, va, norm, scaling, weights)


# -- model and loss -----------------------------------------------------------

INPUT_LAYER_WEIGHTS = ("encoder.levels.0.conv1.weight", "encoder.levels.0.proj.weight")


def _construct(cfg: TrainConfig, in_channels: int, rng: np.random.Generator) -> Module:
    arch = DartConfig(in_channels=in_channels, width_scale=cfg.width_scale)
    return Dart(arch, rng) if cfg.model == "dart" else SingleDecoderUNet(arch, rng)


def build_model(cfg: TrainConfig, in_channels: Optional[int] = None) -> Module:
    """Seeded model whose initialisation is shared across channel subsets.

    The network is drawn for all five channels and the input-layer columns of
    the absent channels are dropped, rescaled so the He-uniform bound matches
    the smaller fan-in. Two configs that differ only in ``channels`` therefore
    start from the same weights everywhere else, which pairs ablation arms.
    ``in_channels`` overrides the channel count and skips the pairing.
    """
    rng = np.random.default_rng([cfg.seed, 0x4D4F44])
    if in_channels is not None:
        return _construct(cfg, in_channels, rng)
    full = _construct(cfg, len(CHANNELS), rng)
    if cfg.channels == CHANNELS:
        return full
    keep = [CHANNELS.index(c) for c in cfg.channels]
    state = full.state_dict()
    scale = np.float32(np.sqrt(len(CHANNELS) / len(keep)))
    for name in INPUT_LAYER_WEIGHTS:
        state[name] = state[name][:, keep] * scale
    model = _construct(cfg, len(keep), np.random.default_rng(0))
    model.load_state_dict(state)
    return model


def batch_loss(model: Module, arrays: SplitArrays, idx: np.ndarray, cfg: TrainConfig,
               scaling: TargetScaling) -> Tuple[Tensor, Dict[str, float]]:
    x = Tensor(arrays.x[idx])
    t_gt = arrays.t_gt[idx]
    y = scaling.forward(t_gt)
    if cfg.model == "dart":
        out = model(x)
        return composite_dart_loss(
            out, t_gt, scaling.forward(arrays.t_bg[idx]), scaling.residual(arrays.t_res[idx]),
            target_final=y, weights=CompositeWeights(cfg.alpha, cfg.beta, cfg.delta),
            regime=cfg.regime, tier_normalize=cfg.tier_normalize)
    pred = model(x)
    if cfg.unet_loss == "mse":
        loss = mse(pred, y)
        return loss, {"total": float(loss.data)}
    if cfg.unet_loss == "tiered":
        loss = tiered_weighted_mse(pred, y, t_gt, TierSpec(), cfg.tier_normalize)
        return loss, {"total": float(loss.data)}
    return advanced_loss(pred, y, data_range=200.0 / scaling.std)


def predict(model: Module, x: np.ndarray, scaling: TargetScaling, batch_size: int = 8) -> np.ndarray:
    """Kelvin predictions in eval mode, batch by batch."""
    model.eval()
    outs = []
    with no_grad():
        for start in range(0, len(x), batch_size):
            o = model(Tensor(x[start:start + batch_size]))
            o = o.final if hasattr(o, "final") else o
            outs.append(o.data)
    return scaling.inverse(np.concatenate(outs))


# -- early stopping -----------------------------------------------------------

class EarlyStopping:
    """Stop after ``patience`` consecutive epochs without an improvement above ``min_delta``."""

    def __init__(self, patience: int, min_delta: float):
        self.patience = patience
        self.min_delta = min_delta
        self.best = np.inf
        self.best_epoch = 0
        self.wait = 0
        self.epoch = 0

    def update(self, val_loss: float) -> Tuple[bool, bool]:
        """Returns (improved, should_stop)."""
        self.epoch += 1
        if val_loss < self.best - self.min_delta:
            self.best = val_loss
            self.best_epoch = self.epoch
            self.wait = 0
            return True, False
        self.wait += 1
        return False, self.wait >= self.patience


def early_stopping_trace(val_losses: Sequence[float], patience: int = 10,
                         min_delta: float = 1e-4) -> Tuple[int, int]:
    """(best_epoch, stop_epoch) for a sequence of validation losses, 1-based."""
    es = EarlyStopping(patience, min_delta)
    for v in val_losses:
        _, stop = es.update(v)
        if stop:
            break
    return es.best_epoch, es.epoch


# -- evaluation ---------------------------------------------------------------

@dataclass
class EvalSummary:
    """Per-sample mean ± std scores over significant samples, plus pooled scores."""

    scores: Dict[float, Dict[str, Tuple[float, float]]]
    pooled: Dict[float, ScoreSet]
    bulk: Dict[str, Tuple[float, float]]
    n_samples: int
    n_significant: int
    degenerate: Dict[float, int]
    rows: List[dict] = field(default_factory=list, repr=False)

    def headline(self, threshold: float = 220.0) -> Dict[str, float]:
        return {k: v[0] for k, v in self.scores[threshold].items()}


def evaluate_fields(preds: Sequence[np.ndarray], obs: Sequence[np.ndarray], ids: Optional[Sequence[str]] = None,
                    thresholds: Sequence[float] = THRESHOLDS, min_coverage: float = 1.0) -> EvalSummary:
    """Score predictions against observations on samples with ≥ ``min_coverage`` % cold pixels."""
    ids = list(ids) if ids is not None else [f"s{i:05d}" for i in range(len(obs))]
    keep = filter_significant(obs, min_coverage)
    if not keep:
        raise ValueError("no significant samples to evaluate")
    out, pooled, degenerate = {}, {}, {}
    rows = []
    for i in keep:
        rows.extend(score_rows(ids[i], preds[i], obs[i], thresholds))
    for thr in thresholds:
        tables = [contingency(preds[i], obs[i], thr) for i in keep]
        sets = [scores(t) for t in tables]
        out[float(thr)] = aggregate_mean(sets)
        pooled[float(thr)] = aggregate_pooled(tables)
        degenerate[float(thr)] = sum(1 for s in sets if s.degenerate)
    bulks = [bulk_scores(preds[i], obs[i]) for i in keep]
    bulk = {k: (float(np.mean([getattr(b, k) for b in bulks])), float(np.std([getattr(b, k) for b in bulks])))
            for k in ("rmse", "pearson_corr", "ssim", "r2")}
    return EvalSummary(out, pooled, bulk, len(obs), len(keep), degenerate, rows)


# -- training -----------------------------------------------------------------

@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    train_terms: Dict[str, float]
    val_terms: Dict[str, float]
    mean_grad_norm: float
    clipped_fraction: float
    seconds: float


@dataclass
class RunReport:
    config: TrainConfig
    epochs: List[EpochRecord]
    best_epoch: int
    stopped_early: bool
    test: Optional[EvalSummary]
    wall_time: float
    n_parameters: int
    scaling: TargetScaling
    norm: NormStats

    @property
    def val_losses(self) -> List[float]:
        return [e.val_loss for e in self.epochs]


def _mean_terms(terms: List[Dict[str, float]], sizes: List[int]) -> Dict[str, float]:
    n = float(sum(sizes))
    keys = terms[0].keys()
    return {k: sum(t[k] * s for t, s in zip(terms, sizes)) / n for k in keys}


def _evaluate_loss(model, arrays: SplitArrays, cfg: TrainConfig, scaling: TargetScaling):
    model.eval()
    terms, sizes = [], []
    with no_grad():
        for start in range(0, len(arrays.ids), cfg.batch_size):
            idx = np.arange(start, min(start + cfg.batch_size, len(arrays.ids)))
            _, br = batch_loss(model, arrays, idx, cfg, scaling)
            terms.append(br)
            sizes.append(len(idx))
    return _mean_terms(terms, sizes)


def _copy_state(model: Module) -> Dict[str, np.ndarray]:
    return {k: v.copy() for k, v in model.state_dict().items()}


def train(model: Module, scenario: Scenario, cfg: TrainConfig, out_dir=None,
          data: Optional[PreparedData] = None, evaluate_test: bool = True,
          progress: Optional[Callable[[EpochRecord], None]] = None) -> RunReport:
    """Weighted/uniform minibatch training with early stopping and best-checkpoint restore.

    The test split is read only after the epoch loop has finished.
    """
    t0 = time.perf_counter()
    data = data if data is not None else prepare_training_data(scenario, cfg.channels)
    if data.train.x.shape[1] != model.config.in_channels:
        raise ValueError(f"model expects {model.config.in_channels} channels, data has {data.train.x.shape[1]}")
    params = model.parameters()
    opt = OptimizerState(learning_rate=cfg.learning_rate, weight_decay=cfg.weight_decay)
    stopper = EarlyStopping(cfg.patience, cfg.min_delta)
    n = len(data.train.ids)
    sampler_seed = [cfg.seed, 0x5A4D]
    if cfg.sampling == "weighted":
        stream = weighted_batch_stream(data.sampler_weights, cfg.batch_size, np.random.SeedSequence(sampler_seed).generate_state(1)[0], cfg.max_epochs)
    else:
        stream = uniform_batch_stream(n, cfg.batch_size, np.random.SeedSequence(sampler_seed).generate_state(1)[0], cfg.max_epochs)
    batches_per_epoch = -(-n // cfg.batch_size)
    epochs: List[EpochRecord] = []
    best_state = _copy_state(model)
    stopped_early = False
    for epoch in range(1, cfg.max_epochs + 1):
        te = time.perf_counter()
        model.train()
        terms, sizes, norms = [], [], []
        for _ in range(batches_per_epoch):
            idx = next(stream)
            model.zero_grad()
            loss, br = batch_loss(model, data.train, idx, cfg, data.scaling)
            if not np.isfinite(loss.data):
                raise NonFiniteLossError(f"non-finite training loss at epoch {epoch}", best_state, epoch)
            loss.backward()
            norms.append(clip_grad_norm(params, cfg.clip_max_norm))
            adamw_step(params, opt)
            terms.append(br)
            sizes.append(len(idx))
        train_terms = _mean_terms(terms, sizes)
        val_terms = _evaluate_loss(model, data.val, cfg, data.scaling)
        if not np.isfinite(val_terms["total"]):
            raise NonFiniteLossError(f"non-finite validation loss at epoch {epoch}", best_state, epoch)
        improved, stop = stopper.update(val_terms["total"])
        if improved:
            best_state = _copy_state(model)
        rec = EpochRecord(epoch, train_terms["total"], val_terms["total"], train_terms, val_terms,
                          float(np.mean(norms)), float(np.mean(np.asarray(norms) > cfg.clip_max_norm)),
                          time.perf_counter() - te)
        epochs.append(rec)
        log.info("epoch %d train %.5f val %.5f", epoch, rec.train_loss, rec.val_loss)
        if progress is not None:
            progress(rec)
        if stop:
            stopped_early = True
            break
    model.load_state_dict(best_state)
    summary = None
    if evaluate_test:
        test = scenario.split("test")
        te_arr = _arrays(test, cfg.channels, data.norm)
        preds = predict(model, te_arr.x, data.scaling)
        summary = evaluate_fields(list(preds), list(te_arr.t_gt), te_arr.ids)
    report = RunReport(cfg, epochs, stopper.best_epoch, stopped_early, summary,
                       time.perf_counter() - t0, model.num_parameters(), data.scaling, data.norm)
    if out_dir is not None:
        write_run_artifacts(out_dir, report, model)
    return report


def train_from_config(scenario: Scenario, cfg: TrainConfig, out_dir=None, data=None, **kw) -> RunReport:
    return train(build_model(cfg), scenario, cfg, out_dir, data, **kw)


# -- artifacts ----------------------------------------------------------------

EPOCH_COLUMNS = ["epoch", "train_loss", "val_loss", "mean_grad_norm", "clipped_fraction"]


def _fmt(v) -> str:
    return f"{v:.10g}" if isinstance(v, float) else str(v)


def headline_lines(report: RunReport) -> List[str]:
    lines = [f"config_hash={config_hash(report.config.as_lines())}",
             f"n_parameters={report.n_parameters}", f"best_epoch={report.best_epoch}",
             f"epochs_run={len(report.epochs)}", f"stopped_early={report.stopped_early}"]
    if report.test is not None:
        lines.append(f"n_test_significant={report.test.n_significant}")
        for thr, sc in report.test.scores.items():
            for k, (m, s) in sc.items():
                lines.append(f"{k}@{thr:g}={m:.6f}+-{s:.6f}")
        for k, (m, s) in report.test.bulk.items():
            lines.append(f"{k}={m:.6f}+-{s:.6f}")
    return lines


def write_run_artifacts(out_dir, report: RunReport, model: Module) -> Path:
    """config.txt, epochs.csv, scores.csv, checkpoint/ and report.txt (no wall-clock values)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text("\n".join(report.config.as_lines()) + "\n")
    term_keys = sorted(report.epochs[0].train_terms) if report.epochs else []
    with open(out / "epochs.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(EPOCH_COLUMNS + [f"train_{k}" for k in term_keys] + [f"val_{k}" for k in term_keys])
        for e in report.epochs:
            w.writerow([e.epoch, _fmt(e.train_loss), _fmt(e.val_loss), _fmt(e.mean_grad_norm),
                        _fmt(e.clipped_fraction)] + [_fmt(e.train_terms[k]) for k in term_keys]
                       + [_fmt(e.val_terms[k]) for k in term_keys])
    if report.test is not None:
        write_scores_csv(out / "scores.csv", report.test.rows)
    state = dict(model.state_dict())
    save_checkpoint(out / "checkpoint", state)
    norm_lines = [f"channels={','.join(report.norm.channel_names)}",
                  f"mean={','.join(repr(v) for v in report.norm.mean)}",
                  f"std={','.join(repr(v) for v in report.norm.std)}",
                  f"target_mean={report.scaling.mean!r}", f"target_std={report.scaling.std!r}"]
    (out / "checkpoint" / "normalization.txt").write_text("\n".join(norm_lines) + "\n")
    (out / "report.txt").write_text("\n".join(headline_lines(report)) + "\n")
    return out


# -- sweeps -------------------------------------------------------------------

SWEEP_BETAS = (1.0, 1.2, 1.5, 2.0)
SWEEP_COLUMNS = ["beta", "regime", "csi", "hss", "pod", "far", "bias", "csi_std", "bias_std",
                 "n_significant", "degenerate_samples", "best_epoch"]


def sweep_row(beta: float, regime: str, report: RunReport, threshold: float = 220.0) -> dict:
    sc = report.test.scores[threshold]
    row = {"beta": beta, "regime": regime}
    row.update({k: sc[k][0] for k in ("csi", "hss", "pod", "far", "bias")})
    row.update({"csi_std": sc["csi"][1], "bias_std": sc["bias"][1],
                "n_significant": report.test.n_significant,
                "degenerate_samples": report.test.degenerate[threshold], "best_epoch": report.best_epoch})
    return row


def beta_sweep(scenario: Scenario, base: TrainConfig, betas: Sequence[float] = SWEEP_BETAS,
               regimes: Sequence[str] = ("conservative", "aggressive"), out_dir=None,
               data: Optional[PreparedData] = None) -> List[dict]:
    """One train+evaluate per (beta, regime) cell with a shared seed."""
    data = data if data is not None else prepare_training_data(scenario, base.channels)
    rows = []
    for regime in regimes:
        for b in betas:
            cfg = replace(base, beta=float(b), regime=regime, model="dart")
            cell = None if out_dir is None else Path(out_dir) / f"beta{b:g}_{regime}"
            rep = train_from_config(scenario, cfg, cell, data)
            rows.append(sweep_row(float(b), regime, rep))
    if out_dir is not None:
        write_table(Path(out_dir) / "beta_sweep.csv", rows, SWEEP_COLUMNS)
    return rows


def write_table(path, rows: Sequence[dict], columns: Sequence[str]) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(columns), lineterminator="\n", extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow({k: _fmt(v) for k, v in r.items()})


def _combo(*names: str) -> Tuple[str, ...]:
    return tuple(c for c in CHANNELS if c in names)


# 5 singles, 6 pairs, 4 triplets, 5 leave-one-out, 1 full
ABLATION_COMBOS: Tuple[Tuple[str, ...], ...] = (
    _combo("IVT"), _combo("T500"), _combo("T850"), _combo("RH700"), _combo("W500"),
    _combo("T500", "W500"), _combo("RH700", "W500"), _combo("T500", "RH700"),
    _combo("T500", "T850"), _combo("IVT", "RH700"), _combo("IVT", "W500"),
    _combo("T500", "RH700", "W500"), _combo("T500", "T850", "W500"),
    _combo("IVT", "T500", "W500"), _combo("IVT", "RH700", "W500"),
) + tuple(tuple(c for c in CHANNELS if c != drop) for drop in CHANNELS) + (CHANNELS,)

# pairs and triplets picked to complete the list (only the T500/W500 pair is a named one)
FILLED_COMBOS = frozenset(ABLATION_COMBOS[6:15])

ABLATION_COLUMNS = ["combo", "n_channels", "csi@230", "csi@220", "csi@210", "rmse", "pct_delta_csi@220",
                    "delta_degenerate", "filled"]


def combo_key(combo: Sequence[str]) -> str:
    return "_".join(combo)


def ablation_run(scenario: Scenario, base: TrainConfig,
                 combos: Sequence[Tuple[str, ...]] = ABLATION_COMBOS, out_dir=None) -> List[dict]:
    """Train one model per channel subset; leave-one-out rows carry %ΔCSI@220 vs the full set."""
    combos = [tuple(c for c in CHANNELS if c in combo) for combo in combos]
    if CHANNELS not in combos:
        combos.append(CHANNELS)
    results = {}
    for combo in combos:
        cfg = replace(base, channels=combo)
        cell = None if out_dir is None else Path(out_dir) / combo_key(combo)
        rep = train_from_config(scenario, cfg, cell)
        results[combo] = rep
    rows = ablation_rows(results)
    if out_dir is not None:
        write_table(Path(out_dir) / "ablation.csv", rows, ABLATION_COLUMNS)
    return rows


def ablation_rows(results: Dict[Tuple[str, ...], RunReport]) -> List[dict]:
    """Table rows in ``results`` order; needs the full-set report for the leave-one-out deltas."""
    full = results[CHANNELS].test.scores[220.0]["csi"][0]
    rows = []
    for combo, rep in results.items():
        sc = rep.test.scores
        row = {"combo": combo_key(combo), "n_channels": len(combo),
               "csi@230": sc[230.0]["csi"][0], "csi@220": sc[220.0]["csi"][0], "csi@210": sc[210.0]["csi"][0],
               "rmse": rep.test.bulk["rmse"][0], "pct_delta_csi@220": "",
               "delta_degenerate": "", "filled": combo in FILLED_COMBOS}
        if len(combo) == len(CHANNELS) - 1:
            row["pct_delta_csi@220"], row["delta_degenerate"] = pct_delta_csi(sc[220.0]["csi"][0], full)
        rows.append(row)
    return rows


def pct_delta_csi(csi_without: float, csi_full: float) -> Tuple[float, bool]:
    """(%Δ, degenerate) with the zero-baseline guard."""
    if csi_full == 0:
        return 0.0, True
    return (csi_without - csi_full) / csi_full * 100.0, False
