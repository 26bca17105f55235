"""Categorical and bulk verification of brightness-temperature forecasts.

An event is a pixel at or below the threshold (cold cloud tops). Scores with
a zero denominator are reported as 0 and listed in ``ScoreSet.degenerate``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .tensorcore.tensor import Tensor

THRESHOLDS = (230.0, 220.0, 210.0)
ROC_SWEEP = np.arange(180.0, 281.0, 1.0)

HIT, MISS, FALSE_ALARM, CORRECT_NEGATIVE = 0, 1, 2, 3
CATEGORY_NAMES = ("hit", "miss", "false_alarm", "correct_negative")


@dataclass(frozen=True)
class ContingencyTable:
    hits: int
    misses: int
    false_alarms: int
    correct_negatives: int

    @property
    def total(self) -> int:
        return self.hits + self.misses + self.false_alarms + self.correct_negatives

    def __add__(self, other: "ContingencyTable") -> "ContingencyTable":
        return ContingencyTable(self.hits + other.hits, self.misses + other.misses,
                                self.false_alarms + other.false_alarms,
                                self.correct_negatives + other.correct_negatives)


@dataclass
class ScoreSet:
    csi: float
    hss: float
    pod: float
    far: float
    bias: float
    degenerate: Tuple[str, ...] = ()

    def as_dict(self) -> Dict[str, float]:
        return {"csi": self.csi, "hss": self.hss, "pod": self.pod, "far": self.far, "bias": self.bias}


def _check_pair(pred: np.ndarray, obs: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    pred = np.asarray(pred, dtype=np.float64)
    obs = np.asarray(obs, dtype=np.float64)
    if pred.shape != obs.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape} vs obs {obs.shape}")
    return pred, obs


def contingency(pred, obs, threshold: float = 220.0) -> ContingencyTable:
    pred, obs = _check_pair(pred, obs)
    p = pred <= threshold
    o = obs <= threshold
    a = int(np.count_nonzero(p & o))
    c = int(np.count_nonzero(o & ~p))
    b = int(np.count_nonzero(p & ~o))
    d = int(p.size - a - b - c)
    return ContingencyTable(a, c, b, d)


def _ratio(num: float, den: float, name: str, flags: List[str]) -> float:
    if den == 0:
        flags.append(name)
        return 0.0
    return num / den


def scores(t: ContingencyTable) -> ScoreSet:
    a, b, c, d = t.hits, t.false_alarms, t.misses, t.correct_negatives
    flags: List[str] = []
    csi = _ratio(a, a + b + c, "csi", flags)
    pod = _ratio(a, a + c, "pod", flags)
    far = _ratio(b, a + b, "far", flags)
    bias = _ratio(a + b, a + c, "bias", flags)
    hss = _ratio(2.0 * (a * d - b * c), (a + c) * (c + d) + (a + b) * (b + d), "hss", flags)
    return ScoreSet(csi, hss, pod, far, bias, tuple(flags))


def csi(t: ContingencyTable) -> float:
    return scores(t).csi


def pod(t: ContingencyTable) -> float:
    return scores(t).pod


def far(t: ContingencyTable) -> float:
    return scores(t).far


def bias(t: ContingencyTable) -> float:
    return scores(t).bias


def hss(t: ContingencyTable) -> float:
    return scores(t).hss


def aggregate_mean(score_sets: Sequence[ScoreSet]) -> Dict[str, Tuple[float, float]]:
    """Per-sample mean and population std of each score (reporting convention)."""
    if not score_sets:
        raise ValueError("no score sets to aggregate")
    out = {}
    for key in ("csi", "hss", "pod", "far", "bias"):
        vals = np.array([getattr(s, key) for s in score_sets])
        out[key] = (float(vals.mean()), float(vals.std()))
    return out


def aggregate_pooled(tables: Sequence[ContingencyTable]) -> ScoreSet:
    """Scores of the summed contingency table."""
    total = tables[0]
    for t in tables[1:]:
        total = total + t
    return scores(total)


@dataclass
class BulkScores:
    rmse: float
    pearson_corr: float
    ssim: float
    r2: float
    degenerate: Tuple[str, ...] = ()


def bulk_scores(pred, obs, data_range: float = 200.0, window: int = 11) -> BulkScores:
    pred, obs = _check_pair(pred, obs)
    if pred.size < 2:
        raise ValueError("bulk_scores needs at least 2 pixels")
    flags = []
    err = pred - obs
    rmse = float(np.sqrt(np.mean(err ** 2)))
    po, oo = pred - pred.mean(), obs - obs.mean()
    sst = float(np.sum(oo ** 2))
    denom = float(np.sqrt(np.sum(po ** 2) * sst))
    if denom == 0:
        flags.append("pearson_corr")
        corr = 0.0
    else:
        corr = float(np.sum(po * oo) / denom)
    if sst == 0:
        flags.append("r2")
        r2 = 0.0
    else:
        r2 = 1.0 - float(np.sum(err ** 2)) / sst
    if min(obs.shape[-2:]) >= window:
        from .losses import ssim as _ssim
        s = float(_ssim(Tensor(pred), Tensor(obs), window=window, data_range=data_range).data)
    else:
        flags.append("ssim")
        s = 0.0
    return BulkScores(rmse, corr, s, r2, tuple(flags))


@dataclass
class RocCurve:
    thresholds: np.ndarray
    fpr: np.ndarray
    tpr: np.ndarray
    auc: float
    degenerate: bool = False


def roc_auc(pred, obs, event_threshold: float = 220.0, sweep: Optional[np.ndarray] = None) -> RocCurve:
    """ROC from sweeping a cold threshold over ``pred``; trapezoidal AUC.

    Truth is ``obs <= event_threshold``; at each sweep value ``t`` a pixel is
    forecast positive when ``pred <= t``. (0,0) and (1,1) are appended.
    """
    pred, obs = _check_pair(pred, obs)
    sweep = ROC_SWEEP if sweep is None else np.asarray(sweep, dtype=np.float64)
    truth = (obs <= event_threshold).ravel()
    p = pred.ravel()
    n_pos = int(truth.sum())
    n_neg = truth.size - n_pos
    degenerate = n_pos == 0 or n_neg == 0
    tpr = np.empty(sweep.size)
    fpr = np.empty(sweep.size)
    # counts of positives/negatives with pred <= t, via sorted search
    pos_sorted = np.sort(p[truth])
    neg_sorted = np.sort(p[~truth])
    for i, t in enumerate(sweep):
        tp = np.searchsorted(pos_sorted, t, side="right")
        fp = np.searchsorted(neg_sorted, t, side="right")
        tpr[i] = tp / n_pos if n_pos else 0.0
        fpr[i] = fp / n_neg if n_neg else 0.0
    xs = np.concatenate([[0.0], fpr, [1.0]])
    ys = np.concatenate([[0.0], tpr, [1.0]])
    order = np.lexsort((ys, xs))
    xs, ys = xs[order], ys[order]
    auc = float(np.sum((xs[1:] - xs[:-1]) * (ys[1:] + ys[:-1]) / 2.0))
    return RocCurve(sweep, fpr, tpr, auc, degenerate)


def coverage_pct(field, threshold: float = 220.0) -> float:
    field = np.asarray(field)
    return 100.0 * np.count_nonzero(field <= threshold) / field.size


def filter_significant(fields: Sequence, min_coverage: float = 1.0, threshold: float = 220.0) -> List[int]:
    """Indices of fields whose cold coverage is at least ``min_coverage`` percent.

    The percentage is converted to a pixel count rounded to the nearest whole
    pixel, so 655 of 65536 cold pixels (0.9995%) counts as 1% coverage.
    """
    keep = []
    for i, f in enumerate(fields):
        f = np.asarray(f)
        need = int(np.floor(min_coverage * f.size / 100.0 + 0.5))
        if np.count_nonzero(f <= threshold) >= need:
            keep.append(i)
    return keep


def verification_map(pred, obs, threshold: float = 220.0) -> np.ndarray:
    """Per-pixel category codes: 0 hit, 1 miss, 2 false alarm, 3 correct negative."""
    pred, obs = _check_pair(pred, obs)
    p = pred <= threshold
    o = obs <= threshold
    out = np.full(pred.shape, CORRECT_NEGATIVE, dtype=np.uint8)
    out[p & o] = HIT
    out[o & ~p] = MISS
    out[p & ~o] = FALSE_ALARM
    return out


def table_from_map(vmap: np.ndarray) -> ContingencyTable:
    counts = np.bincount(np.asarray(vmap).ravel(), minlength=4)
    return ContingencyTable(int(counts[HIT]), int(counts[MISS]), int(counts[FALSE_ALARM]),
                            int(counts[CORRECT_NEGATIVE]))


def write_pgm(path, vmap: np.ndarray) -> None:
    """Binary PGM with category codes 0..3 (maxval 3)."""
    vmap = np.asarray(vmap, dtype=np.uint8)
    h, w = vmap.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n3\n".encode("ascii"))
        fh.write(vmap.tobytes())


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    # header: magic, width, height, maxval separated by whitespace
    parts = []
    pos = 0
    while len(parts) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        start = pos
        while not data[pos:pos + 1].isspace():
            pos += 1
        parts.append(data[start:pos].decode("ascii"))
    pos += 1
    if parts[0] != "P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h = int(parts[1]), int(parts[2])
    return np.frombuffer(data[pos:pos + w * h], dtype=np.uint8).reshape(h, w).copy()


PALETTE_LEGEND = "0\thit\tgreen\n1\tmiss\tred\n2\tfalse_alarm\tyellow\n3\tcorrect_negative\tgray\n"


def write_verification_map(out_dir, name: str, vmap: np.ndarray) -> Tuple[Path, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    pgm = out_dir / f"{name}.pgm"
    legend = out_dir / f"{name}.legend.txt"
    write_pgm(pgm, vmap)
    legend.write_text(PALETTE_LEGEND)
    return pgm, legend


SCORE_COLUMNS = ["sample_id", "threshold", "hits", "misses", "false_alarms", "correct_negatives",
                 "csi", "hss", "pod", "far", "bias", "rmse", "pearson_corr", "ssim", "r2",
                 "coverage_pct", "degenerate"]


def score_rows(sample_id: str, pred, obs, thresholds: Iterable[float] = THRESHOLDS) -> List[dict]:
    """One scores-CSV row per threshold for a single sample."""
    bulk = bulk_scores(pred, obs)
    cov = coverage_pct(obs)
    rows = []
    for thr in thresholds:
        t = contingency(pred, obs, thr)
        s = scores(t)
        flags = list(s.degenerate) + list(bulk.degenerate)
        rows.append({
            "sample_id": sample_id, "threshold": thr,
            "hits": t.hits, "misses": t.misses, "false_alarms": t.false_alarms,
            "correct_negatives": t.correct_negatives,
            **s.as_dict(),
            "rmse": bulk.rmse, "pearson_corr": bulk.pearson_corr, "ssim": bulk.ssim, "r2": bulk.r2,
            "coverage_pct": cov, "degenerate": ";".join(flags),
        })
    return rows


def write_scores_csv(path, rows: Sequence[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=SCORE_COLUMNS)
        w.writeheader()
        for r in rows:
            w.writerow({k: (f"{v:.10g}" if isinstance(v, float) else v) for k, v in r.items()})
