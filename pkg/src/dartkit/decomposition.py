"""Background/extreme target split, eventfulness and oversampling weights."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Dict, Iterable, Sequence

import numpy as np

SPLIT_THRESHOLD = 225.0
DANGEROUS = 220.0
REPORT_THRESHOLDS = (230.0, 220.0, 210.0)
BASE_WEIGHT = 0.1


@dataclass
class DecomposedTarget:
    t_bg: np.ndarray
    t_res: np.ndarray
    split_threshold: float = SPLIT_THRESHOLD


def _values(x) -> np.ndarray:
    return np.asarray(getattr(x, "values", x), dtype=np.float32)


def decompose(t_gt, split: float = SPLIT_THRESHOLD) -> DecomposedTarget:
    """Cap the field at ``split`` (background) and keep the cold remainder (residual).

    Both parts are float32 and ``t_bg + t_res`` reproduces ``t_gt`` bit for bit.
    """
    v = _values(t_gt)
    t_bg = np.maximum(v, np.float32(split))
    t_res = v - t_bg
    return DecomposedTarget(t_bg, t_res, float(split))


def recombine(d: DecomposedTarget) -> np.ndarray:
    return d.t_bg + d.t_res


def eventfulness(t_gt, threshold: float = DANGEROUS) -> float:
    """Fraction of pixels at or below ``threshold``."""
    v = _values(t_gt)
    return float(np.count_nonzero(v <= threshold)) / v.size


def sampler_weight(eventfulness_fraction: float) -> float:
    if not 0.0 <= eventfulness_fraction <= 1.0:
        raise ValueError(f"eventfulness must lie in [0, 1], got {eventfulness_fraction}")
    return eventfulness_fraction + BASE_WEIGHT


@dataclass
class EventStats:
    pct_le_230: float
    pct_le_220: float
    pct_le_210: float
    sampler_weight: float


def event_stats(t_gt) -> EventStats:
    e230, e220, e210 = (eventfulness(t_gt, t) for t in REPORT_THRESHOLDS)
    return EventStats(e230, e220, e210, sampler_weight(e220))


def dataset_distribution_report(targets: Iterable, thresholds: Sequence[float] = REPORT_THRESHOLDS
                                ) -> Dict[float, Dict[str, float]]:
    """Per-threshold pixel-percentage statistics across samples.

    Keys per threshold: ``mean_pct``, ``std_pct`` (population), ``median_pct``,
    ``zero_count``, ``zero_frac``, ``lt1_count``, ``lt1_frac``, ``n``.
    """
    targets = list(targets)
    if not targets:
        raise ValueError("empty dataset")
    report = {}
    for thr in thresholds:
        pct = np.array([100.0 * eventfulness(t, thr) for t in targets])
        zero = int(np.count_nonzero(pct == 0))
        lt1 = int(np.count_nonzero(pct < 1.0))
        report[float(thr)] = {
            "mean_pct": float(pct.mean()), "std_pct": float(pct.std()),
            "median_pct": float(np.median(pct)),
            "zero_count": zero, "zero_frac": zero / len(pct),
            "lt1_count": lt1, "lt1_frac": lt1 / len(pct), "n": len(pct),
        }
    return report


def write_distribution_csv(path, report: Dict[float, Dict[str, float]]) -> None:
    cols = ["threshold", "mean_pct", "std_pct", "median_pct", "zero_count", "zero_frac",
            "lt1_count", "lt1_frac", "n"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for thr, row in report.items():
            w.writerow([thr] + [row[c] for c in cols[1:]])
