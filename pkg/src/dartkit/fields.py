"""Gridded fields, IVT, regridding, normalisation and sample/manifest storage.

Grids are regular lat/lon with cell-centre registration; row 0 is the
southernmost row and column 0 the westernmost column.
"""

from __future__ import annotations

import csv
import logging
import warnings
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Dict, Iterable, List, Sequence, Tuple

import numpy as np

from .tensorcore.dtsr import read_dtsr, write_dtsr

log = logging.getLogger(__name__)

CHANNELS = ("IVT", "T500", "T850", "RH700", "W500")
UNITS = ("kelvin", "kg_m1_s1", "percent", "pa_s", "dimensionless")
CHANNEL_UNITS = {"IVT": "kg_m1_s1", "T500": "kelvin", "T850": "kelvin", "RH700": "percent", "W500": "pa_s"}
SPLITS = ("train", "val", "test")
KELVIN_BAND = (150.0, 350.0)


@dataclass(frozen=True)
class Grid:
    height: int
    width: int
    lat_min: float = 20.0
    lat_max: float = 27.0
    lon_min: float = 88.0
    lon_max: float = 93.0

    def __post_init__(self):
        if self.height < 1 or self.width < 1:
            raise ValueError("grid dimensions must be positive")
        if not self.lat_min < self.lat_max or not self.lon_min < self.lon_max:
            raise ValueError("grid bounds must satisfy min < max")

    @property
    def shape(self) -> Tuple[int, int]:
        return (self.height, self.width)

    def lat_centers(self) -> np.ndarray:
        d = (self.lat_max - self.lat_min) / self.height
        return self.lat_min + (np.arange(self.height) + 0.5) * d

    def lon_centers(self) -> np.ndarray:
        d = (self.lon_max - self.lon_min) / self.width
        return self.lon_min + (np.arange(self.width) + 0.5) * d

    def with_shape(self, height: int, width: int) -> "Grid":
        return replace(self, height=height, width=width)


@dataclass
class Field2D:
    values: np.ndarray
    grid: Grid
    units: str = "kelvin"

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float32)
        if self.values.shape != self.grid.shape:
            raise ValueError(f"values shape {self.values.shape} != grid shape {self.grid.shape}")
        if self.units not in UNITS:
            raise ValueError(f"unknown units {self.units!r}")
        if self.units == "kelvin":
            lo, hi = KELVIN_BAND
            if self.values.size and (self.values.min() < lo or self.values.max() > hi):
                raise ValueError(f"kelvin field outside plausibility band [{lo}, {hi}]: "
                                 f"min {self.values.min():.2f}, max {self.values.max():.2f}")

    @property
    def shape(self) -> Tuple[int, int]:
        return self.values.shape


@dataclass
class PredictorStack:
    """Channels in canonical order (a filtered subset of ``CHANNELS``)."""

    channel_names: Tuple[str, ...]
    values: np.ndarray  # C×H×W
    grid: Grid

    def __post_init__(self):
        self.channel_names = tuple(self.channel_names)
        unknown = [c for c in self.channel_names if c not in CHANNELS]
        if unknown:
            raise ValueError(f"unknown channels {unknown}")
        canonical = tuple(c for c in CHANNELS if c in self.channel_names)
        if canonical != self.channel_names:
            raise ValueError(f"channels must follow canonical order {canonical}, got {self.channel_names}")
        self.values = np.asarray(self.values, dtype=np.float32)
        if self.values.shape != (len(self.channel_names),) + self.grid.shape:
            raise ValueError(f"stack shape {self.values.shape} does not match "
                             f"{len(self.channel_names)} channels on {self.grid.shape}")

    @classmethod
    def from_fields(cls, fields: Dict[str, Field2D]) -> "PredictorStack":
        names = tuple(c for c in CHANNELS if c in fields)
        grids = {fields[c].grid for c in names}
        if len(grids) != 1:
            raise ValueError("all channels must share identical grid geometry")
        return cls(names, np.stack([fields[c].values for c in names]), grids.pop())

    def select(self, names: Sequence[str]) -> "PredictorStack":
        keep = tuple(c for c in CHANNELS if c in set(names))
        idx = [self.channel_names.index(c) for c in keep]
        return PredictorStack(keep, self.values[idx], self.grid)

    def field(self, name: str) -> Field2D:
        return Field2D(self.values[self.channel_names.index(name)], self.grid, CHANNEL_UNITS[name])


@dataclass
class SampleRecord:
    id: str
    timestamp: str
    predictors: PredictorStack
    target: Field2D

    def __post_init__(self):
        if self.predictors.grid != self.target.grid:
            raise ValueError("predictors and target must share grid geometry")


def _check_grids(a: Field2D, b: Field2D) -> None:
    if a.grid != b.grid:
        raise ValueError(f"grid mismatch: {a.grid} vs {b.grid}")


def ivt_magnitude(viwve: Field2D, viwvn: Field2D) -> Field2D:
    """Euclidean norm of the eastward/northward vapour-flux integrals."""
    _check_grids(viwve, viwvn)
    e = viwve.values.astype(np.float64)
    n = viwvn.values.astype(np.float64)
    return Field2D(np.hypot(e, n), viwve.grid, "kg_m1_s1")


def _fractional_index(src_centers: np.ndarray, dst_centers: np.ndarray) -> np.ndarray:
    """Positions of ``dst_centers`` in src index units, clamped to the node hull."""
    n = src_centers.size
    if n == 1:
        return np.zeros_like(dst_centers)
    step = src_centers[1] - src_centers[0]
    pos = (dst_centers - src_centers[0]) / step
    return np.clip(pos, 0.0, n - 1)


def _linear_weights(pos: np.ndarray, n: int) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    if n == 1:
        z = np.zeros(pos.shape, dtype=int)
        return z, z, np.zeros_like(pos)
    i0 = np.minimum(np.floor(pos).astype(int), n - 2)
    return i0, i0 + 1, pos - i0


def regrid_bilinear(src: Field2D, dst: Grid) -> Field2D:
    """Bilinear interpolation between the four surrounding source cell centres."""
    h, w = src.shape
    if h == 1 or w == 1:
        warnings.warn(f"degenerate source grid {h}×{w}: falling back to linear/nearest",
                      RuntimeWarning, stacklevel=2)
    py = _fractional_index(src.grid.lat_centers(), dst.lat_centers())
    px = _fractional_index(src.grid.lon_centers(), dst.lon_centers())
    y0, y1, fy = _linear_weights(py, h)
    x0, x1, fx = _linear_weights(px, w)
    v = src.values.astype(np.float64)
    fy = fy[:, None]
    fx = fx[None, :]
    out = ((1 - fy) * (1 - fx) * v[np.ix_(y0, x0)] + (1 - fy) * fx * v[np.ix_(y0, x1)]
           + fy * (1 - fx) * v[np.ix_(y1, x0)] + fy * fx * v[np.ix_(y1, x1)])
    return Field2D(out, dst, src.units)


def _catmull_rom(t: np.ndarray, a: float = -0.5) -> np.ndarray:
    """Weights of the 4 taps at offsets -1, 0, 1, 2 for fractional position t."""
    t = t[..., None]
    d = np.abs(np.array([-1.0, 0.0, 1.0, 2.0]) - t)
    w = np.where(d <= 1, (a + 2) * d ** 3 - (a + 3) * d ** 2 + 1,
                 np.where(d < 2, a * d ** 3 - 5 * a * d ** 2 + 8 * a * d - 4 * a, 0.0))
    return w


def _cubic_axis(v: np.ndarray, pos: np.ndarray, axis: int) -> np.ndarray:
    """Interpolate ``v`` along ``axis`` at fractional ``pos``.

    Out-of-range taps use cubic-consistent ghost nodes
    (``f[-1] = 3f[0] - 3f[1] + f[2]``), which keeps linear and quadratic
    data exact up to the boundary.
    """
    v = np.moveaxis(v, axis, 0)
    n = v.shape[0]
    lo = 3 * v[0] - 3 * v[1] + v[2]
    hi = 3 * v[-1] - 3 * v[-2] + v[-3]
    padded = np.concatenate([lo[None], v, hi[None]], axis=0)  # index shift +1
    i0 = np.minimum(np.floor(pos).astype(int), n - 2)
    wts = _catmull_rom(pos - i0)
    out = sum(wts[:, k].reshape((-1,) + (1,) * (v.ndim - 1)) * padded[i0 + k] for k in range(4))
    return np.moveaxis(out, 0, axis)


def regrid_bicubic(src: Field2D, dst: Grid) -> Field2D:
    """Separable Catmull-Rom (a = -0.5) interpolation; nodes are reproduced exactly."""
    h, w = src.shape
    if h < 4 or w < 4:
        raise ValueError(f"bicubic regridding needs a source of at least 4×4, got {h}×{w}")
    py = _fractional_index(src.grid.lat_centers(), dst.lat_centers())
    px = _fractional_index(src.grid.lon_centers(), dst.lon_centers())
    v = src.values.astype(np.float64)
    out = _cubic_axis(_cubic_axis(v, py, 0), px, 1)
    return Field2D(out, dst, src.units)


def regrid_stack(stack: PredictorStack, dst: Grid, method: str = "bilinear") -> PredictorStack:
    fn = {"bilinear": regrid_bilinear, "bicubic": regrid_bicubic}[method]
    out = [fn(Field2D(stack.values[i], stack.grid, CHANNEL_UNITS[c]), dst).values
           for i, c in enumerate(stack.channel_names)]
    return PredictorStack(stack.channel_names, np.stack(out), dst)


# -- normalisation ------------------------------------------------------------

@dataclass(frozen=True)
class NormStats:
    channel_names: Tuple[str, ...]
    mean: Tuple[float, ...]
    std: Tuple[float, ...]

    def __post_init__(self):
        if any(s <= 0 for s in self.std):
            raise ValueError("normalisation std must be positive for every channel")

    def select(self, names: Sequence[str]) -> "NormStats":
        idx = [self.channel_names.index(c) for c in names]
        return NormStats(tuple(names), tuple(self.mean[i] for i in idx), tuple(self.std[i] for i in idx))


def compute_norm_stats(train_stacks: Iterable[PredictorStack]) -> NormStats:
    """Per-channel mean and population std over every pixel of the training stacks."""
    stacks = list(train_stacks)
    if not stacks:
        raise ValueError("no training samples")
    names = stacks[0].channel_names
    data = np.stack([s.values for s in stacks]).astype(np.float64)  # N×C×H×W
    mean = data.mean(axis=(0, 2, 3))
    std = data.std(axis=(0, 2, 3))
    bad = [names[i] for i in np.flatnonzero(std == 0)]
    if bad:
        raise ValueError(f"zero-variance channel(s) {bad}: cannot normalise")
    return NormStats(names, tuple(float(m) for m in mean), tuple(float(s) for s in std))


def _stats_arrays(stats: NormStats, names: Sequence[str]):
    sel = stats.select(names)
    m = np.array(sel.mean, dtype=np.float64)[:, None, None]
    s = np.array(sel.std, dtype=np.float64)[:, None, None]
    return m, s


def apply_norm(stack: PredictorStack, stats: NormStats) -> PredictorStack:
    m, s = _stats_arrays(stats, stack.channel_names)
    return PredictorStack(stack.channel_names, (stack.values - m) / s, stack.grid)


def invert_norm(stack: PredictorStack, stats: NormStats) -> PredictorStack:
    m, s = _stats_arrays(stats, stack.channel_names)
    return PredictorStack(stack.channel_names, stack.values * s + m, stack.grid)


# -- persistence ---------------------------------------------------------------

def _grid_lines(grid: Grid) -> List[str]:
    return [f"height={grid.height}", f"width={grid.width}", f"lat_min={grid.lat_min!r}",
            f"lat_max={grid.lat_max!r}", f"lon_min={grid.lon_min!r}", f"lon_max={grid.lon_max!r}"]


def _parse_kv(text: str) -> Dict[str, str]:
    out = {}
    for line in text.splitlines():
        line = line.strip()
        if line and not line.startswith("#"):
            k, _, v = line.partition("=")
            out[k.strip()] = v.strip()
    return out


def write_sample(root, record: SampleRecord, subdir: str = "samples") -> Tuple[str, str]:
    """Write predictor and target DTSR files plus a geometry sidecar.

    Returns the predictor and target paths relative to ``root``.
    """
    root = Path(root)
    d = root / subdir
    d.mkdir(parents=True, exist_ok=True)
    pred_rel = f"{subdir}/{record.id}_predictor.dtsr"
    tgt_rel = f"{subdir}/{record.id}_target.dtsr"
    write_dtsr(root / pred_rel, record.predictors.values)
    write_dtsr(root / tgt_rel, record.target.values)
    meta = [f"id={record.id}", f"timestamp={record.timestamp}",
            f"channels={','.join(record.predictors.channel_names)}"] + _grid_lines(record.target.grid)
    (d / f"{record.id}_meta.txt").write_text("\n".join(meta) + "\n")
    return pred_rel, tgt_rel


def read_sample(root, predictor_path: str, target_path: str) -> SampleRecord:
    root = Path(root)
    pred = read_dtsr(root / predictor_path)
    tgt = read_dtsr(root / target_path)
    meta_path = (root / predictor_path).with_name(
        Path(predictor_path).name.replace("_predictor.dtsr", "_meta.txt"))
    kv = _parse_kv(meta_path.read_text())
    grid = Grid(int(kv["height"]), int(kv["width"]), float(kv["lat_min"]), float(kv["lat_max"]),
                float(kv["lon_min"]), float(kv["lon_max"]))
    names = tuple(c for c in kv["channels"].split(",") if c)
    return SampleRecord(kv["id"], kv["timestamp"], PredictorStack(names, pred, grid), Field2D(tgt, grid))


MANIFEST_HEADER = ["id", "timestamp", "predictor_path", "target_path", "split"]


@dataclass(frozen=True)
class ManifestRow:
    id: str
    timestamp: str
    predictor_path: str
    target_path: str
    split: str


class ManifestError(ValueError):
    pass


def write_manifest(path, rows: Sequence[ManifestRow]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MANIFEST_HEADER)
        for r in rows:
            if r.split not in SPLITS:
                raise ManifestError(f"unknown split label {r.split!r} for sample {r.id}")
            w.writerow([r.id, r.timestamp, r.predictor_path, r.target_path, r.split])


def read_manifest(path) -> List[ManifestRow]:
    rows = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != MANIFEST_HEADER:
            raise ManifestError(f"{path} line 1: expected header {','.join(MANIFEST_HEADER)}")
        for lineno, rec in enumerate(reader, start=2):
            if not rec:
                continue
            if len(rec) != len(MANIFEST_HEADER):
                raise ManifestError(f"{path} line {lineno}: expected {len(MANIFEST_HEADER)} fields, got {len(rec)}")
            if rec[4] not in SPLITS:
                raise ManifestError(f"{path} line {lineno}: unknown split label {rec[4]!r}")
            rows.append(ManifestRow(*rec))
    return rows
