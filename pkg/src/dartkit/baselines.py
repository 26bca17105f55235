"""Classical downscaling baselines: per-pixel linear regression (MOS) and bicubic smoothing."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence, Tuple

import numpy as np

from .fields import (CHANNEL_UNITS, Field2D, Grid, NormStats, PredictorStack, _parse_kv,
                     compute_norm_stats, regrid_bicubic)
from .tensorcore.dtsr import read_dtsr, write_dtsr

RIDGE = 1e-8
RANK_TOL = 1e-10


@dataclass
class MosModel:
    """Per-pixel regression coefficients, H×W×(C+1) with the intercept last.

    When ``norm`` is set the weights apply to normalised predictors.
    """

    coefficients: np.ndarray
    channel_names: Tuple[str, ...]
    grid: Grid
    norm: Optional[NormStats] = None
    rank_deficient: Optional[np.ndarray] = None  # H×W bool

    def __post_init__(self):
        self.coefficients = np.asarray(self.coefficients, dtype=np.float64)
        if self.coefficients.shape != self.grid.shape + (len(self.channel_names) + 1,):
            raise ValueError(f"coefficient grid {self.coefficients.shape} does not match "
                             f"{self.grid.shape} with {len(self.channel_names)} channels")

    def raw_coefficients(self) -> np.ndarray:
        """Coefficients expressed against un-normalised predictors."""
        if self.norm is None:
            return self.coefficients.copy()
        sel = self.norm.select(self.channel_names)
        m = np.asarray(sel.mean)
        s = np.asarray(sel.std)
        w = self.coefficients[..., :-1] / s
        b = self.coefficients[..., -1] - np.sum(w * m, axis=-1)
        return np.concatenate([w, b[..., None]], axis=-1)


def upsample_stack(stack: PredictorStack, grid: Grid) -> PredictorStack:
    """Bicubic upsampling of every channel to ``grid`` (no-op if already there)."""
    if stack.grid == grid:
        return stack
    out = [regrid_bicubic(Field2D(stack.values[i], stack.grid, CHANNEL_UNITS[c]), grid).values
           for i, c in enumerate(stack.channel_names)]
    return PredictorStack(stack.channel_names, np.stack(out), grid)


def _design(stacks: Sequence[PredictorStack], norm: Optional[NormStats]) -> np.ndarray:
    x = np.stack([s.values for s in stacks]).astype(np.float64)  # N×C×H×W
    if norm is not None:
        sel = norm.select(stacks[0].channel_names)
        x = (x - np.asarray(sel.mean)[:, None, None]) / np.asarray(sel.std)[:, None, None]
    ones = np.ones((x.shape[0], 1) + x.shape[2:])
    return np.concatenate([x, ones], axis=1)  # N×(C+1)×H×W


def mos_fit(train_samples: Sequence[Tuple[PredictorStack, Field2D]], normalize: bool = True) -> MosModel:
    """Ordinary least squares at every target pixel via the normal equations.

    ``train_samples`` holds (predictors, target) pairs; predictors on a
    coarser grid are upsampled bicubically to the target grid first.
    Pixels whose Gram matrix is rank deficient fall back to an intercept-only
    fit (the pixel mean).
    """
    train_samples = list(train_samples)
    if not train_samples:
        raise ValueError("mos_fit: no training samples")
    grid = train_samples[0][1].grid
    names = train_samples[0][0].channel_names
    n, p = len(train_samples), len(names) + 1
    if n < p + 1:
        raise ValueError(f"mos_fit: {n} samples cannot determine {p} coefficients per pixel "
                         f"(need at least {p + 1})")
    stacks = [upsample_stack(s, grid) for s, _ in train_samples]
    if any(s.channel_names != names for s in stacks):
        raise ValueError("mos_fit: all samples must carry the same channels")
    norm = compute_norm_stats(stacks) if normalize else None
    a = _design(stacks, norm)
    y = np.stack([t.values for _, t in train_samples]).astype(np.float64)  # N×H×W
    gram = np.einsum("nphw,nqhw->hwpq", a, a)
    rhs = np.einsum("nphw,nhw->hwp", a, y)
    eig = np.linalg.eigvalsh(gram)
    deficient = eig[..., 0] <= RANK_TOL * np.maximum(eig[..., -1], 1e-300)
    jitter = RIDGE * np.eye(p) * deficient[..., None, None]
    coef = np.linalg.solve(gram + jitter, rhs[..., None])[..., 0]
    if deficient.any():
        coef[deficient] = 0.0
        coef[deficient, -1] = y.mean(axis=0)[deficient]
    return MosModel(coef, names, grid, norm, deficient)


def mos_predict(model: MosModel, predictors: PredictorStack) -> Field2D:
    if predictors.channel_names != model.channel_names:
        raise ValueError(f"channel mismatch: model {model.channel_names} vs "
                         f"predictors {predictors.channel_names}")
    stack = upsample_stack(predictors, model.grid)
    a = _design([stack], model.norm)[0]  # (C+1)×H×W
    y = np.einsum("phw,hwp->hw", a, model.coefficients)
    return Field2D(np.clip(y, 150.0, 350.0), model.grid)


def mos_residuals(model: MosModel, train_samples) -> Tuple[np.ndarray, np.ndarray]:
    """Residuals (N×H×W) and the design (N×(C+1)×H×W) they should be orthogonal to."""
    grid = model.grid
    stacks = [upsample_stack(s, grid) for s, _ in train_samples]
    a = _design(stacks, model.norm)
    y = np.stack([t.values for _, t in train_samples]).astype(np.float64)
    pred = np.einsum("nphw,hwp->nhw", a, model.coefficients)
    return y - pred, a


def bicubic_baseline(target: Field2D, factor: int) -> Field2D:
    """Block-mean downsample by ``factor`` then bicubic upsample back to the input grid."""
    h, w = target.shape
    if factor < 1 or h % factor or w % factor:
        raise ValueError(f"factor {factor} does not divide field dims {h}×{w}")
    if factor == 1:
        return Field2D(target.values.copy(), target.grid, target.units)
    coarse = target.values.astype(np.float64).reshape(h // factor, factor, w // factor, factor).mean(axis=(1, 3))
    src = Field2D(coarse, target.grid.with_shape(h // factor, w // factor), target.units)
    out = regrid_bicubic(src, target.grid).values
    lo, hi = (150.0, 350.0) if target.units == "kelvin" else (-np.inf, np.inf)
    return Field2D(np.clip(out, lo, hi), target.grid, target.units)


def save_mos(path, model: MosModel) -> None:
    """Coefficient tensor as DTSR plus a ``.meta.txt`` sidecar with channels and norm stats."""
    path = Path(path)
    write_dtsr(path, model.coefficients.astype(np.float32))
    g = model.grid
    lines = [f"channels={','.join(model.channel_names)}", f"height={g.height}", f"width={g.width}",
             f"lat_min={g.lat_min!r}", f"lat_max={g.lat_max!r}", f"lon_min={g.lon_min!r}",
             f"lon_max={g.lon_max!r}"]
    if model.norm is not None:
        lines += [f"norm_mean={','.join(repr(v) for v in model.norm.mean)}",
                  f"norm_std={','.join(repr(v) for v in model.norm.std)}",
                  f"norm_channels={','.join(model.norm.channel_names)}"]
    Path(str(path) + ".meta.txt").write_text("\n".join(lines) + "\n")


def load_mos(path) -> MosModel:
    path = Path(path)
    kv = _parse_kv(Path(str(path) + ".meta.txt").read_text())
    grid = Grid(int(kv["height"]), int(kv["width"]), float(kv["lat_min"]), float(kv["lat_max"]),
                float(kv["lon_min"]), float(kv["lon_max"]))
    names = tuple(c for c in kv["channels"].split(",") if c)
    norm = None
    if "norm_mean" in kv:
        norm = NormStats(tuple(kv["norm_channels"].split(",")),
                         tuple(float(v) for v in kv["norm_mean"].split(",")),
                         tuple(float(v) for v in kv["norm_std"].split(",")))
    return MosModel(read_dtsr(path), names, grid, norm)
