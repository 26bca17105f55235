"""Seeded synthetic scenarios with a known coarse-to-fine transfer function.

Generative story for one sample (domain coordinates u, v in [0, 1]):

* a smooth cloud-shield envelope ``E`` sets the warm background
  ``bg = bg_warm - bg_span * E`` (never at or below 225 K);
* mid-level updrafts (W500 blobs) are placed by a Poisson process; each
  carries a T500 anomaly that is cold (convective) or warm (suppressed), and
  isolated T500 anomalies with no updraft are scattered as well;
* a cold core is imprinted at exactly those updrafts whose T500 anomaly is
  cold, with width following the updraft width and depth set by RH700;
* IVT tracks the envelope plus a slowly drifting non-convective pattern,
  so it carries no information about core placement.

The predictors are evaluated on the coarse grid and bilinearly regridded to
the fine grid; the target is evaluated on the fine grid directly.
"""

from __future__ import annotations

import csv
import hashlib
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

from .decomposition import dataset_distribution_report
from .fields import (CHANNEL_UNITS, CHANNELS, Field2D, Grid, ManifestRow, PredictorStack,
                     SampleRecord, read_manifest, read_sample, regrid_bilinear, write_manifest,
                     write_sample)
from .tensorcore.dtsr import read_dtsr, write_dtsr

FLOOR_K = 150.0
CORE_REFERENCE_K = 225.0


@dataclass(frozen=True)
class ScenarioConfig:
    seed: int = 1
    n_samples: int = 300
    coarse_dims: Tuple[int, int] = (8, 8)
    fine_dims: Tuple[int, int] = (64, 64)
    channels: Tuple[str, ...] = CHANNELS
    convection_rate: float = 4.0       # mean convective cells per sample
    decoy_rate: float = 3.0            # mean suppressed updrafts per sample
    t500_anomaly_rate: float = 8.0     # mean T500 cold anomalies per sample, convective ones included
    t500_offset: float = 3.0           # upstream displacement of the T500 anomaly, in core widths
    t500_width: float = 10.0           # fine-pixel sigma of T500 anomalies
    core_depth: float = 24.0           # K, core top below 225 K at reference RH700
    shield_min: float = 0.85           # updrafts form where the cloud envelope exceeds this
    shield_sharpness: float = 4.0      # logistic gain turning the smooth envelope into a shield
    core_width: Tuple[float, float] = (4.0, 9.0)  # fine-pixel sigma range
    noise_sigma: float = 1.0           # K, fine-scale target noise
    distractor_coupling: float = 1.0   # strength of the drifting IVT pattern
    bg_warm: float = 310.0
    bg_span: float = 62.0
    start: str = "2015-06-01T00:00:00"

    def __post_init__(self):
        fh, fw = self.fine_dims
        ch, cw = self.coarse_dims
        if fh % 16 or fw % 16:
            raise ValueError(f"fine_dims {self.fine_dims} must be divisible by 16")
        if fh % ch or fw % cw:
            raise ValueError(f"coarse_dims {self.coarse_dims} must divide fine_dims {self.fine_dims}")
        if self.n_samples < 10:
            raise ValueError("need at least 10 samples for an 80/10/10 split")
        if self.convection_rate < 0 or self.decoy_rate < 0 or self.t500_anomaly_rate < 0:
            raise ValueError("rates must be non-negative")
        bad = [c for c in self.channels if c not in CHANNELS]
        if bad:
            raise ValueError(f"unknown channels {bad}")


def ivt_paradox_config(seed: int = 1, **overrides) -> ScenarioConfig:
    """Channel-ablation scenario: the benchmark with the T500 anomaly centred on its core.

    The benchmark hides the T500 cue upstream of the core, which a desk-scale
    model does not learn, so removing T500 costs little there. Centring the
    cue makes its causal role visible in an ablation. The IVT distractor is
    left at the benchmark setting.
    """
    return ScenarioConfig(seed=seed, **{"t500_offset": 0.0, **overrides})


@dataclass
class Scenario:
    """Chronologically split samples plus the generating metadata (the oracle)."""

    config: ScenarioConfig
    train: List[SampleRecord]
    val: List[SampleRecord]
    test: List[SampleRecord]
    oracle: List[dict] = field(default_factory=list)
    masks: Dict[str, np.ndarray] = field(default_factory=dict)
    coarse: Dict[str, np.ndarray] = field(default_factory=dict)
    access_log: List[str] = field(default_factory=list)

    def split(self, name: str) -> List[SampleRecord]:
        if name not in ("train", "val", "test"):
            raise KeyError(name)
        self.access_log.append(name)
        return getattr(self, name)

    @property
    def samples(self) -> List[SampleRecord]:
        return self.train + self.val + self.test


def split_counts(n: int) -> Tuple[int, int, int]:
    n_train = int(round(0.8 * n))
    n_val = int(round(0.1 * n))
    return n_train, n_val, n - n_train - n_val


# -- smooth random fields -----------------------------------------------------

_MODES = [(kx, ky) for kx in range(0, 3) for ky in range(-2, 3) if (kx, ky) > (0, 0) and kx * kx + ky * ky <= 5]


class SmoothField:
    """Sum of low-wavenumber cosine modes with seeded phases, ~unit variance."""

    def __init__(self, rng: np.random.Generator, max_k2: int = 5):
        modes = [m for m in _MODES if m[0] ** 2 + m[1] ** 2 <= max_k2]
        self.k = np.array(modes, dtype=np.float64)
        amp = rng.normal(size=len(modes)) / np.sqrt(np.sum(self.k ** 2, axis=1))
        self.amp = amp * np.sqrt(2.0 / np.sum(amp ** 2))
        self.phase = rng.uniform(0, 2 * np.pi, size=len(modes))

    def __call__(self, u: np.ndarray, v: np.ndarray) -> np.ndarray:
        u, v = np.asarray(u, dtype=np.float64), np.asarray(v, dtype=np.float64)
        expand = (-1,) + (1,) * u.ndim
        arg = 2 * np.pi * (self.k[:, 0].reshape(expand) * u[None] + self.k[:, 1].reshape(expand) * v[None])
        return np.tensordot(self.amp, np.cos(arg + self.phase.reshape(expand)), axes=1)


def _coords(dims: Tuple[int, int]) -> Tuple[np.ndarray, np.ndarray]:
    h, w = dims
    v = (np.arange(h) + 0.5) / h
    u = (np.arange(w) + 0.5) / w
    return np.meshgrid(u, v)  # u varies along columns, v along rows


def _blobs(u, v, centers, widths, amps, aspect=None, angle=None, power: int = 1) -> np.ndarray:
    out = np.zeros_like(u)
    for i, ((cu, cv), s, a) in enumerate(zip(centers, widths, amps)):
        du, dv = u - cu, v - cv
        if aspect is not None:
            c, sn = np.cos(angle[i]), np.sin(angle[i])
            du, dv = c * du + sn * dv, -sn * du + c * dv
            du = du / aspect[i]
            dv = dv * aspect[i]
        q = (du * du + dv * dv) / (2 * s * s)
        out += a * np.exp(-q ** power)
    return out


def _dipoles(u, v, centers, widths, amps, angle) -> np.ndarray:
    """Oriented first-derivative-of-Gaussian pairs; zero at each centre."""
    out = np.zeros_like(u)
    for (cu, cv), s, a, th in zip(centers, widths, amps, angle):
        du, dv = u - cu, v - cv
        along = (np.cos(th) * du + np.sin(th) * dv) / s
        out += a * along * np.exp(0.5 - (du * du + dv * dv) / (2 * s * s))
    return out


def _sample_in_shield(rng, n, envelope, shield_min, tries=64) -> np.ndarray:
    """Uniform positions in [0.1, 0.9]^2 restricted to envelope >= shield_min (rejection)."""
    out = np.empty((n, 2))
    for i in range(n):
        for _ in range(tries):
            c = rng.uniform(0.1, 0.9, size=2)
            if envelope(c[0], c[1]) >= shield_min:
                break
        out[i] = c
    return out


def _sample_seed(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng([seed & 0xFFFFFFFFFFFFFFFF, index])


def generate_sample(cfg: ScenarioConfig, index: int, grid_fine: Grid, grid_coarse: Grid):
    """One sample: coarse predictors, fine target, core mask, oracle metadata."""
    rng = _sample_seed(cfg.seed, index)
    t = index / max(cfg.n_samples - 1, 1)
    fh, fw = cfg.fine_dims
    uf, vf = _coords(cfg.fine_dims)
    uc, vc = _coords(cfg.coarse_dims)

    env = SmoothField(rng)
    s_rh, s_w, s_t5, s_t8, s_ivt, s_nc = (SmoothField(rng) for _ in range(6))
    activity = rng.exponential(1.0)

    def envelope(u, v):
        return 1.0 / (1.0 + np.exp(-cfg.shield_sharpness * env(u, v)))

    n_conv = rng.poisson(cfg.convection_rate * activity)
    n_decoy = rng.poisson(cfg.decoy_rate * activity)
    # total T500 anomaly count does not follow activity, so domain-mean T500 carries no event signal
    n_tdecoy = max(0, int(rng.poisson(cfg.t500_anomaly_rate)) - int(n_conv))
    n_up = n_conv + n_decoy
    centers = _sample_in_shield(rng, n_up, envelope, cfg.shield_min)
    w_lo, w_hi = cfg.core_width
    width_px = rng.uniform(w_lo, w_hi, size=n_up)
    width = width_px / fw
    w_amp = rng.uniform(0.6, 1.0, size=n_up)
    # only convective updrafts carry a cold T500 anomaly
    t_amp = np.concatenate([-rng.uniform(2.0, 3.0, size=n_conv), np.zeros(n_decoy)])
    aspect = rng.uniform(0.8, 1.25, size=n_up)
    angle = rng.uniform(0, np.pi, size=n_up)
    w_angle = rng.uniform(0, 2 * np.pi, size=n_up)
    # T500 anomaly sits upstream of the core, on the descending side of the dipole
    shift = cfg.t500_offset * width[:, None] * np.stack([np.cos(w_angle), np.sin(w_angle)], axis=1)
    t_centers = centers - shift
    tcenters = _sample_in_shield(rng, n_tdecoy, envelope, cfg.shield_min)
    t_sigma = np.full(max(n_up, n_tdecoy), cfg.t500_width / fw)
    tamp = -rng.uniform(2.0, 3.0, size=n_tdecoy)

    def predictors(u, v):
        e = envelope(u, v)
        # updraft footprint is wider than the core; ascent is negative omega
        w500 = 0.15 * s_w(u, v) + _dipoles(u, v, centers, 1.6 * width, w_amp, w_angle)
        t500 = (266.0 + 1.0 * s_t5(u, v) + _blobs(u, v, t_centers, t_sigma, t_amp)
                + _blobs(u, v, tcenters, t_sigma, tamp))
        rh700 = 35.0 + 50.0 * e + 6.0 * s_rh(u, v)
        t850 = 294.0 - 3.0 * e + 1.5 * s_t8(u, v)
        # non-convective plume pattern whose amplitude drifts with time
        drift = cfg.distractor_coupling * (40.0 + 160.0 * t) * s_nc(u, v)
        ivt = 250.0 + 350.0 * e + 40.0 * s_ivt(u, v) + drift
        return {"IVT": np.maximum(ivt, 0.0), "T500": t500, "T850": t850,
                "RH700": np.clip(rh700, 1.0, 100.0), "W500": w500}

    coarse = predictors(uc, vc)
    # RH700 at each convective core centre sets its depth
    rh_c = predictors(centers[:n_conv, 0], centers[:n_conv, 1])["RH700"]
    # cloud-top temperature of each core: colder for moister columns and stronger ascent
    depth = cfg.core_depth * (np.clip(rh_c, 0, 100) / 85.0) * (0.8 + 0.2 * w_amp[:n_conv])
    top = CORE_REFERENCE_K - depth
    bg = cfg.bg_warm - cfg.bg_span * envelope(uf, vf)
    # each core pulls the field toward its top temperature; overlapping cores keep the coldest pull
    field_ = bg.copy()
    for k in range(n_conv):
        g = _blobs(uf, vf, centers[k:k + 1], width[k:k + 1], np.ones(1), aspect[k:k + 1], angle[k:k + 1],
                   power=2)
        field_ = np.minimum(field_, bg - (bg - top[k]) * g)
    noise = cfg.noise_sigma * rng.normal(size=(fh, fw))
    target = np.maximum(field_ + noise, FLOOR_K)
    mask = field_ <= 220.0  # noise-free cold-core footprint

    fine_stack = {}
    for name in cfg.channels:
        f = Field2D(coarse[name], grid_coarse, CHANNEL_UNITS[name])
        fine_stack[name] = regrid_bilinear(f, grid_fine)
    stack = PredictorStack.from_fields(fine_stack)
    coarse_stack = np.stack([coarse[c] for c in stack.channel_names]).astype(np.float32)
    meta = {
        "index": index, "time_frac": t, "activity": float(activity), "n_convective": int(n_conv),
        "n_decoy_updrafts": int(n_decoy), "n_t500_decoys": int(n_tdecoy),
        "core_centers_px": ";".join(f"{c[0] * fw:.3f}:{c[1] * fh:.3f}" for c in centers[:n_conv]),
        "core_depths_k": ";".join(f"{d:.3f}" for d in depth),
        "core_widths_px": ";".join(f"{w:.3f}" for w in width_px[:n_conv]),
    }
    return stack, target.astype(np.float32), mask, coarse_stack, meta


def _grids(cfg: ScenarioConfig) -> Tuple[Grid, Grid]:
    return Grid(*cfg.fine_dims), Grid(*cfg.coarse_dims)


def _timestamp(cfg: ScenarioConfig, index: int) -> str:
    base = np.datetime64(cfg.start)
    return str(base + np.timedelta64(6 * index, "h"))


def generate_scenario(cfg: ScenarioConfig) -> Scenario:
    """Generate all samples and split them 80/10/10 in index (time) order."""
    grid_fine, grid_coarse = _grids(cfg)
    records, oracle, masks, coarse = [], [], {}, {}
    for i in range(cfg.n_samples):
        stack, target, mask, cstack, meta = generate_sample(cfg, i, grid_fine, grid_coarse)
        sid = f"s{i:05d}"
        records.append(SampleRecord(sid, _timestamp(cfg, i), stack, Field2D(target, grid_fine)))
        meta["id"] = sid
        oracle.append(meta)
        masks[sid] = mask
        coarse[sid] = cstack
    cold = np.mean([m.mean() for m in masks.values()])
    if cold > 0.95:
        raise ValueError(f"infeasible calibration: {100 * cold:.1f}% of pixels are cold")
    n_train, n_val, _ = split_counts(cfg.n_samples)
    return Scenario(cfg, records[:n_train], records[n_train:n_train + n_val],
                    records[n_train + n_val:], oracle, masks, coarse)


def linear_probe_scenario(cfg: ScenarioConfig, noise_sigma: Optional[float] = None,
                          coefficients: Optional[np.ndarray] = None) -> Scenario:
    """Target = known per-pixel linear map of the bicubic-upsampled predictors + noise.

    The map acts on predictor anomalies, ``y = sum_c w_c (x_c - ref_c) + b``,
    where ``ref`` is the all-sample mean of each coarse channel. The
    coefficient tensor (H×W×(C+1), intercept last) and ``ref`` are stored in
    ``scenario.oracle[0]``.
    """
    from .fields import regrid_bicubic
    base = generate_scenario(replace(cfg, convection_rate=0.0))
    grid_fine, grid_coarse = _grids(cfg)
    rng = np.random.default_rng([cfg.seed, 0xC0EF])
    names = base.samples[0].predictors.channel_names
    c = len(names)
    fh, fw = cfg.fine_dims
    allc = np.stack([base.coarse[r.id] for r in base.samples]).astype(np.float64)
    ref = allc.mean(axis=(0, 2, 3))
    if coefficients is None:
        # about 2 K of response per channel at its across-sample spread, so the target stays off the clip
        scale = 2.0 / allc.std(axis=0).mean(axis=(1, 2))
        coefficients = np.concatenate([rng.normal(0, 1, size=(fh, fw, c)) * scale,
                                       rng.uniform(240, 260, size=(fh, fw, 1))], axis=2)
    sigma = cfg.noise_sigma if noise_sigma is None else noise_sigma
    records = []
    for k, rec in enumerate(base.samples):
        up = np.stack([regrid_bicubic(Field2D(base.coarse[rec.id][j], grid_coarse, CHANNEL_UNITS[n]),
                                      grid_fine).values for j, n in enumerate(names)]).astype(np.float64)
        anomaly = up - ref[:, None, None]
        y = np.einsum("chw,hwc->hw", anomaly, coefficients[..., :c]) + coefficients[..., c]
        y = y + sigma * np.random.default_rng([cfg.seed, 0x5EED, k]).normal(size=y.shape)
        y = np.clip(y, FLOOR_K, 350.0)
        records.append(replace(rec, target=Field2D(y.astype(np.float32), grid_fine)))
    n_train, n_val, _ = split_counts(cfg.n_samples)
    signal_var = float(np.var([r.target.values for r in records]))
    oracle = [{"coefficients": coefficients, "reference": ref, "noise_sigma": sigma, "channels": names,
               "snr": signal_var / max(sigma ** 2, 1e-12)}]
    return Scenario(cfg, records[:n_train], records[n_train:n_train + n_val], records[n_train + n_val:],
                    oracle, {}, base.coarse)


def coarse_pairs(scenario: Scenario, split: str) -> List[Tuple[PredictorStack, Field2D]]:
    """(coarse predictors, fine target) pairs for one split, for the regression baseline."""
    grid_coarse = Grid(*scenario.config.coarse_dims)
    out = []
    for rec in scenario.split(split):
        stack = PredictorStack(rec.predictors.channel_names, scenario.coarse[rec.id], grid_coarse)
        out.append((stack, rec.target))
    return out


def stats_report(scenario: Scenario, split: str = "train"):
    """Pixel-percentage distribution table for one split (see decomposition)."""
    samples = getattr(scenario, split)
    return dataset_distribution_report([s.target.values for s in samples])


# -- persistence ---------------------------------------------------------------

def config_lines(cfg: ScenarioConfig) -> List[str]:
    out = []
    for k, v in asdict(cfg).items():
        if isinstance(v, (tuple, list)):
            v = ",".join(str(x) for x in v)
        out.append(f"{k}={v}")
    return out


def parse_scenario_config(kv: Dict[str, str]) -> ScenarioConfig:
    """Build a config from ``key=value`` strings; unknown keys raise KeyError."""
    defaults = ScenarioConfig()
    fields_ = asdict(defaults)
    kwargs = {}
    for k, v in kv.items():
        if k not in fields_:
            raise KeyError(k)
        d = fields_[k]
        if isinstance(d, tuple):
            parts = [p for p in v.split(",") if p]
            kind = type(d[0]) if d else str
            kwargs[k] = tuple(kind(p) for p in parts)
        elif isinstance(d, bool):
            kwargs[k] = v.lower() in ("1", "true", "yes")
        else:
            kwargs[k] = type(d)(v)
    return ScenarioConfig(**kwargs)


def save_scenario(scenario: Scenario, root) -> Path:
    """Write manifest.csv, DTSR samples, masks, scenario.cfg and oracle.csv under ``root``."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    rows = []
    for split in ("train", "val", "test"):
        for rec in getattr(scenario, split):
            p, t = write_sample(root, rec)
            rows.append(ManifestRow(rec.id, rec.timestamp, p, t, split))
    write_manifest(root / "manifest.csv", rows)
    (root / "scenario.cfg").write_text("\n".join(config_lines(scenario.config)) + "\n")
    if scenario.coarse:
        (root / "coarse").mkdir(exist_ok=True)
        for sid, c in scenario.coarse.items():
            write_dtsr(root / "coarse" / f"{sid}_coarse.dtsr", c)
    if scenario.masks:
        (root / "masks").mkdir(exist_ok=True)
        for sid, m in scenario.masks.items():
            write_dtsr(root / "masks" / f"{sid}_mask.dtsr", m.astype(np.float32))
    if scenario.oracle and "id" in scenario.oracle[0]:
        cols = list(scenario.oracle[0].keys()) + ["mask_path"]
        with open(root / "oracle.csv", "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=cols, lineterminator="\n")
            w.writeheader()
            for row in scenario.oracle:
                w.writerow({**row, "mask_path": f"masks/{row['id']}_mask.dtsr"})
    return root


def load_scenario(root) -> Scenario:
    from .fields import _parse_kv
    root = Path(root)
    cfg = parse_scenario_config(_parse_kv((root / "scenario.cfg").read_text()))
    splits = {"train": [], "val": [], "test": []}
    for row in read_manifest(root / "manifest.csv"):
        splits[row.split].append(read_sample(root, row.predictor_path, row.target_path))
    oracle, masks = [], {}
    if (root / "oracle.csv").exists():
        with open(root / "oracle.csv", newline="") as fh:
            oracle = list(csv.DictReader(fh))
        for row in oracle:
            masks[row["id"]] = read_dtsr(root / row["mask_path"]) > 0.5
    coarse = {}
    for rec in splits["train"] + splits["val"] + splits["test"]:
        cpath = root / "coarse" / f"{rec.id}_coarse.dtsr"
        if cpath.exists():
            coarse[rec.id] = read_dtsr(cpath)
    return Scenario(cfg, splits["train"], splits["val"], splits["test"], oracle, masks, coarse)


def scenario_digest(scenario: Scenario) -> str:
    h = hashlib.sha256()
    for rec in scenario.samples:
        h.update(rec.id.encode())
        h.update(rec.predictors.values.tobytes())
        h.update(rec.target.values.tobytes())
    return h.hexdigest()
