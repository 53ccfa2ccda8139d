"""Seeded synthetic crop scenes with labelled anomalies.

A scene is a lattice of rectangular parcels (one vertex jittered) on a
10 m grid.  Every parcel follows a crop phenology template: a double
logistic for NDVI, from which the multispectral bands are derived, and a
monotone logistic for SAR backscatter that tracks biomass.  Anomalous
parcels receive one category-specific transform of their template.

All randomness for parcel ``i`` comes from ``default_rng([seed, i])``, so a
parcel's pixels do not depend on the order in which parcels are drawn.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, replace
from datetime import date, timedelta
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .evaluation import AnomalyCategory, LabelSet, write_labels
from .geo_raster import (
    BandGrid,
    BandRole,
    GridMeta,
    ParcelPolygon,
    rasterize_polygon,
    write_grid_file,
    write_parcels,
)

__all__ = [
    "AnomalySpec",
    "DoubleLogistic",
    "ParcelPatches",
    "SEASON_START",
    "SarTemplate",
    "SeasonModel",
    "SynthConfig",
    "SyntheticScene",
    "bands_from_ndvi",
    "benchmark_a_config",
    "category_counts",
    "double_logistic",
    "generate_parcel_series",
    "generate_scene",
    "sar_curve",
]

SEASON_START = date(2017, 9, 1)

DEFAULT_S2_DATES = tuple(
    date.fromisoformat(d)
    for d in (
        "2017-09-25", "2017-10-20", "2017-11-19", "2017-12-14", "2018-02-22", "2018-03-29", "2018-04-18",
        "2018-05-03", "2018-05-13", "2018-05-23", "2018-06-02", "2018-06-17", "2018-06-27",
    )
)
# dense 6-day cadence through winter, sparse afterwards
DEFAULT_S1_DATES = tuple(
    [date(2017, 9, 3) + timedelta(days=6 * i) for i in range(36)]
    + [date(2018, 5, 8), date(2018, 5, 29), date(2018, 6, 22), date(2018, 7, 10)]
)


def day_of_season(when: date | int | float) -> float:
    if isinstance(when, date):
        return float((when - SEASON_START).days)
    return float(when)


def _days(dates: Iterable) -> np.ndarray:
    return np.array([day_of_season(d) for d in dates], dtype=np.float64)


# --------------------------------------------------------------------------
# templates


@dataclass(frozen=True)
class DoubleLogistic:
    v_min: float
    v_max: float
    k1: float
    t1: float
    k2: float
    t2: float

    def __post_init__(self):
        if not self.v_min < self.v_max:
            raise ValueError("double logistic needs v_min < v_max")
        if not (self.k1 > 0 and self.k2 > 0):
            raise ValueError("double logistic slopes must be positive")
        if not self.t1 < self.t2:
            raise ValueError("double logistic needs t1 < t2")


def _logistic(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def double_logistic(t, p: DoubleLogistic):
    """``v_min + (v_max - v_min) * (S(k1 (t - t1)) - S(k2 (t - t2)))``."""
    t = np.asarray(t, dtype=np.float64)
    return p.v_min + (p.v_max - p.v_min) * (_logistic(p.k1 * (t - p.t1)) - _logistic(p.k2 * (t - p.t2)))


@dataclass(frozen=True)
class SarTemplate:
    """Linear-power backscatter ``base + amplitude * S(steepness (t - midpoint))``."""

    base: float
    amplitude: float
    midpoint: float
    steepness: float

    def __post_init__(self):
        if not self.base > 0 or self.base + min(self.amplitude, 0.0) <= 0:
            raise ValueError("SAR template must stay positive")
        if not self.steepness > 0:
            raise ValueError("SAR steepness must be positive")


def sar_curve(t, p: SarTemplate):
    t = np.asarray(t, dtype=np.float64)
    return p.base + p.amplitude * _logistic(p.steepness * (t - p.midpoint))


@dataclass(frozen=True)
class SeasonModel:
    crop_type: str
    ndvi: DoubleLogistic
    vh: SarTemplate
    vv: SarTemplate
    pixel_noise: float = 0.03
    parcel_offset_sigma: float = 0.01
    amplitude_sigma: float = 0.015
    timing_sigma: float = 3.0
    sar_parcel_sigma: float = 0.04
    speckle_looks: float = 4.4
    # share of (date, pixel) samples replaced by an unrelated value
    contamination: float = 0.02

    def to_dict(self) -> dict:
        return asdict(self)


RAPESEED = SeasonModel(
    "rapeseed",
    DoubleLogistic(0.2, 0.82, 0.08, 40.0, 0.1, 270.0),
    SarTemplate(0.006, 0.025, 70.0, 0.06),
    SarTemplate(0.06, 0.05, 70.0, 0.06),
)
WHEAT = SeasonModel(
    "wheat",
    DoubleLogistic(0.18, 0.86, 0.06, 95.0, 0.09, 295.0),
    SarTemplate(0.004, 0.012, 170.0, 0.05),
    SarTemplate(0.12, -0.06, 170.0, 0.05),
)
GRASSLAND = SeasonModel(
    "grassland",
    DoubleLogistic(0.55, 0.72, 0.05, 10.0, 0.05, 320.0),
    SarTemplate(0.012, 0.002, 100.0, 0.05),
    SarTemplate(0.09, 0.005, 100.0, 0.05),
)
CROP_MODELS = {m.crop_type: m for m in (RAPESEED, WHEAT, GRASSLAND)}


# --------------------------------------------------------------------------
# anomaly specifications

# (low, high) ranges for each category's intensity parameters; one value is
# drawn uniformly per parcel unless fixed explicitly
DEFAULT_INTENSITY: dict[AnomalyCategory, dict[str, tuple[float, float]]] = {
    AnomalyCategory.HETEROGENEITY: {"fraction": (0.4, 0.6), "amplitude_factor": (0.6, 0.75)},
    AnomalyCategory.HETEROGENEITY_TWO_PARTS: {"delay_days": (20.0, 30.0)},
    AnomalyCategory.HETEROGENEITY_AFTER_SENESCENCE: {"fraction": (0.4, 0.6), "t2_shift": (-28.0, -20.0)},
    AnomalyCategory.EARLY_HETEROGENEITY: {"fraction": (0.4, 0.6), "t1_shift": (25.0, 35.0)},
    AnomalyCategory.LATE_GROWTH: {"shift_days": (15.0, 35.0)},
    AnomalyCategory.VIGOROUS_CROP: {"amplitude_factor": (1.12, 1.2), "sar_factor": (1.25, 1.4)},
    AnomalyCategory.EARLY_FLOWERING: {"dip_depth": (0.1, 0.14), "dip_day": (200.0, 210.0), "dip_width": (10.0, 14.0)},
    AnomalyCategory.EARLY_SENESCENCE: {"t2_shift": (-18.0, -12.0)},
    AnomalyCategory.LATE_SENESCENCE: {"t2_shift": (12.0, 18.0)},
    AnomalyCategory.WRONG_TYPE: {},
    AnomalyCategory.WRONG_SHAPE: {"fraction": (0.3, 0.4)},
    AnomalyCategory.TOO_SMALL: {},
    AnomalyCategory.SAR_ANOMALY: {"n_dates": (3.0, 5.0), "spike": (2.0, 3.0), "before_day": (120.0, 120.0)},
    AnomalyCategory.SHADOW: {"fraction": (0.3, 0.5), "ndvi_drop": (0.1, 0.15), "darkening": (0.4, 0.6)},
}
SUBSTITUTE_CROP = {"rapeseed": "wheat", "wheat": "rapeseed", "grassland": "rapeseed"}


@dataclass(frozen=True)
class AnomalySpec:
    """One category and its intensity parameters."""

    category: AnomalyCategory
    params: Mapping[str, float] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "category", AnomalyCategory(self.category))
        object.__setattr__(self, "params", dict(self.params))
        self.validate()

    def validate(self) -> None:
        allowed = DEFAULT_INTENSITY.get(self.category, {})
        extra = set(self.params) - set(allowed) - {"substitute_crop"}
        if extra:
            raise ValueError(f"{self.category.value}: unknown parameters {sorted(extra)}")
        for key in ("fraction",):
            if key in self.params and not 0 < self.params[key] < 1:
                raise ValueError(f"{self.category.value}: {key} must lie in (0, 1)")
        for key in ("amplitude_factor", "sar_factor", "spike", "darkening", "dip_width"):
            if key in self.params and not self.params[key] > 0:
                raise ValueError(f"{self.category.value}: {key} must be positive")

    @classmethod
    def draw(cls, category: AnomalyCategory, rng: np.random.Generator, overrides: Mapping | None = None) -> AnomalySpec:
        category = AnomalyCategory(category)
        params = {}
        for key, (lo, hi) in DEFAULT_INTENSITY.get(category, {}).items():
            params[key] = float(lo if lo == hi else rng.uniform(lo, hi))
        params.update(overrides or {})
        return cls(category, params)

    def to_dict(self) -> dict:
        return {"category": self.category.value, **{k: v for k, v in sorted(self.params.items())}}


# --------------------------------------------------------------------------
# per-parcel generation


@dataclass
class ParcelPatches:
    """Pixel values of one parcel: arrays shaped ``(n_dates, n_pixels)``."""

    ndvi: np.ndarray
    vh: np.ndarray
    vv: np.ndarray
    brightness: np.ndarray
    label: AnomalyCategory


def _pixel_params(model: SeasonModel, n: int) -> dict[str, np.ndarray]:
    out = {}
    for name, tpl in (("ndvi", model.ndvi), ("vh", model.vh), ("vv", model.vv)):
        for key, val in asdict(tpl).items():
            out[f"{name}_{key}"] = np.full(n, float(val))
    return out


def _assign(params: dict, mask: np.ndarray, model: SeasonModel) -> None:
    sub = _pixel_params(model, int(mask.sum()))
    for key, val in sub.items():
        params[key][mask] = val


def _blob(rows: np.ndarray, cols: np.ndarray, fraction: float, rng: np.random.Generator) -> np.ndarray:
    """Contiguous share of the pixels: those nearest a random inner point."""
    n = len(rows)
    k = max(1, int(round(fraction * n)))
    cy = rng.uniform(rows.min(), rows.max()) if n else 0.0
    cx = rng.uniform(cols.min(), cols.max()) if n else 0.0
    d = (rows - cy) ** 2 + (cols - cx) ** 2
    mask = np.zeros(n, dtype=bool)
    mask[np.argsort(d, kind="stable")[:k]] = True
    return mask


def _half(rows: np.ndarray, cols: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    axis = rows if rng.random() < 0.5 else cols
    mid = 0.5 * (axis.min() + axis.max())
    return axis < mid if rng.random() < 0.5 else axis > mid


def _strip(rows: np.ndarray, cols: np.ndarray, fraction: float, rng: np.random.Generator) -> np.ndarray:
    axis = rows if rng.random() < 0.5 else cols
    lo, hi = axis.min(), axis.max()
    cut = lo + fraction * (hi - lo + 1)
    return axis < cut if rng.random() < 0.5 else axis > hi - fraction * (hi - lo + 1)


def generate_parcel_series(
    model: SeasonModel,
    spec: AnomalySpec | None,
    s2_dates: Sequence,
    s1_dates: Sequence,
    rows: np.ndarray,
    cols: np.ndarray,
    seed=0,
    noise: bool = True,
    sar_date_factor: np.ndarray | None = None,
) -> ParcelPatches:
    """NDVI, VH and VV samples for every pixel and date of one parcel.

    With ``noise=False`` the parcel-level random effects, pixel noise,
    contamination and speckle are all switched off, so a normal parcel
    reproduces its template exactly.
    """
    rng = np.random.default_rng(seed)
    rows = np.asarray(rows, dtype=np.float64)
    cols = np.asarray(cols, dtype=np.float64)
    n = len(rows)
    t2d = _days(s2_dates)[:, None]
    t1d = _days(s1_dates)[:, None]
    p = _pixel_params(model, n)
    amp_mult = np.ones(n)
    sar_mult = np.ones(n)
    brightness = np.ones(n)
    ndvi_add = np.zeros((len(t2d), n))
    s1_mult = np.ones((len(t1d), n))

    # parcel-level random effects; drawn even without noise to keep streams aligned
    eff = rng.normal(size=6)
    if noise:
        p["ndvi_t1"] += model.timing_sigma * eff[0]
        p["ndvi_t2"] += model.timing_sigma * eff[1]
        amp_mult *= 1.0 + model.amplitude_sigma * eff[2]
        offset = model.parcel_offset_sigma * eff[3]
        shift = model.timing_sigma * eff[4]
        p["vh_midpoint"] += shift
        p["vv_midpoint"] += shift
        sar_mult *= math.exp(model.sar_parcel_sigma * eff[5])
    else:
        offset = 0.0

    label = AnomalyCategory.NORMAL_CHECKED
    if spec is not None:
        cat = spec.category
        q = spec.params
        label = cat
        if cat is AnomalyCategory.HETEROGENEITY:
            m = _blob(rows, cols, q["fraction"], rng)
            amp_mult[m] *= q["amplitude_factor"]
            sar_mult[m] *= q["amplitude_factor"]
        elif cat is AnomalyCategory.HETEROGENEITY_TWO_PARTS:
            m = _half(rows, cols, rng)
            for key in ("ndvi_t1", "vh_midpoint", "vv_midpoint"):
                p[key][m] += q["delay_days"]
        elif cat is AnomalyCategory.HETEROGENEITY_AFTER_SENESCENCE:
            m = _blob(rows, cols, q["fraction"], rng)
            p["ndvi_t2"][m] += q["t2_shift"]
        elif cat is AnomalyCategory.EARLY_HETEROGENEITY:
            m = _blob(rows, cols, q["fraction"], rng)
            for key in ("ndvi_t1", "vh_midpoint", "vv_midpoint"):
                p[key][m] += q["t1_shift"]
        elif cat is AnomalyCategory.LATE_GROWTH:
            for key in ("ndvi_t1", "ndvi_t2", "vh_midpoint", "vv_midpoint"):
                p[key] += q["shift_days"]
        elif cat is AnomalyCategory.VIGOROUS_CROP:
            amp_mult *= q["amplitude_factor"]
            p["vh_amplitude"] *= q["sar_factor"]
            p["vv_amplitude"] *= q["sar_factor"]
        elif cat is AnomalyCategory.EARLY_FLOWERING:
            ndvi_add -= q["dip_depth"] * np.exp(-0.5 * ((t2d - q["dip_day"]) / q["dip_width"]) ** 2)
        elif cat in (AnomalyCategory.EARLY_SENESCENCE, AnomalyCategory.LATE_SENESCENCE):
            p["ndvi_t2"] += q["t2_shift"]
        elif cat is AnomalyCategory.WRONG_TYPE:
            sub = CROP_MODELS[q.get("substitute_crop", SUBSTITUTE_CROP.get(model.crop_type, "wheat"))]
            _assign(p, np.ones(n, dtype=bool), sub)
        elif cat is AnomalyCategory.WRONG_SHAPE:
            _assign(p, _strip(rows, cols, q["fraction"], rng), GRASSLAND)
        elif cat is AnomalyCategory.SAR_ANOMALY:
            early = np.flatnonzero(t1d[:, 0] < q["before_day"])
            k = min(len(early), int(round(q["n_dates"])))
            if k:
                chosen = rng.choice(early, size=k, replace=False)
                s1_mult[chosen] *= q["spike"]
        elif cat is AnomalyCategory.SHADOW:
            m = _blob(rows, cols, q["fraction"], rng)
            ndvi_add[:, m] -= q["ndvi_drop"]
            brightness[m] *= q["darkening"]

    amp = (p["ndvi_v_max"] - p["ndvi_v_min"]) * amp_mult
    green = _logistic(p["ndvi_k1"] * (t2d - p["ndvi_t1"])) - _logistic(p["ndvi_k2"] * (t2d - p["ndvi_t2"]))
    ndvi = p["ndvi_v_min"] + amp * green + offset + ndvi_add

    def sar(prefix):
        level = p[f"{prefix}_base"] + p[f"{prefix}_amplitude"] * sar_mult * _logistic(
            p[f"{prefix}_steepness"] * (t1d - p[f"{prefix}_midpoint"])
        )
        return level * s1_mult

    vh, vv = sar("vh"), sar("vv")

    if noise:
        ndvi = ndvi + model.pixel_noise * rng.standard_normal(ndvi.shape)
        bad = rng.random(ndvi.shape) < model.contamination
        ndvi[bad] = rng.uniform(0.05, 0.9, size=int(bad.sum()))
        looks = model.speckle_looks
        vh = vh * rng.gamma(looks, 1.0 / looks, size=vh.shape)
        vv = vv * rng.gamma(looks, 1.0 / looks, size=vv.shape)
        if sar_date_factor is not None:
            f = np.asarray(sar_date_factor, dtype=np.float64)[:, None]
            vh, vv = vh * f, vv * f
    return ParcelPatches(np.clip(ndvi, -0.3, 0.95), vh, vv, brightness, label)


# endmember reflectances (soil, dense vegetation)
_SOIL = {BandRole.GREEN: 0.08, BandRole.RED: 0.10, BandRole.RE: 0.13, BandRole.SWIR: 0.28}
_VEG = {BandRole.GREEN: 0.07, BandRole.RED: 0.03, BandRole.RE: 0.12, BandRole.SWIR: 0.18}


def bands_from_ndvi(ndvi: np.ndarray, brightness=1.0, rng: np.random.Generator | None = None,
                    band_noise: float = 0.003) -> dict[BandRole, np.ndarray]:
    """Surface reflectances consistent with the given NDVI.

    Visible, red-edge and SWIR bands mix soil and vegetation by a cover
    fraction; NIR is then solved so that NDVI is reproduced exactly.
    """
    ndvi = np.asarray(ndvi, dtype=np.float64)
    cover = np.clip((ndvi - 0.15) / 0.7, 0.0, 1.0)
    out = {}
    for role in (BandRole.GREEN, BandRole.RED, BandRole.RE, BandRole.SWIR):
        out[role] = _SOIL[role] * (1.0 - cover) + _VEG[role] * cover
        if rng is not None and role is not BandRole.RED and band_noise > 0:
            out[role] = out[role] + band_noise * rng.standard_normal(ndvi.shape)
    out[BandRole.NIR] = out[BandRole.RED] * (1.0 + ndvi) / (1.0 - ndvi)
    return {r: np.maximum(v, 1e-4) * brightness for r, v in out.items()}


# --------------------------------------------------------------------------
# scene configuration and assembly


def category_counts(mix: Mapping, n: int) -> dict[AnomalyCategory, int]:
    """Parcel counts per category by largest-remainder rounding.

    Ties in the remainder go to the category listed first in the enum.
    """
    mix = {AnomalyCategory(k): float(v) for k, v in mix.items()}
    if any(v < 0 for v in mix.values()) or sum(mix.values()) > 1 + 1e-9:
        raise ValueError("anomaly fractions must be non-negative and sum to at most 1")
    if AnomalyCategory.NORMAL_CHECKED in mix:
        raise ValueError("NORMAL_CHECKED is the remainder; do not list it in the mix")
    ordered = [c for c in AnomalyCategory if c in mix]
    exact = {c: mix[c] * n for c in ordered}
    counts = {c: int(math.floor(exact[c] + 1e-9)) for c in ordered}
    target = int(round(sum(exact.values()) + 1e-9))
    rest = sorted(ordered, key=lambda c: (-(exact[c] - counts[c]), ordered.index(c)))
    for c in rest[: max(0, target - sum(counts.values()))]:
        counts[c] += 1
    return counts


BENCHMARK_A_MIX = {
    AnomalyCategory.HETEROGENEITY: 0.035,
    AnomalyCategory.HETEROGENEITY_TWO_PARTS: 0.01,
    AnomalyCategory.HETEROGENEITY_AFTER_SENESCENCE: 0.01,
    AnomalyCategory.EARLY_HETEROGENEITY: 0.01,
    AnomalyCategory.LATE_GROWTH: 0.035,
    AnomalyCategory.VIGOROUS_CROP: 0.01,
    AnomalyCategory.EARLY_FLOWERING: 0.005,
    AnomalyCategory.EARLY_SENESCENCE: 0.01,
    AnomalyCategory.LATE_SENESCENCE: 0.005,
    AnomalyCategory.WRONG_TYPE: 0.01,
    AnomalyCategory.WRONG_SHAPE: 0.01,
}


@dataclass
class SynthConfig:
    n_parcels: int = 2000
    seed: int = 0
    anomaly_mix: dict = field(default_factory=dict)
    s2_dates: tuple = DEFAULT_S2_DATES
    s1_dates: tuple = DEFAULT_S1_DATES
    crop_type: str = "rapeseed"
    cell_pixels: int = 15
    grid_cells: int | None = None
    pixel_size: float = 10.0
    origin_x: float = 500000.0
    origin_y: float = 5000000.0
    noise: bool = True
    clouds_per_date: float = 0.0
    cloud_radius_px: tuple = (8.0, 20.0)
    sar_date_sigma: float = 0.05
    intensity_overrides: dict = field(default_factory=dict)

    def __post_init__(self):
        self.s2_dates = tuple(date.fromisoformat(d) if isinstance(d, str) else d for d in self.s2_dates)
        self.s1_dates = tuple(date.fromisoformat(d) if isinstance(d, str) else d for d in self.s1_dates)
        self.anomaly_mix = {AnomalyCategory(k): float(v) for k, v in dict(self.anomaly_mix).items()}
        self.intensity_overrides = {AnomalyCategory(k): dict(v) for k, v in dict(self.intensity_overrides).items()}

    @property
    def cells_per_side(self) -> int:
        return self.grid_cells if self.grid_cells is not None else int(math.ceil(math.sqrt(self.n_parcels)))

    def validate(self) -> None:
        if self.n_parcels < 1:
            raise ValueError("n_parcels must be positive")
        if not self.s2_dates or not self.s1_dates:
            raise ValueError("S1 and S2 date lists must be non-empty")
        if self.crop_type not in CROP_MODELS:
            raise ValueError(f"unknown crop type {self.crop_type!r}; choose from {sorted(CROP_MODELS)}")
        if self.cells_per_side**2 < self.n_parcels:
            raise ValueError(
                f"grid of {self.cells_per_side}x{self.cells_per_side} cells cannot hold {self.n_parcels} parcels"
            )
        if self.cell_pixels < 13:
            raise ValueError("cell_pixels must be at least 13")
        for cat, ov in self.intensity_overrides.items():
            AnomalySpec(cat, {**{k: v[0] for k, v in DEFAULT_INTENSITY.get(cat, {}).items()}, **ov})
        category_counts(self.anomaly_mix, self.n_parcels)

    def to_dict(self) -> dict:
        return {
            "n_parcels": self.n_parcels,
            "seed": self.seed,
            "anomaly_mix": {k.value: v for k, v in self.anomaly_mix.items()},
            "s2_dates": [d.isoformat() for d in self.s2_dates],
            "s1_dates": [d.isoformat() for d in self.s1_dates],
            "crop_type": self.crop_type,
            "cell_pixels": self.cell_pixels,
            "grid_cells": self.cells_per_side,
            "pixel_size": self.pixel_size,
            "origin_x": self.origin_x,
            "origin_y": self.origin_y,
            "noise": self.noise,
            "clouds_per_date": self.clouds_per_date,
            "cloud_radius_px": list(self.cloud_radius_px),
            "sar_date_sigma": self.sar_date_sigma,
            "intensity_overrides": {k.value: v for k, v in self.intensity_overrides.items()},
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> SynthConfig:
        data = dict(data)
        if "cloud_radius_px" in data:
            data["cloud_radius_px"] = tuple(data["cloud_radius_px"])
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown synth settings {sorted(unknown)}")
        return cls(**data)


def benchmark_a_config(seed: int = 0, **overrides) -> SynthConfig:
    """2000 parcels, 13 multispectral and 40 SAR dates, 15% anomalies."""
    return SynthConfig(n_parcels=2000, seed=seed, anomaly_mix=dict(BENCHMARK_A_MIX), **overrides)


@dataclass
class SyntheticScene:
    config: SynthConfig
    meta: GridMeta
    parcels: list
    labels: LabelSet
    specs: dict
    s2: dict  # date -> {BandRole: float32 grid}
    s1: dict

    @property
    def s2_dates(self) -> list[date]:
        return sorted(self.s2)

    @property
    def s1_dates(self) -> list[date]:
        return sorted(self.s1)

    def band_grids(self, when: date) -> list[BandGrid]:
        stack = {**self.s2.get(when, {}), **self.s1.get(when, {})}
        if not stack:
            raise KeyError(f"no acquisition at {when}")
        return [BandGrid(self.meta, when, role, values) for role, values in stack.items()]

    def manifest(self) -> dict:
        return {
            "config": self.config.to_dict(),
            "grid": asdict(self.meta),
            "parcels": [
                {"id": p.id, "category": self.labels[p.id].value, "spec": self.specs.get(p.id)}
                for p in self.parcels
            ],
            "intensity_defaults": {
                c.value: {k: list(v) for k, v in d.items()} for c, d in DEFAULT_INTENSITY.items() if d
            },
        }

    def write(self, out_dir) -> Path:
        """Grids under ``rasters/``, ``parcels.geojson``, ``labels.csv``, ``manifest.json``."""
        out = Path(out_dir)
        (out / "rasters").mkdir(parents=True, exist_ok=True)
        for sensor, stacks in (("S2", self.s2), ("S1", self.s1)):
            for when in sorted(stacks):
                for role, values in stacks[when].items():
                    write_grid_file(out / "rasters" / f"{sensor}_{when.isoformat()}_{role.value}", self.meta,
                                    role.value, when, values)
        write_parcels(out / "parcels.geojson", self.parcels)
        write_labels(out / "labels.csv", self.labels)
        (out / "manifest.json").write_text(json.dumps(self.manifest(), indent=2, sort_keys=True) + "\n")
        return out

    def digest(self) -> str:
        h = hashlib.sha256()
        for stacks in (self.s2, self.s1):
            for when in sorted(stacks):
                for role in sorted(stacks[when], key=lambda r: r.value):
                    h.update(f"{when}{role.value}".encode())
                    h.update(np.ascontiguousarray(stacks[when][role]).tobytes())
        h.update(json.dumps(self.manifest(), sort_keys=True).encode())
        return h.hexdigest()


def _parcel_geometry(i: int, cfg: SynthConfig, category: AnomalyCategory, rng: np.random.Generator) -> ParcelPolygon:
    cells = cfg.cells_per_side
    ci, cj = divmod(i, cells)
    ps = cfg.pixel_size
    cell = cfg.cell_pixels
    if category is AnomalyCategory.TOO_SMALL:
        w, h = int(rng.integers(5, 7)), int(rng.integers(5, 8))
    else:
        w, h = int(rng.integers(10, cell - 2)), int(rng.integers(10, cell - 2))
    c0 = int(rng.integers(1, cell - w - 1)) + cj * cell
    r0 = int(rng.integers(1, cell - h - 1)) + ci * cell
    x0 = cfg.origin_x + c0 * ps
    x1 = x0 + w * ps
    y0 = cfg.origin_y - r0 * ps
    y1 = y0 - h * ps
    jx, jy = rng.uniform(-0.9, 0.9, size=2) * ps
    # counter-clockwise ring with the north-east vertex jittered
    ring = [[x0, y1], [x1, y1], [x1 + jx, y0 + jy], [x0, y0], [x0, y1]]
    return ParcelPolygon(f"P{i:05d}", [np.array(ring)], cfg.crop_type)


def _background(shape, rng: np.random.Generator, n_dates: int) -> np.ndarray:
    return np.clip(0.3 + 0.05 * rng.standard_normal((n_dates, 1, 1)) + 0.05 * rng.standard_normal(shape), 0.05, 0.8)


def _cloud_masks(cfg: SynthConfig, shape, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    h, w = shape
    cloud = np.zeros(shape, dtype=bool)
    shadow = np.zeros(shape, dtype=bool)
    n = rng.poisson(cfg.clouds_per_date) if cfg.clouds_per_date > 0 else 0
    yy, xx = np.mgrid[0:h, 0:w]
    for _ in range(n):
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        rad = rng.uniform(*cfg.cloud_radius_px)
        cloud |= (yy - cy) ** 2 + (xx - cx) ** 2 < rad**2
        sy, sx = cy + 1.2 * rad, cx + 0.8 * rad
        shadow |= (yy - sy) ** 2 + (xx - sx) ** 2 < rad**2
    return cloud, shadow & ~cloud


def generate_scene(config: SynthConfig) -> SyntheticScene:
    """Deterministic scene for ``config.seed``."""
    cfg = config
    cfg.validate()
    n = cfg.n_parcels
    side = cfg.cells_per_side * cfg.cell_pixels
    meta = GridMeta(side, side, cfg.pixel_size, cfg.origin_x, cfg.origin_y)
    model = CROP_MODELS[cfg.crop_type]

    scene_rng = np.random.default_rng([cfg.seed, 1 << 30])
    counts = category_counts(cfg.anomaly_mix, n)
    assignment: list[AnomalyCategory | None] = [None] * n
    order = scene_rng.permutation(n)
    pos = 0
    for cat, k in counts.items():
        for idx in order[pos : pos + k]:
            assignment[idx] = cat
        pos += k
    sar_factor = np.exp(cfg.sar_date_sigma * scene_rng.standard_normal(len(cfg.s1_dates)))

    s2_dates, s1_dates = sorted(cfg.s2_dates), sorted(cfg.s1_dates)
    ndvi_img = _background((len(s2_dates), side, side), scene_rng, len(s2_dates))
    bright_img = np.ones((side, side))
    vh_img = np.empty((len(s1_dates), side, side), dtype=np.float32)
    vv_img = np.empty_like(vh_img)
    for k in range(len(s1_dates)):
        vh_img[k] = 0.01 * scene_rng.gamma(4.4, 1 / 4.4, size=(side, side))
        vv_img[k] = 0.08 * scene_rng.gamma(4.4, 1 / 4.4, size=(side, side))

    parcels, labels, specs = [], LabelSet(), {}
    for i in range(n):
        rng = np.random.default_rng([cfg.seed, i])
        cat = assignment[i]
        poly = _parcel_geometry(i, cfg, cat, rng)
        spec = None
        if cat is not None and cat is not AnomalyCategory.TOO_SMALL:
            spec = AnomalySpec.draw(cat, rng, cfg.intensity_overrides.get(cat))
        px = rasterize_polygon(poly, meta)
        patches = generate_parcel_series(
            model, spec, s2_dates, s1_dates, px.rows, px.cols, rng, cfg.noise, sar_factor
        )
        ndvi_img[:, px.rows, px.cols] = patches.ndvi
        bright_img[px.rows, px.cols] = patches.brightness
        vh_img[:, px.rows, px.cols] = patches.vh
        vv_img[:, px.rows, px.cols] = patches.vv
        label = cat or AnomalyCategory.NORMAL_CHECKED
        poly = replace(poly, label=label.value)
        parcels.append(poly)
        labels[poly.id] = label
        specs[poly.id] = spec.to_dict() if spec is not None else {"category": label.value}

    s2 = {}
    band_rng = np.random.default_rng([cfg.seed, (1 << 30) + 1])
    for k, when in enumerate(s2_dates):
        bands = bands_from_ndvi(ndvi_img[k], bright_img, band_rng if cfg.noise else None)
        cloud, shadow = _cloud_masks(cfg, meta.shape, band_rng)
        if cloud.any() or shadow.any():
            for role in bands:
                bands[role] = np.where(cloud, 0.35 + 0.1 * (role is BandRole.NIR), bands[role])
                bands[role] = np.where(shadow, bands[role] * 0.3, bands[role])
        stack = {role: bands[role].astype(np.float32) for role in
                 (BandRole.GREEN, BandRole.RED, BandRole.RE, BandRole.NIR, BandRole.SWIR)}
        stack[BandRole.CLOUD_MASK] = cloud.astype(np.float32)
        stack[BandRole.SHADOW_MASK] = shadow.astype(np.float32)
        s2[when] = stack
    s1 = {
        when: {BandRole.VH: vh_img[k], BandRole.VV: vv_img[k]}
        for k, when in enumerate(s1_dates)
    }
    return SyntheticScene(cfg, meta, parcels, labels, specs, s2, s1)
