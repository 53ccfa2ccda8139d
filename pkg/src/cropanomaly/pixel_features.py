"""Per-pixel vegetation indices and SAR backscatter features."""

from __future__ import annotations

import enum
from dataclasses import dataclass
from datetime import date
from typing import Iterable

import numpy as np

from .geo_raster import BandGrid, BandRole, GridFormatError, GridMeta, read_grid_file, require_aligned, write_grid_file

__all__ = [
    "IndexKind",
    "FeatureGrid",
    "MissingBandError",
    "DEFAULT_S1_FEATURES",
    "DEFAULT_S2_FEATURES",
    "compute_feature",
    "compute_sar_feature",
    "compute_vegetation_index",
    "load_feature_grid",
    "save_feature_grid",
    "to_db",
]

# denominators smaller than this in magnitude yield nodata
DIVISION_GUARD = 1e-12


class MissingBandError(ValueError):
    pass


class IndexKind(str, enum.Enum):
    NDVI = "NDVI"
    NDWI_SWIR = "NDWI_SWIR"
    NDWI_GREEN = "NDWI_GREEN"
    MCARI_OSAVI = "MCARI_OSAVI"
    GRVI = "GRVI"
    GAMMA0_VH = "GAMMA0_VH"
    GAMMA0_VV = "GAMMA0_VV"
    RATIO_VH_VV = "RATIO_VH_VV"
    RVI_S1 = "RVI_S1"

    @property
    def sensor(self) -> str:
        return "S1" if self in _SAR_KINDS else "S2"

    @property
    def required_bands(self) -> tuple[BandRole, ...]:
        return _REQUIRED[self]

    @property
    def order(self) -> int:
        return _ORDER[self]


_SAR_KINDS = {IndexKind.GAMMA0_VH, IndexKind.GAMMA0_VV, IndexKind.RATIO_VH_VV, IndexKind.RVI_S1}
_ORDER = {k: i for i, k in enumerate(IndexKind)}
_REQUIRED = {
    IndexKind.NDVI: (BandRole.NIR, BandRole.RED),
    IndexKind.NDWI_SWIR: (BandRole.NIR, BandRole.SWIR),
    IndexKind.NDWI_GREEN: (BandRole.GREEN, BandRole.NIR),
    IndexKind.MCARI_OSAVI: (BandRole.RE, BandRole.NIR, BandRole.RED),
    IndexKind.GRVI: (BandRole.GREEN, BandRole.RED),
    IndexKind.GAMMA0_VH: (BandRole.VH,),
    IndexKind.GAMMA0_VV: (BandRole.VV,),
    IndexKind.RATIO_VH_VV: (BandRole.VH, BandRole.VV),
    IndexKind.RVI_S1: (BandRole.VH, BandRole.VV),
}

DEFAULT_S2_FEATURES = (
    IndexKind.NDVI,
    IndexKind.NDWI_SWIR,
    IndexKind.NDWI_GREEN,
    IndexKind.MCARI_OSAVI,
    IndexKind.GRVI,
)
DEFAULT_S1_FEATURES = (IndexKind.GAMMA0_VH, IndexKind.GAMMA0_VV)


@dataclass
class FeatureGrid:
    """A pixel-level feature at one date; NaN marks nodata."""

    meta: GridMeta
    date: date
    kind: IndexKind
    values: np.ndarray

    def __post_init__(self):
        self.kind = IndexKind(self.kind)
        self.values = np.asarray(self.values, dtype=np.float64).reshape(self.meta.shape)


def _safe_div(num: np.ndarray, den: np.ndarray) -> np.ndarray:
    out = np.full(np.broadcast(num, den).shape, np.nan)
    ok = np.abs(den) >= DIVISION_GUARD
    np.divide(num, den, out=out, where=ok)
    out[np.isnan(num) | np.isnan(den)] = np.nan
    return out


def _normalized_difference(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return _safe_div(a - b, a + b)


def _by_role(bands: Iterable[BandGrid], kind: IndexKind) -> dict[BandRole, BandGrid]:
    found = {}
    for band in bands:
        found.setdefault(band.band_role, band)
    missing = [r.value for r in kind.required_bands if r not in found]
    if missing:
        raise MissingBandError(f"{kind.value} needs bands {missing}")
    chosen = [found[r] for r in kind.required_bands]
    require_aligned(*(b.meta for b in chosen))
    dates = {b.date for b in chosen}
    if len(dates) > 1:
        raise ValueError(f"{kind.value}: input bands come from different dates {sorted(dates)}")
    return {r: found[r] for r in kind.required_bands}


def compute_vegetation_index(kind: IndexKind, bands: Iterable[BandGrid]) -> FeatureGrid:
    kind = IndexKind(kind)
    if kind.sensor != "S2":
        raise ValueError(f"{kind.value} is not a multispectral index")
    b = _by_role(bands, kind)
    first = next(iter(b.values()))
    v = {role: grid.as_float() for role, grid in b.items()}
    if kind is IndexKind.NDVI:
        out = _normalized_difference(v[BandRole.NIR], v[BandRole.RED])
    elif kind is IndexKind.NDWI_SWIR:
        out = _normalized_difference(v[BandRole.NIR], v[BandRole.SWIR])
    elif kind is IndexKind.NDWI_GREEN:
        out = _normalized_difference(v[BandRole.GREEN], v[BandRole.NIR])
    elif kind is IndexKind.GRVI:
        out = _normalized_difference(v[BandRole.GREEN], v[BandRole.RED])
    else:
        re, nir, red = v[BandRole.RE], v[BandRole.NIR], v[BandRole.RED]
        mcari = (re - nir) - 0.2 * (re - red)
        osavi = _safe_div((1 + 0.16) * (nir - red), nir + red + 0.16)
        out = _safe_div(mcari, osavi)
    return FeatureGrid(first.meta, first.date, kind, out)


def compute_sar_feature(kind: IndexKind, vh: BandGrid | None, vv: BandGrid | None) -> FeatureGrid:
    """Backscatter features on linear-power gamma0."""
    kind = IndexKind(kind)
    if kind.sensor != "S1":
        raise ValueError(f"{kind.value} is not a SAR feature")
    needed = [g for g, r in ((vh, BandRole.VH), (vv, BandRole.VV)) if r in kind.required_bands]
    if any(g is None for g in needed):
        raise MissingBandError(f"{kind.value} needs bands {[r.value for r in kind.required_bands]}")
    require_aligned(*(g.meta for g in needed))
    ref = needed[0]
    if kind is IndexKind.GAMMA0_VH:
        out = vh.as_float()
    elif kind is IndexKind.GAMMA0_VV:
        out = vv.as_float()
    elif kind is IndexKind.RATIO_VH_VV:
        out = _safe_div(vh.as_float(), vv.as_float())
    else:
        a, b = vh.as_float(), vv.as_float()
        out = _safe_div(4.0 * a, a + b)
    return FeatureGrid(ref.meta, ref.date, kind, out)


def compute_feature(kind: IndexKind, bands: Iterable[BandGrid]) -> FeatureGrid:
    kind = IndexKind(kind)
    bands = list(bands)
    if kind.sensor == "S2":
        return compute_vegetation_index(kind, bands)
    by_role = {b.band_role: b for b in bands}
    return compute_sar_feature(kind, by_role.get(BandRole.VH), by_role.get(BandRole.VV))


def to_db(values: np.ndarray) -> np.ndarray:
    """10*log10 of linear power; non-positive input maps to NaN. For plots."""
    values = np.asarray(values, dtype=float)
    out = np.full(values.shape, np.nan)
    ok = values > 0
    out[ok] = 10.0 * np.log10(values[ok])
    return out


def save_feature_grid(path, grid: FeatureGrid):
    values = np.where(np.isnan(grid.values), grid.meta.nodata, grid.values)
    return write_grid_file(path, grid.meta, grid.kind.value, grid.date, values)


def load_feature_grid(path) -> FeatureGrid:
    meta, role, when, values = read_grid_file(path)
    try:
        kind = IndexKind(role)
    except ValueError:
        raise GridFormatError(f"unknown feature kind {role!r}") from None
    out = values.astype(np.float64)
    out[meta.is_nodata(values)] = np.nan
    return FeatureGrid(meta, when, kind, out)
